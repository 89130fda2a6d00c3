"""The five handcrafted Grid-World configurations.

Sizes, object parameters ``[r, eps_term, eps_respawn]`` and episode lengths
are fixed; the layouts (no interior walls, start in the centre, objects in
corners or along the edges) are this package's own choice.
"""
from __future__ import annotations

from .level import Level, ObjectSpec, empty_walls


def _obj(pos, r, term, respawn):
    return ObjectSpec(pos, float(r), float(term), float(respawn))


def _dense() -> Level:
    return Level(empty_walls(11, 11), (5, 5), (
        _obj((1, 1), 1, 0, 0.05), _obj((9, 9), 1, 0, 0.05),
        _obj((1, 9), -1, 0.5, 0.1), _obj((9, 1), -1, 0, 0.5)), 500)


def _sparse() -> Level:
    return Level(empty_walls(13, 13), (6, 6), (
        _obj((0, 12), 1, 1, 0), _obj((12, 0), -1, 1, 0)), 50)


def _long_horizon() -> Level:
    return Level(empty_walls(11, 11), (5, 5), (
        _obj((0, 0), 1, 0, 0.01), _obj((10, 10), 1, 0, 0.01),
        _obj((0, 10), -1, 0.5, 1), _obj((10, 0), -1, 0.5, 1)), 1000)


def _longer_horizon() -> Level:
    return Level(empty_walls(9, 9), (4, 4), (
        _obj((0, 0), 1, 0.1, 0.01), _obj((8, 8), 1, 0.1, 0.01),
        _obj((0, 8), -1, 0.8, 1), _obj((8, 0), -1, 0.8, 1), _obj((0, 4), -1, 0.8, 1),
        _obj((8, 4), -1, 0.8, 1), _obj((4, 0), -1, 0.8, 1)), 2000)


def _long_dense() -> Level:
    return Level(empty_walls(11, 11), (5, 5), (
        _obj((0, 0), 1, 0, 0.005), _obj((0, 10), 1, 0, 0.005),
        _obj((10, 0), 1, 0, 0.005), _obj((10, 10), 1, 0, 0.005)), 2000)


_BUILDERS = {
    "dense": _dense,
    "sparse": _sparse,
    "long_horizon": _long_horizon,
    "longer_horizon": _longer_horizon,
    "long_dense": _long_dense,
}

NAMES = tuple(_BUILDERS)


def handcrafted(name: str, lifetime: int = 2500) -> Level:
    try:
        builder = _BUILDERS[name]
    except KeyError:
        raise KeyError(f"unknown handcrafted level {name!r}; choose from {NAMES}") from None
    return builder().with_lifetime(lifetime)


def all_handcrafted(lifetime: int = 2500) -> list[Level]:
    return [handcrafted(n, lifetime) for n in NAMES]
