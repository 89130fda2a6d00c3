"""Domain-randomized level sampling."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from .level import FREE, WALL, Level, ObjectSpec

MAX_REJECTIONS = 1000


class SamplerConfigError(RuntimeError):
    pass


@dataclass(frozen=True)
class DistributionConfig:
    grid_sizes: tuple[int, ...] = (9, 11, 13)
    wall_density: tuple[float, float] = (0.0, 0.3)
    num_objects: tuple[int, int] = (1, 6)
    reward_mode: str = "binary"  # "binary" -> r in {-1, +1}; "uniform" -> r ~ U[-1, 1]
    eps_term: tuple[float, ...] = (0.0, 0.1, 0.5, 1.0)
    eps_respawn: tuple[float, ...] = (0.0, 0.005, 0.01, 0.05, 0.1, 0.5, 1.0)
    max_steps: tuple[int, ...] = (50, 500, 1000, 2000)
    lifetime: int = 2500
    lifetime_choices: tuple[int, ...] = ()

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, list):
                object.__setattr__(self, f.name, tuple(v))
        if self.reward_mode not in ("binary", "uniform"):
            raise SamplerConfigError(f"unknown reward_mode {self.reward_mode!r}")
        lo, hi = self.num_objects
        if not 0 <= lo <= hi <= 6:
            raise SamplerConfigError(f"num_objects range {self.num_objects} outside [0, 6]")
        if not 0.0 <= self.wall_density[0] <= self.wall_density[1] < 1.0:
            raise SamplerConfigError(f"bad wall_density range {self.wall_density}")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


def sample_level(rng: np.random.Generator, config: DistributionConfig = DistributionConfig()) -> Level:
    """Draw one level with uniformly sampled free parameters.

    The distribution is unfiltered: objects may be walled off from the start.
    """
    for _ in range(MAX_REJECTIONS):
        size = int(rng.choice(config.grid_sizes))
        density = rng.uniform(*config.wall_density) if config.wall_density[1] > 0 else 0.0
        wall_mask = rng.random((size, size)) < density
        free = np.flatnonzero(~wall_mask.ravel())
        n_obj = int(rng.integers(config.num_objects[0], config.num_objects[1] + 1))
        if len(free) < n_obj + 1:
            continue
        cells = rng.choice(free, size=n_obj + 1, replace=False)
        start = divmod(int(cells[0]), size)
        objects = []
        for cell in cells[1:]:
            if config.reward_mode == "binary":
                reward = float(rng.choice((-1.0, 1.0)))
            else:
                reward = float(rng.uniform(-1.0, 1.0))
            objects.append(ObjectSpec(divmod(int(cell), size), reward,
                                      float(rng.choice(config.eps_term)),
                                      float(rng.choice(config.eps_respawn))))
        lifetime = (int(rng.choice(config.lifetime_choices)) if config.lifetime_choices
                    else config.lifetime)
        walls = tuple("".join(WALL if w else FREE for w in row) for row in wall_mask)
        return Level(walls, start, tuple(objects), int(rng.choice(config.max_steps)), lifetime)
    raise SamplerConfigError(f"no valid level after {MAX_REJECTIONS} draws; check {config}")
