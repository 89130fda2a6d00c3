"""Grid-World level description and its YAML text format."""
from __future__ import annotations

import hashlib
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable

import yaml

MAX_SIZE = 13
MAX_OBJECTS = 7  # the longer_horizon handcrafted level carries 7
WALL, FREE = "#", "."

# up, down, left, right
ACTIONS = ((-1, 0), (1, 0), (0, -1), (0, 1))
NUM_ACTIONS = len(ACTIONS)


class LevelError(ValueError):
    pass


@dataclass(frozen=True)
class ObjectSpec:
    position: tuple[int, int]
    reward: float
    eps_term: float
    eps_respawn: float

    def as_record(self) -> dict:
        return {"pos": list(self.position), "reward": float(self.reward),
                "eps_term": float(self.eps_term), "eps_respawn": float(self.eps_respawn)}


@dataclass(frozen=True)
class Level:
    walls: tuple[str, ...]
    start: tuple[int, int]
    objects: tuple[ObjectSpec, ...]
    max_steps: int
    lifetime: int = 2500
    _hash: str = field(default="", init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "walls", tuple(self.walls))
        object.__setattr__(self, "start", tuple(int(v) for v in self.start))
        object.__setattr__(self, "objects", tuple(self.objects))
        self.validate()

    @property
    def rows(self) -> int:
        return len(self.walls)

    @property
    def cols(self) -> int:
        return len(self.walls[0])

    @property
    def num_objects(self) -> int:
        return len(self.objects)

    def is_wall(self, r: int, c: int) -> bool:
        return self.walls[r][c] == WALL

    def in_grid(self, r: int, c: int) -> bool:
        return 0 <= r < self.rows and 0 <= c < self.cols

    def validate(self) -> None:
        if not self.walls or not (1 <= self.rows <= MAX_SIZE):
            raise LevelError(f"rows must be in [1, {MAX_SIZE}]")
        if any(len(row) != self.cols for row in self.walls) or not (1 <= self.cols <= MAX_SIZE):
            raise LevelError(f"wall rows must share a width in [1, {MAX_SIZE}]")
        if any(ch not in (WALL, FREE) for row in self.walls for ch in row):
            raise LevelError("walls may only contain '#' and '.'")
        if len(self.objects) > MAX_OBJECTS:
            raise LevelError(f"at most {MAX_OBJECTS} objects, got {len(self.objects)}")
        if self.max_steps < 1 or self.lifetime < 1:
            raise LevelError("max_steps and lifetime must be positive")
        if not self.in_grid(*self.start) or self.is_wall(*self.start):
            raise LevelError(f"start {self.start} is off-grid or on a wall")
        seen = {self.start}
        for obj in self.objects:
            if not self.in_grid(*obj.position) or self.is_wall(*obj.position):
                raise LevelError(f"object at {obj.position} is off-grid or on a wall")
            if obj.position in seen:
                raise LevelError(f"object at {obj.position} overlaps start or another object")
            seen.add(obj.position)
            for p in (obj.eps_term, obj.eps_respawn):
                if not 0.0 <= p <= 1.0:
                    raise LevelError(f"probability {p} outside [0, 1]")

    def reachable_cells(self) -> list[tuple[int, int]]:
        """Cells reachable from the start, in row-major order."""
        seen = {self.start}
        queue = deque([self.start])
        while queue:
            r, c = queue.popleft()
            for dr, dc in ACTIONS:
                nxt = (r + dr, c + dc)
                if self.in_grid(*nxt) and not self.is_wall(*nxt) and nxt not in seen:
                    seen.add(nxt)
                    queue.append(nxt)
        return sorted(seen)

    def shortest_distance(self, target: tuple[int, int]) -> int | None:
        """BFS step count from start to ``target``; None when unreachable."""
        dist = {self.start: 0}
        queue = deque([self.start])
        while queue:
            cur = queue.popleft()
            if cur == target:
                return dist[cur]
            for dr, dc in ACTIONS:
                nxt = (cur[0] + dr, cur[1] + dc)
                if self.in_grid(*nxt) and not self.is_wall(*nxt) and nxt not in dist:
                    dist[nxt] = dist[cur] + 1
                    queue.append(nxt)
        return None

    def num_states(self) -> int:
        return len(self.reachable_cells()) * (1 << self.num_objects)

    def to_record(self) -> dict:
        return {
            "size": [self.rows, self.cols],
            "walls": list(self.walls),
            "start": list(self.start),
            "objects": [o.as_record() for o in self.objects],
            "max_steps": int(self.max_steps),
            "lifetime": int(self.lifetime),
        }

    @classmethod
    def from_record(cls, rec: dict) -> "Level":
        try:
            walls = tuple(rec["walls"])
            rows, cols = rec["size"]
            if len(walls) != rows or any(len(w) != cols for w in walls):
                raise LevelError(f"size {rec['size']} disagrees with wall rows")
            objects = tuple(
                ObjectSpec(tuple(o["pos"]), float(o["reward"]), float(o["eps_term"]),
                           float(o["eps_respawn"]))
                for o in rec.get("objects") or [])
            return cls(walls, tuple(rec["start"]), objects, int(rec["max_steps"]),
                       int(rec.get("lifetime", 2500)))
        except (KeyError, TypeError) as exc:
            raise LevelError(f"malformed level record: {exc!r}") from exc

    def dumps(self) -> str:
        return yaml.safe_dump(self.to_record(), sort_keys=False, default_flow_style=None)

    @classmethod
    def loads(cls, text: str) -> "Level":
        return cls.from_record(yaml.safe_load(text))

    def content_hash(self) -> str:
        if not self._hash:
            digest = hashlib.sha256(self.dumps().encode()).hexdigest()
            object.__setattr__(self, "_hash", digest)
        return self._hash

    def with_lifetime(self, lifetime: int) -> "Level":
        return Level(self.walls, self.start, self.objects, self.max_steps, lifetime)

    def render(self) -> str:
        grid = [list(row) for row in self.walls]
        grid[self.start[0]][self.start[1]] = "S"
        for obj in self.objects:
            grid[obj.position[0]][obj.position[1]] = "+" if obj.reward > 0 else "-"
        return "\n".join("".join(row) for row in grid)


def empty_walls(rows: int, cols: int) -> tuple[str, ...]:
    return tuple(FREE * cols for _ in range(rows))


def dump_levels(levels: Iterable[Level]) -> str:
    return yaml.safe_dump_all([lv.to_record() for lv in levels], sort_keys=False,
                              default_flow_style=None)


def load_levels(text: str) -> list[Level]:
    return [Level.from_record(rec) for rec in yaml.safe_load_all(text) if rec is not None]
