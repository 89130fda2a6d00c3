"""Prioritised level replay buffer."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
from scipy.stats import rankdata

from .gridworld import Level

REPLAYED = "replayed"
FRESH = "fresh"


@dataclass(frozen=True)
class CuratorConfig:
    capacity: int = 4000
    p_replay: float = 0.5
    temperature: float = 1.0
    staleness: float = 0.3

    def __post_init__(self):
        if self.capacity < 1:
            raise ValueError("capacity must be >= 1")
        if not 0.0 <= self.p_replay <= 1.0:
            raise ValueError("p_replay must lie in [0, 1]")
        if self.temperature <= 0.0:
            raise ValueError("temperature must be > 0")
        if not 0.0 <= self.staleness <= 1.0:
            raise ValueError("staleness must lie in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class BufferEntry:
    level: Level
    score: float
    last_visit: int
    visits: int = 1
    inserted: int = 0


@dataclass
class Curator:
    config: CuratorConfig = field(default_factory=CuratorConfig)
    entries: list[BufferEntry] = field(default_factory=list)
    _index: dict[str, int] = field(default_factory=dict)
    _counter: int = 0

    def __len__(self) -> int:
        return len(self.entries)

    def scores(self) -> np.ndarray:
        return np.array([e.score for e in self.entries])

    def probabilities(self, batch_index: int) -> np.ndarray:
        """Replay distribution mixing rank priority and staleness."""
        n = len(self.entries)
        if n == 0:
            return np.zeros(0)
        scores = self.scores()
        ranks = rankdata(-scores, method="average")  # ties share a rank
        logits = -np.log(ranks) / self.config.temperature
        rank_p = np.exp(logits - logits.max())
        rank_p /= rank_p.sum()
        stale = np.array([batch_index - e.last_visit for e in self.entries], dtype=float)
        stale = np.maximum(stale, 0.0)
        stale_p = stale / stale.sum() if stale.sum() > 0 else np.full(n, 1.0 / n)
        rho = self.config.staleness
        return (1.0 - rho) * rank_p + rho * stale_p

    def next_level(self, rng: np.random.Generator, sampler: Callable[[np.random.Generator], Level],
                   batch_index: int = 0) -> tuple[Level, str]:
        """Replay from the buffer with probability p_replay, otherwise sample a fresh level."""
        u = rng.random()
        if self.entries and u < self.config.p_replay:
            i = int(rng.choice(len(self.entries), p=self.probabilities(batch_index)))
            entry = self.entries[i]
            entry.visits += 1
            return entry.level, REPLAYED
        return sampler(rng), FRESH

    def report_score(self, level: Level, score: float, batch_index: int) -> bool:
        """Record a score; returns whether the level is in the buffer afterwards."""
        score = float(getattr(score, "value", score))
        if not math.isfinite(score):
            raise ValueError(f"non-finite score {score}")
        key = level.content_hash()
        i = self._index.get(key)
        if i is not None:
            entry = self.entries[i]
            entry.score = score
            entry.last_visit = batch_index
            return True
        if len(self.entries) >= self.config.capacity:
            scores = self.scores()
            worst = int(np.argmin(scores))
            if score <= scores[worst]:
                return False
            self._evict(worst)
        self._counter += 1
        self._index[key] = len(self.entries)
        self.entries.append(BufferEntry(level, score, batch_index, 1, self._counter))
        return True

    def _evict(self, i: int) -> None:
        del self._index[self.entries[i].level.content_hash()]
        last = self.entries.pop()
        if i < len(self.entries):
            self.entries[i] = last
            self._index[last.level.content_hash()] = i

    def top_levels(self, k: int) -> list[Level]:
        order = np.argsort(-self.scores(), kind="stable")[:k]
        return [self.entries[i].level for i in order]

    def stats(self) -> dict:
        s = self.scores()
        if len(s) == 0:
            return {"buffer_size": 0}
        return {"buffer_size": len(s), "buffer_score_mean": float(s.mean()),
                "buffer_score_max": float(s.max()), "buffer_score_min": float(s.min())}

    # -------------------------------------------------------------- snapshots

    def snapshot(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "counter": self._counter,
            "entries": [{"level": e.level.to_record(), "score": e.score, "last_visit": e.last_visit,
                         "visits": e.visits, "inserted": e.inserted} for e in self.entries],
        }

    @classmethod
    def from_snapshot(cls, snap: dict) -> "Curator":
        cur = cls(CuratorConfig(**snap["config"]))
        cur._counter = int(snap["counter"])
        for rec in snap["entries"]:
            entry = BufferEntry(Level.from_record(rec["level"]), float(rec["score"]),
                                int(rec["last_visit"]), int(rec["visits"]), int(rec["inserted"]))
            cur._index[entry.level.content_hash()] = len(cur.entries)
            cur.entries.append(entry)
        return cur
