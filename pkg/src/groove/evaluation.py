"""Meta-test harness: normalized scores, held-out suites and experiment drivers."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from .agent import DenseAgent
from .antagonist import AntagonistCache, AntagonistConfig, AntagonistKind
from .curator import Curator, CuratorConfig
from .gridworld import (
    CompiledLevels,
    DistributionConfig,
    Level,
    evaluate_episodes,
    sample_level,
    solve_optimal,
    table_policy,
)
from .lpg import AgentConfig, OptimizerParams, train_lifetimes
from .scoring import ScoreKind
from .trainer import Trainer, TrainRunConfig, fixed_set_sampler

NORMALIZATION_EPS = 1e-2
CLIP = (-1.0, 2.0)


class OverlapError(ValueError):
    pass


@dataclass(frozen=True)
class NormalizedScore:
    raw: float
    a2c: float
    random: float

    @property
    def value(self) -> float:
        z = (self.raw - self.random) / max(self.a2c - self.random, NORMALIZATION_EPS)
        return float(np.clip(z, *CLIP))


def normalized(raw, a2c, rand) -> np.ndarray:
    raw, a2c, rand = np.broadcast_arrays(np.asarray(raw, float), np.asarray(a2c, float),
                                         np.asarray(rand, float))
    return np.clip((raw - rand) / np.maximum(a2c - rand, NORMALIZATION_EPS), *CLIP)


def _hash_int(level: Level) -> int:
    return int(level.content_hash()[:12], 16)


@dataclass
class EvalConfig:
    agent: AgentConfig = field(default_factory=lambda: AgentConfig(num_envs=8))
    eval_episodes: int = 128
    gamma: float = 0.99
    antagonist: AntagonistConfig = field(default_factory=lambda: AntagonistConfig(num_envs=8))
    baseline_seed: int = 0


@dataclass
class EvalResult:
    levels: list[Level]
    seeds: list[int]
    raw: np.ndarray          # (seeds, levels)
    a2c: np.ndarray          # (levels,)
    random: np.ndarray       # (levels,)

    @property
    def scores(self) -> np.ndarray:
        return normalized(self.raw, self.a2c[None, :], self.random[None, :])

    def per_seed_mean(self) -> np.ndarray:
        return self.scores.mean(axis=1)

    def fraction_below(self, threshold: float = 0.75) -> float:
        return float((self.scores.mean(axis=0) < threshold).mean())


def check_disjoint(test: Sequence[Level], train: Sequence[Level] | None) -> None:
    if not train:
        return
    overlap = {lv.content_hash() for lv in test} & {lv.content_hash() for lv in train}
    if overlap:
        raise OverlapError(f"{len(overlap)} evaluation level(s) also appear in the training set")


def baselines(levels: Sequence[Level], cfg: EvalConfig, cache: AntagonistCache | None = None):
    """Per-level (A2C return, random return)."""
    cache = cache or AntagonistCache(cfg.antagonist)
    a2c = cache.returns(AntagonistKind.A2C, levels, cfg.baseline_seed)
    rnd = cache.returns(AntagonistKind.RANDOM, levels, cfg.baseline_seed)
    return np.array([r.value for r in a2c]), np.array([r.value for r in rnd])


def trained_returns(eta: OptimizerParams, levels: Sequence[Level], seed: int, cfg: EvalConfig,
                    mode: str = "tabular") -> np.ndarray:
    """Train a fresh agent per level with ``eta`` and return its final discounted return."""
    levels = list(levels)
    agent_cfg = replace(cfg.agent, mode=mode)
    if mode == "dense":
        tables = []
        for lv in levels:
            rng = np.random.default_rng([seed, 4, _hash_int(lv)])
            agent = train_lifetimes(eta, [lv], [rng], agent_cfg)[0]
            assert isinstance(agent, DenseAgent)
            tables.append(agent.policy_probs())
    else:
        rngs = [np.random.default_rng([seed, 4, _hash_int(lv)]) for lv in levels]
        tables = [a.policy_probs() for a in train_lifetimes(eta, levels, rngs, agent_cfg)]
    comp = CompiledLevels(levels)
    eval_rngs = [np.random.default_rng([seed, 5, _hash_int(lv)]) for lv in levels]
    res = evaluate_episodes(comp, table_policy(np.concatenate(tables)), cfg.eval_episodes,
                            eval_rngs, cfg.gamma)
    return res.mean()


def eval_optimizer(eta: OptimizerParams, levels: Sequence[Level], mode: str = "tabular",
                   seeds: Sequence[int] = (0,), cfg: EvalConfig | None = None,
                   train_levels: Sequence[Level] | None = None,
                   cache: AntagonistCache | None = None) -> EvalResult:
    cfg = cfg or EvalConfig()
    levels = list(levels)
    if not levels:
        raise ValueError("no evaluation levels given")
    check_disjoint(levels, train_levels)
    a2c, rnd = baselines(levels, cfg, cache)
    raw = np.stack([trained_returns(eta, levels, s, cfg, mode) for s in seeds])
    return EvalResult(levels, list(seeds), raw, a2c, rnd)


# ---------------------------------------------------------------- level suites


def nearest_positive_distance(level: Level) -> int | None:
    ds = [level.shortest_distance(o.position) for o in level.objects if o.reward > 0]
    ds = [d for d in ds if d is not None]
    return min(ds) if ds else None


def filtered_suite(count: int, rng: np.random.Generator, dist: DistributionConfig,
                   accept: Callable[[Level], bool], max_draws: int = 100_000) -> list[Level]:
    out, seen = [], set()
    for _ in range(max_draws):
        if len(out) == count:
            return out
        lv = sample_level(rng, dist)
        if lv.content_hash() in seen or not accept(lv):
            continue
        seen.add(lv.content_hash())
        out.append(lv)
    raise RuntimeError(f"only {len(out)} of {count} levels passed the filter")


HARD_DISTRIBUTION = DistributionConfig(wall_density=(0.15, 0.3))


def hard_suite(count: int = 50, seed: int = 1000,
               dist: DistributionConfig = HARD_DISTRIBUTION, min_distance: int = 5) -> list[Level]:
    """Held-out levels with a reachable reward at least ``min_distance`` steps away."""
    def accept(lv):
        d = nearest_positive_distance(lv)
        return d is not None and d >= min_distance and solve_optimal(lv).value > 0
    return filtered_suite(count, np.random.default_rng([seed, 7]), dist, accept)


def easy_suite(count: int = 20, seed: int = 2000,
               dist: DistributionConfig = DistributionConfig(), max_distance: int = 3
               ) -> list[Level]:
    """Held-out levels with a positive object within ``max_distance`` steps."""
    def accept(lv):
        d = nearest_positive_distance(lv)
        return d is not None and d <= max_distance and solve_optimal(lv).value > 0
    return filtered_suite(count, np.random.default_rng([seed, 8]), dist, accept)


def random_levels(count: int, seed: int, dist: DistributionConfig = DistributionConfig()
                  ) -> list[Level]:
    rng = np.random.default_rng([seed, 9])
    return [sample_level(rng, dist) for _ in range(count)]


# ----------------------------------------------------------------- experiments


def static_run(levels: Sequence[Level], cfg: TrainRunConfig, cache=None) -> OptimizerParams:
    """Meta-train on a fixed level set with the curator disabled."""
    cur = Curator(CuratorConfig(p_replay=0.0))
    cfg = replace(cfg, score_kind=ScoreKind.UNIFORM.value)
    return Trainer(cfg, curator=cur, sampler=fixed_set_sampler(levels), cache=cache).run().eta


@dataclass
class DiversityResult:
    sizes: list[int]
    source: str
    returns: np.ndarray   # (sizes, seeds) mean held-out normalized score
    pmcc: float
    p_value: float        # one-sided, positive correlation


def diversity_experiment(sizes: Sequence[int], source: str, seeds: Sequence[int],
                         cfg: TrainRunConfig, test_levels: Sequence[Level],
                         eval_cfg: EvalConfig | None = None, buffer: Curator | None = None,
                         cache: AntagonistCache | None = None, pool_seed: int = 0
                         ) -> DiversityResult:
    """Meta-train per (size, seed) on fixed level subsets and evaluate held out."""
    sizes = list(sizes)
    if sizes != sorted(sizes):
        raise ValueError("sizes must be ascending")
    if source == "max-ar":
        if buffer is None or len(buffer) < max(sizes):
            raise ValueError("max-AR source needs a scored buffer at least as large as the "
                             "largest size")
        pool = buffer.top_levels(max(sizes))
    elif source == "handcrafted":
        from .gridworld import all_handcrafted
        pool = all_handcrafted()
        if max(sizes) > len(pool):
            raise ValueError(f"only {len(pool)} handcrafted levels exist")
    elif source == "random":
        pool = None
    else:
        raise ValueError(f"unknown source {source!r}")
    eval_cfg = eval_cfg or EvalConfig()
    out = np.zeros((len(sizes), len(seeds)))
    for j, seed in enumerate(seeds):
        for i, size in enumerate(sizes):
            if pool is None:
                subset = random_levels(size, pool_seed * 1000 + seed)
            elif source == "max-ar":
                subset = pool[:size]
            else:
                subset = pool[:size]
            eta = static_run(subset, replace(cfg, seed=seed), cache)
            res = eval_optimizer(eta, test_levels, seeds=[seed], cfg=eval_cfg,
                                 train_levels=subset, cache=cache)
            out[i, j] = res.scores.mean()
    x = np.repeat(np.log2(sizes), len(seeds)).astype(float)
    y = out.reshape(-1)
    r, p = pearson(x, y)
    return DiversityResult(sizes, source, out, r, p)


@dataclass
class AblationResult:
    kinds: list[str]
    seeds: list[int]
    scores: np.ndarray    # (kinds, seeds) mean held-out normalized score
    below: np.ndarray     # (kinds, seeds) fraction of levels under 0.75

    def mean(self) -> np.ndarray:
        return self.scores.mean(axis=1)

    def stderr(self) -> np.ndarray:
        n = self.scores.shape[1]
        return self.scores.std(axis=1, ddof=1) / np.sqrt(n) if n > 1 else np.zeros(len(self.kinds))

    def paired_test(self, a: str, b: str) -> tuple[float, float]:
        """One-sided paired t-test that ``a`` beats ``b``: (mean difference, p)."""
        d = self.scores[self.kinds.index(a)] - self.scores[self.kinds.index(b)]
        if len(d) < 2 or np.allclose(d, d[0]):
            return float(d.mean()), float("nan")
        t = stats.ttest_1samp(d, 0.0, alternative="greater")
        return float(d.mean()), float(t.pvalue)


def scorer_ablation(kinds: Sequence[str], seeds: Sequence[int], cfg: TrainRunConfig,
                    test_levels: Sequence[Level], eval_cfg: EvalConfig | None = None,
                    cache: AntagonistCache | None = None,
                    antagonists: Sequence[str] | None = None) -> AblationResult:
    """Full curated runs per score kind (or per antagonist kind when ``antagonists`` is set)."""
    eval_cfg = eval_cfg or EvalConfig()
    rows = list(antagonists) if antagonists else [ScoreKind(k).value for k in kinds]
    scores = np.zeros((len(rows), len(seeds)))
    below = np.zeros_like(scores)
    for i, row in enumerate(rows):
        for j, seed in enumerate(seeds):
            if antagonists:
                run_cfg = replace(cfg, seed=seed, score_kind=ScoreKind.AR.value,
                                  antagonist_kind=AntagonistKind(row).value)
            else:
                run_cfg = replace(cfg, seed=seed, score_kind=row)
            eta = Trainer(run_cfg, cache=cache).run().eta
            res = eval_optimizer(eta, test_levels, seeds=[seed], cfg=eval_cfg, cache=cache)
            scores[i, j] = res.scores.mean()
            below[i, j] = res.fraction_below(0.75)
    return AblationResult(rows, list(seeds), scores, below)


def antagonist_table(levels: Sequence[Level], seeds: Sequence[int],
                     cfg: AntagonistConfig = AntagonistConfig(num_envs=8),
                     kinds: Sequence[str] = ("random", "expert", "a2c", "ppo")) -> dict:
    """Mean final return (and standard error over seeds) of each antagonist kind."""
    table = {}
    for kind in kinds:
        per_seed = []
        for seed in seeds:
            cache = AntagonistCache(cfg)
            per_seed.append(np.mean([r.value for r in cache.returns(kind, levels, seed)]))
        per_seed = np.array(per_seed)
        se = per_seed.std(ddof=1) / np.sqrt(len(per_seed)) if len(per_seed) > 1 else 0.0
        table[kind] = (float(per_seed.mean()), float(se))
    return table


# ------------------------------------------------------------------ statistics


@dataclass(frozen=True)
class AggregateStats:
    iqm: float
    optimality_gap: float
    iqm_ci: tuple[float, float]
    gap_ci: tuple[float, float]
    pmcc: float | None = None


def iqm(x) -> float:
    """Mean of the middle half of the sorted sample (fractional weights at the cut)."""
    x = np.sort(np.asarray(x, float).ravel())
    n = len(x)
    lo, hi = 0.25 * n, 0.75 * n
    # weight of each sorted element inside [lo, hi]
    idx = np.arange(n)
    w = np.clip(np.minimum(idx + 1, hi) - np.maximum(idx, lo), 0.0, 1.0)
    return float((w * x).sum() / w.sum())


def optimality_gap(x, target: float = 1.0) -> float:
    return float(np.mean(np.maximum(target - np.asarray(x, float), 0.0)))


def pearson(x, y) -> tuple[float, float]:
    """Pearson r and the one-sided p-value for a positive correlation."""
    x, y = np.asarray(x, float), np.asarray(y, float)
    if np.std(x) == 0 or np.std(y) == 0:
        return 0.0, 1.0
    res = stats.pearsonr(x, y, alternative="greater")
    return float(res.statistic), float(res.pvalue)


def aggregate(scores: np.ndarray, num_resamples: int = 10_000, seed: int = 0,
              x_for_pmcc=None) -> AggregateStats:
    """Aggregate a (seeds, tasks) score matrix; seeds are resampled within each task."""
    scores = np.asarray(scores, float)
    if scores.ndim != 2 or scores.shape[0] < 2:
        raise ValueError("aggregate needs a (seeds >= 2, tasks) score matrix")
    rng = np.random.default_rng(seed)
    S, M = scores.shape
    point_iqm, point_gap = iqm(scores), optimality_gap(scores)
    iqms, gaps = np.empty(num_resamples), np.empty(num_resamples)
    for b in range(num_resamples):
        pick = rng.integers(0, S, size=(S, M))
        sample = np.take_along_axis(scores, pick, axis=0)
        iqms[b] = iqm(sample)
        gaps[b] = optimality_gap(sample)

    def ci(v, point):
        lo, hi = np.percentile(v, [2.5, 97.5])
        return (float(min(lo, point)), float(max(hi, point)))

    pmcc = None
    if x_for_pmcc is not None:
        pmcc = pearson(np.repeat(np.asarray(x_for_pmcc, float)[None, :], S, 0).ravel(),
                       scores.ravel())[0]
    return AggregateStats(point_iqm, point_gap, ci(iqms, point_iqm), ci(gaps, point_gap), pmcc)
