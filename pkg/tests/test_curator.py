import numpy as np
import pytest
from scipy import stats

from groove.curator import FRESH, REPLAYED, Curator, CuratorConfig
from groove.gridworld import DistributionConfig, sample_level


def _levels(n, seed=0):
    rng = np.random.default_rng(seed)
    out, seen = [], set()
    while len(out) < n:
        lv = sample_level(rng)
        if lv.content_hash() not in seen:
            seen.add(lv.content_hash())
            out.append(lv)
    return out


def _sampler(rng):
    return sample_level(rng, DistributionConfig(grid_sizes=(9,)))


def test_defaults_pin_buffer_size_and_replay_probability():
    cfg = CuratorConfig()
    assert cfg.capacity == 4000
    assert cfg.p_replay == 0.5


@pytest.mark.parametrize("kwargs", [dict(capacity=0), dict(p_replay=1.5), dict(temperature=0.0),
                                    dict(staleness=-0.1)])
def test_invalid_config(kwargs):
    with pytest.raises(ValueError):
        CuratorConfig(**kwargs)


def test_empty_buffer_and_zero_replay_always_fresh():
    rng = np.random.default_rng(0)
    cur = Curator()
    assert all(cur.next_level(rng, _sampler)[1] == FRESH for _ in range(50))
    cur = Curator(CuratorConfig(p_replay=0.0))
    cur.report_score(_levels(1)[0], 1.0, 0)
    assert all(cur.next_level(rng, _sampler)[1] == FRESH for _ in range(50))


def test_replay_fraction_within_three_sigma():
    cur = Curator()
    for i, lv in enumerate(_levels(5)):
        cur.report_score(lv, float(i), 0)
    rng = np.random.default_rng(1)
    n = 10_000
    k = sum(cur.next_level(rng, _sampler)[1] == REPLAYED for _ in range(n))
    sigma = np.sqrt(n * 0.5 * 0.5)
    assert abs(k - n * 0.5) <= 3 * sigma


def test_low_temperature_prefers_top_score():
    cur = Curator(CuratorConfig(p_replay=1.0, temperature=1e-3, staleness=0.0))
    hi, lo = _levels(2)
    cur.report_score(hi, 10.0, 0)
    cur.report_score(lo, 0.0, 0)
    rng = np.random.default_rng(2)
    n = 10_000
    hits = sum(cur.next_level(rng, _sampler)[0] is hi for _ in range(n))
    p = cur.probabilities(0)[0]
    assert p > 1 - 1e-12
    assert hits >= n * p - 3 * np.sqrt(n * p * (1 - p)) - 1


def test_replay_distribution_matches_probabilities():
    cur = Curator(CuratorConfig(p_replay=1.0))
    levels = _levels(4)
    for i, lv in enumerate(levels):
        cur.report_score(lv, float(i), batch_index=i)
    probs = cur.probabilities(10)
    rng = np.random.default_rng(3)
    idx = {lv.content_hash(): i for i, lv in enumerate(levels)}
    counts = np.zeros(4)
    for _ in range(10_000):
        counts[idx[cur.next_level(rng, _sampler, 10)[0].content_hash()]] += 1
    assert stats.chisquare(counts, 10_000 * probs).pvalue > 0.001
    np.testing.assert_allclose(probs.sum(), 1.0)


def test_eviction_rules():
    cur = Curator(CuratorConfig(capacity=3))
    a, b, c, d, e = _levels(5)
    for lv, s in ((a, 1.0), (b, 2.0), (c, 3.0)):
        assert cur.report_score(lv, s, 0)
    assert len(cur) == 3
    assert not cur.report_score(d, 0.5, 1)
    assert len(cur) == 3
    assert cur.report_score(e, 5.0, 1)
    assert len(cur) == 3
    assert sorted(cur.scores()) == [2.0, 3.0, 5.0]


def test_full_capacity_insert_evicts_exactly_one():
    cfg = CuratorConfig()
    cur = Curator(cfg)
    rng = np.random.default_rng(4)
    seen = set()
    while len(cur) < cfg.capacity:
        lv = sample_level(rng)
        if lv.content_hash() in seen:
            continue
        seen.add(lv.content_hash())
        cur.report_score(lv, float(rng.random()), 0)
    before = {e.level.content_hash() for e in cur.entries}
    while True:
        new = sample_level(rng)
        if new.content_hash() not in seen:
            break
    cur.report_score(new, 1e9, 1)
    after = {e.level.content_hash() for e in cur.entries}
    assert len(cur) == cfg.capacity
    assert len(before - after) == 1 and after - before == {new.content_hash()}


def test_overwrite_refreshes_score_and_stamp():
    cur = Curator()
    lv = _levels(1)[0]
    cur.report_score(lv, 5.0, 0)
    cur.report_score(lv, 1.0, 7)
    assert len(cur) == 1
    assert cur.entries[0].score == 1.0 and cur.entries[0].last_visit == 7


def test_min_score_nondecreasing_under_inserts_and_size_bound():
    cur = Curator(CuratorConfig(capacity=10))
    rng = np.random.default_rng(5)
    lows = []
    for i, lv in enumerate(_levels(60, seed=6)):
        cur.report_score(lv, float(rng.normal()), i)
        assert len(cur) <= 10
        if len(cur) == 10:
            lows.append(cur.scores().min())
    assert all(b >= a for a, b in zip(lows, lows[1:]))


def test_non_finite_score_rejected():
    with pytest.raises(ValueError):
        Curator().report_score(_levels(1)[0], float("nan"), 0)


def test_snapshot_roundtrip_is_exact():
    cur = Curator(CuratorConfig(capacity=7, staleness=0.1))
    rng = np.random.default_rng(8)
    for i, lv in enumerate(_levels(9)):
        cur.report_score(lv, float(rng.normal()) / 3.0, i)
    again = Curator.from_snapshot(cur.snapshot())
    assert again.config == cur.config
    assert [e.score for e in again.entries] == [e.score for e in cur.entries]
    assert [e.level for e in again.entries] == [e.level for e in cur.entries]
    np.testing.assert_array_equal(again.probabilities(20), cur.probabilities(20))


def test_uniform_scoring_matches_domain_randomization():
    """Draws under constant scores follow the DR level-feature histograms.

    One long chain replays levels and so gives correlated draws; the last draw
    of many independent short chains is an i.i.d. sample of the marginal.
    """
    rng_dr = np.random.default_rng(10)
    dr = [sample_level(rng_dr) for _ in range(1500)]
    curated = []
    for chain in range(1500):
        cur = Curator()
        rng = np.random.default_rng([11, chain])
        for i in range(12):
            lv, _ = cur.next_level(rng, sample_level, i)
            cur.report_score(lv, 1.0, i)
        curated.append(lv)

    def hist(levels, feature, bins):
        return np.array([sum(feature(lv) == b for lv in levels) for b in bins])

    for feature, bins in ((lambda lv: lv.rows, (9, 11, 13)),
                          (lambda lv: lv.num_objects, range(1, 7)),
                          (lambda lv: lv.max_steps, (50, 500, 1000, 2000))):
        table = np.stack([hist(dr, feature, bins), hist(curated, feature, bins)])
        assert stats.chi2_contingency(table)[1] > 0.01
