import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from groove.gridworld import (
    CompiledLevels,
    DistributionConfig,
    Level,
    LevelError,
    ObjectSpec,
    SolverBudgetError,
    SteppingDoneError,
    dump_levels,
    empty_walls,
    evaluate_episodes,
    handcrafted,
    load_levels,
    reset_state,
    rollout,
    run_rollout,
    sample_level,
    solve_optimal,
    step,
    table_policy,
    uniform_policy,
)
from groove.gridworld.env import DRAWS_PER_STEP, draw_uniforms

from oracles import enumerate_action_sequences, expectimax_value

UP, DOWN, LEFT, RIGHT = range(4)


def one_object_level(size=5, obj=(0, 3), start=(0, 0), term=1.0, respawn=0.0, reward=1.0,
                     max_steps=50, walls=None):
    return Level(walls or empty_walls(size, size), start,
                 (ObjectSpec(obj, reward, term, respawn),), max_steps)


def no_draw(n=1):
    return np.full((n, DRAWS_PER_STEP), 0.999999)


def test_zero_wall_density_gives_empty_walls():
    cfg = DistributionConfig(wall_density=(0.0, 0.0))
    rng = np.random.default_rng(0)
    for _ in range(20):
        lv = sample_level(rng, cfg)
        assert all(set(row) == {"."} for row in lv.walls)


def test_grid_size_frequencies_uniform():
    rng = np.random.default_rng(1)
    n = 10_000
    sizes = [sample_level(rng).rows for _ in range(n)]
    counts = np.array([sizes.count(s) for s in (9, 11, 13)])
    sigma = np.sqrt(n * (1 / 3) * (2 / 3))
    assert np.all(np.abs(counts - n / 3) < 3 * sigma), counts


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["binary", "uniform"]))
def test_sampled_level_roundtrip_and_invariants(seed, mode):
    lv = sample_level(np.random.default_rng(seed), DistributionConfig(reward_mode=mode))
    assert Level.loads(lv.dumps()) == lv
    assert lv.rows <= 13 and lv.cols <= 13 and 1 <= lv.num_objects <= 6
    assert lv.max_steps >= 1 and lv.lifetime == 2500
    assert lv.start in lv.reachable_cells()
    for o in lv.objects:
        assert not lv.is_wall(*o.position)


def test_level_set_roundtrip_bit_exact():
    rng = np.random.default_rng(2)
    levels = [sample_level(rng, DistributionConfig(reward_mode="uniform")) for _ in range(10)]
    text = dump_levels(levels)
    back = load_levels(text)
    assert back == levels
    assert dump_levels(back) == text


def test_invalid_levels_rejected():
    with pytest.raises(LevelError):
        Level(empty_walls(3, 3), (0, 0), (ObjectSpec((0, 0), 1.0, 0.0, 0.0),), 10)
    with pytest.raises(LevelError):
        Level(empty_walls(3, 3), (0, 0), (ObjectSpec((1, 1), 1.0, 1.5, 0.0),), 10)
    with pytest.raises(LevelError):
        Level(empty_walls(14, 14), (0, 0), (), 10)
    with pytest.raises(LevelError):
        Level(("#..", "...", "..."), (0, 0), (), 10)
    with pytest.raises(LevelError):
        Level(empty_walls(3, 3), (0, 0), (), 0)


def objects_of(level):
    return sorted((o.reward, o.eps_term, o.eps_respawn) for o in level.objects)


def test_handcrafted_dense():
    lv = handcrafted("dense")
    assert (lv.rows, lv.cols, lv.max_steps) == (11, 11, 500)
    assert objects_of(lv) == sorted([(1, 0, 0.05)] * 2 + [(-1, 0.5, 0.1), (-1, 0, 0.5)])


def test_handcrafted_sparse():
    lv = handcrafted("sparse")
    assert (lv.rows, lv.cols, lv.max_steps) == (13, 13, 50)
    assert objects_of(lv) == sorted([(1, 1, 0), (-1, 1, 0)])


def test_handcrafted_long_horizon():
    lv = handcrafted("long_horizon")
    assert (lv.rows, lv.cols, lv.max_steps) == (11, 11, 1000)
    assert objects_of(lv) == sorted([(1, 0, 0.01)] * 2 + [(-1, 0.5, 1)] * 2)


def test_handcrafted_longer_horizon():
    lv = handcrafted("longer_horizon")
    assert (lv.rows, lv.cols, lv.max_steps) == (9, 9, 2000)
    assert objects_of(lv) == sorted([(1, 0.1, 0.01)] * 2 + [(-1, 0.8, 1)] * 5)


def test_handcrafted_long_dense():
    lv = handcrafted("long_dense")
    assert (lv.rows, lv.cols, lv.max_steps) == (11, 11, 2000)
    assert objects_of(lv) == [(1, 0, 0.005)] * 4


def test_handcrafted_unknown_name():
    with pytest.raises(KeyError):
        handcrafted("maze")


def test_step_into_wall_keeps_position():
    lv = Level((".#.", "...", "..."), (0, 0), (ObjectSpec((2, 2), 1.0, 0.0, 0.0),), 10)
    comp = CompiledLevels([lv])
    s0 = reset_state(comp, [0])
    for a in (RIGHT, UP, LEFT):
        s1, r, d = step(comp, s0, np.array([a]), no_draw())
        assert s1.pos[0] == s0.pos[0] and r[0] == 0.0 and not d[0]


def test_collect_with_forced_termination():
    lv = one_object_level(obj=(0, 1), term=1.0)
    comp = CompiledLevels([lv])
    s1, r, d = step(comp, reset_state(comp, [0]), np.array([RIGHT]), no_draw())
    assert r[0] == 1.0 and d[0] and s1.mask[0] == 0


def test_stepping_done_state_rejected():
    lv = one_object_level(obj=(0, 1), term=1.0)
    comp = CompiledLevels([lv])
    s1, _, _ = step(comp, reset_state(comp, [0]), np.array([RIGHT]), no_draw())
    with pytest.raises(SteppingDoneError):
        step(comp, s1, np.array([RIGHT]), no_draw())


def test_respawn_and_no_respawn():
    lv = one_object_level(obj=(0, 1), term=0.0, respawn=1.0)
    comp = CompiledLevels([lv])
    s1, r, _ = step(comp, reset_state(comp, [0]), np.array([RIGHT]), no_draw())
    assert r[0] == 1.0 and s1.mask[0] == 1  # respawned at step end
    lv = one_object_level(obj=(0, 1), term=0.0, respawn=0.0)
    comp = CompiledLevels([lv])
    s1, r, _ = step(comp, reset_state(comp, [0]), np.array([RIGHT]), no_draw())
    assert s1.mask[0] == 0
    s2, r2, _ = step(comp, s1, np.array([DOWN]), no_draw())
    s3, r3, _ = step(comp, s2, np.array([UP]), no_draw())
    assert r3[0] == 0.0


def bfs_greedy_policy(level):
    """Move along a BFS shortest path to the first object."""
    target = level.objects[0].position
    comp = CompiledLevels([level])
    dist = {}
    for cell in level.reachable_cells():
        d = Level(level.walls, cell, (), 1).shortest_distance(target) if cell != target else 0
        dist[cell] = d

    def policy(s, t, lvl):
        probs = np.zeros((len(s), 4))
        for i, sid in enumerate(s):
            _, cell, _ = comp.decode(int(sid))
            best = min(range(4), key=lambda a: dist.get(
                (cell[0] + [-1, 1, 0, 0][a], cell[1] + [0, 0, -1, 1][a]), 1e9))
            probs[i, best] = 1.0
        return probs

    return policy


def test_greedy_path_collects_at_bfs_distance():
    lv = one_object_level(size=5, obj=(2, 1), start=(0, 0), term=0.0)
    d = lv.shortest_distance((2, 1))
    assert d == 3
    batch = rollout(lv, bfs_greedy_policy(lv), num_envs=1, num_steps=6,
                    rng=np.random.default_rng(0))
    first = int(np.flatnonzero(batch.rewards[:, 0])[0])
    assert first + 1 == d


def test_done_at_max_steps():
    lv = one_object_level(size=5, obj=(4, 4), max_steps=7, term=0.0)
    batch = rollout(lv, uniform_policy, num_envs=3, num_steps=21, rng=np.random.default_rng(0))
    assert np.all(batch.dones[batch.steps == 6])
    assert np.all(batch.steps < 7)


def test_rollout_geometry_and_determinism():
    lv = handcrafted("sparse")
    b1 = rollout(lv, uniform_policy, 64, 20, np.random.default_rng(7))
    b2 = rollout(lv, uniform_policy, 64, 20, np.random.default_rng(7))
    assert b1.size == 1280
    for f in ("states", "actions", "rewards", "dones", "next_states"):
        np.testing.assert_array_equal(getattr(b1, f), getattr(b2, f))


def test_uniform_policy_sparse_return_bounds():
    lv = handcrafted("sparse")
    res = evaluate_episodes(CompiledLevels([lv]), uniform_policy, 64,
                            [np.random.default_rng(0)], 0.99)
    assert -1.0 <= res.mean()[0] <= 1.0


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_returns_within_analytic_bound(seed):
    rng = np.random.default_rng(seed)
    lv = sample_level(rng, DistributionConfig(max_steps=(50,)))
    res = evaluate_episodes(CompiledLevels([lv]), uniform_policy, 8, [rng], 1.0)
    max_r = max(abs(o.reward) for o in lv.objects)
    max_resp = max(o.eps_respawn for o in lv.objects)
    bound = lv.num_objects * max_r * (1 + lv.max_steps * max_resp)
    assert np.all(np.isfinite(res.undiscounted))
    assert np.all(np.abs(res.undiscounted) <= bound + 1e-9)


def test_state_index_bijection_exhaustive():
    rng = np.random.default_rng(3)
    cfg = DistributionConfig(grid_sizes=(3, 5, 7), num_objects=(0, 3))
    for _ in range(30):
        lv = sample_level(rng, cfg)
        comp = CompiledLevels([lv, lv])
        cells = lv.reachable_cells()
        M = 1 << lv.num_objects
        seen = set()
        for l in range(2):
            for i, cell in enumerate(cells):
                for m in range(M):
                    sid = int(comp.state_ids(np.array([l]), np.array([comp.pos_offset[l] + i]),
                                             np.array([m]))[0])
                    assert 0 <= sid - comp.state_offset[l] < len(cells) * M
                    assert comp.decode(sid) == (l, cell, m)
                    seen.add(sid)
        assert len(seen) == comp.total_states


def test_solver_no_objects():
    lv = Level(empty_walls(4, 4), (0, 0), (), 8)
    assert solve_optimal(lv).value == 0.0


def test_solver_unreachable_object():
    lv = Level(("..#.", "..#.", "###.", "...."), (0, 0), (ObjectSpec((3, 3), 1.0, 1.0, 0.0),), 8)
    assert solve_optimal(lv).value == 0.0


@pytest.mark.parametrize("obj", [(0, 1), (1, 2), (3, 3), (2, 0)])
def test_solver_single_object_distance(obj):
    lv = Level(empty_walls(4, 4), (0, 0), (ObjectSpec(obj, 1.0, 0.0, 0.0),), 8)
    d = lv.shortest_distance(obj)
    expect = 0.99 ** (d - 1)
    assert abs(solve_optimal(lv).value - expect) < 1e-12
    assert abs(enumerate_action_sequences(lv, 0.99, 8) - expect) < 1e-12


def test_solver_budget():
    with pytest.raises(SolverBudgetError):
        solve_optimal(handcrafted("dense"), budget=1000)


def small_random_levels(n, seed, deterministic=False):
    rng = np.random.default_rng(seed)
    cfg = DistributionConfig(grid_sizes=(4,), num_objects=(1, 2), max_steps=(4, 6, 8),
                             reward_mode="uniform",
                             eps_term=(0.0, 1.0) if deterministic else (0.0, 0.1, 0.5, 1.0),
                             eps_respawn=(0.0, 1.0) if deterministic else (0.0, 0.1, 0.5, 1.0))
    return [sample_level(rng, cfg) for _ in range(n)]


def test_solver_matches_expectimax_on_random_levels():
    for lv in small_random_levels(20, seed=11):
        assert abs(solve_optimal(lv).value - expectimax_value(lv, 0.99)) < 1e-9


def test_solver_matches_sequence_enumeration_on_deterministic_levels():
    for lv in small_random_levels(5, seed=12, deterministic=True):
        lv = Level(lv.walls, lv.start, lv.objects, 6)
        assert abs(solve_optimal(lv).value - enumerate_action_sequences(lv, 0.99, 6)) < 1e-9


def test_solver_dominates_monte_carlo():
    rng = np.random.default_rng(5)
    lv = small_random_levels(1, seed=13)[0]
    comp = CompiledLevels([lv])
    opt = solve_optimal(lv).value
    table = rng.dirichlet(np.ones(4), size=comp.total_states)
    res = evaluate_episodes(comp, table_policy(table), 10_000, [rng], 0.99)
    assert opt >= res.mean()[0] - 3 * res.stderr()[0]


def test_solver_policy_achieves_value():
    lv = handcrafted("sparse")
    sol = solve_optimal(lv)
    comp = CompiledLevels([lv])
    M = 1 << lv.num_objects

    def expert(s, t, lvl):
        probs = np.zeros((len(s), 4))
        probs[np.arange(len(s)), sol.policy[lv.max_steps - t - 1, s]] = 1.0
        return probs

    res = evaluate_episodes(comp, expert, 64, [np.random.default_rng(0)], 0.99)
    assert abs(res.mean()[0] - sol.value) < 3 * res.stderr()[0] + 1e-9
    assert sol.start_state == comp.start[0] * M + M - 1


def test_run_rollout_multi_level_matches_single():
    levels = [handcrafted("sparse"), handcrafted("dense")]
    comp = CompiledLevels(levels)
    state = reset_state(comp, np.repeat([0, 1], 4))
    rngs = [np.random.default_rng(1), np.random.default_rng(2)]
    u = draw_uniforms(rngs, [4, 4], 10)
    batch, _ = run_rollout(comp, state, uniform_policy, 10, u)
    single = rollout(levels[1], uniform_policy, 4, 10, np.random.default_rng(2))
    np.testing.assert_array_equal(batch.rewards[:, 4:], single.rewards)
    np.testing.assert_array_equal(batch.states[:, 4:] - comp.state_offset[1], single.states)


def test_respawn_rate_binomial():
    # sanity on respawn rates: fraction of respawns matches eps_respawn
    lv = one_object_level(obj=(0, 1), term=0.0, respawn=0.3, max_steps=1000)
    comp = CompiledLevels([lv])
    rng = np.random.default_rng(9)
    state = reset_state(comp, np.zeros(2000, np.int64))
    state, _, _ = step(comp, state, np.full(2000, RIGHT), rng.random((2000, DRAWS_PER_STEP)))
    frac = state.mask.mean()
    res = stats.binomtest(int(state.mask.sum()), 2000, 0.3)
    assert res.pvalue > 1e-3, frac
