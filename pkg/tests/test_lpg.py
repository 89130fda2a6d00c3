import numpy as np
import pytest

from groove import lpg
from groove import tensor as T
from groove.agent import TabularAgent, init_agent
from groove.gridworld import CompiledLevels, handcrafted, reset_state, run_rollout, uniform_policy
from groove.gridworld.env import draw_uniforms
from groove.optim import AdamState


def _small():
    return lpg.OptimizerParams.init(n=4, hidden=6, embed=5, rng=np.random.default_rng(0))


def _recorded(level, num, envs=3, steps=6, seed=0):
    comp = CompiledLevels([level])
    state = reset_state(comp, np.zeros(envs, np.int64))
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(num):
        batch, state = run_rollout(comp, state, uniform_policy, steps,
                                   draw_uniforms([rng], [envs], steps))
        out.append(batch)
    return out


def test_input_width_and_target_shapes():
    eta = lpg.OptimizerParams.init()
    batch = _recorded(handcrafted("dense"), 1)[0]
    agent = init_agent(handcrafted("dense").num_states(), 16)
    xs = lpg.build_inputs(batch, agent)
    assert xs.shape == (6, 3, 36)
    tg = lpg.compute_targets(eta, xs, batch.dones)
    assert tg.pi_hat.shape == (6, 3)
    np.testing.assert_allclose(tg.y_hat.data.sum(-1), 1.0)


def test_zero_optimizer_gives_zero_pi_hat_and_uniform_y_hat():
    eta = lpg.OptimizerParams.zeros(n=4)
    batch = _recorded(handcrafted("sparse"), 1)[0]
    agent = init_agent(handcrafted("sparse").num_states(), 4)
    tg = lpg.compute_targets(eta, lpg.build_inputs(batch, agent), batch.dones)
    np.testing.assert_allclose(tg.pi_hat.data, 0.0)
    np.testing.assert_allclose(tg.y_hat.data, 0.25)


def test_targets_do_not_leak_across_episode_boundaries():
    eta = _small()
    level = handcrafted("dense")
    batch = _recorded(level, 1, envs=1, steps=6)[0]
    agent = init_agent(level.num_states(), 4)
    xs = lpg.build_inputs(batch, agent).data.copy()
    dones = np.zeros((6, 1), bool)
    dones[2] = True
    base = lpg.compute_targets(eta, xs, dones).pi_hat.data
    xs[4:] += 1.0  # perturb only the later episode
    moved = lpg.compute_targets(eta, xs, dones).pi_hat.data
    np.testing.assert_array_equal(base[:3], moved[:3])
    assert not np.allclose(base[3:], moved[3:])


def test_checksum_roundtrip():
    eta = lpg.OptimizerParams.init(rng=np.random.default_rng(5))
    again = lpg.OptimizerParams.from_arrays(eta.arrays())
    assert again.checksum() == eta.checksum()
    assert lpg.OptimizerParams.zeros().checksum() != eta.checksum()


def test_discounted_returns_reset_at_done():
    r = np.array([[1.0], [0.0], [2.0]])
    d = np.array([[0.0], [1.0], [0.0]])
    G = lpg.discounted_returns(r, d, 0.5)
    np.testing.assert_allclose(G[:, 0], [1.0, 0.0, 2.0])


def _loss(eta, workers, cfg, ac, recorded, K):
    res = lpg.meta_gradient_batch(eta, workers, cfg, ac, lpg.frozen_rollouts(recorded), K)
    return res.diagnostics["outer_loss"], res.grads


@pytest.mark.parametrize("K", [1, 2])
def test_meta_gradient_matches_finite_differences(K):
    level = handcrafted("dense")
    recorded = _recorded(level, K + 1)
    ac = lpg.AgentConfig(n=4, lr=5.0, num_envs=3, rollout_len=6)
    rng = np.random.default_rng(1)
    S = level.num_states()
    theta = TabularAgent(rng.normal(size=(S, 4)) * 0.3, rng.normal(size=(S, 4)) * 0.3)
    workers = lpg.Workers.start([level], [np.random.default_rng(0)], ac, agents=[theta])
    cfg = lpg.MetaObjectiveConfig()
    eta = _small()
    _, grads = _loss(eta, workers, cfg, ac, recorded, K)
    dirs = np.random.default_rng(9)
    for _ in range(3):
        direction = {k: dirs.normal(size=v.shape) for k, v in eta.arrays().items()}
        eps = 1e-5
        plus = lpg.OptimizerParams.from_arrays({k: v + eps * direction[k] for k, v in eta.arrays().items()})
        minus = lpg.OptimizerParams.from_arrays({k: v - eps * direction[k] for k, v in eta.arrays().items()})
        fd = (_loss(plus, workers, cfg, ac, recorded, K)[0]
              - _loss(minus, workers, cfg, ac, recorded, K)[0]) / (2 * eps)
        analytic = sum(float((grads[k] * direction[k]).sum()) for k in grads)
        assert analytic == pytest.approx(fd, rel=1e-3)


def test_meta_gradient_leaves_workers_untouched():
    level = handcrafted("dense")
    ac = lpg.AgentConfig(n=4, num_envs=2, rollout_len=5)
    workers = lpg.Workers.start([level], [np.random.default_rng(0)], ac)
    before = workers.agent.policy.copy()
    env_before = workers.env.copy()
    res = lpg.meta_gradient_batch(_small(), workers, lpg.MetaObjectiveConfig(), ac)
    np.testing.assert_array_equal(workers.agent.policy, before)
    np.testing.assert_array_equal(workers.env.pos, env_before.pos)
    assert res.updates.tolist() == [5]


def test_single_level_wrapper():
    level = handcrafted("sparse")
    ac = lpg.AgentConfig(n=4, num_envs=2, rollout_len=4)
    theta = init_agent(level.num_states(), 4)
    grads, theta_k, diag = lpg.meta_gradient(_small(), theta, level, 2, lpg.MetaObjectiveConfig(),
                                             np.random.default_rng(0), ac)
    assert set(grads) == set(lpg.OptimizerParams.KEYS)
    assert theta_k.policy.shape == theta.policy.shape
    assert np.isfinite(diag["outer_loss"])


def test_outer_update_clips_and_steps():
    eta = _small()
    grads = {k: np.full(v.shape, 100.0) for k, v in eta.arrays().items()}
    cfg = lpg.MetaObjectiveConfig(lr=1e-2)
    new, state, norm = lpg.outer_update(eta, grads, AdamState(), cfg)
    assert norm > 0.5
    assert state.step == 1
    diff = new.arrays()["pi_b"] - eta.arrays()["pi_b"]
    np.testing.assert_allclose(diff, -1e-2, rtol=1e-6)


def test_inner_updates_freeze_finished_lifetimes():
    levels = [handcrafted("dense"), handcrafted("sparse")]
    ac = lpg.AgentConfig(n=16, num_envs=2, rollout_len=5)
    workers = lpg.Workers.start(levels, [np.random.default_rng(i) for i in range(2)], ac)
    workers.updates_left = np.array([3, 0])
    eta = lpg.OptimizerParams.init(rng=np.random.default_rng(2))
    agent, _ = lpg.inner_updates(eta, workers, 3, ac)
    second = workers.levels.level_slices()[1]
    np.testing.assert_array_equal(agent.policy[second], 0.0)
    assert np.abs(agent.policy[workers.levels.level_slices()[0]]).sum() > 0


def test_config_validation():
    with pytest.raises(ValueError):
        lpg.MetaObjectiveConfig(policy_entropy=-1)
    with pytest.raises(ValueError):
        lpg.MetaObjectiveConfig(updates_per_meta=0)
    with pytest.raises(T.ShapeError):
        lpg.OptimizerParams.from_arrays({**lpg.OptimizerParams.zeros(n=4).arrays(),
                                         "y_b": np.zeros(3)})


def test_target_network_gradient_matches_finite_differences():
    eta = lpg.OptimizerParams.init(n=4, hidden=8, embed=6, rng=np.random.default_rng(4))
    xs = np.random.default_rng(5).normal(size=(5, 2, lpg.input_width(4)))
    dones = np.zeros((5, 2), bool)
    dones[1, 0] = True

    def objective(p):
        tg = lpg.compute_targets(p, xs, dones)
        return T.add(T.mean(tg.pi_hat), T.mean(T.mul(tg.y_hat, tg.y_hat)))

    leaves = eta.leaves()
    with T.Tape() as tape:
        loss = objective(leaves)
    g = T.backward(tape, loss)
    base = eta.arrays()
    rng = np.random.default_rng(6)
    for key in lpg.OptimizerParams.KEYS:
        d = rng.normal(size=base[key].shape)
        h = 1e-6

        def at(s):
            return float(objective(lpg.OptimizerParams.from_arrays(
                {**base, key: base[key] + s * h * d})).data)

        fd = (at(1) - at(-1)) / (2 * h)
        analytic = float((g[leaves.tensors[key]] * d).sum())
        assert analytic == pytest.approx(fd, rel=1e-4, abs=1e-10), key


def test_agent_parameters_enter_inputs_only_through_policy_and_bootstrap():
    level = handcrafted("dense")
    batch = _recorded(level, 1)[0]
    S = level.num_states()
    rng = np.random.default_rng(3)
    a = TabularAgent(rng.normal(size=(S, 4)), rng.normal(size=(S, 4)))
    b = TabularAgent(rng.normal(size=(S, 4)), rng.normal(size=(S, 4)))
    xa = lpg.build_inputs(batch, a).data
    xb = lpg.build_inputs(batch, b).data
    np.testing.assert_array_equal(xa[..., :3], xb[..., :3])
    assert not np.allclose(xa[..., 3:], xb[..., 3:])


def test_large_entropy_weight_raises_policy_entropy():
    level = handcrafted("dense")
    ac = lpg.AgentConfig(n=4, num_envs=4, rollout_len=10)
    cfg = lpg.MetaObjectiveConfig(policy_entropy=5.0, lr=1e-2)
    eta = lpg.OptimizerParams.init(n=4, hidden=6, embed=5, rng=np.random.default_rng(8))
    # a sharp starting policy leaves room for entropy to grow
    S = level.num_states()
    sharp = np.zeros((S, 4))
    sharp[:, 0] = 3.0
    theta = TabularAgent(sharp, np.zeros((S, 4)))
    state = AdamState()
    entropies = []
    for i in range(20):
        w = lpg.Workers.start([level], [np.random.default_rng(i)], ac, agents=[theta])
        res = lpg.meta_gradient_batch(eta, w, cfg, ac)
        entropies.append(res.diagnostics["policy_entropy"])
        eta, state, _ = lpg.outer_update(eta, res.grads, state, cfg)
    assert np.mean(entropies[-5:]) > np.mean(entropies[:5])
