import json

import numpy as np
import pytest

from groove import tensor as T
from groove import trainer as trainer_mod
from groove.antagonist import AntagonistConfig
from groove.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from groove.curator import CuratorConfig
from groove.gridworld import DistributionConfig, all_handcrafted
from groove.lpg import MetaObjectiveConfig
from groove.trainer import Trainer, TrainRunConfig, fixed_set_sampler, train


def small_cfg(**kw):
    base = dict(num_lifetimes=3, envs_per_lifetime=2, meta_updates=6, score_kind="uniform",
                lstm_hidden=6, embed_dim=5, bootstrap_dim=4, eval_episodes=8,
                meta=MetaObjectiveConfig(lr=1e-3, updates_per_meta=2),
                curator=CuratorConfig(capacity=4),
                distribution=DistributionConfig(lifetime=200),
                antagonist=AntagonistConfig(num_envs=2, eval_episodes=8))
    base.update(kw)
    return TrainRunConfig(**base)


def test_profiles():
    desk = TrainRunConfig.profile("desk")
    assert (desk.num_lifetimes, desk.envs_per_lifetime) == (64, 8)
    full = TrainRunConfig.profile("full")
    assert (full.num_lifetimes, full.envs_per_lifetime) == (512, 64)
    assert full.curator.capacity == 4000 and full.curator.p_replay == 0.5
    assert full.meta.lr == 1e-4 and full.meta.updates_per_meta == 5
    assert full.agent_lr == 40 and full.alpha_y == 0.5 and full.bootstrap_dim == 16
    with pytest.raises(ValueError):
        TrainRunConfig.profile("laptop")


def test_zero_meta_updates_leaves_eta_unchanged():
    cfg = small_cfg(meta_updates=0)
    tr = Trainer(cfg)
    before = tr.eta.checksum()
    res = tr.run()
    assert res.metrics == [] and res.eta.checksum() == before


def test_same_seed_same_checksum():
    a = train(small_cfg()).eta.checksum()
    b = train(small_cfg()).eta.checksum()
    c = train(small_cfg(seed=1)).eta.checksum()
    assert a == b != c


def test_resume_is_bit_identical(tmp_path):
    cfg = small_cfg(meta_updates=8)
    straight = Trainer(cfg)
    straight.run()
    part = Trainer(cfg)
    part.run(until=4, checkpoint_path=tmp_path / "ck.npz")
    resumed = Trainer.resume(tmp_path / "ck.npz", cfg)
    resumed.run()
    assert resumed.eta.checksum() == straight.eta.checksum()
    assert resumed.interactions == straight.interactions
    assert resumed.curator.snapshot() == straight.curator.snapshot()


def test_resume_rejects_changed_config(tmp_path):
    cfg = small_cfg()
    Trainer(cfg).run(until=1, checkpoint_path=tmp_path / "ck.npz")
    other = small_cfg(score_kind="ar")
    with pytest.raises(CheckpointError):
        Trainer.resume(tmp_path / "ck.npz", other)
    Trainer.resume(tmp_path / "ck.npz", other, allow_config_change=True)


def test_corrupt_checkpoint(tmp_path):
    path = tmp_path / "ck.npz"
    Trainer(small_cfg()).run(until=1, checkpoint_path=path)
    raw = bytearray(path.read_bytes())
    raw[len(raw) // 2] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError):
        Trainer.resume(path, small_cfg())
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.npz")


def test_checkpoint_checksum_mismatch(tmp_path):
    path = save_checkpoint(tmp_path / "x.npz", {"a": np.arange(3.0)}, {"k": 1})
    arrays, meta = load_checkpoint(path)
    assert meta["k"] == 1 and np.array_equal(arrays["a"], np.arange(3.0))
    with np.load(path) as z:
        data = dict(z)
    data["a"] = data["a"] + 1
    np.savez(path, **data)
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_interaction_audit():
    # lifetime 200 at rollout 20 is 10 updates, 5 windows of 2: whole windows only
    cfg = small_cfg(meta_updates=7)
    tr = Trainer(cfg)
    tr.run()
    assert tr.interactions == tr.expected_interactions(7)


def test_lifetimes_turn_over_and_fill_buffer():
    cfg = small_cfg(meta_updates=6)
    recs = train(cfg).metrics
    finished = [r for r in recs if r["finished"]]
    assert sum(r["finished"] for r in finished) == 3
    assert finished[0]["batch"] == 5
    assert all(np.isfinite(r["grad_norm"]) for r in recs)


def test_fixed_set_sampler_and_static_curriculum():
    levels = all_handcrafted(lifetime=200)
    cfg = small_cfg(curator=CuratorConfig(p_replay=0.0))
    tr = Trainer(cfg, sampler=fixed_set_sampler(levels))
    hashes = {lv.content_hash() for lv in levels}
    tr.run()
    assert all(lt.level.content_hash() in hashes for lt in tr.lifetimes)
    with pytest.raises(ValueError):
        fixed_set_sampler([])


def test_ar_scoring_runs_with_antagonist_cache():
    cfg = small_cfg(score_kind="ar", meta_updates=5)
    tr = Trainer(cfg)
    recs = tr.run().metrics
    assert "reference_mean" in recs[-1]
    assert tr.scoring.cache.trainings == 3


def test_non_finite_lifetime_is_dropped(monkeypatch):
    real = trainer_mod.meta_gradient_batch
    calls = {"n": 0}

    def flaky(eta, workers, *args, **kwargs):
        calls["n"] += 1
        if calls["n"] in (1, 2):  # the batched call, then lifetime 0 alone
            raise T.NonFiniteError("injected")
        return real(eta, workers, *args, **kwargs)

    cfg = small_cfg(meta_updates=1)
    tr = Trainer(cfg)
    monkeypatch.setattr(trainer_mod, "meta_gradient_batch", flaky)
    rec = tr.step()
    assert rec["dropped"] == 1 and rec["lifetimes_ok"] == 2
    assert np.isfinite(rec["grad_norm"])
    # the dropped lifetime is retired and replaced
    assert rec["finished"] == 1 and tr.lifetimes[0].generation == 1


def test_metrics_sink_receives_records():
    seen = []
    Trainer(small_cfg(meta_updates=2), metrics_sink=seen.append).run()
    assert [r["batch"] for r in seen] == [1, 2]
    json.dumps(seen)
