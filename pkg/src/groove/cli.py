"""``groove`` command-line entry point."""
from __future__ import annotations

import argparse
import json
import logging
import signal
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import config as C
from . import evaluation as E
from . import plotting as P
from .antagonist import AntagonistCache
from .checkpoint import CheckpointError, load_checkpoint
from .curator import Curator
from .gridworld import all_handcrafted
from .lpg import AgentConfig, OptimizerParams
from .trainer import Trainer

log = logging.getLogger("groove")


class UsageError(Exception):
    pass


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _str_list(text: str) -> list[str]:
    return [v.strip() for v in text.split(",") if v.strip()]


# ---------------------------------------------------------------- helpers


def _run_config(args) -> C.RunConfig:
    overrides = dict(C.parse_override(o) for o in getattr(args, "set", None) or [])
    if getattr(args, "profile", None):
        overrides["profile"] = args.profile
    if getattr(args, "score_kind", None):
        overrides["train.score_kind"] = args.score_kind
    if getattr(args, "seed", None) is not None:
        overrides["train.seed"] = args.seed
    if getattr(args, "meta_updates", None) is not None:
        overrides["train.meta_updates"] = args.meta_updates
    if getattr(args, "out", None):
        overrides["output_dir"] = args.out
    return C.load(getattr(args, "config", None), overrides)


def _run_dir(rc: C.RunConfig, name: str) -> Path:
    path = rc.output_root() / name
    path.mkdir(parents=True, exist_ok=True)
    return path


def _eval_cfg(rc: C.RunConfig) -> E.EvalConfig:
    return E.EvalConfig(agent=AgentConfig(n=rc.train.bootstrap_dim, lr=rc.train.agent_lr,
                                          alpha_y=rc.train.alpha_y,
                                          rollout_len=rc.train.rollout_len,
                                          num_envs=rc.eval.agent_envs),
                        eval_episodes=rc.eval.episodes, gamma=rc.train.meta.gamma,
                        antagonist=rc.train.antagonist)


def _suite(rc: C.RunConfig, num_levels: int | None = None):
    n = rc.eval.num_levels if num_levels is None else num_levels
    if rc.eval.suite == "handcrafted":
        return all_handcrafted(rc.train.distribution.lifetime)
    if n < 1:
        raise UsageError("evaluation needs at least one level (got --num-levels 0)")
    if rc.eval.suite == "hard":
        return E.hard_suite(n, rc.eval.suite_seed)
    if rc.eval.suite == "easy":
        return E.easy_suite(n, rc.eval.suite_seed)
    return E.random_levels(n, rc.eval.suite_seed, rc.train.distribution)


def _load_eta(path: str) -> tuple[OptimizerParams, dict, dict]:
    arrays, meta = load_checkpoint(path)
    eta = OptimizerParams.from_arrays({k[4:]: v for k, v in arrays.items()
                                       if k.startswith("eta/")})
    return eta, arrays, meta


def _summary(scores: np.ndarray) -> dict:
    out = {"mean": float(scores.mean()), "iqm": E.iqm(scores),
           "optimality_gap": E.optimality_gap(scores)}
    if scores.shape[0] >= 2:
        st = E.aggregate(scores)
        out.update(iqm_ci=list(st.iqm_ci), optimality_gap_ci=list(st.gap_ci))
    return out


def _print_block(title: str, payload: dict) -> None:
    print(f"===== {title} =====")
    print(json.dumps(payload, indent=2, sort_keys=True))
    print(f"===== end {title} =====")
    sys.stdout.flush()


# ---------------------------------------------------------------- commands


def cmd_train(args) -> int:
    rc = _run_config(args)
    if args.show_defaults:
        print(C.default_text(rc.profile), end="")
        return 0
    out = _run_dir(rc, args.name or time.strftime("train-%Y%m%d-%H%M%S"))
    rc.dump(out / "effective_config.yaml")
    metrics_path = out / "metrics.ndjson"
    ckpt = out / "checkpoint.npz"
    metrics_file = metrics_path.open("a")

    def sink(record: dict) -> None:
        metrics_file.write(json.dumps(record, sort_keys=True) + "\n")
        metrics_file.flush()

    stop = {"flag": False}

    def on_signal(signum, frame):
        log.warning("signal %d received: writing final checkpoint", signum)
        stop["flag"] = True

    old = {s: signal.signal(s, on_signal) for s in (signal.SIGINT, signal.SIGTERM)}
    try:
        if args.resume:
            trainer = Trainer.resume(args.resume, rc.train,
                                     allow_config_change=args.allow_config_change,
                                     metrics_sink=sink)
        else:
            trainer = Trainer(rc.train, metrics_sink=sink)
        trainer.run(should_stop=lambda: stop["flag"], checkpoint_every=rc.checkpoint_every,
                    checkpoint_path=ckpt)
    finally:
        for s, h in old.items():
            signal.signal(s, h)
        metrics_file.close()
    records = [json.loads(l) for l in metrics_path.read_text().splitlines() if l.strip()]
    ret = [(r["batch"], r["return_mean"]) for r in records if "return_mean" in r]
    if ret:
        x, y = np.array(ret).T
        P.write_series(out / "train_return.dat", x, y, header="batch return_mean err")
        P.line_plot(out / "train_return.png", {"protagonist": (x, y, None)},
                    "meta-update", "final return")
    _print_block("train", {"run_dir": str(out), "batches": trainer.batch,
                           "interactions": trainer.interactions,
                           "eta_checksum": trainer.eta.checksum(),
                           "interrupted": stop["flag"], **trainer.curator.stats()})
    return 130 if stop["flag"] else 0


def cmd_eval(args) -> int:
    rc = _run_config(args)
    if args.suite:
        rc = replace(rc, eval=replace(rc.eval, suite=args.suite))
    if args.seeds:
        rc = replace(rc, eval=replace(rc.eval, seeds=tuple(args.seeds)))
    if args.mode:
        rc = replace(rc, eval=replace(rc.eval, mode=args.mode))
    eta, _, meta = _load_eta(args.checkpoint)
    if args.config and meta.get("config_hash") != rc.train.digest() \
            and not args.allow_config_change:
        raise CheckpointError("checkpoint was written with a different configuration "
                              "(pass --allow-config-change to evaluate anyway)")
    levels = _suite(rc, args.num_levels)
    train_levels = [e.level for e in Curator.from_snapshot(meta["curator"]).entries] \
        if "curator" in meta else None
    res = E.eval_optimizer(eta, levels, rc.eval.mode, rc.eval.seeds, _eval_cfg(rc), train_levels)
    out = _run_dir(rc, args.name or f"eval-{rc.eval.suite}")
    rc.dump(out / "effective_config.yaml")
    per_level = res.scores.mean(axis=0)
    P.write_table(out / "scores.tsv", ["level", "raw", "a2c", "random", "normalized"],
                  [(lv.content_hash()[:12], float(r), float(a), float(z), float(s))
                   for lv, r, a, z, s in zip(levels, res.raw.mean(0), res.a2c, res.random,
                                             per_level)])
    srt = np.sort(per_level)
    P.write_series(out / "sorted_scores.dat", 100 * np.arange(1, len(srt) + 1) / len(srt), srt,
                   header="percentile normalized err")
    P.sorted_score_plot(out / "sorted_scores.png", {"eta": per_level})
    _print_block("eval", {"run_dir": str(out), "levels": len(levels), "seeds": list(res.seeds),
                          "fraction_below_0.75": res.fraction_below(0.75),
                          **_summary(res.scores)})
    return 0


def cmd_diversity(args) -> int:
    rc = _run_config(args)
    buffer = None
    if args.source == "max-ar":
        if not args.buffer:
            raise UsageError("--source max-ar needs --buffer CHECKPOINT")
        buffer = Curator.from_snapshot(load_checkpoint(args.buffer)[1]["curator"])
    test = _suite(rc)
    res = E.diversity_experiment(args.sizes, args.source, args.seeds, rc.train, test,
                                 _eval_cfg(rc), buffer=buffer)
    out = _run_dir(rc, args.name or f"diversity-{args.source}")
    rc.dump(out / "effective_config.yaml")
    mean = res.returns.mean(axis=1)
    se = res.returns.std(axis=1, ddof=1) / np.sqrt(res.returns.shape[1]) \
        if res.returns.shape[1] > 1 else np.zeros_like(mean)
    P.write_table(out / "diversity.tsv", ["size", *[f"seed{s}" for s in args.seeds], "mean", "se"],
                  [(n, *map(float, row), float(m), float(e))
                   for n, row, m, e in zip(res.sizes, res.returns, mean, se)])
    P.write_series(out / "diversity.dat", res.sizes, mean, se, header="size mean_score se")
    P.line_plot(out / "diversity.png", {args.source: (res.sizes, mean, se)},
                "training levels", "held-out normalized return", logx=True)
    _print_block("diversity", {"run_dir": str(out), "sizes": res.sizes,
                               "mean": mean.tolist(), "pmcc": res.pmcc, "p_value": res.p_value,
                               "significant": bool(res.p_value < 0.05)})
    return 0


def _ablation_outputs(rc, out: Path, res: E.AblationResult, title: str) -> dict:
    mean, se = res.mean(), res.stderr()
    below = res.below.mean(axis=1)
    P.write_table(out / f"{title}.tsv", ["row", "mean", "se", "fraction_below_0.75"],
                  [(k, float(m), float(e), float(b)) for k, m, e, b in
                   zip(res.kinds, mean, se, below)])
    P.write_series(out / f"{title}.dat", np.arange(len(res.kinds)), mean, se,
                   header="row_index mean se")
    P.bar_plot(out / f"{title}.png", res.kinds, mean, se, "held-out normalized return")
    return {"rows": {k: {"mean": float(m), "se": float(e), "fraction_below_0.75": float(b)}
                     for k, m, e, b in zip(res.kinds, mean, se, below)}}


def cmd_scorer_ablation(args) -> int:
    rc = _run_config(args)
    test = _suite(rc)
    res = E.scorer_ablation(args.kinds, args.seeds, rc.train, test, _eval_cfg(rc))
    out = _run_dir(rc, args.name or "scorer-ablation")
    rc.dump(out / "effective_config.yaml")
    payload = {"run_dir": str(out), **_ablation_outputs(rc, out, res, "scorer_ablation")}
    if "ar" in res.kinds and "uniform" in res.kinds:
        d, p = res.paired_test("ar", "uniform")
        payload["ar_minus_uniform"] = {"mean_difference": d, "p_value_one_sided": p}
    _print_block("scorer-ablation", payload)
    return 0


def cmd_antagonist_ablation(args) -> int:
    rc = _run_config(args)
    test = _suite(rc)
    res = E.scorer_ablation([], args.seeds, rc.train, test, _eval_cfg(rc),
                            antagonists=args.kinds)
    out = _run_dir(rc, args.name or "antagonist-ablation")
    rc.dump(out / "effective_config.yaml")
    payload = {"run_dir": str(out), **_ablation_outputs(rc, out, res, "antagonist_ablation")}
    comparison = {}
    for label, levels in (("random", E.random_levels(args.comparison_levels, 3000,
                                                     rc.train.distribution)),
                          ("handcrafted", all_handcrafted(rc.train.distribution.lifetime))):
        comparison[label] = E.antagonist_table(levels, args.seeds, rc.train.antagonist,
                                               kinds=("a2c", "ppo"))
    P.write_table(out / "antagonist_returns.tsv", ["levels", "kind", "mean", "se"],
                  [(lab, k, m, e) for lab, tab in comparison.items()
                   for k, (m, e) in tab.items()])
    payload["antagonist_returns"] = comparison
    _print_block("antagonist-ablation", payload)
    return 0


def cmd_robustness(args) -> int:
    rc = _run_config(args)
    levels = E.random_levels(args.num_levels, rc.eval.suite_seed, rc.train.distribution)
    if not levels:
        raise UsageError("robustness needs at least one level")
    ecfg = _eval_cfg(rc)
    cache = AntagonistCache(ecfg.antagonist)
    curves, payload = {}, {}
    for path in args.checkpoint:
        eta, _, _ = _load_eta(path)
        res = E.eval_optimizer(eta, levels, rc.eval.mode, rc.eval.seeds, ecfg, cache=cache)
        label = Path(path).parent.name or Path(path).stem
        curves[label] = res.scores.mean(axis=0)
        payload[label] = {"fraction_below_0.75": res.fraction_below(0.75),
                          **_summary(res.scores)}
    out = _run_dir(rc, args.name or "robustness")
    rc.dump(out / "effective_config.yaml")
    for label, s in curves.items():
        s = np.sort(s)
        P.write_series(out / f"sorted_{label}.dat", 100 * np.arange(1, len(s) + 1) / len(s), s,
                       header="percentile normalized err")
    P.sorted_score_plot(out / "robustness.png", curves)
    _print_block("robustness", {"run_dir": str(out), "levels": len(levels), "runs": payload})
    return 0


def cmd_buffer(args) -> int:
    _, meta = load_checkpoint(args.checkpoint)
    cur = Curator.from_snapshot(meta["curator"])
    order = np.argsort(-cur.scores(), kind="stable") if len(cur) else []
    if args.action == "export":
        dest = Path(args.output)
        dest.parent.mkdir(parents=True, exist_ok=True)
        with dest.open("w") as fh:
            for i in order:
                e = cur.entries[i]
                fh.write(json.dumps({"score": e.score, "visits": e.visits,
                                     "last_visit": e.last_visit,
                                     "level": e.level.to_record()}) + "\n")
        _print_block("buffer export", {"path": str(dest), "entries": len(cur)})
        return 0
    top = [{"hash": cur.entries[i].level.content_hash()[:12], "score": cur.entries[i].score,
            "visits": cur.entries[i].visits} for i in list(order)[: args.top]]
    _print_block("buffer inspect", {**cur.stats(), "top": top})
    return 0


# ---------------------------------------------------------------- parser


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML run configuration")
    p.add_argument("--profile", choices=("desk", "full"))
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config entry, e.g. meta.lr=3e-4 (repeatable)")
    p.add_argument("--seed", type=int)
    p.add_argument("--meta-updates", type=int)
    p.add_argument("--score-kind")
    p.add_argument("--out", help="output root (default: $GROOVE_OUT or ./groove-runs)")
    p.add_argument("--name", help="run directory name under the output root")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="groove")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="meta-train an optimizer")
    _common(p)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--allow-config-change", action="store_true")
    p.add_argument("--show-defaults", action="store_true",
                   help="print every config key with its default and exit")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a held-out suite")
    _common(p)
    p.add_argument("checkpoint")
    p.add_argument("--suite", choices=("hard", "easy", "random", "handcrafted"))
    p.add_argument("--num-levels", type=int)
    p.add_argument("--seeds", type=_int_list)
    p.add_argument("--mode", choices=("tabular", "dense"))
    p.add_argument("--allow-config-change", action="store_true")
    p.set_defaults(func=cmd_eval)

    exp = sub.add_parser("experiment", help="desk-scale experiments")
    esub = exp.add_subparsers(dest="experiment", required=True)
    p = esub.add_parser("diversity")
    _common(p)
    p.add_argument("--sizes", type=_int_list, default=[4, 16, 64])
    p.add_argument("--source", choices=("random", "max-ar", "handcrafted"), default="random")
    p.add_argument("--buffer", help="checkpoint whose buffer feeds --source max-ar")
    p.add_argument("--seeds", type=_int_list, default=[0, 1, 2, 3, 4])
    p.set_defaults(func=cmd_diversity)
    p = esub.add_parser("scorer-ablation")
    _common(p)
    p.add_argument("--kinds", type=_str_list, default=["ar", "uniform"])
    p.add_argument("--seeds", type=_int_list, default=list(range(10)))
    p.set_defaults(func=cmd_scorer_ablation)
    p = esub.add_parser("antagonist-ablation")
    _common(p)
    p.add_argument("--kinds", type=_str_list, default=["random", "expert", "a2c", "ppo"])
    p.add_argument("--seeds", type=_int_list, default=list(range(10)))
    p.add_argument("--comparison-levels", type=int, default=20)
    p.set_defaults(func=cmd_antagonist_ablation)
    p = esub.add_parser("robustness")
    _common(p)
    p.add_argument("checkpoint", nargs="+")
    p.add_argument("--num-levels", type=int, default=100)
    p.set_defaults(func=cmd_robustness)

    buf = sub.add_parser("buffer", help="inspect or export a checkpoint's level buffer")
    bsub = buf.add_subparsers(dest="action", required=True)
    p = bsub.add_parser("export")
    p.add_argument("checkpoint")
    p.add_argument("output")
    p.set_defaults(func=cmd_buffer)
    p = bsub.add_parser("inspect")
    p.add_argument("checkpoint")
    p.add_argument("--top", type=int, default=10)
    p.set_defaults(func=cmd_buffer)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))
    except (C.ConfigError, CheckpointError, E.OverlapError, ValueError) as exc:
        print(f"groove: error: {exc}", file=sys.stderr)
        return 1
    return 1


if __name__ == "__main__":
    sys.exit(main())
