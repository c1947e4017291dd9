"""``doser`` command line.

Exit codes: 0 ok, 2 usage / rejected input, 3 I/O, 4 numerical, 5 training
divergence, 6 component used before training.
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import sys
from pathlib import Path

import numpy as np

from . import experiments as ex
from .agent import AgentState, evaluate
from .config import ARTIFACTS_ENV, config_text, load_config
from .errors import DoserError, RejectedInput
from .io import (
    config_hash,
    load_checkpoint,
    load_dataset,
    save_checkpoint,
    save_dataset,
    save_thresholds,
    write_csv,
    write_summary,
)
from .ood import fit_thresholds
from .toyworld import NavEnv, gen_dataset

log = logging.getLogger("doser")


def _sibling(path, suffix: str) -> Path:
    """``out/model.ckpt`` -> ``out/model<suffix>``."""
    p = Path(path)
    return p.with_name(p.stem + suffix)


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise RejectedInput(f"expected comma-separated numbers, got {text!r}") from None


def _svg(path, series: dict, xlabel: str, ylabel: str, scatter: bool = False) -> None:
    """Best-effort plot; CSVs are the real output, so a missing matplotlib only logs."""
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        log.warning("matplotlib not installed; skipping %s", path)
        return
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for label, (x, y) in series.items():
        if scatter:
            ax.scatter(x, y, s=2, label=label)
        else:
            ax.plot(x, y, lw=1, label=label)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if len(series) > 1:
        ax.legend(fontsize=7)
    fig.tight_layout()
    # fixed hash salt keeps the SVG ids stable between runs
    with matplotlib.rc_context({"svg.hashsalt": "doser"}):
        fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


# -- commands ------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    d = gen_dataset(args.kind, args.n, args.seed, NavEnv(horizon=args.horizon))
    save_dataset(d, args.out)
    print(f"rows={len(d)} reward_mean={d.r.mean():.6f} reward_min={d.r.min():.6f} reward_max={d.r.max():.6f}")
    return 0


def cmd_pretrain(args) -> int:
    data = load_dataset(args.data)
    rng = np.random.default_rng(args.seed)
    kw = {"batch_size": args.batch_size, "lr": args.lr}
    extra = {}
    if args.what == "behavior":
        model, trace = ex.pretrain_behavior(data, args.steps, rng, **kw)
    elif args.what == "state":
        model, trace = ex.pretrain_state(data, args.steps, rng, **kw)
    elif args.what == "dynamics":
        model, trace = ex.pretrain_dynamics(data, args.steps, rng, snapshots=not args.no_snapshots, **kw)
        extra = {_sibling(args.out, f".step{k}.ckpt"): snap for k, snap in sorted(model.snapshots.items())}
    elif args.what == "cvae":
        model, trace = ex.pretrain_cvae(data, args.steps, rng, **kw)
    else:
        model, trace = ex.pretrain_ensemble(data, args.steps, args.seed, args.members, percentile=args.pa, **kw)
    save_checkpoint(model, args.out)
    for path, snap in extra.items():
        save_checkpoint(snap, path)
    write_csv(_sibling(args.out, ".loss.csv"), "loss_trace", ex.loss_rows(trace))
    if args.svg:
        _svg(_sibling(args.out, ".loss.svg"), {args.what: (np.arange(len(trace)), trace)}, "step", "loss")
    print(f"{args.what}: steps={args.steps} loss_first={trace[0]:.6g} loss_last={trace[-1]:.6g} "
          f"checkpoints={1 + len(extra)}")
    return 0


def cmd_calibrate(args) -> int:
    beh, stm = load_checkpoint(args.behavior), load_checkpoint(args.state)
    data = load_dataset(args.data)
    th = fit_thresholds(beh, stm, data, args.pa, args.ps, args.m_draws, np.random.default_rng(args.seed),
                        args.subsample or None)
    save_thresholds(th, args.out)
    write_csv(_sibling(args.out, ".calibration.csv"), "calibration", ex.calibration_rows(th, args.bins))
    flagged = float(np.mean(th.calibration_errors_a > th.tau_a))
    print(f"tau_a={th.tau_a:.6g} tau_s={th.tau_s:.6g} flagged_a={flagged:.4f}")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    out = cfg.artifact_dir()
    out.mkdir(parents=True, exist_ok=True)

    def progress(row):
        log.info("step %d  bellman %.4g  det %.3f", row["step"], row["bellman"], row["frac_detrimental"])

    res = ex.run_training(cfg, progress)
    (out / "config.ini").write_text(config_text(cfg))
    save_dataset(res.dataset, out / "dataset.bin")
    for name, trace in res.loss_traces.items():
        write_csv(out / f"loss_{name}.csv", "loss_trace", ex.loss_rows(trace))
    write_csv(out / "train_trace.csv", "train_trace", res.trace)
    save_checkpoint(res.agent, out / "agent.ckpt")
    save_checkpoint(res.models.behavior, out / "behavior.ckpt")
    save_checkpoint(res.models.state_model, out / "state.ckpt")
    save_checkpoint(res.models.dynamics, out / "dynamics.ckpt")
    if res.models.ensemble is not None:
        save_checkpoint(res.models.ensemble, out / "ensemble.ckpt")
    save_thresholds(res.models.thresholds, out / "thresholds.json")
    write_csv(out / "eval.csv", "eval", [{
        "episodes": res.summary["eval_episodes"], "seed": cfg.seed,
        "mean_return": res.summary["final_return"], "normalized_score": res.summary["final_normalized_score"],
    }])
    write_summary(out / "summary.json", res.summary)
    if args.svg:
        steps = [r["step"] for r in res.trace]
        _svg(out / "class_proportions.svg",
             {k: (steps, [r[f"frac_{k}"] for r in res.trace]) for k in ("id", "beneficial", "detrimental")},
             "step", "fraction of policy actions")
    print(f"score={res.summary['final_normalized_score']:.2f} return={res.summary['final_return']:.4f} "
          f"steps={res.summary['steps']} out={out}")
    return 0


def cmd_eval(args) -> int:
    agent = load_checkpoint(args.agent)
    if not isinstance(agent, AgentState):
        raise RejectedInput(f"{args.agent} is not an agent checkpoint")
    j, score = evaluate(agent, NavEnv(horizon=args.horizon), args.episodes, args.seed)
    if args.out:
        out = Path(args.out)
        write_csv(out / "eval.csv", "eval", [{"episodes": args.episodes, "seed": args.seed,
                                              "mean_return": j, "normalized_score": score}])
        flags = {"agent_sha256": hashlib.sha256(Path(args.agent).read_bytes()).hexdigest(),
                 "episodes": args.episodes, "seed": args.seed, "horizon": args.horizon}
        write_summary(out / "summary.json", {"seed": args.seed, "episodes": args.episodes,
                                             "config_hash": config_hash(flags), "final_return": j,
                                             "final_normalized_score": score})
    print(f"return={j:.4f} score={score:.2f}")
    return 0


def cmd_ood_bench(args) -> int:
    data = load_dataset(args.data) if args.data else gen_dataset("medium", args.n, args.seed)
    scales = _floats(args.noise_scales)
    det, roc, aucs = ex.ood_bench(args.detector, data, scales, args.seed, args.steps, args.split, args.percentile)
    out = Path(args.out)
    write_csv(out / f"detection_{args.detector}.csv", "detection", det)
    write_csv(out / f"roc_{args.detector}.csv", "roc", roc)
    flags = {k: getattr(args, k) for k in ("detector", "noise_scales", "seed", "steps", "split", "percentile", "n")}
    # hash the dataset content, not its location
    flags["data"] = hashlib.sha256(Path(args.data).read_bytes()).hexdigest() if args.data else ""
    write_summary(out / f"summary_{args.detector}.json", {
        "seed": args.seed, "config_hash": config_hash(flags), "detector": args.detector,
        "auroc": {repr(k): v for k, v in aucs.items()},
    })
    if args.svg:
        series = {}
        for s in scales:
            pts = [(r["fpr"], r["tpr"]) for r in roc if r["noise_scale"] == s]
            series[f"scale {s:g}"] = tuple(zip(*pts))
        _svg(out / f"roc_{args.detector}.svg", series, "false positive rate", "true positive rate")
    for s, v in aucs.items():
        print(f"{args.detector} scale={s:g} auroc={v:.4f}")
    return 0


def cmd_tabular_verify(args) -> int:
    rows, dev, rho = ex.tabular_verify(ex.parse_sizes(args.sizes), args.trials, args.mdps, args.seed,
                                       args.gamma, args.dev_trials)
    out = Path(args.out)
    write_csv(out / "tabular.csv", "tabular", rows)
    write_csv(out / "deviation.csv", "deviation", dev)
    ratio = max(r["value"] for r in rows if r["check"] == "contraction")
    passed = all(r["passed"] for r in rows)
    flags = {k: getattr(args, k) for k in ("sizes", "trials", "mdps", "seed", "gamma", "dev_trials")}
    write_summary(out / "summary.json", {"seed": args.seed, "config_hash": config_hash(flags),
                                         "max_ratio": ratio, "all_passed": passed, "deviation_spearman": rho})
    print(f"max_ratio={ratio:.12f} gamma={args.gamma} all_passed={passed} deviation_spearman={rho:.4f}")
    return 0 if passed else 4


def cmd_gmm_correlate(args) -> int:
    rows, r = ex.gmm_correlate(args.n, args.seed, args.steps)
    out = Path(args.out)
    write_csv(out / "gmm_scatter.csv", "gmm_scatter", rows)
    flags = {k: getattr(args, k) for k in ("n", "seed", "steps")}
    write_summary(out / "summary.json", {"seed": args.seed, "config_hash": config_hash(flags), "pearson": r, "n": args.n})
    if args.svg:
        _svg(out / "gmm_scatter.svg", {"samples": ([x["nll"] for x in rows], [x["error"] for x in rows])},
             "negative log-likelihood", "reconstruction error", scatter=True)
    print(f"pearson={r:.4f} n={args.n}")
    return 0


# -- parser --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="doser", description="Diffusion-guided offline RL toolkit on a 1D navigation task.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate an offline dataset")
    g.add_argument("--kind", choices=("expert", "medium"), required=True)
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--horizon", type=int, default=50)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_gen_data)

    g = sub.add_parser("pretrain", help="train one pretraining model and write its checkpoint")
    g.add_argument("--what", choices=("behavior", "state", "dynamics", "cvae", "ensemble"), required=True)
    g.add_argument("--data", required=True)
    g.add_argument("--steps", type=int, default=5000)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--batch-size", type=int, default=256)
    g.add_argument("--lr", type=float, default=1e-3)
    g.add_argument("--members", type=int, default=5, help="ensemble size")
    g.add_argument("--pa", type=float, default=99.0, help="ensemble gate percentile")
    g.add_argument("--no-snapshots", action="store_true", help="dynamics: skip the 10%%/20%% checkpoints")
    g.add_argument("--svg", action="store_true")
    g.set_defaults(fn=cmd_pretrain)

    g = sub.add_parser("calibrate", help="fit OOD thresholds from in-sample reconstruction errors")
    g.add_argument("--behavior", required=True)
    g.add_argument("--state", required=True)
    g.add_argument("--data", required=True)
    g.add_argument("--pa", type=float, default=99.0)
    g.add_argument("--ps", type=float, default=99.0)
    g.add_argument("--out", required=True)
    g.add_argument("--m-draws", type=int, default=10)
    g.add_argument("--subsample", type=int, default=0, help="score a random subset (0 = every row)")
    g.add_argument("--bins", type=int, default=50)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(fn=cmd_calibrate)

    g = sub.add_parser("train", help=f"full pipeline from a config file (artifacts dir: [paths] or ${ARTIFACTS_ENV})")
    g.add_argument("--config", required=True)
    g.add_argument("--svg", action="store_true")
    g.set_defaults(fn=cmd_train)

    g = sub.add_parser("eval", help="evaluate an agent checkpoint")
    g.add_argument("--agent", required=True)
    g.add_argument("--episodes", type=int, default=40)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--horizon", type=int, default=50)
    g.add_argument("--out")
    g.set_defaults(fn=cmd_eval)

    g = sub.add_parser("ood-bench", help="score synthetic ID/OOD action splits with one detector")
    g.add_argument("--detector", choices=ex.DETECTORS, required=True)
    g.add_argument("--noise-scales", default="0.5,1.0,5.0")
    g.add_argument("--out", required=True)
    g.add_argument("--data", help="dataset file (default: generate medium data)")
    g.add_argument("--n", type=int, default=50_000, help="rows to generate when --data is absent")
    g.add_argument("--steps", type=int, default=5000)
    g.add_argument("--split", type=int, default=2000, help="ID and OOD pairs per scale")
    g.add_argument("--percentile", type=float, default=99.0, help="threshold for confusion counts")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--svg", action="store_true")
    g.set_defaults(fn=cmd_ood_bench)

    g = sub.add_parser("tabular-verify", help="certify contraction, bounds and deviation on random MDPs")
    g.add_argument("--sizes", default="10x4,20x10,50x20")
    g.add_argument("--trials", type=int, default=200)
    g.add_argument("--mdps", type=int, default=10, help="random MDPs per size")
    g.add_argument("--dev-trials", type=int, default=50)
    g.add_argument("--gamma", type=float, default=0.99)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_tabular_verify)

    g = sub.add_parser("gmm-correlate", help="correlate reconstruction error with exact mixture NLL")
    g.add_argument("--n", type=int, default=10_000)
    g.add_argument("--steps", type=int, default=5000)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--svg", action="store_true")
    g.set_defaults(fn=cmd_gmm_correlate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    try:
        return args.fn(args)
    except DoserError as exc:
        print(f"doser {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
