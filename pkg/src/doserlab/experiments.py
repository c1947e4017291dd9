"""Pipeline stages shared by the command line and the acceptance suite.

Each function takes explicit seeds and returns plain rows ready for the CSV
writers, so a command is a thin wrapper that parses flags and writes files.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .agent import AgentState, Pretrained, create_agent, evaluate, train
from .config import RunConfig
from .diffusion import DenoiserModel, NoiseSchedule, recon_error, recon_error_action, train_denoiser
from .dynamics import DynamicsModel, train_dynamics
from .errors import RejectedInput
from .io import config_hash, load_dataset
from .metrics import auroc, confusion, pearson, roc_points, spearman
from .ood import (
    CvaeModel,
    OodThresholds,
    calibrate_ensemble,
    cvae_score,
    ensemble_score,
    fit_thresholds,
    mc_dropout_score,
    nearest_rank,
    train_cvae,
    train_dropout_q,
    train_ensemble,
)
from .tabular import check_contraction, deviation_experiment, random_mdp, value_bounds
from .toyworld import Dataset, GmmSpec, NavEnv, gen_dataset, gen_gmm, ground_truth_q, perturb_ood

log = logging.getLogger(__name__)

DETECTORS = ("diffusion", "ensemble", "dropout", "cvae")
SNAPSHOT_FRACTIONS = (0.1, 0.2)


def loss_rows(trace) -> list[dict]:
    return [{"step": i, "loss": float(v)} for i, v in enumerate(trace)]


# -- pretraining ---------------------------------------------------------------------


def pretrain_behavior(data: Dataset, steps: int, rng, batch_size: int = 256, lr: float = 1e-3,
                      schedule: NoiseSchedule | None = None, hidden=(64, 64), embedding: str = "scalar"):
    m = DenoiserModel.create(data.action_dim, data.state_dim, rng, hidden, schedule, embedding)
    trace = train_denoiser(m, data.a, data.s, steps=steps, batch_size=batch_size, rng=rng, lr=lr)
    return m, trace


def pretrain_state(data: Dataset, steps: int, rng, batch_size: int = 256, lr: float = 1e-3,
                   schedule: NoiseSchedule | None = None, hidden=(64, 64), embedding: str = "scalar"):
    m = DenoiserModel.create(data.state_dim, 0, rng, hidden, schedule, embedding)
    trace = train_denoiser(m, data.s, steps=steps, batch_size=batch_size, rng=rng, lr=lr)
    return m, trace


def snapshot_steps(steps: int) -> tuple[int, ...]:
    return tuple(sorted({max(1, int(round(f * steps))) for f in SNAPSHOT_FRACTIONS} - {steps}))


def pretrain_dynamics(data: Dataset, steps: int, rng, batch_size: int = 256, lr: float = 1e-3,
                      hidden=(64, 64), snapshots: bool = False):
    """With ``snapshots`` the model also keeps copies at 10% and 20% of ``steps``."""
    env = NavEnv()
    m = DynamicsModel.create(data.state_dim, data.action_dim, rng, hidden, env.state_low, env.state_high)
    trace = train_dynamics(m, data, steps, batch_size, rng, lr, snapshot_steps(steps) if snapshots else ())
    return m, trace


def pretrain_cvae(data: Dataset, steps: int, rng, batch_size: int = 256, lr: float = 1e-3, hidden=(64, 64)):
    m = CvaeModel.create(data.state_dim, data.action_dim, rng, hidden=hidden)
    trace = train_cvae(m, data.s, data.a, steps, batch_size, rng, lr)
    return m, trace


def pretrain_ensemble(data: Dataset, steps: int, seed: int, members: int = 5, batch_size: int = 256,
                      lr: float = 1e-3, hidden=(64, 64), percentile: float = 99.0):
    """Train and calibrate the gate threshold on the training pairs; trace is the member mean."""
    det = train_ensemble(data, members, steps, batch_size, seed, lr, hidden)
    calibrate_ensemble(det, data.s.astype(np.float64), data.a.astype(np.float64), percentile)
    return det, np.mean(det.loss_traces, axis=0)


def calibration_rows(th: OodThresholds, bins: int = 50) -> list[dict]:
    rows = []
    for kind, errs in (("action", th.calibration_errors_a), ("state", th.calibration_errors_s)):
        counts, edges = np.histogram(errs, bins=bins)
        rows += [{"kind": kind, "bin_low": float(lo), "bin_high": float(hi), "count": int(c)}
                 for lo, hi, c in zip(edges[:-1], edges[1:], counts)]
    return rows


# -- agent training ------------------------------------------------------------------


@dataclass
class TrainResult:
    agent: AgentState
    models: Pretrained
    dataset: Dataset
    trace: list
    loss_traces: dict
    summary: dict


def dataset_for(cfg: RunConfig) -> Dataset:
    if cfg.paths.data:
        return load_dataset(cfg.paths.data)
    return gen_dataset(cfg.env.kind, cfg.env.n, cfg.seed, NavEnv(horizon=cfg.env.horizon))


def run_training(cfg: RunConfig, progress=None) -> TrainResult:
    """Pretrain, calibrate, train the agent and evaluate it, all from ``cfg.seed``."""
    env = NavEnv(horizon=cfg.env.horizon)
    data = dataset_for(cfg)
    dc, yc = cfg.diffusion, cfg.dynamics
    seeds = np.random.SeedSequence(cfg.seed).spawn(6)
    rng = [np.random.default_rng(s) for s in seeds]
    sched = dc.schedule()
    log.info("pretraining behavior and state models (%d steps each)", dc.steps)
    beh, tb = pretrain_behavior(data, dc.steps, rng[0], dc.batch_size, dc.lr, sched, dc.hidden, dc.embedding)
    stm, ts = pretrain_state(data, dc.steps, rng[1], dc.batch_size, dc.lr, sched, dc.hidden, dc.embedding)
    log.info("pretraining dynamics (%d steps)", yc.steps)
    dyn, td = pretrain_dynamics(data, yc.steps, rng[2], yc.batch_size, yc.lr, yc.hidden)
    sub = cfg.ood.calibration_subsample or None
    th = fit_thresholds(beh, stm, data, cfg.ood.percentile_a, cfg.ood.percentile_s, dc.m_draws, rng[3], sub)
    losses = {"behavior": tb, "state": ts, "dynamics": td}
    ens = None
    if cfg.ood.gating:
        ens, te = pretrain_ensemble(data, cfg.ood.ensemble_steps, int(seeds[4].generate_state(1)[0]),
                                    cfg.ood.ensemble_members, yc.batch_size, yc.lr, yc.hidden,
                                    cfg.ood.percentile_a)
        losses["ensemble"] = te
    models = Pretrained(beh, stm, dyn, th, ens)
    ac = cfg.agent_config()
    s = data.s.astype(np.float64)
    sd = s.std(axis=0)
    agent = create_agent(ac, data.state_dim, data.action_dim, rng[5], env,
                         (s.mean(axis=0), np.where(sd > 1e-8, sd, 1.0)))
    log.info("training agent: mode=%s steps=%d", ac.mode, ac.steps)
    trace = train(agent, data, models, rng[5], env=env, eval_seed=cfg.seed, progress=progress)
    j, score = evaluate(agent, env, ac.eval_episodes, cfg.seed)
    last = trace[-1] if trace else {}
    summary = {
        "seed": cfg.seed,
        "config_hash": config_hash(cfg.as_dict()),
        "mode": ac.mode,
        "steps": agent.step,
        "final_return": j,
        "final_normalized_score": score,
        "eval_episodes": ac.eval_episodes,
        "tau_a": th.tau_a,
        "tau_s": th.tau_s,
        "class_proportions": {k: last.get(f"frac_{k}") for k in ("id", "beneficial", "detrimental")},
    }
    return TrainResult(agent, models, data, trace, losses, summary)


# -- detector benchmark --------------------------------------------------------------


def fit_detector(name: str, data: Dataset, steps: int, seed: int, m_draws: int = 10):
    """Train detector ``name`` on ``data``; returns ``score(s, a, rng) -> array``."""
    rng = np.random.default_rng(seed)
    if name == "diffusion":
        beh, _ = pretrain_behavior(data, steps, rng)
        return lambda s, a, r: recon_error_action(beh, s, a, m_draws, r)
    if name == "ensemble":
        det = train_ensemble(data, 5, steps, seed=seed)
        return lambda s, a, r: ensemble_score(det, s, a)
    if name == "dropout":
        # regress the exact value-iteration Q so the baseline's only weakness is its uncertainty estimate
        gt = ground_truth_q()
        s, a = data.s.astype(np.float64), data.a.astype(np.float64)
        net = train_dropout_q(s, a, gt(s, a), rng, steps=steps)
        return lambda s, a, r: mc_dropout_score(net, s, a, 20, r)
    if name == "cvae":
        cvae, _ = pretrain_cvae(data, steps, rng)
        return lambda s, a, r: cvae_score(cvae, s, a)
    raise RejectedInput(f"unknown detector {name!r}; choose from {DETECTORS}")


def ood_bench(name: str, data: Dataset, scales, seed: int = 0, steps: int = 5000, n_split: int = 2000,
              percentile: float = 99.0, m_draws: int = 10):
    """Detection and ROC rows per noise scale, plus ``{scale: auroc}``.

    The reported confusion counts use the ``percentile`` of the detector's
    scores on held-in training pairs as the OOD threshold.
    """
    scales = [float(x) for x in scales]
    if not scales:
        raise RejectedInput("need at least one noise scale")
    ss = np.random.SeedSequence(seed).spawn(2)
    score = fit_detector(name, data, steps, int(ss[0].generate_state(1)[0]), m_draws)
    cal_rng = np.random.default_rng(ss[1])
    idx = cal_rng.choice(len(data), size=min(n_split, len(data)), replace=False)
    cal = score(data.s[idx].astype(np.float64), data.a[idx].astype(np.float64), cal_rng)
    threshold = nearest_rank(cal, percentile)
    det_rows, roc_rows, aucs = [], [], {}
    for scale in scales:
        # keyed on the scale value, so a split does not depend on which other scales are requested
        split_seq, score_seq = np.random.SeedSequence((seed, int(round(scale * 1e6)))).spawn(2)
        split = perturb_ood(data, scale, int(split_seq.generate_state(1)[0]), n_split)
        r = np.random.default_rng(score_seq)
        s_id = score(split.s, split.a_id, r)
        s_ood = score(split.s, split.a_ood, r)
        rep = confusion(np.concatenate([s_id, s_ood]), np.r_[np.zeros(len(s_id)), np.ones(len(s_ood))], threshold)
        row = rep.as_row()
        row.pop("undefined")
        det_rows.append({"detector": name, "noise_scale": scale, **row})
        aucs[scale] = auroc(s_id, s_ood)
        for fpr, tpr, t in roc_points(s_id, s_ood):
            roc_rows.append({"detector": name, "noise_scale": scale, "fpr": fpr, "tpr": tpr, "threshold": t})
    return det_rows, roc_rows, aucs


# -- tabular certification -----------------------------------------------------------


def parse_sizes(text: str) -> list[tuple[int, int]]:
    out = []
    for part in text.split(","):
        try:
            s, a = part.lower().split("x")
            out.append((int(s), int(a)))
        except ValueError:
            raise RejectedInput(f"bad size {part!r}; expected SxA, e.g. 20x10") from None
    if not out or any(s < 1 or a < 2 for s, a in out):
        raise RejectedInput("sizes need at least one state and two actions")
    return out


def tabular_verify(sizes, trials: int = 200, n_mdps: int = 10, seed: int = 0, gamma: float = 0.99,
                   dev_trials: int = 50, eps_det_grid=(0.0, 0.1, 0.2, 0.4)):
    """Contraction ratios and value bounds over random MDPs, then the deviation sweep."""
    rng = np.random.default_rng(seed)
    rows = []
    for n_s, n_a in sizes:
        for _ in range(n_mdps):
            mdp = random_mdp(n_s, n_a, rng, gamma=gamma)
            ratio = check_contraction(mdp, trials, rng)
            rows.append({"check": "contraction", "n_states": n_s, "n_actions": n_a, "value": ratio,
                         "passed": int(ratio <= gamma + 1e-9)})
            b = value_bounds(mdp)
            margin = min(b.lower_margin, b.upper_margin)
            rows.append({"check": "bounds", "n_states": n_s, "n_actions": n_a, "value": margin,
                         "passed": int(b.holds(1e-6))})
    n_s, n_a = sizes[0]
    mdp = random_mdp(n_s, n_a, rng, gamma=gamma)
    table = deviation_experiment(mdp, [0.0], eps_det_grid, dev_trials, rng)
    dev_rows = [{"eps_dyn": 0.0, "eps_det": float(e), "mean_deviation": float(v)}
                for e, v in zip(eps_det_grid, table[0])]
    rho = spearman(eps_det_grid, table[0])
    return rows, dev_rows, rho


# -- GMM likelihood correlation ------------------------------------------------------


def gmm_correlate(n: int = 10_000, seed: int = 0, steps: int = 5000, train_n: int = 50_000,
                  m_draws: int = 50, sigma_data: float = 1.0, scale: float = 0.1, hidden=(64, 64),
                  lr: float = 1e-3):
    """Train an unconditional denoiser on mixture samples; correlate recon error with exact NLL.

    Defaults: sigma_data is the per-component standard deviation and a narrow
    log-logistic scale keeps the scoring noise near it. Large noise levels
    denoise every point toward the mixture centre, which scores distance from
    the origin rather than likelihood, and 50 draws average out the residual
    scoring noise.
    """
    spec = GmmSpec.symmetric()
    rng = np.random.default_rng(seed)
    train_x = spec.sample(train_n, rng)
    m = DenoiserModel.create(spec.dim, 0, rng, hidden, NoiseSchedule(sigma_data=sigma_data, scale=scale))
    train_denoiser(m, train_x, steps=steps, batch_size=256, rng=rng, lr=lr)
    x, nll = gen_gmm(spec, n, seed + 1)
    err = recon_error(m, x, None, m_draws, rng)
    rows = [{"error": float(e), "nll": float(v)} for e, v in zip(err, nll)]
    return rows, pearson(err, nll)
