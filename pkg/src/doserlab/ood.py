"""OOD thresholds over diffusion reconstruction errors, plus baseline detectors.

Baselines: dynamics-ensemble variance (also used as a confidence gate),
MC-dropout Q variance and CVAE action reconstruction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .diffusion import DenoiserModel, recon_error_action, recon_error_state
from .dynamics import DynamicsModel, Regressor, fit_regressor, predict, train_dynamics
from .errors import RejectedInput, StateError, TrainingDivergence
from .nn import Mlp, Trainable, backward, forward, forward_cached


def nearest_rank(values, p: float) -> float:
    """The ceil(p/100 * n)-th smallest value (1-based)."""
    v = np.sort(np.asarray(values, dtype=np.float64).ravel())
    if v.size == 0:
        raise RejectedInput("percentile of an empty sample")
    if not 0 < p <= 100:
        raise RejectedInput(f"percentile must be in (0, 100], got {p}")
    k = max(1, math.ceil(p / 100.0 * v.size))
    return float(v[k - 1])


@dataclass
class OodThresholds:
    tau_a: float
    tau_s: float
    percentile_a: float
    percentile_s: float
    calibration_errors_a: np.ndarray
    calibration_errors_s: np.ndarray

    @classmethod
    def from_errors(cls, errors_a, errors_s, percentile_a: float, percentile_s: float) -> "OodThresholds":
        ea = np.sort(np.asarray(errors_a, dtype=np.float64).ravel())
        es = np.sort(np.asarray(errors_s, dtype=np.float64).ravel())
        return cls(nearest_rank(ea, percentile_a), nearest_rank(es, percentile_s),
                   float(percentile_a), float(percentile_s), ea, es)


def fit_thresholds(
    behavior_model: DenoiserModel,
    state_model: DenoiserModel,
    dataset,
    percentile_a: float = 99.0,
    percentile_s: float = 99.0,
    m_draws: int = 10,
    rng: np.random.Generator | None = None,
    subsample: int | None = None,
) -> OodThresholds:
    """Score every dataset row (or a random subsample) and take nearest-rank percentiles."""
    if len(dataset) == 0:
        raise RejectedInput("cannot calibrate on an empty dataset")
    rng = rng or np.random.default_rng()
    idx = np.arange(len(dataset))
    if subsample is not None and subsample < len(dataset):
        idx = np.sort(rng.choice(len(dataset), subsample, replace=False))
    s = dataset.s[idx].astype(np.float64)
    a = dataset.a[idx].astype(np.float64)
    err_a = recon_error_action(behavior_model, s, a, m_draws, rng)
    err_s = recon_error_state(state_model, s, m_draws, rng)
    return OodThresholds.from_errors(err_a, err_s, percentile_a, percentile_s)


def is_ood_action(thresholds: OodThresholds, error_a):
    return np.asarray(error_a) > thresholds.tau_a


def is_ood_state(thresholds: OodThresholds, error_s):
    return np.asarray(error_s) > thresholds.tau_s


# -- dynamics ensemble ---------------------------------------------------------------


class Gate(str, Enum):
    CONFIDENT = "Confident"
    UNCERTAIN = "Uncertain"


@dataclass
class EnsembleDetector:
    members: list
    variance_threshold: float | None = None
    loss_traces: list = field(default_factory=list, repr=False)  # per member, not persisted

    def __post_init__(self):
        if len(self.members) < 2:
            raise RejectedInput("an ensemble needs at least two members")
        dims = {(m.state_dim, m.action_dim) for m in self.members}
        if len(dims) != 1:
            raise RejectedInput("ensemble members disagree on I/O dims")


def train_ensemble(dataset, n_members: int = 5, steps: int = 3000, batch_size: int = 256,
                   seed: int = 0, lr: float = 1e-3, hidden=(64, 64)) -> EnsembleDetector:
    """Members see identical data and differ only in their seed."""
    members, traces = [], []
    for child in np.random.SeedSequence(seed).spawn(n_members):
        rng = np.random.default_rng(child)
        m = DynamicsModel.create(dataset.state_dim, dataset.action_dim, rng, hidden)
        traces.append(train_dynamics(m, dataset, steps, batch_size, rng, lr))
        members.append(m)
    return EnsembleDetector(members, loss_traces=traces)


def ensemble_score(detector: EnsembleDetector, s, a) -> np.ndarray:
    """(1/K) sum_k |s'_k - mean s'|^2 over member next-state predictions."""
    if any(m.training_steps_done == 0 for m in detector.members):
        raise StateError("ensemble has untrained members")
    preds = np.stack([predict(m, s, a)[0] for m in detector.members])
    dev = preds - preds.mean(axis=0)
    return np.mean(np.sum(dev * dev, axis=2), axis=0)


def calibrate_ensemble(detector: EnsembleDetector, s, a, percentile: float = 99.0) -> float:
    detector.variance_threshold = nearest_rank(ensemble_score(detector, s, a), percentile)
    return detector.variance_threshold


def uncertain_mask(detector: EnsembleDetector, s, a) -> np.ndarray:
    if detector.variance_threshold is None:
        raise StateError("ensemble gate is not calibrated")
    return ensemble_score(detector, s, a) > detector.variance_threshold


def ensemble_gate(detector: EnsembleDetector, s, a) -> Gate:
    """Gate for a single (s, a) pair; use ``uncertain_mask`` for batches."""
    flag = uncertain_mask(detector, np.reshape(s, (1, -1)), np.reshape(a, (1, -1)))[0]
    return Gate.UNCERTAIN if flag else Gate.CONFIDENT


# -- MC dropout ----------------------------------------------------------------------


def train_dropout_q(s, a, q_target, rng, dropout_prob: float = 0.1, steps: int = 3000,
                    batch_size: int = 256, lr: float = 1e-3, hidden=(64, 64)) -> Regressor:
    """Regress a supplied Q target on (s, a) with dropout on hidden layers."""
    if dropout_prob <= 0:
        raise RejectedInput("MC dropout needs dropout_prob > 0")
    x = np.hstack([np.reshape(s, (len(s), -1)), np.reshape(a, (len(a), -1))])
    reg = Regressor.create(x.shape[1], 1, rng, hidden, dropout_prob=dropout_prob)
    fit_regressor(reg, x, np.reshape(q_target, (-1, 1)), steps, batch_size, rng, lr)
    return reg


def mc_dropout_score(q_net: Regressor, s, a, passes: int = 20, rng=None) -> np.ndarray:
    """Sample variance of the standardised Q output over stochastic passes."""
    if q_net.net.dropout_prob <= 0:
        raise RejectedInput("MC dropout scoring needs dropout_prob > 0")
    if passes < 2:
        raise RejectedInput("need at least two passes")
    rng = rng or np.random.default_rng()
    xn = q_net.normalize_input(np.hstack([np.reshape(s, (len(s), -1)), np.reshape(a, (len(a), -1))]))
    outs = np.stack([forward(q_net.net, xn, True, rng)[:, 0] for _ in range(passes)])
    return outs.var(axis=0, ddof=1)


# -- CVAE ----------------------------------------------------------------------------

_LOGVAR_RANGE = (-10.0, 5.0)


@dataclass
class CvaeModel:
    encoder: Mlp
    decoder: Mlp
    latent_dim: int
    state_shift: np.ndarray
    state_scale: np.ndarray
    trained: bool = False

    def __post_init__(self):
        if self.encoder.n_out != 2 * self.latent_dim:
            raise RejectedInput("encoder width must be 2 * latent_dim")

    @classmethod
    def create(cls, state_dim: int, action_dim: int, rng, latent_dim: int = 4, hidden=(64, 64)):
        enc = Mlp.create((state_dim + action_dim, *hidden, 2 * latent_dim), rng)
        dec = Mlp.create((state_dim + latent_dim, *hidden, action_dim), rng)
        return cls(enc, dec, latent_dim, np.zeros(state_dim), np.ones(state_dim))

    def _s(self, s) -> np.ndarray:
        return (np.reshape(s, (len(s), -1)) - self.state_shift) / self.state_scale

    def encode(self, s, a):
        h = forward(self.encoder, np.hstack([self._s(s), np.reshape(a, (len(a), -1))]))
        return h[:, : self.latent_dim], np.clip(h[:, self.latent_dim:], *_LOGVAR_RANGE)

    def decode(self, s, z) -> np.ndarray:
        return forward(self.decoder, np.hstack([self._s(s), z]))


def cvae_loss_grad(cvae: CvaeModel, s_norm, a, eps, kl_weight: float = 1.0):
    """Batch-mean ELBO loss with its encoder and decoder gradients for fixed noise ``eps``."""
    L, ds, n = cvae.latent_dim, s_norm.shape[1], len(a)
    enc_in = np.hstack([s_norm, a])
    h, enc_cache = forward_cached(cvae.encoder, enc_in)
    mu, raw_lv = h[:, :L], h[:, L:]
    lv = np.clip(raw_lv, *_LOGVAR_RANGE)
    std = np.exp(0.5 * lv)
    z = mu + std * eps
    dec_in = np.hstack([s_norm, z])
    rec, dec_cache = forward_cached(cvae.decoder, dec_in)
    resid = rec - a
    kl = -0.5 * np.sum(1 + lv - mu * mu - np.exp(lv), axis=1)
    loss = float(np.mean(np.sum(resid * resid, axis=1) + kl_weight * kl))
    g_dec, g_in = backward(cvae.decoder, dec_in, 2.0 * resid / n, dec_cache, want_input=True)
    dz = g_in[:, ds:]
    d_mu = dz + kl_weight * mu / n
    d_lv = dz * eps * 0.5 * std + kl_weight * 0.5 * (np.exp(lv) - 1.0) / n
    d_lv *= (raw_lv >= _LOGVAR_RANGE[0]) & (raw_lv <= _LOGVAR_RANGE[1])
    g_enc = backward(cvae.encoder, enc_in, np.hstack([d_mu, d_lv]), enc_cache)
    return loss, g_enc, g_dec


def train_cvae(cvae: CvaeModel, s, a, steps: int = 3000, batch_size: int = 256, rng=None,
               lr: float = 1e-3, kl_weight: float = 1.0) -> np.ndarray:
    """Reparameterised ELBO: squared reconstruction + kl_weight * KL(q(z|s,a) || N(0, I))."""
    rng = rng or np.random.default_rng()
    s = np.reshape(np.asarray(s, dtype=np.float64), (len(s), -1))
    a = np.reshape(np.asarray(a, dtype=np.float64), (len(a), -1))
    if len(s) == 0:
        raise RejectedInput("empty training set")
    sd = s.std(axis=0)
    cvae.state_shift, cvae.state_scale = s.mean(axis=0), np.where(sd > 1e-8, sd, 1.0)
    sn = cvae._s(s)
    enc_opt, dec_opt = Trainable(cvae.encoder, lr, steps), Trainable(cvae.decoder, lr, steps)
    trace = np.empty(steps)
    for step in range(steps):
        idx = rng.integers(0, len(s), batch_size)
        eps = rng.standard_normal((batch_size, cvae.latent_dim))
        loss, g_enc, g_dec = cvae_loss_grad(cvae, sn[idx], a[idx], eps, kl_weight)
        if not math.isfinite(loss):
            raise TrainingDivergence("non-finite CVAE loss", step=step)
        dec_opt.apply(g_dec)
        enc_opt.apply(g_enc)
        trace[step] = loss
    cvae.trained = True
    return trace


def cvae_score(cvae: CvaeModel, s, a, rng=None, sample: bool = False) -> np.ndarray:
    """|a - decoder(s, z)|_2 with z the posterior mean (or a posterior draw if ``sample``)."""
    if not cvae.trained:
        raise StateError("CVAE has not been trained")
    a = np.reshape(np.asarray(a, dtype=np.float64), (len(a), -1))
    mu, lv = cvae.encode(s, a)
    z = mu
    if sample:
        rng = rng or np.random.default_rng()
        z = mu + np.exp(0.5 * lv) * rng.standard_normal(mu.shape)
    return np.linalg.norm(a - cvae.decode(s, z), axis=1)
