"""EDM-preconditioned denoisers for actions (conditioned on state) and states.

A :class:`DenoiserModel` wraps a raw MLP ``F`` as

    D(x, sigma | c) = c_skip(sigma) x + c_out(sigma) F([c_in(sigma) x, c, c_noise(sigma)])

Training minimises ``lambda(sigma) |x0 - D(x0 + sigma eps, sigma)|^2`` with
sigma drawn from a clamped log-logistic distribution.  Because
``lambda * c_out^2 == 1`` the loss is an unweighted regression of ``F`` onto
``(x0 - c_skip (x0 + sigma eps)) / c_out``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import RejectedInput, TrainingDivergence
from .nn import Mlp, Trainable, backward, forward, forward_cached


@dataclass(frozen=True)
class NoiseSchedule:
    sigma_data: float = 0.5
    sigma_min: float = 0.02
    sigma_max: float = 80.0
    scale: float = 1.0
    # "sqrt" -> 1/sqrt(sigma^2 + sigma_data^2); "printed" -> 1/(sigma^2 + sigma_data^2)
    c_in_mode: str = "sqrt"

    def __post_init__(self):
        if not 0 < self.sigma_min < self.sigma_max or self.sigma_data <= 0 or self.scale <= 0:
            raise RejectedInput("need 0 < sigma_min < sigma_max, sigma_data > 0, scale > 0")
        if self.c_in_mode not in ("sqrt", "printed"):
            raise RejectedInput(f"unknown c_in mode {self.c_in_mode!r}")

    @property
    def shape_param(self) -> float:
        return math.log(self.sigma_data)


def precondition(sigma, sigma_data: float = 0.5, c_in_mode: str = "sqrt"):
    """Return ``(c_skip, c_out, c_in, c_noise, lam)`` for noise level(s) ``sigma``."""
    sig = np.asarray(sigma, dtype=np.float64)
    if np.any(sig <= 0) or sigma_data <= 0:
        raise RejectedInput("sigma and sigma_data must be positive")
    total = sig * sig + sigma_data * sigma_data
    c_skip = sigma_data * sigma_data / total
    c_out = sig * sigma_data / np.sqrt(total)
    c_in = 1.0 / np.sqrt(total) if c_in_mode == "sqrt" else 1.0 / total
    c_noise = 0.25 * np.log(sig)
    lam = total / (sig * sigma_data) ** 2
    return c_skip, c_out, c_in, c_noise, lam


def sample_sigma(schedule: NoiseSchedule, rng: np.random.Generator | None = None, size=None, u=None):
    """``clamp(exp(ln sigma_data + s * logit(u)), sigma_min, sigma_max)`` with ``u ~ U(0, 1)``."""
    if u is None:
        u = rng.random(size)
    u = np.clip(np.asarray(u, dtype=np.float64), 1e-300, 1.0 - 1e-16)
    log_sigma = schedule.shape_param + schedule.scale * (np.log(u) - np.log1p(-u))
    return np.clip(np.exp(log_sigma), schedule.sigma_min, schedule.sigma_max)


def noise_features(c_noise: np.ndarray, embedding: str) -> np.ndarray:
    c = np.asarray(c_noise, dtype=np.float64).reshape(-1, 1)
    if embedding == "scalar":
        return c
    freqs = np.pi * 2.0 ** np.arange(8)
    return np.hstack([np.sin(c * freqs), np.cos(c * freqs)])


EMBED_WIDTH = {"scalar": 1, "sinusoidal": 16}


@dataclass
class DenoiserModel:
    net: Mlp
    schedule: NoiseSchedule
    target_dim: int
    condition_dim: int = 0
    embedding: str = "scalar"
    cond_shift: np.ndarray | None = None
    cond_scale: np.ndarray | None = None
    training_steps_done: int = 0

    def __post_init__(self):
        if self.embedding not in EMBED_WIDTH:
            raise RejectedInput(f"unknown noise embedding {self.embedding!r}")
        want_in = self.target_dim + self.condition_dim + EMBED_WIDTH[self.embedding]
        if self.net.n_in != want_in or self.net.n_out != self.target_dim:
            raise RejectedInput(f"net must map {want_in} -> {self.target_dim}, got {self.net.layer_dims}")
        if self.cond_shift is None:
            self.cond_shift = np.zeros(self.condition_dim)
        if self.cond_scale is None:
            self.cond_scale = np.ones(self.condition_dim)
        self.cond_shift = np.asarray(self.cond_shift, dtype=np.float64).ravel()
        self.cond_scale = np.asarray(self.cond_scale, dtype=np.float64).ravel()

    @classmethod
    def create(
        cls,
        target_dim: int,
        condition_dim: int,
        rng: np.random.Generator,
        hidden=(64, 64),
        schedule: NoiseSchedule | None = None,
        embedding: str = "scalar",
        activation: str = "mish",
    ) -> "DenoiserModel":
        n_in = target_dim + condition_dim + EMBED_WIDTH[embedding]
        net = Mlp.create((n_in, *hidden, target_dim), rng, hidden=activation)
        return cls(net, schedule or NoiseSchedule(), target_dim, condition_dim, embedding)

    @property
    def conditional(self) -> bool:
        return self.condition_dim > 0

    def fit_condition_stats(self, conditions) -> None:
        c = np.asarray(conditions, dtype=np.float64).reshape(-1, self.condition_dim)
        self.cond_shift = c.mean(axis=0)
        sd = c.std(axis=0)
        self.cond_scale = np.where(sd > 1e-8, sd, 1.0)

    def net_input(self, noisy: np.ndarray, sigma: np.ndarray, condition) -> tuple[np.ndarray, tuple]:
        coeffs = precondition(sigma, self.schedule.sigma_data, self.schedule.c_in_mode)
        c_in, c_noise = coeffs[2], coeffs[3]
        parts = [noisy * c_in[:, None]]
        if self.conditional:
            parts.append((condition - self.cond_shift) / self.cond_scale)
        parts.append(noise_features(c_noise, self.embedding))
        return np.hstack(parts), coeffs


def _rows(model: DenoiserModel, x, condition, sigma):
    """Normalise inputs to 2-D arrays; returns (x, condition, sigma, was_vector)."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != model.target_dim:
        raise RejectedInput(f"expected target width {model.target_dim}, got {x.shape[1]}")
    if model.conditional:
        if condition is None:
            raise RejectedInput("conditional model needs a condition")
        condition = np.atleast_2d(np.asarray(condition, dtype=np.float64))
        if condition.shape[1] != model.condition_dim:
            raise RejectedInput(f"expected condition width {model.condition_dim}, got {condition.shape[1]}")
        if len(condition) == 1 and len(x) > 1:
            condition = np.repeat(condition, len(x), axis=0)
        if len(condition) != len(x):
            raise RejectedInput("condition and target row counts differ")
    elif condition is not None and np.size(condition) > 0:
        raise RejectedInput("unconditional model takes no condition")
    sigma = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (len(x),)).copy()
    return x, condition, sigma, single


def denoise(model: DenoiserModel, noisy, sigma, condition=None) -> np.ndarray:
    """Preconditioned one-shot reconstruction ``c_skip * noisy + c_out * F(...)``."""
    x, cond, sig, single = _rows(model, noisy, condition, sigma)
    inp, (c_skip, c_out, *_) = model.net_input(x, sig, cond)
    out = c_skip[:, None] * x + c_out[:, None] * forward(model.net, inp)
    return out[0] if single else out


def train_denoiser(
    model: DenoiserModel,
    targets,
    conditions=None,
    steps: int = 5000,
    batch_size: int = 256,
    rng: np.random.Generator | None = None,
    lr: float = 3e-4,
    log_every: int = 1,
) -> np.ndarray:
    """Minibatch Adam on the EDM denoising loss; returns the per-step loss trace.

    For a conditional model ``conditions`` holds the state for each target row.
    Condition normalisation statistics are fitted from the data on first use.
    """
    x0_all = np.asarray(targets, dtype=np.float64).reshape(len(targets), -1)
    if len(x0_all) == 0:
        raise RejectedInput("empty training set")
    if model.conditional:
        c_all = np.asarray(conditions, dtype=np.float64).reshape(len(x0_all), -1)
        if np.all(model.cond_shift == 0) and np.all(model.cond_scale == 1):
            model.fit_condition_stats(c_all)
    else:
        c_all = None
    rng = rng or np.random.default_rng()
    trainer = Trainable(model.net, lr, max(steps, 1))
    trace = []
    for step in range(steps):
        idx = rng.integers(0, len(x0_all), batch_size)
        x0 = x0_all[idx]
        cond = None if c_all is None else c_all[idx]
        sigma = sample_sigma(model.schedule, rng, batch_size)
        eps = rng.standard_normal(x0.shape)
        noisy = x0 + sigma[:, None] * eps
        inp, (c_skip, c_out, *_) = model.net_input(noisy, sigma, cond)
        out, cache = forward_cached(model.net, inp)
        target = (x0 - c_skip[:, None] * noisy) / c_out[:, None]
        resid = out - target
        loss = float(np.mean(np.sum(resid * resid, axis=1)))
        if not math.isfinite(loss):
            raise TrainingDivergence("non-finite denoiser loss", step=step)
        trainer.apply(backward(model.net, inp, 2.0 * resid / batch_size, cache=cache))
        if step % log_every == 0:
            trace.append(loss)
    model.training_steps_done += steps
    return np.asarray(trace)


def karras_sigmas(n_steps: int, sigma_min: float, sigma_max: float, rho: float = 7.0) -> np.ndarray:
    """Decreasing noise levels sigma_max .. sigma_min followed by a final 0."""
    if n_steps < 1:
        raise RejectedInput("need at least one sampler step")
    if n_steps == 1:
        return np.array([sigma_max, 0.0])
    ramp = np.arange(n_steps) / (n_steps - 1)
    inv = 1.0 / rho
    sig = (sigma_max**inv + ramp * (sigma_min**inv - sigma_max**inv)) ** rho
    return np.append(sig, 0.0)


def heun_sample(model: DenoiserModel, condition, n_rows: int, steps: int, rng: np.random.Generator) -> np.ndarray:
    """Integrate the probability-flow ODE with Heun's method from sigma_max down to 0."""
    sched = model.schedule
    sigmas = karras_sigmas(steps, sched.sigma_min, sched.sigma_max)
    x = sigmas[0] * rng.standard_normal((n_rows, model.target_dim))
    for cur, nxt in zip(sigmas[:-1], sigmas[1:]):
        d = (x - denoise(model, x, cur, condition)) / cur
        x_next = x + (nxt - cur) * d
        if nxt > 0:
            d2 = (x_next - denoise(model, x_next, nxt, condition)) / nxt
            x_next = x + (nxt - cur) * 0.5 * (d + d2)
        x = x_next
    return x


def sample_actions(
    model: DenoiserModel,
    state,
    n: int,
    steps: int = 18,
    rng: np.random.Generator | None = None,
    low: float = -1.0,
    high: float = 1.0,
) -> np.ndarray:
    """Draw ``n`` actions per state from the behaviour model, clipped to ``[low, high]``.

    A single state vector gives an ``(n, action_dim)`` array; a batch of states
    of shape ``(B, state_dim)`` gives ``(B, n, action_dim)``.
    """
    if not model.conditional:
        raise RejectedInput("sample_actions needs the state-conditioned behaviour model")
    if n < 1 or steps < 1:
        raise RejectedInput("need n >= 1 and steps >= 1")
    st = np.asarray(state, dtype=np.float64)
    single = st.ndim == 1
    st = np.atleast_2d(st)
    cond = np.repeat(st, n, axis=0)
    x = heun_sample(model, cond, len(cond), steps, rng or np.random.default_rng())
    x = np.clip(x, low, high).reshape(len(st), n, model.target_dim)
    return x[0] if single else x


def recon_error(model: DenoiserModel, x, condition=None, m_draws: int = 10, rng=None) -> np.ndarray:
    """Per-row mean over ``m_draws`` of ``|x - D(x + sigma eps, sigma)|_2`` with fresh sigma, eps."""
    if m_draws < 1:
        raise RejectedInput("m_draws must be >= 1")
    rows, cond, _, single = _rows(model, x, condition, 1.0)
    rng = rng or np.random.default_rng()
    n = len(rows)
    rep = np.repeat(rows, m_draws, axis=0)
    rep_cond = None if cond is None else np.repeat(cond, m_draws, axis=0)
    sigma = sample_sigma(model.schedule, rng, len(rep))
    noisy = rep + sigma[:, None] * rng.standard_normal(rep.shape)
    err = np.linalg.norm(rep - denoise(model, noisy, sigma, rep_cond), axis=1)
    out = err.reshape(n, m_draws).mean(axis=1)
    return out[0] if single else out


def recon_error_action(model: DenoiserModel, state, action, m_draws: int = 10, rng=None):
    return recon_error(model, action, state, m_draws, rng)


def recon_error_state(model: DenoiserModel, state, m_draws: int = 10, rng=None):
    return recon_error(model, state, None, m_draws, rng)
