"""One-step dynamics model predicting next state and reward from (s, a)."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import RejectedInput, StateError, TrainingDivergence
from .nn import Mlp, Trainable, backward, forward, forward_cached


def _stats(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    sd = x.std(axis=0)
    return x.mean(axis=0), np.where(sd > 1e-8, sd, 1.0)


@dataclass
class Regressor:
    """MLP with standardised inputs and outputs; predictions come back in data units."""

    net: Mlp
    in_shift: np.ndarray | None = None
    in_scale: np.ndarray | None = None
    out_shift: np.ndarray | None = None
    out_scale: np.ndarray | None = None

    def __post_init__(self):
        if self.in_shift is None:
            self.in_shift, self.in_scale = np.zeros(self.net.n_in), np.ones(self.net.n_in)
        if self.out_shift is None:
            self.out_shift, self.out_scale = np.zeros(self.net.n_out), np.ones(self.net.n_out)
        for name in ("in_shift", "in_scale", "out_shift", "out_scale"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64).ravel())

    @classmethod
    def create(cls, n_in: int, n_out: int, rng, hidden=(64, 64), activation="relu", dropout_prob=0.0):
        return cls(Mlp.create((n_in, *hidden, n_out), rng, hidden=activation, dropout_prob=dropout_prob))

    def fit_stats(self, x, y) -> None:
        self.in_shift, self.in_scale = _stats(np.asarray(x, dtype=np.float64))
        self.out_shift, self.out_scale = _stats(np.asarray(y, dtype=np.float64))

    def normalize_input(self, x) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.in_shift) / self.in_scale

    def predict(self, x, train_mode: bool = False, rng=None) -> np.ndarray:
        out = forward(self.net, self.normalize_input(x), train_mode, rng)
        return out * self.out_scale + self.out_shift

    def copy(self) -> "Regressor":
        return Regressor(self.net.copy(), self.in_shift.copy(), self.in_scale.copy(),
                         self.out_shift.copy(), self.out_scale.copy())


def fit_regressor(
    reg: Regressor,
    x,
    y,
    steps: int,
    batch_size: int,
    rng: np.random.Generator,
    lr: float = 1e-3,
    snapshot_steps=(),
    on_snapshot=None,
) -> np.ndarray:
    """Minibatch Adam on squared error in standardised output units.

    ``on_snapshot(step, reg)`` is called after each step listed in ``snapshot_steps``.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).reshape(len(x), -1)
    if len(x) == 0:
        raise RejectedInput("empty training set")
    reg.fit_stats(x, y)
    xn = reg.normalize_input(x)
    yn = (y - reg.out_shift) / reg.out_scale
    trainer = Trainable(reg.net, lr, max(steps, 1))
    train_mode = reg.net.dropout_prob > 0
    wanted = set(int(s) for s in snapshot_steps)
    trace = np.empty(steps)
    for step in range(steps):
        idx = rng.integers(0, len(x), batch_size)
        out, cache = forward_cached(reg.net, xn[idx], train_mode, rng)
        resid = out - yn[idx]
        loss = float(np.mean(np.sum(resid * resid, axis=1)))
        if not math.isfinite(loss):
            raise TrainingDivergence("non-finite regression loss", step=step)
        trainer.apply(backward(reg.net, xn[idx], 2.0 * resid / batch_size, cache=cache))
        trace[step] = loss
        if step + 1 in wanted and on_snapshot is not None:
            on_snapshot(step + 1, reg)
    return trace


@dataclass
class DynamicsModel:
    reg: Regressor
    state_dim: int
    action_dim: int
    state_low: float = -10.0
    state_high: float = 10.0
    training_steps_done: int = 0
    snapshots: dict = field(default_factory=dict, repr=False)

    @classmethod
    def create(cls, state_dim: int, action_dim: int, rng, hidden=(64, 64), state_low=-10.0, state_high=10.0):
        reg = Regressor.create(state_dim + action_dim, state_dim + 1, rng, hidden)
        return cls(reg, state_dim, action_dim, state_low, state_high)

    def copy(self) -> "DynamicsModel":
        return DynamicsModel(self.reg.copy(), self.state_dim, self.action_dim, self.state_low,
                             self.state_high, self.training_steps_done)


def train_dynamics(
    model: DynamicsModel,
    dataset,
    steps: int,
    batch_size: int,
    rng: np.random.Generator,
    lr: float = 1e-3,
    snapshot_steps=(),
) -> np.ndarray:
    """Supervised regression of (s', r) on (s, a).

    Copies of the model after each step in ``snapshot_steps`` land in
    ``model.snapshots`` (used for the degraded-dynamics ablation).
    """
    x = np.hstack([dataset.s, dataset.a]).astype(np.float64)
    y = np.hstack([dataset.s2, dataset.r[:, None]]).astype(np.float64)

    def keep(step, reg):
        snap = model.copy()
        snap.reg = reg.copy()
        snap.training_steps_done = model.training_steps_done + step
        model.snapshots[step] = snap

    trace = fit_regressor(model.reg, x, y, steps, batch_size, rng, lr, snapshot_steps, keep)
    model.training_steps_done += steps
    return trace


def predict(model: DynamicsModel, s, a) -> tuple[np.ndarray, np.ndarray]:
    """Next state (clamped to the state box) and reward for each row."""
    if model.training_steps_done == 0:
        raise StateError("dynamics model has not been trained")
    s = np.atleast_2d(np.asarray(s, dtype=np.float64))
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    if s.shape[1] != model.state_dim or a.shape[1] != model.action_dim or len(s) != len(a):
        raise RejectedInput("state/action shapes do not match the dynamics model")
    out = model.reg.predict(np.hstack([s, a]))
    s2 = np.clip(out[:, : model.state_dim], model.state_low, model.state_high)
    return s2, out[:, model.state_dim]
