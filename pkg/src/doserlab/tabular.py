"""Exact finite-MDP versions of the in-sample and selective Bellman operators.

Used to certify contraction, the fixed-point value bounds, and the growth of
critic deviation under dynamics and detector errors.  Everything here is
dense numpy over (S, A) tables.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import NumericalError, RejectedInput

ID, BENEFICIAL, DETRIMENTAL = 0, 1, 2
LABEL_NAMES = {ID: "ID", BENEFICIAL: "Beneficial", DETRIMENTAL: "Detrimental"}


@dataclass
class TabularMdp:
    P: np.ndarray  # (S, A, S)
    R: np.ndarray  # (S, A)
    gamma: float
    labels: np.ndarray  # (S, A) of ID / BENEFICIAL / DETRIMENTAL
    delta_v: float = 0.0
    eta: float = 0.9
    r_min: float | None = None
    r_max: float | None = None

    def __post_init__(self):
        self.P = np.asarray(self.P, dtype=np.float64)
        self.R = np.asarray(self.R, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int8)
        S, A = self.R.shape
        if self.P.shape != (S, A, S) or self.labels.shape != (S, A):
            raise RejectedInput("P must be (S, A, S) and labels (S, A) to match R")
        if not 0.0 <= self.gamma < 1.0:
            raise RejectedInput("gamma must lie in [0, 1)")
        if not 0.0 <= self.eta <= 1.0 or self.delta_v < 0:
            raise RejectedInput("need eta in [0, 1] and delta_v >= 0")
        if np.any(self.P < 0) or not np.allclose(self.P.sum(axis=2), 1.0, atol=1e-12):
            raise RejectedInput("every P row must be a probability vector")
        if not np.isin(self.labels, (ID, BENEFICIAL, DETRIMENTAL)).all():
            raise RejectedInput("unknown OOD label")
        if not self.support.any(axis=1).all():
            raise RejectedInput("every state needs at least one in-distribution action")
        if self.r_min is None:
            self.r_min = float(self.R.min())
        if self.r_max is None:
            self.r_max = float(self.R.max())

    @property
    def n_states(self) -> int:
        return self.R.shape[0]

    @property
    def n_actions(self) -> int:
        return self.R.shape[1]

    @property
    def support(self) -> np.ndarray:
        return self.labels == ID

    @property
    def q_min(self) -> float:
        return self.r_min / (1.0 - self.gamma)

    @property
    def q_max(self) -> float:
        return self.r_max / (1.0 - self.gamma)


def random_mdp(
    n_states: int,
    n_actions: int,
    rng: np.random.Generator,
    gamma: float = 0.99,
    eta: float = 0.9,
    delta_v: float = 0.5,
    ood_fraction: float = 0.4,
    beneficial_share: float = 0.5,
    reward_range: tuple[float, float] = (0.0, 1.0),
) -> TabularMdp:
    """Dirichlet transitions, uniform rewards, random OOD labelling with one ID action per state guaranteed."""
    P = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    lo, hi = reward_range
    R = rng.uniform(lo, hi, size=(n_states, n_actions))
    ood = rng.random((n_states, n_actions)) < ood_fraction
    ood[np.arange(n_states), rng.integers(0, n_actions, n_states)] = False
    ben = rng.random((n_states, n_actions)) < beneficial_share
    labels = np.where(ood, np.where(ben, BENEFICIAL, DETRIMENTAL), ID)
    return TabularMdp(P, R, gamma, labels, delta_v, eta, r_min=lo, r_max=hi)


def _check_q(mdp: TabularMdp, Q) -> np.ndarray:
    Q = np.asarray(Q, dtype=np.float64)
    if Q.shape != mdp.R.shape:
        raise RejectedInput(f"Q has shape {Q.shape}, expected {mdp.R.shape}")
    return Q


def in_sample_op(mdp: TabularMdp, Q) -> np.ndarray:
    """Backup with the next action drawn uniformly from the in-distribution support."""
    Q = _check_q(mdp, Q)
    sup = mdp.support
    v_next = np.where(sup, Q, 0.0).sum(axis=1) / sup.sum(axis=1)
    return mdp.R + mdp.gamma * (mdp.P @ v_next)


def best_id_value(mdp: TabularMdp, Q) -> np.ndarray:
    """Per-state maximum of Q over in-distribution actions."""
    return np.where(mdp.support, Q, -np.inf).max(axis=1)


def doser_op(mdp: TabularMdp, Q) -> np.ndarray:
    Q = _check_q(mdp, Q)
    out = in_sample_op(mdp, Q)
    out[mdp.labels == DETRIMENTAL] = mdp.q_min
    bonus_target = mdp.eta * (best_id_value(mdp, Q) + mdp.delta_v)
    ben = mdp.labels == BENEFICIAL
    out[ben] = np.broadcast_to(bonus_target[:, None], out.shape)[ben]
    return out


def check_contraction(mdp: TabularMdp, trials: int, rng: np.random.Generator, op=doser_op) -> float:
    """Largest observed ``|TQ1 - TQ2|_inf / |Q1 - Q2|_inf`` over random pairs in [Q_min, Q_max]."""
    if trials < 1:
        raise RejectedInput("trials must be >= 1")
    worst = 0.0
    lo, hi = mdp.q_min, mdp.q_max
    if hi <= lo:
        hi = lo + 1.0
    for _ in range(trials):
        q1 = rng.uniform(lo, hi, mdp.R.shape)
        q2 = rng.uniform(lo, hi, mdp.R.shape)
        worst = max(worst, contraction_ratio(mdp, q1, q2, op) or 0.0)
    return worst


def contraction_ratio(mdp: TabularMdp, q1, q2, op=doser_op) -> float | None:
    """Ratio for one pair, or None when the pair coincides."""
    den = np.max(np.abs(np.asarray(q1) - np.asarray(q2)))
    if den == 0.0:
        return None
    return float(np.max(np.abs(op(mdp, q1) - op(mdp, q2))) / den)


def fixed_point(mdp: TabularMdp, tol: float = 1e-10, op=doser_op, start=None, max_iter: int = 200_000) -> np.ndarray:
    """Iterate ``op`` from ``start`` (zeros by default) until successive iterates differ by < tol."""
    if tol <= 0:
        raise RejectedInput("tol must be positive")
    Q = np.zeros(mdp.R.shape) if start is None else _check_q(mdp, start).copy()
    for _ in range(max_iter):
        nxt = op(mdp, Q)
        if np.max(np.abs(nxt - Q)) < tol:
            return nxt
        Q = nxt
    raise NumericalError(f"no convergence to {tol} within {max_iter} iterations")


@dataclass
class BoundReport:
    lower_margin: float  # min(Q* - Q_min)
    upper_margin: float  # min(bound - Q*)
    detrimental_exact: bool
    residual: float

    def holds(self, atol: float = 1e-6) -> bool:
        return self.lower_margin >= -atol and self.upper_margin >= -atol and self.detrimental_exact


def value_bounds(mdp: TabularMdp, tol: float = 1e-10) -> BoundReport:
    """Compare the selective fixed point with the in-sample one.

    Checks ``Q_min <= Q*(s, a) <= max_id Q_in(s) + eta * delta_v`` for every entry.
    """
    q_star = fixed_point(mdp, tol)
    q_in = fixed_point(mdp, tol, op=in_sample_op)
    upper = best_id_value(mdp, q_in)[:, None] + mdp.eta * mdp.delta_v
    det = mdp.labels == DETRIMENTAL
    return BoundReport(
        lower_margin=float(np.min(q_star - mdp.q_min)),
        upper_margin=float(np.min(upper - q_star)),
        detrimental_exact=bool(np.all(q_star[det] == mdp.q_min)),
        residual=float(np.max(np.abs(doser_op(mdp, q_star) - q_star))),
    )


def perturb_dynamics(mdp: TabularMdp, eps_dyn: float, rng: np.random.Generator) -> np.ndarray:
    """Mix each row with a random distribution so that ``|P_hat - P|_1 <= eps_dyn``."""
    if eps_dyn == 0:
        return mdp.P.copy()
    noise = rng.dirichlet(np.ones(mdp.n_states), size=mdp.R.shape)
    # |noise - P|_1 <= 2, so weight eps/2 keeps the L1 shift within eps
    w = min(eps_dyn / 2.0, 1.0)
    P_hat = (1.0 - w) * mdp.P + w * noise
    return P_hat / P_hat.sum(axis=2, keepdims=True)


def flip_labels(mdp: TabularMdp, eps_det: float, rng: np.random.Generator) -> np.ndarray:
    """Swap Beneficial and Detrimental independently with probability eps_det."""
    labels = mdp.labels.copy()
    if eps_det == 0:
        return labels
    flip = (rng.random(labels.shape) < eps_det) & (labels != ID)
    labels[flip] = np.where(labels[flip] == BENEFICIAL, DETRIMENTAL, BENEFICIAL)
    return labels


def deviation_experiment(mdp: TabularMdp, eps_dyn_grid, eps_det_grid, trials: int, rng, tol: float = 1e-10):
    """Mean (over trials) sup-norm gap between perturbed and reference fixed points.

    Returns an array of shape ``(len(eps_dyn_grid), len(eps_det_grid))``.
    """
    eps_dyn_grid = list(eps_dyn_grid)
    eps_det_grid = list(eps_det_grid)
    if not eps_dyn_grid or not eps_det_grid or trials < 1:
        raise RejectedInput("grids must be nonempty and trials >= 1")
    q_ref = fixed_point(mdp, tol)
    table = np.zeros((len(eps_dyn_grid), len(eps_det_grid)))
    for i, e_dyn in enumerate(eps_dyn_grid):
        for j, e_det in enumerate(eps_det_grid):
            total = 0.0
            for _ in range(trials):
                perturbed = replace(mdp, P=perturb_dynamics(mdp, e_dyn, rng), labels=flip_labels(mdp, e_det, rng))
                total += float(np.max(np.abs(fixed_point(perturbed, tol) - q_ref)))
            table[i, j] = total / trials
    return table
