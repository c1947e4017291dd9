"""1D navigation task, offline datasets, and the analytic oracles built on them.

Datasets are stored in float32 and the environment is stepped in float32 when
generating them, so every stored transition satisfies ``s' = clip(s + a)`` and
``r = -|s'|`` exactly and survives a round trip through the file format.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import RegularGridInterpolator
from scipy.special import logsumexp
from scipy.stats import multivariate_normal

from .errors import NumericalError, RejectedInput

F32 = np.float32

EXPERT_NOISE = 0.05
MEDIUM_NOISE = 0.5


@dataclass(frozen=True)
class NavEnv:
    state_low: float = -10.0
    state_high: float = 10.0
    action_low: float = -1.0
    action_high: float = 1.0
    horizon: int = 50
    target: float = 0.0

    @property
    def r_min(self) -> float:
        return -max(abs(self.state_low - self.target), abs(self.state_high - self.target))

    def q_min(self, gamma: float) -> float:
        return self.r_min / (1.0 - gamma)

    def step(self, s, a):
        """Vectorised transition; keeps the dtype of the inputs."""
        s = np.asarray(s)
        a = np.clip(np.asarray(a), self.action_low, self.action_high).astype(s.dtype, copy=False)
        s2 = np.clip(s + a, self.state_low, self.state_high).astype(s.dtype, copy=False)
        return s2, -np.abs(s2 - s.dtype.type(self.target))


def nav_step(s: float, a: float, env: NavEnv = NavEnv()) -> tuple[float, float]:
    s2, r = env.step(np.float64(s), np.float64(a))
    return float(s2), float(r)


def optimal_action(s, env: NavEnv = NavEnv()):
    return np.clip(env.target - np.asarray(s), env.action_low, env.action_high)


@dataclass
class Dataset:
    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s2: np.ndarray
    done: np.ndarray
    source: str = "custom"
    seed: int | None = None

    def __post_init__(self):
        self.s = np.asarray(self.s, dtype=F32).reshape(len(self.s), -1)
        self.a = np.asarray(self.a, dtype=F32).reshape(len(self.a), -1)
        self.s2 = np.asarray(self.s2, dtype=F32).reshape(len(self.s2), -1)
        self.r = np.asarray(self.r, dtype=F32).ravel()
        self.done = np.asarray(self.done, dtype=F32).ravel()
        n = len(self.s)
        if not (len(self.a) == len(self.r) == len(self.s2) == len(self.done) == n):
            raise RejectedInput("transition arrays differ in length")
        if self.s2.shape[1] != self.s.shape[1]:
            raise RejectedInput("s and s' differ in width")
        if not np.all(np.isfinite(self.r)):
            raise RejectedInput("rewards must be finite")

    def __len__(self) -> int:
        return len(self.s)

    @property
    def state_dim(self) -> int:
        return self.s.shape[1]

    @property
    def action_dim(self) -> int:
        return self.a.shape[1]

    def batch(self, idx) -> dict:
        """float64 views of the rows at ``idx``."""
        return {
            "s": self.s[idx].astype(np.float64),
            "a": self.a[idx].astype(np.float64),
            "r": self.r[idx].astype(np.float64),
            "s2": self.s2[idx].astype(np.float64),
            "done": self.done[idx].astype(np.float64),
        }

    def sample(self, rng: np.random.Generator, size: int) -> dict:
        return self.batch(rng.integers(0, len(self), size))

    def matrix(self) -> np.ndarray:
        """Rows laid out as s | a | r | s' | done."""
        return np.hstack([self.s, self.a, self.r[:, None], self.s2, self.done[:, None]]).astype(F32)


def gen_dataset(kind: str, n: int, seed: int, env: NavEnv = NavEnv()) -> Dataset:
    """Noisy-optimal rollouts from uniform start states.

    ``expert`` adds U[-0.05, 0.05] to the optimal step, ``medium`` U[-0.5, 0.5].
    ``done`` marks the last step of each fixed-horizon episode.
    """
    noise = {"expert": EXPERT_NOISE, "medium": MEDIUM_NOISE}.get(kind)
    if noise is None:
        raise RejectedInput(f"unknown dataset kind {kind!r}")
    if n < 1:
        raise RejectedInput("n must be >= 1")
    rng = np.random.default_rng(seed)
    n_traj = -(-n // env.horizon)
    s = rng.uniform(env.state_low, env.state_high, n_traj).astype(F32)
    cols = {k: np.empty((env.horizon, n_traj), F32) for k in ("s", "a", "r", "s2", "done")}
    lo, hi = F32(env.action_low), F32(env.action_high)
    for t in range(env.horizon):
        eps = rng.uniform(-noise, noise, n_traj).astype(F32)
        a = np.clip(optimal_action(s, env).astype(F32) + eps, lo, hi)
        s2, r = env.step(s, a)
        cols["s"][t], cols["a"][t], cols["r"][t], cols["s2"][t] = s, a, r, s2
        cols["done"][t] = F32(t == env.horizon - 1)
        s = s2
    # trajectory-major order, truncated to n rows
    flat = {k: v.T.reshape(-1)[:n] for k, v in cols.items()}
    return Dataset(flat["s"], flat["a"], flat["r"], flat["s2"], flat["done"], source=kind, seed=seed)


@dataclass
class GroundTruthQ:
    states: np.ndarray
    actions: np.ndarray
    q: np.ndarray  # (len(states), len(actions))
    gamma: float
    residual: float
    _interp: RegularGridInterpolator | None = field(default=None, repr=False)

    def __call__(self, s, a) -> np.ndarray:
        if self._interp is None:
            self._interp = RegularGridInterpolator((self.states, self.actions), self.q)
        pts = np.column_stack([np.ravel(s), np.ravel(a)])
        pts[:, 0] = np.clip(pts[:, 0], self.states[0], self.states[-1])
        pts[:, 1] = np.clip(pts[:, 1], self.actions[0], self.actions[-1])
        return self._interp(pts)

    def greedy_action(self) -> np.ndarray:
        return self.actions[np.argmax(self.q, axis=1)]


def _interp_weights(grid: np.ndarray, x: np.ndarray):
    idx = np.clip(np.searchsorted(grid, x, side="right") - 1, 0, len(grid) - 2)
    w_hi = (x - grid[idx]) / (grid[idx + 1] - grid[idx])
    return idx, np.clip(w_hi, 0.0, 1.0)


def ground_truth_q(
    state_bins: int = 201,
    action_bins: int = 21,
    gamma: float = 0.99,
    env: NavEnv = NavEnv(),
    tol: float = 1e-10,
    max_iter: int = 100_000,
) -> GroundTruthQ:
    """Infinite-horizon value iteration on a grid, interpolating V linearly between grid states."""
    if state_bins < 2 or action_bins < 2:
        raise RejectedInput("need at least two bins per axis")
    states = np.linspace(env.state_low, env.state_high, state_bins)
    actions = np.linspace(env.action_low, env.action_high, action_bins)
    s2, r = env.step(states[:, None] + 0.0 * actions[None, :], np.broadcast_to(actions, (state_bins, action_bins)))
    idx, w = _interp_weights(states, s2)
    q = np.zeros((state_bins, action_bins))
    for _ in range(max_iter):
        v = q.max(axis=1)
        nxt = r + gamma * ((1.0 - w) * v[idx] + w * v[idx + 1])
        residual = float(np.max(np.abs(nxt - q)))
        q = nxt
        if residual < tol:
            v = q.max(axis=1)
            residual = float(np.max(np.abs(r + gamma * ((1.0 - w) * v[idx] + w * v[idx + 1]) - q)))
            return GroundTruthQ(states, actions, q, gamma, residual)
    raise NumericalError(f"value iteration did not reach {tol} in {max_iter} sweeps")


@dataclass
class OodSplit:
    """Paired in-distribution and perturbed actions at the same states."""

    s: np.ndarray
    a_id: np.ndarray
    a_ood: np.ndarray
    noise_scale: float

    def __len__(self) -> int:
        return len(self.s)

    def stacked(self):
        """(states, actions, labels) with ID rows first; label 1 marks OOD."""
        s = np.vstack([self.s, self.s])
        a = np.vstack([self.a_id, self.a_ood])
        y = np.concatenate([np.zeros(len(self)), np.ones(len(self))])
        return s, a, y


def perturb_ood(dataset: Dataset, noise_scale: float, seed: int, n: int = 5000) -> OodSplit:
    """Sample ``n`` state-action pairs and add ``noise_scale * N(0, 1)`` to each action (no clipping)."""
    if noise_scale <= 0:
        raise RejectedInput("noise_scale must be positive")
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(dataset), size=min(n, len(dataset)), replace=False)
    s = dataset.s[idx].astype(np.float64)
    a = dataset.a[idx].astype(np.float64)
    return OodSplit(s, a, a + noise_scale * rng.standard_normal(a.shape), float(noise_scale))


@dataclass
class GmmSpec:
    means: np.ndarray
    covs: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        k, d = self.means.shape
        self.covs = np.asarray(self.covs, dtype=np.float64).reshape(k, d, d)
        self.weights = np.asarray(self.weights, dtype=np.float64).ravel()
        if self.weights.shape != (k,) or np.any(self.weights < 0) or abs(self.weights.sum() - 1) > 1e-12:
            raise RejectedInput("weights must be a probability vector with one entry per component")
        for c in self.covs:
            if not np.allclose(c, c.T) or np.linalg.eigvalsh(c).min() <= 0:
                raise RejectedInput("covariances must be symmetric positive definite")

    @classmethod
    def symmetric(cls, offset: float = 3.0, scale: float = 1.0) -> "GmmSpec":
        means = np.array([[offset, offset], [offset, -offset], [-offset, offset], [-offset, -offset]])
        return cls(means, np.tile(np.eye(2) * scale**2, (4, 1, 1)), np.full(4, 0.25))

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def box(self, n_std: float = 4.0) -> tuple[np.ndarray, np.ndarray]:
        sd = np.sqrt(np.array([np.diag(c) for c in self.covs]))
        return (self.means - n_std * sd).min(axis=0), (self.means + n_std * sd).max(axis=0)

    def nll(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        logs = np.stack(
            [np.log(w) + multivariate_normal(m, c).logpdf(x) for m, c, w in zip(self.means, self.covs, self.weights)],
            axis=-1,
        ).reshape(len(x), -1)
        return -logsumexp(logs, axis=1)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        comp = rng.choice(len(self.weights), size=n, p=self.weights)
        chol = np.linalg.cholesky(self.covs)
        z = rng.standard_normal((n, self.dim))
        return self.means[comp] + np.einsum("nij,nj->ni", chol[comp], z)


def gen_gmm(spec: GmmSpec, n: int = 10_000, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Points uniform over the mixture's +-4 sd box, with their exact negative log-likelihood."""
    rng = np.random.default_rng(seed)
    lo, hi = spec.box()
    x = rng.uniform(lo, hi, size=(n, spec.dim))
    return x, spec.nll(x)


def rollout_returns(policy, env: NavEnv, episodes: int, seed: int) -> np.ndarray:
    """Undiscounted returns of ``policy(states, rng) -> actions`` from per-episode seeded starts.

    Each episode's start state comes from its own child of ``SeedSequence(seed)``,
    so episode ``i`` starts at the same place for every policy evaluated with the same seed.
    """
    children = np.random.SeedSequence(seed).spawn(episodes + 1)
    starts = np.array([np.random.default_rng(c).uniform(env.state_low, env.state_high) for c in children[:-1]])
    policy_rng = np.random.default_rng(children[-1])
    s = starts.reshape(episodes, 1)
    ret = np.zeros(episodes)
    for _ in range(env.horizon):
        a = np.asarray(policy(s, policy_rng), dtype=np.float64).reshape(episodes, 1)
        s, r = env.step(s, a)
        ret += r.ravel()
    return ret


def optimal_policy(env: NavEnv = NavEnv()):
    return lambda s, rng: optimal_action(s, env)


def random_policy(env: NavEnv = NavEnv()):
    return lambda s, rng: rng.uniform(env.action_low, env.action_high, np.shape(s))


def reference_returns(env: NavEnv, episodes: int, seed: int) -> tuple[float, float]:
    """Mean return of the optimal rule and of the uniform-random policy on the same starts."""
    j_opt = float(rollout_returns(optimal_policy(env), env, episodes, seed).mean())
    j_rand = float(rollout_returns(random_policy(env), env, episodes, seed).mean())
    return j_opt, j_rand


def normalized_score(j: float, j_opt: float, j_random: float) -> float:
    return 100.0 * (j - j_random) / (j_opt - j_random)
