"""Offline actor-critic with diffusion-based OOD classification of policy actions.

Policy actions that the behavior model flags as OOD are split into detrimental
ones (pushed to Q_min) and beneficial ones (regressed toward a discounted
best-ID value plus a next-state value bonus). Value learning is expectile
regression and the actor is a tanh-Gaussian with automatic temperature.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import IntEnum

import numpy as np

from .diffusion import DenoiserModel, recon_error_action, recon_error_state, sample_actions
from .dynamics import DynamicsModel, predict
from .errors import RejectedInput, StateError, TrainingDivergence
from .nn import AdamState, Mlp, Trainable, adam_step, backward, forward, forward_cached
from .ood import EnsembleDetector, OodThresholds, uncertain_mask
from .toyworld import NavEnv, normalized_score, reference_returns, rollout_returns

MODES = ("full", "no_vc", "no_ac_vc")
BELLMAN_TARGETS = ("behavior", "v_net")
LOG_STD_RANGE = (-5.0, 2.0)
_HALF_LOG_2PI = 0.5 * math.log(2 * math.pi)


class OodClass(IntEnum):
    IN_DISTRIBUTION = 0
    BENEFICIAL = 1
    DETRIMENTAL = 2


@dataclass
class AgentConfig:
    gamma: float = 0.99
    rho: float = 0.005
    beta: float = 0.001
    lam: float = 0.001
    eta: float = 0.9
    expectile: float = 0.9
    n_candidates: int = 10
    q_min: float | None = None  # None: R_min / (1 - gamma) of the env
    policy_update_freq: int = 2
    target_update_freq: int = 2
    n_critics: int = 2
    hidden: tuple = (64, 64)
    lr: float = 3e-4
    alpha_lr: float = 3e-4
    init_alpha: float = 1.0
    batch_size: int = 256
    steps: int = 20_000
    mode: str = "full"
    gating: bool = False
    bellman_target: str = "behavior"
    sampler_steps: int = 18
    m_draws: int = 10
    bootstrap_horizon_end: bool = False
    log_every: int = 1000
    eval_every: int = 0
    eval_episodes: int = 40

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if not 0 <= self.gamma < 1:
            raise RejectedInput("gamma must be in [0, 1)")
        if not 0 <= self.eta <= 1:
            raise RejectedInput("eta must be in [0, 1]")
        if not 0 < self.rho <= 1:
            raise RejectedInput("rho must be in (0, 1]")
        if not 0 < self.expectile < 1:
            raise RejectedInput("expectile must be in (0, 1)")
        if self.mode not in MODES:
            raise RejectedInput(f"mode must be one of {MODES}")
        if self.bellman_target not in BELLMAN_TARGETS:
            raise RejectedInput(f"bellman_target must be one of {BELLMAN_TARGETS}")
        if self.n_candidates < 1 or self.n_critics < 1 or self.batch_size < 1 or self.steps < 0:
            raise RejectedInput("counts must be positive")
        if self.init_alpha <= 0:
            raise RejectedInput("init_alpha must be positive")


@dataclass
class Pretrained:
    """Frozen models from the pretraining phase."""

    behavior: DenoiserModel
    state_model: DenoiserModel
    dynamics: DynamicsModel
    thresholds: OodThresholds | None
    ensemble: EnsembleDetector | None = None


@dataclass
class AgentState:
    config: AgentConfig
    state_dim: int
    action_dim: int
    q_nets: list
    q_targets: list
    v_net: Mlp
    v_target: Mlp
    actor: Mlp
    actor_target: Mlp
    log_alpha: float
    target_entropy: float
    q_min: float
    state_shift: np.ndarray
    state_scale: np.ndarray
    step: int = 0
    opt: dict = field(default_factory=dict, repr=False)

    @property
    def alpha(self) -> float:
        return math.exp(self.log_alpha)

    def norm(self, s) -> np.ndarray:
        return (np.reshape(s, (len(s), -1)) - self.state_shift) / self.state_scale

    def params(self) -> dict:
        """Every network by name, in a fixed order."""
        out = {}
        for i, (q, qt) in enumerate(zip(self.q_nets, self.q_targets)):
            out[f"q{i}"], out[f"q{i}_target"] = q, qt
        out.update(v=self.v_net, v_target=self.v_target, actor=self.actor, actor_target=self.actor_target)
        return out


def create_agent(config: AgentConfig, state_dim: int, action_dim: int, rng, env: NavEnv = NavEnv(),
                 state_stats=None) -> AgentState:
    """Fresh networks; targets start as copies. ``state_stats`` = (shift, scale) for inputs."""
    h = config.hidden
    q_nets = [Mlp.create((state_dim + action_dim, *h, 1), rng) for _ in range(config.n_critics)]
    v_net = Mlp.create((state_dim, *h, 1), rng)
    actor = Mlp.create((state_dim, *h, 2 * action_dim), rng)
    q_min = config.q_min if config.q_min is not None else env.q_min(config.gamma)
    shift, scale = state_stats if state_stats is not None else (np.zeros(state_dim), np.ones(state_dim))
    agent = AgentState(
        config, state_dim, action_dim, q_nets, [q.copy() for q in q_nets], v_net, v_net.copy(),
        actor, actor.copy(), math.log(config.init_alpha), -float(action_dim), float(q_min),
        np.asarray(shift, dtype=np.float64).ravel(), np.asarray(scale, dtype=np.float64).ravel(),
    )
    reset_optimizers(agent)
    return agent


def reset_optimizers(agent: AgentState) -> None:
    c = agent.config
    total = max(c.steps, 1)
    agent.opt = {f"q{i}": Trainable(q, c.lr, total) for i, q in enumerate(agent.q_nets)}
    agent.opt["v"] = Trainable(agent.v_net, c.lr, total)
    agent.opt["actor"] = Trainable(agent.actor, c.lr, total)
    agent.opt["alpha"] = AdamState.for_params(np.zeros(1), c.alpha_lr, total, cosine=False)


# -- value functions -----------------------------------------------------------------


def q_values(agent: AgentState, s, a, target: bool = False) -> np.ndarray:
    """(n_critics, B) matrix of Q estimates."""
    x = np.hstack([agent.norm(s), np.reshape(a, (len(a), -1))])
    nets = agent.q_targets if target else agent.q_nets
    return np.stack([forward(q, x)[:, 0] for q in nets])


def q_min_ensemble(agent: AgentState, s, a, target: bool = False) -> np.ndarray:
    return q_values(agent, s, a, target).min(axis=0)


def v_value(agent: AgentState, s, target: bool = False) -> np.ndarray:
    return forward(agent.v_target if target else agent.v_net, agent.norm(s))[:, 0]


def expectile_loss(u, tau: float):
    """|tau - 1(u < 0)| * u^2, elementwise."""
    if not 0 < tau < 1:
        raise RejectedInput("expectile tau must be in (0, 1)")
    u = np.asarray(u, dtype=np.float64)
    return np.abs(tau - (u < 0)) * u * u


def _not_done(agent: AgentState, done) -> np.ndarray:
    if agent.config.bootstrap_horizon_end:
        return np.ones(len(done))
    return 1.0 - np.asarray(done, dtype=np.float64).ravel()


def _check(loss: float, what: str, step: int) -> None:
    if not math.isfinite(loss):
        raise TrainingDivergence(f"non-finite {what} loss", step=step)


def value_update(agent: AgentState, batch: dict, rng=None) -> float:
    c = agent.config
    target = batch["r"] + c.gamma * _not_done(agent, batch["done"]) * v_value(agent, batch["s2"], target=True)
    x = agent.norm(batch["s"])
    v, cache = forward_cached(agent.v_net, x)
    u = target - v[:, 0]
    loss = float(np.mean(expectile_loss(u, c.expectile)))
    _check(loss, "value", agent.step)
    w = np.abs(c.expectile - (u < 0))
    grad = backward(agent.v_net, x, (-2.0 * w * u / len(u))[:, None], cache)
    agent.opt["v"].apply(grad)
    return loss


# -- classification ------------------------------------------------------------------


def best_id_action(agent: AgentState, behavior: DenoiserModel, s, n: int, rng, sampler_steps: int | None = None):
    """Best of ``n`` behavior samples under the critic-ensemble minimum (ties: lowest index)."""
    if n < 1:
        raise RejectedInput("need at least one candidate")
    single = np.ndim(s) == 1
    s = np.reshape(np.asarray(s, dtype=np.float64), (-1, agent.state_dim))
    steps = sampler_steps or agent.config.sampler_steps
    cand = sample_actions(behavior, s, n, steps=steps, rng=rng).reshape(len(s), n, agent.action_dim)
    flat = cand.reshape(len(s) * n, agent.action_dim)
    q = q_min_ensemble(agent, np.repeat(s, n, axis=0), flat).reshape(len(s), n)
    best = np.argmax(q, axis=1)
    rows = np.arange(len(s))
    a, v = cand[rows, best], q[rows, best]
    return (a[0], v[0]) if single else (a, v)


@dataclass
class Classification:
    labels: np.ndarray        # OodClass per row
    delta_v: np.ndarray       # V(s'_pi) - V(s'_id); nan where not computed
    q_target_id: np.ndarray   # min target-Q at the best ID action; nan where not computed

    def proportions(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=3) / max(len(self.labels), 1)


def classify_actions(agent: AgentState, models: Pretrained, s, a_pi, rng) -> Classification:
    """Two-stage test on policy actions: action OOD, then next-state OOD / value comparison."""
    if models.thresholds is None:
        raise StateError("OOD thresholds are not calibrated")
    c = agent.config
    s = np.reshape(np.asarray(s, dtype=np.float64), (-1, agent.state_dim))
    a_pi = np.reshape(np.asarray(a_pi, dtype=np.float64), (-1, agent.action_dim))
    n = len(s)
    labels = np.full(n, OodClass.IN_DISTRIBUTION, dtype=np.int64)
    delta_v = np.full(n, np.nan)
    q_id = np.full(n, np.nan)
    err_a = recon_error_action(models.behavior, s, a_pi, c.m_draws, rng)
    ood = np.flatnonzero(err_a > models.thresholds.tau_a)
    if ood.size == 0:
        return Classification(labels, delta_v, q_id)
    if c.mode == "no_ac_vc":
        labels[ood] = OodClass.DETRIMENTAL
        return Classification(labels, delta_v, q_id)
    s_o, a_o = s[ood], a_pi[ood]
    s2_pi = predict(models.dynamics, s_o, a_o)[0]
    bad = recon_error_state(models.state_model, s2_pi, c.m_draws, rng) > models.thresholds.tau_s
    if c.gating:
        if models.ensemble is None:
            raise StateError("gating enabled without an ensemble detector")
        bad |= uncertain_mask(models.ensemble, s_o, a_o)
    labels[ood[bad]] = OodClass.DETRIMENTAL
    keep = np.flatnonzero(~bad)
    if keep.size:
        rows = ood[keep]
        a_id, _ = best_id_action(agent, models.behavior, s[rows], c.n_candidates, rng)
        s2_id = predict(models.dynamics, s[rows], a_id)[0]
        dv = v_value(agent, s2_pi[keep]) - v_value(agent, s2_id)
        ben = dv >= 0
        labels[rows] = np.where(ben, OodClass.BENEFICIAL, OodClass.DETRIMENTAL)
        delta_v[rows] = dv
        q_id[rows] = q_min_ensemble(agent, s[rows], a_id, target=True)
    return Classification(labels, delta_v, q_id)


def classify_action(agent: AgentState, models: Pretrained, s, a_pi, rng) -> tuple[OodClass, float | None]:
    """Single-pair form: (class, bonus) with the bonus defined only for Beneficial."""
    out = classify_actions(agent, models, np.reshape(s, (1, -1)), np.reshape(a_pi, (1, -1)), rng)
    label = OodClass(int(out.labels[0]))
    return label, (float(out.delta_v[0]) if label == OodClass.BENEFICIAL else None)


# -- policy --------------------------------------------------------------------------


def _policy_head(agent: AgentState, out: np.ndarray):
    ad = agent.action_dim
    raw_ls = out[:, ad:]
    return out[:, :ad], np.clip(raw_ls, *LOG_STD_RANGE), raw_ls


def _log1m_tanh2(u: np.ndarray) -> np.ndarray:
    # log(1 - tanh(u)^2) = 2 (log 2 - u - softplus(-2u))
    return 2.0 * (math.log(2.0) - u - np.logaddexp(0.0, -2.0 * u))


def tanh_gaussian_log_prob(mean, log_std, a=None, u=None) -> np.ndarray:
    """log density of a = tanh(u), u ~ N(mean, exp(log_std)^2), summed over action dims."""
    if u is None:
        a = np.clip(a, -1 + 1e-12, 1 - 1e-12)
        u = np.arctanh(a)
    z = (u - mean) / np.exp(log_std)
    return np.sum(-0.5 * z * z - log_std - _HALF_LOG_2PI - _log1m_tanh2(u), axis=-1)


def sample_policy(agent: AgentState, s, rng, deterministic: bool = False):
    """(action, log_prob) with reparameterised tanh-Gaussian sampling."""
    mean, log_std, _ = _policy_head(agent, forward(agent.actor, agent.norm(s)))
    if deterministic:
        return np.tanh(mean), None
    u = mean + np.exp(log_std) * rng.standard_normal(mean.shape)
    return np.tanh(u), tanh_gaussian_log_prob(mean, log_std, u=u)


def actor_loss_grad(agent: AgentState, x: np.ndarray, xi: np.ndarray):
    """Loss E[alpha log pi - min_k Q_k] for fixed base noise ``xi``.

    Returns (loss, actor param grad, log-probs).
    """
    out, cache = forward_cached(agent.actor, x)
    mean, log_std, raw_ls = _policy_head(agent, out)
    std = np.exp(log_std)
    u = mean + std * xi
    a = np.tanh(u)
    logp = tanh_gaussian_log_prob(mean, log_std, u=u)
    # dQ/da through the critic that attains the minimum per row
    qx = np.hstack([x, a])
    qs, dqs = [], []
    for q in agent.q_nets:
        val, qc = forward_cached(q, qx)
        qs.append(val[:, 0])
        dqs.append(backward(q, qx, np.ones((len(a), 1)), qc, want_input=True)[1][:, agent.state_dim:])
    qs, dqs = np.stack(qs), np.stack(dqs)
    pick = np.argmin(qs, axis=0)
    rows = np.arange(len(a))
    q_min, dq_da = qs[pick, rows], dqs[pick, rows]
    alpha = agent.alpha
    loss = float(np.mean(alpha * logp - q_min))
    n = len(a)
    # d log pi / du = 2 tanh(u) from the change-of-variables term
    d_u = (alpha * 2.0 * a - dq_da * (1.0 - a * a)) / n
    in_range = (raw_ls >= LOG_STD_RANGE[0]) & (raw_ls <= LOG_STD_RANGE[1])
    d_ls = (-alpha / n + d_u * std * xi) * in_range
    grad = backward(agent.actor, x, np.hstack([d_u, d_ls]), cache)
    return loss, grad, logp


def actor_update(agent: AgentState, batch: dict, rng) -> tuple[float, float]:
    """Step on E[alpha log pi - min_k Q_k(s, a)], then on the temperature."""
    x = agent.norm(batch["s"])
    xi = rng.standard_normal((len(x), agent.action_dim))
    loss, grad, logp = actor_loss_grad(agent, x, xi)
    _check(loss, "actor", agent.step)
    agent.opt["actor"].apply(grad)
    # temperature: d/dlog_alpha of alpha * (-logp - target_entropy)
    g = np.array([agent.alpha * float(np.mean(-logp - agent.target_entropy))])
    la = np.array([agent.log_alpha])
    adam_step(agent.opt["alpha"], la, g)
    agent.log_alpha = float(la[0])
    return loss, agent.alpha


def bonus_target(q_target_id, delta_v, eta: float):
    """eta * (Q_target(s, a*_id) + delta_V)."""
    return eta * (np.asarray(q_target_id) + np.asarray(delta_v))


# -- critic --------------------------------------------------------------------------


@dataclass
class CriticStats:
    bellman: float
    penalty: float
    bonus: float
    proportions: np.ndarray


def critic_targets(agent: AgentState, batch: dict, models: Pretrained, rng) -> np.ndarray:
    c = agent.config
    nd = _not_done(agent, batch["done"])
    if c.bellman_target == "v_net":
        boot = v_value(agent, batch["s2"], target=True)
    else:
        a2 = sample_actions(models.behavior, batch["s2"], 1, steps=c.sampler_steps, rng=rng)
        boot = q_min_ensemble(agent, batch["s2"], a2.reshape(len(nd), agent.action_dim), target=True)
    return batch["r"] + c.gamma * nd * boot


def critic_update(agent: AgentState, batch: dict, models: Pretrained, rng,
                  a_pi=None, classification: Classification | None = None) -> CriticStats:
    """One step on the Bellman error plus the selective penalty / bonus terms.

    ``a_pi`` and ``classification`` may be supplied (for tests); otherwise policy
    actions are sampled and classified fresh.
    """
    c = agent.config
    s, a = batch["s"], batch["a"]
    n = len(s)
    y = critic_targets(agent, batch, models, rng)
    if a_pi is None:
        a_pi, _ = sample_policy(agent, s, rng)
    a_pi = np.reshape(a_pi, (n, agent.action_dim))
    if classification is None:
        classification = classify_actions(agent, models, s, a_pi, rng)
    det = classification.labels == OodClass.DETRIMENTAL
    ben = classification.labels == OodClass.BENEFICIAL
    bonus_on = c.mode == "full"
    ben_target = np.where(ben, bonus_target(classification.q_target_id, classification.delta_v, c.eta), 0.0)
    x = np.vstack([np.hstack([agent.norm(s), a]), np.hstack([agent.norm(s), a_pi])])
    bell = pen = bon = 0.0
    for i, q in enumerate(agent.q_nets):
        out, cache = forward_cached(q, x)
        q_data, q_pi = out[:n, 0], out[n:, 0]
        r_b = q_data - y
        r_p = np.where(det, q_pi - agent.q_min, 0.0)
        r_o = np.where(ben & bonus_on, q_pi - ben_target, 0.0)
        lb, lp, lo = np.mean(r_b * r_b), c.beta * np.mean(r_p * r_p), c.lam * np.mean(r_o * r_o)
        _check(float(lb + lp + lo), "critic", agent.step)
        up = np.concatenate([2.0 * r_b, 2.0 * (c.beta * r_p + c.lam * r_o)]) / n
        agent.opt[f"q{i}"].apply(backward(q, x, up[:, None], cache))
        bell, pen, bon = bell + float(lb), pen + float(lp), bon + float(lo)
    k = len(agent.q_nets)
    return CriticStats(bell / k, pen / k, bon / k, classification.proportions())


def soft_update(agent: AgentState, rho: float | None = None) -> None:
    rho = agent.config.rho if rho is None else rho
    if not 0 < rho <= 1:
        raise RejectedInput("rho must be in (0, 1]")
    pairs = list(zip(agent.q_nets, agent.q_targets))
    pairs += [(agent.v_net, agent.v_target), (agent.actor, agent.actor_target)]
    for src, tgt in pairs:
        # rho*src + (1-rho)*tgt, written so that src == tgt leaves tgt bitwise unchanged
        if rho == 1.0:
            tgt.params[:] = src.params
        else:
            tgt.params += rho * (src.params - tgt.params)


# -- loop ----------------------------------------------------------------------------

TRACE_COLUMNS = ("step", "v_loss", "bellman", "penalty", "bonus", "actor_loss", "alpha",
                 "frac_id", "frac_beneficial", "frac_detrimental", "eval_score")


def evaluate(agent: AgentState, env: NavEnv = NavEnv(), episodes: int = 40, seed: int = 0) -> tuple[float, float]:
    """Mean return of the deterministic policy and its normalized score on the same starts."""
    policy = lambda s, rng: sample_policy(agent, s, rng, deterministic=True)[0]  # noqa: E731
    j = float(rollout_returns(policy, env, episodes, seed).mean())
    j_opt, j_rand = reference_returns(env, episodes, seed)
    return j, normalized_score(j, j_opt, j_rand)


def train(agent: AgentState, dataset, models: Pretrained, rng, steps: int | None = None,
          env: NavEnv = NavEnv(), eval_seed: int = 0, progress=None) -> list[dict]:
    """Run the update loop; returns one trace row per ``log_every`` steps.

    Losses in a row are means over the steps since the previous row; class
    proportions are pooled over every policy action classified in that window.
    """
    c = agent.config
    steps = c.steps if steps is None else steps
    rows: list[dict] = []
    acc = _Window()
    for _ in range(steps):
        batch = dataset.sample(rng, c.batch_size)
        acc.add("v_loss", value_update(agent, batch, rng))
        stats = critic_update(agent, batch, models, rng)
        acc.add("bellman", stats.bellman)
        acc.add("penalty", stats.penalty)
        acc.add("bonus", stats.bonus)
        acc.counts += stats.proportions * c.batch_size
        agent.step += 1
        if agent.step % c.policy_update_freq == 0:
            loss, alpha = actor_update(agent, batch, rng)
            acc.add("actor_loss", loss)
            acc.add("alpha", alpha)
        if agent.step % c.target_update_freq == 0:
            soft_update(agent)
        if agent.step % c.log_every == 0 or agent.step == steps:
            row = acc.flush(agent.step)
            if c.eval_every and agent.step % c.eval_every == 0:
                row["eval_score"] = evaluate(agent, env, c.eval_episodes, eval_seed)[1]
            rows.append(row)
            if progress is not None:
                progress(row)
    return rows


class _Window:
    def __init__(self):
        self.sums: dict = {}
        self.ns: dict = {}
        self.counts = np.zeros(3)

    def add(self, key: str, value: float) -> None:
        self.sums[key] = self.sums.get(key, 0.0) + value
        self.ns[key] = self.ns.get(key, 0) + 1

    def flush(self, step: int) -> dict:
        row = {k: float("nan") for k in TRACE_COLUMNS}
        row["step"] = step
        for k, v in self.sums.items():
            row[k] = float(v / self.ns[k])
        total = self.counts.sum()
        if total > 0:
            row["frac_id"], row["frac_beneficial"], row["frac_detrimental"] = (self.counts / total).tolist()
        self.__init__()
        return row


def with_overrides(config: AgentConfig, **kw) -> AgentConfig:
    return replace(config, **kw)
