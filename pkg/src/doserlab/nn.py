"""Dense MLPs with hand-written reverse-mode gradients and a cosine-decayed Adam.

All parameters of a network live in one flat float64 vector.  Per-layer weight
matrices and bias vectors are views into it, laid out as ``W (in, out)``
row-major followed by ``b (out,)`` for each layer in order.  Keeping one vector
makes the optimiser, soft target updates and checkpointing trivial.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import RejectedInput, TrainingDivergence

ACTIVATIONS = ("relu", "mish", "tanh", "identity")


def _mish(z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # tanh(softplus(z)) == n / (n + 2) with n = e^z (e^z + 2); one exp per element.
    e = np.exp(np.minimum(z, 20.0))
    n = e * (e + 2.0)
    t = n / (n + 2.0)
    sig = e / (1.0 + e)
    return z * t, t + z * (1.0 - t * t) * sig


def _mish_value(z: np.ndarray) -> np.ndarray:
    # same arithmetic as _mish (bitwise), without the derivative, in place
    e = np.minimum(z, 20.0)
    np.exp(e, out=e)
    n = e + 2.0
    n *= e
    e = n + 2.0
    np.divide(n, e, out=n)
    n *= z
    return n


def activation_value(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "mish":
        return _mish_value(z)
    if name == "tanh":
        return np.tanh(z)
    if name == "identity":
        return z
    raise RejectedInput(f"unknown activation {name!r}")


def activate(name: str, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(f(z), f'(z))``."""
    if name == "relu":
        return np.maximum(z, 0.0), (z > 0.0).astype(z.dtype)
    if name == "mish":
        return _mish(z)
    if name == "tanh":
        y = np.tanh(z)
        return y, 1.0 - y * y
    if name == "identity":
        return z, np.ones_like(z)
    raise RejectedInput(f"unknown activation {name!r}")


@dataclass
class Mlp:
    layer_dims: tuple[int, ...]
    activations: tuple[str, ...]
    params: np.ndarray
    dropout_prob: float = 0.0

    def __post_init__(self):
        self.layer_dims = tuple(int(d) for d in self.layer_dims)
        self.activations = tuple(self.activations)
        if len(self.layer_dims) < 2 or min(self.layer_dims) < 1:
            raise RejectedInput(f"bad layer dims {self.layer_dims}")
        if len(self.activations) != len(self.layer_dims) - 1:
            raise RejectedInput("need one activation per layer")
        for a in self.activations:
            if a not in ACTIVATIONS:
                raise RejectedInput(f"unknown activation {a!r}")
        if not 0.0 <= self.dropout_prob < 1.0:
            raise RejectedInput("dropout_prob must lie in [0, 1)")
        self.params = np.ascontiguousarray(self.params, dtype=np.float64)
        if self.params.shape != (param_count(self.layer_dims),):
            raise RejectedInput(
                f"expected {param_count(self.layer_dims)} parameters, got {self.params.shape}"
            )

    @classmethod
    def create(
        cls,
        layer_dims,
        rng: np.random.Generator,
        hidden: str = "relu",
        output: str = "identity",
        dropout_prob: float = 0.0,
    ) -> "Mlp":
        """Glorot-uniform weights, zero biases."""
        dims = tuple(int(d) for d in layer_dims)
        params = np.zeros(param_count(dims))
        off = 0
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            params[off : off + fan_in * fan_out] = rng.uniform(-bound, bound, fan_in * fan_out)
            off += (fan_in + 1) * fan_out
        acts = (hidden,) * (len(dims) - 2) + (output,)
        return cls(dims, acts, params, dropout_prob)

    @property
    def n_in(self) -> int:
        return self.layer_dims[0]

    @property
    def n_out(self) -> int:
        return self.layer_dims[-1]

    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return _split(self.params, self.layer_dims)

    def copy(self) -> "Mlp":
        return Mlp(self.layer_dims, self.activations, self.params.copy(), self.dropout_prob)

    def __call__(self, x, train_mode: bool = False, rng=None) -> np.ndarray:
        return forward(self, x, train_mode, rng)


def param_count(layer_dims) -> int:
    return sum((i + 1) * o for i, o in zip(layer_dims[:-1], layer_dims[1:]))


def _split(flat: np.ndarray, dims) -> list[tuple[np.ndarray, np.ndarray]]:
    out = []
    off = 0
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        w = flat[off : off + fan_in * fan_out].reshape(fan_in, fan_out)
        off += fan_in * fan_out
        b = flat[off : off + fan_out]
        off += fan_out
        out.append((w, b))
    return out


@dataclass
class ForwardCache:
    inputs: list[np.ndarray] = field(default_factory=list)
    slopes: list[np.ndarray] = field(default_factory=list)
    masks: list[np.ndarray | None] = field(default_factory=list)


def _check_batch(mlp: Mlp, batch) -> np.ndarray:
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != mlp.n_in:
        raise RejectedInput(f"expected batch of shape (B, {mlp.n_in}), got {x.shape}")
    return x


def forward_cached(mlp: Mlp, batch, train_mode: bool = False, rng=None):
    """Forward pass that also records what :func:`backward` needs."""
    h = _check_batch(mlp, batch)
    cache = ForwardCache()
    layers = mlp.layers()
    p = mlp.dropout_prob
    use_dropout = train_mode and p > 0.0
    if use_dropout and rng is None:
        raise RejectedInput("train-mode dropout needs an rng")
    for i, ((w, b), act) in enumerate(zip(layers, mlp.activations)):
        cache.inputs.append(h)
        h, slope = activate(act, h @ w + b)
        cache.slopes.append(slope)
        mask = None
        if use_dropout and i < len(layers) - 1:
            # inverted dropout: survivors are scaled now so inference needs no rescale
            mask = (rng.random(h.shape) >= p) / (1.0 - p)
            h = h * mask
        cache.masks.append(mask)
    return h, cache


def forward(mlp: Mlp, batch, train_mode: bool = False, rng=None) -> np.ndarray:
    if train_mode and mlp.dropout_prob > 0.0:
        return forward_cached(mlp, batch, train_mode, rng)[0]
    h = _check_batch(mlp, batch)
    for (w, b), act in zip(mlp.layers(), mlp.activations):
        h = activation_value(act, h @ w + b)
    return h


def backward(mlp: Mlp, batch, upstream, cache: ForwardCache | None = None, want_input: bool = False):
    """Gradient of ``L = <upstream, forward(batch)>`` with respect to the parameters.

    Pass the ``cache`` from :func:`forward_cached` to reuse activations (and the
    dropout masks of a training-mode pass).  With ``want_input`` the gradient
    with respect to ``batch`` is returned as a second value.
    """
    x = _check_batch(mlp, batch)
    if cache is None:
        _, cache = forward_cached(mlp, x)
    g = np.asarray(upstream, dtype=np.float64)
    if g.shape != (x.shape[0], mlp.n_out):
        raise RejectedInput(f"upstream gradient shape {g.shape} != {(x.shape[0], mlp.n_out)}")
    grad = np.zeros_like(mlp.params)
    glayers = _split(grad, mlp.layer_dims)
    layers = mlp.layers()
    for i in range(len(layers) - 1, -1, -1):
        if cache.masks[i] is not None:
            g = g * cache.masks[i]
        g = g * cache.slopes[i]
        gw, gb = glayers[i]
        gw[...] = cache.inputs[i].T @ g
        gb[...] = g.sum(axis=0)
        if i > 0 or want_input:
            g = g @ layers[i][0].T
    if want_input:
        return grad, g
    return grad


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    base_lr: float = 3e-4
    total_steps: int = 100_000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    cosine: bool = True

    @classmethod
    def for_params(cls, params: np.ndarray, base_lr: float = 3e-4, total_steps: int = 100_000, **kw):
        if total_steps < 1 or base_lr <= 0:
            raise RejectedInput("need base_lr > 0 and total_steps >= 1")
        return cls(np.zeros_like(params), np.zeros_like(params), base_lr, int(total_steps), **kw)

    def lr(self, step: int | None = None) -> float:
        """Cosine-decayed learning rate at ``step`` (defaults to the current step)."""
        t = self.step if step is None else step
        if not self.cosine:
            return self.base_lr
        t = min(max(t, 0), self.total_steps)
        return self.base_lr * 0.5 * (1.0 + math.cos(math.pi * t / self.total_steps))


def adam_step(state: AdamState, weights: np.ndarray, grads: np.ndarray) -> np.ndarray:
    """In-place bias-corrected Adam update of ``weights``; returns them."""
    if grads.shape != weights.shape or state.m.shape != weights.shape:
        raise RejectedInput("weights, gradients and moments must be congruent")
    if not np.all(np.isfinite(grads)):
        raise TrainingDivergence("non-finite gradient", step=state.step + 1)
    lr = state.lr()
    state.step += 1
    t = state.step
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * grads
    state.v *= state.beta2
    state.v += (1.0 - state.beta2) * (grads * grads)
    m_hat = state.m / (1.0 - state.beta1**t)
    v_hat = state.v / (1.0 - state.beta2**t)
    weights -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return weights


class Trainable:
    """An :class:`Mlp` bundled with its Adam state."""

    def __init__(self, net: Mlp, lr: float = 3e-4, total_steps: int = 100_000, cosine: bool = True):
        self.net = net
        self.opt = AdamState.for_params(net.params, lr, total_steps, cosine=cosine)

    def apply(self, grads: np.ndarray) -> None:
        adam_step(self.opt, self.net.params, grads)
