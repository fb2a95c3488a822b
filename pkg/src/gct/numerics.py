"""Dense float64 tensors with reverse-mode differentiation, plus Adam.

Every model in the package is assembled from the primitives here. A
:class:`Tensor` records the tensors it was computed from and a closure that
pushes its gradient back to them; :func:`backward` replays those closures in
reverse topological order. Tensors may carry leading batch axes: the
primitives broadcast like numpy and gradients are reduced back to the
operand shapes.
"""
from __future__ import annotations

import contextlib
import contextvars
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import DegenerateRowError, DimensionError, DomainError, OptimizerError

DTYPE = np.float64

# Stand-in for -inf inside attention masks; keeps (-inf) * 0 out of the graph.
MASKED = -1e30
_MASK_THRESHOLD = MASKED / 2

KL_FLOOR = 1e-12
LAYER_NORM_EPS = 1e-5

_grad_enabled = contextvars.ContextVar("grad_enabled", default=True)


@contextlib.contextmanager
def no_grad():
    """Build no graph inside the block (evaluation passes)."""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def zero_grad(self) -> None:
        self.grad = None

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take(self, key)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(value: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor(value)
    if _grad_enabled.get() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` with every node after all of its inputs."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in reversed(node._parents):
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, seed: np.ndarray | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every tracked leaf."""
    if not loss.requires_grad:
        return
    if seed is None:
        if loss.value.size != 1:
            raise DimensionError("backward() without a seed needs a scalar loss")
        seed = np.ones_like(loss.value)
    order = topological_order(loss)
    loss.grad = np.asarray(seed, dtype=DTYPE)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# -- elementwise -----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _result(a.value + b.value, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _result(a.value - b.value, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.value, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.value, b.shape))

    return _result(a.value * b.value, (a, b), bw)


def scale(x: Tensor, factor) -> Tensor:
    """Multiply by a constant (scalar or array); no gradient to ``factor``."""
    factor = np.asarray(factor, dtype=DTYPE)

    def bw(g):
        _accumulate(x, _unbroadcast(g * factor, x.shape))

    return _result(x.value * factor, (x,), bw)


def relu(x: Tensor) -> Tensor:
    positive = x.value > 0

    def bw(g):
        _accumulate(x, g * positive)

    return _result(np.where(positive, x.value, 0.0), (x,), bw)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/keep so eval is a no-op."""
    if not 0.0 <= rate < 1.0:
        raise DomainError(f"dropout rate must lie in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return x
    keep = 1.0 - rate
    keep_mask = (rng.random(x.shape, dtype=np.float32) < keep) / keep
    return scale(x, keep_mask)


# -- shape ------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g @ np.swapaxes(b.value, -1, -2), a.shape))
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                k = a.shape[-1]
                gb = a.value.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.value, -1, -2) @ g, b.shape)
            _accumulate(b, gb)

    return _result(a.value @ b.value, (a, b), bw)


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""

    def bw(g):
        _accumulate(x, np.swapaxes(g, -1, -2))

    return _result(np.swapaxes(x.value, -1, -2), (x,), bw)


def reshape(x: Tensor, shape) -> Tensor:
    def bw(g):
        _accumulate(x, g.reshape(x.shape))

    return _result(x.value.reshape(shape), (x,), bw)


def take(x: Tensor, key) -> Tensor:
    """``x[key]`` for any numpy index; repeated indices accumulate."""

    def bw(g):
        gx = np.zeros_like(x.value)
        np.add.at(gx, key, g)
        _accumulate(x, gx)

    return _result(x.value[key], (x,), bw)


def gather_rows(table: Tensor, index: np.ndarray) -> Tensor:
    """Embedding lookup: rows of a 2-D table selected by an integer array."""
    index = np.asarray(index, dtype=np.intp)
    if table.ndim != 2:
        raise DimensionError("gather_rows expects a 2-D table")

    def bw(g):
        gt = np.zeros_like(table.value)
        np.add.at(gt, index.ravel(), g.reshape(-1, table.shape[1]))
        _accumulate(table, gt)

    return _result(table.value[index], (table,), bw)


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def bw(g):
        for t, piece in zip(tensors, np.split(g, bounds, axis=axis)):
            _accumulate(t, piece)

    return _result(np.concatenate([t.value for t in tensors], axis=axis), tuple(tensors), bw)


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(x, np.broadcast_to(g, x.shape).copy())

    return _result(x.value.sum(axis=axis, keepdims=keepdims), (x,), bw)


def reduce_mean(x: Tensor, axis=None) -> Tensor:
    count = x.value.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(reduce_sum(x, axis=axis), 1.0 / count)


# -- normalization and attention ---------------------------------------------

def layer_norm(x: Tensor, gain: Tensor, shift: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    inv_n = 1.0 / x.shape[-1]
    centered = x.value - x.value.sum(axis=-1, keepdims=True) * inv_n
    inv_std = 1.0 / np.sqrt(np.square(centered).sum(axis=-1, keepdims=True) * inv_n + eps)
    xhat = centered * inv_std

    def bw(g):
        if gain.requires_grad:
            _accumulate(gain, _unbroadcast(g * xhat, gain.shape))
        if shift.requires_grad:
            _accumulate(shift, _unbroadcast(g, shift.shape))
        if x.requires_grad:
            gx_hat = g * gain.value
            proj = (gx_hat * xhat).sum(axis=-1, keepdims=True) * inv_n
            gx_hat -= gx_hat.sum(axis=-1, keepdims=True) * inv_n
            gx_hat -= xhat * proj
            _accumulate(x, inv_std * gx_hat)

    return _result(xhat * gain.value + shift.value, (x, gain, shift), bw)


def mask_allowed(mask: np.ndarray) -> np.ndarray:
    """Boolean view of an additive mask: True where attention is permitted."""
    return np.asarray(mask) > _MASK_THRESHOLD


def as_additive_mask(allowed: np.ndarray) -> np.ndarray:
    return np.where(allowed, 0.0, MASKED)


def masked_row_softmax(logits, mask, validate: bool = True) -> Tensor:
    """Row softmax of ``logits + mask``; masked cells come out exactly 0.

    ``mask`` is a constant array holding 0 (allowed) or -inf / :data:`MASKED`
    (disallowed), broadcastable to ``logits``. ``validate=False`` skips the
    entry check for masks already known to be well formed.
    """
    logits = as_tensor(logits)
    mask = np.asarray(mask, dtype=DTYPE)
    if validate:
        allowed = mask > _MASK_THRESHOLD
        if np.any(mask[allowed] != 0.0):
            raise DomainError("mask entries must be 0 or -inf")
    z = logits.value + mask
    top = z.max(axis=-1, keepdims=True)
    if np.any(top <= _MASK_THRESHOLD):
        raise DegenerateRowError("softmax row has every entry masked")
    # exp(-1e30 - top) underflows to exactly 0 on masked cells
    e = np.exp(z - top)
    p = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        gp = g * p
        _accumulate(logits, gp - p * gp.sum(axis=-1, keepdims=True))

    return _result(p, (logits,), bw)


def _check_nonnegative(*arrays: np.ndarray) -> None:
    for a in arrays:
        if np.any(a < 0):
            raise DomainError("probability matrix has negative entries")


def kl_rows(p, q, eps: float = KL_FLOOR, validate: bool = True) -> Tensor:
    """Differentiable row-wise KL(p || q), summed over the last two axes.

    Returns one value per leading (batch) index. ``0 * ln(0/q)`` counts as 0
    and ``q`` is floored at ``eps`` wherever ``p > 0``.
    """
    p, q = as_tensor(p), as_tensor(q)
    if validate:
        _check_nonnegative(p.value, q.value)
    support = p.value > 0
    qf = np.maximum(q.value, eps)
    # ratio is 1 off the support, so its log contributes nothing there
    log_ratio = np.log(np.divide(p.value, qf, out=np.ones_like(qf), where=support))
    value = (p.value * log_ratio).sum(axis=(-2, -1))

    def bw(g):
        g = np.asarray(g)[..., None, None]
        if p.requires_grad:
            _accumulate(p, np.where(support, log_ratio + 1.0, 0.0) * g)
        if q.requires_grad:
            dq = -p.value / qf
            if np.any(q.value < eps):
                dq = np.where(q.value >= eps, dq, 0.0)
            _accumulate(q, dq * g)

    return _result(value, (p, q), bw)


def _rows_sum_to_one(a: np.ndarray, tol: float) -> bool:
    return bool(np.all(np.abs(a.sum(axis=-1) - 1.0) <= tol))


def kl_divergence_rows(p, q, eps: float = KL_FLOOR, tol: float = 1e-9) -> float:
    """Sum over rows of KL(p_row || q_row) for row-stochastic matrices."""
    p = np.asarray(p.value if isinstance(p, Tensor) else p, dtype=DTYPE)
    q = np.asarray(q.value if isinstance(q, Tensor) else q, dtype=DTYPE)
    if p.shape != q.shape:
        raise DimensionError(f"kl: shapes differ {p.shape} vs {q.shape}")
    _check_nonnegative(p, q)
    if not (_rows_sum_to_one(p, tol) and _rows_sum_to_one(q, tol)):
        raise DomainError("kl: rows must sum to 1")
    support = p > 0
    ratio = np.where(support, p, 1.0) / np.maximum(q, eps)
    return float(np.sum(np.where(support, p * np.log(ratio), 0.0)))


def row_entropy(p) -> float:
    """Mean over rows of the Shannon entropy (nats)."""
    p = np.asarray(p.value if isinstance(p, Tensor) else p, dtype=DTYPE)
    _check_nonnegative(p)
    if not _rows_sum_to_one(p, 1e-9):
        raise DomainError("entropy: rows must sum to 1")
    terms = np.where(p > 0, -p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return float(terms.sum(axis=-1).mean())


# -- losses -------------------------------------------------------------------

def bce_with_logits(logits: Tensor, targets: np.ndarray, weights: np.ndarray) -> Tensor:
    """Weighted sum of binary cross-entropies, computed from raw logits."""
    z = logits.value
    t = np.asarray(targets, dtype=DTYPE)
    w = np.broadcast_to(np.asarray(weights, dtype=DTYPE), z.shape)
    # log(1 + e^z) - z t
    value = np.sum(w * (np.logaddexp(0.0, z) - z * t))

    def bw(g):
        _accumulate(logits, g * w * (expit(z) - t))

    return _result(value, (logits,), bw)


def softmax_cross_entropy(logits: Tensor, targets: np.ndarray, weights: np.ndarray) -> Tensor:
    """Weighted sum over rows of -log softmax(logits)[target]."""
    z = logits.value
    targets = np.asarray(targets, dtype=np.intp)
    w = np.asarray(weights, dtype=DTYPE)
    shifted = z - z.max(axis=-1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    log_p = shifted - log_norm
    rows = np.arange(z.shape[0])
    value = -np.sum(w * log_p[rows, targets])

    def bw(g):
        d = np.exp(log_p)
        d[rows, targets] -= 1.0
        _accumulate(logits, g * w[:, None] * d)

    return _result(value, (logits,), bw)


def sigmoid(x: np.ndarray) -> np.ndarray:
    return expit(np.asarray(x, dtype=DTYPE))


# -- layers -----------------------------------------------------------------

def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape or (fan_in, fan_out))


@dataclass
class Dense:
    """One MLP layer: affine map followed by layer norm."""

    weight: Tensor
    bias: Tensor
    gain: Tensor
    shift: Tensor

    @classmethod
    def create(cls, rng: np.random.Generator, n_in: int, n_out: int, prefix: str) -> "Dense":
        return cls(
            weight=Tensor(glorot_uniform(rng, n_in, n_out), True, f"{prefix}.weight"),
            bias=Tensor(np.zeros(n_out), True, f"{prefix}.bias"),
            gain=Tensor(np.ones(n_out), True, f"{prefix}.gain"),
            shift=Tensor(np.zeros(n_out), True, f"{prefix}.shift"),
        )

    def tensors(self) -> list[Tensor]:
        return [self.weight, self.bias, self.gain, self.shift]


def mlp_block(x: Tensor, layers: list[Dense], dropout_rate: float, train: bool,
              rng: np.random.Generator | None = None) -> Tensor:
    """linear -> layer norm -> ReLU -> dropout per layer, residual where widths match."""
    h = x
    for layer in layers:
        if h.shape[-1] != layer.weight.shape[0]:
            raise DimensionError(
                f"mlp: input width {h.shape[-1]} does not match layer {layer.weight.shape}"
            )
        out = add(matmul(h, layer.weight), layer.bias)
        out = relu(layer_norm(out, layer.gain, layer.shift))
        out = dropout(out, dropout_rate, rng, train)
        if out.shape[-1] == h.shape[-1]:
            out = add(out, h)
        h = out
    return h


# -- optimizer ----------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState) -> dict[str, Tensor]:
    """Bias-corrected Adam update, in place. Parameters without a gradient are skipped."""
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise OptimizerError(f"non-finite gradient for parameter {name!r}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    step = state.lr * math.sqrt(1.0 - b2 ** state.t) / (1.0 - b1 ** state.t)
    eps_hat = state.eps * math.sqrt(1.0 - b2 ** state.t)
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise DimensionError(f"gradient for {name!r} has shape {g.shape}, expected {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.value)
            state.v[name] = np.zeros_like(p.value)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.value -= step * m / (np.sqrt(v) + eps_hat)
    return params
