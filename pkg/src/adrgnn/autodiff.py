"""Reverse-mode automatic differentiation over dense numpy arrays.

A :class:`Tape` records primitive operations while it is active as a
context manager; :func:`backward` replays them in reverse to accumulate
gradients into every :class:`Variable` with ``requires_grad``. Outside an
active tape the primitives just compute values, which is the cheap
evaluation path.

The primitive set covers dense linear algebra, elementwise nonlinearities,
edge-indexed gather/scatter/softmax ops keyed to a graph's directed-edge
order, masked losses, and a conjugate-gradient linear solve whose backward
rule uses implicit differentiation instead of unrolling the iterations.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .runtime import default_dtype, philox


class Variable:
    """A value in the computation graph plus its gradient accumulator.

    The accumulator is materialized lazily (all-zero on first access), so
    the vast majority of Variables, the tape's intermediates, never pay for
    one: backward accumulates their gradients in a side table and only
    writes into ``grad`` for requires_grad Variables.
    """

    __slots__ = ("value", "_grad", "requires_grad", "needs_grad", "tape_id", "name")

    def __init__(self, value, requires_grad: bool = False, name: Optional[str] = None):
        self.value = np.asarray(value, dtype=default_dtype())
        self._grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.needs_grad = requires_grad
        self.tape_id: Optional[int] = None
        self.name = name

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            self._grad = np.zeros_like(self.value)
        return self._grad

    @grad.setter
    def grad(self, value: np.ndarray) -> None:
        self._grad = value

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self) -> None:
        if self._grad is not None:
            self._grad[...] = 0.0

    def __repr__(self) -> str:  # pragma: no cover
        tag = f" {self.name!r}" if self.name else ""
        return f"Variable{tag}(shape={self.value.shape}, requires_grad={self.requires_grad})"


_ACTIVE_TAPE: Optional["Tape"] = None


class Tape:
    """Ordered record of primitive ops; inputs always precede outputs."""

    def __init__(self):
        self.records: list[tuple[Variable, tuple[Variable, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise RuntimeError("a Tape is already active; tapes do not nest")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc) -> None:
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None


def _as_variable(x) -> Variable:
    return x if isinstance(x, Variable) else Variable(x)


def _emit(out_value: np.ndarray, inputs: tuple[Variable, ...], backward_fn: Callable) -> Variable:
    """Create the output Variable, recording the op if a tape is active
    and any input participates in differentiation."""
    out = Variable(out_value)
    out.needs_grad = any(v.needs_grad for v in inputs)
    tape = _ACTIVE_TAPE
    if tape is not None and out.needs_grad:
        out.tape_id = len(tape.records)
        tape.records.append((out, inputs, backward_fn))
    return out


def backward(tape: Tape, loss: Variable) -> None:
    """Accumulate d(loss)/d(v) into v.grad for every requires_grad Variable.

    Repeated calls without zero_grad add up, which is what parameter
    sharing across layers relies on.
    """
    if loss.value.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.value.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    holders: dict[int, Variable] = {id(loss): loss}
    for out, inputs, backward_fn in reversed(tape.records):
        g = grads.pop(id(out), None)
        holders.pop(id(out), None)
        if g is None:
            continue
        if out.requires_grad:
            out.grad += g
        input_grads = backward_fn(g)
        for v, gi in zip(inputs, input_grads):
            if gi is None or not v.needs_grad:
                continue
            key = id(v)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
                holders[key] = v
    for key, v in holders.items():
        if v.requires_grad:
            v.grad += grads[key]


def zero_grads(params) -> None:
    for p in params:
        p.zero_grad()


# ---------------------------------------------------------------------------
# scatter / segment helpers (shared by primitives)

def _scatter_add_rows(values: np.ndarray, index: np.ndarray, n: int) -> np.ndarray:
    """Sum rows of `values` into an (n, c) array at the given row indices."""
    if values.ndim == 1:
        return np.bincount(index, weights=values, minlength=n).astype(values.dtype)
    c = values.shape[1]
    flat_index = (index[:, None] * c + np.arange(c)[None, :]).ravel()
    out = np.bincount(flat_index, weights=values.ravel(), minlength=n * c)
    return out.reshape(n, c).astype(values.dtype)


def _sorted_segment_boundaries(seg: np.ndarray, n: int) -> np.ndarray:
    if len(seg) and np.any(seg[1:] < seg[:-1]):
        raise ValueError("segment ids must be sorted non-decreasing")
    starts = np.searchsorted(seg, np.arange(n + 1))
    return starts


def _segment_max_sorted(values: np.ndarray, indptr: np.ndarray) -> np.ndarray:
    """Per-segment max for sorted segments; empty segments yield 0."""
    n = len(indptr) - 1
    out = np.zeros((n,) + values.shape[1:], dtype=values.dtype)
    nonempty = indptr[1:] > indptr[:-1]
    if nonempty.any():
        out[nonempty] = np.maximum.reduceat(values, indptr[:-1][nonempty], axis=0)
    return out


def _segment_sum_sorted(values: np.ndarray, indptr: np.ndarray) -> np.ndarray:
    n = len(indptr) - 1
    out = np.zeros((n,) + values.shape[1:], dtype=values.dtype)
    nonempty = indptr[1:] > indptr[:-1]
    if nonempty.any():
        out[nonempty] = np.add.reduceat(values, indptr[:-1][nonempty], axis=0)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# primitives

def matmul(a, b) -> Variable:
    a, b = _as_variable(a), _as_variable(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.value.shape[1] != b.value.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.value.shape} @ {b.value.shape}")
    av, bv = a.value, b.value

    def bwd(g):
        return g @ bv.T, av.T @ g

    return _emit(av @ bv, (a, b), bwd)


def add(a, b) -> Variable:
    a, b = _as_variable(a), _as_variable(b)
    try:
        out = a.value + b.value
    except ValueError:
        raise ValueError(f"add: shapes {a.value.shape} and {b.value.shape} do not broadcast")
    ash, bsh = a.value.shape, b.value.shape

    def bwd(g):
        return _unbroadcast(g, ash), _unbroadcast(g, bsh)

    return _emit(out, (a, b), bwd)


def subtract(a, b) -> Variable:
    a, b = _as_variable(a), _as_variable(b)
    try:
        out = a.value - b.value
    except ValueError:
        raise ValueError(f"subtract: shapes {a.value.shape} and {b.value.shape} do not broadcast")
    ash, bsh = a.value.shape, b.value.shape

    def bwd(g):
        return _unbroadcast(g, ash), _unbroadcast(-g, bsh)

    return _emit(out, (a, b), bwd)


def hadamard(a, b) -> Variable:
    a, b = _as_variable(a), _as_variable(b)
    try:
        out = a.value * b.value
    except ValueError:
        raise ValueError(f"hadamard: shapes {a.value.shape} and {b.value.shape} do not broadcast")
    av, bv = a.value, b.value

    def bwd(g):
        return _unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)

    return _emit(out, (a, b), bwd)


def scale_by_scalar(x, s: float) -> Variable:
    x = _as_variable(x)
    s = float(s)

    def bwd(g):
        return (g * s,)

    return _emit(x.value * s, (x,), bwd)


def relu(x) -> Variable:
    x = _as_variable(x)
    mask = x.value > 0  # derivative at 0 is 0

    def bwd(g):
        return (g * mask,)

    return _emit(np.maximum(x.value, 0.0), (x,), bwd)


def tanh(x) -> Variable:
    x = _as_variable(x)
    out = np.tanh(x.value)

    def bwd(g):
        return (g * (1.0 - out * out),)

    return _emit(out, (x,), bwd)


def hardtanh(x, lo: float, hi: float) -> Variable:
    """Clamp to [lo, hi]; derivative is 1 strictly inside, 0 elsewhere."""
    x = _as_variable(x)
    if not lo < hi:
        raise ValueError(f"hardtanh: lo={lo} must be < hi={hi}")
    interior = (x.value > lo) & (x.value < hi)

    def bwd(g):
        return (g * interior,)

    return _emit(np.clip(x.value, lo, hi), (x,), bwd)


def dropout(x, p: float, train: bool, rng) -> Variable:
    """Inverted dropout: retained entries scaled by 1/(1-p) in training,
    identity at evaluation. ``rng`` is an integer seed or a Generator."""
    x = _as_variable(x)
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout: p={p} outside [0, 1)")
    if not train or p == 0.0:
        return x
    if not isinstance(rng, np.random.Generator):
        rng = philox(int(rng))
    scale = 1.0 / (1.0 - p)
    mask = (rng.random(x.value.shape) >= p) * scale

    def bwd(g):
        return (g * mask,)

    return _emit(x.value * mask, (x,), bwd)


def row_gather(x, index) -> Variable:
    x = _as_variable(x)
    index = np.asarray(index, dtype=np.int64)
    n = x.value.shape[0]

    def bwd(g):
        return (_scatter_add_rows(g, index, n),)

    return _emit(x.value[index], (x,), bwd)


def slice_columns(x, start: int, stop: int) -> Variable:
    x = _as_variable(x)
    shape = x.value.shape

    def bwd(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[:, start:stop] = g
        return (full,)

    return _emit(x.value[:, start:stop].copy(), (x,), bwd)


def concat_columns(parts: Sequence) -> Variable:
    parts = tuple(_as_variable(p) for p in parts)
    widths = [p.value.shape[1] for p in parts]
    offsets = np.concatenate(([0], np.cumsum(widths)))

    def bwd(g):
        return tuple(g[:, offsets[i]:offsets[i + 1]] for i in range(len(parts)))

    return _emit(np.concatenate([p.value for p in parts], axis=1), parts, bwd)


def segment_sum(values, target_index, n: int) -> Variable:
    """Scatter-add edge rows onto n node rows (targets need not be sorted)."""
    values = _as_variable(values)
    target_index = np.asarray(target_index, dtype=np.int64)

    def bwd(g):
        return (g[target_index],)

    return _emit(_scatter_add_rows(values.value, target_index, n), (values,), bwd)


def segment_softmax(values, source_index, n: int, indptr=None, selector=None) -> Variable:
    """Channel-wise softmax over each source node's contiguous edge block.

    Requires sorted segment ids (the graph's directed-edge order). Callers
    holding the graph's CSR machinery can pass ``indptr`` (boundary
    pointers) and ``selector`` (gather/scatter matrix pair) to skip the
    per-call index work. Uses the max-shifted form for overflow safety;
    each nonempty segment's outputs sum to 1 per channel.
    """
    values = _as_variable(values)
    seg = np.asarray(source_index, dtype=np.int64)
    if indptr is None:
        indptr = _sorted_segment_boundaries(seg, n)
    if selector is not None:
        gather_mat, scatter_mat = selector
        expand_sum = lambda x: gather_mat @ (scatter_mat @ x)
    else:
        expand_sum = lambda x: _segment_sum_sorted(x, indptr)[seg]
    shifted = values.value - _segment_max_sorted(values.value, indptr)[seg]
    e = np.exp(shifted)
    y = e / expand_sum(e)

    def bwd(g):
        return (y * (g - expand_sum(y * g)),)

    return _emit(y, (values,), bwd)


def fixed_sparse_matmul(matrix, matrix_t, x) -> Variable:
    """Multiply by a constant sparse matrix (gather/scatter selectors, graph
    operators); the backward rule applies the supplied transpose."""
    x = _as_variable(x)

    def bwd(g):
        return (matrix_t @ g,)

    return _emit(matrix @ x.value, (x,), bwd)


def total_sum(x) -> Variable:
    x = _as_variable(x)
    shape = x.value.shape

    def bwd(g):
        return (np.broadcast_to(g, shape).astype(g.dtype),)

    return _emit(np.asarray(x.value.sum()), (x,), bwd)


@dataclass
class BatchNormState:
    """Running statistics for evaluation-mode normalization."""

    running_mean: np.ndarray
    running_var: np.ndarray

    @classmethod
    def zeros(cls, c: int) -> "BatchNormState":
        return cls(np.zeros(c, dtype=default_dtype()), np.ones(c, dtype=default_dtype()))


def batch_norm(x, gamma, beta, state: BatchNormState, train: bool,
               momentum: float = 0.1, eps: float = 1e-5) -> Variable:
    """Per-feature normalization over nodes; running stats frozen at eval."""
    x, gamma, beta = _as_variable(x), _as_variable(gamma), _as_variable(beta)
    xv = x.value
    n = xv.shape[0]
    if train:
        mu = xv.mean(axis=0)
        var = xv.var(axis=0)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (xv - mu) * inv_std
        state.running_mean = (1 - momentum) * state.running_mean + momentum * mu
        unbiased = var * (n / max(n - 1, 1))
        state.running_var = (1 - momentum) * state.running_var + momentum * unbiased

        def bwd(g):
            dgamma = (g * xhat).sum(axis=0)
            dbeta = g.sum(axis=0)
            dxhat = g * gamma.value
            dx = inv_std / n * (n * dxhat - dxhat.sum(axis=0)
                                - xhat * (dxhat * xhat).sum(axis=0))
            return dx, dgamma, dbeta
    else:
        inv_std = 1.0 / np.sqrt(state.running_var + eps)
        xhat = (xv - state.running_mean) * inv_std

        def bwd(g):
            dgamma = (g * xhat).sum(axis=0)
            dbeta = g.sum(axis=0)
            return g * gamma.value * inv_std, dgamma, dbeta

    return _emit(gamma.value * xhat + beta.value, (x, gamma, beta), bwd)


# ---------------------------------------------------------------------------
# losses

def _row_mask(mask, n: int) -> np.ndarray:
    if mask is None:
        return np.ones(n, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (n,):
        raise ValueError(f"mask shape {mask.shape} does not match n={n}")
    return mask


def cross_entropy(logits, labels, mask=None) -> Variable:
    """Mean softmax cross-entropy over masked rows; labels are class ids."""
    logits = _as_variable(logits)
    labels = np.asarray(labels, dtype=np.int64)
    m = _row_mask(mask, logits.value.shape[0])
    rows = np.flatnonzero(m)
    if len(rows) == 0:
        raise ValueError("cross_entropy: mask selects no rows")
    z = logits.value[rows]
    zmax = z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z - zmax).sum(axis=1)) + zmax[:, 0]
    picked = z[np.arange(len(rows)), labels[rows]]
    loss = float((lse - picked).mean())
    shape = logits.value.shape

    def bwd(g):
        p = np.exp(z - zmax)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(len(rows)), labels[rows]] -= 1.0
        full = np.zeros(shape)
        full[rows] = p / len(rows)
        return (full * g,)

    return _emit(np.asarray(loss), (logits,), bwd)


def mse(pred, target, mask=None) -> Variable:
    """Mean squared error over masked rows (all channels)."""
    pred = _as_variable(pred)
    target = np.asarray(target, dtype=pred.value.dtype)
    m = _row_mask(mask, pred.value.shape[0])
    diff = (pred.value - target)[m]
    count = diff.size
    if count == 0:
        raise ValueError("mse: mask selects no rows")
    shape = pred.value.shape

    def bwd(g):
        full = np.zeros(shape)
        full[m] = 2.0 * diff / count
        return (full * g,)

    return _emit(np.asarray(float((diff * diff).mean())), (pred,), bwd)


def mae(pred, target, mask=None) -> Variable:
    """Mean absolute error over masked rows; subgradient 0 at exact zeros."""
    pred = _as_variable(pred)
    target = np.asarray(target, dtype=pred.value.dtype)
    m = _row_mask(mask, pred.value.shape[0])
    diff = (pred.value - target)[m]
    count = diff.size
    if count == 0:
        raise ValueError("mae: mask selects no rows")
    shape = pred.value.shape

    def bwd(g):
        full = np.zeros(shape)
        full[m] = np.sign(diff) / count
        return (full * g,)

    return _emit(np.asarray(float(np.abs(diff).mean())), (pred,), bwd)


# ---------------------------------------------------------------------------
# conjugate-gradient solve with implicit-differentiation adjoint

def _cg_channels(lap_apply: Callable, b: np.ndarray, kappa: np.ndarray,
                 h: float, iterations: int, tol: float) -> np.ndarray:
    """Solve (I + h*kappa_c*L)u_c = b_c for every channel c jointly.

    Starts from zero; runs the fixed iteration count with an optional
    residual-norm early exit. Converged channels are frozen by zeroing
    their step sizes.
    """
    x = np.zeros_like(b)
    r = b.copy()
    p = r.copy()
    rr = (r * r).sum(axis=0)
    tol2 = tol * tol
    h_kappa = (h * kappa)[None, :]
    for _ in range(iterations):
        if rr.max() <= tol2:
            break
        a_p = p + lap_apply(p) * h_kappa
        p_ap = (p * a_p).sum(axis=0)
        active = (rr > tol2) & (p_ap > 0)
        alpha = np.where(active, rr / np.where(p_ap > 0, p_ap, 1.0), 0.0)
        x = x + alpha[None, :] * p
        r = r - alpha[None, :] * a_p
        rr_new = (r * r).sum(axis=0)
        beta = np.where(active, rr_new / np.where(rr > 0, rr, 1.0), 0.0)
        p = r + beta[None, :] * p
        rr = rr_new
    if not np.isfinite(x).all():
        raise FloatingPointError("cg_solve: non-finite values encountered")
    return x


def cg_solve(lap_apply: Callable, rhs, kappa, h: float,
             iterations: int = 5, tol: float = 1e-10) -> Variable:
    """Per-channel solve of (I + h*kappa_c*L)u_c = rhs_c by conjugate
    gradients, where L is the self-adjoint PSD operator ``lap_apply``.

    The backward rule differentiates the solved system implicitly rather
    than the iterations: for upstream gradient G, it solves A Gr = G with
    the same operator and sets d(loss)/d(kappa_c) = -h * <Gr_c, L u_c>.
    """
    rhs, kappa = _as_variable(rhs), _as_variable(kappa)
    if iterations < 1:
        raise ValueError(f"cg_solve: iterations must be >= 1, got {iterations}")
    if h <= 0:
        raise ValueError(f"cg_solve: h must be positive, got {h}")
    if rhs.value.ndim != 2 or kappa.value.shape != (rhs.value.shape[1],):
        raise ValueError(
            f"cg_solve: rhs {rhs.value.shape} needs kappa of shape ({rhs.value.shape[1]},), "
            f"got {kappa.value.shape}")
    if not np.isfinite(rhs.value).all():
        raise FloatingPointError("cg_solve: rhs contains non-finite values")
    kap = kappa.value
    u = _cg_channels(lap_apply, rhs.value, kap, h, iterations, tol)

    def bwd(g):
        g_rhs = _cg_channels(lap_apply, g, kap, h, iterations, tol)
        lap_u = lap_apply(u)
        g_kappa = -h * (g_rhs * lap_u).sum(axis=0)
        return g_rhs, g_kappa

    return _emit(u, (rhs, kappa), bwd)


# ---------------------------------------------------------------------------
# fully connected layer plumbing

@dataclass
class Linear:
    """Dense layer y = x @ w (+ b), with uniform +-sqrt(6/(fan_in+fan_out))
    weight init and zero bias."""

    w: Variable
    b: Optional[Variable] = None

    @classmethod
    def init(cls, fan_in: int, fan_out: int, rng: np.random.Generator,
             bias: bool = True, name: str = "linear") -> "Linear":
        s = np.sqrt(6.0 / (fan_in + fan_out))
        w = Variable(rng.uniform(-s, s, size=(fan_in, fan_out)),
                     requires_grad=True, name=f"{name}.w")
        b = None
        if bias:
            b = Variable(np.zeros(fan_out), requires_grad=True, name=f"{name}.b")
        return cls(w, b)

    def __call__(self, x) -> Variable:
        y = matmul(x, self.w)
        return add(y, self.b) if self.b is not None else y

    def parameters(self) -> list[Variable]:
        return [self.w] + ([self.b] if self.b is not None else [])
