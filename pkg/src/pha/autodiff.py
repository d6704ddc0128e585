"""Dense float64 tensors with taped reverse-mode differentiation.

Everything is stored as contiguous row-major ``numpy`` float64 arrays.
Operations executed while a :class:`Tape` is active append one record each;
``backward`` replays the tape once in reverse and accumulates exact
vector-Jacobian products. Binary ops require equal shapes; the only
broadcasting allowed is the explicit bias/constant helpers below, which keeps
shape mistakes loud.

A tape and the tensors recorded on it belong to one logical owner at a time.
Whole graphs may be handed between threads, but a single graph must never be
mutated from two threads at once.
"""

from __future__ import annotations

from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    ContractError,
    DegenerateInputError,
    DeterminismError,
    DimensionError,
)

Array = np.ndarray

_TAPE_STACK: list["Tape"] = []


class Tensor:
    """A dense float64 array plus gradient slot."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        # asarray with order="C" keeps 0-d scalars 0-d (ascontiguousarray would not).
        self.data: Array = np.asarray(data, dtype=np.float64, order="C")
        self.requires_grad = bool(requires_grad)
        self.grad: Array | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """Copy of the values as a fresh leaf; gradient flow stops here."""
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Thin operator sugar over the module-level ops.
    def __add__(self, other):
        return add_scalar(self, other) if isinstance(other, (int, float)) else add(self, other)

    def __radd__(self, other):
        return add_scalar(self, other)

    def __sub__(self, other):
        return add_scalar(self, -other) if isinstance(other, (int, float)) else sub(self, other)

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return scale(self, other) if isinstance(other, (int, float)) else mul(self, other)

    def __rmul__(self, other):
        return scale(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)


class _Record:
    __slots__ = ("inputs", "out", "vjp")

    def __init__(self, inputs, out, vjp):
        self.inputs = inputs
        self.out = out
        self.vjp = vjp


class Tape:
    """Ordered record of executed differentiable operations.

    Records are appended in execution order, so by construction every record
    appears after the records producing its inputs. One ``backward`` call
    walks the tape once in reverse.
    """

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def __len__(self) -> int:
        return len(self.records)

    def clear(self) -> None:
        self.records.clear()


def active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def record_op(inputs: tuple[Tensor, ...], out_data: Array,
              vjp: Callable[[Array, tuple[bool, ...]], tuple[Array | None, ...]]) -> Tensor:
    """Wrap ``out_data`` in a Tensor and record the op on the active tape.

    ``vjp(g, needs)`` must return one cotangent per input; slots whose
    ``needs`` flag is False may be returned as None.
    """
    tape = active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=track)
    if track:
        tape.records.append(_Record(inputs, out, vjp))
    return out


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every requires_grad tensor reachable from ``loss``.

    Gradients accumulate additively, both across multiple uses of a tensor
    inside one graph and across repeated backward calls.
    """
    if loss.data.shape != ():
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.data.shape}")
    tape = active_tape()
    if tape is None:
        raise ContractError("backward() requires an active Tape")
    produced = {id(r.out) for r in tape.records}
    if id(loss) not in produced:
        raise ContractError("loss was not produced on the active tape")

    pending: dict[int, Array] = {id(loss): np.ones((), dtype=np.float64)}
    holders: dict[int, Tensor] = {id(loss): loss}
    for rec in reversed(tape.records):
        g = pending.pop(id(rec.out), None)
        if g is None:
            continue
        holders.pop(id(rec.out), None)
        if rec.out.requires_grad:
            rec.out.grad = g if rec.out.grad is None else rec.out.grad + g
        needs = tuple(t.requires_grad for t in rec.inputs)
        for t, gt in zip(rec.inputs, rec.vjp(g, needs)):
            if gt is None or not t.requires_grad:
                continue
            tid = id(t)
            if tid in pending:
                pending[tid] = pending[tid] + gt
            else:
                pending[tid] = gt
                holders[tid] = t
    # Whatever is left belongs to leaves (tensors not produced by any record).
    for tid, g in pending.items():
        t = holders[tid]
        if t.requires_grad:
            t.grad = g if t.grad is None else t.grad + g


def zero_grad(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# elementwise and scalar ops
# ---------------------------------------------------------------------------

def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise DimensionError(f"{op} shapes differ: {a.data.shape} vs {b.data.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return record_op((a, b), a.data + b.data, lambda g, n: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return record_op((a, b), a.data - b.data, lambda g, n: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return record_op((a, b), ad * bd, lambda g, n: (g * bd if n[0] else None,
                                                    g * ad if n[1] else None))


def neg(a: Tensor) -> Tensor:
    return record_op((a,), -a.data, lambda g, n: (-g,))


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return record_op((a,), a.data * s, lambda g, n: (g * s,))


def add_scalar(a: Tensor, s: float) -> Tensor:
    return record_op((a,), a.data + float(s), lambda g, n: (g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return record_op((a,), out, lambda g, n: (g * out,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0.0):
        raise DegenerateInputError("log requires strictly positive inputs")
    ad = a.data
    return record_op((a,), np.log(ad), lambda g, n: (g / ad,))


def relu(a: Tensor) -> Tensor:
    # Subgradient at exactly 0 is taken as 0.
    mask = a.data > 0.0
    return record_op((a,), np.where(mask, a.data, 0.0), lambda g, n: (g * mask,))


def add_constant(a: Tensor, c) -> Tensor:
    """Add a non-differentiated constant (masks, positional tables)."""
    out = a.data + np.asarray(c, dtype=np.float64)
    if out.shape != a.data.shape:
        raise DimensionError(f"constant of shape {np.shape(c)} would grow tensor {a.data.shape}")
    return record_op((a,), out, lambda g, n: (g,))


def mul_constant(a: Tensor, c) -> Tensor:
    carr = np.asarray(c, dtype=np.float64)
    out = a.data * carr
    if out.shape != a.data.shape:
        raise DimensionError(f"constant of shape {carr.shape} would grow tensor {a.data.shape}")
    return record_op((a,), out, lambda g, n: (g * carr,))


# ---------------------------------------------------------------------------
# bias-style broadcasts (the only tensor-tensor broadcasting allowed)
# ---------------------------------------------------------------------------

def add_rowvec(x: Tensor, v: Tensor) -> Tensor:
    """x[..., d] + v[d]."""
    if x.data.shape[-1:] != v.data.shape or v.data.ndim != 1:
        raise DimensionError(f"add_rowvec: {x.data.shape} with vector {v.data.shape}")
    d = v.data.shape[0]
    return record_op(
        (x, v), x.data + v.data,
        lambda g, n: (g, g.reshape(-1, d).sum(axis=0) if n[1] else None))


def add_rowvec_per_batch(x: Tensor, v: Tensor) -> Tensor:
    """x[B, T, d] + v[B, d], broadcast over the middle axis."""
    if x.data.ndim != 3 or v.data.ndim != 2 or x.data.shape[0] != v.data.shape[0] \
            or x.data.shape[2] != v.data.shape[1]:
        raise DimensionError(f"add_rowvec_per_batch: {x.data.shape} with {v.data.shape}")
    return record_op((x, v), x.data + v.data[:, None, :],
                     lambda g, n: (g, g.sum(axis=1) if n[1] else None))


def add_colvec(x: Tensor, v: Tensor) -> Tensor:
    """x[n, m] + v[n], broadcast across columns."""
    if x.data.ndim != 2 or v.data.ndim != 1 or x.data.shape[0] != v.data.shape[0]:
        raise DimensionError(f"add_colvec: {x.data.shape} with vector {v.data.shape}")
    return record_op((x, v), x.data + v.data[:, None],
                     lambda g, n: (g, g.sum(axis=1) if n[1] else None))


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(f"matmul shapes incompatible: {a.data.shape} and {b.data.shape}")
    ad, bd = a.data, b.data
    return record_op((a, b), ad @ bd,
                     lambda g, n: (g @ bd.T if n[0] else None,
                                   ad.T @ g if n[1] else None))


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul [..., m, k] @ [..., k, n]; leading dims must match exactly."""
    if a.data.ndim < 3 or a.data.ndim != b.data.ndim \
            or a.data.shape[:-2] != b.data.shape[:-2] \
            or a.data.shape[-1] != b.data.shape[-2]:
        raise DimensionError(f"bmm shapes incompatible: {a.data.shape} and {b.data.shape}")
    ad, bd = a.data, b.data
    return record_op((a, b), np.matmul(ad, bd),
                     lambda g, n: (np.matmul(g, bd.swapaxes(-1, -2)) if n[0] else None,
                                   np.matmul(ad.swapaxes(-1, -2), g) if n[1] else None))


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    old = a.data.shape
    return record_op((a,), np.ascontiguousarray(a.data).reshape(shape),
                     lambda g, n: (g.reshape(old),))


def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return record_op((a,), a.data.transpose(axes), lambda g, n: (g.transpose(inv),))


def transpose2d(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise DimensionError(f"transpose2d needs a matrix, got {a.data.shape}")
    return permute(a, (1, 0))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ContractError("concat of zero tensors")
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)

    def vjp(g, n):
        pieces = np.split(g, splits, axis=axis)
        return tuple(p if need else None for p, need in zip(pieces, n))

    return record_op(tuple(tensors), out, vjp)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    if start < 0 or start + length > a.data.shape[axis]:
        raise DimensionError(
            f"narrow [{start}:{start + length}] out of bounds for axis {axis} of {a.data.shape}")
    idx = tuple(slice(None) if i != axis else slice(start, start + length)
                for i in range(a.data.ndim))
    shape = a.data.shape

    def vjp(g, n):
        full = np.zeros(shape, dtype=np.float64)
        full[idx] = g
        return (full,)

    return record_op((a,), a.data[idx].copy(), vjp)


def take_rows(a: Tensor, ids) -> Tensor:
    """Gather rows of ``a`` along axis 0 by an integer index array.

    Covers both embedding lookup (2-D table, any-shape ids) and batch
    regrouping (3-D activations, 1-D ids). Duplicate ids accumulate in the
    backward scatter.
    """
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ContractError("take_rows ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= a.data.shape[0]):
        raise IndexError(f"take_rows id out of range for {a.data.shape[0]} rows")
    shape = a.data.shape

    def vjp(g, n):
        full = np.zeros(shape, dtype=np.float64)
        np.add.at(full, ids, g)
        return (full,)

    return record_op((a,), a.data[ids], vjp)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def sum_all(a: Tensor) -> Tensor:
    shape = a.data.shape
    return record_op((a,), np.asarray(a.data.sum(), dtype=np.float64),
                     lambda g, n: (np.full(shape, float(g)),))


def mean_all(a: Tensor) -> Tensor:
    return scale(sum_all(a), 1.0 / a.data.size)


def sum_axis(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    shape = a.data.shape
    axis = axis % a.data.ndim

    def vjp(g, n):
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, shape).copy(),)

    return record_op((a,), a.data.sum(axis=axis, keepdims=keepdims), vjp)


# ---------------------------------------------------------------------------
# fused neural-net ops with hand-derived adjoints
# ---------------------------------------------------------------------------

def softmax_lastdim(a: Tensor) -> Tensor:
    m = a.data.max(axis=-1, keepdims=True)
    e = np.exp(a.data - m)
    s = e / e.sum(axis=-1, keepdims=True)

    def vjp(g, n):
        return ((g - (g * s).sum(axis=-1, keepdims=True)) * s,)

    return record_op((a,), s, vjp)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row normalization over the last dim, then elementwise gain and bias."""
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise DimensionError(
            f"layer_norm: last dim {d} but gain {gain.data.shape}, bias {bias.data.shape}")
    if eps <= 0:
        raise ContractError("layer_norm eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = ((x.data - mu) ** 2).mean(axis=-1, keepdims=True)
    sigma = np.sqrt(var + eps)
    xhat = (x.data - mu) / sigma
    out = xhat * gain.data + bias.data
    gd = gain.data

    def vjp(g, n):
        gx = None
        if n[0]:
            gg = g * gd
            gx = (gg - gg.mean(axis=-1, keepdims=True)
                  - xhat * (gg * xhat).mean(axis=-1, keepdims=True)) / sigma
        ggain = (g * xhat).reshape(-1, d).sum(axis=0) if n[1] else None
        gbias = g.reshape(-1, d).sum(axis=0) if n[2] else None
        return (gx, ggain, gbias)

    return record_op((x, gain, bias), out, vjp)


def softmax_cross_entropy(logits: Tensor, targets: Sequence[int], ignore_index: int = -1) -> Tensor:
    """Mean negative log-softmax over non-ignored positions.

    ``logits`` is [n, V]; each target must lie in [0, V) or equal
    ``ignore_index``. Stabilized by row-max subtraction.
    """
    if logits.data.ndim != 2:
        raise DimensionError(f"softmax_cross_entropy needs [n, V] logits, got {logits.data.shape}")
    n_rows, n_classes = logits.data.shape
    targets = np.asarray(targets)
    if targets.shape != (n_rows,):
        raise DimensionError(f"{n_rows} logit rows but {targets.shape} targets")
    valid = targets != ignore_index
    checked = targets[valid]
    if checked.size and (checked.min() < 0 or checked.max() >= n_classes):
        raise IndexError(f"target outside [0, {n_classes})")
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise DegenerateInputError("softmax_cross_entropy: every position is ignored")

    m = logits.data.max(axis=1, keepdims=True)
    shifted = logits.data - m
    lse = np.log(np.exp(shifted).sum(axis=1)) + m[:, 0]
    rows = np.arange(n_rows)
    safe_t = np.where(valid, targets, 0)
    per_row = lse - logits.data[rows, safe_t]
    loss = np.asarray(per_row[valid].sum() / n_valid, dtype=np.float64)

    def vjp(g, n):
        p = np.exp(shifted)
        p /= p.sum(axis=1, keepdims=True)
        p[rows[valid], targets[valid]] -= 1.0
        p[~valid] = 0.0
        return (p * (float(g) / n_valid),)

    return record_op((logits,), loss, vjp)


def cosine_rows(a: Tensor, b: Tensor) -> Tensor:
    """All pairwise cosine similarities between rows of a [n,d] and b [m,d]."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[1]:
        raise DimensionError(f"cosine_rows shapes incompatible: {a.data.shape} and {b.data.shape}")
    na = np.linalg.norm(a.data, axis=1)
    nb = np.linalg.norm(b.data, axis=1)
    if np.any(na == 0.0) or np.any(nb == 0.0):
        raise DegenerateInputError("cosine_rows: zero-norm row")
    ahat = a.data / na[:, None]
    bhat = b.data / nb[:, None]
    c = ahat @ bhat.T

    def vjp(g, n):
        ga = gb = None
        if n[0]:
            ga = (g @ bhat - (g * c).sum(axis=1, keepdims=True) * ahat) / na[:, None]
        if n[1]:
            gb = (g.T @ ahat - (g * c).sum(axis=0)[:, None] * bhat) / nb[:, None]
        return (ga, gb)

    return record_op((a, b), c, vjp)


def dropout(x: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    if p <= 0.0:
        return x
    if p >= 1.0:
        raise ContractError("dropout rate must be below 1")
    keep = (rng.random(x.data.shape) >= p) / (1.0 - p)
    return mul_constant(x, keep)


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------

def finite_diff_check(loss_fn: Callable[[Mapping[str, Tensor]], Tensor],
                      params: Mapping[str, Tensor],
                      eps: float = 1e-5) -> float:
    """Compare backward() gradients against central differences.

    Returns the max over all coordinates of
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-12)``.
    ``loss_fn`` must be a deterministic pure function of the parameter values.
    """
    if not (1e-7 <= eps <= 1e-3):
        raise ContractError(f"eps {eps} outside [1e-7, 1e-3]")

    def value() -> float:
        out = loss_fn(params)
        if out.data.shape != ():
            raise ContractError("loss_fn must return a scalar tensor")
        return float(out.data)

    if value() != value():
        raise DeterminismError("loss_fn returned different values at the same point")

    zero_grad(params.values())
    with Tape():
        backward(loss_fn(params))
    analytic = {name: (np.zeros_like(t.data) if t.grad is None else t.grad.copy())
                for name, t in params.items()}

    worst = 0.0
    for name, t in params.items():
        flat = t.data.reshape(-1)
        aflat = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = value()
            flat[i] = orig - eps
            f_minus = value()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            a = aflat[i]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-12)
            worst = max(worst, rel)
    return worst
