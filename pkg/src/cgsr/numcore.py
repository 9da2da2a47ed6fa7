"""Dense 2-D float64 arrays with taped reverse-mode gradients.

Every tensor is a matrix; scalars are 1x1. Each operation checks shapes,
verifies the result is finite, and records its local adjoint on the produced
Value. ``backward(loss)`` walks the tape once in reverse topological order,
accumulating gradients additively across fan-out. Segment reductions run in
ascending edge order (see cgsr.kernels), so repeated runs are bit-identical.

A recorded graph belongs to one logical step: build it, call backward once,
read the leaf gradients, throw it away.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels


class ShapeError(ValueError):
    pass


class NonFiniteError(ArithmeticError):
    pass


class Value:
    """A matrix plus its gradient slot and the provenance needed to backprop."""

    __slots__ = ("data", "grad", "op", "_parents", "_bw")

    def __init__(self, data, parents=(), op="leaf"):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        if arr.ndim != 2:
            raise ShapeError(f"{op}: expected a matrix, got ndim={arr.ndim}")
        arr = np.ascontiguousarray(arr)
        # one-pass check: any NaN/Inf entry makes the sum non-finite, and
        # desk-scale magnitudes cannot overflow the sum on their own
        if not np.isfinite(arr.sum()):
            raise NonFiniteError(f"{op}: produced non-finite values")
        self.data = arr
        self.grad = np.zeros_like(arr)
        self.op = op
        self._parents = tuple(parents)
        self._bw = None

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        if self.data.shape != (1, 1):
            raise ShapeError(f"item() on shape {self.data.shape}")
        return float(self.data[0, 0])

    def __repr__(self):
        return f"Value(op={self.op}, shape={self.data.shape})"


def value(x) -> Value:
    """Wrap an array (or float) as a leaf Value. No copy if already f64 C-order."""
    return x if isinstance(x, Value) else Value(x)


def _pair(a, b, op):
    a, b = value(a), value(b)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shapes {a.data.shape} vs {b.data.shape}")
    return a, b


def add(a, b) -> Value:
    a, b = _pair(a, b, "add")
    out = Value(a.data + b.data, (a, b), "add")

    def _bw():
        a.grad += out.grad
        b.grad += out.grad

    out._bw = _bw
    return out


def sub(a, b) -> Value:
    a, b = _pair(a, b, "sub")
    out = Value(a.data - b.data, (a, b), "sub")

    def _bw():
        a.grad += out.grad
        b.grad -= out.grad

    out._bw = _bw
    return out


def hadamard(a, b) -> Value:
    a, b = _pair(a, b, "hadamard")
    out = Value(a.data * b.data, (a, b), "hadamard")

    def _bw():
        a.grad += out.grad * b.data
        b.grad += out.grad * a.data

    out._bw = _bw
    return out


def scale(a, s: float) -> Value:
    a = value(a)
    s = float(s)
    out = Value(a.data * s, (a,), "scale")

    def _bw():
        a.grad += out.grad * s

    out._bw = _bw
    return out


def add_const(a, c: float) -> Value:
    a = value(a)
    out = Value(a.data + float(c), (a,), "add_const")

    def _bw():
        a.grad += out.grad

    out._bw = _bw
    return out


def smul(s, a) -> Value:
    """Multiply by a trainable 1x1 scalar (gradients reach both sides)."""
    s, a = value(s), value(a)
    if s.data.shape != (1, 1):
        raise ShapeError(f"smul: scalar side has shape {s.data.shape}")
    out = Value(a.data * s.data[0, 0], (s, a), "smul")

    def _bw():
        a.grad += out.grad * s.data[0, 0]
        s.grad[0, 0] += float((out.grad * a.data).sum())

    out._bw = _bw
    return out


def matmul(a, b) -> Value:
    a, b = value(a), value(b)
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: {a.data.shape} @ {b.data.shape}")
    out = Value(a.data @ b.data, (a, b), "matmul")

    def _bw():
        a.grad += out.grad @ b.data.T
        b.grad += a.data.T @ out.grad

    out._bw = _bw
    return out


def transpose(a) -> Value:
    a = value(a)
    out = Value(a.data.T, (a,), "transpose")

    def _bw():
        a.grad += out.grad.T

    out._bw = _bw
    return out


def concat_rows(vals) -> Value:
    vals = [value(v) for v in vals]
    cols = {v.data.shape[1] for v in vals}
    if len(cols) != 1:
        raise ShapeError(f"concat_rows: column counts {sorted(cols)}")
    out = Value(np.concatenate([v.data for v in vals], axis=0), tuple(vals), "concat_rows")
    offsets = np.cumsum([0] + [v.data.shape[0] for v in vals])

    def _bw():
        for v, lo, hi in zip(vals, offsets[:-1], offsets[1:]):
            v.grad += out.grad[lo:hi]

    out._bw = _bw
    return out


def concat_cols(vals) -> Value:
    vals = [value(v) for v in vals]
    rows = {v.data.shape[0] for v in vals}
    if len(rows) != 1:
        raise ShapeError(f"concat_cols: row counts {sorted(rows)}")
    out = Value(np.concatenate([v.data for v in vals], axis=1), tuple(vals), "concat_cols")
    offsets = np.cumsum([0] + [v.data.shape[1] for v in vals])

    def _bw():
        for v, lo, hi in zip(vals, offsets[:-1], offsets[1:]):
            v.grad += out.grad[:, lo:hi]

    out._bw = _bw
    return out


def reshape(a, rows: int, cols: int) -> Value:
    a = value(a)
    if rows * cols != a.data.size:
        raise ShapeError(f"reshape: {a.data.shape} to ({rows}, {cols})")
    out = Value(a.data.reshape(rows, cols), (a,), "reshape")

    def _bw():
        a.grad += out.grad.reshape(a.data.shape)

    out._bw = _bw
    return out


def gather_rows(a, indices) -> Value:
    a = value(a)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError(f"gather_rows: indices ndim={idx.ndim}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.data.shape[0]):
        raise IndexError(f"gather_rows: index out of range for {a.data.shape[0]} rows")
    out = Value(a.data[idx], (a,), "gather_rows")

    def _bw():
        kernels.scatter_rows(a.grad, idx, out.grad)

    out._bw = _bw
    return out


def tile_rows(a, n: int) -> Value:
    """Repeat a single-row Value n times (broadcast helper)."""
    a = value(a)
    if a.data.shape[0] != 1:
        raise ShapeError(f"tile_rows: expected one row, got {a.data.shape}")
    return gather_rows(a, np.zeros(n, dtype=np.int64))


def _check_segids(nrows, seg_ids, num_segments, op):
    ids = np.asarray(seg_ids, dtype=np.int64)
    if ids.shape != (nrows,):
        raise ShapeError(f"{op}: segment_ids shape {ids.shape} for {nrows} rows")
    if ids.size and np.any(np.diff(ids) < 0):
        raise ValueError(f"{op}: segment_ids must be sorted non-decreasing")
    n = int(num_segments) if num_segments is not None else (int(ids[-1]) + 1 if ids.size else 0)
    if ids.size and (ids[0] < 0 or ids[-1] >= n):
        raise ValueError(f"{op}: segment id out of range [0, {n})")
    return ids, n


def segment_softmax(scores, seg_ids, num_segments=None) -> Value:
    """Softmax within each contiguous segment of a column vector."""
    s = value(scores)
    if s.data.shape[1] != 1:
        raise ShapeError(f"segment_softmax: expected a column, got {s.data.shape}")
    ids, n = _check_segids(s.data.shape[0], seg_ids, num_segments, "segment_softmax")
    alpha = kernels.seg_softmax(s.data[:, 0], ids, n)
    out = Value(alpha.reshape(-1, 1), (s,), "segment_softmax")

    def _bw():
        s.grad[:, 0] += kernels.seg_softmax_backward(alpha, np.ascontiguousarray(out.grad[:, 0]), ids, n)

    out._bw = _bw
    return out


def segment_weighted_sum(values_, weights, seg_ids, num_segments=None) -> Value:
    """Per-segment sum of rows scaled by a per-row weight column."""
    v, w = value(values_), value(weights)
    if w.data.shape != (v.data.shape[0], 1):
        raise ShapeError(f"segment_weighted_sum: weights {w.data.shape} for values {v.data.shape}")
    ids, n = _check_segids(v.data.shape[0], seg_ids, num_segments, "segment_weighted_sum")
    out = Value(kernels.seg_weighted_rowsum(v.data, np.ascontiguousarray(w.data[:, 0]), ids, n),
                (v, w), "segment_weighted_sum")

    def _bw():
        gv, gw = kernels.seg_weighted_rowsum_backward(
            v.data, np.ascontiguousarray(w.data[:, 0]), ids, out.grad)
        v.grad += gv
        w.grad[:, 0] += gw

    out._bw = _bw
    return out


def leaky_relu(a, slope: float = 0.2) -> Value:
    a = value(a)
    pos = a.data > 0
    out = Value(np.where(pos, a.data, a.data * slope), (a,), "leaky_relu")

    def _bw():
        a.grad += out.grad * np.where(pos, 1.0, slope)

    out._bw = _bw
    return out


def sigmoid(a) -> Value:
    a = value(a)
    y = 1.0 / (1.0 + np.exp(-a.data))
    out = Value(y, (a,), "sigmoid")

    def _bw():
        a.grad += out.grad * y * (1.0 - y)

    out._bw = _bw
    return out


def log(a) -> Value:
    a = value(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(a.data)
    out = Value(y, (a,), "log")  # non-positive inputs fail the finite check

    def _bw():
        a.grad += out.grad / a.data

    out._bw = _bw
    return out


def clamp(a, lo: float, hi: float) -> Value:
    a = value(a)
    inside = (a.data > lo) & (a.data < hi)
    out = Value(np.clip(a.data, lo, hi), (a,), "clamp")

    def _bw():
        a.grad += out.grad * inside

    out._bw = _bw
    return out


def sum_all(a) -> Value:
    a = value(a)
    out = Value(np.array([[a.data.sum()]]), (a,), "sum_all")

    def _bw():
        a.grad += out.grad[0, 0]

    out._bw = _bw
    return out


def dot(a, b) -> Value:
    """Full contraction of two same-shape matrices to a 1x1 scalar."""
    a, b = _pair(a, b, "dot")
    out = Value(np.array([[float((a.data * b.data).sum())]]), (a, b), "dot")

    def _bw():
        a.grad += out.grad[0, 0] * b.data
        b.grad += out.grad[0, 0] * a.data

    out._bw = _bw
    return out


def mean_of(vals) -> Value:
    vals = [value(v) for v in vals]
    if not vals:
        raise ShapeError("mean_of: empty list")
    shapes = {v.data.shape for v in vals}
    if len(shapes) != 1:
        raise ShapeError(f"mean_of: shapes {sorted(shapes)}")
    acc = vals[0].data.copy()
    for v in vals[1:]:
        acc += v.data
    k = float(len(vals))
    out = Value(acc / k, tuple(vals), "mean_of")

    def _bw():
        g = out.grad / k
        for v in vals:
            v.grad += g

    out._bw = _bw
    return out


def softmax(a) -> Value:
    """Softmax over all entries of a column vector (single segment)."""
    a = value(a)
    return segment_softmax(a, np.zeros(a.data.shape[0], dtype=np.int64), 1)


def _toposort(root: Value):
    order, visited, stack = [], set(), [(root, iter(root._parents))]
    visited.add(id(root))
    while stack:
        node, it = stack[-1]
        advanced = False
        for p in it:
            if id(p) not in visited:
                visited.add(id(p))
                stack.append((p, iter(p._parents)))
                advanced = True
                break
        if not advanced:
            order.append(node)
            stack.pop()
    return order


def backward(loss: Value) -> None:
    """Fill grad slots of everything reachable from a scalar loss."""
    if not isinstance(loss, Value):
        raise TypeError("backward expects a Value")
    if loss.data.shape != (1, 1):
        raise ShapeError(f"backward: loss must be 1x1, got {loss.data.shape}")
    order = _toposort(loss)
    loss.grad[0, 0] = 1.0
    for v in reversed(order):
        if v._bw is not None:
            v._bw()


@dataclass
class GradCheckReport:
    """Outcome of comparing reverse-mode gradients against central differences."""

    max_rel_err: dict = field(default_factory=dict)
    failures: list = field(default_factory=list)     # (name, index, ad, fd, rel)
    kink_suspects: list = field(default_factory=list)  # entries unstable under step refinement

    @property
    def passed(self) -> bool:
        return not self.failures

    def worst(self) -> float:
        return max(self.max_rel_err.values(), default=0.0)


def _rel_err(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-6)


def grad_check(f, params: dict, step: float = 1e-5, tol: float = 1e-4) -> GradCheckReport:
    """Compare reverse-mode gradients of ``f(params) -> scalar Value`` to
    central finite differences, entry by entry.

    Entries over tolerance are re-probed at step/8; if the difference quotient
    itself moves by more than 10*tol they are reported as kink suspects (the
    usual finite-difference caveat near piecewise-linear joints) rather than
    failures.
    """
    work = {k: np.array(v, dtype=np.float64) for k, v in params.items()}

    def eval_loss():
        return f({k: value(v) for k, v in work.items()}).item()

    vals = {k: value(v) for k, v in work.items()}
    backward(f(vals))
    report = GradCheckReport()
    for name in sorted(work):
        arr = work[name]
        adg = vals[name].grad
        worst = 0.0
        for index in np.ndindex(arr.shape):
            orig = arr[index]
            arr[index] = orig + step
            up = eval_loss()
            arr[index] = orig - step
            dn = eval_loss()
            arr[index] = orig
            fd = (up - dn) / (2.0 * step)
            rel = _rel_err(adg[index], fd)
            if rel > tol:
                h = step / 8.0
                arr[index] = orig + h
                up2 = eval_loss()
                arr[index] = orig - h
                dn2 = eval_loss()
                arr[index] = orig
                fd2 = (up2 - dn2) / (2.0 * h)
                if _rel_err(fd, fd2) > 10.0 * tol:
                    report.kink_suspects.append((name, index, float(fd), float(fd2)))
                    continue
                rel = min(rel, _rel_err(adg[index], fd2))
                if rel > tol:
                    report.failures.append((name, index, float(adg[index]), float(fd2), rel))
            worst = max(worst, rel)
        report.max_rel_err[name] = worst
    return report
