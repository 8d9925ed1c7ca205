"""Dense numerical core: tensors, a gradient tape, and hand-written backward rules.

Everything is numpy under the hood, in one build-wide precision (float32 by
default, float64 for tight gradient checking). Ops record onto the active
``ComputeTape`` when one is open; without a tape they are plain forward
evaluations, which is what inference uses.

Each op tracks its distance to the nearest non-smooth point (ReLU zero
crossings, pooling/argmax ties, hinge boundaries) so gradient-check harnesses
can resample inputs that sit too close to a kink.
"""

from __future__ import annotations

import math
import warnings

import numpy as np

from .errors import (
    BatchSizeError,
    ContractError,
    GeometryError,
    NumericError,
    ShapeError,
)

_DTYPES = {32: np.float32, 64: np.float64}
_dtype = np.float32


def set_precision(bits: int) -> None:
    """Select the build-wide float width (32 or 64). Call before building params."""
    global _dtype
    if bits not in _DTYPES:
        raise ContractError(f"precision must be 32 or 64, got {bits}")
    _dtype = _DTYPES[bits]


def precision() -> int:
    return 32 if _dtype is np.float32 else 64


def dtype():
    """Current numpy dtype for all new tensors."""
    return _dtype


class Tensor:
    """A dense array plus the hooks backward() needs to differentiate through it.

    ``op`` names the producing operation ("leaf" for inputs), ``kink`` is the
    distance from the op's current inputs to its nearest non-differentiable
    point (inf for smooth ops).
    """

    __slots__ = ("data", "op", "kink", "_inputs", "_backward", "_param")

    def __init__(self, data, op="leaf", inputs=(), backward=None, kink=math.inf):
        self.data = np.asarray(data, dtype=_dtype)
        self.op = op
        self.kink = kink
        self._inputs = inputs
        self._backward = backward
        self._param = None

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.data.shape})"


class Parameter:
    """A named learnable tensor with a persistent gradient accumulator."""

    def __init__(self, value, name: str):
        self.name = name
        self.value = Tensor(value)
        self.value._param = self
        self.grad = np.zeros_like(self.value.data)

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x) -> Tensor:
    if isinstance(x, Parameter):
        return x.value
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


class ComputeTape:
    """Record of one forward pass, in execution (hence topological) order.

    Use as a context manager; exactly one tape may be active at a time and each
    training step owns its own. ``backward`` replays the records in reverse,
    visiting each node once.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []
        self._extra_kink = math.inf

    def __enter__(self):
        global _active_tape
        if _active_tape is not None:
            raise ContractError("a ComputeTape is already active")
        _active_tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _active_tape
        _active_tape = None
        return False

    def min_kink(self) -> float:
        """Distance from this pass's inputs to the nearest kink of any recorded op."""
        k = self._extra_kink
        for node in self.nodes:
            if node.kink < k:
                k = node.kink
        return k


_active_tape: ComputeTape | None = None


def active_tape() -> ComputeTape | None:
    return _active_tape


def note_kink(distance: float) -> None:
    """Report a data-dependent discrete choice (e.g. a hard-negative argmax)."""
    if _active_tape is not None and distance < _active_tape._extra_kink:
        _active_tape._extra_kink = float(distance)


def _emit(data, op, inputs, backward, kink=math.inf) -> Tensor:
    if _active_tape is None:
        t = Tensor(data, op=op)
        return t
    t = Tensor(data, op=op, inputs=inputs, backward=backward, kink=kink)
    _active_tape.nodes.append(t)
    return t


def _gap_to_second(values: np.ndarray, axis: int) -> float:
    """Smallest top-two gap along ``axis``; inf when the axis has one element.

    Ties between two exactly-zero entries are ignored: they come from dead
    ReLUs upstream, which stay pinned at zero under small perturbations, so
    the max is locally constant there rather than kinked.
    """
    if values.shape[axis] < 2:
        return math.inf
    part = np.sort(values, axis=axis)
    top = np.take(part, -1, axis=axis)
    second = np.take(part, -2, axis=axis)
    gaps = top - second
    gaps = np.where((top == 0.0) & (second == 0.0), math.inf, gaps)
    return float(np.min(gaps))


# ---------------------------------------------------------------------------
# neural-net ops
# ---------------------------------------------------------------------------


def linear(x, w, b) -> Tensor:
    """y = x @ w + b for x [B,n], w [n,m], b [m]."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.data.ndim != 2 or w.data.ndim != 2 or b.data.ndim != 1:
        raise ShapeError(
            f"linear expects x [B,n], w [n,m], b [m]; got {x.shape}, {w.shape}, {b.shape}"
        )
    if x.shape[1] != w.shape[0] or w.shape[1] != b.shape[0]:
        raise ShapeError(f"linear dimension mismatch: x {x.shape}, w {w.shape}, b {b.shape}")
    y = x.data @ w.data + b.data

    def backward(gy):
        return gy @ w.data.T, x.data.T @ gy, gy.sum(axis=0)

    return _emit(y, "linear", (x, w, b), backward)


def conv1d(x, k, b, stride: int = 1) -> Tensor:
    """Cross-correlation of x [C_in,T] with k [C_out,C_in,kw] plus bias, no padding."""
    x, k, b = as_tensor(x), as_tensor(k), as_tensor(b)
    if x.data.ndim != 2 or k.data.ndim != 3 or b.data.ndim != 1:
        raise ShapeError(
            f"conv1d expects x [C_in,T], k [C_out,C_in,kw], b [C_out]; got {x.shape}, {k.shape}, {b.shape}"
        )
    c_out, c_in, kw = k.shape
    if x.shape[0] != c_in or b.shape[0] != c_out:
        raise ShapeError(f"conv1d channel mismatch: x {x.shape}, k {k.shape}, b {b.shape}")
    if stride < 1:
        raise ContractError(f"conv1d stride must be >= 1, got {stride}")
    t = x.shape[1]
    if t < kw:
        raise GeometryError(f"conv1d input length {t} shorter than kernel {kw}")
    win = np.lib.stride_tricks.sliding_window_view(x.data, kw, axis=1)[:, ::stride, :]
    y = np.einsum("oci,cti->ot", k.data, win, optimize=True) + b.data[:, None]
    t_out = y.shape[1]

    def backward(gy):
        gb = gy.sum(axis=1)
        gk = np.einsum("ot,cti->oci", gy, win, optimize=True)
        gx = np.zeros_like(x.data)
        cols = stride * np.arange(t_out)
        for j in range(kw):
            gx[:, cols + j] += np.einsum("ot,oc->ct", gy, k.data[:, :, j], optimize=True)
        return gx, gk, gb

    return _emit(y, "conv1d", (x, k, b), backward)


def maxpool1d(x, window: int, stride: int) -> Tensor:
    """Per-channel sliding max over x [C,T]; gradient goes to the first argmax."""
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError(f"maxpool1d expects x [C,T], got {x.shape}")
    if window < 1 or stride < 1:
        raise ContractError(f"maxpool1d window/stride must be >= 1, got {window}/{stride}")
    c, t = x.shape
    if t < window:
        raise GeometryError(f"maxpool1d input length {t} shorter than window {window}")
    win = np.lib.stride_tricks.sliding_window_view(x.data, window, axis=1)[:, ::stride, :]
    arg = np.argmax(win, axis=2)  # first max -> lowest-index tie break
    y = np.take_along_axis(win, arg[:, :, None], axis=2)[:, :, 0]
    kink = _gap_to_second(win, axis=2) if window > 1 else math.inf

    def backward(gy):
        gx = np.zeros_like(x.data)
        t_out = gy.shape[1]
        rows = np.repeat(np.arange(c), t_out)
        cols = (stride * np.tile(np.arange(t_out), c)) + arg.ravel()
        np.add.at(gx, (rows, cols), gy.ravel())
        return (gx,)

    return _emit(y, "maxpool1d", (x,), backward, kink=kink)


def relu(x) -> Tensor:
    x = as_tensor(x)
    y = np.maximum(x.data, 0.0)
    kink = float(np.min(np.abs(x.data))) if x.data.size else math.inf

    def backward(gy):
        return (gy * (x.data > 0.0),)

    return _emit(y, "relu", (x,), backward, kink=kink)


class BatchNormState:
    """Running statistics for one batch-norm layer (not learnable)."""

    def __init__(self, num_features: int):
        self.running_mean = np.zeros(num_features, dtype=_dtype)
        self.running_var = np.ones(num_features, dtype=_dtype)

    def copy(self) -> "BatchNormState":
        out = BatchNormState(self.running_mean.shape[0])
        out.running_mean = self.running_mean.copy()
        out.running_var = self.running_var.copy()
        return out


BN_EPS = 1e-5
BN_MOMENTUM = 0.9


def batchnorm(x, gamma, beta, state: BatchNormState, mode: str, update_stats: bool = True) -> Tensor:
    """Per-feature batch normalization of x [B,m].

    Train mode normalizes by batch statistics (biased variance) and folds them
    into the running estimates with momentum 0.9; infer mode uses the running
    estimates only. Train mode needs B >= 2.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.data.ndim != 2:
        raise ShapeError(f"batchnorm expects x [B,m], got {x.shape}")
    m = x.shape[1]
    if gamma.shape != (m,) or beta.shape != (m,):
        raise ShapeError(f"batchnorm gamma/beta must be [{m}], got {gamma.shape}, {beta.shape}")
    if mode not in ("train", "infer"):
        raise ContractError(f"batchnorm mode must be 'train' or 'infer', got {mode!r}")

    if mode == "train":
        batch = x.shape[0]
        if batch < 2:
            raise BatchSizeError(f"batchnorm train mode needs a batch of >= 2, got {batch}")
        mu = x.data.mean(axis=0)
        var = x.data.var(axis=0)
        inv = 1.0 / np.sqrt(var + BN_EPS)
        xhat = (x.data - mu) * inv
        if update_stats:
            state.running_mean[...] = BN_MOMENTUM * state.running_mean + (1.0 - BN_MOMENTUM) * mu
            state.running_var[...] = BN_MOMENTUM * state.running_var + (1.0 - BN_MOMENTUM) * var

        def backward(gy):
            ggamma = (gy * xhat).sum(axis=0)
            gbeta = gy.sum(axis=0)
            gxhat = gy * gamma.data
            gx = inv * (gxhat - gxhat.mean(axis=0) - xhat * (gxhat * xhat).mean(axis=0))
            return gx, ggamma, gbeta

    else:
        inv = 1.0 / np.sqrt(state.running_var + BN_EPS)
        xhat = (x.data - state.running_mean) * inv

        def backward(gy):
            ggamma = (gy * xhat).sum(axis=0)
            gbeta = gy.sum(axis=0)
            return gy * (gamma.data * inv), ggamma, gbeta

    y = gamma.data * xhat + beta.data
    return _emit(y, "batchnorm", (x, gamma, beta), backward)


# ---------------------------------------------------------------------------
# elementwise / structural ops
# ---------------------------------------------------------------------------


def _check_same_shape(op, a, b):
    if a.shape != b.shape:
        raise ShapeError(f"{op} needs matching shapes, got {a.shape} and {b.shape}")


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape("add", a, b)
    return _emit(a.data + b.data, "add", (a, b), lambda gy: (gy, gy))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape("sub", a, b)
    return _emit(a.data - b.data, "sub", (a, b), lambda gy: (gy, -gy))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape("mul", a, b)
    return _emit(a.data * b.data, "mul", (a, b), lambda gy: (gy * b.data, gy * a.data))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _emit(a.data * c, "scale", (a,), lambda gy: (gy * c,))


def sum_all(a) -> Tensor:
    """Sum of every element, as a rank-0 tensor."""
    a = as_tensor(a)

    def backward(gy):
        return (np.broadcast_to(gy, a.shape).astype(_dtype, copy=False),)

    return _emit(a.data.sum(), "sum_all", (a,), backward)


def add_n(tensors) -> Tensor:
    """Elementwise sum of one or more same-shape tensors."""
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ContractError("add_n needs at least one tensor")
    for t in ts[1:]:
        _check_same_shape("add_n", ts[0], t)
    out = ts[0].data.copy()
    for t in ts[1:]:
        out += t.data
    return _emit(out, "add_n", tuple(ts), lambda gy: tuple(gy for _ in ts))


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got {a.shape}")
    return _emit(a.data.T.copy(), "transpose", (a,), lambda gy: (gy.T,))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    new = a.data.reshape(shape)
    return _emit(new.copy(), "reshape", (a,), lambda gy: (gy.reshape(a.shape),))


def concat_rows(parts) -> Tensor:
    """Stack matrices [n_i, m] into one [sum n_i, m] matrix."""
    ps = [as_tensor(p) for p in parts]
    if not ps:
        raise ContractError("concat_rows needs at least one part")
    cols = ps[0].shape[1]
    for p in ps:
        if p.data.ndim != 2 or p.shape[1] != cols:
            raise ShapeError(f"concat_rows parts must share column count, got {[p.shape for p in ps]}")
    sizes = [p.shape[0] for p in ps]

    def backward(gy):
        grads = []
        at = 0
        for n in sizes:
            grads.append(gy[at : at + n])
            at += n
        return tuple(grads)

    return _emit(np.concatenate([p.data for p in ps], axis=0), "concat_rows", tuple(ps), backward)


def slice2d(a, r0: int, r1: int, c0: int, c1: int) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"slice2d expects a matrix, got {a.shape}")

    def backward(gy):
        gx = np.zeros_like(a.data)
        gx[r0:r1, c0:c1] = gy
        return (gx,)

    return _emit(a.data[r0:r1, c0:c1].copy(), "slice2d", (a,), backward)


def index_select(a, indices) -> Tensor:
    """Gather entries of a vector; backward scatter-adds."""
    a = as_tensor(a)
    if a.data.ndim != 1:
        raise ShapeError(f"index_select expects a vector, got {a.shape}")
    idx = np.asarray(indices, dtype=np.intp)

    def backward(gy):
        gx = np.zeros_like(a.data)
        np.add.at(gx, idx, gy)
        return (gx,)

    return _emit(a.data[idx].copy(), "index_select", (a,), backward)


def take2d(a, rows, cols) -> Tensor:
    """Gather a[rows[i], cols[i]] into a vector; backward scatter-adds."""
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"take2d expects a matrix, got {a.shape}")
    r = np.asarray(rows, dtype=np.intp)
    c = np.asarray(cols, dtype=np.intp)
    if r.shape != c.shape:
        raise ShapeError(f"take2d rows/cols must align, got {r.shape} and {c.shape}")

    def backward(gy):
        gx = np.zeros_like(a.data)
        np.add.at(gx, (r, c), gy)
        return (gx,)

    return _emit(a.data[r, c].copy(), "take2d", (a,), backward)


# ---------------------------------------------------------------------------
# similarity / pooling / hinge ops
# ---------------------------------------------------------------------------


def _row_normalize(x: np.ndarray):
    norms = np.sqrt((x * x).sum(axis=1))
    safe = np.where(norms == 0.0, 1.0, norms)
    return x / safe[:, None], norms


def cosine_matrix(a, b) -> Tensor:
    """All-pairs cosine similarity of row vectors: out[i,j] = cos(a_i, b_j).

    Zero-norm rows are treated as similarity 0 (with a warning); their
    gradient is defined as zero.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"cosine_matrix expects [n,d] and [m,d], got {a.shape} and {b.shape}")
    ahat, na = _row_normalize(a.data)
    bhat, nb = _row_normalize(b.data)
    if (na == 0.0).any() or (nb == 0.0).any():
        warnings.warn("cosine_matrix saw zero-norm rows; their similarity is 0", RuntimeWarning)
    out = ahat @ bhat.T

    def backward(gy):
        ga_hat = gy @ bhat
        gb_hat = gy.T @ ahat
        ga = ga_hat - ahat * (ga_hat * ahat).sum(axis=1, keepdims=True)
        gb = gb_hat - bhat * (gb_hat * bhat).sum(axis=1, keepdims=True)
        with np.errstate(invalid="ignore"):
            ga = np.where(na[:, None] == 0.0, 0.0, ga / np.where(na == 0.0, 1.0, na)[:, None])
            gb = np.where(nb[:, None] == 0.0, 0.0, gb / np.where(nb == 0.0, 1.0, nb)[:, None])
        return ga, gb

    return _emit(out, "cosine_matrix", (a, b), backward)


def scaled_logsumexp_cols(a, sharpness: float) -> Tensor:
    """Per column j: (1/s) * log sum_i exp(s * a[i,j]), computed max-shifted."""
    a = as_tensor(a)
    if a.data.ndim != 2 or a.shape[0] < 1:
        raise ShapeError(f"scaled_logsumexp_cols expects a nonempty [n,m] matrix, got {a.shape}")
    s = float(sharpness)
    if s <= 0.0:
        raise ContractError(f"sharpness must be > 0, got {s}")
    top = a.data.max(axis=0)
    ex = np.exp(s * (a.data - top))
    z = ex.sum(axis=0)
    y = top + np.log(z) / s
    soft = ex / z

    def backward(gy):
        return (soft * gy,)

    return _emit(y, "scaled_logsumexp_cols", (a,), backward)


def mean_cols(a) -> Tensor:
    """Column means of a matrix (the average-pooling ablation of relevance)."""
    a = as_tensor(a)
    if a.data.ndim != 2 or a.shape[0] < 1:
        raise ShapeError(f"mean_cols expects a nonempty [n,m] matrix, got {a.shape}")
    n = a.shape[0]

    def backward(gy):
        return (np.broadcast_to(gy / n, a.shape).astype(_dtype, copy=False).copy(),)

    return _emit(a.data.mean(axis=0), "mean_cols", (a,), backward)


def pairwise_hinge(pos, neg, margin: float) -> Tensor:
    """out[p,n] = max(0, margin - pos[p] + neg[n]) for vectors pos, neg."""
    pos, neg = as_tensor(pos), as_tensor(neg)
    if pos.data.ndim != 1 or neg.data.ndim != 1:
        raise ShapeError(f"pairwise_hinge expects vectors, got {pos.shape} and {neg.shape}")
    m = float(margin)
    if m < 0.0:
        raise ContractError(f"hinge margin must be >= 0, got {m}")
    arg = m - pos.data[:, None] + neg.data[None, :]
    out = np.maximum(arg, 0.0)
    kink = float(np.min(np.abs(arg))) if arg.size else math.inf

    def backward(gy):
        mask = gy * (arg > 0.0)
        return -mask.sum(axis=1), mask.sum(axis=0)

    return _emit(out, "pairwise_hinge", (pos, neg), backward, kink=kink)


# ---------------------------------------------------------------------------
# reverse pass and gradient checking
# ---------------------------------------------------------------------------


def backward(tape: ComputeTape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(param) into every Parameter reached from ``loss``.

    Walks the tape once in reverse record order. Repeated calls without a grad
    reset keep accumulating (two identical calls double every gradient).
    """
    if not isinstance(loss, Tensor) or loss.data.shape != ():
        got = getattr(loss, "shape", type(loss))
        raise ContractError(f"backward needs a scalar loss tensor, got {got}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=_dtype)}
    for node in reversed(tape.nodes):
        gy = grads.pop(id(node), None)
        if gy is None or node._backward is None:
            continue
        for inp, gi in zip(node._inputs, node._backward(gy)):
            if gi is None:
                continue
            if inp._param is not None:
                inp._param.grad += gi
            else:
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi


def analytic_gradient(build_loss, params) -> list[np.ndarray]:
    """Tape gradients of a deterministic scalar loss, aligned with ``params``."""
    for p in params:
        p.zero_grad()
    with ComputeTape() as tape:
        loss = as_tensor(build_loss())
    if not math.isfinite(loss.item()):
        raise NumericError("loss is not finite")
    backward(tape, loss)
    return [p.grad.copy() for p in params]


def numeric_gradient(build_loss, params, epsilon: float) -> list[np.ndarray]:
    """Central-difference gradients of the loss, aligned with ``params``."""

    def eval_loss() -> float:
        value = as_tensor(build_loss()).item()
        if not math.isfinite(value):
            raise NumericError(f"loss is not finite: {value}")
        return value

    grads = []
    for p in params:
        flat = p.value.data.reshape(-1)
        out = np.zeros(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            hi = eval_loss()
            flat[i] = orig - epsilon
            lo = eval_loss()
            flat[i] = orig
            out[i] = (hi - lo) / (2.0 * epsilon)
        grads.append(out.reshape(p.value.data.shape))
    return grads


def max_relative_error(analytic, numeric) -> float:
    """max over entries of |analytic - numeric| / max(1, |numeric|)."""
    worst = 0.0
    for a, n in zip(analytic, numeric):
        err = np.abs(np.asarray(a, dtype=np.float64) - n) / np.maximum(1.0, np.abs(n))
        if err.size and float(err.max()) > worst:
            worst = float(err.max())
    return worst


def grad_check(build_loss, params, epsilon: float) -> float:
    """Max relative error between tape gradients and central finite differences.

    ``build_loss`` must be a deterministic zero-argument callable returning the
    scalar loss for the current parameter values. The error for each entry is
    |analytic - numeric| / max(1, |numeric|).
    """
    analytic = analytic_gradient(build_loss, params)
    numeric = numeric_gradient(build_loss, params, epsilon)
    return max_relative_error(analytic, numeric)


def kink_distance(build_loss) -> float:
    """Distance from the loss computation's current inputs to its nearest kink."""
    with ComputeTape() as tape:
        build_loss()
    return tape.min_kink()
