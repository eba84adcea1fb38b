"""Dense rank-4 tensors with a replayable tape for reverse-mode gradients.

Every value is a float64 numpy array in (n, c, h, w) layout. A `Graph` records
leaves (named parameters and constants) and `Op` applications in creation
order, which is a topological order by construction. `Graph.forward` replays
the whole tape, optionally passing every value through a transform (the
precision lab uses this to emulate binary16), and `backward` walks it in
reverse.

Typical use::

    g = Graph()
    x = g.parameter("x", np.ones((1, 2, 4, 4)))
    loss = total_sum(pointwise("sigmoid", x))
    report = backward(g, loss)
    report.grads["x"]  # 0.25 everywhere
"""

from __future__ import annotations

import logging
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field

import numpy as np

from gated_scd.errors import ContractError, ParameterError, ShapeError

logger = logging.getLogger(__name__)

Transform = Callable[[np.ndarray], np.ndarray]

SCALAR_SHAPE = (1, 1, 1, 1)


def as_tensor4(values, *, allow_nonfinite: bool = False) -> np.ndarray:
    """Validate and copy `values` into a contiguous float64 rank-4 array."""
    arr = np.array(values, dtype=np.float64, copy=True)
    if arr.ndim != 4:
        raise ShapeError(f"expected a rank-4 tensor, got shape {arr.shape}")
    if min(arr.shape) < 1:
        raise ShapeError(f"all dimensions must be >= 1, got {arr.shape}")
    if not allow_nonfinite and not np.all(np.isfinite(arr)):
        raise ParameterError("tensor contains non-finite values")
    return np.ascontiguousarray(arr)


# =============================================================================
# Tape
# =============================================================================


class Op:
    """Base class for differentiable operations.

    Subclasses implement `forward` over input arrays and `backward`, which maps
    the output gradient to one gradient per input (None for inputs that take no
    gradient). Anything `backward` needs from the forward pass is stored on the
    instance; one instance belongs to exactly one tape record.
    """

    kind = "op"

    def forward(self, *xs: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray, *xs: np.ndarray) -> Sequence[np.ndarray | None]:
        raise NotImplementedError


@dataclass
class _Record:
    op: Op | None
    inputs: tuple[int, ...] = ()
    value: np.ndarray | None = None
    data: np.ndarray | None = None  # leaf payload
    name: str | None = None  # set for parameter leaves


@dataclass(frozen=True)
class Node:
    """Handle to one record of a Graph."""

    graph: Graph
    index: int

    @property
    def value(self) -> np.ndarray:
        value = self.graph.records[self.index].value
        if value is None:
            raise ContractError(f"node {self.index} has not been evaluated")
        return value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def item(self) -> float:
        return float(self.value.reshape(-1)[0])

    def __add__(self, other: Node) -> Node:
        return self.graph.apply(Add(), self, other)

    def __sub__(self, other: Node) -> Node:
        return self.graph.apply(Sub(), self, other)

    def __mul__(self, other: Node | float) -> Node:
        if isinstance(other, Node):
            return self.graph.apply(Mul(), self, other)
        return self.graph.apply(Scale(float(other)), self)

    __rmul__ = __mul__


class Graph:
    """Recorded computation with named parameter leaves.

    A graph is single-owner. Leaves keep their own copy of the data, so the
    finite-difference checker can perturb entries in place and replay.
    """

    def __init__(self) -> None:
        self.records: list[_Record] = []
        self.parameters: dict[str, int] = {}
        self._transform: Transform | None = None

    def __len__(self) -> int:
        return len(self.records)

    def _leaf(self, data: np.ndarray, name: str | None) -> Node:
        value = self._transform(data) if self._transform else data
        self.records.append(_Record(op=None, value=value, data=data, name=name))
        return Node(self, len(self.records) - 1)

    def parameter(self, name: str, values) -> Node:
        """Register a learnable leaf. A name already registered returns its node."""
        if name in self.parameters:
            return Node(self, self.parameters[name])
        node = self._leaf(as_tensor4(values), name)
        self.parameters[name] = node.index
        return node

    def constant(self, values) -> Node:
        return self._leaf(as_tensor4(values), None)

    def apply(self, op: Op, *inputs: Node) -> Node:
        for node in inputs:
            if node.graph is not self:
                raise ContractError("input node belongs to another graph")
        value = op.forward(*(node.value for node in inputs))
        if self._transform:
            value = self._transform(value)
        self.records.append(_Record(op=op, inputs=tuple(n.index for n in inputs), value=value))
        return Node(self, len(self.records) - 1)

    def forward(self, transform: Transform | None = None) -> None:
        """Replay every record in order, refreshing cached values.

        The transform (if any) is applied to every leaf and op output and stays
        active for ops recorded afterwards.
        """
        self._transform = transform
        for rec in self.records:
            if rec.op is None:
                rec.value = transform(rec.data) if transform else rec.data
            else:
                value = rec.op.forward(*(self.records[i].value for i in rec.inputs))
                rec.value = transform(value) if transform else value

    def parameter_data(self, name: str) -> np.ndarray:
        return self.records[self.parameters[name]].data


@dataclass
class GradReport:
    """Gradients for every parameter leaf of one backward pass."""

    grads: dict[str, np.ndarray] = field(default_factory=dict)
    max_abs_grad: float = 0.0
    nonfinite_count: int = 0

    def global_norm(self) -> float:
        total = sum(float(np.sum(g * g)) for g in self.grads.values())
        return float(np.sqrt(total))


def backward(
    graph: Graph,
    loss: Node,
    *,
    seed: float = 1.0,
    transform: Transform | None = None,
) -> GradReport:
    """Reverse-mode accumulation from a scalar loss node.

    `seed` is the gradient injected at the loss (the precision lab passes its
    loss scale here) and `transform` is applied to every backward tensor.
    Parameters without a path to the loss get an exactly-zero gradient.
    """
    if loss.graph is not graph:
        raise ContractError("loss node belongs to another graph")
    if loss.value.shape != SCALAR_SHAPE:
        raise ContractError(f"loss must have shape {SCALAR_SHAPE}, got {loss.value.shape}")

    def _t(arr: np.ndarray) -> np.ndarray:
        return transform(arr) if transform else arr

    grads: list[np.ndarray | None] = [None] * len(graph.records)
    grads[loss.index] = _t(np.full(SCALAR_SHAPE, float(seed)))
    for i in range(loss.index, -1, -1):
        grad = grads[i]
        rec = graph.records[i]
        if grad is None or rec.op is None:
            continue
        input_values = [graph.records[j].value for j in rec.inputs]
        for j, g_in in zip(rec.inputs, rec.op.backward(grad, *input_values), strict=True):
            if g_in is None:
                continue
            g_in = _t(g_in)
            grads[j] = g_in if grads[j] is None else _t(grads[j] + g_in)

    report = GradReport()
    for name, idx in graph.parameters.items():
        g = grads[idx]
        report.grads[name] = np.zeros_like(graph.records[idx].data) if g is None else g
    if report.grads:
        with np.errstate(invalid="ignore"):
            report.nonfinite_count = int(
                sum(np.count_nonzero(~np.isfinite(g)) for g in report.grads.values())
            )
            report.max_abs_grad = float(max(np.max(np.abs(g)) for g in report.grads.values()))
    return report


def finite_diff_check(graph: Graph, loss: Node, eps: float = 1e-5) -> float:
    """Largest relative error between analytic and central-difference gradients.

    Every entry of every parameter is perturbed by ±eps and the tape replayed.
    The relative error uses max(|analytic|, |numeric|, 1e-8) as denominator.
    """
    if eps <= 0:
        raise ParameterError(f"eps must be > 0, got {eps}")
    graph.forward()
    analytic = backward(graph, loss).grads
    worst = 0.0
    for name in graph.parameters:
        data = graph.parameter_data(name)
        flat = data.reshape(-1)
        g_flat = analytic[name].reshape(-1)
        for k in range(flat.size):
            original = flat[k]
            flat[k] = original + eps
            graph.forward()
            f_plus = loss.item()
            flat[k] = original - eps
            graph.forward()
            f_minus = loss.item()
            flat[k] = original
            numeric = (f_plus - f_minus) / (2.0 * eps)
            denom = max(abs(g_flat[k]), abs(numeric), 1e-8)
            err = abs(g_flat[k] - numeric) / denom
            if err > worst:
                worst = err
                logger.debug("fd worst so far %.3e at %s[%d]", err, name, k)
    graph.forward()
    return worst


# =============================================================================
# Operations
# =============================================================================


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape, strict=True)) if s == 1 < g)
    return grad.sum(axis=axes, keepdims=True) if axes else grad


class Conv2d(Op):
    """Cross-correlation with zero padding; bias has shape (1, c_out, 1, 1)."""

    kind = "conv2d"

    def __init__(self, stride: int = 1, padding: int = 0) -> None:
        if stride < 1:
            raise ParameterError(f"stride must be >= 1, got {stride}")
        if padding < 0:
            raise ParameterError(f"padding must be >= 0, got {padding}")
        self.stride = stride
        self.padding = padding

    def _out_dims(self, x: np.ndarray, k: np.ndarray) -> tuple[int, int]:
        _, c, h, w = x.shape
        c_out, c_in, kh, kw = k.shape
        if c != c_in:
            raise ShapeError(f"conv2d: input has {c} channels, kernel expects {c_in}")
        oh = (h + 2 * self.padding - kh) // self.stride + 1
        ow = (w + 2 * self.padding - kw) // self.stride + 1
        if oh < 1 or ow < 1:
            raise ShapeError(f"conv2d: output would be {oh}x{ow} for input {h}x{w}")
        return oh, ow

    def forward(self, x, k, b):
        oh, ow = self._out_dims(x, k)
        c_out, _, kh, kw = k.shape
        if b.size != c_out:
            raise ShapeError(f"conv2d: bias has {b.size} values for {c_out} channels")
        p, s = self.padding, self.stride
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        out = np.zeros((x.shape[0], c_out, oh, ow))
        for u in range(kh):
            for v in range(kw):
                patch = xp[:, :, u : u + s * (oh - 1) + 1 : s, v : v + s * (ow - 1) + 1 : s]
                out += np.einsum("nchw,oc->nohw", patch, k[:, :, u, v])
        return out + b.reshape(1, c_out, 1, 1)

    def backward(self, grad, x, k, b):
        _, _, h, w = x.shape
        _, _, kh, kw = k.shape
        oh, ow = grad.shape[2:]
        p, s = self.padding, self.stride
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        dxp = np.zeros_like(xp)
        dk = np.zeros_like(k)
        for u in range(kh):
            for v in range(kw):
                rows = slice(u, u + s * (oh - 1) + 1, s)
                cols = slice(v, v + s * (ow - 1) + 1, s)
                dk[:, :, u, v] = np.einsum("nohw,nchw->oc", grad, xp[:, :, rows, cols])
                dxp[:, :, rows, cols] += np.einsum("nohw,oc->nchw", grad, k[:, :, u, v])
        dx = dxp[:, :, p : p + h, p : p + w]
        db = grad.sum(axis=(0, 2, 3)).reshape(b.shape)
        return dx, dk, db


def _interp_matrix(size: int, factor: int) -> np.ndarray:
    """Row i holds the bilinear weights of output position i (align_corners=False)."""
    out = size * factor
    mat = np.zeros((out, size))
    src = np.clip((np.arange(out) + 0.5) / factor - 0.5, 0.0, size - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, size - 1)
    frac = src - lo
    np.add.at(mat, (np.arange(out), lo), 1.0 - frac)
    np.add.at(mat, (np.arange(out), hi), frac)
    return mat


class Upsample(Op):
    kind = "bilinear_upsample"

    def __init__(self, factor: int) -> None:
        if factor < 2:
            raise ParameterError(f"upsample factor must be >= 2, got {factor}")
        self.factor = factor

    def forward(self, x):
        mh = _interp_matrix(x.shape[2], self.factor)
        mw = _interp_matrix(x.shape[3], self.factor)
        rows = np.einsum("oh,nchw->ncow", mh, x)
        return np.einsum("pw,ncow->ncop", mw, rows)

    def backward(self, grad, x):
        mh = _interp_matrix(x.shape[2], self.factor)
        mw = _interp_matrix(x.shape[3], self.factor)
        rows = np.einsum("pw,ncop->ncow", mw, grad)
        return (np.einsum("oh,ncow->nchw", mh, rows),)


class GlobalAvgPool(Op):
    kind = "global_avg_pool"

    def forward(self, x):
        return x.mean(axis=(2, 3), keepdims=True)

    def backward(self, grad, x):
        h, w = x.shape[2:]
        return (np.broadcast_to(grad / (h * w), x.shape).copy(),)


def _argmax_mask(x: np.ndarray, axis: int | tuple[int, int]) -> np.ndarray:
    """One-hot of the first maximum along `axis` (ties go to the lowest index)."""
    if isinstance(axis, tuple):
        n, c, h, w = x.shape
        flat = x.reshape(n, c, h * w)
        idx = flat.argmax(axis=2)
        mask = np.zeros_like(flat)
        np.put_along_axis(mask, idx[..., None], 1.0, axis=2)
        return mask.reshape(x.shape)
    idx = x.argmax(axis=axis)
    mask = np.zeros_like(x)
    np.put_along_axis(mask, np.expand_dims(idx, axis), 1.0, axis=axis)
    return mask


class GlobalMaxPool(Op):
    kind = "global_max_pool"

    def forward(self, x):
        return x.max(axis=(2, 3), keepdims=True)

    def backward(self, grad, x):
        return (_argmax_mask(x, (2, 3)) * grad,)


class ChannelMean(Op):
    kind = "channel_mean"

    def forward(self, x):
        return x.mean(axis=1, keepdims=True)

    def backward(self, grad, x):
        return (np.broadcast_to(grad / x.shape[1], x.shape).copy(),)


class ChannelMax(Op):
    kind = "channel_max"

    def forward(self, x):
        return x.max(axis=1, keepdims=True)

    def backward(self, grad, x):
        return (_argmax_mask(x, 1) * grad,)


def stable_sigmoid(x: np.ndarray) -> np.ndarray:
    """Logistic function without overflow; exactly 0.5 at 0."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def stable_softplus(x):
    """log(1 + e^x) as max(x, 0) + log1p(e^-|x|)."""
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


class Pointwise(Op):
    kinds = ("relu", "sigmoid", "abs")

    def __init__(self, kind: str) -> None:
        if kind not in self.kinds:
            raise ParameterError(f"unknown pointwise kind {kind!r}")
        self.kind = kind

    def forward(self, x):
        if self.kind == "relu":
            return np.maximum(x, 0.0)
        if self.kind == "sigmoid":
            return stable_sigmoid(x)
        return np.abs(x)

    def backward(self, grad, x):
        if self.kind == "relu":
            return (grad * (x > 0),)
        if self.kind == "sigmoid":
            s = stable_sigmoid(x)
            return (grad * s * (1.0 - s),)
        # sign(0) == 0
        return (grad * np.sign(x),)


class Softplus(Op):
    kind = "softplus"

    def forward(self, x):
        return stable_softplus(x)

    def backward(self, grad, x):
        return (grad * stable_sigmoid(x),)


class Concat(Op):
    kind = "concat_channels"

    def forward(self, *xs):
        ref = xs[0].shape
        for x in xs[1:]:
            if (x.shape[0], x.shape[2], x.shape[3]) != (ref[0], ref[2], ref[3]):
                raise ShapeError(f"concat: shape {x.shape} does not match {ref}")
        return np.concatenate(xs, axis=1)

    def backward(self, grad, *xs):
        bounds = np.cumsum([x.shape[1] for x in xs])[:-1]
        return tuple(np.split(grad, bounds, axis=1))


def _broadcast_check(a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"shapes {a.shape} and {b.shape} do not broadcast") from exc


class Add(Op):
    kind = "add"

    def forward(self, a, b):
        _broadcast_check(a, b)
        return a + b

    def backward(self, grad, a, b):
        return _unbroadcast(grad, a.shape), _unbroadcast(grad, b.shape)


class Sub(Op):
    kind = "sub"

    def forward(self, a, b):
        _broadcast_check(a, b)
        return a - b

    def backward(self, grad, a, b):
        return _unbroadcast(grad, a.shape), _unbroadcast(-grad, b.shape)


class Mul(Op):
    kind = "mul"

    def forward(self, a, b):
        _broadcast_check(a, b)
        return a * b

    def backward(self, grad, a, b):
        return _unbroadcast(grad * b, a.shape), _unbroadcast(grad * a, b.shape)


class Scale(Op):
    kind = "scale"

    def __init__(self, factor: float) -> None:
        self.factor = factor

    def forward(self, x):
        return x * self.factor

    def backward(self, grad, x):
        return (grad * self.factor,)


class AddScalar(Op):
    kind = "add_scalar"

    def __init__(self, offset: float) -> None:
        self.offset = offset

    def forward(self, x):
        return x + self.offset

    def backward(self, grad, x):
        return (grad,)


class Sum(Op):
    kind = "sum"

    def forward(self, x):
        return np.full(SCALAR_SHAPE, x.sum())

    def backward(self, grad, x):
        return (np.full(x.shape, grad.reshape(-1)[0]),)


class Mean(Op):
    kind = "mean"

    def forward(self, x):
        return np.full(SCALAR_SHAPE, x.mean())

    def backward(self, grad, x):
        return (np.full(x.shape, grad.reshape(-1)[0] / x.size),)


# =============================================================================
# Functional surface
# =============================================================================


def conv2d(x: Node, kernel: Node, bias: Node, stride: int = 1, padding: int = 0) -> Node:
    """Cross-correlation of x with kernel, plus a per-channel bias.

    Args:
        x: Input of shape (n, c_in, h, w)
        kernel: Weights of shape (c_out, c_in, kh, kw); not flipped
        bias: Per-channel offsets of shape (1, c_out, 1, 1)
        stride: Step between windows, >= 1
        padding: Zero border added on every side, >= 0

    Returns:
        Node of shape (n, c_out, (h + 2p - kh) // s + 1, (w + 2p - kw) // s + 1)
    """
    return x.graph.apply(Conv2d(stride, padding), x, kernel, bias)


def bilinear_upsample(x: Node, factor: int) -> Node:
    """Resize by an integer factor, half-pixel centres, edges clamped.

    Args:
        x: Input of shape (n, c, h, w)
        factor: Integer scale, >= 2

    Returns:
        Node of shape (n, c, h * factor, w * factor)
    """
    return x.graph.apply(Upsample(factor), x)


def global_avg_pool(x: Node) -> Node:
    """(n, c, h, w) -> (n, c, 1, 1) spatial mean."""
    return x.graph.apply(GlobalAvgPool(), x)


def global_max_pool(x: Node) -> Node:
    """(n, c, h, w) -> (n, c, 1, 1) spatial max; ties send the gradient to the first."""
    return x.graph.apply(GlobalMaxPool(), x)


def channel_mean(x: Node) -> Node:
    return x.graph.apply(ChannelMean(), x)


def channel_max(x: Node) -> Node:
    return x.graph.apply(ChannelMax(), x)


def pointwise(kind: str, x: Node) -> Node:
    """Elementwise activation.

    Args:
        kind: One of "relu", "sigmoid" or "abs"; relu and abs take
            derivative 0 at the kink
        x: Any Tensor4 node

    Returns:
        Node of the same shape as x
    """
    return x.graph.apply(Pointwise(kind), x)


def softplus(x: Node) -> Node:
    """ln(1 + e^x), overflow-free for large |x|."""
    return x.graph.apply(Softplus(), x)


def concat_channels(xs: Sequence[Node]) -> Node:
    """Stack nodes along the channel axis.

    Args:
        xs: Nodes agreeing in n, h and w

    Returns:
        The single input unchanged, or a node with the summed channel count

    Raises:
        ShapeError: If xs is empty or the non-channel dimensions disagree
    """
    if not xs:
        raise ShapeError("concat needs at least one input")
    if len(xs) == 1:
        return xs[0]
    return xs[0].graph.apply(Concat(), *xs)


def add_scalar(x: Node, offset: float) -> Node:
    return x.graph.apply(AddScalar(offset), x)


def total_sum(x: Node) -> Node:
    """Sum of every entry as a (1, 1, 1, 1) scalar node."""
    return x.graph.apply(Sum(), x)


def mean(x: Node) -> Node:
    return x.graph.apply(Mean(), x)
