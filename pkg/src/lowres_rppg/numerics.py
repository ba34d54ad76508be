"""Double-precision tensors with tape-based reverse-mode differentiation.

A :class:`Graph` records every operation applied to tensors that belong to
it.  Parameters enter a graph through :meth:`Graph.param`; plain tensors
created with ``Tensor(data)`` are constants and carry no graph.  Operations
mixing constants and graph tensors record onto the graph of the latter.

Broadcasting is deliberately absent except for scalar-times-tensor; use
:func:`reshape` / :func:`mean_axes` to line shapes up explicitly.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, ContractViolation, NumericError

Array = np.ndarray
VJP = Callable[[Array], Sequence[Optional[Array]]]


def _frozen(arr: Array) -> Array:
    arr.flags.writeable = False
    return arr


class Tensor:
    """An immutable float64 array, optionally a node of a :class:`Graph`."""

    __slots__ = ("data", "graph", "node_id")

    def __init__(self, data, *, _graph: "Graph | None" = None, _node_id: int = -1,
                 _owned: bool = False):
        if _owned and isinstance(data, np.ndarray) and data.dtype == np.float64:
            arr = data
        else:
            arr = np.array(data, dtype=np.float64)
        self.data = _frozen(arr)
        self.graph = _graph
        self.node_id = _node_id

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def requires_grad(self) -> bool:
        return self.graph is not None

    def numpy(self) -> Array:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float("nan")

    def __repr__(self) -> str:
        tag = f", node={self.node_id}" if self.graph is not None else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other: float):
        if not isinstance(other, (int, float)):
            raise ContractViolation("tensor division is only defined by a scalar")
        return scale(self, 1.0 / float(other))


@dataclass
class Node:
    op: str
    inputs: tuple[int, ...]
    output: Tensor
    vjp: Optional[VJP] = None
    name: Optional[str] = None


@dataclass
class Graph:
    """Ordered record of operations; node ids are list positions."""

    nodes: list[Node] = field(default_factory=list)
    params: dict[str, int] = field(default_factory=dict)

    def param(self, name: str, data) -> Tensor:
        if name in self.params:
            raise ContractViolation(f"parameter {name!r} already registered")
        t = Tensor(data, _graph=self, _node_id=len(self.nodes))
        self.nodes.append(Node("param", (), t, None, name))
        self.params[name] = t.node_id
        return t

    def _record(self, op: str, inputs: Sequence[Tensor], out: Array, vjp: VJP) -> Tensor:
        t = Tensor(out, _graph=self, _node_id=len(self.nodes), _owned=True)
        self.nodes.append(Node(op, tuple(x.node_id if x.graph is self else -1 for x in inputs),
                               t, vjp))
        return t


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(op: str, inputs: Sequence[Tensor], out: Array, vjp: VJP) -> Tensor:
    graphs = {id(t.graph): t.graph for t in inputs if t.graph is not None}
    if not graphs:
        return Tensor(out, _owned=True)
    if len(graphs) > 1:
        raise ContractViolation(f"{op}: inputs belong to different graphs")
    (graph,) = graphs.values()
    return graph._record(op, inputs, out, vjp)


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ContractViolation(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# -- elementwise -----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("add", a, b)
    return _emit("add", (a, b), a.data + b.data, lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("sub", a, b)
    return _emit("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def mul(a, b) -> Tensor:
    """Elementwise product; one operand may be a 0-d scalar tensor."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape == b.shape:
        return _emit("mul", (a, b), a.data * b.data,
                     lambda g: (g * b.data, g * a.data))
    if a.ndim == 0 or b.ndim == 0:
        s, t = (a, b) if a.ndim == 0 else (b, a)

        def vjp(g):
            gs = np.asarray(np.sum(g * t.data))
            gt = g * s.data
            return (gs, gt) if a.ndim == 0 else (gt, gs)

        return _emit("mul", (a, b), a.data * b.data, vjp)
    raise ContractViolation(f"mul: shape mismatch {a.shape} vs {b.shape}")


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _emit("scale", (a,), a.data * c, lambda g: (g * c,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0.0
    return _emit("relu", (a,), np.where(pos, a.data, 0.0), lambda g: (g * pos,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _emit("sigmoid", (a,), s, lambda g: (g * s * (1.0 - s),))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _emit("square", (a,), a.data * a.data, lambda g: (2.0 * a.data * g,))


def sqrt(a) -> Tensor:
    """Square root; the gradient at exactly 0 is taken as 0."""
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise NumericError("sqrt of a negative value")
    r = np.sqrt(a.data)

    def vjp(g):
        with np.errstate(divide="ignore"):
            d = np.where(r > 0.0, 0.5 / np.where(r > 0.0, r, 1.0), 0.0)
        return (g * d,)

    return _emit("sqrt", (a,), r, vjp)


# -- reductions and shape ops ------------------------------------------------

def sum_all(a) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    return _emit("sum", (a,), np.asarray(np.sum(a.data)),
                 lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(a) -> Tensor:
    a = as_tensor(a)
    shape, n = a.shape, a.size
    return _emit("mean", (a,), np.asarray(np.sum(a.data) / n),
                 lambda g: (np.broadcast_to(g / n, shape).copy(),))


def mean_axes(a, axes: Sequence[int]) -> Tensor:
    """Mean over ``axes`` keeping them as length-1 dimensions."""
    a = as_tensor(a)
    axes = tuple(sorted(ax % a.ndim for ax in axes))
    n = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    shape = a.shape
    out = np.mean(a.data, axis=axes, keepdims=True) if axes else a.data.copy()
    return _emit("mean_axes", (a,), out,
                 lambda g: (np.broadcast_to(g / n, shape).copy(),))


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    try:
        out = a.data.reshape(tuple(shape)).copy()
    except ValueError as exc:
        raise ContractViolation(f"reshape: cannot view {src} as {tuple(shape)}") from exc
    return _emit("reshape", (a,), out, lambda g: (g.reshape(src),))


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ContractViolation(f"transpose: {axes} is not a permutation of {a.ndim} axes")
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))
    return _emit("transpose", (a,), out, lambda g: (np.ascontiguousarray(g.transpose(inv)),))


# -- 3-D convolution --------------------------------------------------------

def conv_output_extents(in_ext, k_ext, stride, padding) -> tuple[int, int, int]:
    return tuple((i + 2 * p - k) // s + 1 for i, k, s, p in zip(in_ext, k_ext, stride, padding))


def _windows(xp: Array, k_ext, stride, out_ext) -> Array:
    """View of shape [N, C, T', H', W', kT, kH, kW] over the padded input."""
    win = sliding_window_view(xp, k_ext, axis=(2, 3, 4))
    win = win[:, :, ::stride[0], ::stride[1], ::stride[2]]
    return win[:, :, :out_ext[0], :out_ext[1], :out_ext[2]]


def conv3d(x, w, b=None, stride=(1, 1, 1), padding=(0, 0, 0)) -> Tensor:
    """Cross-correlate x[N,C,T,H,W] with w[K,C,kT,kH,kW]; optional bias b[K]."""
    x, w = as_tensor(x), as_tensor(w)
    stride, padding = tuple(int(s) for s in stride), tuple(int(p) for p in padding)
    if x.ndim != 5:
        raise ContractViolation(f"conv3d: input must be 5-d [N,C,T,H,W], got {x.shape}")
    if w.ndim != 5:
        raise ContractViolation(f"conv3d: kernel must be 5-d [K,C,kT,kH,kW], got {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ContractViolation(
            f"conv3d: channel axis mismatch (input axis 1 has {x.shape[1]}, "
            f"kernel axis 1 has {w.shape[1]})")
    if len(stride) != 3 or len(padding) != 3 or min(stride) < 1 or min(padding) < 0:
        raise ConfigurationError(f"conv3d: bad stride {stride} or padding {padding}")
    k_ext = w.shape[2:]
    out_ext = conv_output_extents(x.shape[2:], k_ext, stride, padding)
    if min(out_ext) < 1:
        raise ConfigurationError(f"conv3d: non-positive output extent {out_ext}")
    if b is not None:
        b = as_tensor(b)
        if b.shape != (w.shape[0],):
            raise ContractViolation(f"conv3d: bias shape {b.shape} != ({w.shape[0]},)")

    pads = ((0, 0), (0, 0)) + tuple((p, p) for p in padding)
    xp = np.pad(x.data, pads) if any(padding) else x.data
    win = _windows(xp, k_ext, stride, out_ext)
    out = np.tensordot(win, w.data, axes=([1, 5, 6, 7], [1, 2, 3, 4]))
    out = np.ascontiguousarray(out.transpose(0, 4, 1, 2, 3))
    if b is not None:
        out += b.data.reshape(1, -1, 1, 1, 1)

    x_shape, xp_shape, w_data, x_data = x.shape, xp.shape, w.data, x.data

    def vjp(g):
        xp_ = np.pad(x_data, pads) if any(padding) else x_data
        win_ = _windows(xp_, k_ext, stride, out_ext)
        gw = np.tensordot(g, win_, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
        cols = np.tensordot(g, w_data, axes=([1], [0]))  # N T' H' W' C kT kH kW
        gxp = np.zeros(xp_shape)
        T_, H_, W_ = out_ext
        for a in range(k_ext[0]):
            for bb in range(k_ext[1]):
                for c in range(k_ext[2]):
                    gxp[:, :,
                        a:a + stride[0] * (T_ - 1) + 1:stride[0],
                        bb:bb + stride[1] * (H_ - 1) + 1:stride[1],
                        c:c + stride[2] * (W_ - 1) + 1:stride[2]] += \
                        cols[..., a, bb, c].transpose(0, 4, 1, 2, 3)
        gx = gxp[:, :,
                 padding[0]:padding[0] + x_shape[2],
                 padding[1]:padding[1] + x_shape[3],
                 padding[2]:padding[2] + x_shape[4]]
        grads = [np.ascontiguousarray(gx), gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3, 4)))
        return grads

    inputs = (x, w) if b is None else (x, w, b)
    return _emit("conv3d", inputs, out, vjp)


def conv3d_reference(x: Array, w: Array, b: Array | None = None,
                     stride=(1, 1, 1), padding=(0, 0, 0)) -> Array:
    """Direct nested-loop convolution; slow, used only as a test oracle."""
    N, C, T, H, W = x.shape
    K, _, kT, kH, kW = w.shape
    sT, sH, sW = stride
    pT, pH, pW = padding
    oT, oH, oW = conv_output_extents((T, H, W), (kT, kH, kW), stride, padding)
    out = np.zeros((N, K, oT, oH, oW))
    for n in range(N):
        for k in range(K):
            for t in range(oT):
                for i in range(oH):
                    for j in range(oW):
                        acc = 0.0 if b is None else float(b[k])
                        for c in range(C):
                            for a in range(kT):
                                tt = t * sT + a - pT
                                if not 0 <= tt < T:
                                    continue
                                for bb in range(kH):
                                    ii = i * sH + bb - pH
                                    if not 0 <= ii < H:
                                        continue
                                    for cc in range(kW):
                                        jj = j * sW + cc - pW
                                        if 0 <= jj < W:
                                            acc += w[k, c, a, bb, cc] * x[n, c, tt, ii, jj]
                        out[n, k, t, i, j] = acc
    return out


# -- differentiation --------------------------------------------------------

def backward(graph: Graph, loss: Tensor) -> dict[str, Array]:
    """Gradient of a scalar ``loss`` with respect to every parameter of ``graph``.

    Parameters the loss does not depend on get zero gradients.
    """
    if loss.graph is not graph:
        raise ContractViolation("backward: loss is not a node of this graph")
    if loss.size != 1:
        raise ContractViolation(f"backward: loss must be scalar, got shape {loss.shape}")
    grads: dict[int, Array] = {loss.node_id: np.ones(loss.shape)}
    for nid in range(loss.node_id, -1, -1):
        g = grads.pop(nid, None) if graph.nodes[nid].op != "param" else None
        node = graph.nodes[nid]
        if g is None or node.vjp is None:
            continue
        for src, gi in zip(node.inputs, node.vjp(g)):
            if src < 0 or gi is None:
                continue
            if src in grads:
                grads[src] = grads[src] + gi
            else:
                grads[src] = np.asarray(gi, dtype=np.float64)
    out = {}
    for name, nid in graph.params.items():
        shape = graph.nodes[nid].output.shape
        g = grads.get(nid)
        out[name] = np.zeros(shape) if g is None else g.reshape(shape)
    return out


def grad_check(fn: Callable[[Graph, Tensor], Tensor], point, eps: float = 1e-5) -> float:
    """Max relative discrepancy between analytic and central-difference gradients.

    ``fn(graph, x)`` must build a scalar from the parameter tensor ``x``.  The
    error per coordinate is ``|analytic - numeric| / max(1, |analytic|)``.
    """
    if eps <= 0:
        raise ConfigurationError("grad_check: eps must be positive")
    x0 = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)

    def value(x: Array) -> float:
        g = Graph()
        out = fn(g, g.param("x", x))
        v = float(np.asarray(out.data).reshape(-1)[0])
        if not np.isfinite(v):
            raise NumericError("grad_check: non-finite function value")
        return v

    g = Graph()
    out = fn(g, g.param("x", x0))
    if out.size != 1:
        raise ContractViolation("grad_check: fn must produce a scalar")
    analytic = backward(g, out)["x"]
    if not np.all(np.isfinite(analytic)):
        raise NumericError("grad_check: non-finite analytic gradient")
    worst = 0.0
    flat = x0.reshape(-1)
    for i in range(flat.size):
        xp, xm = flat.copy(), flat.copy()
        xp[i] += eps
        xm[i] -= eps
        num = (value(xp.reshape(x0.shape)) - value(xm.reshape(x0.shape))) / (2 * eps)
        a = analytic.reshape(-1)[i]
        worst = max(worst, abs(a - num) / max(1.0, abs(a)))
    return worst
