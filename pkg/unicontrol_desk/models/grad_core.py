"""
Grad Core - Reverse-mode differentiation over numpy arrays
Provides the tensor type, the recorded graph, the primitive set used by the
denoiser and control branch, and a finite-difference gradient checker.

Usage:
    with Graph() as graph:
        loss = mse(conv2d(x, w, b, pad=1), target)
    backward(graph, loss)
"""

import logging
from dataclasses import dataclass, field
from typing import (
    Callable,
    Dict,
    Iterator,
    List,
    Mapping,
    MutableMapping,
    Optional,
    Sequence,
    Set,
    Tuple,
    Union,
)

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from unicontrol_desk.models.errors import GraphError, NonFiniteError, ShapeError

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, float, Sequence[float]]
Backward = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]

_default_dtype: type = np.float32
"""
dtype for newly created tensors.

Toggled by the :class:`precision` context manager. Model state is 32-bit;
gradient checks and oracles switch to 64-bit.
"""


class precision:
    """
    Context manager that sets the dtype of tensors created inside it.

    Nesting is allowed; the previous dtype is restored on exit.

    >>> with precision(np.float64):
    ...     Tensor([1.0]).dtype
    dtype('float64')
    """

    def __init__(self, dtype: type) -> None:
        self.dtype = np.dtype(dtype).type
        self.prev: type = _default_dtype

    def __enter__(self) -> "precision":
        global _default_dtype
        self.prev = _default_dtype
        _default_dtype = self.dtype
        return self

    def __exit__(self, *exc: object) -> None:
        global _default_dtype
        _default_dtype = self.prev


def default_dtype() -> type:
    """Return the dtype new tensors are created with."""
    return _default_dtype


class Tensor:
    """
    Shaped array of reals with an optional gradient slot.

    Data is never mutated after construction; only ``grad`` is written, and
    only by :func:`backward` or :meth:`ParameterMap.zero_grad`.
    """

    __slots__ = ("data", "requires_grad", "grad", "_node")

    def __init__(self, data: ArrayLike, requires_grad: bool = False) -> None:
        self.data: np.ndarray = np.array(data, dtype=_default_dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._node: Optional["_Node"] = None

    @classmethod
    def leaf(cls, data: np.ndarray, requires_grad: bool = False) -> "Tensor":
        """Wrap an array as a leaf without copying or casting."""
        out = cls.__new__(cls)
        out.data = data
        out.requires_grad = requires_grad
        out.grad = None
        out._node = None
        return out

    @classmethod
    def _wrap(cls, data: np.ndarray, primitive: str) -> "Tensor":
        """Wrap a freshly computed primitive output, rejecting NaN and Inf."""
        if not np.all(np.isfinite(data)):
            raise NonFiniteError(f"{primitive} produced non-finite values")
        return cls.leaf(data)

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        """Return a copy of the data."""
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def with_grad(self, requires_grad: bool) -> "Tensor":
        """Return a leaf sharing this tensor's values with a new grad flag."""
        return Tensor.leaf(self.data, requires_grad)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"


@dataclass
class _Node:
    output: Tensor
    inputs: Tuple[Tensor, ...]
    backward: Backward
    primitive: str


_active_graphs: List["Graph"] = []


class Graph:
    """
    Ordered record of primitive applications.

    Primitives register on the innermost active graph when at least one of
    their inputs requires a gradient. Recording order is a topological
    order, so the reverse pass walks it backwards.
    """

    def __init__(self) -> None:
        self.nodes: List[_Node] = []
        self.leaves: Dict[int, Tensor] = {}
        self.consumed = False

    def __enter__(self) -> "Graph":
        _active_graphs.append(self)
        return self

    def __exit__(self, *exc: object) -> None:
        _active_graphs.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def reset(self) -> None:
        """Forget every recorded node so the graph can be reused."""
        for node in self.nodes:
            node.output._node = None
        self.nodes.clear()
        self.leaves.clear()
        self.consumed = False

    def record(self, output: Tensor, inputs: Tuple[Tensor, ...], fn: Backward, primitive: str) -> None:
        node = _Node(output, inputs, fn, primitive)
        output._node = node
        output.requires_grad = True
        for tensor in inputs:
            if tensor.requires_grad and tensor.is_leaf:
                self.leaves.setdefault(id(tensor), tensor)
        self.nodes.append(node)


def active_graph() -> Optional[Graph]:
    return _active_graphs[-1] if _active_graphs else None


def _register(
    data: np.ndarray, inputs: Tuple[Tensor, ...], fn: Backward, primitive: str
) -> Tensor:
    out = Tensor._wrap(data, primitive)
    graph = active_graph()
    if graph is not None and any(t.requires_grad for t in inputs):
        graph.record(out, inputs, fn, primitive)
    return out


def backward(graph: Graph, loss: Tensor) -> None:
    """
    Fill the grad slot of every leaf recorded on ``graph``.

    Leaves reachable from ``loss`` receive d(loss)/d(leaf); recorded leaves
    that do not influence the loss receive exact zeros. Grad slots are
    overwritten, not accumulated.

    Raises:
        GraphError: loss is not a scalar, was not produced on this graph,
            or the graph was already consumed without reset()
    """
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if graph.consumed:
        raise GraphError("backward called twice on the same graph without reset()")
    if loss._node is None and id(loss) not in graph.leaves:
        if loss.requires_grad:
            loss.grad = np.ones_like(loss.data)
            graph.consumed = True
            return
        raise GraphError("loss was not recorded on this graph")
    graph.consumed = True

    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        upstream = grads.pop(id(node.output), None)
        if upstream is None:
            continue
        for tensor, g in zip(node.inputs, node.backward(upstream)):
            if g is None or not tensor.requires_grad:
                continue
            key = id(tensor)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = g

    for key, leaf in graph.leaves.items():
        g = grads.get(key)
        leaf.grad = np.zeros_like(leaf.data) if g is None else g.astype(leaf.data.dtype, copy=False)
    if loss.is_leaf and loss.requires_grad:
        loss.grad = np.ones_like(loss.data)


def _as_tensor(value: Union[Tensor, ArrayLike]) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ----------------------------------------------------------------------
# Primitives
# ----------------------------------------------------------------------


def conv2d(
    x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None, stride: int = 1, pad: int = 0
) -> Tensor:
    """
    2-D cross-correlation over NCHW input.

    Args:
        x: Input of shape (N, C, H, W)
        kernel: Weights of shape (O, C, kh, kw)
        bias: Optional bias of shape (O,)
        stride: Step between windows (>= 1)
        pad: Zero padding on every spatial side (>= 0)

    Returns:
        Tensor of shape (N, O, Ho, Wo)
    """
    if stride < 1 or pad < 0:
        raise ValueError(f"conv2d: stride must be >= 1 and pad >= 0, got {stride}, {pad}")
    if x.data.ndim != 4 or kernel.data.ndim != 4 or x.shape[1] != kernel.shape[1]:
        raise ShapeError("conv2d", x.shape, kernel.shape)
    if bias is not None and bias.shape != (kernel.shape[0],):
        raise ShapeError("conv2d", kernel.shape, bias.shape, detail="bias")
    n, c, h, w = x.shape
    o, _, kh, kw = kernel.shape
    if h + 2 * pad < kh or w + 2 * pad < kw:
        raise ShapeError("conv2d", x.shape, kernel.shape, detail="kernel larger than input")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = windows.shape[2], windows.shape[3]
    out = np.tensordot(windows, kernel.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data.reshape(1, o, 1, 1)
    out = np.ascontiguousarray(out, dtype=x.data.dtype)

    def _backward(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        gx = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    contrib = np.tensordot(g, kernel.data[:, :, i, j], axes=([1], [0]))
                    gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += (
                        contrib.transpose(0, 3, 1, 2)
                    )
            gx = gxp[:, :, pad : pad + h, pad : pad + w] if pad else gxp
        gk = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3])) if kernel.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        return gx, gk, gb

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return _register(out, inputs, _backward, "conv2d")


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map ``x @ weight.T + bias`` over the last axis; weight is (out, in)."""
    if weight.data.ndim != 2 or x.shape[-1:] != weight.shape[1:]:
        raise ShapeError("linear", x.shape, weight.shape)
    if bias is not None and bias.shape != weight.shape[:1]:
        raise ShapeError("linear", weight.shape, bias.shape, detail="bias")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def _backward(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        flat_g = g.reshape(-1, weight.shape[0])
        flat_x = x.data.reshape(-1, weight.shape[1])
        gx = g @ weight.data if x.requires_grad else None
        gw = flat_g.T @ flat_x if weight.requires_grad else None
        gb = flat_g.sum(axis=0) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _register(np.asarray(out, dtype=x.data.dtype), inputs, _backward, "linear")


def silu(x: Tensor) -> Tensor:
    """x * sigmoid(x)."""
    sig = expit(x.data)
    out = x.data * sig

    def _backward(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return (g * (sig * (1 + x.data * (1 - sig))),)

    return _register(out, (x,), _backward, "silu")


def channel_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """
    Per-sample, per-channel normalization over the spatial axes.

    Args:
        x: Input of shape (N, C, H, W)
        gamma: Learned scale of shape (C,)
        beta: Learned shift of shape (C,)
        eps: Variance floor

    Returns:
        gamma * (x - mean) / sqrt(var + eps) + beta
    """
    if x.data.ndim != 4 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError("channel_norm", x.shape, gamma.shape, beta.shape)
    mean = x.data.mean(axis=(2, 3), keepdims=True)
    centered = x.data - mean
    var = (centered * centered).mean(axis=(2, 3), keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    c = x.shape[1]
    out = xhat * gamma.data.reshape(1, c, 1, 1) + beta.data.reshape(1, c, 1, 1)
    m = x.shape[2] * x.shape[3]

    def _backward(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data.reshape(1, c, 1, 1)
            sum_g = gxhat.sum(axis=(2, 3), keepdims=True)
            sum_gx = (gxhat * xhat).sum(axis=(2, 3), keepdims=True)
            gx = (inv_std / m) * (m * gxhat - sum_g - xhat * sum_gx)
        ggamma = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        gbeta = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        return gx, ggamma, gbeta

    return _register(out.astype(x.data.dtype, copy=False), (x, gamma, beta), _backward, "channel_norm")


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum with numpy broadcasting."""
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError("add", a.shape, b.shape) from None

    def _backward(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(g, b.shape) if b.requires_grad else None,
        )

    return _register(out, (a, b), _backward, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError("mul", a.shape, b.shape) from None

    def _backward(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        )

    return _register(out, (a, b), _backward, "mul")


def upsample_nearest2x(x: Tensor) -> Tensor:
    """Repeat every pixel into a 2x2 block."""
    if x.data.ndim != 4:
        raise ShapeError("upsample_nearest2x", x.shape, "(N, C, H, W)")
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)
    n, c, h, w = x.shape

    def _backward(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _register(out, (x,), _backward, "upsample_nearest2x")


def avgpool2x(x: Tensor) -> Tensor:
    """Mean over non-overlapping 2x2 blocks; spatial extents must be even."""
    if x.data.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeError("avgpool2x", x.shape, "(N, C, even H, even W)")
    n, c, h, w = x.shape
    out = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def _backward(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return (g.repeat(2, axis=2).repeat(2, axis=3) * 0.25,)

    return _register(out.astype(x.data.dtype, copy=False), (x,), _backward, "avgpool2x")


def mse(x: Tensor, y: Tensor) -> Tensor:
    """Mean squared error over all elements; returns a scalar tensor."""
    if x.shape != y.shape:
        raise ShapeError("mse", x.shape, y.shape)
    diff = x.data - y.data
    out = np.asarray((diff * diff).mean(), dtype=x.data.dtype)
    scale = 2.0 / diff.size

    def _backward(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        gd = diff * (scale * g)
        return (gd if x.requires_grad else None, -gd if y.requires_grad else None)

    return _register(out, (x, y), _backward, "mse")


def sum_all(x: Tensor) -> Tensor:
    """Sum of every element as a scalar tensor."""
    out = np.asarray(x.data.sum(), dtype=x.data.dtype)

    def _backward(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return (np.broadcast_to(g, x.shape).astype(x.data.dtype),)

    return _register(out, (x,), _backward, "sum_all")


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Join tensors along ``axis``."""
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concat", *[t.shape for t in tensors]) from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def _backward(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return tuple(np.split(g, bounds, axis=axis))

    return _register(out, tuple(tensors), _backward, "concat")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    """View ``x`` with a new shape of equal size."""
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError("reshape", x.shape, tuple(shape)) from None

    def _backward(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return (g.reshape(x.shape),)

    return _register(out, (x,), _backward, "reshape")


# ----------------------------------------------------------------------
# Parameter containers
# ----------------------------------------------------------------------


class ParameterMap(MutableMapping[str, Tensor]):
    """
    Ordered name -> Tensor mapping of model parameters.

    Frozen names hold tensors with ``requires_grad=False``; every other
    entry is trainable.
    """

    def __init__(self, tensors: Optional[Mapping[str, Tensor]] = None) -> None:
        self._tensors: Dict[str, Tensor] = {}
        self.frozen: Set[str] = set()
        for name, tensor in (tensors or {}).items():
            self[name] = tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __setitem__(self, name: str, tensor: Tensor) -> None:
        self._tensors[name] = tensor.with_grad(name not in self.frozen)

    def __delitem__(self, name: str) -> None:
        del self._tensors[name]
        self.frozen.discard(name)

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray], frozen: Sequence[str] = ()) -> "ParameterMap":
        params = cls()
        params.frozen.update(frozen)
        for name, array in arrays.items():
            params[name] = Tensor(array)
        return params

    @classmethod
    def wrap(cls, tensors: Mapping[str, Tensor]) -> "ParameterMap":
        """
        View over existing tensors without re-wrapping them.

        Tensor identity is kept so gradients written by backward() land on
        the caller's objects. Tensors without requires_grad count as frozen.
        """
        out = cls()
        for name, tensor in tensors.items():
            out._tensors[name] = tensor
            if not tensor.requires_grad:
                out.frozen.add(name)
        return out

    def assign(self, name: str, array: np.ndarray) -> None:
        """Replace the values of ``name`` with a fresh leaf over ``array``."""
        current = self._tensors[name]
        if array.shape != current.data.shape:
            raise ShapeError("assign", current.data.shape, array.shape, detail=name)
        self._tensors[name] = Tensor.leaf(array.astype(current.data.dtype, copy=False), name not in self.frozen)

    def trainable(self) -> List[str]:
        return [name for name in self._tensors if name not in self.frozen]

    def freeze(self, names: Sequence[str]) -> None:
        for name in names:
            self.frozen.add(name)
            self._tensors[name] = self._tensors[name].with_grad(False)

    def unfreeze(self, names: Sequence[str]) -> None:
        for name in names:
            self.frozen.discard(name)
            self._tensors[name] = self._tensors[name].with_grad(True)

    def zero_grad(self) -> None:
        """Clear every grad slot; tensors left off the next graph keep ``None``."""
        for tensor in self._tensors.values():
            tensor.grad = None

    def subset(self, prefix: str, strip: bool = True) -> "ParameterMap":
        """Entries whose names start with ``prefix``; tensors are shared."""
        out = ParameterMap()
        for name, tensor in self._tensors.items():
            if name.startswith(prefix):
                key = name[len(prefix) :] if strip else name
                out._tensors[key] = tensor
                if name in self.frozen:
                    out.frozen.add(key)
        return out

    def copy(self) -> "ParameterMap":
        """Shallow copy: new mapping and fresh leaves over the same arrays."""
        out = ParameterMap()
        out.frozen = set(self.frozen)
        for name, tensor in self._tensors.items():
            out[name] = tensor
        return out

    def arrays(self) -> Dict[str, np.ndarray]:
        return {name: tensor.data for name, tensor in self._tensors.items()}

    def count(self) -> int:
        return int(sum(tensor.data.size for tensor in self._tensors.values()))


# ----------------------------------------------------------------------
# Gradient check
# ----------------------------------------------------------------------

LossFn = Callable[[Mapping[str, Tensor]], Tensor]
Builder = Callable[[int], Tuple[Mapping[str, Tensor], LossFn]]


@dataclass(frozen=True)
class GradcheckEntry:
    name: str
    shape: Tuple[int, ...]
    checked: int
    rel_error: float


@dataclass
class GradcheckReport:
    """Per-parameter relative errors of analytic vs central-difference gradients."""

    title: str
    tolerance: float
    entries: List[GradcheckEntry] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(entry.rel_error < self.tolerance for entry in self.entries)

    @property
    def worst(self) -> float:
        return max((entry.rel_error for entry in self.entries), default=0.0)

    def names(self) -> List[str]:
        return [entry.name for entry in self.entries]

    def to_text(self) -> str:
        lines = [f"# {self.title}\ttolerance={self.tolerance!r}"]
        for entry in self.entries:
            status = "ok" if entry.rel_error < self.tolerance else "FAIL"
            extents = "x".join(str(e) for e in entry.shape) or "scalar"
            lines.append(f"{entry.name}\t{extents}\t{entry.checked}\t{entry.rel_error!r}\t{status}")
        return "\n".join(lines) + "\n"


def gradcheck(
    builder: Builder,
    seed: int,
    step: float = 1e-3,
    tolerance: float = 1e-4,
    max_entries: Optional[int] = None,
    floor: float = 1e-7,
    title: str = "gradcheck",
) -> GradcheckReport:
    """
    Compare analytic gradients with central finite differences in 64-bit.

    Args:
        builder: Called with ``seed``; returns (parameters, loss_fn) where
            loss_fn maps a parameter mapping to a scalar tensor
        seed: Seed handed to the builder and used for coordinate sampling
        step: Finite-difference step h
        tolerance: Relative error under which an entry passes
        max_entries: Coordinates checked per tensor (None checks all)
        floor: Denominator floor so exactly-zero gradients compare cleanly
        title: Report heading

    Returns:
        GradcheckReport listing every parameter that requires a gradient
    """
    report = GradcheckReport(title=title, tolerance=tolerance)
    with precision(np.float64):
        raw_params, loss_fn = builder(seed)
        params: Dict[str, Tensor] = {
            name: Tensor(t.data, requires_grad=t.requires_grad) for name, t in raw_params.items()
        }
        with Graph() as graph:
            loss = loss_fn(params)
        backward(graph, loss)

        picker = np.random.default_rng(seed)
        for name, tensor in params.items():
            if not tensor.requires_grad:
                continue
            analytic_full = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
            size = tensor.data.size
            if max_entries is None or max_entries >= size:
                coords = np.arange(size)
            else:
                coords = np.sort(picker.choice(size, size=max_entries, replace=False))
            numeric = np.empty(len(coords))
            for slot, flat in enumerate(coords):
                numeric[slot] = _central_difference(loss_fn, params, name, int(flat), step)
            analytic = analytic_full.reshape(-1)[coords]
            denom = max(float(np.linalg.norm(analytic) + np.linalg.norm(numeric)), floor)
            rel = float(np.linalg.norm(analytic - numeric)) / denom
            report.entries.append(GradcheckEntry(name, tensor.shape, len(coords), rel))
            logger.debug("gradcheck %s: rel error %.3e over %d coords", name, rel, len(coords))
    return report


def _central_difference(
    loss_fn: LossFn, params: Mapping[str, Tensor], name: str, flat: int, step: float
) -> float:
    base = params[name].data
    values = []
    for delta in (step, -step):
        shifted = base.copy()
        shifted.reshape(-1)[flat] += delta
        trial = dict(params)
        trial[name] = Tensor(shifted)
        values.append(loss_fn(trial).item())
    return (values[0] - values[1]) / (2.0 * step)
