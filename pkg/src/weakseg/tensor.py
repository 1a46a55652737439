"""Dense float64 tensors with reverse-mode automatic differentiation.

Only the primitives needed by the segmentation network are provided.  Every
op returns a new :class:`Tensor`; each tensor remembers its parents and a
closure that pushes the output gradient back to them.  Tensors receive a
monotonically increasing creation id, so sorting the reachable nodes by id
gives a valid topological order (the graph's insertion order).

Spatial layout is channels-last: ``(Z, H, W, C)`` volumes, ``(kz, ky, kx,
Cin, Cout)`` kernels.
"""

from __future__ import annotations

import itertools
import struct
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError

_node_ids = itertools.count()

# Above this many im2col entries the convolution is evaluated in row chunks.
_IM2COL_LIMIT = 1 << 22


class Tensor:
    """A float64 array plus the bookkeeping needed for backpropagation."""

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward", "_id")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), op: str = "leaf"):
        arr = np.asarray(data, dtype=np.float64)
        if any(d <= 0 for d in arr.shape):
            raise DimensionError(f"tensor extents must be positive, got shape {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self.op = op
        self._parents = _parents
        self._backward: Callable[[np.ndarray], tuple] | None = None
        self._id = next(_node_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r})"

    def backward(self) -> None:
        backward(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], op: str, grad_fn) -> Tensor:
    out = Tensor(data, _parents=parents, op=op)
    if out.requires_grad:
        out._backward = grad_fn
    return out


def parameter(data) -> Tensor:
    """A trainable leaf."""
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


# --------------------------------------------------------------------------
# convolution


def _triple(value, name: str) -> tuple:
    if isinstance(value, int):
        return (value,) * 3
    value = tuple(value)
    if len(value) != 3:
        raise DimensionError(f"{name} needs one entry per spatial axis (z, y, x), got {value!r}")
    return value


def _normalize_pad(pad) -> tuple[tuple[int, int], ...]:
    if isinstance(pad, int):
        return ((pad, pad),) * 3
    pad = tuple(pad)
    if len(pad) != 3:
        raise DimensionError(f"pad needs one (lo, hi) pair per spatial axis, got {pad!r}")
    out = []
    for p in pad:
        lo, hi = (p, p) if isinstance(p, int) else tuple(p)
        if lo < 0 or hi < 0:
            raise DimensionError(f"negative padding {p!r}")
        out.append((int(lo), int(hi)))
    return tuple(out)


def conv_output_extent(n: int, k: int, lo: int, hi: int, stride: int) -> int:
    return (n + lo + hi - k) // stride + 1


def _conv_windows(xp: np.ndarray, kshape: tuple[int, int, int], stride, rows: slice | None = None):
    # (Zo, Ho, Wo, Cin, kz, ky, kx) strided view, optionally restricted to output rows
    win = sliding_window_view(xp, kshape, axis=(0, 1, 2))
    win = win[:: stride[0], :: stride[1], :: stride[2]]
    if rows is not None:
        win = win[:, rows]
    return win


def conv3d(x: Tensor, w: Tensor, pad=0, stride=1) -> Tensor:
    """Zero-padded 3D cross-correlation.

    ``x`` is ``(Z, H, W, Cin)`` and ``w`` is ``(kz, ky, kx, Cin, Cout)``.
    ``pad`` is an int or one ``(lo, hi)`` pair per axis; ``stride`` an int or
    one integer per axis.  Output extent per axis is
    ``(n + lo + hi - k) // stride + 1``.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if x.data.ndim != 4:
        raise DimensionError(f"conv3d input must be (Z, H, W, Cin), got shape {x.shape}")
    if w.data.ndim != 5:
        raise DimensionError(f"conv3d kernel must be (kz, ky, kx, Cin, Cout), got shape {w.shape}")
    pads = _normalize_pad(pad)
    strides = _triple(stride, "stride")
    if any(int(s) <= 0 for s in strides):
        raise DimensionError(f"strides must be positive, got {strides!r}")
    strides = tuple(int(s) for s in strides)
    if x.shape[3] != w.shape[3]:
        raise DimensionError(
            f"channel axis mismatch: input has {x.shape[3]} channels, kernel expects {w.shape[3]}"
        )
    kshape = w.shape[:3]
    for axis, name in enumerate("zyx"):
        padded = x.shape[axis] + pads[axis][0] + pads[axis][1]
        if kshape[axis] > padded:
            raise DimensionError(
                f"{name}-axis: kernel extent {kshape[axis]} exceeds padded input extent {padded}"
            )

    xp = np.pad(x.data, pads + ((0, 0),))
    wt = w.data.transpose(3, 0, 1, 2, 4)  # (Cin, kz, ky, kx, Cout), matches window order
    out_shape = tuple(
        conv_output_extent(x.shape[a], kshape[a], pads[a][0], pads[a][1], strides[a]) for a in range(3)
    )
    chunks = _row_chunks(out_shape, w.shape)
    out = np.empty(out_shape + (w.shape[4],))
    for rows in chunks:
        win = _conv_windows(xp, kshape, strides, rows)
        out[:, rows] = np.tensordot(win, wt, axes=4)

    def grad_fn(g):
        gw = np.zeros_like(wt)
        gxp = np.zeros_like(xp) if x.requires_grad else None
        for rows in chunks:
            win = _conv_windows(xp, kshape, strides, rows)
            grows = g[:, rows]
            if w.requires_grad:
                gw += np.tensordot(grows, win, axes=([0, 1, 2], [0, 1, 2])).transpose(1, 2, 3, 4, 0)
            if gxp is not None:
                _col2im_add(gxp, np.tensordot(grows, wt, axes=([3], [4])), kshape, strides, rows)
        gx = None
        if gxp is not None:
            gx = gxp[tuple(slice(lo, lo + n) for (lo, _), n in zip(pads, x.shape[:3]))]
        return gx, gw.transpose(1, 2, 3, 0, 4)

    return _make(out, (x, w), "conv3d", grad_fn)


def _row_chunks(out_shape, kernel_shape) -> list[slice]:
    zo, ho, wo = out_shape
    per_row = zo * wo * int(np.prod(kernel_shape[:4]))
    step = max(1, min(ho, _IM2COL_LIMIT // max(per_row, 1)))
    return [slice(r, min(r + step, ho)) for r in range(0, ho, step)]


def _col2im_add(gxp, gcol, kshape, strides, rows: slice) -> None:
    # gcol: (Zo, rows, Wo, Cin, kz, ky, kx); scatter each kernel tap back onto the padded input
    zo, nr, wo = gcol.shape[:3]
    sz, sy, sx = strides
    r0 = rows.start * sy
    for a in range(kshape[0]):
        for b in range(kshape[1]):
            for c in range(kshape[2]):
                gxp[
                    a : a + sz * (zo - 1) + 1 : sz,
                    r0 + b : r0 + b + sy * (nr - 1) + 1 : sy,
                    c : c + sx * (wo - 1) + 1 : sx,
                ] += gcol[:, :, :, :, a, b, c]


# --------------------------------------------------------------------------
# elementwise and structural primitives


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), "relu", lambda g: (g * mask,))


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"add needs equal shapes, got {a.shape} and {b.shape}")
    return _make(a.data + b.data, (a, b), "add", lambda g: (g, g))


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-channel bias ``(C,)`` to a channels-last tensor."""
    x, b = _as_tensor(x), _as_tensor(b)
    if b.data.ndim != 1 or b.shape[0] != x.shape[-1]:
        raise DimensionError(f"bias of shape {b.shape} does not match channel axis of {x.shape}")
    axes = tuple(range(x.data.ndim - 1))
    return _make(x.data + b.data, (x, b), "bias_add", lambda g: (g, g.sum(axis=axes)))


def concat_channels(*xs: Tensor) -> Tensor:
    xs = tuple(_as_tensor(x) for x in xs)
    if not xs:
        raise DimensionError("concat_channels needs at least one input")
    spatial = xs[0].shape[:-1]
    for x in xs[1:]:
        if x.shape[:-1] != spatial:
            raise DimensionError(f"concat_channels needs equal spatial shapes, got {spatial} and {x.shape[:-1]}")
    bounds = np.cumsum([0] + [x.shape[-1] for x in xs])

    def grad_fn(g):
        return tuple(g[..., lo:hi] for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _make(np.concatenate([x.data for x in xs], axis=-1), xs, "concat_channels", grad_fn)


def maxpool2d(x: Tensor, window: int = 2) -> Tensor:
    """2x2 max pooling over the H, W axes of a ``(..., H, W, C)`` tensor.

    Ties route the gradient to the lowest flat index inside the window.
    """
    x = _as_tensor(x)
    if window != 2:
        raise ContractError("only 2x2 pooling is supported")
    if x.data.ndim < 3:
        raise DimensionError(f"maxpool2d needs (..., H, W, C), got shape {x.shape}")
    *lead, h, w, c = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"maxpool2d needs even H and W, got H={h}, W={w}")
    blocks = x.data.reshape(*lead, h // 2, 2, w // 2, 2, c)
    n = len(lead)
    # window axes last, ordered (dy, dx) so flat window index = 2*dy + dx
    blocks = np.moveaxis(blocks, (n + 1, n + 3), (-2, -1)).reshape(*lead, h // 2, w // 2, c, 4)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def grad_fn(g):
        gb = np.zeros(blocks.shape)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gb = gb.reshape(*lead, h // 2, w // 2, c, 2, 2)
        gb = np.moveaxis(gb, (-2, -1), (n + 1, n + 3))
        return (gb.reshape(x.shape),)

    return _make(out, (x,), "maxpool2d", grad_fn)


def upsample2d_nearest(x: Tensor) -> Tensor:
    """Replicate every pixel of a ``(..., H, W, C)`` tensor into a 2x2 block."""
    x = _as_tensor(x)
    if x.data.ndim < 3:
        raise DimensionError(f"upsample2d_nearest needs (..., H, W, C), got shape {x.shape}")
    ax = x.data.ndim - 3
    out = np.repeat(np.repeat(x.data, 2, axis=ax), 2, axis=ax + 1)
    *lead, h, w, c = x.shape

    def grad_fn(g):
        return (g.reshape(*lead, h, 2, w, 2, c).sum(axis=(ax + 1, ax + 3)),)

    return _make(out, (x,), "upsample2d_nearest", grad_fn)


def softmax_channels(logits: Tensor) -> Tensor:
    logits = _as_tensor(logits)
    if logits.shape[-1] < 2:
        raise DimensionError("softmax_channels needs at least 2 channels")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _make(p, (logits,), "softmax_channels", grad_fn)


def log_softmax_channels(logits: Tensor) -> Tensor:
    logits = _as_tensor(logits)
    if logits.shape[-1] < 2:
        raise DimensionError("log_softmax_channels needs at least 2 channels")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    p = np.exp(out)

    def grad_fn(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _make(out, (logits,), "log_softmax_channels", grad_fn)


def clamp_min(x: Tensor, floor: float) -> Tensor:
    x = _as_tensor(x)
    keep = x.data > floor
    return _make(np.where(keep, x.data, floor), (x,), "clamp_min", lambda g: (g * keep,))


def log(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    return _make(np.log(x.data), (x,), "log", lambda g: (g / x.data,))


def mul(x: Tensor, other) -> Tensor:
    """Elementwise product; ``other`` may be a tensor or a constant array."""
    x = _as_tensor(x)
    if isinstance(other, Tensor):
        if other.shape != x.shape:
            raise DimensionError(f"mul needs equal shapes, got {x.shape} and {other.shape}")
        return _make(x.data * other.data, (x, other), "mul", lambda g: (g * other.data, g * x.data))
    const = np.asarray(other, dtype=np.float64)
    if const.shape not in ((), x.shape):
        raise DimensionError(f"mul constant of shape {const.shape} does not match {x.shape}")
    return _make(x.data * const, (x,), "mul", lambda g: (g * const,))


def sum_all(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    return _make(np.array(x.data.sum()), (x,), "sum", lambda g: (np.broadcast_to(g, x.shape),))


def mean_all(x: Tensor) -> Tensor:
    return mul(sum_all(x), 1.0 / _as_tensor(x).size)


def apply_primitive(kind: str, *inputs: Tensor) -> Tensor:
    """Dispatch ``relu``, ``add`` or ``concat_channels`` by name."""
    if kind == "relu":
        if len(inputs) != 1:
            raise ContractError("relu takes exactly one input")
        return relu(inputs[0])
    if kind == "add":
        if len(inputs) != 2:
            raise ContractError("add takes exactly two inputs")
        return add(*inputs)
    if kind == "concat_channels":
        return concat_channels(*inputs)
    raise ContractError(f"unknown primitive {kind!r}")


# --------------------------------------------------------------------------
# differentiation


def graph_nodes(loss: Tensor) -> list[Tensor]:
    """All nodes reachable from ``loss`` in insertion (topological) order."""
    seen: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        node = stack.pop()
        if node._id in seen:
            continue
        seen[node._id] = node
        stack.extend(node._parents)
    return [seen[i] for i in sorted(seen)]


def backward(loss: Tensor, params: Sequence[Tensor] | None = None) -> list[np.ndarray] | None:
    """Reverse-mode sweep from a scalar ``loss``.

    Leaves with ``requires_grad`` get their ``.grad`` set.  When ``params`` is
    given, their gradients are returned in order; parameters that do not
    influence ``loss`` get zeros.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {loss._id: np.ones(loss.shape)}
    nodes = graph_nodes(loss)
    for node in reversed(nodes):
        g = grads.pop(node._id, None) if node._backward is not None else grads.get(node._id)
        if g is None or node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent._id in grads:
                grads[parent._id] = grads[parent._id] + pg
            else:
                grads[parent._id] = np.array(pg, dtype=np.float64)
    for node in nodes:
        if node._backward is None and node.requires_grad:
            node.grad = grads.get(node._id, np.zeros(node.shape))
    if params is None:
        return None
    return [grads.get(p._id, np.zeros(p.shape)) for p in params]


def gradient_check(loss_fn: Callable[[], Tensor], param: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn`` must rebuild the graph from ``param`` on every call.  The
    error per entry is ``|a - n| / max(|a|, |n|, 1e-12)``.
    """
    if not eps > 0:
        raise ContractError(f"eps must be positive, got {eps!r}")
    (analytic,) = backward(loss_fn(), [param])
    numeric = np.zeros(param.shape)
    flat = param.data.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = loss_fn().item()
        flat[i] = orig - eps
        down = loss_fn().item()
        flat[i] = orig
        numeric.reshape(-1)[i] = (up - down) / (2 * eps)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-12)
    return float(np.max(np.abs(analytic - numeric) / denom))


# --------------------------------------------------------------------------
# serialization


def dump_array(arr: np.ndarray) -> bytes:
    """``shape: d0,d1,...`` header line followed by little-endian float64 data."""
    arr = np.asarray(arr, dtype="<f8", order="C")
    header = "shape: " + ",".join(str(d) for d in arr.shape) + "\n"
    return header.encode("ascii") + arr.tobytes(order="C")


def load_array(blob: bytes, name: str = "<tensor>") -> np.ndarray:
    nl = blob.find(b"\n")
    if nl < 0 or not blob.startswith(b"shape: "):
        raise OSError(f"{name}: missing shape header")
    text = blob[len(b"shape: ") : nl].decode("ascii").strip()
    try:
        shape = tuple(int(d) for d in text.split(",")) if text else ()
    except ValueError as exc:
        raise OSError(f"{name}: malformed shape header {text!r}") from exc
    payload = blob[nl + 1 :]
    expected = int(np.prod(shape)) * struct.calcsize("<d")
    if len(payload) != expected:
        raise OSError(f"{name}: expected {expected} data bytes for shape {shape}, found {len(payload)}")
    return np.frombuffer(payload, dtype="<f8").reshape(shape).astype(np.float64)


def stack_grads(grads: Iterable[Sequence[np.ndarray]]) -> list[np.ndarray]:
    """Sum per-sample gradient lists in the given order."""
    total = None
    for g in grads:
        total = [x.copy() for x in g] if total is None else [t + x for t, x in zip(total, g)]
    return total or []
