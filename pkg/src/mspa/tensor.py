"""Dense float32 tensors with reverse-mode automatic differentiation.

Define-by-run: every differentiable op appends a backward closure to a
thread-local tape in execution order. ``backward()`` seeds the scalar loss
with gradient 1, walks the tape in reverse, and clears it. Tensors are plain
values; the tape is confined to the thread that built it.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np

MAX_RANK = 4
_EXP_CLAMP = 80.0  # exp(80) ~ 5.4e34 stays finite in float32
_LOG_FLOOR = 1e-12  # guards cross-entropy against log(0)
_SQRT_GUARD = 1e-12  # keeps d(sqrt)/dx finite at 0


class ShapeError(ValueError):
    """An operand shape violates the op's contract."""


class _TapeState(threading.local):
    def __init__(self):
        self.entries = []  # (output tensor, backward closure), execution order
        self.enabled = True


_state = _TapeState()


def tape_length() -> int:
    return len(_state.entries)


@contextmanager
def no_grad():
    """Disable gradient tracking; ops inside produce constant tensors."""
    prev = _state.enabled
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    """A dense float32 array plus an optional same-shape gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float32)
        if arr.ndim > MAX_RANK:
            raise ShapeError(f"rank {arr.ndim} exceeds the supported maximum of {MAX_RANK}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad) and _state.enabled

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Thin operator sugar; the module-level functions are the real API.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def sum(self, axes=None):
        return reduce_sum(self, axes)

    def mean(self, axes=None):
        return reduce_mean(self, axes)


def _wrap(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _record(out: Tensor, fn) -> None:
    if out.requires_grad:
        _state.entries.append((out, fn))


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True).reshape(t.data.shape)
    else:
        t.grad += g


def _fit(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the (scalar) operand shape."""
    if g.shape == shape:
        return g
    return np.sum(g, dtype=np.float32).reshape(shape)


def _check_binary(name: str, a: Tensor, b: Tensor) -> None:
    if a.data.shape == b.data.shape or a.data.size == 1 or b.data.size == 1:
        return
    for axis, (da, db) in enumerate(zip(a.data.shape, b.data.shape)):
        if da != db:
            raise ShapeError(
                f"{name}: axis {axis} has extents {da} vs {db} (shapes {a.shape} vs {b.shape})"
            )
    raise ShapeError(f"{name}: incompatible shapes {a.shape} vs {b.shape}")


def backward(loss: Tensor) -> None:
    """Populate grads of every requires_grad ancestor of a scalar loss.

    The tape is cleared whether or not the walk succeeds: any backward
    attempt ends the current define-by-run episode.
    """
    try:
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        entries = _state.entries
        loss.grad = np.ones_like(loss.data)
        for out, fn in reversed(entries):
            if out.grad is not None:
                fn(out.grad)
    finally:
        _state.entries = []


# ---------------------------------------------------------------------------
# elementwise ops


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_binary("add", a, b)
    out = Tensor(a.data + b.data, a.requires_grad or b.requires_grad)

    def _backward(g):
        if a.requires_grad:
            _accumulate(a, _fit(g, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _fit(g, b.data.shape))

    _record(out, _backward)
    return out


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_binary("sub", a, b)
    out = Tensor(a.data - b.data, a.requires_grad or b.requires_grad)

    def _backward(g):
        if a.requires_grad:
            _accumulate(a, _fit(g, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _fit(-g, b.data.shape))

    _record(out, _backward)
    return out


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_binary("mul", a, b)
    ad, bd = a.data, b.data
    out = Tensor(ad * bd, a.requires_grad or b.requires_grad)

    def _backward(g):
        if a.requires_grad:
            _accumulate(a, _fit(g * bd, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _fit(g * ad, b.data.shape))

    _record(out, _backward)
    return out


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_binary("div", a, b)
    ad, bd = a.data, b.data
    out = Tensor(ad / bd, a.requires_grad or b.requires_grad)

    def _backward(g):
        if a.requires_grad:
            _accumulate(a, _fit(g / bd, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _fit(-g * ad / (bd * bd), b.data.shape))

    _record(out, _backward)
    return out


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    out = Tensor(a.data * np.float32(s), a.requires_grad)

    def _backward(g):
        _accumulate(a, g * np.float32(s))

    _record(out, _backward)
    return out


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0.0), a.requires_grad)
    mask = a.data > 0

    def _backward(g):
        _accumulate(a, g * mask)

    _record(out, _backward)
    return out


def exp(a: Tensor) -> Tensor:
    clamped = np.minimum(a.data, _EXP_CLAMP)
    out = Tensor(np.exp(clamped), a.requires_grad)
    in_range = a.data <= _EXP_CLAMP

    def _backward(g):
        _accumulate(a, g * out.data * in_range)

    _record(out, _backward)
    return out


def log(a: Tensor) -> Tensor:
    """Natural log of max(x, 1e-12); gradient is zero where the floor bites."""
    floored = np.maximum(a.data, _LOG_FLOOR)
    out = Tensor(np.log(floored), a.requires_grad)
    in_range = a.data >= _LOG_FLOOR

    def _backward(g):
        _accumulate(a, g * in_range / floored)

    _record(out, _backward)
    return out


def absolute(a: Tensor) -> Tensor:
    out = Tensor(np.abs(a.data), a.requires_grad)
    sign = np.sign(a.data)

    def _backward(g):
        _accumulate(a, g * sign)

    _record(out, _backward)
    return out


def square(a: Tensor) -> Tensor:
    out = Tensor(a.data * a.data, a.requires_grad)

    def _backward(g):
        _accumulate(a, g * np.float32(2.0) * a.data)

    _record(out, _backward)
    return out


def sqrt(a: Tensor) -> Tensor:
    """Square root of max(x, 0) with the derivative guarded near 0."""
    out = Tensor(np.sqrt(np.maximum(a.data, 0.0)), a.requires_grad)
    positive = a.data > 0

    def _backward(g):
        _accumulate(a, g * positive * np.float32(0.5) / np.maximum(out.data, _SQRT_GUARD))

    _record(out, _backward)
    return out


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    out = Tensor(np.clip(a.data, lo, hi), a.requires_grad)
    inside = (a.data >= lo) & (a.data <= hi)

    def _backward(g):
        _accumulate(a, g * inside)

    _record(out, _backward)
    return out


# ---------------------------------------------------------------------------
# reductions


def _normalize_axes(a: Tensor, axes) -> tuple[int, ...]:
    if axes is None:
        axes = tuple(range(a.data.ndim))
    elif isinstance(axes, int):
        axes = (axes,)
    else:
        axes = tuple(axes)
    if not axes and a.data.ndim:
        raise ShapeError("reduction needs at least one axis")
    for axis in axes:
        if not -a.data.ndim <= axis < a.data.ndim:
            raise ShapeError(f"axis {axis} out of range for shape {a.shape}")
        if a.data.shape[axis] == 0:
            raise ShapeError(f"cannot reduce over empty axis {axis} of shape {a.shape}")
    return tuple(axis % max(a.data.ndim, 1) for axis in axes)


def reduce_sum(a: Tensor, axes=None) -> Tensor:
    axes = _normalize_axes(a, axes)
    out = Tensor(np.sum(a.data, axis=axes, dtype=np.float32), a.requires_grad)

    def _backward(g):
        _accumulate(a, np.broadcast_to(np.expand_dims(g, axes), a.data.shape))

    _record(out, _backward)
    return out


def reduce_mean(a: Tensor, axes=None) -> Tensor:
    axes = _normalize_axes(a, axes)
    count = 1
    for axis in axes:
        count *= a.data.shape[axis]
    return scale(reduce_sum(a, axes), 1.0 / count)


def argmax_channels(a: Tensor) -> np.ndarray:
    """Per-pixel argmax over the leading (channel) axis; ties go to the lower index."""
    if a.data.ndim != 3:
        raise ShapeError(f"argmax_channels needs a CxHxW tensor, got shape {a.shape}")
    if a.data.shape[0] == 0:
        raise ShapeError("cannot take argmax over an empty channel axis")
    return np.argmax(a.data, axis=0)


# ---------------------------------------------------------------------------
# structured ops


def channel_softmax(a: Tensor) -> Tensor:
    """Per-pixel softmax over the leading channel axis, stabilized by max-subtraction."""
    if a.data.ndim != 3:
        raise ShapeError(f"channel_softmax needs a CxHxW tensor, got shape {a.shape}")
    shifted = a.data - np.max(a.data, axis=0, keepdims=True)
    e = np.exp(shifted)
    y = e / np.sum(e, axis=0, keepdims=True)
    out = Tensor(y, a.requires_grad)

    def _backward(g):
        dot = np.sum(g * y, axis=0, keepdims=True)
        _accumulate(a, y * (g - dot))

    _record(out, _backward)
    return out


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2D cross-correlation of a CxHxW input with a C_out x C_in x k x k kernel."""
    if x.data.ndim != 3:
        raise ShapeError(f"conv2d input must be CxHxW, got shape {x.shape}")
    if kernel.data.ndim != 4:
        raise ShapeError(f"conv2d kernel must be rank 4, got shape {kernel.shape}")
    c_out, c_in, kh, kw = kernel.data.shape
    if kh != kw or kh % 2 == 0:
        raise ShapeError(f"kernel must be square with odd size, got {kh}x{kw}")
    if x.data.shape[0] != c_in:
        raise ShapeError(
            f"conv2d: input channel axis has extent {x.data.shape[0]}, kernel expects {c_in}"
        )
    if bias.data.shape != (c_out,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} must be ({c_out},)")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d: stride {stride} must be >= 1 and padding {padding} >= 0")
    _, h, w = x.data.shape
    if (h + 2 * padding - kh) % stride or (w + 2 * padding - kw) % stride:
        raise ShapeError(
            f"conv2d: spatial size {h}x{w} with padding {padding}, kernel {kh}, "
            f"stride {stride} does not tile evenly"
        )
    h_out = (h + 2 * padding - kh) // stride + 1
    w_out = (w + 2 * padding - kw) // stride + 1
    if h_out < 1 or w_out < 1:
        raise ShapeError(f"conv2d: output size {h_out}x{w_out} is empty")

    padded = (
        np.pad(x.data, ((0, 0), (padding, padding), (padding, padding))) if padding else x.data
    )
    windows = np.lib.stride_tricks.sliding_window_view(padded, (kh, kw), axis=(1, 2))
    windows = windows[:, ::stride, ::stride]  # (C_in, H', W', k, k)
    cols = np.ascontiguousarray(windows.transpose(0, 3, 4, 1, 2)).reshape(
        c_in * kh * kw, h_out * w_out
    )
    w_mat = kernel.data.reshape(c_out, c_in * kh * kw)
    out_data = (w_mat @ cols + bias.data[:, None]).reshape(c_out, h_out, w_out)
    out = Tensor(out_data, x.requires_grad or kernel.requires_grad or bias.requires_grad)

    def _backward(g):
        g_mat = g.reshape(c_out, h_out * w_out)
        if kernel.requires_grad:
            _accumulate(kernel, (g_mat @ cols.T).reshape(kernel.data.shape))
        if bias.requires_grad:
            _accumulate(bias, g_mat.sum(axis=1))
        if x.requires_grad:
            d_cols = (w_mat.T @ g_mat).reshape(c_in, kh, kw, h_out, w_out)
            d_padded = np.zeros_like(padded)
            for i in range(kh):
                for j in range(kw):
                    d_padded[:, i : i + stride * h_out : stride, j : j + stride * w_out : stride] += d_cols[
                        :, i, j
                    ]
            if padding:
                d_padded = d_padded[:, padding : padding + h, padding : padding + w]
            _accumulate(x, d_padded)

    _record(out, _backward)
    return out


def maxpool2x2(x: Tensor) -> Tensor:
    """2x2 max-pool, stride 2; gradient routes to the first max in row-major window order."""
    if x.data.ndim != 3:
        raise ShapeError(f"maxpool2x2 needs a CxHxW tensor, got shape {x.shape}")
    c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2x2 needs even spatial extents, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    tiles = x.data.reshape(c, h2, 2, w2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h2, w2, 4)
    idx = np.argmax(tiles, axis=-1)
    out = Tensor(np.take_along_axis(tiles, idx[..., None], axis=-1)[..., 0], x.requires_grad)

    def _backward(g):
        d_tiles = np.zeros((c, h2, w2, 4), dtype=np.float32)
        np.put_along_axis(d_tiles, idx[..., None], g[..., None], axis=-1)
        _accumulate(x, d_tiles.reshape(c, h2, w2, 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h, w))

    _record(out, _backward)
    return out


def upsample_nearest2x(x: Tensor) -> Tensor:
    """Nearest-neighbor x2 upsampling; gradient sums each 2x2 block."""
    if x.data.ndim != 3:
        raise ShapeError(f"upsample_nearest2x needs a CxHxW tensor, got shape {x.shape}")
    c, h, w = x.data.shape
    out = Tensor(x.data.repeat(2, axis=1).repeat(2, axis=2), x.requires_grad)

    def _backward(g):
        _accumulate(x, g.reshape(c, h, 2, w, 2).sum(axis=(2, 4)))

    _record(out, _backward)
    return out


def concat_channels(parts) -> Tensor:
    """Concatenate HxW or CxHxW tensors along the channel axis."""
    parts = [_wrap(p) for p in parts]
    if not parts:
        raise ShapeError("concat_channels needs at least one tensor")
    arrays = [p.data[None] if p.data.ndim == 2 else p.data for p in parts]
    if any(a.ndim != 3 for a in arrays):
        raise ShapeError("concat_channels operands must be HxW or CxHxW")
    spatial = arrays[0].shape[1:]
    for a in arrays:
        if a.shape[1:] != spatial:
            raise ShapeError(f"concat_channels: spatial shapes differ ({a.shape[1:]} vs {spatial})")
    out = Tensor(np.concatenate(arrays, axis=0), any(p.requires_grad for p in parts))
    offsets = np.cumsum([0] + [a.shape[0] for a in arrays])

    def _backward(g):
        for p, a, start, stop in zip(parts, arrays, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                piece = g[start:stop]
                _accumulate(p, piece[0] if p.data.ndim == 2 else piece)

    _record(out, _backward)
    return out


def take_channel(x: Tensor, c: int) -> Tensor:
    """Select one channel of a CxHxW tensor as an HxW tensor."""
    if x.data.ndim != 3:
        raise ShapeError(f"take_channel needs a CxHxW tensor, got shape {x.shape}")
    if not 0 <= c < x.data.shape[0]:
        raise ShapeError(f"channel {c} out of range for shape {x.shape}")
    out = Tensor(x.data[c].copy(), x.requires_grad)

    def _backward(g):
        gx = np.zeros_like(x.data)
        gx[c] = g
        _accumulate(x, gx)

    _record(out, _backward)
    return out


def broadcast_vector(v: Tensor, spatial: tuple[int, int]) -> Tensor:
    """Tile a length-D vector into a DxHxW map; gradient sums over the spatial axes."""
    if v.data.ndim != 1:
        raise ShapeError(f"broadcast_vector needs a rank-1 tensor, got shape {v.shape}")
    h, w = spatial
    out = Tensor(np.broadcast_to(v.data[:, None, None], (v.data.shape[0], h, w)).copy(), v.requires_grad)

    def _backward(g):
        _accumulate(v, g.sum(axis=(1, 2)))

    _record(out, _backward)
    return out


def broadcast_map(m: Tensor, channels: int) -> Tensor:
    """Tile an HxW map into a CxHxW tensor; gradient sums over the channel axis."""
    if m.data.ndim != 2:
        raise ShapeError(f"broadcast_map needs a rank-2 tensor, got shape {m.shape}")
    out = Tensor(np.broadcast_to(m.data[None], (channels,) + m.data.shape).copy(), m.requires_grad)

    def _backward(g):
        _accumulate(m, g.sum(axis=0))

    _record(out, _backward)
    return out
