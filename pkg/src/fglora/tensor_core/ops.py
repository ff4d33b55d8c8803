"""Differentiable primitives.

Spatial ops take ``[C, D, H, W]`` or batched ``[N, C, D, H, W]`` inputs.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, as_tensor, make_node


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_node(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_node(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_node(a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_node(out, (a, b), backward)


def square(x: Tensor) -> Tensor:
    x = as_tensor(x)
    return make_node(x.data * x.data, (x,), lambda g: (2.0 * x.data * g,))


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return make_node(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = _sigmoid(x.data)
    return make_node(out, (x,), lambda g: (g * out * (1.0 - out),))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # exp of a non-positive argument only; stable for large |z|
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


# ---------------------------------------------------------------- reductions / shape

def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = as_tensor(x)
    return make_node(np.array(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean(x: Tensor) -> Tensor:
    x = as_tensor(x)
    n = x.data.size
    return make_node(np.array(x.data.mean()), (x,), lambda g: (np.full(x.shape, g / n),))


def reshape(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from None
    return make_node(out, (x,), lambda g: (g.reshape(x.shape),))


def concat_channels(tensors) -> Tensor:
    """Concatenate along the channel axis (axis 0 for 4-D, axis 1 for 5-D)."""
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat_channels: nothing to concatenate")
    nd = tensors[0].ndim
    if nd not in (4, 5) or any(t.ndim != nd for t in tensors):
        raise ShapeError("concat_channels: inputs must all be 4-D or all 5-D")
    axis = nd - 4
    spatial = [t.shape[:axis] + t.shape[axis + 1:] for t in tensors]
    if any(s != spatial[0] for s in spatial):
        raise ShapeError(f"concat_channels: non-channel extents differ: {spatial}")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors))
        )

    return make_node(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over spatial sites: ``[C,D,H,W] -> [C]`` or ``[N,C,D,H,W] -> [N,C]``."""
    x = as_tensor(x)
    if x.ndim not in (4, 5):
        raise ShapeError(f"global_avg_pool: expected 4-D or 5-D input, got {x.shape}")
    axes = tuple(range(x.ndim - 3, x.ndim))
    n = x.shape[-3] * x.shape[-2] * x.shape[-1]

    def backward(g):
        return (np.broadcast_to(g.reshape(g.shape + (1, 1, 1)) / n, x.shape).copy(),)

    return make_node(x.data.mean(axis=axes), (x,), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` of shape ``[out, in]``."""
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input features {x.shape} do not match weight {weight.shape}")
    out = x.data @ weight.data.T
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"linear: bias shape {bias.shape} != ({weight.shape[0]},)")
        out = out + bias.data
        parents.append(bias)

    def backward(g):
        gx = g @ weight.data if x.requires_grad else None
        g2 = g.reshape(-1, g.shape[-1])
        gw = g2.T @ x.data.reshape(-1, x.shape[-1]) if weight.requires_grad else None
        grads = [gx, gw]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return grads

    return make_node(out, parents, backward)


# ---------------------------------------------------------------- volumetric

def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 5:
        return x, False
    if x.ndim == 4:
        return reshape(x, (1,) + x.shape), True
    raise ShapeError(f"expected [C,D,H,W] or [N,C,D,H,W] input, got shape {x.shape}")


def _unbatch(y: Tensor, squeeze: bool) -> Tensor:
    return reshape(y, y.shape[1:]) if squeeze else y


_AXES = ("depth", "height", "width")


def conv3d(x, kernel, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Direct 3-D cross-correlation.

    Output extent per spatial axis is ``floor((n + 2*padding - k) / stride) + 1``.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if int(stride) != stride or stride < 1:
        raise ValueError(f"conv3d: stride must be a positive integer, got {stride}")
    if int(padding) != padding or padding < 0:
        raise ValueError(f"conv3d: padding must be a non-negative integer, got {padding}")
    stride, padding = int(stride), int(padding)
    if kernel.ndim != 5:
        raise ShapeError(f"conv3d: kernel must be [C_out,C_in,k,k,k], got {kernel.shape}")
    xb, squeeze = _batched(x)
    n, c_in = xb.shape[:2]
    c_out, kc, kd, kh, kw = kernel.shape
    if kc != c_in:
        raise ShapeError(f"conv3d: channel axis mismatch, input has {c_in}, kernel expects {kc}")
    for axis, extent, k in zip(_AXES, xb.shape[2:], (kd, kh, kw)):
        if k > extent + 2 * padding:
            raise ShapeError(
                f"conv3d: {axis} axis too small, kernel {k} > extent {extent} + 2*padding {padding}"
            )
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (c_out,):
            raise ShapeError(f"conv3d: bias shape {bias.shape} != ({c_out},)")

    xp = xb.data
    if padding:
        p = padding
        xp = np.pad(xp, ((0, 0), (0, 0), (p, p), (p, p), (p, p)))
    win = sliding_window_view(xp, (kd, kh, kw), axis=(2, 3, 4))
    win = win[:, :, ::stride, ::stride, ::stride]
    od, oh, ow = win.shape[2:5]
    # im2col: rows are output sites, columns (c, i, j, k) in kernel order
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 4, 1, 5, 6, 7)).reshape(n * od * oh * ow, -1)
    w2 = kernel.data.reshape(c_out, -1)
    out = (cols @ w2.T).reshape(n, od, oh, ow, c_out).transpose(0, 4, 1, 2, 3)
    out = np.ascontiguousarray(out)
    if bias is not None:
        out += bias.data.reshape(1, -1, 1, 1, 1)

    parents = [xb, kernel] + ([bias] if bias is not None else [])

    def backward(g):
        g2 = g.transpose(0, 2, 3, 4, 1).reshape(-1, c_out)
        gk = (g2.T @ cols).reshape(kernel.shape) if kernel.requires_grad else None
        gx = None
        if xb.requires_grad:
            dcols = (g2 @ w2).reshape(n, od, oh, ow, c_in, kd, kh, kw)
            gxp = np.zeros_like(xp)
            s = stride
            for i in range(kd):
                for j in range(kh):
                    for k in range(kw):
                        gxp[:, :, i:i + s * od:s, j:j + s * oh:s, k:k + s * ow:s] += (
                            dcols[..., i, j, k].transpose(0, 4, 1, 2, 3))
            if padding:
                p = padding
                gxp = gxp[:, :, p:-p, p:-p, p:-p]
            gx = np.ascontiguousarray(gxp)
        grads = [gx, gk]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3, 4)))
        return grads

    return _unbatch(make_node(out, parents, backward), squeeze)


def conv1x1(x, weight, stride: int = 1) -> Tensor:
    """Channel mixing at every spatial site; ``weight`` is ``[C_out, C_in]``.

    ``stride`` subsamples the sites (used to align a 1x1x1 branch with a strided
    k=3, padding=1 convolution whose window centres sit at multiples of the stride).
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 2:
        raise ShapeError(f"conv1x1: weight must be [C_out, C_in], got {weight.shape}")
    xb, squeeze = _batched(x)
    if weight.shape[1] != xb.shape[1]:
        raise ShapeError(
            f"conv1x1: channel mismatch, input has {xb.shape[1]} channels, weight expects {weight.shape[1]}"
        )
    xs = xb.data[:, :, ::stride, ::stride, ::stride] if stride > 1 else xb.data
    out = np.einsum("oc,ncdhw->nodhw", weight.data, xs, optimize=True)

    def backward(g):
        gx = None
        if xb.requires_grad:
            gs = np.einsum("oc,nodhw->ncdhw", weight.data, g, optimize=True)
            if stride > 1:
                gx = np.zeros_like(xb.data)
                gx[:, :, ::stride, ::stride, ::stride] = gs
            else:
                gx = gs
        gw = np.einsum("nodhw,ncdhw->oc", g, xs, optimize=True) if weight.requires_grad else None
        return gx, gw

    return _unbatch(make_node(out, (xb, weight), backward), squeeze)


def upsample_nearest2x(x) -> Tensor:
    x = as_tensor(x)
    xb, squeeze = _batched(x)
    out = xb.data.repeat(2, axis=2).repeat(2, axis=3).repeat(2, axis=4)

    def backward(g):
        n, c, d, h, w = xb.shape
        return (g.reshape(n, c, d, 2, h, 2, w, 2).sum(axis=(3, 5, 7)),)

    return _unbatch(make_node(out, (xb,), backward), squeeze)


def downsample_stride2(x) -> Tensor:
    """Keep every second voxel along each spatial axis (inverse of nearest upsampling)."""
    x = as_tensor(x)
    xb, squeeze = _batched(x)
    out = np.ascontiguousarray(xb.data[:, :, ::2, ::2, ::2])

    def backward(g):
        gx = np.zeros_like(xb.data)
        gx[:, :, ::2, ::2, ::2] = g
        return (gx,)

    return _unbatch(make_node(out, (xb,), backward), squeeze)


def dropout(x, keep_mask: np.ndarray, p: float) -> Tensor:
    """Inverted dropout with a caller-supplied 0/1 keep mask."""
    x = as_tensor(x)
    scale = keep_mask / (1.0 - p)
    return make_node(x.data * scale, (x,), lambda g: (g * scale,))
