"""Differentiable primitives: convolution, batch norm, pooling, upsampling,
ReLU, dropout, channel concat, and the soft-argmax head.

All ops take and return Tensors (see kneemark.nn.tensor) and register a
backward closure computing the exact analytic gradient; the test suite checks
every one against central finite differences.
"""

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .tensor import Tensor, accumulate_grad, make_node


def _require4d(x: Tensor, name: str) -> None:
    if x.ndim != 4:
        raise ValueError(f"{name} expects a (batch, channels, height, width) tensor, got shape {x.shape}")


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation via im2col. kernel is (out_ch, in_ch, kh, kw)."""
    _require4d(x, "conv2d")
    if kernel.ndim != 4:
        raise ValueError(f"kernel must be 4-d, got shape {kernel.shape}")
    b, c, h, w = x.shape
    oc, kc, kh, kw = kernel.shape
    if kc != c:
        raise ValueError(f"conv2d channel mismatch: input has {c} channels, kernel expects {kc}")
    if stride < 1 or padding < 0:
        raise ValueError(f"invalid stride/padding ({stride}, {padding})")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"kernel {kh}x{kw} does not fit input {h}x{w} with padding {padding}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    sb, sc, sh, sw = xp.strides
    windows = as_strided(xp, shape=(b, c, kh, kw, ho, wo), strides=(sb, sc, sh, sw, sh * stride, sw * stride))
    out = np.tensordot(kernel.data, windows, axes=([1, 2, 3], [1, 2, 3]))  # (oc, b, ho, wo)
    out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))
    if bias is not None:
        if bias.shape != (oc,):
            raise ValueError(f"bias must have shape ({oc},), got {bias.shape}")
        out = out + bias.data.reshape(1, oc, 1, 1)

    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def backward_fn(g: np.ndarray) -> None:
        if bias is not None and bias.requires_grad:
            accumulate_grad(bias, g.sum(axis=(0, 2, 3)))
        if kernel.requires_grad:
            dk = np.tensordot(g, windows, axes=([0, 2, 3], [0, 4, 5]))  # (oc, c, kh, kw)
            accumulate_grad(kernel, dk)
        if x.requires_grad:
            dwin = np.einsum("ocij,bohw->bcijhw", kernel.data, g)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += dwin[:, :, i, j]
            dx = dxp[:, :, padding:padding + h, padding:padding + w] if padding else dxp
            accumulate_grad(x, dx)

    return make_node(out, parents, backward_fn)


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    train: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization.

    Train mode normalizes by the batch mean and (biased) variance and updates
    the running statistics in place with EMA momentum; eval mode uses the
    running statistics.
    """
    _require4d(x, "batchnorm2d")
    b, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"gamma/beta must have shape ({c},)")
    if train:
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mu = running_mean.astype(x.dtype, copy=False)
        var = running_var.astype(x.dtype, copy=False)
    invstd = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(1, c, 1, 1)) * invstd.reshape(1, c, 1, 1)
    out = gamma.data.reshape(1, c, 1, 1) * xhat + beta.data.reshape(1, c, 1, 1)

    def backward_fn(g: np.ndarray) -> None:
        if beta.requires_grad:
            accumulate_grad(beta, g.sum(axis=(0, 2, 3)))
        if gamma.requires_grad:
            accumulate_grad(gamma, (g * xhat).sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gm = gamma.data.reshape(1, c, 1, 1)
            istd = invstd.reshape(1, c, 1, 1)
            dxhat = g * gm
            if train:
                n = b * h * w
                sum_dxhat = dxhat.sum(axis=(0, 2, 3), keepdims=True)
                sum_dxhat_xhat = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
                dx = (istd / n) * (n * dxhat - sum_dxhat - xhat * sum_dxhat_xhat)
            else:
                dx = dxhat * istd
            accumulate_grad(x, dx)

    return make_node(out, (x, gamma, beta), backward_fn)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0.0).astype(x.dtype, copy=False)

    def backward_fn(g: np.ndarray) -> None:
        if x.requires_grad:
            accumulate_grad(x, g * mask)

    return make_node(out, (x,), backward_fn)


def dropout(x: Tensor, p: float, train: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-p) so eval is identity."""
    if not (0.0 <= p < 1.0):
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not train or p == 0.0:
        def backward_id(g: np.ndarray) -> None:
            if x.requires_grad:
                accumulate_grad(x, g)
        return make_node(x.data, (x,), backward_id)
    if rng is None:
        raise ValueError("train-mode dropout needs an explicit rng")
    keep = (rng.random(x.shape) >= p)
    scale = 1.0 / (1.0 - p)
    mask = keep.astype(x.dtype) * scale
    out = x.data * mask

    def backward_fn(g: np.ndarray) -> None:
        if x.requires_grad:
            accumulate_grad(x, g * mask)

    return make_node(out, (x,), backward_fn)


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; ties route the gradient to the first
    maximum in row-major window order (deterministic)."""
    _require4d(x, "maxpool2")
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    ho, wo = h // 2, w // 2
    windows = x.data.reshape(b, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, ho, wo, 4)
    idx = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]

    def backward_fn(g: np.ndarray) -> None:
        if x.requires_grad:
            dwin = np.zeros_like(windows)
            np.put_along_axis(dwin, idx[..., None], g[..., None], axis=-1)
            dx = dwin.reshape(b, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h, w)
            accumulate_grad(x, dx)

    return make_node(out, (x,), backward_fn)


def upsample_nearest2(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling; the gradient sums each 2x2 block."""
    _require4d(x, "upsample_nearest2")
    b, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def backward_fn(g: np.ndarray) -> None:
        if x.requires_grad:
            accumulate_grad(x, g.reshape(b, c, h, 2, w, 2).sum(axis=(3, 5)))

    return make_node(out, (x,), backward_fn)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"add shape mismatch: {a.shape} vs {b.shape}")
    out = a.data + b.data

    def backward_fn(g: np.ndarray) -> None:
        if a.requires_grad:
            accumulate_grad(a, g)
        if b.requires_grad:
            accumulate_grad(b, g)

    return make_node(out, (a, b), backward_fn)


def scale(x: Tensor, s: float) -> Tensor:
    out = x.data * s

    def backward_fn(g: np.ndarray) -> None:
        if x.requires_grad:
            accumulate_grad(x, g * s)

    return make_node(out, (x,), backward_fn)


def concat_channels(parts: list[Tensor]) -> Tensor:
    for p in parts:
        _require4d(p, "concat_channels")
    out = np.concatenate([p.data for p in parts], axis=1)
    sizes = [p.shape[1] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward_fn(g: np.ndarray) -> None:
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                accumulate_grad(p, g[:, lo:hi])

    return make_node(out, tuple(parts), backward_fn)


def soft_argmax(h: Tensor, beta: float = 1.0) -> Tensor:
    """Expected coordinate of the spatial softmax of each heatmap.

    h is (batch, maps, H, W); the result is (batch, maps, 2) holding (x, y)
    in the normalized frame: weights are i/W across columns and j/H down
    rows, so a spike at column i, row j yields (i/W, j/H) and a uniform map
    yields ((W-1)/2W, (H-1)/2H). The softmax exponent is beta*h, stabilized
    by subtracting the per-map max; beta = 0 degenerates to uniform.
    """
    _require4d(h, "soft_argmax")
    if beta < 0:
        raise ValueError(f"beta must be >= 0, got {beta}")
    if not np.isfinite(h.data).all():
        raise ValueError("soft_argmax input contains non-finite values")
    b, m, hh, ww = h.shape
    z = beta * h.data
    z = z - z.max(axis=(2, 3), keepdims=True)
    e = np.exp(z)
    phi = e / e.sum(axis=(2, 3), keepdims=True)
    wx = (np.arange(ww, dtype=h.dtype) / ww).reshape(1, 1, 1, ww)
    wy = (np.arange(hh, dtype=h.dtype) / hh).reshape(1, 1, hh, 1)
    out_x = (phi * wx).sum(axis=(2, 3))
    out_y = (phi * wy).sum(axis=(2, 3))
    out = np.stack([out_x, out_y], axis=-1)

    def backward_fn(g: np.ndarray) -> None:
        if h.requires_grad:
            gx = g[..., 0].reshape(b, m, 1, 1)
            gy = g[..., 1].reshape(b, m, 1, 1)
            ox = out_x.reshape(b, m, 1, 1)
            oy = out_y.reshape(b, m, 1, 1)
            dh = beta * phi * (gx * (wx - ox) + gy * (wy - oy))
            accumulate_grad(h, dh)

    return make_node(out, (h,), backward_fn)
