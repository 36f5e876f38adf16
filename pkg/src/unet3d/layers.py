"""Network layers: kernels on numpy arrays plus their tape registrations.

Convolutions are computed in channels-last order with one matrix product
per kernel offset over the flattened, zero-padded volume ("flat shift"):
for a padded grid flattened to rows, shifting the kernel by (dz, dy, dx)
is a shift of ``dz*Hp*Wp + dy*Wp + dx`` rows, so every tap is a GEMM over a
contiguous slice. Rows that straddle the padding are computed and dropped.

Per-channel vectors (biases, BN parameters) are stored as (1, c, 1, 1, 1)
tensors so they live in the same 5-D layout as everything else.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import register_op
from .tensor import ShapeError, Tensor

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


@dataclass
class ConvParams:
    weights: Tensor  # (c_out, c_in, k, k, k)
    bias: Tensor  # (1, c_out, 1, 1, 1)

    def __post_init__(self):
        co = self.weights.shape[0]
        if self.bias.size != co:
            raise ShapeError(f"bias has {self.bias.size} entries for {co} output channels")


@dataclass
class BNParams:
    gamma: Tensor
    beta: Tensor
    running_mean: Tensor
    running_var: Tensor
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS

    @classmethod
    def identity(cls, channels: int, dtype=np.float32) -> "BNParams":
        one = np.ones((1, channels, 1, 1, 1), dtype)
        zero = np.zeros((1, channels, 1, 1, 1), dtype)
        return cls(Tensor(one), Tensor(zero), Tensor(zero), Tensor(one))


# ---------------------------------------------------------------------------
# convolution kernels


def _channels_last(x):
    return np.ascontiguousarray(x.transpose(0, 2, 3, 4, 1))


def _channels_first(x):
    return np.ascontiguousarray(x.transpose(0, 4, 1, 2, 3))


def _flat_geometry(shape, k):
    n, d, h, w, _ = shape
    p = k // 2
    dp, hp, wp = d + 2 * p, h + 2 * p, w + 2 * p
    span = (n - 1) * dp * hp * wp + (d - 1) * hp * wp + (h - 1) * wp + w
    offsets = [dz * hp * wp + dy * wp + dx for dz in range(k) for dy in range(k) for dx in range(k)]
    return (dp, hp, wp), span, offsets


def _pad_flat(xcl, k):
    p = k // 2
    xp = np.pad(xcl, ((0, 0), (p, p), (p, p), (p, p), (0, 0)))
    return xp.reshape(-1, xcl.shape[-1])


ROW_CHUNK = 2048        # rows per cache-sized GEMM block
COL_BUDGET = 1 << 18    # elements per im2col block (few-channel inputs)


def _row_chunks(span, step):
    for start in range(0, span, step):
        yield start, min(span, start + step)


def _gather(flat, offsets, start, stop, out):
    for t, off in enumerate(offsets):
        out[:stop - start, t, :] = flat[off + start:off + stop]
    return out[:stop - start].reshape(stop - start, -1)


def _correlate_cl(xcl, taps):
    """Same-size correlation, channels last.

    xcl: (n, d, h, w, ci); taps: (k**3, ci, co) in (dz, dy, dx) order.
    Output rows are produced block by block so the accumulator stays in cache;
    the tap order inside a block is fixed, which keeps results deterministic.
    """
    n, d, h, w, ci = xcl.shape
    ntap, _, co = taps.shape
    k = round(ntap ** (1 / 3))
    if k == 1:
        return (xcl.reshape(-1, ci) @ taps[0]).reshape(n, d, h, w, co)
    (dp, hp, wp), span, offsets = _flat_geometry(xcl.shape, k)
    flat = _pad_flat(xcl, k)
    full = np.empty((n * dp * hp * wp, co), dtype=xcl.dtype)
    if ci < 4:
        # too few channels for per-tap GEMMs to pay off: gather all taps
        wmat = taps.reshape(ntap * ci, co)
        step = max(1, COL_BUDGET // (ntap * ci))
        cols = np.empty((step, ntap, ci), dtype=xcl.dtype)
        for start, stop in _row_chunks(span, step):
            np.matmul(_gather(flat, offsets, start, stop, cols), wmat, out=full[start:stop])
    else:
        tmp = np.empty((ROW_CHUNK, co), dtype=xcl.dtype)
        for start, stop in _row_chunks(span, ROW_CHUNK):
            acc, part = full[start:stop], tmp[:stop - start]
            np.matmul(flat[offsets[0] + start:offsets[0] + stop], taps[0], out=acc)
            for t in range(1, ntap):
                np.matmul(flat[offsets[t] + start:offsets[t] + stop], taps[t], out=part)
                acc += part
    return full.reshape(n, dp, hp, wp, co)[:, :d, :h, :w]


def _conv_taps(w):
    co, ci, k = w.shape[0], w.shape[1], w.shape[2]
    return np.ascontiguousarray(w.transpose(2, 3, 4, 1, 0)).reshape(k ** 3, ci, co)


def conv3d_forward(x, w, b):
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"input has {x.shape[1]} channels, kernel expects {w.shape[1]}")
    k = w.shape[2]
    if w.shape[2:] != (k, k, k) or k % 2 == 0:
        raise ShapeError(f"same-convolution needs an odd cubic kernel, got {w.shape[2:]}")
    out = _correlate_cl(_channels_last(x), _conv_taps(w))
    out = out + b.reshape(1, 1, 1, 1, -1)
    return _channels_first(out)


def conv3d_backward(g, x, w, needs=(True, True, True)):
    co, ci, k = w.shape[0], w.shape[1], w.shape[2]
    gcl = _channels_last(g)
    gx = gw = gb = None
    if needs[0]:
        flipped = w[:, :, ::-1, ::-1, ::-1]
        taps = np.ascontiguousarray(flipped.transpose(2, 3, 4, 0, 1)).reshape(k ** 3, co, ci)
        gx = _channels_first(_correlate_cl(gcl, taps))
    if needs[1]:
        xcl = _channels_last(x)
        if k == 1:
            gtaps = (xcl.reshape(-1, ci).T @ gcl.reshape(-1, co))[None]
        else:
            (dp, hp, wp), span, offsets = _flat_geometry(xcl.shape, k)
            flat = _pad_flat(xcl, k)
            n, d, h, wd = xcl.shape[:4]
            gpad = np.zeros((n, dp, hp, wp, co), dtype=g.dtype)
            gpad[:, :d, :h, :wd] = gcl
            gflat = gpad.reshape(-1, co)[:span]
            ntap = k ** 3
            gtaps = np.zeros((ntap, ci, co), dtype=g.dtype)
            for start, stop in _row_chunks(span, 8 * ROW_CHUNK):
                gpart = gflat[start:stop]
                for t, off in enumerate(offsets):
                    gtaps[t] += flat[off + start:off + stop].T @ gpart
        gw = np.ascontiguousarray(gtaps.reshape(k, k, k, ci, co).transpose(4, 3, 0, 1, 2))
    if needs[2]:
        gb = g.sum(axis=(0, 2, 3, 4)).reshape(1, co, 1, 1, 1)
    return gx, gw, gb


def tconv3d_forward(x, w, b):
    n, ci, d, h, wd = x.shape
    co = w.shape[0]
    if w.shape[1] != ci or w.shape[2:] != (2, 2, 2):
        raise ShapeError(f"transposed conv expects kernel (c_out, {ci}, 2, 2, 2), got {w.shape}")
    wm = np.ascontiguousarray(w.transpose(1, 2, 3, 4, 0)).reshape(ci, 8 * co)
    y = _channels_last(x).reshape(-1, ci) @ wm
    y = y.reshape(n, d, h, wd, 2, 2, 2, co).transpose(0, 7, 1, 4, 2, 5, 3, 6)
    y = y.reshape(n, co, 2 * d, 2 * h, 2 * wd)
    return y + b.reshape(1, co, 1, 1, 1)


def tconv3d_backward(g, x, w, needs=(True, True, True)):
    n, ci, d, h, wd = x.shape
    co = w.shape[0]
    gm = g.reshape(n, co, d, 2, h, 2, wd, 2).transpose(0, 2, 4, 6, 3, 5, 7, 1).reshape(-1, 8 * co)
    gx = gw = gb = None
    if needs[0]:
        wm = np.ascontiguousarray(w.transpose(1, 2, 3, 4, 0)).reshape(ci, 8 * co)
        gx = _channels_first((gm @ wm.T).reshape(n, d, h, wd, ci))
    if needs[1]:
        gwm = _channels_last(x).reshape(-1, ci).T @ gm
        gw = np.ascontiguousarray(gwm.reshape(ci, 2, 2, 2, co).transpose(4, 0, 1, 2, 3))
    if needs[2]:
        gb = g.sum(axis=(0, 2, 3, 4)).reshape(1, co, 1, 1, 1)
    return gx, gw, gb


# ---------------------------------------------------------------------------
# pooling, activations, normalization


def _blocks(x):
    n, c, d, h, w = x.shape
    if d % 2 or h % 2 or w % 2:
        raise ShapeError(f"max pooling needs even spatial extents, got {(d, h, w)}")
    b = x.reshape(n, c, d // 2, 2, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 6, 3, 5, 7)
    return b.reshape(n, c, d // 2, h // 2, w // 2, 8)


def maxpool3d_forward(x):
    """2x2x2 max pooling, stride 2. Returns (output, argmax within each block).

    Block elements are scanned in (dz, dy, dx) order; ties go to the first.
    """
    blocks = _blocks(x)
    idx = np.argmax(blocks, axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return out, idx


def maxpool3d_backward(g, idx, in_shape):
    n, c, d, h, w = in_shape
    gb = np.zeros(g.shape + (8,), dtype=g.dtype)
    np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
    gb = gb.reshape(n, c, d // 2, h // 2, w // 2, 2, 2, 2).transpose(0, 1, 2, 5, 3, 6, 4, 7)
    return gb.reshape(in_shape)


def batchnorm_train_forward(x, gamma, beta, eps=BN_EPS):
    axes = (0, 2, 3, 4)
    mean = x.mean(axis=axes, keepdims=True)
    var = ((x - mean) ** 2).mean(axis=axes, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * inv_std
    return gamma * xhat + beta, (xhat, inv_std, mean, var)


def batchnorm_train_backward(g, gamma, xhat, inv_std):
    axes = (0, 2, 3, 4)
    m = g.size // g.shape[1]
    gbeta = g.sum(axis=axes, keepdims=True)
    ggamma = (g * xhat).sum(axis=axes, keepdims=True)
    gxhat = g * gamma
    gx = inv_std / m * (m * gxhat - gxhat.sum(axis=axes, keepdims=True)
                        - xhat * (gxhat * xhat).sum(axis=axes, keepdims=True))
    return gx, ggamma, gbeta


def softmax_forward(x):
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def softmax_backward(g, p):
    return p * (g - (g * p).sum(axis=1, keepdims=True))


# ---------------------------------------------------------------------------
# tape registrations


def _reg_conv():
    def fwd(a, ctx):
        return conv3d_forward(a[0], a[1], a[2]), None

    def bwd(g, a, out, saved, ctx, needs):
        return conv3d_backward(g, a[0], a[1], needs)

    register_op("conv3d", fwd, bwd)

    def tfwd(a, ctx):
        return tconv3d_forward(a[0], a[1], a[2]), None

    def tbwd(g, a, out, saved, ctx, needs):
        return tconv3d_backward(g, a[0], a[1], needs)

    register_op("tconv3d", tfwd, tbwd)


def _reg_pool_act():
    def pfwd(a, ctx):
        return maxpool3d_forward(a[0])

    def pbwd(g, a, out, idx, ctx, needs):
        return (maxpool3d_backward(g, idx, a[0].shape),)

    register_op("maxpool3d", pfwd, pbwd)

    register_op("relu",
                lambda a, ctx: (np.maximum(a[0], 0), None),
                lambda g, a, out, s, ctx, needs: (g * (a[0] > 0),))

    register_op("softmax",
                lambda a, ctx: (softmax_forward(a[0]), None),
                lambda g, a, out, s, ctx, needs: (softmax_backward(g, out),))

    def cfwd(a, ctx):
        return np.concatenate(a, axis=1), None

    def cbwd(g, a, out, s, ctx, needs):
        ca = a[0].shape[1]
        return g[:, :ca], g[:, ca:]

    register_op("concat", cfwd, cbwd)


def _reg_bn():
    # train: inputs (x, gamma, beta); saved carries the batch statistics
    def tfwd(a, ctx):
        return batchnorm_train_forward(a[0], a[1], a[2], ctx.get("eps", BN_EPS))

    def tbwd(g, a, out, saved, ctx, needs):
        xhat, inv_std, _, _ = saved
        return batchnorm_train_backward(g, a[1], xhat, inv_std)

    register_op("batchnorm_train", tfwd, tbwd)

    # infer: inputs (x, gamma, beta, running_mean, running_var)
    def ifwd(a, ctx):
        x, gamma, beta, rm, rv = a
        inv_std = 1.0 / np.sqrt(rv + ctx.get("eps", BN_EPS))
        xhat = (x - rm) * inv_std
        return gamma * xhat + beta, (xhat, inv_std)

    def ibwd(g, a, out, saved, ctx, needs):
        xhat, inv_std = saved
        axes = (0, 2, 3, 4)
        return (g * a[1] * inv_std, (g * xhat).sum(axis=axes, keepdims=True),
                g.sum(axis=axes, keepdims=True), None, None)

    register_op("batchnorm_infer", ifwd, ibwd)


_reg_conv()
_reg_pool_act()
_reg_bn()


# ---------------------------------------------------------------------------
# Tensor-level API


def conv3d(x: Tensor, p: ConvParams) -> Tensor:
    return Tensor(conv3d_forward(x.data, p.weights.data, p.bias.data))


def tconv3d(x: Tensor, p: ConvParams) -> Tensor:
    return Tensor(tconv3d_forward(x.data, p.weights.data, p.bias.data))


def maxpool3d(x: Tensor) -> tuple[Tensor, np.ndarray]:
    out, idx = maxpool3d_forward(x.data)
    return Tensor(out), idx


def relu(x: Tensor) -> Tensor:
    return Tensor(np.maximum(x.data, 0))


def softmax_channels(x: Tensor) -> Tensor:
    return Tensor(softmax_forward(x.data))


def update_running_stats(p: BNParams, mean, var) -> None:
    mom = p.momentum
    dtype = p.running_mean.dtype
    p.running_mean = Tensor((mom * p.running_mean.data + (1 - mom) * mean).astype(dtype))
    p.running_var = Tensor((mom * p.running_var.data + (1 - mom) * var).astype(dtype))


def batchnorm3d(x: Tensor, p: BNParams, mode: str = "train") -> Tensor:
    """Batch normalization over (n, d, h, w) per channel.

    Train mode normalizes with the biased batch variance and folds the batch
    statistics into ``p``'s running estimates
    (``running = momentum * running + (1 - momentum) * batch``).
    """
    if x.shape[1] != p.gamma.size:
        raise ShapeError(f"input has {x.shape[1]} channels, BN has {p.gamma.size}")
    if mode == "train":
        out, (_, _, mean, var) = batchnorm_train_forward(x.data, p.gamma.data, p.beta.data, p.eps)
        update_running_stats(p, mean, var)
        return Tensor(out)
    if mode == "infer":
        inv_std = 1.0 / np.sqrt(p.running_var.data + p.eps)
        return Tensor(p.gamma.data * (x.data - p.running_mean.data) * inv_std + p.beta.data)
    raise ValueError(f"unknown batchnorm mode {mode!r}")
