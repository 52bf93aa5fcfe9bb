"""Differentiable neural layers.

Every layer is a parameter record plus a pair of pure functions: a forward
pass returning ``(output, cache)`` and a backward pass that consumes the
cache and the upstream gradient, accumulates parameter gradients into the
record's tensors, and returns the gradient w.r.t. the layer input as a raw
array. The convolution kernels are built on chunked im2col so peak memory
stays bounded for full-scene inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ParameterError, ShapeError, StatisticsError
from .tensor import Tensor, softmax_vjp

# Cap on the transient im2col patch buffer per chunk.
_CHUNK_BYTES = 64 << 20


def conv_out_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def tconv_out_size(n: int, k: int, stride: int, padding: int, output_padding: int) -> int:
    return (n - 1) * stride - 2 * padding + k + output_padding


# ---------------------------------------------------------------------------
# raw convolution kernels (numpy arrays in, numpy arrays out)


def _pad2d(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def _gather_columns(xp: np.ndarray, kh, kw, stride, r0, r1, wo) -> np.ndarray:
    """im2col block for output rows [r0, r1): [Ci*kh*kw, N*(r1-r0)*Wo].

    Built kernel-tap by kernel-tap from strided slices, which copies long
    contiguous runs instead of gathering element-wise.
    """
    n, ci = xp.shape[0], xp.shape[1]
    rows = r1 - r0
    cols = np.empty((ci, kh, kw, n, rows, wo), dtype=xp.dtype)
    for a in range(kh):
        for b in range(kw):
            src = xp[:, :, a + r0 * stride : a + (r1 - 1) * stride + 1 : stride,
                     b : b + (wo - 1) * stride + 1 : stride]
            cols[:, a, b] = src.transpose(1, 0, 2, 3)
    return cols.reshape(ci * kh * kw, n * rows * wo)


def _conv_row_chunk(n, ci, kh, kw, wo, itemsize) -> int:
    row_bytes = n * ci * kh * kw * wo * itemsize
    return max(1, _CHUNK_BYTES // max(1, row_bytes))


def _conv2d_im2col(xp, w, stride, n, ci, co, kh, kw, ho, wo) -> np.ndarray:
    wm = w.reshape(co, -1)
    out = np.empty((n, co, ho, wo), dtype=xp.dtype)
    rows = _conv_row_chunk(n, ci, kh, kw, wo, xp.dtype.itemsize)
    for r0 in range(0, ho, rows):
        r1 = min(r0 + rows, ho)
        cols = _gather_columns(xp, kh, kw, stride, r0, r1, wo)
        y = wm @ cols  # [Co, N*(r1-r0)*Wo]
        out[:, :, r0:r1] = y.reshape(co, n, r1 - r0, wo).transpose(1, 0, 2, 3)
    return out


def _conv2d_kn2row(xp, w, stride, n, ci, co, kh, kw, ho, wo) -> np.ndarray:
    """GEMM over channels only, then shift-accumulate the kernel taps.

    Avoids the kh*kw im2col blow-up; preferable when the column matrix
    would be large or the output channel count is small.
    """
    hp, wp = xp.shape[2], xp.shape[3]
    w_taps = np.ascontiguousarray(w.transpose(0, 2, 3, 1)).reshape(co * kh * kw, ci)
    x_flat = np.ascontiguousarray(xp.transpose(1, 0, 2, 3)).reshape(ci, -1)
    out = np.zeros((co, n, ho, wo), dtype=xp.dtype)
    w_rows = w_taps.reshape(co, kh, kw, ci)
    tap_bytes = co * kw * n * hp * wp * xp.dtype.itemsize
    rows_per_chunk = max(1, (2 * _CHUNK_BYTES) // max(1, tap_bytes))
    for a0 in range(0, kh, rows_per_chunk):
        a1 = min(a0 + rows_per_chunk, kh)
        taps = np.ascontiguousarray(w_rows[:, a0:a1]).reshape(-1, ci) @ x_flat
        taps = taps.reshape(co, a1 - a0, kw, n, hp, wp)
        for a in range(a0, a1):
            for b in range(kw):
                out += taps[:, a - a0, b][
                    :, :, a : a + (ho - 1) * stride + 1 : stride,
                    b : b + (wo - 1) * stride + 1 : stride,
                ]
    return np.ascontiguousarray(out.transpose(1, 0, 2, 3))


def _conv2d_raw(x: np.ndarray, w: np.ndarray, stride: int, padding: int) -> np.ndarray:
    """Cross-correlate x [N,Ci,H,W] with w [Co,Ci,kh,kw]."""
    n, ci, h, wd = x.shape
    co, ci2, kh, kw = w.shape
    if ci != ci2:
        raise ShapeError(f"input has {ci} channels, kernel expects {ci2}")
    ho = conv_out_size(h, kh, stride, padding)
    wo = conv_out_size(wd, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"kernel {kh}x{kw} does not fit input {h}x{wd} (padding {padding})")

    xp = _pad2d(x, padding)
    cols_bytes = ci * kh * kw * n * ho * wo * x.dtype.itemsize
    if ci >= 16 and (co < 16 or cols_bytes > _CHUNK_BYTES):
        return _conv2d_kn2row(xp, w, stride, n, ci, co, kh, kw, ho, wo)
    return _conv2d_im2col(xp, w, stride, n, ci, co, kh, kw, ho, wo)


def _conv2d_weight_grad(
    x: np.ndarray, gy: np.ndarray, stride: int, padding: int, kh: int, kw: int
) -> np.ndarray:
    """Gradient of a conv's kernel: correlate input windows with gy."""
    n, ci, h, wd = x.shape
    n2, co, ho, wo = gy.shape
    xp = _pad2d(x, padding)
    if co < 8 and ci >= 16:
        # embed gy at each tap's positions, then one GEMM against the input
        hp, wp = xp.shape[2], xp.shape[3]
        gy_t = np.ascontiguousarray(gy.transpose(1, 0, 2, 3))
        embed = np.zeros((co, kh, kw, n, hp, wp), dtype=x.dtype)
        for a in range(kh):
            for b in range(kw):
                embed[:, a, b][
                    :, :, a : a + (ho - 1) * stride + 1 : stride,
                    b : b + (wo - 1) * stride + 1 : stride,
                ] = gy_t
        x_flat = np.ascontiguousarray(xp.transpose(1, 0, 2, 3)).reshape(ci, -1)
        gw_taps = embed.reshape(co * kh * kw, -1) @ x_flat.T
        return np.ascontiguousarray(
            gw_taps.reshape(co, kh, kw, ci).transpose(0, 3, 1, 2)
        )

    gw = np.zeros((co, ci * kh * kw), dtype=x.dtype)
    rows = _conv_row_chunk(n, ci, kh, kw, wo, x.dtype.itemsize)
    for r0 in range(0, ho, rows):
        r1 = min(r0 + rows, ho)
        cols = _gather_columns(xp, kh, kw, stride, r0, r1, wo)
        gy_blk = np.ascontiguousarray(gy[:, :, r0:r1].transpose(1, 0, 2, 3)).reshape(co, -1)
        gw += gy_blk @ cols.T
    return gw.reshape(co, ci, kh, kw)


def _conv2d_input_grad(
    gy: np.ndarray, w: np.ndarray, stride: int, padding: int, in_hw: tuple
) -> np.ndarray:
    """Scatter gy back through a conv: dilate by the stride, then correlate
    with the spatially flipped, channel-transposed kernel at stride 1.

    Also the forward map of the matching transposed convolution, which keeps
    the conv/tconv pair adjoint by construction.
    """
    n, co, ho, wo = gy.shape
    co2, ci, kh, kw = w.shape
    if co != co2:
        raise ShapeError(f"upstream has {co} channels, kernel expects {co2}")
    h, wd = in_hw
    hp, wp = h + 2 * padding, wd + 2 * padding
    # windows never covered by the strided sweep receive zero gradient
    rem_h = hp - ((ho - 1) * stride + kh)
    rem_w = wp - ((wo - 1) * stride + kw)
    if rem_h < 0 or rem_w < 0:
        raise ShapeError(f"upstream {ho}x{wo} inconsistent with input {h}x{wd}")

    hd = (ho - 1) * stride + 1
    wdil = (wo - 1) * stride + 1
    z = np.zeros((n, co, hd + 2 * (kh - 1) + rem_h, wdil + 2 * (kw - 1) + rem_w), dtype=gy.dtype)
    z[:, :, kh - 1 : kh - 1 + hd : stride, kw - 1 : kw - 1 + wdil : stride] = gy

    w_flip = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    gx_pad = _conv2d_raw(z, w_flip, 1, 0)
    return gx_pad[:, :, padding : padding + h, padding : padding + wd]


def _depthwise_raw(x: np.ndarray, w: np.ndarray, padding: int) -> np.ndarray:
    """Per-channel spatial correlation at stride 1; w is [C,kh,kw]."""
    n, c, h, wd = x.shape
    c2, kh, kw = w.shape
    if c != c2:
        raise ShapeError(f"input has {c} channels, depthwise kernel has {c2}")
    xp = _pad2d(x, padding)
    ho = h + 2 * padding - kh + 1
    wo = wd + 2 * padding - kw + 1
    out = np.zeros((n, c, ho, wo), dtype=x.dtype)
    for a in range(kh):
        for b in range(kw):
            out += w[:, a, b][None, :, None, None] * xp[:, :, a : a + ho, b : b + wo]
    return out


def _channel_mix(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Per-pixel linear map across channels; w is [Cout, Cin]."""
    y = np.tensordot(w, x, axes=(1, 1))
    return np.ascontiguousarray(y.transpose(1, 0, 2, 3))


# ---------------------------------------------------------------------------
# 2-D convolution


@dataclass
class Conv2dParams:
    weights: Tensor  # [out_ch, in_ch, kh, kw]
    bias: Tensor  # [out_ch]
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        co, ci, kh, kw = self.weights.shape
        if kh != kw:
            raise ParameterError(f"square kernels only, got {kh}x{kw}")
        if self.stride not in (1, 2):
            raise ParameterError(f"stride must be 1 or 2, got {self.stride}")
        if self.padding < 0:
            raise ParameterError("padding must be non-negative")


@dataclass
class Conv2dCache:
    x: np.ndarray
    params: Conv2dParams


def conv2d(x: Tensor, p: Conv2dParams):
    kh = p.weights.shape[2]
    if x.data.shape[2] + 2 * p.padding < kh:
        raise ShapeError("input smaller than kernel after padding")
    y = _conv2d_raw(x.data, p.weights.data, p.stride, p.padding)
    y += p.bias.data[None, :, None, None]
    return Tensor(y), Conv2dCache(x.data, p)


def conv2d_backward(cache: Conv2dCache, gy: np.ndarray) -> np.ndarray:
    p = cache.params
    kh, kw = p.weights.shape[2], p.weights.shape[3]
    p.weights.accumulate_grad(
        _conv2d_weight_grad(cache.x, gy, p.stride, p.padding, kh, kw)
    )
    p.bias.accumulate_grad(gy.sum(axis=(0, 2, 3)))
    return _conv2d_input_grad(gy, p.weights.data, p.stride, p.padding, cache.x.shape[2:])


# ---------------------------------------------------------------------------
# transposed convolution


@dataclass
class TransposedConv2dParams:
    weights: Tensor  # [in_ch, out_ch, kh, kw]
    bias: Tensor  # [out_ch]
    stride: int = 1
    padding: int = 0
    output_padding: int = 0

    def __post_init__(self):
        ci, co, kh, kw = self.weights.shape
        if kh != kw:
            raise ParameterError(f"square kernels only, got {kh}x{kw}")
        if self.stride not in (1, 2):
            raise ParameterError(f"stride must be 1 or 2, got {self.stride}")
        if self.padding < 0:
            raise ParameterError("padding must be non-negative")
        if not 0 <= self.output_padding < self.stride:
            raise ParameterError(
                f"output_padding {self.output_padding} must be < stride {self.stride}"
            )


@dataclass
class TConv2dCache:
    x: np.ndarray
    params: TransposedConv2dParams


def transposed_conv2d(x: Tensor, p: TransposedConv2dParams):
    n, ci, h, wd = x.data.shape
    kh = p.weights.shape[2]
    ho = tconv_out_size(h, kh, p.stride, p.padding, p.output_padding)
    wo = tconv_out_size(wd, kh, p.stride, p.padding, p.output_padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"transposed conv output {ho}x{wo} not positive")
    y = _conv2d_input_grad(x.data, p.weights.data, p.stride, p.padding, (ho, wo))
    y += p.bias.data[None, :, None, None]
    return Tensor(y), TConv2dCache(x.data, p)


def transposed_conv2d_backward(cache: TConv2dCache, gy: np.ndarray) -> np.ndarray:
    p = cache.params
    kh, kw = p.weights.shape[2], p.weights.shape[3]
    # in the adjoint view, gy plays the conv input and x the conv output grad
    p.weights.accumulate_grad(
        _conv2d_weight_grad(gy, cache.x, p.stride, p.padding, kh, kw)
    )
    p.bias.accumulate_grad(gy.sum(axis=(0, 2, 3)))
    return _conv2d_raw(gy, p.weights.data, p.stride, p.padding)


# ---------------------------------------------------------------------------
# batch normalization


@dataclass
class BatchNormParams:
    scale: Tensor  # [ch]
    shift: Tensor  # [ch]
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    def __post_init__(self):
        if not 0.0 < self.momentum < 1.0:
            raise ParameterError(f"momentum {self.momentum} outside (0,1)")
        if self.eps <= 0.0:
            raise ParameterError("eps must be positive")


@dataclass
class BatchNormCache:
    params: BatchNormParams
    training: bool
    xhat: np.ndarray
    istd: np.ndarray
    count: int


def batchnorm(x: Tensor, p: BatchNormParams, training: bool):
    data = x.data
    axes = (0, 2, 3)
    count = data.shape[0] * data.shape[2] * data.shape[3]
    if training:
        if count < 2:
            raise StatisticsError("batch statistics need at least 2 elements per channel")
        mean = data.mean(axis=axes)
        var = data.var(axis=axes)
        m = p.momentum
        p.running_mean *= 1.0 - m
        p.running_mean += m * mean
        p.running_var *= 1.0 - m
        p.running_var += m * var * (count / (count - 1))
    else:
        mean = p.running_mean
        var = p.running_var
    istd = 1.0 / np.sqrt(var + p.eps)
    xhat = (data - mean[None, :, None, None]) * istd[None, :, None, None]
    y = p.scale.data[None, :, None, None] * xhat + p.shift.data[None, :, None, None]
    return Tensor(y), BatchNormCache(p, training, xhat, istd, count)


def batchnorm_backward(cache: BatchNormCache, gy: np.ndarray) -> np.ndarray:
    p = cache.params
    axes = (0, 2, 3)
    xhat, istd = cache.xhat, cache.istd

    p.scale.accumulate_grad((gy * xhat).sum(axis=axes))
    p.shift.accumulate_grad(gy.sum(axis=axes))

    gxhat = gy * p.scale.data[None, :, None, None]
    if not cache.training:
        return gxhat * istd[None, :, None, None]

    m = float(cache.count)
    sum_g = gxhat.sum(axis=axes)
    sum_gx = (gxhat * xhat).sum(axis=axes)
    gx = gxhat - (sum_g[None, :, None, None] + xhat * sum_gx[None, :, None, None]) / m
    gx *= istd[None, :, None, None]
    return gx


# ---------------------------------------------------------------------------
# ReLU


def relu(x: Tensor):
    mask = x.data > 0
    return Tensor(np.where(mask, x.data, 0.0)), mask


def relu_backward(mask: np.ndarray, gy: np.ndarray) -> np.ndarray:
    return np.where(mask, gy, 0.0)


# ---------------------------------------------------------------------------
# convolutional token projection (depthwise 3x3 + pointwise 1x1, then flatten)


@dataclass
class SeparableConvParams:
    depthwise: Tensor  # [C, kh, kw]
    depthwise_bias: Tensor  # [C]
    pointwise: Tensor  # [Cout, C]
    pointwise_bias: Tensor  # [Cout]

    @property
    def kernel(self) -> int:
        return self.depthwise.shape[1]


@dataclass
class ProjectionParams:
    q: SeparableConvParams
    k: SeparableConvParams
    v: SeparableConvParams


@dataclass
class ProjectionTriple:
    q: Tensor  # [N, tokens, d_model]
    k: Tensor
    v: Tensor


@dataclass
class _BranchCache:
    x: np.ndarray
    d: np.ndarray
    params: SeparableConvParams


@dataclass
class ProjectionCache:
    branches: tuple
    hw: tuple


def _branch_forward(x: np.ndarray, bp: SeparableConvParams):
    pad = (bp.kernel - 1) // 2
    d = _depthwise_raw(x, bp.depthwise.data, pad)
    d += bp.depthwise_bias.data[None, :, None, None]
    y = _channel_mix(d, bp.pointwise.data)
    y += bp.pointwise_bias.data[None, :, None, None]
    n, c, h, w = y.shape
    tokens = np.ascontiguousarray(y.transpose(0, 2, 3, 1)).reshape(n, h * w, c)
    return tokens, _BranchCache(x, d, bp)


def _branch_backward(cache: _BranchCache, g_tokens: np.ndarray, hw: tuple) -> np.ndarray:
    bp = cache.params
    h, w = hw
    n, t, c = g_tokens.shape
    gy = np.ascontiguousarray(g_tokens.reshape(n, h, w, c).transpose(0, 3, 1, 2))

    bp.pointwise_bias.accumulate_grad(gy.sum(axis=(0, 2, 3)))
    bp.pointwise.accumulate_grad(np.tensordot(gy, cache.d, axes=([0, 2, 3], [0, 2, 3])))
    gd = _channel_mix(gy, bp.pointwise.data.T)

    bp.depthwise_bias.accumulate_grad(gd.sum(axis=(0, 2, 3)))
    kh = bp.kernel
    pad = (kh - 1) // 2
    xp = _pad2d(cache.x, pad)
    gw = np.empty_like(bp.depthwise.data)
    for a in range(kh):
        for b in range(kh):
            gw[:, a, b] = (xp[:, :, a : a + h, b : b + w] * gd).sum(axis=(0, 2, 3))
    bp.depthwise.accumulate_grad(gw)

    # scatter gd back through the depthwise window (full correlation with flip)
    gxp = np.zeros_like(xp)
    for a in range(kh):
        for b in range(kh):
            gxp[:, :, a : a + h, b : b + w] += gd * bp.depthwise.data[:, a, b][None, :, None, None]
    return gxp[:, :, pad : pad + cache.x.shape[2], pad : pad + cache.x.shape[3]]


def conv_projection(f: Tensor, p: ProjectionParams):
    """Project a feature map to query/key/value token sequences."""
    n, c, h, w = f.data.shape
    q, cq = _branch_forward(f.data, p.q)
    k, ck = _branch_forward(f.data, p.k)
    v, cv = _branch_forward(f.data, p.v)
    triple = ProjectionTriple(Tensor(q), Tensor(k), Tensor(v))
    return triple, ProjectionCache((cq, ck, cv), (h, w))


def conv_projection_backward(
    cache: ProjectionCache, gq: np.ndarray, gk: np.ndarray, gv: np.ndarray
) -> np.ndarray:
    cq, ck, cv = cache.branches
    gx = _branch_backward(cq, gq, cache.hw)
    gx += _branch_backward(ck, gk, cache.hw)
    gx += _branch_backward(cv, gv, cache.hw)
    return gx


# ---------------------------------------------------------------------------
# pointwise (1x1) convolution


@dataclass
class PointwiseConvParams:
    weights: Tensor  # [Cout, Cin, 1, 1]
    bias: Tensor  # [Cout]

    def __post_init__(self):
        if self.weights.shape[2:] != (1, 1):
            raise ParameterError("pointwise kernels must be 1x1")


@dataclass
class PointwiseCache:
    x: np.ndarray
    params: PointwiseConvParams


def pointwise_conv(x: Tensor, p: PointwiseConvParams):
    w = p.weights.data[:, :, 0, 0]
    y = _channel_mix(x.data, w)
    y += p.bias.data[None, :, None, None]
    return Tensor(y), PointwiseCache(x.data, p)


def pointwise_conv_backward(cache: PointwiseCache, gy: np.ndarray) -> np.ndarray:
    p = cache.params
    gw = np.tensordot(gy, cache.x, axes=([0, 2, 3], [0, 2, 3]))
    p.weights.accumulate_grad(gw[:, :, None, None])
    p.bias.accumulate_grad(gy.sum(axis=(0, 2, 3)))
    return _channel_mix(gy, p.weights.data[:, :, 0, 0].T)


# ---------------------------------------------------------------------------
# multi-head self-attention over token sequences


@dataclass
class AttentionParams:
    heads: int
    d_head: int
    wq: Tensor  # [d_model, heads*d_head]
    wk: Tensor
    wv: Tensor
    wo: Tensor  # [heads*d_head, d_model]
    wo_bias: Tensor  # [d_model]

    def __post_init__(self):
        if self.heads < 1 or self.d_head < 1:
            raise ParameterError("heads and d_head must be positive")
        hd = self.heads * self.d_head
        if self.wq.shape[1] != hd or self.wo.shape[0] != hd:
            raise ShapeError(
                f"head maps sized for {self.wq.shape[1]} features, expected {hd}"
            )


@dataclass
class AttentionCache:
    params: AttentionParams
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    qm: np.ndarray
    km: np.ndarray
    vm: np.ndarray
    weights: list  # per-head softmax weights [N,T,T]
    ctx: np.ndarray  # concatenated head outputs [N,T,heads*d_head]


def _project_tokens(tokens: np.ndarray, w: np.ndarray) -> np.ndarray:
    n, t, d = tokens.shape
    return (tokens.reshape(-1, d) @ w).reshape(n, t, -1)


def multi_head_attention(triple: ProjectionTriple, p: AttentionParams, need_cache: bool = True):
    q, k, v = triple.q.data, triple.k.data, triple.v.data
    if q.shape != k.shape or q.shape != v.shape:
        raise ShapeError("Q, K, V must share a shape")
    if q.shape[2] != p.wq.shape[0]:
        raise ShapeError(f"tokens have width {q.shape[2]}, head maps expect {p.wq.shape[0]}")
    n, t, d = q.shape
    dh = p.d_head
    scale = 1.0 / math.sqrt(dh)

    qm = _project_tokens(q, p.wq.data)
    km = _project_tokens(k, p.wk.data)
    vm = _project_tokens(v, p.wv.data)

    ctx = np.empty_like(qm)
    weights = []
    for h in range(p.heads):
        sl = slice(h * dh, (h + 1) * dh)
        scores = np.matmul(qm[:, :, sl], km[:, :, sl].transpose(0, 2, 1))
        scores *= scale
        scores -= scores.max(axis=2, keepdims=True)
        np.exp(scores, out=scores)
        scores /= scores.sum(axis=2, keepdims=True)
        ctx[:, :, sl] = np.matmul(scores, vm[:, :, sl])
        if need_cache:
            weights.append(scores)
        else:
            del scores

    out = _project_tokens(ctx, p.wo.data)
    out += p.wo_bias.data[None, None, :]
    cache = AttentionCache(p, q, k, v, qm, km, vm, weights, ctx) if need_cache else None
    return Tensor(out), cache


def multi_head_attention_backward(cache: AttentionCache, gy: np.ndarray):
    p = cache.params
    n, t, d = gy.shape
    dh = p.d_head
    scale = 1.0 / math.sqrt(dh)

    p.wo_bias.accumulate_grad(gy.sum(axis=(0, 1)))
    p.wo.accumulate_grad(cache.ctx.reshape(-1, p.heads * dh).T @ gy.reshape(-1, d))
    gctx = _project_tokens(gy, p.wo.data.T)

    gqm = np.empty_like(cache.qm)
    gkm = np.empty_like(cache.km)
    gvm = np.empty_like(cache.vm)
    for h in range(p.heads):
        sl = slice(h * dh, (h + 1) * dh)
        a = cache.weights[h]
        gc = gctx[:, :, sl]
        ga = np.matmul(gc, cache.vm[:, :, sl].transpose(0, 2, 1))
        gvm[:, :, sl] = np.matmul(a.transpose(0, 2, 1), gc)
        gs = softmax_vjp(a, ga, 2)
        gs *= scale
        gqm[:, :, sl] = np.matmul(gs, cache.km[:, :, sl])
        gkm[:, :, sl] = np.matmul(gs.transpose(0, 2, 1), cache.qm[:, :, sl])

    hd = p.heads * dh
    p.wq.accumulate_grad(cache.q.reshape(-1, d).T @ gqm.reshape(-1, hd))
    p.wk.accumulate_grad(cache.k.reshape(-1, d).T @ gkm.reshape(-1, hd))
    p.wv.accumulate_grad(cache.v.reshape(-1, d).T @ gvm.reshape(-1, hd))

    gq = _project_tokens(gqm, p.wq.data.T)
    gk = _project_tokens(gkm, p.wk.data.T)
    gv = _project_tokens(gvm, p.wv.data.T)
    return gq, gk, gv
