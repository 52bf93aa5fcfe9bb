"""The hybrid convolutional-transformer segmentation network.

Three stages: a strided convolutional downsampling block (2 -> 32 -> 32 ->
64 -> 128 channels, 8x spatial reduction), a stack of convolutional
transformer blocks operating on the 1/8-resolution feature map as tokens,
and a transposed-convolution upsampling block back to per-pixel class
logits. Ablation variants drop the core (autoencoder) or the down/up
blocks (transformer_only, capped at 128x128 inputs by attention cost).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericFault, ShapeError
from .layers import (
    AttentionParams,
    BatchNormParams,
    Conv2dParams,
    PointwiseConvParams,
    ProjectionParams,
    SeparableConvParams,
    TransposedConv2dParams,
    batchnorm,
    batchnorm_backward,
    conv2d,
    conv2d_backward,
    conv_projection,
    conv_projection_backward,
    multi_head_attention,
    multi_head_attention_backward,
    pointwise_conv,
    pointwise_conv_backward,
    relu,
    relu_backward,
    transposed_conv2d,
    transposed_conv2d_backward,
)
from .rng import make_rng
from .tensor import Tensor, dtype_of

VARIANTS = ("convtr", "autoencoder", "transformer_only")
TRANSFORMER_ONLY_MAX_INPUT = 128
DOWNSCALE = 8


@dataclass
class ModelConfig:
    patch: int = 512
    classes: int = 3
    depth: int = 5
    heads: int = 5
    d_head: int | None = 24
    widths: tuple = (32, 32, 64, 128)
    variant: str = "convtr"
    precision: str = "single"

    @property
    def d_model(self) -> int:
        return self.widths[-1]

    def head_width(self) -> int:
        if self.d_head is not None:
            return self.d_head
        return max(1, self.d_model // self.heads)

    def dtype(self):
        return dtype_of(self.precision)

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.classes < 2:
            raise ConfigError("need at least 2 classes")
        if self.depth < 1:
            raise ConfigError("transformer depth must be >= 1")
        if self.heads < 1:
            raise ConfigError("head count must be >= 1")
        if len(self.widths) != 4 or any(w < 1 for w in self.widths):
            raise ConfigError(f"widths must be 4 positive integers, got {self.widths}")
        if self.variant == "transformer_only":
            if self.patch > TRANSFORMER_ONLY_MAX_INPUT:
                raise ConfigError(
                    f"transformer_only is capped at {TRANSFORMER_ONLY_MAX_INPUT}x"
                    f"{TRANSFORMER_ONLY_MAX_INPUT} inputs (attention memory); got "
                    f"patch {self.patch}"
                )
        elif self.patch % DOWNSCALE != 0 or self.patch < DOWNSCALE:
            raise ConfigError(f"patch size must be a positive multiple of {DOWNSCALE}")


@dataclass
class CoreBlockParams:
    proj: ProjectionParams
    attn: AttentionParams
    bn: BatchNormParams
    pw: PointwiseConvParams


@dataclass
class ModelParams:
    cfg: ModelConfig
    down_convs: list
    down_bns: list
    core: list
    up_tconvs: list
    up_bns: list
    up_final: Conv2dParams | None
    entry: PointwiseConvParams | None
    exit: PointwiseConvParams | None

    def named_parameters(self) -> dict:
        """Trainable tensors keyed by stable names (insertion order fixed)."""
        out: dict[str, Tensor] = {}
        for i, cp in enumerate(self.down_convs):
            out[f"down.conv{i}.weight"] = cp.weights
            out[f"down.conv{i}.bias"] = cp.bias
        for i, bp in enumerate(self.down_bns):
            out[f"down.bn{i}.scale"] = bp.scale
            out[f"down.bn{i}.shift"] = bp.shift
        for i, blk in enumerate(self.core):
            for branch in ("q", "k", "v"):
                sp = getattr(blk.proj, branch)
                out[f"core.{i}.proj.{branch}.depthwise"] = sp.depthwise
                out[f"core.{i}.proj.{branch}.depthwise_bias"] = sp.depthwise_bias
                out[f"core.{i}.proj.{branch}.pointwise"] = sp.pointwise
                out[f"core.{i}.proj.{branch}.pointwise_bias"] = sp.pointwise_bias
            out[f"core.{i}.attn.wq"] = blk.attn.wq
            out[f"core.{i}.attn.wk"] = blk.attn.wk
            out[f"core.{i}.attn.wv"] = blk.attn.wv
            out[f"core.{i}.attn.wo"] = blk.attn.wo
            out[f"core.{i}.attn.wo_bias"] = blk.attn.wo_bias
            out[f"core.{i}.bn.scale"] = blk.bn.scale
            out[f"core.{i}.bn.shift"] = blk.bn.shift
            out[f"core.{i}.pw.weight"] = blk.pw.weights
            out[f"core.{i}.pw.bias"] = blk.pw.bias
        for i, tp in enumerate(self.up_tconvs):
            out[f"up.tconv{i}.weight"] = tp.weights
            out[f"up.tconv{i}.bias"] = tp.bias
        for i, bp in enumerate(self.up_bns):
            out[f"up.bn{i}.scale"] = bp.scale
            out[f"up.bn{i}.shift"] = bp.shift
        if self.up_final is not None:
            out["up.final.weight"] = self.up_final.weights
            out["up.final.bias"] = self.up_final.bias
        if self.entry is not None:
            out["entry.weight"] = self.entry.weights
            out["entry.bias"] = self.entry.bias
        if self.exit is not None:
            out["exit.weight"] = self.exit.weights
            out["exit.bias"] = self.exit.bias
        return out

    def named_buffers(self) -> dict:
        """Non-trainable state (batch-norm running statistics)."""
        out: dict[str, np.ndarray] = {}
        for i, bp in enumerate(self.down_bns):
            out[f"down.bn{i}.running_mean"] = bp.running_mean
            out[f"down.bn{i}.running_var"] = bp.running_var
        for i, blk in enumerate(self.core):
            out[f"core.{i}.bn.running_mean"] = blk.bn.running_mean
            out[f"core.{i}.bn.running_var"] = blk.bn.running_var
        for i, bp in enumerate(self.up_bns):
            out[f"up.bn{i}.running_mean"] = bp.running_mean
            out[f"up.bn{i}.running_var"] = bp.running_var
        return out

    def state_dict(self) -> dict:
        state = {name: t.data for name, t in self.named_parameters().items()}
        state.update(self.named_buffers())
        return state

    def load_state(self, state: dict) -> None:
        own = self.state_dict()
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise ConfigError(
                f"parameter names do not match: missing {sorted(missing)[:3]}, "
                f"unexpected {sorted(extra)[:3]}"
            )
        for name, arr in own.items():
            src = state[name]
            if tuple(src.shape) != tuple(arr.shape):
                raise ConfigError(f"shape mismatch for {name}: {src.shape} vs {arr.shape}")
            arr[...] = src

    def zero_grad(self) -> None:
        for t in self.named_parameters().values():
            t.zero_grad()


# ---------------------------------------------------------------------------
# initialization


def _kaiming(rng, shape, fan_in, dtype):
    return Tensor(rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape).astype(dtype))


def _zeros_t(shape, dtype):
    return Tensor(np.zeros(shape, dtype=dtype))


def _make_conv(seed, name, out_ch, in_ch, k, stride, padding, dtype) -> Conv2dParams:
    rng = make_rng(seed, "init", name)
    w = _kaiming(rng, (out_ch, in_ch, k, k), in_ch * k * k, dtype)
    return Conv2dParams(w, _zeros_t((out_ch,), dtype), stride, padding)


def _make_tconv(seed, name, in_ch, out_ch, k, stride, padding, output_padding, dtype):
    rng = make_rng(seed, "init", name)
    w = _kaiming(rng, (in_ch, out_ch, k, k), in_ch * k * k, dtype)
    return TransposedConv2dParams(
        w, _zeros_t((out_ch,), dtype), stride, padding, output_padding
    )


def _make_bn(ch, dtype) -> BatchNormParams:
    return BatchNormParams(
        scale=Tensor(np.ones(ch, dtype=dtype)),
        shift=_zeros_t((ch,), dtype),
        running_mean=np.zeros(ch, dtype=dtype),
        running_var=np.ones(ch, dtype=dtype),
    )


def _make_separable(seed, name, ch, dtype) -> SeparableConvParams:
    rng = make_rng(seed, "init", name)
    dw = _kaiming(rng, (ch, 3, 3), 9, dtype)
    pw = _kaiming(rng, (ch, ch), ch, dtype)
    return SeparableConvParams(dw, _zeros_t((ch,), dtype), pw, _zeros_t((ch,), dtype))


# Residual-branch output maps start small so every core block is born
# near the identity; large random mixes destabilize short training runs.
_RESIDUAL_OUT_SCALE = 0.05


def _make_attention(seed, name, d_model, heads, d_head, dtype) -> AttentionParams:
    rng = make_rng(seed, "init", name)
    std = 1.0 / math.sqrt(d_model)
    hd = heads * d_head

    def draw(shape, scale=1.0):
        return Tensor(rng.normal(0.0, std * scale, size=shape).astype(dtype))

    return AttentionParams(
        heads=heads,
        d_head=d_head,
        wq=draw((d_model, hd)),
        wk=draw((d_model, hd)),
        wv=draw((d_model, hd)),
        wo=draw((hd, d_model), _RESIDUAL_OUT_SCALE),
        wo_bias=_zeros_t((d_model,), dtype),
    )


def _make_pointwise(seed, name, out_ch, in_ch, dtype) -> PointwiseConvParams:
    rng = make_rng(seed, "init", name)
    w = _kaiming(rng, (out_ch, in_ch, 1, 1), in_ch, dtype)
    return PointwiseConvParams(w, _zeros_t((out_ch,), dtype))


def build_model(cfg: ModelConfig, seed: int) -> ModelParams:
    """Initialize all parameters for the configured variant, deterministically."""
    cfg.validate()
    dt = cfg.dtype()
    d_model = cfg.d_model
    d_head = cfg.head_width()

    down_convs, down_bns = [], []
    up_tconvs, up_bns = [], []
    up_final = None
    core = []
    entry = exit_ = None

    if cfg.variant in ("convtr", "autoencoder"):
        w0, w1, w2, w3 = cfg.widths
        specs = [(w0, 2, 7, 1, 3), (w1, w0, 3, 2, 1), (w2, w1, 3, 2, 1), (w3, w2, 3, 2, 1)]
        for i, (oc, ic, k, s, p) in enumerate(specs):
            down_convs.append(_make_conv(seed, f"down.conv{i}", oc, ic, k, s, p, dt))
            down_bns.append(_make_bn(oc, dt))
        up_specs = [(w3, w3), (w3, w2), (w2, w1)]
        for i, (ic, oc) in enumerate(up_specs):
            up_tconvs.append(_make_tconv(seed, f"up.tconv{i}", ic, oc, 3, 2, 1, 1, dt))
            up_bns.append(_make_bn(oc, dt))
        up_final = _make_conv(seed, "up.final", cfg.classes, w1, 7, 1, 3, dt)
    else:
        entry = _make_pointwise(seed, "entry", d_model, 2, dt)
        exit_ = _make_pointwise(seed, "exit", cfg.classes, d_model, dt)

    if cfg.variant in ("convtr", "transformer_only"):
        for i in range(cfg.depth):
            proj = ProjectionParams(
                q=_make_separable(seed, f"core.{i}.proj.q", d_model, dt),
                k=_make_separable(seed, f"core.{i}.proj.k", d_model, dt),
                v=_make_separable(seed, f"core.{i}.proj.v", d_model, dt),
            )
            attn = _make_attention(seed, f"core.{i}.attn", d_model, cfg.heads, d_head, dt)
            bn = _make_bn(d_model, dt)
            pw = _make_pointwise(seed, f"core.{i}.pw", d_model, d_model, dt)
            pw.weights.data *= dt(_RESIDUAL_OUT_SCALE)
            core.append(CoreBlockParams(proj, attn, bn, pw))

    return ModelParams(
        cfg=cfg,
        down_convs=down_convs,
        down_bns=down_bns,
        core=core,
        up_tconvs=up_tconvs,
        up_bns=up_bns,
        up_final=up_final,
        entry=entry,
        exit=exit_,
    )


# ---------------------------------------------------------------------------
# forward / backward


def _check_finite(name: str, arr: np.ndarray) -> None:
    if not np.isfinite(arr).all():
        raise NumericFault(f"non-finite values after {name}")


def _conv_bn_relu_forward(h: Tensor, conv_p, bn_p, name, training, tape, conv_fn, conv_bwd):
    h, c = conv_fn(h, conv_p)
    _check_finite(name, h.data)
    if tape is not None:
        tape.append((conv_bwd, c))
    h, cb = batchnorm(h, bn_p, training)
    _check_finite(name + ".bn", h.data)
    if tape is not None:
        tape.append((batchnorm_backward, cb))
    h, mask = relu(h)
    if tape is not None:
        tape.append((relu_backward, mask))
    return h


def downsample_forward(x: Tensor, params: ModelParams, training: bool = False, tape=None):
    """2 x P x P input to d_model x P/8 x P/8 feature map."""
    if x.data.shape[2] % DOWNSCALE or x.data.shape[3] % DOWNSCALE:
        raise ShapeError(f"spatial size {x.data.shape[2:]} not divisible by {DOWNSCALE}")
    h = x
    for i, (cp, bp) in enumerate(zip(params.down_convs, params.down_bns)):
        h = _conv_bn_relu_forward(
            h, cp, bp, f"down.conv{i}", training, tape, conv2d, conv2d_backward
        )
    return h


@dataclass
class _CoreBlockCache:
    proj_cache: object
    attn_cache: object
    bn_cache: object
    pw_cache: object
    hw: tuple


def _core_block_forward(f: Tensor, blk: CoreBlockParams, name, training, tape):
    triple, cproj = conv_projection(f, blk.proj)
    a, cattn = multi_head_attention(triple, blk.attn, need_cache=tape is not None)
    _check_finite(name + ".attn", a.data)
    n, t, d = a.data.shape
    h, w = cproj.hw
    y = f.data + np.ascontiguousarray(a.data.reshape(n, h, w, d).transpose(0, 3, 1, 2))
    yb, cbn = batchnorm(Tensor(y), blk.bn, training)
    pw, cpw = pointwise_conv(yb, blk.pw)
    _check_finite(name + ".pw", pw.data)
    z = Tensor(y + pw.data)
    if tape is not None:
        tape.append((_core_block_backward, _CoreBlockCache(cproj, cattn, cbn, cpw, (h, w))))
    return z


def _core_block_backward(cache: _CoreBlockCache, gz: np.ndarray) -> np.ndarray:
    gy = gz.copy()
    gyb = pointwise_conv_backward(cache.pw_cache, gz)
    gy += batchnorm_backward(cache.bn_cache, gyb)
    gf = gy.copy()
    h, w = cache.hw
    n, d = gy.shape[0], gy.shape[1]
    ga = np.ascontiguousarray(gy.transpose(0, 2, 3, 1)).reshape(n, h * w, d)
    gq, gk, gv = multi_head_attention_backward(cache.attn_cache, ga)
    gf += conv_projection_backward(cache.proj_cache, gq, gk, gv)
    return gf


def transformer_core_forward(f: Tensor, blocks: list, training: bool = False, tape=None):
    """Run the token-attention core; preserves the input shape."""
    h = f
    for i, blk in enumerate(blocks):
        h = _core_block_forward(h, blk, f"core.{i}", training, tape)
    return h


def upsample_forward(f: Tensor, params: ModelParams, training: bool = False, tape=None):
    """d_model x H x W feature map to classes x 8H x 8W logits."""
    h = f
    for i, (tp, bp) in enumerate(zip(params.up_tconvs, params.up_bns)):
        h = _conv_bn_relu_forward(
            h, tp, bp, f"up.tconv{i}", training, tape,
            transposed_conv2d, transposed_conv2d_backward,
        )
    h, c = conv2d(h, params.up_final)
    _check_finite("up.final", h.data)
    if tape is not None:
        tape.append((conv2d_backward, c))
    return h


def _pointwise_step(h: Tensor, p, name, tape):
    h, c = pointwise_conv(h, p)
    _check_finite(name, h.data)
    if tape is not None:
        tape.append((pointwise_conv_backward, c))
    return h


def model_forward(x: Tensor, params: ModelParams, cfg: ModelConfig, training: bool = False):
    """Full forward pass to raw logits. Returns (logits, tape); the tape is
    None in eval mode and otherwise feeds model_backward."""
    n, c, hh, ww = x.data.shape
    if c != 2:
        raise ShapeError(f"expected 2 input channels (HH, HV), got {c}")
    tape: list | None = [] if training else None

    if cfg.variant == "transformer_only":
        if hh > TRANSFORMER_ONLY_MAX_INPUT or ww > TRANSFORMER_ONLY_MAX_INPUT:
            raise ConfigError(
                f"transformer_only rejects inputs larger than "
                f"{TRANSFORMER_ONLY_MAX_INPUT}x{TRANSFORMER_ONLY_MAX_INPUT}, got {hh}x{ww}"
            )
        h = _pointwise_step(x, params.entry, "entry", tape)
        h = transformer_core_forward(h, params.core, training, tape)
        h = _pointwise_step(h, params.exit, "exit", tape)
        return h, tape

    h = downsample_forward(x, params, training, tape)
    if cfg.variant == "convtr":
        h = transformer_core_forward(h, params.core, training, tape)
    h = upsample_forward(h, params, training, tape)
    return h, tape


def model_backward(tape: list, glogits: np.ndarray) -> np.ndarray:
    """Walk the recorded layer sequence in reverse, accumulating parameter
    gradients, and return the gradient w.r.t. the model input."""
    g = glogits
    for backward_fn, cache in reversed(tape):
        g = backward_fn(cache, g)
    return g


def model_predict(x: Tensor, params: ModelParams, cfg: ModelConfig):
    """Eval-mode class probabilities and argmax class map (ties -> lowest id)."""
    logits, _ = model_forward(x, params, cfg, training=False)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=1, keepdims=True)
    class_map = z.argmax(axis=1).astype(np.int64)
    return Tensor(z), class_map


# ---------------------------------------------------------------------------
# attention cost accounting


def attention_tokens(cfg: ModelConfig, size: int | None = None) -> int:
    """Token count the attention core sees for a square input of this size."""
    size = cfg.patch if size is None else size
    if cfg.variant == "transformer_only":
        return size * size
    return (size // DOWNSCALE) * (size // DOWNSCALE)


def score_elements_per_head(cfg: ModelConfig, size: int | None = None) -> int:
    """Elements of one head's attention score matrix (tokens squared)."""
    t = attention_tokens(cfg, size)
    return t * t


def attention_score_macs(cfg: ModelConfig, size: int | None = None) -> int:
    """Multiply-accumulates spent on score and value mixing per forward."""
    t = attention_tokens(cfg, size)
    if cfg.variant == "autoencoder":
        return 0
    return 2 * cfg.depth * cfg.heads * t * t * cfg.head_width()
