"""Encoder and head assembly plus analytic parameter/FLOP accounting.

The tabular encoder expands each row into a [channels, length] pseudo-sequence
with a dense stem, runs a stack of residual attention blocks (channels double
and length halves with stride 2 on every second block) and global-average
pools to a feature vector. The image encoder is deliberately small: images are
an auxiliary training-time modality here, so a plain MLP (default) or a tiny
strided conv net is enough to carry the signal.

Parameter dicts use hierarchical names. The tabular encoder always lives under
``encoder.`` so pre-trained weights drop into downstream models unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from tabmodal import layers as L
from tabmodal import tensor as T
from tabmodal.tensor import Tensor

PRETRAIN_STRATEGIES = ("mtm_mask", "mtm_feature", "mmcl", "mt_cmtm")
CONTRASTIVE_KINDS = ("infonce", "clip", "simsiam", "barlow_twins")


@dataclass(frozen=True)
class TabularConfig:
    input_len: int
    stem_channels: int = 32
    stem_length: int = 16
    n_blocks: int = 4
    reduction_ratio: int = 4
    spatial_kernel: int = 7

    def __post_init__(self):
        if self.input_len < 1:
            raise ValueError("input_len must be >= 1")
        if not 1 <= self.n_blocks <= 8:
            raise ValueError("n_blocks must be in 1..8")
        if self.stem_length < 2 ** (self.n_blocks // 2):
            raise ValueError("stem_length too short for the stride schedule")

    @property
    def block_specs(self) -> list:
        specs = []
        channels = self.stem_channels
        for i in range(1, self.n_blocks + 1):
            grow = (i % 2 == 0)  # stride 2 and channel doubling every second block
            spec = L.BlockSpec(c_in=channels,
                               c_out=channels * 2 if grow else channels,
                               stride=2 if grow else 1,
                               reduction_ratio=self.reduction_ratio,
                               spatial_kernel=self.spatial_kernel)
            specs.append(spec)
            channels = spec.c_out
        return specs

    @property
    def feature_dim(self) -> int:
        return self.stem_channels * 2 ** (self.n_blocks // 2)


@dataclass(frozen=True)
class ImageConfig:
    kind: str = "mlp"
    height: int = 32
    width: int = 32
    channels: int = 1
    feature_dim: int = 64
    mlp_hidden: int = 512
    cnn_channels: tuple = (8, 16)
    cnn_kernel: int = 5

    def __post_init__(self):
        if self.kind not in ("mlp", "small_cnn"):
            raise ValueError(f"unknown image encoder kind {self.kind!r}")


@dataclass(frozen=True)
class EncoderConfig:
    tabular: TabularConfig
    image: ImageConfig = field(default_factory=ImageConfig)
    projection_dim: int = 128
    temperature: float = 0.1

    def __post_init__(self):
        if self.projection_dim < 2:
            raise ValueError("projection_dim must be >= 2")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")


# ---------------------------------------------------------------------------
# tabular encoder


def tabular_encoder_init(cfg: TabularConfig, rng, prefix: str = "encoder.") -> tuple[dict, dict]:
    params, state = {}, {}
    params.update(L.dense_init(rng, cfg.input_len,
                               cfg.stem_channels * cfg.stem_length, f"{prefix}stem."))
    for i, spec in enumerate(cfg.block_specs, start=1):
        p, s = L.residual_block_init(spec, rng, f"{prefix}block{i}.")
        params.update(p)
        state.update(s)
    return params, state


def tabular_encode(cfg: TabularConfig, params: dict, state: dict, x: Tensor,
                   mode: str, prefix: str = "encoder.") -> Tensor:
    """Rows [batch, L] -> features [batch, D]."""
    if x.ndim != 2 or x.shape[1] != cfg.input_len:
        raise T.ShapeError(f"tabular_encode: expected [batch, {cfg.input_len}], got {x.shape}")
    h = L.dense_forward(params, x, f"{prefix}stem.")
    h = T.reshape(h, (x.shape[0], cfg.stem_channels, cfg.stem_length))
    for i, spec in enumerate(cfg.block_specs, start=1):
        h = L.residual_block_forward(spec, params, state, h, mode, f"{prefix}block{i}.")
    return T.mean(h, axis=2)


# ---------------------------------------------------------------------------
# image encoder


def image_encoder_init(cfg: ImageConfig, rng, prefix: str = "image.") -> dict:
    params = {}
    flat = cfg.height * cfg.width * cfg.channels
    if cfg.kind == "mlp":
        params.update(L.dense_init(rng, flat, cfg.mlp_hidden, f"{prefix}fc1."))
        params.update(L.dense_init(rng, cfg.mlp_hidden, cfg.feature_dim, f"{prefix}fc2."))
    else:
        c1, c2 = cfg.cnn_channels
        params.update(L.conv_init(rng, cfg.channels, c1, cfg.cnn_kernel, f"{prefix}conv1."))
        params.update(L.conv_init(rng, c1, c2, cfg.cnn_kernel, f"{prefix}conv2."))
        params.update(L.dense_init(rng, c2, cfg.feature_dim, f"{prefix}fc."))
    return params


def image_encode(cfg: ImageConfig, params: dict, x: Tensor,
                 prefix: str = "image.") -> Tensor:
    """Images [batch, H, W, C] with pixels in [0,1] -> features [batch, D_i]."""
    if x.ndim != 4 or x.shape[1:] != (cfg.height, cfg.width, cfg.channels):
        raise T.ShapeError(f"image_encode: expected [batch, {cfg.height}, {cfg.width}, "
                           f"{cfg.channels}], got {x.shape}")
    raw = x.numpy()
    if raw.min() < 0.0 or raw.max() > 1.0:
        raise ValueError("image_encode: pixel values must lie in [0, 1]")
    batch = x.shape[0]
    if cfg.kind == "mlp":
        h = T.reshape(x, (batch, cfg.height * cfg.width * cfg.channels))
        h = T.relu(L.dense_forward(params, h, f"{prefix}fc1."))
        return L.dense_forward(params, h, f"{prefix}fc2.")
    # small_cnn: 1D convs over the row-major pixel sequence, channels first
    seq = T.transpose(T.reshape(x, (batch, cfg.height * cfg.width, cfg.channels)), (0, 2, 1))
    pad = (cfg.cnn_kernel - 1) // 2
    h = T.relu(L.conv_forward(params, seq, f"{prefix}conv1.", stride=2, pad=pad))
    h = T.relu(L.conv_forward(params, h, f"{prefix}conv2.", stride=2, pad=pad))
    return L.dense_forward(params, T.mean(h, axis=2), f"{prefix}fc.")


# ---------------------------------------------------------------------------
# heads


def projection_init(rng, in_dim: int, proj_dim: int, prefix: str) -> dict:
    params = L.dense_init(rng, in_dim, in_dim, f"{prefix}fc1.")
    params.update(L.dense_init(rng, in_dim, proj_dim, f"{prefix}fc2."))
    return params


def project(params: dict, v: Tensor, prefix: str = "") -> Tensor:
    """MLP into the shared space, rows normalized to unit length."""
    h = T.relu(L.dense_forward(params, v, f"{prefix}fc1."))
    z = L.dense_forward(params, h, f"{prefix}fc2.")
    return T.l2_normalize(z, axis=1, eps=1e-12)


def mask_head_init(rng, feature_dim: int, input_len: int, prefix: str = "mask_head.") -> dict:
    return L.dense_init(rng, feature_dim, input_len, prefix)


def estimate_mask(params: dict, z_t: Tensor, prefix: str = "mask_head.") -> Tensor:
    """Per-feature probability that the input coordinate was resampled."""
    return T.sigmoid(L.dense_forward(params, z_t, prefix))


def predictor_init(rng, feature_dim: int, out_dim: int, prefix: str = "head.") -> dict:
    return L.dense_init(rng, feature_dim, out_dim, prefix)


def predictor_head(params: dict, v_t: Tensor, prefix: str = "head.") -> Tensor:
    """Regression outputs or classification logits, depending on out_dim."""
    return L.dense_forward(params, v_t, prefix)


# ---------------------------------------------------------------------------
# assemblies


@dataclass(frozen=True)
class Task:
    kind: str      # "regression" | "classification"
    out_dim: int   # target dimension or number of classes

    def __post_init__(self):
        if self.kind not in ("regression", "classification"):
            raise ValueError(f"unknown task kind {self.kind!r}")
        if self.out_dim < 1:
            raise ValueError("out_dim must be >= 1")


def build_downstream(cfg: EncoderConfig, task: Task, seed: int) -> tuple[dict, dict]:
    rng = np.random.default_rng(seed)
    params, state = tabular_encoder_init(cfg.tabular, rng)
    params.update(predictor_init(rng, cfg.tabular.feature_dim, task.out_dim))
    return params, state


def downstream_forward(cfg: EncoderConfig, params: dict, state: dict, x: Tensor,
                       mode: str) -> Tensor:
    v = tabular_encode(cfg.tabular, params, state, x, mode)
    return predictor_head(params, v)


def build_pretrain(cfg: EncoderConfig, strategy: str, seed: int,
                   contrastive: str = "infonce",
                   multitask_mode: str = "uncertainty") -> tuple[dict, dict]:
    """Parameters and state for one pre-training strategy.

    mtm_mask / mtm_feature are tabular-only; mmcl adds the image tower and the
    contrastive heads; mt_cmtm carries both pretext branches plus the
    multi-task combination weights.
    """
    if strategy not in PRETRAIN_STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}")
    if contrastive not in CONTRASTIVE_KINDS:
        raise ValueError(f"unknown contrastive loss {contrastive!r}")
    rng = np.random.default_rng(seed)
    params, state = tabular_encoder_init(cfg.tabular, rng)
    d_t = cfg.tabular.feature_dim
    if strategy in ("mtm_mask", "mt_cmtm"):
        params.update(mask_head_init(rng, d_t, cfg.tabular.input_len))
    if strategy == "mtm_feature":
        params.update(predictor_init(rng, d_t, cfg.tabular.input_len, "recon_head."))
    if strategy in ("mmcl", "mt_cmtm"):
        params.update(image_encoder_init(cfg.image, rng))
        d_i = cfg.image.feature_dim
        p = cfg.projection_dim
        if contrastive in ("infonce", "clip"):
            params.update(projection_init(rng, d_t, p, "proj_t."))
            params.update(projection_init(rng, d_i, p, "proj_i."))
            if contrastive == "clip":
                params["clip.t"] = Tensor(np.log(1.0 / cfg.temperature))
        elif contrastive == "simsiam":
            params.update(L.dense_init(rng, d_t, p, "ss_proj_t."))
            params.update(L.dense_init(rng, d_i, p, "ss_proj_i."))
            params.update(L.dense_init(rng, p, p, "ss_pred."))
        else:  # barlow_twins
            params.update(L.dense_init(rng, d_t, p, "bt_proj_t."))
            params.update(L.dense_init(rng, d_i, p, "bt_proj_i."))
    if strategy == "mt_cmtm" and multitask_mode == "uncertainty":
        params["multitask.s_c"] = T.zeros(())
        params["multitask.s_m"] = T.zeros(())
    return params, state


# ---------------------------------------------------------------------------
# analytic parameter and FLOP accounting (multiply-accumulate counted as 2)


@dataclass(frozen=True)
class ModelStats:
    param_count: int
    flops_per_forward: int


def _dense_stats(in_dim, out_dim, runs=1):
    return in_dim * out_dim + out_dim, 2 * in_dim * out_dim * runs


def _conv_stats(c_in, c_out, kernel, s_out, runs=1):
    return c_in * c_out * kernel + c_out, 2 * c_in * c_out * kernel * s_out * runs


def _conv_len(s, kernel, stride, pad):
    return (s + 2 * pad - kernel) // stride + 1


def _cbam_stats(channels, reduction, spatial_kernel, length):
    hidden = channels // reduction
    p1, f1 = _dense_stats(channels, hidden, runs=2)   # shared MLP runs on avg and max
    p2, f2 = _dense_stats(hidden, channels, runs=2)
    p3, f3 = _conv_stats(2, 1, spatial_kernel, length)
    return p1 + p2 + p3, f1 + f2 + f3


def _tabular_encoder_stats(cfg: TabularConfig) -> tuple[int, int]:
    params, flops = _dense_stats(cfg.input_len, cfg.stem_channels * cfg.stem_length)
    length = cfg.stem_length
    for spec in cfg.block_specs:
        out_len = _conv_len(length, 3, spec.stride, 1)
        p, f = _conv_stats(spec.c_in, spec.c_out, 3, out_len)
        params += p; flops += f
        params += 2 * spec.c_out                                  # bn1 gamma/beta
        p, f = _conv_stats(spec.c_out, spec.c_out, 3, out_len)
        params += p; flops += f
        params += 2 * spec.c_out                                  # bn2
        p, f = _cbam_stats(spec.c_out, spec.reduction_ratio, spec.spatial_kernel, out_len)
        params += p; flops += f
        if spec.has_projection:
            p, f = _conv_stats(spec.c_in, spec.c_out, 1, _conv_len(length, 1, spec.stride, 0))
            params += p; flops += f
        length = out_len
    return params, flops


def _image_encoder_stats(cfg: ImageConfig) -> tuple[int, int]:
    flat = cfg.height * cfg.width * cfg.channels
    if cfg.kind == "mlp":
        p1, f1 = _dense_stats(flat, cfg.mlp_hidden)
        p2, f2 = _dense_stats(cfg.mlp_hidden, cfg.feature_dim)
        return p1 + p2, f1 + f2
    c1, c2 = cfg.cnn_channels
    pad = (cfg.cnn_kernel - 1) // 2
    s1 = _conv_len(cfg.height * cfg.width, cfg.cnn_kernel, 2, pad)
    s2 = _conv_len(s1, cfg.cnn_kernel, 2, pad)
    p1, f1 = _conv_stats(cfg.channels, c1, cfg.cnn_kernel, s1)
    p2, f2 = _conv_stats(c1, c2, cfg.cnn_kernel, s2)
    p3, f3 = _dense_stats(c2, cfg.feature_dim)
    return p1 + p2 + p3, f1 + f2 + f3


def _projection_stats(in_dim, proj_dim):
    p1, f1 = _dense_stats(in_dim, in_dim)
    p2, f2 = _dense_stats(in_dim, proj_dim)
    return p1 + p2, f1 + f2


def model_stats(cfg: EncoderConfig, scope: str = "pretrain",
                strategy: str = "mt_cmtm", contrastive: str = "infonce",
                multitask_mode: str = "uncertainty", task: Task | None = None) -> ModelStats:
    """Analytic counts for one configuration (dense/conv/BN formulas summed
    over the architecture; elementwise work and poolings count 0 FLOPs)."""
    params, flops = _tabular_encoder_stats(cfg.tabular)
    d_t = cfg.tabular.feature_dim
    if scope == "encoder":
        pass
    elif scope == "downstream":
        if task is None:
            raise ValueError("downstream stats need a task")
        p, f = _dense_stats(d_t, task.out_dim)
        params += p; flops += f
    elif scope == "pretrain":
        if strategy in ("mtm_mask", "mt_cmtm"):
            p, f = _dense_stats(d_t, cfg.tabular.input_len)
            params += p; flops += f
        if strategy == "mtm_feature":
            p, f = _dense_stats(d_t, cfg.tabular.input_len)
            params += p; flops += f
        if strategy in ("mmcl", "mt_cmtm"):
            p, f = _image_encoder_stats(cfg.image)
            params += p; flops += f
            d_i = cfg.image.feature_dim
            pr = cfg.projection_dim
            if contrastive in ("infonce", "clip"):
                for dim in (d_t, d_i):
                    p, f = _projection_stats(dim, pr)
                    params += p; flops += f
                if contrastive == "clip":
                    params += 1
            elif contrastive == "simsiam":
                for dim in (d_t, d_i):
                    p, f = _dense_stats(dim, pr)
                    params += p; flops += f
                p, f = _dense_stats(pr, pr, runs=2)  # predictor runs on both towers
                params += p; flops += f
            else:
                for dim in (d_t, d_i):
                    p, f = _dense_stats(dim, pr)
                    params += p; flops += f
        if strategy == "mt_cmtm" and multitask_mode == "uncertainty":
            params += 2
    else:
        raise ValueError(f"unknown scope {scope!r}")
    return ModelStats(param_count=params, flops_per_forward=flops)


def runtime_param_count(params: dict) -> int:
    return int(sum(p.size for p in params.values()))
