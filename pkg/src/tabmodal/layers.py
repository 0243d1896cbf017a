"""Parameterized building blocks for the 1D encoders.

Parameters live in flat dicts mapping hierarchical names ("block1.conv1.w")
to tensors, so a whole model can be registered on a tape, updated by the
optimizer, and serialized without any layer object bookkeeping. Batch-norm
running statistics are kept in a separate non-trainable state dict that the
train-mode forward replaces in place (single writer per model instance).

All convolutions carry a bias. Convs followed by batch norm do not need one,
but a uniform layout keeps the analytic parameter/FLOP accounting identical
for every conv in the network.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from tabmodal import tensor as T
from tabmodal.tensor import Tensor


def _kaiming_fan_in(shape: tuple) -> int:
    # dense [in, out] -> in; conv kernels [c_out, c_in, k] -> c_in * k
    if len(shape) == 2:
        return shape[0]
    if len(shape) == 3:
        return shape[1] * shape[2]
    raise ValueError(f"no fan-in convention for shape {shape}")


def init_params(scheme: str, shapes: dict, seed: int) -> dict:
    """Deterministically initialize named tensors.

    kaiming_uniform draws from [-sqrt(6/fan_in), +sqrt(6/fan_in)] for 2-d and
    3-d weights and zero-fills 1-d tensors (biases).
    """
    rng = np.random.default_rng(seed)
    out = {}
    for name, shape in shapes.items():
        shape = tuple(shape)
        if scheme == "zeros":
            out[name] = T.zeros(shape)
        elif scheme == "ones":
            out[name] = T.ones(shape)
        elif scheme == "kaiming_uniform":
            if len(shape) == 1:
                out[name] = T.zeros(shape)
            else:
                bound = np.sqrt(6.0 / _kaiming_fan_in(shape))
                out[name] = Tensor(rng.uniform(-bound, bound, size=shape))
        else:
            raise ValueError(f"unknown init scheme {scheme!r}")
    return out


def _kaiming(rng, shape) -> Tensor:
    bound = np.sqrt(6.0 / _kaiming_fan_in(shape))
    return Tensor(rng.uniform(-bound, bound, size=shape))


# ---------------------------------------------------------------------------
# dense


def dense_init(rng, in_dim: int, out_dim: int, prefix: str) -> dict:
    return {f"{prefix}w": _kaiming(rng, (in_dim, out_dim)),
            f"{prefix}b": T.zeros((out_dim,))}


def dense_forward(params: dict, x: Tensor, prefix: str = "") -> Tensor:
    """x:[batch, in] @ w + b."""
    w = params[f"{prefix}w"]
    if x.ndim != 2 or x.shape[1] != w.shape[0]:
        raise T.ShapeError(f"dense {prefix!r}: input {x.shape} vs weight {w.shape}")
    return T.add(T.matmul(x, w), params[f"{prefix}b"])


# ---------------------------------------------------------------------------
# conv layer (cross-correlation + bias)


def conv_init(rng, c_in: int, c_out: int, kernel: int, prefix: str) -> dict:
    return {f"{prefix}w": _kaiming(rng, (c_out, c_in, kernel)),
            f"{prefix}b": T.zeros((c_out,))}


def conv_forward(params: dict, x: Tensor, prefix: str = "",
                 stride: int = 1, pad: int = 0) -> Tensor:
    y = T.conv1d(x, params[f"{prefix}w"], stride=stride, pad=pad)
    b = T.reshape(params[f"{prefix}b"], (y.shape[1], 1))
    return T.add(y, T.broadcast_to(b, y.shape))


# ---------------------------------------------------------------------------
# batch norm over [batch, C, S], normalizing each channel across (batch, S)


BN_MOMENTUM = 0.1
BN_EPS = 1e-5


def batchnorm_init(channels: int, prefix: str) -> tuple[dict, dict]:
    params = {f"{prefix}gamma": T.ones((channels,)),
              f"{prefix}beta": T.zeros((channels,))}
    state = {f"{prefix}running_mean": T.zeros((channels,)),
             f"{prefix}running_var": T.ones((channels,))}
    return params, state


def batchnorm1d_forward(params: dict, state: dict, x: Tensor, mode: str,
                        prefix: str = "") -> Tensor:
    """Train mode uses batch moments (population variance) and updates the
    running stats; eval mode is a pure affine map built from the stored stats.
    """
    if x.ndim != 3:
        raise T.ShapeError(f"batchnorm {prefix!r}: expected [batch, C, S], got {x.shape}")
    if mode not in ("train", "eval"):
        raise ValueError(f"batchnorm mode must be train or eval, got {mode!r}")
    if mode == "train" and x.shape[0] < 2:
        raise ValueError(f"batchnorm {prefix!r}: train mode needs batch >= 2")
    xt = T.transpose(x, (0, 2, 1))  # [B, S, C]: channel last for trailing broadcast
    if mode == "train":
        mu = T.mean(xt, axis=(0, 1))
        xc = T.sub(xt, mu)
        var = T.mean(T.power(xc, 2.0), axis=(0, 1))
        rm = state[f"{prefix}running_mean"].numpy()
        rv = state[f"{prefix}running_var"].numpy()
        state[f"{prefix}running_mean"] = Tensor((1 - BN_MOMENTUM) * rm + BN_MOMENTUM * mu.numpy())
        state[f"{prefix}running_var"] = Tensor((1 - BN_MOMENTUM) * rv + BN_MOMENTUM * var.numpy())
    else:
        mu = state[f"{prefix}running_mean"]
        var = state[f"{prefix}running_var"]
        xc = T.sub(xt, mu)
    inv = T.power(T.add(var, T.scalar(BN_EPS)), -0.5)
    y = T.add(T.mul(T.mul(xc, inv), params[f"{prefix}gamma"]), params[f"{prefix}beta"])
    return T.transpose(y, (0, 2, 1))


# ---------------------------------------------------------------------------
# CBAM: channel attention then spatial attention, both sigmoid gates


@dataclass(frozen=True)
class CbamConfig:
    channels: int
    reduction_ratio: int = 4
    spatial_kernel: int = 7

    def __post_init__(self):
        if self.reduction_ratio < 1 or self.channels % self.reduction_ratio:
            raise ValueError(f"channels {self.channels} not divisible by "
                             f"reduction ratio {self.reduction_ratio}")
        if self.spatial_kernel % 2 == 0:
            raise ValueError("spatial kernel must be odd to preserve length")


def cbam_init(cfg: CbamConfig, rng, prefix: str) -> dict:
    hidden = cfg.channels // cfg.reduction_ratio
    params = {}
    params.update(dense_init(rng, cfg.channels, hidden, f"{prefix}mlp1."))
    params.update(dense_init(rng, hidden, cfg.channels, f"{prefix}mlp2."))
    params.update(conv_init(rng, 2, 1, cfg.spatial_kernel, f"{prefix}spatial."))
    return params


def cbam_attention_maps(cfg: CbamConfig, params: dict, x: Tensor,
                        prefix: str = "") -> tuple[Tensor, Tensor]:
    """Channel map [B, C] from pooled descriptors through the shared MLP, then
    spatial map [B, 1, S] from the pooled-channel stack of the gated input."""
    batch, channels, length = x.shape
    if channels != cfg.channels:
        raise T.ShapeError(f"cbam {prefix!r}: expected {cfg.channels} channels, got {channels}")

    def shared_mlp(v):
        h = T.relu(dense_forward(params, v, f"{prefix}mlp1."))
        return dense_forward(params, h, f"{prefix}mlp2.")

    m_c = T.sigmoid(T.add(shared_mlp(T.mean(x, axis=2)), shared_mlp(T.max_(x, axis=2))))
    x_gated = T.mul(x, T.broadcast_to(T.reshape(m_c, (batch, channels, 1)), x.shape))
    stack = T.concat([T.reshape(T.mean(x_gated, axis=1), (batch, 1, length)),
                      T.reshape(T.max_(x_gated, axis=1), (batch, 1, length))], axis=1)
    pad = (cfg.spatial_kernel - 1) // 2
    m_s = T.sigmoid(conv_forward(params, stack, f"{prefix}spatial.", stride=1, pad=pad))
    return m_c, m_s


def cbam_apply(x: Tensor, m_c: Tensor, m_s: Tensor) -> Tensor:
    batch, channels, length = x.shape
    gated = T.mul(x, T.broadcast_to(T.reshape(m_c, (batch, channels, 1)), x.shape))
    return T.mul(gated, T.broadcast_to(m_s, x.shape))


def cbam1d_forward(cfg: CbamConfig, params: dict, x: Tensor, prefix: str = "") -> Tensor:
    m_c, m_s = cbam_attention_maps(cfg, params, x, prefix)
    return cbam_apply(x, m_c, m_s)


# ---------------------------------------------------------------------------
# residual block: conv-BN-relu-conv-BN-CBAM plus shortcut, final relu


@dataclass(frozen=True)
class BlockSpec:
    c_in: int
    c_out: int
    stride: int = 1
    reduction_ratio: int = 4
    spatial_kernel: int = 7

    @property
    def cbam(self) -> CbamConfig:
        return CbamConfig(self.c_out, self.reduction_ratio, self.spatial_kernel)

    @property
    def has_projection(self) -> bool:
        return self.c_in != self.c_out or self.stride != 1


def residual_block_init(spec: BlockSpec, rng, prefix: str) -> tuple[dict, dict]:
    params, state = {}, {}
    params.update(conv_init(rng, spec.c_in, spec.c_out, 3, f"{prefix}conv1."))
    p, s = batchnorm_init(spec.c_out, f"{prefix}bn1.")
    params.update(p), state.update(s)
    params.update(conv_init(rng, spec.c_out, spec.c_out, 3, f"{prefix}conv2."))
    p, s = batchnorm_init(spec.c_out, f"{prefix}bn2.")
    params.update(p), state.update(s)
    params.update(cbam_init(spec.cbam, rng, f"{prefix}cbam."))
    if spec.has_projection:
        params.update(conv_init(rng, spec.c_in, spec.c_out, 1, f"{prefix}shortcut."))
    return params, state


def residual_block_forward(spec: BlockSpec, params: dict, state: dict, x: Tensor,
                           mode: str, prefix: str = "") -> Tensor:
    h = conv_forward(params, x, f"{prefix}conv1.", stride=spec.stride, pad=1)
    h = T.relu(batchnorm1d_forward(params, state, h, mode, f"{prefix}bn1."))
    h = conv_forward(params, h, f"{prefix}conv2.", stride=1, pad=1)
    h = batchnorm1d_forward(params, state, h, mode, f"{prefix}bn2.")
    h = cbam1d_forward(spec.cbam, params, h, f"{prefix}cbam.")
    if spec.has_projection:
        shortcut = conv_forward(params, x, f"{prefix}shortcut.", stride=spec.stride, pad=0)
    else:
        shortcut = x
    return T.relu(T.add(h, shortcut))
