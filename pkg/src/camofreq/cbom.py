"""Channel-balance correction of feature maps.

A per-pixel max over channels serves as the reference channel. Each channel's
bias is the gap between the reference mean and its own mean. A small learned
map turns the bias vector into a gate in (0, 1) that rescales the features,
blended back with weight ``lam``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DimensionError
from .tensorkit import ParamStore, Tensor, as_tensor, conv2d, gelu, sigmoid

DEFAULT_LAMBDA = 0.2
LAMBDA_GRID = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)


@dataclass
class ChannelBias:
    """Per-channel bias ``d = mu_r - mu`` with the means it came from.

    For a single map ``d`` and ``mu`` have shape ``(C,)`` and ``mu_r`` is a
    scalar; a batch adds a leading axis.
    """

    d: Tensor
    mu: Tensor
    mu_r: Tensor


def hidden_width(channels: int) -> int:
    return max(channels // 4, 4)


def _check(f: Tensor) -> None:
    if f.ndim not in (3, 4) or f.size == 0:
        raise DimensionError(f"expected a non-empty H x W x C map, got shape {f.shape}")


def channel_reference(f) -> Tensor:
    """Per-pixel maximum over channels, shape ``[N,]H,W,1``."""
    f = as_tensor(f)
    _check(f)
    return f.amax(axis=-1, keepdims=True)


def channel_bias(f) -> ChannelBias:
    f = as_tensor(f)
    _check(f)
    spatial = (f.ndim - 3, f.ndim - 2)
    mu = f.mean(axis=spatial)
    mu_r = channel_reference(f).mean(axis=spatial)
    d = mu_r - mu
    return ChannelBias(d=d, mu=mu, mu_r=mu_r[..., 0])


def init_cbom(params: ParamStore, channels: int, prefix: str) -> None:
    h = hidden_width(channels)
    params.add(f"{prefix}.w1", (1, 1, channels, h))
    params.add(f"{prefix}.b1", (h,), init="zeros")
    params.add(f"{prefix}.w2", (1, 1, h, channels))
    params.add(f"{prefix}.b2", (channels,), init="zeros")


def bias_map(bias: ChannelBias, params: ParamStore, prefix: str) -> Tensor:
    """``sigmoid(Conv1x1(GELU(Conv(D))))`` on the bias vector viewed as a 1x1xC map.

    Returns shape ``1,1,C`` (or ``N,1,1,C`` for a batched bias).
    """
    params.require(f"{prefix}.w1", f"{prefix}.b1", f"{prefix}.w2", f"{prefix}.b2")
    d = bias.d
    lead = d.shape[:-1]
    dmap = d.reshape(lead + (1, 1, d.shape[-1]))
    hidden = gelu(conv2d(dmap, params[f"{prefix}.w1"], params[f"{prefix}.b1"]))
    return sigmoid(conv2d(hidden, params[f"{prefix}.w2"], params[f"{prefix}.b2"]))


def cbom_fuse(f_v, d_prime, lam: float = DEFAULT_LAMBDA) -> Tensor:
    """``lam * (F_v * D') + (1 - lam) * F_v`` with ``D'`` broadcast over space."""
    if not 0.0 <= lam <= 1.0:
        raise ContractError(f"lambda must lie in [0, 1], got {lam}")
    f_v, d_prime = as_tensor(f_v), as_tensor(d_prime)
    if f_v.shape[-1] != d_prime.shape[-1]:
        raise DimensionError(f"channel mismatch: features {f_v.shape}, bias map {d_prime.shape}")
    return lam * (f_v * d_prime) + (1.0 - lam) * f_v


def cbom_block(f, params: ParamStore, prefix: str, lam: float = DEFAULT_LAMBDA) -> Tensor:
    """Full correction of one feature map."""
    f = as_tensor(f)
    return cbom_fuse(f, bias_map(channel_bias(f), params, prefix), lam)


def correct_image(image: np.ndarray, params: ParamStore, prefix: str = "cbom_rgb",
                  lam: float = DEFAULT_LAMBDA) -> np.ndarray:
    """Apply the correction directly to an ``H x W x C`` image array."""
    return cbom_block(np.asarray(image, dtype=np.float64), params, prefix, lam).data
