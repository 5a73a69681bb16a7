"""Wavelet-domain multi-scale aggregation.

One orthonormal Haar level per encoder stage. Low-frequency bands are fused
into a feature that drives a five-scale salience head; high-frequency bands are
reduced to magnitude/energy maps, weighted across scales and added back onto
the encoder output.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import ndimage

from .errors import ContractError, DimensionError
from .tensorkit import (ParamStore, Tensor, as_tensor, avgpool2d, concat, conv2d,
                        resample, resize_nearest, sigmoid)

N_SCALES = 4
HF_EPS = 1e-8
PROMPT_THRESHOLD = 0.5
NMS_RADIUS = 8


@dataclass
class WaveletBands:
    """One Haar level. ``lh`` holds vertical detail, ``hl`` horizontal, ``hh`` diagonal."""

    scale_index: int
    ll: Tensor
    lh: Tensor
    hl: Tensor
    hh: Tensor
    padding: tuple[int, int] = (0, 0)

    def as_tuple(self) -> tuple[Tensor, Tensor, Tensor, Tensor]:
        return self.ll, self.lh, self.hl, self.hh

    def energy(self) -> dict[str, float]:
        return {k: float(np.sum(getattr(self, k).data ** 2)) for k in ("ll", "lh", "hl", "hh")}


def _reflect_pad_even(x: Tensor) -> tuple[Tensor, tuple[int, int]]:
    ph, pw = x.shape[-3] % 2, x.shape[-2] % 2
    if ph:
        if x.shape[-3] < 2:
            raise DimensionError("cannot reflect-pad a single row")
        x = concat([x, x[..., -2:-1, :, :]], axis=-3)
    if pw:
        if x.shape[-2] < 2:
            raise DimensionError("cannot reflect-pad a single column")
        x = concat([x, x[..., :, -2:-1, :]], axis=-2)
    return x, (ph, pw)


def dwt2(f, scale_index: int = 1) -> WaveletBands:
    """Single-level orthonormal Haar transform of every channel.

    Odd sides are first reflect-padded by one row/column; the padding is
    recorded on the result.
    """
    f = as_tensor(f)
    if f.ndim not in (3, 4):
        raise DimensionError(f"dwt2 expects H x W x C, got {f.shape}")
    f, pad = _reflect_pad_even(f)
    a = f[..., 0::2, 0::2, :]
    b = f[..., 0::2, 1::2, :]
    c = f[..., 1::2, 0::2, :]
    d = f[..., 1::2, 1::2, :]
    ll = (a + b + c + d) * 0.5
    lh = (a - b + c - d) * 0.5
    hl = (a + b - c - d) * 0.5
    hh = (a - b - c + d) * 0.5
    return WaveletBands(scale_index, ll, lh, hl, hh, pad)


def idwt2(bands: WaveletBands) -> np.ndarray:
    """Exact inverse of ``dwt2`` (padding is cropped away)."""
    ll, lh, hl, hh = (t.data if isinstance(t, Tensor) else np.asarray(t) for t in bands.as_tuple())
    h, w = ll.shape[-3], ll.shape[-2]
    out = np.empty(ll.shape[:-3] + (2 * h, 2 * w, ll.shape[-1]))
    out[..., 0::2, 0::2, :] = (ll + lh + hl + hh) * 0.5
    out[..., 0::2, 1::2, :] = (ll - lh + hl - hh) * 0.5
    out[..., 1::2, 0::2, :] = (ll + lh - hl - hh) * 0.5
    out[..., 1::2, 1::2, :] = (ll - lh - hl + hh) * 0.5
    ph, pw = bands.padding
    return out[..., : 2 * h - ph, : 2 * w - pw, :]


def _largest_grid(maps: Sequence[Tensor]) -> tuple[int, int]:
    return max((m.shape[-3], m.shape[-2]) for m in maps)


def _check_scales(bands: Sequence[WaveletBands]) -> None:
    if len(bands) != N_SCALES:
        raise ContractError(f"need {N_SCALES} wavelet scales, got {len(bands)}")


def resize_to(x: Tensor, hw: tuple[int, int]) -> Tensor:
    """Nearest resize when growing, block averaging for an exact integer shrink."""
    H, W = x.shape[-3], x.shape[-2]
    if (H, W) == tuple(hw):
        return x
    if H % hw[0] == 0 and W % hw[1] == 0 and H // hw[0] == W // hw[1] and H > hw[0]:
        return avgpool2d(x, H // hw[0])
    return resize_nearest(x, hw)


# ------------------------------------------------------------ low frequency
def init_lowfreq(params: ParamStore, in_channels: int, width: int, prefix: str = "low") -> None:
    params.add(f"{prefix}.w1", (1, 1, in_channels, width))
    params.add(f"{prefix}.b1", (width,), init="zeros")
    params.add(f"{prefix}.w3", (3, 3, width, width), scale=0.5)
    params.add(f"{prefix}.b3", (width,), init="zeros")


def lowfreq_fuse(bands: Sequence[WaveletBands], params: ParamStore, target_hw: tuple[int, int],
                 prefix: str = "low") -> Tensor:
    """``F_LL = Up(Conv1x1(cat(LL_1..LL_4)))`` followed by ``F_L = Conv3x3(F_LL) + F_LL``.

    Every ``LL_s`` is nearest-resized to the largest LL grid before
    concatenation; ``Up`` is a nearest resize to ``target_hw``.
    """
    _check_scales(bands)
    lls = [b.ll for b in bands]
    grid = _largest_grid(lls)
    cat = concat([resize_nearest(ll, grid) for ll in lls], axis=-1)
    fused = conv2d(cat, params[f"{prefix}.w1"], params[f"{prefix}.b1"])
    f_ll = resize_nearest(fused, target_hw)
    return conv2d(f_ll, params[f"{prefix}.w3"], params[f"{prefix}.b3"], padding=1) + f_ll


def init_pyramid(params: ParamStore, width: int, prefix: str = "pyr") -> None:
    for factor in (2, 4):
        params.add(f"{prefix}.up{factor}.w", (2 * factor, 2 * factor, width, width),
                   fan_in=width * 4)
        params.add(f"{prefix}.up{factor}.b", (width,), init="zeros")


def multiscale_pyramid(f_l, params: ParamStore | None = None, mode: str = "transposed",
                       prefix: str = "pyr") -> list[Tensor]:
    """Five scales ``[up4, up2, identity, down2, down4]`` of ``f_l``.

    Upsampling is learned transposed convolution (``mode="transposed"``) or
    nearest repetition (``mode="nearest"``); downsampling is max pooling.
    """
    f_l = as_tensor(f_l)
    H, W = f_l.shape[-3], f_l.shape[-2]
    if H % 4 or W % 4:
        raise DimensionError(f"pyramid input {H}x{W} must be divisible by 4")
    ups = []
    for factor in (4, 2):
        if mode == "transposed":
            if params is None:
                raise ContractError("transposed pyramid needs a parameter store")
            ups.append(resample(f_l, factor, "up", "transposed",
                                params[f"{prefix}.up{factor}.w"], params[f"{prefix}.up{factor}.b"]))
        else:
            ups.append(resample(f_l, factor, "up", "nearest"))
    return ups + [f_l, resample(f_l, 2, "down", "maxpool"), resample(f_l, 4, "down", "maxpool")]


# ----------------------------------------------------------- high frequency
def highfreq_maps(bands: WaveletBands) -> tuple[Tensor, Tensor, Tensor]:
    """Return ``(H_abs, H_sqrt, H_abs + H_sqrt)`` for one scale, per channel."""
    lh, hl, hh = bands.lh, bands.hl, bands.hh
    h_abs = lh.abs() + hh.abs() + hl.abs()
    h_sqrt = (lh * lh + hh * hh + hl * hl).sqrt()
    return h_abs, h_sqrt, h_abs + h_sqrt


def aggregate_highfreq(h_maps: Sequence[Tensor], eps: float = HF_EPS) -> Tensor:
    """Scale-weighted sum ``sum_s H_s * H_s / (sum_s H_s + eps)`` on a common grid.

    Inputs are single-channel maps; each is nearest-resized to the largest grid.
    """
    grid = _largest_grid(h_maps)
    hs = [resize_nearest(h, grid) for h in h_maps]
    total = hs[0]
    for h in hs[1:]:
        total = total + h
    denom = total + eps
    out = hs[0] * (hs[0] / denom)
    for h in hs[1:]:
        out = out + h * (h / denom)
    return out


def init_highfreq(params: ParamStore, width: int, out_channels: int, prefix: str = "high") -> None:
    params.add(f"{prefix}.w1", (1, 1, 1, width))
    params.add(f"{prefix}.b1", (width,), init="zeros")
    params.add(f"{prefix}.w3", (3, 3, width, out_channels), scale=0.5)
    params.add(f"{prefix}.b3", (out_channels,), init="zeros")


def highfreq_fuse(bands: Sequence[WaveletBands], params: ParamStore, target_hw: tuple[int, int],
                  eps: float = HF_EPS, prefix: str = "high") -> Tensor:
    """``F_H = Conv3x3(Conv1x1(Up(H_all)))`` at ``target_hw``.

    Stage widths differ, so each ``H_s`` is averaged over channels before the
    cross-scale weighting.
    """
    _check_scales(bands)
    h_maps = [highfreq_maps(b)[2].mean(axis=-1, keepdims=True) for b in bands]
    h_all = aggregate_highfreq(h_maps, eps)
    up = resize_to(h_all, target_hw)
    mid = conv2d(up, params[f"{prefix}.w1"], params[f"{prefix}.b1"])
    return conv2d(mid, params[f"{prefix}.w3"], params[f"{prefix}.b3"], padding=1)


def superimpose(f_o, f_h) -> Tensor:
    f_o, f_h = as_tensor(f_o), as_tensor(f_h)
    if f_o.shape != f_h.shape:
        raise DimensionError(f"cannot superimpose {f_h.shape} on {f_o.shape}")
    return f_o + f_h


# ------------------------------------------------------------ proposal head
def init_proposal_head(params: ParamStore, width: int, prefix: str = "head") -> None:
    params.add(f"{prefix}.w", (3, 3, width, 1), scale=0.5)
    params.add(f"{prefix}.b", (1,), init="zeros")


def salience_map(pyramid: Sequence[Tensor], params: ParamStore, out_hw: tuple[int, int],
                 prefix: str = "head") -> Tensor:
    """Shared 3x3 conv + sigmoid per scale, resized to ``out_hw`` and averaged."""
    w, b = params[f"{prefix}.w"], params[f"{prefix}.b"]
    maps = [resize_to(sigmoid(conv2d(p, w, b, padding=1)), out_hw) for p in pyramid]
    out = maps[0]
    for m in maps[1:]:
        out = out + m
    return out * (1.0 / len(maps))


def find_prompts(salience: np.ndarray, threshold: float = PROMPT_THRESHOLD,
                 radius: int = NMS_RADIUS) -> list[tuple[int, int, float]]:
    """Peaks ``(x, y, score)`` strictly above ``threshold`` after radius NMS.

    Candidates are 3x3 local maxima, visited by score descending then ``(y, x)``;
    a candidate within ``radius`` pixels of an accepted one is suppressed.
    """
    s = np.asarray(salience, dtype=np.float64)
    if s.ndim == 3:
        s = s[..., 0]
    peaks = (s == ndimage.maximum_filter(s, size=3, mode="nearest")) & (s > threshold)
    ys, xs = np.nonzero(peaks)
    scores = s[ys, xs]
    order = np.lexsort((xs, ys, -scores))
    H, W = s.shape
    suppressed = np.zeros((H, W), dtype=bool)
    dy, dx = np.mgrid[-radius:radius + 1, -radius:radius + 1]
    disk = dy ** 2 + dx ** 2 <= radius ** 2
    kept: list[tuple[int, int, float]] = []
    for i in order:
        y, x = int(ys[i]), int(xs[i])
        if suppressed[y, x]:
            continue
        kept.append((x, y, float(scores[i])))
        y0, y1 = max(0, y - radius), min(H, y + radius + 1)
        x0, x1 = max(0, x - radius), min(W, x + radius + 1)
        suppressed[y0:y1, x0:x1] |= disk[y0 - y + radius:y1 - y + radius, x0 - x + radius:x1 - x + radius]
    return kept


def proposal_head(pyramid: Sequence[Tensor], params: ParamStore, out_hw: tuple[int, int] | None = None,
                  prefix: str = "head"):
    """Salience map at ``out_hw`` (default: the largest pyramid grid) plus prompts.

    For a batched pyramid the prompts are a list per image.
    """
    if out_hw is None:
        out_hw = _largest_grid(pyramid)
    sal = salience_map(pyramid, params, out_hw, prefix)
    if sal.ndim == 4:
        prompts = [find_prompts(s) for s in sal.data]
    else:
        prompts = find_prompts(sal.data)
    return sal, prompts
