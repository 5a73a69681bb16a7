"""Toy segmentation network wiring the three frequency modules together.

Encoder: four stride-2 3x3 conv + GELU stages, each optionally followed by
channel-balance correction. A second, frozen copy of the encoder (no
correction) sees the Fourier-filtered image. Both branches see the image
standardised per sample (channel means removed, one shared scale). Decoder: two
4x transposed-conv blocks with the stage-2 features joined after the first,
then a 3x3 conv over the upsampled features concatenated with the salience map.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from ..cbom import cbom_block, init_cbom
from ..errors import ConfigurationError, DimensionError
from ..evalstat import InstanceMask
from ..fdtim import fdtim_image, init_truth_gate, truth_gate
from ..mffam import (dwt2, highfreq_fuse, init_highfreq, init_lowfreq, init_proposal_head,
                     init_pyramid, lowfreq_fuse, multiscale_pyramid, proposal_head, superimpose)
from ..tensorkit import (ParamStore, Tensor, as_tensor, bce_with_logits, concat, conv2d,
                         conv_transpose2d, gelu, sigmoid)
from .config import ModelConfig

LOW_WIDTH = 8
HIGH_WIDTH = 8
DECODER_WIDTHS = (16, 8)
FROZEN_PREFIX = "frozen."
MIN_INSTANCE_AREA = 16


def init_params(cfg: ModelConfig) -> ParamStore:
    """Every parameter the model can use, whatever the toggles say."""
    p = ParamStore(cfg.seed)
    cin = 3
    for s, c in enumerate(cfg.channels, start=1):
        p.add(f"enc{s}.w", (3, 3, cin, c))
        p.add(f"enc{s}.b", (c,), init="zeros")
        init_cbom(p, c, f"cbom{s}")
        cin = c
    # the filtered-image encoder starts as an exact copy and never trains
    for s in range(1, 5):
        for part in ("w", "b"):
            p.set(f"{FROZEN_PREFIX}enc{s}.{part}", p[f"enc{s}.{part}"].data.copy())
    init_lowfreq(p, sum(cfg.channels), LOW_WIDTH)
    init_pyramid(p, LOW_WIDTH)
    init_proposal_head(p, LOW_WIDTH)
    init_highfreq(p, HIGH_WIDTH, cfg.channels[-1])
    init_truth_gate(p, cfg.channels[-1])
    c_top = cfg.channels[-1]
    d1, d2 = DECODER_WIDTHS
    p.add("dec1.w", (8, 8, c_top, d1), fan_in=c_top * 4)
    p.add("dec1.b", (d1,), init="zeros")
    skip = cfg.channels[1]
    p.add("dec2.w", (8, 8, d1 + skip, d2), fan_in=(d1 + skip) * 4)
    p.add("dec2.b", (d2,), init="zeros")
    p.add("out.w", (3, 3, d2 + 1, 1), scale=0.5)
    p.add("out.b", (1,), init="zeros")
    return p


def trainable_names(params: ParamStore) -> list[str]:
    return [n for n in params.names() if not n.startswith(FROZEN_PREFIX)]


def _check_input(image: Tensor, cfg: ModelConfig) -> None:
    if image.ndim not in (3, 4) or image.shape[-1] != 3:
        raise DimensionError(f"expected H x W x 3 (optionally batched), got {image.shape}")
    if tuple(image.shape[-3:-1]) != tuple(cfg.input_hw):
        raise ConfigurationError(f"image is {image.shape[-3:-1]}, config expects {cfg.input_hw}")


def standardize(image) -> np.ndarray:
    """Remove each channel's spatial mean and divide by the overall spread."""
    arr = np.asarray(image.data if isinstance(image, Tensor) else image, dtype=np.float64)
    centred = arr - arr.mean(axis=(-3, -2), keepdims=True)
    spread = np.sqrt((centred ** 2).mean(axis=(-3, -2, -1), keepdims=True))
    return centred / (spread + 1e-6)


def encode(image, params: ParamStore, use_cbom: bool, lam: float = 0.2, prefix: str = ""):
    """Return ``(stages, F_O)``: the four stage outputs and the last one."""
    x = as_tensor(image)
    stages = []
    for s in range(1, 5):
        x = gelu(conv2d(x, params[f"{prefix}enc{s}.w"], params[f"{prefix}enc{s}.b"], stride=2, padding=1))
        if use_cbom:
            x = cbom_block(x, params, f"cbom{s}", lam)
        stages.append(x)
    return stages, x


def filtered_features(image, params: ParamStore, cfg: ModelConfig) -> Tensor:
    """F_K: frozen encoder applied to the top-K filtered image (no gradient)."""
    arr = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
    filtered = standardize(fdtim_image(arr, cfg.k))
    return encode(Tensor(filtered), params, use_cbom=False, prefix=FROZEN_PREFIX)[1].detach()


def decode(f_t, skip, salience, params: ParamStore) -> Tensor:
    h = gelu(conv_transpose2d(f_t, params["dec1.w"], params["dec1.b"], stride=4, padding=2))
    h = concat([h, skip], axis=-1)
    h = gelu(conv_transpose2d(h, params["dec2.w"], params["dec2.b"], stride=4, padding=2))
    return conv2d(concat([h, salience], axis=-1), params["out.w"], params["out.b"], padding=1)


@dataclass
class ForwardResult:
    mask_logits: Tensor
    salience: Tensor
    prompts: list = field(default_factory=list)


def constant_salience(image: Tensor) -> Tensor:
    return Tensor(np.full(image.shape[:-1] + (1,), 0.5))


def forward(image, params: ParamStore, cfg: ModelConfig, f_k=None) -> ForwardResult:
    """Run the full model. ``f_k`` may carry precomputed filtered-image features."""
    image = as_tensor(image)
    _check_input(image, cfg)
    tg = cfg.toggles
    stages, f_o = encode(standardize(image), params, tg.cbom, cfg.lam)
    hw = tuple(image.shape[-3:-1])

    bands = [dwt2(f, s) for s, f in enumerate(stages, start=1)] if (tg.mffam_low or tg.mffam_high) else None
    if tg.mffam_high:
        f_o1 = superimpose(f_o, highfreq_fuse(bands, params, tuple(f_o.shape[-3:-1])))
    else:
        f_o1 = f_o
    if tg.mffam_low:
        f_l = lowfreq_fuse(bands, params, tuple(stages[0].shape[-3:-1]))
        salience, prompts = proposal_head(multiscale_pyramid(f_l, params), params, hw)
    else:
        salience = constant_salience(image)
        prompts = [[] for _ in range(image.shape[0])] if image.ndim == 4 else []
    if tg.fdtim:
        if f_k is None:
            f_k = filtered_features(image, params, cfg)
        f_t = truth_gate(f_o1, f_k, params)
    else:
        f_t = f_o1
    return ForwardResult(decode(f_t, stages[1], salience, params), salience, prompts)


def plain_forward(image, params: ParamStore) -> Tensor:
    """Encoder-decoder baseline with no frequency modules."""
    image = as_tensor(image)
    stages, f_o = encode(standardize(image), params, use_cbom=False)
    return decode(f_o, stages[1], constant_salience(image), params)


def loss(mask_logits, gt_masks) -> Tensor:
    """Mean BCE plus (1 - soft Dice) on the union foreground mask.

    ``gt_masks`` may be a union array shaped like the logits, or a list of
    instance masks (single image) which is unioned first.
    """
    logits = as_tensor(mask_logits)
    if isinstance(gt_masks, (list, tuple)):
        union = np.zeros(logits.shape[:-1], dtype=bool)
        for m in gt_masks:
            union |= np.asarray(m, dtype=bool)
        target = union[..., None].astype(np.float64)
    else:
        target = np.asarray(gt_masks, dtype=np.float64)
        if target.shape != logits.shape:
            target = target.reshape(logits.shape)
    bce = bce_with_logits(logits, target)
    p = sigmoid(logits)
    axes = tuple(range(logits.ndim - 3, logits.ndim))
    inter = (p * target).sum(axis=axes)
    denom = p.sum(axis=axes) + target.sum(axis=axes)
    dice = (inter * 2.0 + 1.0) / (denom + 1.0)
    return bce + (1.0 - dice).mean()


def predict_instances(mask_logits, salience, threshold: float = 0.5) -> list[InstanceMask]:
    """Split the thresholded mask into 8-connected instances scored by mean salience."""
    logits = np.asarray(mask_logits.data if isinstance(mask_logits, Tensor) else mask_logits)
    sal = np.asarray(salience.data if isinstance(salience, Tensor) else salience)
    if logits.ndim == 3:
        logits = logits[..., 0]
    if sal.ndim == 3:
        sal = sal[..., 0]
    fg = 1.0 / (1.0 + np.exp(-np.clip(logits, -500, 500))) >= threshold
    labels, n = ndimage.label(fg, structure=np.ones((3, 3), dtype=int))
    out = []
    for lab in range(1, n + 1):
        m = labels == lab
        if m.sum() < MIN_INSTANCE_AREA:
            continue
        out.append(InstanceMask(mask=m, score=float(sal[m].mean())))
    out.sort(key=lambda inst: -inst.score)
    return out
