"""Synthetic camouflage scenes.

Background: a base colour plus a sum of seeded oriented sinusoids, with
Gaussian sensor noise added last. Objects are smooth random blobs filled with
the same sinusoid family; ``contrast`` shifts their colour and phase away from
the background, and ``blur_sigma`` feathers the boundary. Every random draw is
made before ``contrast`` or ``blur_sigma`` are used, so one seed gives the same
geometry and texture at every setting.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from ..errors import ContractError

N_WAVES = 6
TEXTURE_AMPLITUDE = 0.06
COLOR_OFFSET = 0.25
PHASE_SHIFT = np.pi / 3
NOISE_SIGMA = 0.02
MIN_AREA = 16
MAX_INSTANCES = 8


@dataclass
class SynthSample:
    image: np.ndarray                      # H x W x 3, values in [0, 1]
    instance_masks: list = field(default_factory=list)
    contrast: float = 0.0
    boundary_blur_sigma: float = 0.0
    background: np.ndarray | None = None   # noiseless scene without objects

    @property
    def union_mask(self) -> np.ndarray:
        out = np.zeros(self.image.shape[:2], dtype=bool)
        for m in self.instance_masks:
            out |= m
        return out


def _texture(shape, freqs, angles, phases, amps) -> np.ndarray:
    H, W = shape
    y, x = np.mgrid[0:H, 0:W].astype(np.float64)
    side = float(max(H, W))
    out = np.zeros((H, W, 3))
    for f, th, ph, a in zip(freqs, angles, phases, amps):
        wave = np.sin(2 * np.pi * f * (x * np.cos(th) + y * np.sin(th)) / side + ph)
        out += wave[..., None] * a
    return out


def _blob(shape, rng) -> np.ndarray:
    H, W = shape
    side = min(H, W)
    r0 = rng.uniform(0.08, 0.16) * side
    cy = rng.uniform(r0, H - r0)
    cx = rng.uniform(r0, W - r0)
    a2, a3 = rng.uniform(-0.2, 0.2, size=2)
    p2, p3 = rng.uniform(0, 2 * np.pi, size=2)
    y, x = np.mgrid[0:H, 0:W] + 0.5
    theta = np.arctan2(y - cy, x - cx)
    radius = r0 * (1 + a2 * np.cos(2 * theta + p2) + a3 * np.cos(3 * theta + p3))
    return np.hypot(y - cy, x - cx) < radius


def synth_sample(seed: int, index: int, contrast: float, blur_sigma: float = 1.0,
                 n_instances_range=(1, 3), hw=(128, 128)) -> SynthSample:
    rng = np.random.default_rng([seed, index])
    hw = tuple(hw)
    base = rng.uniform(0.35, 0.65, size=3)
    freqs = rng.uniform(2.0, 10.0, size=N_WAVES)
    angles = rng.uniform(0.0, np.pi, size=N_WAVES)
    phases = rng.uniform(0.0, 2 * np.pi, size=N_WAVES)
    amps = rng.uniform(0.5, 1.0, size=(N_WAVES, 3))
    amps *= TEXTURE_AMPLITUDE / amps.sum(axis=0, keepdims=True)

    lo, hi = n_instances_range
    n_inst = int(rng.integers(lo, hi + 1))
    masks, offsets, shifts = [], [], []
    taken = np.zeros(hw, dtype=bool)
    guard = ndimage.generate_binary_structure(2, 2)
    for _ in range(n_inst):
        for _attempt in range(60):
            m = _blob(hw, rng)
            sign = rng.choice([-1.0, 1.0], size=3)
            direction = rng.choice([-1.0, 1.0])
            if m.sum() < MIN_AREA or (m & taken).any():
                continue
            masks.append(m)
            offsets.append(sign * COLOR_OFFSET)
            shifts.append(direction * PHASE_SHIFT)
            taken |= ndimage.binary_dilation(m, guard, iterations=2)
            break
    noise = rng.normal(0.0, NOISE_SIGMA, size=hw + (3,))

    background = base + _texture(hw, freqs, angles, phases, amps)
    image = background.copy()
    for m, off, shift in zip(masks, offsets, shifts):
        obj = base + contrast * off + _texture(hw, freqs, angles, phases + contrast * shift, amps)
        alpha = m.astype(np.float64)
        if blur_sigma > 0:
            alpha = ndimage.gaussian_filter(alpha, blur_sigma)
        image = (1 - alpha[..., None]) * image + alpha[..., None] * obj
    image = np.clip(image + noise, 0.0, 1.0)
    return SynthSample(image, masks, float(contrast), float(blur_sigma), background)


def synth_camo(seed: int, n_samples: int, contrast: float, blur_sigma: float = 1.0,
               n_instances_range=(1, 3), hw=(128, 128)) -> list[SynthSample]:
    """Generate ``n_samples`` scenes; sample ``i`` depends only on ``(seed, i)``."""
    if not 0.0 <= contrast <= 1.0:
        raise ContractError(f"contrast must lie in [0, 1], got {contrast}")
    if blur_sigma < 0:
        raise ContractError("blur_sigma must be non-negative")
    lo, hi = n_instances_range
    if not 1 <= lo <= hi <= MAX_INSTANCES:
        raise ContractError(f"n_instances_range must lie within [1, {MAX_INSTANCES}], got {n_instances_range}")
    if n_samples < 0:
        raise ContractError("n_samples must be non-negative")
    return [synth_sample(seed, i, contrast, blur_sigma, n_instances_range, hw) for i in range(n_samples)]


def difference_image(sample: SynthSample) -> np.ndarray:
    """Channel-mean ``|image - background|`` scaled so its maximum is 1."""
    diff = np.abs(sample.image - sample.background).mean(axis=-1)
    top = diff.max()
    return diff / top if top > 0 else diff
