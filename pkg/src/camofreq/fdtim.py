"""Fourier top-K amplitude filtering and the truth-feature gate.

The forward transform carries no normalisation and the inverse carries
``1/(M*N)``, matching ``numpy.fft``. Filtering removes the largest-amplitude
components of each channel, always together with their conjugate mirror so the
reconstruction stays real.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DimensionError, NumericalIntegrityError
from .tensorkit import ParamStore, Tensor, as_tensor, conv2d, sigmoid

DEFAULT_K = 1000
IMAG_TOLERANCE = 1e-6


@dataclass
class Spectrum:
    """Per-channel complex spectrum ``re + j*im`` on an ``m x n`` grid."""

    m: int
    n: int
    channels: int
    re: np.ndarray
    im: np.ndarray

    @classmethod
    def from_complex(cls, z: np.ndarray) -> "Spectrum":
        z = np.asarray(z, dtype=np.complex128)
        if z.ndim == 2:
            z = z[..., None]
        m, n, c = z.shape
        return cls(m, n, c, z.real.copy(), z.imag.copy())

    @property
    def complex(self) -> np.ndarray:
        return self.re + 1j * self.im

    def energy(self) -> float:
        return float(np.sum(self.re ** 2 + self.im ** 2))

    def copy(self) -> "Spectrum":
        return Spectrum(self.m, self.n, self.channels, self.re.copy(), self.im.copy())


def _as_image(x) -> np.ndarray:
    arr = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[..., None]
    if arr.ndim != 3 or min(arr.shape) < 1:
        raise DimensionError(f"expected an M x N x C image, got shape {arr.shape}")
    return arr


def dft2(x) -> Spectrum:
    """Forward 2-D DFT of each channel (no scaling)."""
    arr = _as_image(x)
    return Spectrum.from_complex(np.fft.fft2(arr, axes=(0, 1)))


def idft2(s: Spectrum, tol: float = IMAG_TOLERANCE) -> np.ndarray:
    """Inverse 2-D DFT with ``1/(M*N)`` scaling; returns the real part.

    Raises NumericalIntegrityError if the imaginary residue exceeds ``tol``,
    which only happens when the spectrum lost its conjugate symmetry.
    """
    z = np.fft.ifft2(s.complex, axes=(0, 1))
    residue = float(np.abs(z.imag).max()) if z.size else 0.0
    if residue > tol:
        raise NumericalIntegrityError(f"inverse transform has imaginary residue {residue:.3e}")
    return z.real.copy()


def imag_residue(s: Spectrum) -> float:
    """Largest imaginary magnitude of the inverse transform of ``s``."""
    z = np.fft.ifft2(s.complex, axes=(0, 1))
    return float(np.abs(z.imag).max()) if z.size else 0.0


def amplitude(s: Spectrum) -> np.ndarray:
    return np.hypot(s.re, s.im)


def mirror_index(m: int, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Grid of conjugate partners ``((M-u) mod M, (N-v) mod N)``."""
    u = (-np.arange(m)) % m
    v = (-np.arange(n)) % n
    return np.broadcast_to(u[:, None], (m, n)), np.broadcast_to(v[None, :], (m, n))


def topk_mask(amp: np.ndarray, k: int, protect_dc: bool = False) -> np.ndarray:
    """Boolean ``M x N`` mask of cells removed from one channel.

    Cells are grouped into conjugate pairs. Pairs are ranked by amplitude
    (descending) and then by the lexicographically smaller ``(u, v)`` of the
    pair. A pair costs its number of distinct cells; selection stops at the
    first pair that would push the count above ``k``.
    """
    m, n = amp.shape
    if not 0 <= k <= m * n:
        raise ContractError(f"k must lie in [0, {m * n}], got {k}")
    removed = np.zeros((m, n), dtype=bool)
    if k == 0:
        return removed
    mu, mv = mirror_index(m, n)
    flat = np.arange(m * n).reshape(m, n)
    partner = flat[mu, mv]
    rep = np.minimum(flat, partner).ravel()
    keep = np.unique(rep)
    if protect_dc:
        keep = keep[keep != 0]
    size = np.where(partner.ravel()[keep] == keep, 1, 2)
    order = np.lexsort((keep, -amp.ravel()[keep]))
    cost = np.cumsum(size[order])
    over = np.nonzero(cost > k)[0]
    take = order[: over[0]] if over.size else order
    chosen = keep[take]
    removed.ravel()[chosen] = True
    removed.ravel()[partner.ravel()[chosen]] = True
    return removed


def topk_filter(s: Spectrum, k: int, protect_dc: bool = False) -> Spectrum:
    """Zero the ``k`` largest-amplitude cells of every channel, in mirror pairs."""
    if not 0 <= k <= s.m * s.n:
        raise ContractError(f"k must lie in [0, {s.m * s.n}], got {k}")
    out = s.copy()
    amp = amplitude(s)
    for c in range(s.channels):
        mask = topk_mask(amp[..., c], k, protect_dc)
        out.re[..., c][mask] = 0.0
        out.im[..., c][mask] = 0.0
    return out


def fdtim_image(x, k: int = DEFAULT_K, protect_dc: bool = False) -> np.ndarray:
    """Reconstruct ``x`` after removing its top-``k`` spectral components per channel.

    Accepts ``M x N x C`` or a batch ``B x M x N x C``.
    """
    arr = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    if arr.ndim == 4:
        return np.stack([fdtim_image(a, k, protect_dc) for a in arr])
    squeeze = arr.ndim == 2
    img = _as_image(arr)
    if k == 0:
        return arr.copy()
    out = idft2(topk_filter(dft2(img), k, protect_dc))
    return out[..., 0] if squeeze else out


def amplitude_image(x) -> np.ndarray:
    """Log-scaled, centred amplitude spectrum averaged over channels, in [0, 1]."""
    amp = amplitude(dft2(x)).mean(axis=-1)
    logamp = np.log1p(np.fft.fftshift(amp))
    top = logamp.max()
    return logamp / top if top > 0 else logamp


def init_truth_gate(params: ParamStore, channels: int, prefix: str = "gate") -> None:
    params.add(f"{prefix}.w", (3, 3, channels, channels), scale=0.5)
    params.add(f"{prefix}.b", (channels,), init="zeros")


def truth_gate(f_o1, f_k, params: ParamStore, prefix: str = "gate") -> Tensor:
    """``F_o1 * sigmoid(Conv3x3(F_o1 - F_k))``."""
    f_o1, f_k = as_tensor(f_o1), as_tensor(f_k)
    if f_o1.shape != f_k.shape:
        raise DimensionError(f"truth_gate shapes differ: {f_o1.shape} vs {f_k.shape}")
    gate = sigmoid(conv2d(f_o1 - f_k, params[f"{prefix}.w"], params[f"{prefix}.b"], padding=1))
    return f_o1 * gate
