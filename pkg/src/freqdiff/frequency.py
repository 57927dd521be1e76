"""Gaussian low/high-pass filtering and the scan rules that pick which
available modality supplies each guidance band.

The modality order (T1, T2, FLAIR, T1ce) runs from most low-frequency
content to most high-frequency content, so the low band is taken from the
first available modality scanning left to right and the high band from the
first one scanning right to left.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, ContractError

HF_MODES = ("residual", "as-written")


@dataclass(frozen=True)
class GaussianKernel:
    size: int
    sigma: float
    weights: np.ndarray


@dataclass
class GuidancePair:
    lf_image: np.ndarray
    hf_image: np.ndarray
    lf_source: int
    hf_source: int


def default_sigma(size: int) -> float:
    return size / 6.0


def make_kernel(size: int = 21, sigma: float | None = None) -> GaussianKernel:
    """Normalized isotropic Gaussian on the centered integer grid."""
    if int(size) != size or size < 1 or size % 2 == 0:
        raise ConfigurationError(f"kernel size must be a positive odd integer, got {size}")
    size = int(size)
    sigma = default_sigma(size) if sigma is None else float(sigma)
    if not sigma > 0:
        raise ConfigurationError(f"sigma must be positive, got {sigma}")
    r = size // 2
    i = np.arange(-r, r + 1, dtype=np.float64)
    w = np.exp(-0.5 * (i[:, None] ** 2 + i[None, :] ** 2) / sigma**2) / (2 * np.pi * sigma**2)
    w /= w.sum()
    w.setflags(write=False)
    return GaussianKernel(size, sigma, w)


def glpf(image: np.ndarray, k: GaussianKernel) -> np.ndarray:
    """Low-pass image; works on (..., H, W) stacks with reflect boundaries."""
    image = np.asarray(image, dtype=np.float64)
    r = k.size // 2
    if r == 0:
        return image * k.weights[0, 0]
    widths = [(0, 0)] * (image.ndim - 2) + [(r, r), (r, r)]
    padded = np.pad(image, widths, mode="reflect")
    win = sliding_window_view(padded, (k.size, k.size), axis=(-2, -1))
    return np.tensordot(win, k.weights, axes=([-2, -1], [0, 1]))


def ghpf(image: np.ndarray, k: GaussianKernel, mode: str = "residual") -> np.ndarray:
    """High-pass image.

    ``residual`` is ``image - glpf(image)``; ``as-written`` is
    ``1 - glpf(image)``.
    """
    if mode == "residual":
        return np.asarray(image, dtype=np.float64) - glpf(image, k)
    if mode == "as-written":
        return 1.0 - glpf(image, k)
    raise ConfigurationError(f"unknown high-pass mode {mode!r}; expected one of {HF_MODES}")


def _bits(mask) -> tuple[int, ...]:
    bits = tuple(int(b) for b in (mask.bits if hasattr(mask, "bits") else mask))
    if not any(bits):
        raise ContractError("no modality available to supply guidance")
    return bits


def select_lf_source(mask) -> int:
    bits = _bits(mask)
    return next(i for i, b in enumerate(bits) if b)


def select_hf_source(mask) -> int:
    bits = _bits(mask)
    return next(i for i in reversed(range(len(bits))) if bits[i])


def build_guidance(images: np.ndarray, mask, k: GaussianKernel, hf_mode: str = "residual",
                   lf_source: int | None = None, hf_source: int | None = None) -> GuidancePair:
    """Guidance images for one sample.

    ``images`` is the (n_mod, H, W) stack (a :class:`PhantomSample` is also
    accepted). Missing modalities are zeroed before selection so they can
    never leak into the guide. ``lf_source``/``hf_source`` override the
    scan rules (used by the fixed-source ablation).
    """
    images = getattr(images, "modalities", images)
    bits = _bits(mask)
    masked = np.asarray(images, dtype=np.float64) * np.asarray(bits, dtype=np.float64)[:, None, None]
    lf = select_lf_source(bits) if lf_source is None else lf_source
    hf = select_hf_source(bits) if hf_source is None else hf_source
    for src in (lf, hf):
        if not bits[src]:
            raise ContractError(f"guidance source {src} is not available under mask {bits}")
    return GuidancePair(glpf(masked[lf], k), ghpf(masked[hf], k, hf_mode), lf, hf)

