"""Image-quality metrics: PSNR, SSIM, an LPIPS-form feature distance and
FID, with a fixed random convolutional feature extractor standing in for
pretrained perceptual networks.

Values from the extractor-based metrics are comparable with each other
within this package only.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import numerics as nx
from .errors import ContractError, DimensionError

K1, K2 = 0.01, 0.03


def _pair(x, y) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise DimensionError(f"image shapes differ: {x.shape} vs {y.shape}")
    return x, y


def psnr(x, y, max_val: float = 1.0) -> float:
    """10 log10(MAX^2 / MSE) in dB; identical images give +inf."""
    if not max_val > 0:
        raise ContractError("max_val must be positive")
    x, y = _pair(x, y)
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(max_val**2 / mse)


def _ssim_terms(mx, my, vx, vy, cxy, L: float):
    c1 = (K1 * L) ** 2
    c2 = (K2 * L) ** 2
    return ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx**2 + my**2 + c1) * (vx + vy + c2))


def ssim(x, y, L: float = 2.0, window: int | None = None) -> float:
    """Structural similarity.

    By default the statistics are global over the whole image. With
    ``window`` set, a uniform ``window x window`` box slides with stride 1
    over the valid region and the local values are averaged.
    """
    if not L > 0:
        raise ContractError("dynamic range L must be positive")
    x, y = _pair(x, y)
    if np.array_equal(x, y):
        return 1.0
    if window is None:
        mx, my = x.mean(), y.mean()
        dx, dy = x - mx, y - my
        return float(_ssim_terms(mx, my, (dx * dx).mean(), (dy * dy).mean(), (dx * dy).mean(), L))
    if window > min(x.shape):
        raise DimensionError(f"window {window} larger than image {x.shape}")
    wx = sliding_window_view(x, (window, window))
    wy = sliding_window_view(y, (window, window))
    ax = (-2, -1)
    mx, my = wx.mean(axis=ax), wy.mean(axis=ax)
    vx = (wx * wx).mean(axis=ax) - mx**2
    vy = (wy * wy).mean(axis=ax) - my**2
    cxy = (wx * wy).mean(axis=ax) - mx * my
    return float(_ssim_terms(mx, my, vx, vy, cxy, L).mean())


@dataclass
class FeatureExtractor:
    """Fixed random conv stack: each layer is 3x3 conv + ReLU, with 2x2 max
    pooling between layers. Never trained."""

    channels: tuple[int, ...] = (8, 16, 32)
    seed: int = 1234
    layer_weights: tuple[float, ...] | None = None
    kernels: list[np.ndarray] = field(init=False, repr=False)
    biases: list[np.ndarray] = field(init=False, repr=False)

    def __post_init__(self):
        rng = np.random.default_rng(self.seed)
        self.kernels, self.biases = [], []
        cin = 1
        for cout in self.channels:
            std = math.sqrt(2.0 / (cin * 9))
            self.kernels.append(rng.normal(0.0, std, size=(cout, cin, 3, 3)))
            self.biases.append(rng.normal(0.0, 0.1, size=cout))
            cin = cout
        if self.layer_weights is None:
            self.layer_weights = tuple(1.0 for _ in self.channels)
        if len(self.layer_weights) != len(self.channels):
            raise ContractError("one weight per layer required")

    @property
    def min_size(self) -> int:
        return 2 ** (len(self.channels) - 1)

    def layers(self, image) -> list[np.ndarray]:
        """Per-layer activations (H_l, W_l, C_l) of a single 2-D image."""
        img = np.asarray(image, dtype=np.float64)
        if img.ndim != 2:
            raise DimensionError(f"feature extractor takes a 2-D image, got {img.shape}")
        if img.shape[0] % self.min_size or img.shape[1] % self.min_size:
            raise DimensionError(f"image {img.shape} not divisible by {self.min_size}")
        h = nx.Tensor(img[None, :, :, None])
        feats = []
        for i, (w, b) in enumerate(zip(self.kernels, self.biases)):
            if i:
                h = nx.maxpool2(h, "NHWC")
            h = nx.relu(nx.conv2d(h, nx.Tensor(w), nx.Tensor(b), "zero", "NHWC"))
            feats.append(h.data[0])
        return feats

    def embed(self, image) -> np.ndarray:
        """Globally average-pooled last-layer features."""
        return self.layers(image)[-1].mean(axis=(0, 1))


def lpips(x, y, f: FeatureExtractor | None = None) -> float:
    """sum_l w_l / (H_l W_l) * sum_{h,w} ||phi_l(x)[h,w] - phi_l(y)[h,w]||^2"""
    f = f or FeatureExtractor()
    x, y = _pair(x, y)
    total = 0.0
    for w_l, fx, fy in zip(f.layer_weights, f.layers(x), f.layers(y)):
        H, W = fx.shape[:2]
        total += w_l * float(((fx - fy) ** 2).sum()) / (H * W)
    return total


@dataclass
class FeatureMoments:
    mean: np.ndarray
    cov: np.ndarray


def moments_of(features, eps: float = 1e-6) -> FeatureMoments:
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] < 2:
        raise ContractError(f"need at least 2 feature vectors, got shape {feats.shape}")
    mu = feats.mean(axis=0)
    d = feats - mu
    cov = d.T @ d / (feats.shape[0] - 1)
    cov = 0.5 * (cov + cov.T) + eps * np.eye(feats.shape[1])
    return FeatureMoments(mu, cov)


def matrix_sqrt_psd(M, tol: float = 1e-8) -> np.ndarray:
    """Symmetric square root through an eigendecomposition."""
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise DimensionError(f"square matrix required, got {M.shape}")
    scale = max(np.abs(M).max(initial=0.0), 1.0)
    if np.abs(M - M.T).max(initial=0.0) > tol * scale:
        raise ContractError("matrix is not symmetric within tolerance")
    vals, vecs = np.linalg.eigh(0.5 * (M + M.T))
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def fid(p: FeatureMoments, q: FeatureMoments) -> float:
    if p.mean.shape != q.mean.shape or p.cov.shape != q.cov.shape:
        raise ContractError(f"moment dimensions differ: {p.mean.shape} vs {q.mean.shape}")
    diff = p.mean - q.mean
    sp = matrix_sqrt_psd(p.cov)
    inner = sp @ q.cov @ sp
    cross = matrix_sqrt_psd(0.5 * (inner + inner.T))
    value = float(diff @ diff + np.trace(p.cov) + np.trace(q.cov) - 2.0 * np.trace(cross))
    return max(value, 0.0)


def fid_of_images(real: Sequence, fake: Sequence, f: FeatureExtractor | None = None) -> float:
    f = f or FeatureExtractor()
    return fid(moments_of([f.embed(x) for x in real]), moments_of([f.embed(x) for x in fake]))


# ---------------------------------------------------------------------------
# reports


@dataclass
class MetricRow:
    sample: int
    mask: str
    modality: str
    psnr: float
    ssim: float
    lpips: float


@dataclass
class MetricReport:
    rows: list[MetricRow] = field(default_factory=list)
    fid: dict[str, float] = field(default_factory=dict)  # keyed by group (mask or variant)

    def add(self, row: MetricRow) -> None:
        self.rows.append(row)

    def summary(self, key: str = "mask") -> dict[str, dict[str, float]]:
        """Per-group mean/std of each metric; +inf PSNR entries are excluded."""
        groups: dict[str, list[MetricRow]] = {}
        for r in self.rows:
            groups.setdefault(getattr(r, key), []).append(r)
        out = {}
        for g, rows in groups.items():
            stats = {"n": float(len(rows))}
            for name in ("psnr", "ssim", "lpips"):
                vals = np.array([getattr(r, name) for r in rows], dtype=np.float64)
                vals = vals[np.isfinite(vals)]
                stats[f"{name}_mean"] = float(vals.mean()) if vals.size else math.nan
                stats[f"{name}_std"] = float(vals.std()) if vals.size else math.nan
            if g in self.fid:
                stats["fid"] = self.fid[g]
            out[g] = stats
        return out

    def rows_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["sample", "mask", "modality", "psnr", "ssim", "lpips"])
        for r in self.rows:
            w.writerow([r.sample, r.mask, r.modality, fmt(r.psnr), fmt(r.ssim), fmt(r.lpips)])
        return buf.getvalue()

    def summary_csv(self, key: str = "mask") -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        cols = ["n", "psnr_mean", "psnr_std", "ssim_mean", "ssim_std", "lpips_mean", "lpips_std", "fid"]
        w.writerow([key] + cols)
        for g, stats in self.summary(key).items():
            w.writerow([g] + [fmt(stats.get(c, math.nan)) if c != "n" else int(stats["n"]) for c in cols])
        return buf.getvalue()


def fmt(v: float) -> str:
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    if math.isnan(v):
        return "nan"
    return f"{v:.4f}"
