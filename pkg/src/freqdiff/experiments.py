"""Training, evaluation, ablation and timestep-sweep drivers shared by the
command line and the acceptance suite."""

from __future__ import annotations

import csv
import dataclasses
import io
import math
import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .conditioning import AvailabilityMask, masks_with_missing, valid_masks
from .config import RunConfig
from .denoiser import DenoiserParams
from .errors import ConfigurationError
from .metrics import FeatureExtractor, MetricReport, MetricRow, fid_of_images, fmt, lpips, psnr, ssim
from .phantoms import MODALITIES, PhantomSample, stack_modalities
from .schedule import NoiseSchedule
from .trainer import TrainState, fit, synthesize_batch

PSNR_MAX = 2.0  # peak-to-peak range of images in [-1, 1]

# Each variant is a set of RunConfig overrides on top of the base config.
ABLATIONS: dict[str, dict] = {
    "full": {},
    "no-guidance": {"guidance": "none"},
    "no-sources": {"use_sources": False},
    "lf-only": {"guidance": "lf"},
    "hf-only": {"guidance": "hf"},
    "no-curriculum": {"curriculum": "uniform", "mixed_fraction": 0.0},
    "no-dynamic-selection": {"dynamic_selection": False},
}


def variant_config(cfg: RunConfig, variant: str) -> RunConfig:
    if variant not in ABLATIONS:
        raise ConfigurationError(f"unknown ablation variant {variant!r}; known: {', '.join(ABLATIONS)}")
    return dataclasses.replace(cfg, **ABLATIONS[variant])


def new_state(cfg: RunConfig) -> TrainState:
    return TrainState.create(cfg.denoiser(), cfg.schedule(), cfg.curriculum_schedule(), cfg.train_config(), cfg.seed)


def train_model(cfg: RunConfig, samples: Sequence[PhantomSample], log_path=None,
                on_step: Callable[[TrainState, float], None] | None = None) -> tuple[TrainState, list[float]]:
    state = new_state(cfg)
    losses = fit(state, samples, cfg.epochs, log_path, on_step, cfg.max_steps)
    return state, losses


def running_mean(values: Sequence[float], window: int = 50) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if v.size < window:
        raise ConfigurationError(f"need at least {window} values, got {v.size}")
    c = np.cumsum(np.concatenate([[0.0], v]))
    return (c[window:] - c[:-window]) / window


# ---------------------------------------------------------------------------
# evaluation


def parse_masks(spec: str) -> list[AvailabilityMask]:
    """``all14``, ``easy``/``moderate``/``hard``, or comma-separated bit strings."""
    spec = spec.strip()
    if spec == "all14":
        return valid_masks()
    named = {"easy": 1, "moderate": 2, "hard": 3}
    if spec in named:
        return masks_with_missing(named[spec])
    masks = [AvailabilityMask.parse(s.strip()) for s in spec.split(",") if s.strip()]
    if not masks:
        raise ConfigurationError("empty mask list")
    for m in masks:
        m.require_task()
    return masks


def cycled_pairs(n: int, masks: Sequence[AvailabilityMask]) -> list[tuple[int, AvailabilityMask]]:
    """Sample i is evaluated under ``masks[i % len(masks)]``."""
    return [(i, masks[i % len(masks)]) for i in range(n)]


def full_pairs(n: int, masks: Sequence[AvailabilityMask]) -> list[tuple[int, AvailabilityMask]]:
    """Every sample under every mask."""
    return [(i, m) for m in masks for i in range(n)]


@dataclass
class Synthesis:
    index: int
    mask: AvailabilityMask
    images: np.ndarray  # (n_mod, H, W); missing channels synthesized


def synthesize_pairs(params: DenoiserParams, s: NoiseSchedule, images: np.ndarray,
                     pairs: Sequence[tuple[int, AvailabilityMask]], cfg: RunConfig,
                     chunk: int = 64) -> list[Synthesis]:
    """Synthesize every (sample, mask) pair.

    Pairs are grouped by mask and run in chunks; each group draws its
    sampling noise from a generator seeded by (sample_seed, mask), so the
    result does not depend on which other masks are requested.
    """
    groups: dict[AvailabilityMask, list[int]] = {}
    for i, m in pairs:
        groups.setdefault(m, []).append(i)
    kernel, options, clip = cfg.kernel(), cfg.options(), cfg.sample_clip()
    out: dict[tuple[int, AvailabilityMask], np.ndarray] = {}
    for m in sorted(groups, key=str):
        idx = groups[m]
        rng = np.random.default_rng([cfg.sample_seed, int(str(m), 2)])
        for lo in range(0, len(idx), chunk):
            part = idx[lo : lo + chunk]
            res = synthesize_batch(params, images[part], [m] * len(part), s, rng, kernel, cfg.hf_mode, options,
                                   clip=clip)
            for i, r in zip(part, res):
                out[(i, m)] = r
    return [Synthesis(i, m, out[(i, m)]) for i, m in pairs]


def score(images: np.ndarray, results: Sequence[Synthesis], extractor: FeatureExtractor | None = None,
          with_fid: bool = True) -> MetricReport:
    f = extractor or FeatureExtractor()
    report = MetricReport()
    fakes: dict[str, list[np.ndarray]] = {}
    reals: dict[str, list[np.ndarray]] = {}
    for r in results:
        key = str(r.mask)
        for mod in r.mask.missing:
            x, y = r.images[mod], images[r.index, mod]
            report.add(MetricRow(r.index, key, MODALITIES[mod], psnr(x, y, PSNR_MAX), ssim(x, y, PSNR_MAX),
                                 lpips(x, y, f)))
            fakes.setdefault(key, []).append(x)
            reals.setdefault(key, []).append(y)
    if with_fid:
        for key in fakes:
            if len(fakes[key]) >= 2:
                report.fid[key] = fid_of_images(reals[key], fakes[key], f)
    return report


def evaluate(params: DenoiserParams, s: NoiseSchedule, samples: Sequence[PhantomSample],
             pairs: Sequence[tuple[int, AvailabilityMask]], cfg: RunConfig, with_fid: bool = True) -> MetricReport:
    images = stack_modalities(samples).astype(np.float64)
    return score(images, synthesize_pairs(params, s, images, pairs, cfg), with_fid=with_fid)


def per_sample_psnr(report: MetricReport) -> dict[tuple[int, str], float]:
    """Mean PSNR over the synthesized modalities of each (sample, mask)."""
    acc: dict[tuple[int, str], list[float]] = {}
    for r in report.rows:
        acc.setdefault((r.sample, r.mask), []).append(r.psnr)
    return {k: float(np.mean(v)) for k, v in acc.items()}


def bootstrap_lower(diffs: Sequence[float], n_boot: int = 5000, level: float = 0.95, seed: int = 0) -> float:
    """One-sided lower confidence bound for the mean of ``diffs``
    (percentile bootstrap)."""
    d = np.asarray(diffs, dtype=np.float64)
    if d.size < 2:
        raise ConfigurationError("bootstrap needs at least two values")
    rng = np.random.default_rng(seed)
    means = d[rng.integers(0, d.size, size=(n_boot, d.size))].mean(axis=1)
    return float(np.quantile(means, 1.0 - level))


# ---------------------------------------------------------------------------
# ablation and timestep sweep


def ablation_csv(reports: dict[str, MetricReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["variant", "n", "psnr_mean", "psnr_std", "ssim_mean", "lpips_mean", "fid"])
    for name, rep in reports.items():
        rows = rep.rows
        p = np.array([r.psnr for r in rows if math.isfinite(r.psnr)])
        fid_all = float(np.mean(list(rep.fid.values()))) if rep.fid else math.nan
        w.writerow([name, len(rows), fmt(p.mean()), fmt(p.std()), fmt(np.mean([r.ssim for r in rows])),
                    fmt(np.mean([r.lpips for r in rows])), fmt(fid_all)])
    return buf.getvalue()


@dataclass
class SweepRow:
    T: int
    psnr_mean: float
    ssim_mean: float
    sec_per_image: float
    n: int


def time_sampling(params: DenoiserParams, s: NoiseSchedule, images: np.ndarray, mask: AvailabilityMask,
                  cfg: RunConfig, repeats: int = 1) -> float:
    """Best-of-``repeats`` wall-clock seconds per synthesized image."""
    best = math.inf
    for r in range(repeats):
        rng = np.random.default_rng([cfg.sample_seed, r])
        t0 = time.perf_counter()
        synthesize_batch(params, images, [mask] * len(images), s, rng, cfg.kernel(), cfg.hf_mode, cfg.options(),
                         clip=cfg.sample_clip())
        best = min(best, time.perf_counter() - t0)
    return best / len(images)


def linear_r2(x: Sequence[float], y: Sequence[float]) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    total = ((y - y.mean()) ** 2).sum()
    return float(1.0 - (resid**2).sum() / total) if total > 0 else 1.0


def sweep_T(cfg: RunConfig, train: Sequence[PhantomSample], test: Sequence[PhantomSample], T_values: Sequence[int],
            masks: Sequence[AvailabilityMask], timing_images: int = 4, train_models: bool = True,
            on_model: Callable[[int, TrainState], None] | None = None) -> list[SweepRow]:
    """Per T: train (or initialize) a model, score it on ``test`` and time sampling."""
    images = stack_modalities(test).astype(np.float64)
    pairs = cycled_pairs(len(test), masks)
    rows = []
    for T in T_values:
        cfg_T = dataclasses.replace(cfg, T=int(T))
        state = train_model(cfg_T, train)[0] if train_models else new_state(cfg_T)
        if on_model is not None:
            on_model(int(T), state)
        rep = score(images, synthesize_pairs(state.params, state.schedule, images, pairs, cfg_T), with_fid=False)
        sec = time_sampling(state.params, state.schedule, images[:timing_images], masks[0], cfg_T)
        finite = [r.psnr for r in rep.rows if math.isfinite(r.psnr)]
        rows.append(SweepRow(int(T), float(np.mean(finite)), float(np.mean([r.ssim for r in rep.rows])), sec,
                             len(rep.rows)))
    return rows


def sweep_csv(rows: Sequence[SweepRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["T", "n", "psnr_mean", "ssim_mean"])
    for r in rows:
        w.writerow([r.T, r.n, fmt(r.psnr_mean), fmt(r.ssim_mean)])
    return buf.getvalue()


def sweep_timing_csv(rows: Sequence[SweepRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["T", "sec_per_image"])
    for r in rows:
        w.writerow([r.T, f"{r.sec_per_image:.6f}"])
    w.writerow(["r2_linear", f"{linear_r2([r.T for r in rows], [r.sec_per_image for r in rows]):.6f}"])
    return buf.getvalue()

