"""Run configuration: one flat record of every tunable, read from
``key = value`` text files and overridable from the command line.

Blank lines and ``#`` comments are ignored. Unknown keys are an error.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

from .conditioning import GUIDANCE_MODES, ConditioningOptions
from .denoiser import DenoiserConfig
from .errors import ConfigurationError, DataIOError
from .frequency import HF_MODES, GaussianKernel, make_kernel
from .schedule import NoiseSchedule, make_schedule
from .trainer import CurriculumSchedule, MIXED, TrainConfig

BETA_SCALINGS = ("none", "ddpm-equivalent")
DDPM_STEPS = 1000


def _doc(default, text: str):
    return field(default=default, metadata={"doc": text})


@dataclass(frozen=True)
class RunConfig:
    # schedule
    T: int = _doc(200, "number of diffusion steps")
    beta_start: float = _doc(1e-4, "first beta of the linear schedule")
    beta_end: float = _doc(0.02, "last beta of the linear schedule")
    beta_scaling: str = _doc("none", "none | ddpm-equivalent (multiply both endpoints by 1000/T)")
    phase_boundary: int = _doc(-1, "last fine-phase step; -1 means floor(T/2)")
    # frequency guidance
    kernel_size: int = _doc(21, "Gaussian kernel side length (odd)")
    sigma: float = _doc(0.0, "Gaussian kernel sigma; 0 means kernel_size/6")
    hf_mode: str = _doc("residual", "high-pass form: residual | as-written")
    guidance: str = _doc("both", "guide channel: both | none | lf | hf")
    use_sources: bool = _doc(True, "feed available modalities as condition channels")
    dynamic_selection: bool = _doc(True, "pick the high-frequency source right-to-left")
    # denoiser
    depth: int = _doc(3, "UNet resolution levels")
    base_width: int = _doc(16, "channels at the first level, doubled per level")
    convs_per_block: int = _doc(2, "conv-BN-ReLU layers per block")
    time_embed_dim: int = _doc(32, "sinusoidal timestep embedding width")
    # training
    epochs: int = _doc(3, "passes over the training set")
    max_steps: int = _doc(0, "stop after this many steps; 0 means no cap")
    batch_size: int = _doc(16, "samples per optimizer step")
    lr: float = _doc(1e-4, "Adam learning rate")
    clip_norm: float = _doc(1.0, "global gradient-norm clip; 0 disables")
    curriculum: str = _doc("1,2,3", "missing counts in stage order, or 'uniform'")
    stage_spans: str = _doc("", "relative stage lengths, comma separated; empty means equal")
    mixed_fraction: float = _doc(0.1, "share of training in the final all-mask stage")
    # data and seeds
    count: int = _doc(2000, "samples written by gen-data")
    size: int = _doc(32, "phantom side length")
    data_seed: int = _doc(1, "dataset generator seed")
    seed: int = _doc(0, "model init and training seed")
    sample_seed: int = _doc(7, "sampling noise seed")
    clip_x0: float = _doc(1.0, "clamp the implied clean image to +-clip_x0 while sampling; 0 disables")
    eval_limit: int = _doc(0, "evaluate at most this many samples; 0 means all")

    def __post_init__(self):
        if self.beta_scaling not in BETA_SCALINGS:
            raise ConfigurationError(f"beta_scaling must be one of {BETA_SCALINGS}")
        if self.hf_mode not in HF_MODES:
            raise ConfigurationError(f"hf_mode must be one of {HF_MODES}")
        if self.guidance not in GUIDANCE_MODES:
            raise ConfigurationError(f"guidance must be one of {GUIDANCE_MODES}")
        for name in ("T", "epochs", "batch_size", "count", "size"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive")
        if self.batch_size < 2:
            raise ConfigurationError("batch_size must be at least 2")
        if not self.lr > 0:
            raise ConfigurationError("lr must be positive")
        self.curriculum_schedule()  # validates curriculum fields

    # -- derived objects --------------------------------------------------

    def betas(self) -> tuple[float, float]:
        if self.beta_scaling == "ddpm-equivalent":
            scale = DDPM_STEPS / self.T
            return self.beta_start * scale, self.beta_end * scale
        return self.beta_start, self.beta_end

    def schedule(self, T: int | None = None) -> NoiseSchedule:
        cfg = self if T is None else dataclasses.replace(self, T=T)
        b0, b1 = cfg.betas()
        boundary = None if cfg.phase_boundary < 0 else cfg.phase_boundary
        return make_schedule(cfg.T, b0, b1, boundary)

    def sample_clip(self) -> float | None:
        return self.clip_x0 if self.clip_x0 > 0 else None

    def kernel(self) -> GaussianKernel:
        return make_kernel(self.kernel_size, self.sigma or None)

    def denoiser(self) -> DenoiserConfig:
        return DenoiserConfig(self.depth, self.base_width, 5, 4, self.time_embed_dim, self.convs_per_block)

    def options(self) -> ConditioningOptions:
        return ConditioningOptions(self.guidance, self.use_sources, self.dynamic_selection)

    def train_config(self) -> TrainConfig:
        return TrainConfig(lr=self.lr, clip_norm=self.clip_norm, batch_size=self.batch_size,
                           kernel_size=self.kernel_size, sigma=self.sigma or None, hf_mode=self.hf_mode,
                           guidance=self.guidance, use_sources=self.use_sources,
                           dynamic_selection=self.dynamic_selection)

    def curriculum_schedule(self) -> CurriculumSchedule:
        if self.curriculum.strip() == "uniform":
            return CurriculumSchedule.uniform(1.0)
        try:
            counts = [int(c) for c in self.curriculum.split(",") if c.strip()]
            spans = [float(x) for x in self.stage_spans.split(",") if x.strip()] or [1.0] * len(counts)
        except ValueError as exc:
            raise ConfigurationError(f"bad curriculum/stage_spans: {exc}") from exc
        if len(spans) != len(counts):
            raise ConfigurationError("stage_spans needs one entry per curriculum stage")
        if not 0 <= self.mixed_fraction < 1:
            raise ConfigurationError("mixed_fraction must lie in [0, 1)")
        body = 1.0 - self.mixed_fraction
        stages = [(c, body * sp / sum(spans)) for c, sp in zip(counts, spans)]
        if self.mixed_fraction > 0:
            stages.append((MIXED, self.mixed_fraction))
        return CurriculumSchedule(tuple(stages))

    # -- text form --------------------------------------------------------

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            lines.append(f"# {f.metadata['doc']}")
            lines.append(f"{f.name} = {_render(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    def with_overrides(self, values: dict) -> "RunConfig":
        return dataclasses.replace(self, **coerce(values))


def _render(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _parse_value(key: str, raw: str):
    kind = FIELD_TYPES[key]
    raw = raw.strip()
    try:
        if kind == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError as exc:
        raise ConfigurationError(f"{key}: {exc}") from exc
    return raw


def coerce(values: dict) -> dict:
    out = {}
    for key, raw in values.items():
        if key not in FIELD_TYPES:
            raise ConfigurationError(f"unknown config key {key!r}")
        out[key] = _parse_value(key, raw) if isinstance(raw, str) else raw
    return out


def parse_config_text(text: str) -> dict:
    values = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {n}: expected key = value")
        key, raw = (p.strip() for p in line.split("=", 1))
        if key not in FIELD_TYPES:
            raise ConfigurationError(f"line {n}: unknown config key {key!r}")
        if key in values:
            raise ConfigurationError(f"line {n}: duplicate key {key!r}")
        values[key] = raw
    return coerce(values)


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    values = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise DataIOError(f"cannot read config {path}: {exc}") from exc
        values = parse_config_text(text)
    values.update(coerce(overrides or {}))
    return RunConfig(**values)
