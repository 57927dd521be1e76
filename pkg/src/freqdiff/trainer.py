"""Curriculum training of the denoiser, the guided sampling loop, and
checkpoint persistence.

Checkpoint layout (little-endian)::

    magic      8 bytes  b"FQDCKPT\\n"
    version    u32
    meta_len   u64, then meta_len bytes of sorted-key JSON
    n_arrays   u64
    arrays     n_arrays x (u64 element count, float32 data)
    crc32      u32 over every preceding byte

The JSON block records the denoiser config, schedule parameters, training
options, counters and the ordered (name, shape) list of the arrays.
"""

from __future__ import annotations

import csv
import json
import math
import struct
import time
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .conditioning import (
    FULL,
    AvailabilityMask,
    ConditioningOptions,
    assemble_batch,
    masks_with_missing,
    valid_masks,
)
from .denoiser import DenoiserConfig, DenoiserParams, forward
from .errors import ConfigurationError, ContractError, DataIOError, NumericError
from .frequency import GaussianKernel, build_guidance, make_kernel, select_lf_source
from .phantoms import PhantomSample, iter_batches, stack_modalities
from .schedule import NoiseSchedule, Phase, forward_sample, make_schedule, phase_of, reverse_step

MIXED = 0  # stage marker: uniform over every valid mask


@dataclass(frozen=True)
class CurriculumSchedule:
    """Ordered (missing_count, span) stages; spans are relative lengths."""

    stages: tuple[tuple[int, float], ...]

    def __post_init__(self):
        if not self.stages:
            raise ConfigurationError("curriculum needs at least one stage")
        for count, span in self.stages:
            if count not in (MIXED, 1, 2, 3) or not span > 0:
                raise ConfigurationError(f"bad curriculum stage ({count}, {span})")
        counts = [c for c, _ in self.stages if c != MIXED]
        if counts != sorted(counts):
            raise ConfigurationError("curriculum stages must run easy to hard")

    @classmethod
    def default(cls, epochs: float = 3.0, mixed_fraction: float = 0.1) -> "CurriculumSchedule":
        mixed = epochs * mixed_fraction
        each = (epochs - mixed) / 3
        stages = [(1, each), (2, each), (3, each)]
        if mixed > 0:
            stages.append((MIXED, mixed))
        return cls(tuple(stages))

    @classmethod
    def uniform(cls, epochs: float = 1.0) -> "CurriculumSchedule":
        return cls(((MIXED, epochs),))

    @property
    def total(self) -> float:
        return sum(span for _, span in self.stages)

    def stage_at(self, progress: float) -> int:
        """Missing count (or ``MIXED``) at fractional progress in [0, 1]."""
        edge = 0.0
        for count, span in self.stages:
            edge += span / self.total
            if progress < edge:
                return count
        return self.stages[-1][0]


def sample_mask_for_stage(stage: int, rng: np.random.Generator, n_mod: int = 4) -> AvailabilityMask:
    if stage == MIXED:
        pool = valid_masks(n_mod)
    elif 1 <= stage <= n_mod - 1:
        pool = masks_with_missing(stage, n_mod)
    else:
        raise ContractError(f"missing count {stage} invalid for {n_mod} modalities")
    return pool[int(rng.integers(len(pool)))]


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 1.0
    batch_size: int = 16
    kernel_size: int = 21
    sigma: float | None = None
    hf_mode: str = "residual"
    guidance: str = "both"
    use_sources: bool = True
    dynamic_selection: bool = True

    @property
    def options(self) -> ConditioningOptions:
        return ConditioningOptions(self.guidance, self.use_sources, self.dynamic_selection)

    def kernel(self) -> GaussianKernel:
        return make_kernel(self.kernel_size, self.sigma)


@dataclass
class TrainState:
    params: DenoiserParams
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    schedule: NoiseSchedule
    curriculum: CurriculumSchedule
    config: TrainConfig = field(default_factory=TrainConfig)
    step: int = 0
    seed: int = 0
    epoch: int = 0
    total_steps: int = 0  # planned length, drives the curriculum
    last_masks: list = field(default_factory=list, repr=False, compare=False)

    @classmethod
    def create(cls, denoiser: DenoiserConfig, schedule: NoiseSchedule, curriculum: CurriculumSchedule,
               config: TrainConfig = TrainConfig(), seed: int = 0, total_steps: int = 0) -> "TrainState":
        params = DenoiserParams.init(denoiser, seed)
        m = {k: np.zeros_like(t.data) for k, t in params.tensors.items()}
        v = {k: np.zeros_like(t.data) for k, t in params.tensors.items()}
        return cls(params, m, v, schedule, curriculum, config, 0, seed, 0, total_steps)

    def stage(self) -> int:
        progress = self.step / self.total_steps if self.total_steps else 0.0
        return self.curriculum.stage_at(progress)


def adam_update(state: TrainState, grads: dict[str, np.ndarray]) -> None:
    cfg = state.config
    state.step += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, t in state.params.tensors.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        t.data -= (cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)).astype(t.dtype)


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    if not math.isfinite(total):
        raise NumericError("non-finite gradient norm")
    if max_norm and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads.values():
            g *= scale
    return total


def guidance_stack(images: np.ndarray, masks: Sequence[AvailabilityMask], kernel: GaussianKernel,
                   hf_mode: str, options: ConditioningOptions = FULL) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample (lf, hf) guide images, each (B, H, W)."""
    lf, hf = [], []
    for img, mask in zip(images, masks):
        hf_src = None if options.dynamic_selection else select_lf_source(mask)
        g = build_guidance(img, mask, kernel, hf_mode, hf_source=hf_src)
        lf.append(g.lf_image)
        hf.append(g.hf_image)
    return np.stack(lf), np.stack(hf)


def _pick_guides(lf: np.ndarray, hf: np.ndarray, phases: Sequence[Phase], options: ConditioningOptions) -> np.ndarray:
    if options.guidance == "none":
        return np.zeros_like(lf)
    if options.guidance == "lf":
        return lf
    if options.guidance == "hf":
        return hf
    coarse = np.array([p is Phase.COARSE for p in phases])[:, None, None]
    return np.where(coarse, lf, hf)


def diffusion_loss(params: DenoiserParams, images: np.ndarray, masks: Sequence[AvailabilityMask], t: np.ndarray,
                   eps: np.ndarray, s: NoiseSchedule, kernel: GaussianKernel, hf_mode: str = "residual",
                   options: ConditioningOptions = FULL, training: bool = True) -> nx.Tensor:
    """Noise-prediction MSE restricted to the missing-modality channels."""
    bits = np.array([m.bits for m in masks])
    ab = np.array([s.alpha_bar_at(int(ti)) for ti in t])[:, None, None, None]
    noisy = np.sqrt(ab) * images + np.sqrt(1.0 - ab) * eps
    lf, hf = guidance_stack(images, masks, kernel, hf_mode, options)
    guides = _pick_guides(lf, hf, [phase_of(int(ti), s) for ti in t], options)
    x = assemble_batch(images, bits, noisy, guides, options.use_sources)
    pred = forward(params, x.astype(params.dtype), t, training=training)
    return masked_noise_loss(pred, eps.astype(params.dtype), bits)


def masked_noise_loss(pred: nx.Tensor, eps: np.ndarray, bits: np.ndarray) -> nx.Tensor:
    """Mean squared error over the channels whose mask bit is 0."""
    weight = (1 - np.asarray(bits))[:, :, None, None]
    return nx.weighted_mse(pred, eps, weight)


def train_step(state: TrainState, batch: Sequence[PhantomSample], rng: np.random.Generator | None = None) -> tuple[TrainState, float]:
    if len(batch) < 2:
        raise ConfigurationError("train_step needs a batch of at least 2 samples")
    if rng is None:
        rng = np.random.default_rng([state.seed, state.step])
    s = state.schedule
    images = stack_modalities(batch).astype(np.float64)
    B, n_mod = images.shape[:2]
    stage = state.stage()
    masks = [sample_mask_for_stage(stage, rng, n_mod) for _ in range(B)]
    t = rng.integers(1, s.T + 1, size=B)
    eps = rng.standard_normal(images.shape)
    cfg = state.config
    state.params.zero_grad()
    loss = diffusion_loss(state.params, images, masks, t, eps, s, cfg.kernel(), cfg.hf_mode, cfg.options)
    value = loss.item()
    if not math.isfinite(value):
        raise NumericError(f"non-finite loss at step {state.step}")
    loss.backward()
    grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in state.params.tensors.items()}
    clip_gradients(grads, cfg.clip_norm)
    adam_update(state, grads)
    state.last_masks = masks
    return state, value


def fit(state: TrainState, samples: Sequence[PhantomSample], epochs: int, log_path=None,
        on_step: Callable[[TrainState, float], None] | None = None, max_steps: int = 0) -> list[float]:
    """Run ``epochs`` passes over ``samples``; returns the per-step losses.

    ``max_steps`` > 0 ends training early once ``state.step`` reaches it.

    Appends ``step,stage,mask,loss,wall_ms`` rows to ``log_path`` when given.
    """
    cfg = state.config
    steps_per_epoch = sum(1 for i in range(0, len(samples), cfg.batch_size) if len(samples) - i >= 2)
    if not state.total_steps:
        planned = steps_per_epoch * epochs
        state.total_steps = min(planned, max_steps) if max_steps else planned
    losses = []
    writer = fh = None
    if log_path is not None:
        new = not Path(log_path).exists()
        fh = open(log_path, "a", newline="")
        writer = csv.writer(fh)
        if new:
            writer.writerow(["step", "stage", "mask", "loss", "wall_ms"])
    try:
        for _ in range(epochs):
            if max_steps and state.step >= max_steps:
                break
            order_rng = np.random.default_rng([state.seed, 1_000_003, state.epoch])
            for batch in iter_batches(samples, cfg.batch_size, order_rng):
                t0 = time.perf_counter()
                stage = state.stage()
                _, loss = train_step(state, batch)
                losses.append(loss)
                if writer is not None:
                    masks = ";".join(str(m) for m in state.last_masks)
                    writer.writerow([state.step, stage, masks, f"{loss:.6f}", f"{(time.perf_counter() - t0) * 1e3:.1f}"])
                if on_step is not None:
                    on_step(state, loss)
                if max_steps and state.step >= max_steps:
                    break
            state.epoch += 1
    finally:
        if fh is not None:
            fh.close()
    return losses


# ---------------------------------------------------------------------------
# sampling


def synthesize_batch(params: DenoiserParams, images: np.ndarray, masks: Sequence[AvailabilityMask], s: NoiseSchedule,
                     rng: np.random.Generator, kernel: GaussianKernel | None = None, hf_mode: str = "residual",
                     options: ConditioningOptions = FULL, trace: Callable[[int, np.ndarray], None] | None = None,
                     clip: float | None = 1.0) -> np.ndarray:
    """Run every trajectory from t = T down to 1 in lockstep.

    ``clip`` bounds the implied x_0 at each step (see ``reverse_step``);
    ``None`` gives the plain ancestral update. Returns the (B, n_mod, H, W) final states; available channels hold the
    clean sources, missing channels the synthesized images.
    """
    kernel = kernel or make_kernel()
    images = np.asarray(images, dtype=np.float64)
    for m in masks:
        m.require_task()
    bits = np.array([m.bits for m in masks])
    avail = bits[:, :, None, None].astype(bool)
    lf, hf = guidance_stack(images, masks, kernel, hf_mode, options)
    states = rng.standard_normal(images.shape)
    states = np.where(avail, images, states)
    B = len(images)
    for t in range(s.T, 0, -1):
        guides = _pick_guides(lf, hf, [phase_of(t, s)] * B, options)
        x = assemble_batch(images, bits, states, guides, options.use_sources)
        if trace is not None:
            trace(t, x)
        eps_pred = forward(params, x.astype(params.dtype), np.full(B, t), training=False).data.astype(np.float64)
        z = rng.standard_normal(images.shape) if t > 1 else None
        states = reverse_step(states, t, eps_pred, z, s, clip)
        states = np.where(avail, images, states)  # condition outputs are dropped
    return states


def synthesize(params: DenoiserParams, sample: PhantomSample, mask: AvailabilityMask, s: NoiseSchedule,
               rng: np.random.Generator, kernel: GaussianKernel | None = None, hf_mode: str = "residual",
               options: ConditioningOptions = FULL, clip: float | None = 1.0) -> dict[int, np.ndarray]:
    """Synthesized images for the missing modalities of one sample."""
    out = synthesize_batch(params, sample.modalities[None], [mask], s, rng, kernel, hf_mode, options, clip=clip)[0]
    return {m: out[m] for m in mask.missing}


# ---------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = b"FQDCKPT\n"
CKPT_VERSION = 1
SUPPORTED_CKPT_VERSIONS = (1,)


def _checkpoint_arrays(state: TrainState) -> list[tuple[str, np.ndarray]]:
    arrays = [(f"param/{k}", t.data) for k, t in state.params.tensors.items()]
    for k, bn in state.params.norms.items():
        arrays += [(f"bn_mean/{k}", bn.running_mean), (f"bn_var/{k}", bn.running_var)]
    arrays += [(f"adam_m/{k}", a) for k, a in state.m.items()]
    arrays += [(f"adam_v/{k}", a) for k, a in state.v.items()]
    return arrays


def checkpoint_bytes(state: TrainState) -> bytes:
    arrays = _checkpoint_arrays(state)
    s = state.schedule
    meta = {
        "denoiser": asdict(state.params.config),
        "schedule": {"T": s.T, "beta_start": s.beta_start, "beta_end": s.beta_end, "phase_boundary": s.phase_boundary},
        "curriculum": [list(st) for st in state.curriculum.stages],
        "train": asdict(state.config),
        "step": state.step,
        "epoch": state.epoch,
        "seed": state.seed,
        "total_steps": state.total_steps,
        "bn_batches": {k: bn.num_batches for k, bn in state.params.norms.items()},
        "arrays": [[name, list(a.shape)] for name, a in arrays],
    }
    meta_raw = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    out = bytearray(CKPT_MAGIC)
    out += struct.pack("<IQ", CKPT_VERSION, len(meta_raw)) + meta_raw
    out += struct.pack("<Q", len(arrays))
    for _, a in arrays:
        out += struct.pack("<Q", a.size) + np.ascontiguousarray(a, dtype="<f4").tobytes()
    out += struct.pack("<I", zlib.crc32(out) & 0xFFFFFFFF)
    return bytes(out)


def save_checkpoint(state: TrainState, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(state))


def _fail(path, why: str):
    raise DataIOError(f"{path}: {why}")


def load_checkpoint(path) -> TrainState:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise DataIOError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(blob) < len(CKPT_MAGIC) + 16 or blob[: len(CKPT_MAGIC)] != CKPT_MAGIC:
        _fail(path, "not a checkpoint (bad magic)")
    (crc,) = struct.unpack_from("<I", blob, len(blob) - 4)
    if zlib.crc32(blob[:-4]) & 0xFFFFFFFF != crc:
        _fail(path, "CRC mismatch (truncated or corrupted)")
    pos = len(CKPT_MAGIC)
    version, meta_len = struct.unpack_from("<IQ", blob, pos)
    if version not in SUPPORTED_CKPT_VERSIONS:
        _fail(path, f"unsupported checkpoint version {version} (supported: {SUPPORTED_CKPT_VERSIONS})")
    pos += 12
    try:
        meta = json.loads(blob[pos : pos + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataIOError(f"{path}: unreadable metadata block: {exc}") from exc
    pos += meta_len
    (n_arrays,) = struct.unpack_from("<Q", blob, pos)
    pos += 8
    if n_arrays != len(meta["arrays"]):
        _fail(path, "array count disagrees with metadata")
    arrays = {}
    for name, shape in meta["arrays"]:
        (n,) = struct.unpack_from("<Q", blob, pos)
        pos += 8
        if n != math.prod(shape) or pos + 4 * n > len(blob) - 4:
            _fail(path, f"array {name} truncated or mis-sized")
        arrays[name] = np.frombuffer(blob, dtype="<f4", count=n, offset=pos).reshape(shape).astype(np.float32)
        pos += 4 * n
    if pos != len(blob) - 4:
        _fail(path, "trailing bytes after arrays")

    dcfg = DenoiserConfig(**meta["denoiser"])
    sch = meta["schedule"]
    schedule = make_schedule(sch["T"], sch["beta_start"], sch["beta_end"], sch["phase_boundary"])
    curriculum = CurriculumSchedule(tuple((int(c), float(sp)) for c, sp in meta["curriculum"]))
    tcfg = TrainConfig(**meta["train"])
    params = DenoiserParams.init(dcfg, 0)
    for k in params.tensors:
        params.tensors[k] = nx.Tensor(arrays[f"param/{k}"], requires_grad=True)
    for k, bn in params.norms.items():
        bn.running_mean = arrays[f"bn_mean/{k}"]
        bn.running_var = arrays[f"bn_var/{k}"]
        bn.num_batches = int(meta["bn_batches"][k])
    m = {k: arrays[f"adam_m/{k}"] for k in params.tensors}
    v = {k: arrays[f"adam_v/{k}"] for k in params.tensors}
    return TrainState(params, m, v, schedule, curriculum, tcfg, int(meta["step"]), int(meta["seed"]),
                      int(meta["epoch"]), int(meta["total_steps"]))
