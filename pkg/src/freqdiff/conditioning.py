"""Availability masks and assembly of the 5-channel network input.

Channels 0..n-1 hold the modalities in canonical order (noisy state for a
missing modality, clean source for an available one); the last channel
holds the frequency guide, low band during the coarse phase and high band
during the fine phase.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np

from .errors import ContractError, DimensionError, InputError, TaskError
from .frequency import GuidancePair
from .phantoms import MODALITIES
from .schedule import NoiseSchedule, Phase, phase_of

GUIDANCE_MODES = ("both", "none", "lf", "hf")


@dataclass(frozen=True)
class AvailabilityMask:
    bits: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "bits", tuple(int(bool(b)) for b in self.bits))

    def __iter__(self):
        return iter(self.bits)

    def __len__(self) -> int:
        return len(self.bits)

    def __str__(self) -> str:
        return "".join(str(b) for b in self.bits)

    @classmethod
    def parse(cls, text: str, n: int = len(MODALITIES)) -> "AvailabilityMask":
        text = text.strip()
        if len(text) != n or set(text) - {"0", "1"}:
            raise InputError(f"mask string must be {n} characters of 0/1, got {text!r}")
        return cls(tuple(int(c) for c in text))

    @property
    def available(self) -> tuple[int, ...]:
        return tuple(i for i, b in enumerate(self.bits) if b)

    @property
    def missing(self) -> tuple[int, ...]:
        return tuple(i for i, b in enumerate(self.bits) if not b)

    @property
    def is_task(self) -> bool:
        return 0 < sum(self.bits) < len(self.bits)

    def require_task(self) -> None:
        if not any(self.bits):
            raise TaskError("mask has no available modality; at least one source is required")
        if all(self.bits):
            raise TaskError("mask has every modality available; nothing to synthesize")

    def as_array(self, dtype=np.float64) -> np.ndarray:
        return np.asarray(self.bits, dtype=dtype)


def encode_mask(available: Iterable[str], names=MODALITIES) -> AvailabilityMask:
    available = set(available)
    unknown = available - set(names)
    if unknown:
        raise InputError(f"unknown modality name(s): {sorted(unknown)}; expected {list(names)}")
    return AvailabilityMask(tuple(int(n in available) for n in names))


def decode_mask(mask: AvailabilityMask, names=MODALITIES) -> set[str]:
    return {names[i] for i in mask.available}


def all_masks(n: int = len(MODALITIES)) -> list[AvailabilityMask]:
    return [AvailabilityMask(b) for b in itertools.product((0, 1), repeat=n)]


def valid_masks(n: int = len(MODALITIES)) -> list[AvailabilityMask]:
    """The 2**n - 2 masks that have at least one source and one target."""
    return [m for m in all_masks(n) if m.is_task]


def masks_with_missing(count: int, n: int = len(MODALITIES)) -> list[AvailabilityMask]:
    return [m for m in valid_masks(n) if len(m.missing) == count]


@dataclass(frozen=True)
class ConditioningOptions:
    """Switches used by the ablation variants; defaults are the full model."""

    guidance: str = "both"  # both | none | lf | hf
    use_sources: bool = True
    dynamic_selection: bool = True

    def __post_init__(self):
        if self.guidance not in GUIDANCE_MODES:
            raise ContractError(f"guidance must be one of {GUIDANCE_MODES}, got {self.guidance!r}")


FULL = ConditioningOptions()


@dataclass
class ConditioningStack:
    channels: np.ndarray  # (n_mod + 1, H, W)
    mask: AvailabilityMask
    t: int
    phase: Phase


def guide_channel(guidance: GuidancePair, phase: Phase, options: ConditioningOptions = FULL) -> np.ndarray:
    if options.guidance == "none":
        return np.zeros_like(guidance.lf_image)
    if options.guidance == "lf":
        return guidance.lf_image
    if options.guidance == "hf":
        return guidance.hf_image
    return guidance.lf_image if phase is Phase.COARSE else guidance.hf_image


def assemble_input(sample, mask: AvailabilityMask, noisy: Mapping[int, np.ndarray], guidance: GuidancePair,
                   t: int, s: NoiseSchedule, options: ConditioningOptions = FULL) -> ConditioningStack:
    """Build the network input for one sample at timestep ``t``.

    ``noisy`` maps each missing modality index to its current state and must
    contain exactly the missing indices.
    """
    mask.require_task()
    images = getattr(sample, "modalities", sample)
    n_mod, H, W = images.shape
    if len(mask) != n_mod:
        raise DimensionError(f"mask has {len(mask)} bits for {n_mod} modalities")
    if set(noisy) != set(mask.missing):
        raise ContractError(f"noisy states given for {sorted(noisy)}, expected missing {list(mask.missing)}")
    phase = phase_of(t, s)
    channels = np.empty((n_mod + 1, H, W), dtype=np.float64)
    for m in range(n_mod):
        if mask.bits[m]:
            channels[m] = images[m] if options.use_sources else 0.0
        else:
            state = np.asarray(noisy[m])
            if state.shape != (H, W):
                raise DimensionError(f"noisy state for modality {m} has shape {state.shape}")
            channels[m] = state
    channels[n_mod] = guide_channel(guidance, phase, options)
    return ConditioningStack(channels, mask, int(t), phase)


def split_output(net_out: np.ndarray, mask: AvailabilityMask, sample) -> np.ndarray:
    """Keep the missing-modality channels of ``net_out``; put the clean
    sources back in the available channels."""
    images = getattr(sample, "modalities", sample)
    net_out = np.asarray(net_out)
    if net_out.shape[0] != len(mask) or net_out.shape != images.shape:
        raise ContractError(f"network output {net_out.shape} does not match {len(mask)} modalities of {images.shape}")
    keep = mask.as_array(bool)[:, None, None]
    return np.where(keep, images, net_out)


def assemble_batch(images: np.ndarray, bits: np.ndarray, states: np.ndarray, guides: np.ndarray,
                   use_sources: bool = True) -> np.ndarray:
    """Vectorized assembly for a batch.

    ``images``/``states`` are (B, n_mod, H, W), ``bits`` is (B, n_mod) and
    ``guides`` the already phase-selected (B, H, W) guide channel.
    """
    avail = bits[:, :, None, None].astype(bool)
    sources = images if use_sources else np.zeros_like(images)
    body = np.where(avail, sources, states)
    return np.concatenate([body, guides[:, None]], axis=1)
