"""Linear-beta noise schedule, closed-form forward sampling and the
ancestral reverse step, plus the coarse/fine split of the trajectory.

Timesteps are 1-based: ``t`` runs over ``1..T`` and ``alpha_bar(0) = 1``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, ContractError, DimensionError


class Phase(enum.Enum):
    COARSE = "coarse"
    FINE = "fine"


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta_start: float
    beta_end: float
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    phase_boundary: int

    def _check(self, t: int) -> None:
        if not 1 <= int(t) <= self.T:
            raise ContractError(f"timestep {t} outside 1..{self.T}")

    def beta_at(self, t: int) -> float:
        self._check(t)
        return float(self.beta[t - 1])

    def alpha_at(self, t: int) -> float:
        self._check(t)
        return float(self.alpha[t - 1])

    def alpha_bar_at(self, t: int) -> float:
        """Cumulative product up to ``t``; ``t = 0`` gives 1."""
        if t == 0:
            return 1.0
        self._check(t)
        return float(self.alpha_bar[t - 1])


def make_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02, phase_boundary: int | None = None) -> NoiseSchedule:
    if int(T) != T or T < 2:
        raise ConfigurationError(f"T must be an integer >= 2, got {T}")
    if not 0 < beta_start <= beta_end < 1:
        raise ConfigurationError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    T = int(T)
    if phase_boundary is None:
        phase_boundary = T // 2
    if not 0 <= phase_boundary <= T:
        raise ConfigurationError(f"phase boundary {phase_boundary} outside 0..{T}")
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    for arr in (beta, alpha, alpha_bar):
        arr.setflags(write=False)
    return NoiseSchedule(T, float(beta_start), float(beta_end), beta, alpha, alpha_bar, int(phase_boundary))


def forward_sample(x0: np.ndarray, t: int, eps: np.ndarray, s: NoiseSchedule) -> np.ndarray:
    """Draw ``x_t`` given ``x_0`` and the noise: sqrt(abar) x0 + sqrt(1 - abar) eps."""
    s._check(t)
    if np.shape(x0) != np.shape(eps):
        raise DimensionError(f"noise shape {np.shape(eps)} != image shape {np.shape(x0)}")
    ab = s.alpha_bar_at(t)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def posterior_sigma(t: int, s: NoiseSchedule) -> float:
    """Posterior variance (1 - abar_{t-1}) / (1 - abar_t) * beta_t."""
    s._check(t)
    return (1.0 - s.alpha_bar_at(t - 1)) / (1.0 - s.alpha_bar_at(t)) * s.beta_at(t)


def reverse_step(xt: np.ndarray, t: int, eps_pred: np.ndarray, z: np.ndarray | None, s: NoiseSchedule,
                 clip: float | None = None) -> np.ndarray:
    """One ancestral step x_t -> x_{t-1} with the 1/sqrt(alpha_t) mean coefficient.

    With ``clip`` set, the implied x_0 is clamped to [-clip, clip] and the
    mean is rebuilt from the posterior q(x_{t-1} | x_t, x_0). Without
    clamping the two forms are algebraically identical.
    """
    s._check(t)
    a, b, ab = s.alpha_at(t), s.beta_at(t), s.alpha_bar_at(t)
    if clip is None:
        mean = (xt - (b / np.sqrt(1.0 - ab)) * eps_pred) / np.sqrt(a)
    else:
        ab_prev = s.alpha_bar_at(t - 1)
        x0 = np.clip((xt - np.sqrt(1.0 - ab) * eps_pred) / np.sqrt(ab), -clip, clip)
        mean = (np.sqrt(ab_prev) * b * x0 + np.sqrt(a) * (1.0 - ab_prev) * xt) / (1.0 - ab)
    if t == 1 or z is None:
        return mean
    return mean + np.sqrt(posterior_sigma(t, s)) * z


def phase_of(t: int, s: NoiseSchedule) -> Phase:
    s._check(t)
    return Phase.COARSE if t > s.phase_boundary else Phase.FINE
