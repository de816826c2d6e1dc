"""Variance-preserving noise schedules on continuous time t in [0, 1].

A schedule supplies the pair {alpha(t), sigma(t)} with alpha^2 + sigma^2 = 1,
plus the time derivatives d log alpha/dt and d sigma^2/dt that form the
drift/diffusion coefficients of the forward SDE and probability-flow ODE:

    f(z, t) = (d log alpha/dt) * z
    g^2(t)  = d sigma^2/dt - 2 (d log alpha/dt) * sigma^2
"""

from __future__ import annotations

import math

import numpy as np

__all__ = [
    "NoiseSchedule",
    "CosineSchedule",
    "LinearAlpha2Schedule",
    "make_schedule",
    "SCHEDULE_KINDS",
]


class ScheduleError(ValueError):
    pass


class NoiseSchedule:
    """Immutable {alpha_t, sigma_t} pair; subclasses define the curves."""

    kind = "abstract"

    def alpha(self, t: float) -> float:
        raise NotImplementedError

    def sigma(self, t: float) -> float:
        raise NotImplementedError

    def dlog_alpha_dt(self, t: float) -> float:
        raise NotImplementedError

    def dsigma_sq_dt(self, t: float) -> float:
        raise NotImplementedError

    def alpha_sigma(self, t: float) -> tuple[float, float]:
        """Evaluate (alpha, sigma) at t, enforcing 0 <= t <= 1."""
        _check_time(t)
        return self.alpha(t), self.sigma(t)

    def drift_diffusion(self, t: float) -> tuple[float, float]:
        """Scalar drift coefficient and g^2 at t; singular at t = 1."""
        _check_time(t)
        if t >= 1.0:
            raise ScheduleError("drift/diffusion coefficients diverge at t = 1")
        dloga = self.dlog_alpha_dt(t)
        return dloga, self.dsigma_sq_dt(t) - 2.0 * dloga * self.sigma(t) ** 2

    def forward_sample(self, x: np.ndarray, t: float, eps: np.ndarray) -> np.ndarray:
        """z_t = alpha_t * x + sigma_t * eps."""
        x = np.asarray(x, dtype=np.float64)
        eps = np.asarray(eps, dtype=np.float64)
        if x.shape != eps.shape:
            raise ScheduleError(f"x shape {x.shape} != eps shape {eps.shape}")
        a, s = self.alpha_sigma(t)
        return a * x + s * eps

    def score_from_signal(self, z_t: np.ndarray, x_hat: np.ndarray, t: float) -> np.ndarray:
        """Score estimate (alpha_t * x_hat - z_t) / sigma_t^2; needs sigma_t > 0."""
        z_t = np.asarray(z_t, dtype=np.float64)
        x_hat = np.asarray(x_hat, dtype=np.float64)
        if z_t.shape != x_hat.shape:
            raise ScheduleError(f"z shape {z_t.shape} != x_hat shape {x_hat.shape}")
        a, s = self.alpha_sigma(t)
        if s == 0.0:
            raise ScheduleError("score undefined at t = 0 (sigma = 0)")
        return (a * x_hat - z_t) / (s * s)


class CosineSchedule(NoiseSchedule):
    """alpha(t) = cos(pi t / 2), sigma(t) = sin(pi t / 2)."""

    kind = "cosine"

    def alpha(self, t: float) -> float:
        return math.cos(0.5 * math.pi * t)

    def sigma(self, t: float) -> float:
        return math.sin(0.5 * math.pi * t)

    def dlog_alpha_dt(self, t: float) -> float:
        return -0.5 * math.pi * math.tan(0.5 * math.pi * t)

    def dsigma_sq_dt(self, t: float) -> float:
        return 0.5 * math.pi * math.sin(math.pi * t)


class LinearAlpha2Schedule(NoiseSchedule):
    """alpha(t)^2 = 1 - t, so sigma(t)^2 = t."""

    kind = "linear_alpha2"

    def alpha(self, t: float) -> float:
        return math.sqrt(1.0 - t)

    def sigma(self, t: float) -> float:
        return math.sqrt(t)

    def dlog_alpha_dt(self, t: float) -> float:
        return -0.5 / (1.0 - t)

    def dsigma_sq_dt(self, t: float) -> float:
        return 1.0


SCHEDULE_KINDS = ("cosine", "linear_alpha2")


def make_schedule(kind: str) -> NoiseSchedule:
    if kind == "cosine":
        return CosineSchedule()
    if kind == "linear_alpha2":
        return LinearAlpha2Schedule()
    raise ScheduleError(f"unknown schedule kind {kind!r}; expected one of {SCHEDULE_KINDS}")


def _check_time(t: float) -> None:
    if not (0.0 <= t <= 1.0):
        raise ScheduleError(f"time {t} outside [0, 1]")
