"""Closed-form Gaussian ground truth for verifying the numeric components.

For isotropic Gaussian data x ~ N(m, s^2 I) under a variance-preserving
forward process, the time-t marginal, the posterior-mean denoiser, the score,
and the K-step deterministic sampling map are all available in closed form.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .schedule import CosineSchedule, NoiseSchedule

__all__ = [
    "GaussianData",
    "exact_marginal",
    "optimal_denoiser",
    "exact_score",
    "exact_ddim_scale",
    "OracleVelocityModel",
]


@dataclass(frozen=True)
class GaussianData:
    """Isotropic Gaussian data distribution N(mean, stddev^2 I)."""

    mean: np.ndarray
    stddev: float

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=np.float64))
        if self.stddev <= 0:
            raise ValueError("stddev must be positive")


def exact_marginal(g: GaussianData, sched: NoiseSchedule, t: float) -> tuple[np.ndarray, float]:
    """Marginal of z_t: N(alpha_t m, (alpha_t^2 s^2 + sigma_t^2) I)."""
    a, s = sched.alpha_sigma(t)
    return a * g.mean, math.sqrt(a * a * g.stddev**2 + s * s)


def optimal_denoiser(
    g: GaussianData, sched: NoiseSchedule, z_t: np.ndarray, t: float
) -> np.ndarray:
    """Posterior mean E[x | z_t] by the conditional-Gaussian formula."""
    z_t = np.asarray(z_t, dtype=np.float64)
    a, s = sched.alpha_sigma(t)
    var = a * a * g.stddev**2 + s * s
    gain = a * g.stddev**2 / var
    return g.mean + gain * (z_t - a * g.mean)


def exact_score(g: GaussianData, sched: NoiseSchedule, z_t: np.ndarray, t: float) -> np.ndarray:
    """Score of the closed-form marginal: -(z - alpha_t m) / (alpha_t^2 s^2 + sigma_t^2)."""
    z_t = np.asarray(z_t, dtype=np.float64)
    a, s = sched.alpha_sigma(t)
    var = a * a * g.stddev**2 + s * s
    return -(z_t - a * g.mean) / var


def exact_ddim_scale(K: int) -> float:
    """Output scale of K-step deterministic sampling of N(0, I) data under the
    cosine schedule with the optimal denoiser: cos(pi / (2K))^K.

    Each uniform step contracts z by alpha_s alpha_t + sigma_s sigma_t
    = cos(pi (t - s) / 2), and the product telescopes.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    return math.cos(math.pi / (2.0 * K)) ** K


class OracleVelocityModel:
    """Duck-typed stand-in for a trained model: the exact optimal velocity.

    v = alpha eps - sigma x evaluated at the posterior means, finite for t > 0.
    """

    def __init__(self, g: GaussianData, sched: NoiseSchedule | None = None):
        self.g = g
        self.sched = sched if sched is not None else CosineSchedule()

    @property
    def data_dim(self) -> int:
        return int(np.atleast_1d(self.g.mean).size)

    def _velocity(self, z_t: np.ndarray, t: float) -> np.ndarray:
        a, s = self.sched.alpha_sigma(t)
        if s == 0.0:
            # at t = 0: x = z exactly and eps is unconstrained, so E[v | z] = E[eps] = 0
            return np.zeros_like(np.asarray(z_t, dtype=np.float64))
        x_star = optimal_denoiser(self.g, self.sched, z_t, t)
        eps_star = (np.asarray(z_t, dtype=np.float64) - a * x_star) / s
        return a * eps_star - s * x_star

    def forward_uncond(self, z_t: np.ndarray, t) -> np.ndarray:
        return self._apply(z_t, t)

    def forward_cond(self, z_t: np.ndarray, c, t) -> np.ndarray:
        return self._apply(z_t, t)

    def _apply(self, z_t: np.ndarray, t) -> np.ndarray:
        z_t = np.asarray(z_t, dtype=np.float64)
        if np.ndim(t) == 0:
            return self._velocity(z_t, float(t))
        out = np.empty_like(z_t)
        for i, ti in enumerate(np.asarray(t, dtype=np.float64)):
            out[i] = self._velocity(z_t[i], float(ti))
        return out
