"""Conversions among velocity/signal/noise predictions and one-step latent
predictors.

With z_t = alpha_t x + sigma_t eps the three views of one prediction are

    x_hat   = alpha_t z_t - sigma_t v_hat
    eps_hat = alpha_t v_hat + sigma_t z_t
    alpha_t x_hat + sigma_t eps_hat = z_t   (reconstruction identity)

and the deterministic update from t down to s can be written from the noise
estimate (eps form), the velocity estimate (v form), or with the true forward
noise reused in place of the estimate (the partial-real-value constructor).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .schedule import NoiseSchedule

__all__ = [
    "PredictionTriple",
    "triple_from_v",
    "ddim_step_eps",
    "ddim_step_v",
    "prev_step",
    "transport_shared_noise",
    "PREDICTOR_KINDS",
]

PREDICTOR_KINDS = ("ddim_eps", "ddim_v", "prev")


class ParametrizationError(ValueError):
    pass


@dataclass(frozen=True)
class PredictionTriple:
    """Mutually consistent (v_hat, x_hat, eps_hat) at one (z_t, t)."""

    v_hat: np.ndarray
    x_hat: np.ndarray
    eps_hat: np.ndarray
    t: float
    z_t: np.ndarray


def triple_from_v(
    sched: NoiseSchedule, z_t: np.ndarray, v_hat: np.ndarray, t: float
) -> PredictionTriple:
    """Derive signal and noise estimates from a velocity estimate."""
    z_t = np.asarray(z_t, dtype=np.float64)
    v_hat = np.asarray(v_hat, dtype=np.float64)
    if z_t.shape != v_hat.shape:
        raise ParametrizationError(f"z shape {z_t.shape} != v_hat shape {v_hat.shape}")
    a, s = sched.alpha_sigma(t)
    x_hat = a * z_t - s * v_hat
    eps_hat = a * v_hat + s * z_t
    return PredictionTriple(v_hat=v_hat, x_hat=x_hat, eps_hat=eps_hat, t=t, z_t=z_t)


def ddim_step_eps(
    sched: NoiseSchedule, z_t: np.ndarray, x_hat: np.ndarray, t: float, s: float
) -> np.ndarray:
    """z_s = alpha_s x_hat + sigma_s (z_t - alpha_t x_hat) / sigma_t.

    The noise estimate is recovered by division, so t = 0 is excluded.
    """
    _check_step_order(t, s)
    z_t = np.asarray(z_t, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    a_t, s_t = sched.alpha_sigma(t)
    if s_t == 0.0:
        raise ParametrizationError("eps-form update undefined at t = 0 (sigma_t = 0)")
    a_s, s_s = sched.alpha_sigma(s)
    return a_s * x_hat + s_s * (z_t - a_t * x_hat) / s_t


def ddim_step_v(
    sched: NoiseSchedule, z_t: np.ndarray, v_hat: np.ndarray, t: float, s: float
) -> np.ndarray:
    """z_s = alpha_s (alpha_t z_t - sigma_t v_hat) + sigma_s (alpha_t v_hat + sigma_t z_t).

    Algebraically equal to the eps form; finite at every t, including t = 0.
    """
    _check_step_order(t, s)
    z_t = np.asarray(z_t, dtype=np.float64)
    v_hat = np.asarray(v_hat, dtype=np.float64)
    a_t, s_t = sched.alpha_sigma(t)
    a_s, s_s = sched.alpha_sigma(s)
    return a_s * (a_t * z_t - s_t * v_hat) + s_s * (a_t * v_hat + s_t * z_t)


def prev_step(
    sched: NoiseSchedule, x_hat: np.ndarray, eps_true: np.ndarray, s: float
) -> np.ndarray:
    """z_s = alpha_s x_hat + sigma_s eps with the same eps that formed z_t."""
    x_hat = np.asarray(x_hat, dtype=np.float64)
    eps_true = np.asarray(eps_true, dtype=np.float64)
    if x_hat.shape != eps_true.shape:
        raise ParametrizationError(f"x_hat shape {x_hat.shape} != eps shape {eps_true.shape}")
    a_s, s_s = sched.alpha_sigma(s)
    return a_s * x_hat + s_s * eps_true


def transport_shared_noise(
    sched: NoiseSchedule,
    x_hat_t: np.ndarray,
    eps_hat_t: np.ndarray,
    t: float,
    s: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Carry a prediction pair from t to s assuming the noise estimate is reused.

    Builds z_s by the deterministic update, then recovers the signal estimate
    implied at s under the equal-noise hypothesis.  The implied signal equals
    the original one, so a model self-consistent in its noise prediction is
    automatically self-consistent in its signal prediction.
    """
    x_hat_t = np.asarray(x_hat_t, dtype=np.float64)
    eps_hat_t = np.asarray(eps_hat_t, dtype=np.float64)
    if x_hat_t.shape != eps_hat_t.shape:
        raise ParametrizationError(
            f"x_hat shape {x_hat_t.shape} != eps_hat shape {eps_hat_t.shape}"
        )
    sched.alpha_sigma(t)  # validate t even though the construction only needs s
    a_s, s_s = sched.alpha_sigma(s)
    if a_s == 0.0:
        raise ParametrizationError("transport undefined at alpha_s = 0")
    z_s = a_s * x_hat_t + s_s * eps_hat_t
    x_hat_s_implied = (z_s - s_s * eps_hat_t) / a_s
    return x_hat_s_implied, eps_hat_t


def _check_step_order(t: float, s: float) -> None:
    if s >= t:
        raise ParametrizationError(f"update needs s < t, got s={s}, t={t}")
