"""Noise and resolution schedules, forward noising and the reverse update.

Steps are 1-based: ``t`` runs from 1 to ``T``. ``alpha_bar(0)`` is defined as
1 so that a reverse step at ``t = 1`` returns the clean estimate.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np

from .rawproc import upsample


@dataclasses.dataclass(frozen=True)
class DiffusionSchedule:
    T: int
    alpha: np.ndarray  # float64, index t-1
    alpha_bar: np.ndarray
    r: np.ndarray  # int, downsampling factor per step
    eta: float = 0.0
    alpha_1: float = 0.999999
    alpha_T: float = 0.99

    def ab(self, t: int) -> float:
        """alpha_bar at step t, with alpha_bar(0) = 1."""
        if t == 0:
            return 1.0
        self._check_t(t)
        return float(self.alpha_bar[t - 1])

    def factor(self, t: int) -> int:
        """Downsampling factor r_t (r_0 = 1)."""
        if t == 0:
            return 1
        self._check_t(t)
        return int(self.r[t - 1])

    @property
    def max_factor(self) -> int:
        return int(self.r.max())

    @property
    def beta(self) -> np.ndarray:
        return 1.0 - self.alpha

    def _check_t(self, t: int) -> None:
        if not 1 <= t <= self.T:
            raise IndexError(f"step {t} outside 1..{self.T}")

    def params(self) -> dict:
        return {"T": self.T, "alpha_1": self.alpha_1, "alpha_T": self.alpha_T, "eta": self.eta}


def build(T: int = 2000, alpha_1: float = 0.999999, alpha_T: float = 0.99, eta: float = 0.0) -> DiffusionSchedule:
    """Linear-in-alpha schedule with r = 1 for the first half of the steps, 2 after."""
    if T < 2:
        raise ValueError(f"need T >= 2, got {T}")
    if not 0 < alpha_T <= alpha_1 <= 1:
        raise ValueError(f"need 0 < alpha_T <= alpha_1 <= 1, got {alpha_1}, {alpha_T}")
    if not 0 <= eta <= 1:
        raise ValueError(f"eta must be in [0, 1], got {eta}")
    steps = np.arange(T, dtype=np.float64)
    alpha = alpha_1 + steps / (T - 1) * (alpha_T - alpha_1)
    alpha_bar = np.cumprod(alpha)
    r = np.where(np.arange(1, T + 1) <= math.ceil(T / 2), 1, 2)
    sched = DiffusionSchedule(T, alpha, alpha_bar, r, float(eta), float(alpha_1), float(alpha_T))
    for t in range(2, T + 1):
        s = sigma(t, sched)
        if 1.0 - sched.ab(t - 1) - s * s < -1e-12:
            raise ValueError(f"eta={eta} gives a negative variance at t={t}")
    return sched


def forward_sample(x_rt0: np.ndarray, t: int, eps: np.ndarray, sched: DiffusionSchedule) -> np.ndarray:
    """x_t = sqrt(ab_t) x_rt0 + sqrt(1 - ab_t) eps."""
    if x_rt0.shape != eps.shape:
        raise ValueError(f"shape mismatch {x_rt0.shape} vs {eps.shape}")
    ab = sched.ab(t)
    return (math.sqrt(ab) * x_rt0.astype(np.float64) + math.sqrt(1.0 - ab) * eps).astype(x_rt0.dtype)


def predict_x0(x_t: np.ndarray, t: int, eps_hat: np.ndarray, sched: DiffusionSchedule) -> np.ndarray:
    ab = sched.ab(t)
    out = (x_t.astype(np.float64) - math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(ab)
    return out.astype(x_t.dtype)


def eps_from_x0(x_t: np.ndarray, t: int, x0: np.ndarray, sched: DiffusionSchedule) -> np.ndarray:
    """Noise consistent with ``x_t`` and a given clean estimate (inverse of :func:`predict_x0`)."""
    ab = sched.ab(t)
    out = (x_t.astype(np.float64) - math.sqrt(ab) * x0) / math.sqrt(1.0 - ab)
    return out.astype(x_t.dtype)


def sigma(t: int, sched: DiffusionSchedule) -> float:
    """Stochasticity of the reverse step at t (zero for eta = 0)."""
    if sched.eta == 0.0:
        return 0.0
    ab_t, ab_prev = sched.ab(t), sched.ab(t - 1)
    return sched.eta * math.sqrt((1.0 - ab_prev) / (1.0 - ab_t)) * math.sqrt(1.0 - ab_t / ab_prev)


def reverse_step(x_t: np.ndarray, t: int, eps_hat: np.ndarray, x0_hat: np.ndarray, z: np.ndarray,
                 sched: DiffusionSchedule) -> np.ndarray:
    """One reverse update from t to t-1, switching resolution where r drops.

    ``z`` must already have the shape of the result: the current shape in the
    same-resolution branch, the upsampled shape at a resolution transition.
    """
    r_t, r_prev = sched.factor(t), sched.factor(t - 1)
    ab_prev = sched.ab(t - 1)
    if r_t < r_prev:
        raise ValueError(f"schedule invariant violated: r_{t}={r_t} < r_{t - 1}={r_prev}")
    if r_t == r_prev:
        s = sigma(t, sched)
        out = (math.sqrt(ab_prev) * x0_hat.astype(np.float64)
               + math.sqrt(max(1.0 - ab_prev - s * s, 0.0)) * eps_hat
               + s * z)
        return out.astype(x_t.dtype)
    up = upsample(x0_hat, r_t // r_prev)
    if z.shape != up.shape:
        raise ValueError(f"z must have the upsampled shape {up.shape}, got {z.shape}")
    out = math.sqrt(ab_prev) * up.astype(np.float64) + math.sqrt(1.0 - ab_prev) * z
    return out.astype(x_t.dtype)
