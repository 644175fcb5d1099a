"""Timestep grids and Gaussian-path coefficient algebra.

A Gaussian probability path is written ``z_t = alpha_t * z_0 + sigma_t * eps``
with ``t = 0`` the clean data and ``t = 1`` pure noise.  Two schedulers are
provided:

* ``rectified-flow``: ``alpha_t = 1 - t``, ``sigma_t = t``
* ``variance-preserving``: linear-beta VP schedule,
  ``alpha_t = sqrt(abar_t)``, ``sigma_t = sqrt(1 - abar_t)`` with
  ``abar_t = exp(-(beta_min t + (beta_max - beta_min) t^2 / 2))``.

``path_coeffs`` returns the velocity/score decomposition coefficients
``u_t(z) = a_t z + b_t grad log p_t(z)`` and ``diffusion_coeffs`` the
probability-flow drift/diffusion pair ``(f_t, g_t^2)``.  The two are computed
through different formulas so that the identities ``f_t = a_t`` and
``-g_t^2 / 2 = b_t`` are a real check rather than a tautology.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "RECTIFIED_FLOW",
    "VARIANCE_PRESERVING",
    "PathScheduler",
    "ScheduleError",
    "TimeGrid",
    "diffusion_coeffs",
    "interpolate",
    "make_uniform_grid",
    "path_coeffs",
]

RECTIFIED_FLOW = "rectified-flow"
VARIANCE_PRESERVING = "variance-preserving"


class ScheduleError(ValueError):
    """Invalid grid or evaluation of a coefficient at a singular time."""


@dataclass(frozen=True)
class TimeGrid:
    """Ascending array ``times[i] = t_i`` with ``t_0 = 0``; sampling starts at ``n_max``.

    Samplers walk the grid from ``times[n_max]`` down to ``times[0]``.
    """

    times: np.ndarray
    n_max: int

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        times.setflags(write=False)
        object.__setattr__(self, "times", times)
        if times.ndim != 1 or times.size < 2:
            raise ScheduleError("a grid needs at least two time points")
        if times[0] != 0.0:
            raise ScheduleError(f"t_0 must be 0, got {times[0]}")
        if np.any(np.diff(times) <= 0):
            raise ScheduleError("grid times must be strictly increasing in the index")
        if times[-1] > 1.0:
            raise ScheduleError(f"t_N must be <= 1, got {times[-1]}")
        if not 1 <= self.n_max <= self.n_steps:
            raise ScheduleError(f"n_max={self.n_max} outside [1, {self.n_steps}]")
        if times[self.n_max] >= 1.0:
            raise ScheduleError(
                f"t_(n_max) = {times[self.n_max]} must be < 1 (b_t is singular at t = 1)"
            )

    @property
    def n_steps(self) -> int:
        return self.times.size - 1

    @property
    def t_start(self) -> float:
        return float(self.times[self.n_max])

    def edit_steps(self):
        """Yield ``(i, t_i, t_{i-1})`` for ``i = n_max .. 1``."""
        for i in range(self.n_max, 0, -1):
            yield i, float(self.times[i]), float(self.times[i - 1])


def make_uniform_grid(n_steps: int, t_start: float = 1.0, n_max: int | None = None) -> TimeGrid:
    """Uniform grid ``t_i = i * t_start / n_steps``.

    ``n_max`` defaults to the largest index whose time is strictly below 1.
    """
    if n_steps < 1:
        raise ScheduleError(f"n_steps must be >= 1, got {n_steps}")
    if not 0.0 < t_start <= 1.0:
        raise ScheduleError(f"t_start must lie in (0, 1], got {t_start}")
    times = np.arange(n_steps + 1, dtype=float) * (t_start / n_steps)
    times[-1] = t_start
    if n_max is None:
        n_max = n_steps if t_start < 1.0 else n_steps - 1
    return TimeGrid(times=times, n_max=int(n_max))


@dataclass(frozen=True)
class PathScheduler:
    kind: str = RECTIFIED_FLOW
    beta_min: float = 0.1
    beta_max: float = 20.0

    def __post_init__(self):
        if self.kind not in (RECTIFIED_FLOW, VARIANCE_PRESERVING):
            raise ScheduleError(f"unknown scheduler kind {self.kind!r}")
        if self.kind == VARIANCE_PRESERVING and not 0 < self.beta_min <= self.beta_max:
            raise ScheduleError("VP schedule needs 0 < beta_min <= beta_max")

    @classmethod
    def rectified_flow(cls) -> PathScheduler:
        return cls(RECTIFIED_FLOW)

    @classmethod
    def vp(cls, beta_min: float = 0.1, beta_max: float = 20.0) -> PathScheduler:
        return cls(VARIANCE_PRESERVING, beta_min=beta_min, beta_max=beta_max)

    # VP helpers
    def beta(self, t: float) -> float:
        return self.beta_min + t * (self.beta_max - self.beta_min)

    def log_alpha_bar(self, t: float) -> float:
        return -(self.beta_min * t + 0.5 * (self.beta_max - self.beta_min) * t * t)

    def alpha_bar(self, t: float) -> float:
        if self.kind == RECTIFIED_FLOW:
            return (1.0 - t) ** 2
        return math.exp(self.log_alpha_bar(t))

    def alpha(self, t: float) -> float:
        if self.kind == RECTIFIED_FLOW:
            return 1.0 - t
        return math.exp(0.5 * self.log_alpha_bar(t))

    def sigma(self, t: float) -> float:
        if self.kind == RECTIFIED_FLOW:
            return t
        return math.sqrt(-math.expm1(self.log_alpha_bar(t)))

    def alpha_dot(self, t: float) -> float:
        if self.kind == RECTIFIED_FLOW:
            return -1.0
        return -0.5 * self.beta(t) * self.alpha(t)

    def sigma_dot(self, t: float) -> float:
        """d sigma / dt; infinite for VP at t = 0."""
        if self.kind == RECTIFIED_FLOW:
            return 1.0
        s = self.sigma(t)
        if s == 0.0:
            return math.inf
        return 0.5 * self.beta(t) * self.alpha_bar(t) / s

    def sigma_sigma_dot(self, t: float) -> float:
        """``sigma_t * d sigma_t / dt``, finite everywhere on [0, 1]."""
        if self.kind == RECTIFIED_FLOW:
            return t
        return 0.5 * self.beta(t) * self.alpha_bar(t)

    def dlog_alpha(self, t: float) -> float:
        if self.kind == RECTIFIED_FLOW:
            if t >= 1.0:
                raise ScheduleError("d log alpha / dt is singular at t = 1 for rectified flow")
            return -1.0 / (1.0 - t)
        return -0.5 * self.beta(t)

    def dsigma2(self, t: float) -> float:
        if self.kind == RECTIFIED_FLOW:
            return 2.0 * t
        return self.beta(t) * self.alpha_bar(t)

    def to_dict(self) -> dict:
        if self.kind == RECTIFIED_FLOW:
            return {"kind": self.kind}
        return {"kind": self.kind, "beta_min": self.beta_min, "beta_max": self.beta_max}


def _check_t(s: PathScheduler, t: float) -> None:
    if not 0.0 <= t <= 1.0:
        raise ScheduleError(f"t={t} outside [0, 1]")
    if s.kind == RECTIFIED_FLOW and t >= 1.0:
        raise ScheduleError("rectified-flow coefficients are singular at t = 1")


def path_coeffs(s: PathScheduler, t: float) -> tuple[float, float]:
    """``(a_t, b_t)`` with ``a_t = alpha'/alpha`` and ``b_t = (alpha' sigma - alpha sigma') sigma / alpha``."""
    _check_t(s, t)
    alpha = s.alpha(t)
    if alpha <= 0.0:
        raise ScheduleError(f"alpha_t = {alpha} at t={t}")
    alpha_dot = s.alpha_dot(t)
    sigma = s.sigma(t)
    a = alpha_dot / alpha
    if sigma == 0.0:
        # sigma * sigma' stays finite even where sigma' does not (VP at t=0)
        b = -s.sigma_sigma_dot(t)
    else:
        b = (alpha_dot * sigma - alpha * s.sigma_dot(t)) * sigma / alpha
    return a, b


def diffusion_coeffs(s: PathScheduler, t: float) -> tuple[float, float]:
    """Probability-flow coefficients ``f_t = d log alpha/dt`` and ``g_t^2 = d sigma^2/dt - 2 f_t sigma^2``."""
    _check_t(s, t)
    if s.alpha(t) <= 0.0:
        raise ScheduleError(f"alpha_t = 0 at t={t}")
    f = s.dlog_alpha(t)
    g2 = s.dsigma2(t) - 2.0 * f * s.sigma(t) ** 2
    return f, g2


def interpolate(z0, z1, t: float, s: PathScheduler | None = None) -> np.ndarray:
    """Point on the path between clean ``z0`` and noise ``z1``."""
    s = s or PathScheduler()
    return s.alpha(t) * np.asarray(z0, dtype=float) + s.sigma(t) * np.asarray(z1, dtype=float)
