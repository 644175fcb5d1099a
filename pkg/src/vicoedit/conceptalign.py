"""Concept masks, the masked measurement, and posterior-sampling guidance.

The guidance loss at a state ``z_t`` with combined velocity ``v`` is::

    z0_hat = z_t - t * v
    L      = || y - (m * D(z0_hat) + s_tilde) ||^2

and the guidance velocity is ``alpha * grad_{z_t} L``.  The ``-1/sigma^2``
likelihood factor and the ``b_t`` coefficient are folded into ``alpha``, so a
zero measurement noise is legal.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .flowmodel import ConceptSet

__all__ = [
    "DETACHED",
    "THROUGH_MODEL",
    "ConceptMask",
    "GuidanceError",
    "Measurement",
    "aggregate_concepts",
    "compute_mask",
    "guidance_loss",
    "guidance_velocity",
    "make_measurement",
    "masked_residual",
    "tweedie_z0",
]

DETACHED = "detached"
THROUGH_MODEL = "through-model"
GUIDANCE_MODES = (DETACHED, THROUGH_MODEL)


class GuidanceError(ValueError):
    pass


@dataclass(frozen=True)
class ConceptMask:
    values: np.ndarray  # 0/1 per pixel coordinate
    tau_used: float
    pos_prob: np.ndarray

    @property
    def fraction(self) -> float:
        return float(self.values.mean())


@dataclass(frozen=True)
class Measurement:
    y: np.ndarray
    mask: ConceptMask
    sigma: float
    noise_s: np.ndarray


def aggregate_concepts(per_sample_dists: Sequence[np.ndarray]) -> np.ndarray:
    """Average concept distributions over samples (axis 0)."""
    stack = np.asarray(per_sample_dists, dtype=float)
    if stack.ndim < 2 or stack.shape[0] == 0:
        raise ValueError("need a non-empty list of distributions")
    return stack.mean(axis=0)


def compute_mask(d, concepts: ConceptSet, tau: float) -> ConceptMask:
    """Threshold the summed positive-concept probability at ``tau`` (inclusive).

    ``d`` has shape ``(n_pixels, n_concepts)`` with columns in ``concepts.all``
    order.
    """
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must lie in (0, 1), got {tau}")
    d = np.atleast_2d(np.asarray(d, dtype=float))
    if d.shape[-1] != len(concepts.all):
        raise ValueError(f"distribution has {d.shape[-1]} columns, concept set has {len(concepts.all)}")
    pos_prob = d[:, : concepts.n_pos].sum(axis=1)
    return ConceptMask((pos_prob >= tau).astype(float), float(tau), pos_prob)


def make_measurement(x0, mask: ConceptMask, sigma: float, rng: np.random.Generator | None) -> Measurement:
    """``y = m * x0 + s`` with ``s ~ N(0, sigma^2 I)``; no draw is made when ``sigma == 0``."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    x0 = np.asarray(x0, dtype=float)
    if sigma > 0:
        s = sigma * rng.standard_normal(x0.shape)
    else:
        s = np.zeros_like(x0)
    return Measurement(mask.values * x0 + s, mask, float(sigma), s)


def tweedie_z0(z_t, v, t: float) -> np.ndarray:
    """One-step clean estimate ``z_t - t v``."""
    return np.asarray(z_t, dtype=float) - t * np.asarray(v, dtype=float)


def masked_residual(meas: Measurement, model, z0_hat) -> np.ndarray:
    """``y - m * D(z0_hat)``."""
    return meas.y - meas.mask.values * model.decode(z0_hat)


def guidance_loss(z0_hat, meas: Measurement, model, s_tilde=None) -> float:
    r = masked_residual(meas, model, z0_hat)
    if s_tilde is not None:
        r = r - s_tilde
    return float(r @ r)


def guidance_velocity(
    z_t,
    v_tilde,
    t: float,
    meas: Measurement,
    model,
    alpha: float,
    sigma: float | None = None,
    mode: str = DETACHED,
    rng: np.random.Generator | None = None,
    v_tilde_jacobian=None,
    s_tilde=None,
) -> np.ndarray:
    """``alpha * grad_{z_t} || y - (m D(z_t - t v) + s_tilde) ||^2``.

    In ``detached`` mode ``d z0_hat / d z_t`` is the identity.  In
    ``through-model`` mode it is ``I - t J`` where ``J = d v_tilde / d z_t``
    must be supplied.  ``s_tilde`` is drawn from ``N(0, sigma^2 I)`` unless
    given (``sigma`` defaults to the measurement's).
    """
    if mode not in GUIDANCE_MODES:
        raise GuidanceError(f"unknown guidance mode {mode!r}")
    if mode == THROUGH_MODEL and v_tilde_jacobian is None:
        raise GuidanceError("through-model guidance needs the velocity Jacobian, which this model does not provide")
    sigma = meas.sigma if sigma is None else sigma
    if s_tilde is None:
        s_tilde = sigma * rng.standard_normal(meas.y.shape) if sigma > 0 else 0.0
    z0_hat = tweedie_z0(z_t, v_tilde, t)
    r = masked_residual(meas, model, z0_hat) - s_tilde
    grad = -2.0 * model.decode_vjp(z0_hat, meas.mask.values * r)
    if mode == THROUGH_MODEL:
        jac = np.asarray(v_tilde_jacobian, dtype=float)
        grad = grad - t * (jac.T @ grad)
    return alpha * grad
