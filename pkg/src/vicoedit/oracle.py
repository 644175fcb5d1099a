"""Brute-force and closed-form reference computations.

Nothing here calls into :mod:`vicoedit.flowmodel` or
:mod:`vicoedit.conceptalign`; mixtures are passed in as raw
``(weights, means, covs)`` arrays and every quantity is recomputed from
scratch (sampling, conjugate Gaussian algebra, finite differences).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

from .schedule import VARIANCE_PRESERVING, PathScheduler

__all__ = [
    "MixtureSpec",
    "McEstimate",
    "analytic_linear_gaussian_posterior",
    "fd_gradient",
    "linear_gaussian_guidance",
    "mc_conditional",
    "mixture_spec",
    "vp_tweedie",
]

MIN_ESS = 100.0


class MixtureSpec(NamedTuple):
    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray


def mixture_spec(model, cond) -> MixtureSpec:
    """Raw parameter arrays of the data mixture a model uses for ``cond``."""
    mix = model.mixture(cond.prompt_id)
    return MixtureSpec(mix.weights.copy(), model.component_means(cond).copy(), mix.covs.copy())


@dataclass(frozen=True)
class McEstimate:
    mean: np.ndarray
    standard_error: np.ndarray
    n_samples: int
    ess: float

    @property
    def low_ess(self) -> bool:
        return self.ess < MIN_ESS

    def within(self, value, k: float = 3.0) -> bool:
        """True when ``value`` lies within ``k`` standard errors in every coordinate."""
        return bool(np.all(np.abs(np.asarray(value) - self.mean) <= k * self.standard_error))

    def z_scores(self, value) -> np.ndarray:
        return np.abs(np.asarray(value) - self.mean) / self.standard_error


def mc_conditional(
    spec: MixtureSpec,
    z_t,
    t: float,
    target: str,
    n: int,
    rng: np.random.Generator,
    scheduler: PathScheduler | None = None,
) -> McEstimate:
    """Self-normalised importance estimate of ``E[z_0 | z_t]`` or of the velocity.

    Draws ``z_0`` from the data mixture and weights each draw by the kernel
    density ``N(z_t; alpha_t z_0, sigma_t^2 I)``.  Given ``(z_0, z_t)`` the
    noise is determined, so the velocity target is
    ``alpha' z_0 + sigma' (z_t - alpha z_0) / sigma``.

    ``target`` is ``"z0_mean"`` or ``"velocity"``.
    """
    if target not in ("z0_mean", "velocity"):
        raise ValueError(f"unknown target {target!r}")
    if n < 2:
        raise ValueError("need at least two samples")
    s = scheduler or PathScheduler()
    z_t = np.asarray(z_t, dtype=float)
    d = z_t.size
    alpha, sigma = s.alpha(t), s.sigma(t)

    if sigma == 0.0:
        # degenerate kernel: z_0 = z_t / alpha exactly and the noise is independent of it
        z0 = z_t / alpha
        mean = z0 if target == "z0_mean" else s.alpha_dot(t) * z0
        return McEstimate(mean, np.zeros(d), n, float(n))

    weights, means, covs = spec
    ks = rng.choice(weights.size, size=n, p=weights / weights.sum())
    chol = np.linalg.cholesky(covs)
    draws = means[ks] + np.einsum("nij,nj->ni", chol[ks], rng.standard_normal((n, d)))

    logw = -0.5 * np.sum((z_t - alpha * draws) ** 2, axis=1) / sigma**2
    w = np.exp(logw - logw.max())
    w /= w.sum()

    if target == "z0_mean":
        g = draws
    else:
        g = s.alpha_dot(t) * draws + s.sigma_dot(t) * (z_t - alpha * draws) / sigma
    mean = w @ g
    se = np.sqrt(np.sum(w[:, None] ** 2 * (g - mean) ** 2, axis=0))
    ess = 1.0 / np.sum(w**2)
    if ess < MIN_ESS:
        warnings.warn(f"mc_conditional: effective sample size {ess:.1f} < {MIN_ESS}", RuntimeWarning)
    return McEstimate(mean, se, n, float(ess))


def analytic_linear_gaussian_posterior(prior_mean, prior_cov, forward, sigma: float, y):
    """Posterior of ``x ~ N(m, P)`` given ``y = A x + N(0, sigma^2 I)``.

    Gain form, so ``sigma = 0`` is allowed whenever ``A P A^T`` is invertible.
    """
    m = np.asarray(prior_mean, dtype=float)
    P = np.asarray(prior_cov, dtype=float)
    A = np.atleast_2d(np.asarray(forward, dtype=float))
    y = np.asarray(y, dtype=float)
    S = A @ P @ A.T + sigma**2 * np.eye(A.shape[0])
    gain = np.linalg.solve(S, A @ P).T
    post_mean = m + gain @ (y - A @ m)
    post_cov = P - gain @ A @ P
    return post_mean, 0.5 * (post_cov + post_cov.T)


def linear_gaussian_guidance(prior_mean, prior_cov, forward, sigma_y: float, y, z, t: float,
                             scheduler: PathScheduler | None = None) -> np.ndarray:
    """Exact ``b_t * grad_z log p(y | z_t = z)`` for a Gaussian prior and linear measurement.

    ``z_0 | z_t`` is Gaussian with mean ``m + alpha P C^-1 (z - alpha m)`` and
    covariance ``P - alpha^2 P C^-1 P`` (``C = alpha^2 P + sigma^2 I``), so
    ``y | z_t`` is Gaussian too.  The factor ``b_t alpha_t`` is formed
    directly, which keeps the result finite at ``t = 1``.  ``z`` may be a
    batch ``(n, d)``.
    """
    s = scheduler or PathScheduler()
    m = np.asarray(prior_mean, dtype=float)
    P = np.asarray(prior_cov, dtype=float)
    A = np.atleast_2d(np.asarray(forward, dtype=float))
    y = np.asarray(y, dtype=float)
    z = np.asarray(z, dtype=float)
    alpha, sigma = s.alpha(t), s.sigma(t)
    d = m.size
    C = alpha**2 * P + sigma**2 * np.eye(d)
    CinvP = np.linalg.solve(C, P)
    cond_mean = m + alpha * (z - alpha * m) @ CinvP  # (P C^-1)^T = C^-1 P
    cond_cov = P - alpha**2 * P @ CinvP
    S = A @ cond_cov @ A.T + sigma_y**2 * np.eye(A.shape[0])
    innov = np.linalg.solve(S, (y - cond_mean @ A.T).T).T  # S^-1 (y - A mean)
    b_alpha = (s.alpha_dot(t) * sigma - alpha * s.sigma_dot(t)) * sigma if sigma > 0 else 0.0
    # d mean / dz = alpha P C^-1; b_t * alpha = b_alpha
    return b_alpha * (innov @ A) @ CinvP


def fd_gradient(loss: Callable[[np.ndarray], float], z, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of a scalar function.

    ``h = 1e-6`` balances truncation error (``O(h^2)``) against cancellation
    (``O(eps_machine / h)``) for smooth losses of order one in double precision.
    """
    z = np.asarray(z, dtype=float)
    grad = np.empty_like(z)
    for i in range(z.size):
        e = np.zeros_like(z)
        e.flat[i] = h
        grad.flat[i] = (loss(z + e) - loss(z - e)) / (2.0 * h)
    return grad


def vp_tweedie(score: Callable[[np.ndarray], np.ndarray], x_t, t: float, scheduler: PathScheduler) -> np.ndarray:
    """Tweedie posterior mean under a VP kernel: ``(x_t + (1 - abar) score(x_t)) / sqrt(abar)``."""
    if scheduler.kind != VARIANCE_PRESERVING:
        raise ValueError("Tweedie in this form assumes a variance-preserving kernel")
    abar = scheduler.alpha_bar(t)
    if abar <= 0.0:
        raise ValueError("alpha_bar must be positive")
    x_t = np.asarray(x_t, dtype=float)
    if t == 0.0:
        return x_t.copy()
    return (x_t + (1.0 - abar) * score(x_t)) / np.sqrt(abar)
