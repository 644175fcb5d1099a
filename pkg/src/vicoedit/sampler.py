"""ODE integration, generation/inversion, and the inversion-free editing loop."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from typing import Callable

import numpy as np

from . import conceptalign as ca
from .flowmodel import NULL_PROMPT, ConceptSet, Condition, cfg_combine
from .schedule import ScheduleError, TimeGrid, make_uniform_grid

__all__ = [
    "CombinedVelocity",
    "EditConfig",
    "EditError",
    "EditResult",
    "StepRecord",
    "combined_velocity",
    "euler_step",
    "flowedit_pair",
    "flowedit_run",
    "generate",
    "guided_velocity",
    "guided_velocity_jacobian",
    "integrate",
    "inversion_edit_run",
    "invert",
    "vicoedit_run",
]


class EditError(RuntimeError):
    """An editing run failed; ``step`` is the grid index being processed."""

    def __init__(self, step: int, cause: Exception):
        super().__init__(f"step {step}: {cause}")
        self.step = step


@dataclass(frozen=True)
class EditConfig:
    n_steps: int = 50
    n_max: int = 47
    k_samples: int = 3
    tau: float = 0.25
    alpha_guidance: float = 0.5
    sigma_meas: float = 0.0
    cfg_src_T: float = 1.0
    cfg_tar_T: float = 1.0
    cfg_tar_I: float | None = None  # None: one scale for both modalities
    seed: int = 0
    guidance_mode: str = ca.DETACHED
    t_start: float = 1.0

    def __post_init__(self):
        def bad(name, msg):
            raise ValueError(f"{name}: {msg}")

        if self.n_steps < 1:
            bad("n_steps", "must be >= 1")
        if not 1 <= self.n_max <= self.n_steps:
            bad("n_max", f"must lie in [1, n_steps={self.n_steps}]")
        if self.k_samples < 1:
            bad("k_samples", "must be >= 1")
        if not 0.0 < self.tau < 1.0:
            bad("tau", f"must lie in (0, 1), got {self.tau}")
        if self.alpha_guidance < 0:
            bad("alpha_guidance", "must be non-negative")
        if self.sigma_meas < 0:
            bad("sigma_meas", "must be non-negative")
        if self.guidance_mode not in ca.GUIDANCE_MODES:
            bad("guidance_mode", f"must be one of {ca.GUIDANCE_MODES}")
        try:
            self.grid()
        except ScheduleError as exc:
            bad("n_max", str(exc))

    @property
    def cfg_tar_img(self) -> float:
        return self.cfg_tar_T if self.cfg_tar_I is None else self.cfg_tar_I

    def grid(self) -> TimeGrid:
        return make_uniform_grid(self.n_steps, self.t_start, self.n_max)

    def replace(self, **changes) -> EditConfig:
        return EditConfig(**{**asdict(self), **changes})

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> EditConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"{sorted(unknown)[0]}: unknown EditConfig key")
        return cls(**data)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    @classmethod
    def preset(cls, backbone: str = "flux", task: str = "replace", **overrides) -> EditConfig:
        """Hyper-parameter rows of the reference backbones (``replace`` or ``add`` CFG column)."""
        add = task == "add"
        rows = {
            "flux": dict(n_max=47, k_samples=3, alpha_guidance=0.5, cfg_tar_T=6.0 if add else 5.5, cfg_tar_I=None),
            "qwen": dict(n_max=45, k_samples=2, alpha_guidance=1.0, cfg_tar_T=8.0 if add else 7.5,
                         cfg_tar_I=3.0 if add else 2.5),
            "ovis": dict(n_max=47, k_samples=3, alpha_guidance=1.0, cfg_tar_T=7.0 if add else 6.5,
                         cfg_tar_I=3.0 if add else 2.5),
        }
        base = dict(n_steps=50, tau=0.25, sigma_meas=0.0, cfg_src_T=1.5)
        return cls(**{**base, **rows[backbone], **overrides})


@dataclass
class StepRecord:
    index: int
    t: float
    v_tilde_norm: float
    v_hat_norm: float
    residual: float
    mask_fraction: float
    z_t: np.ndarray = field(repr=False)
    z0_hat: np.ndarray = field(repr=False)


@dataclass
class EditResult:
    z_final: np.ndarray
    x_final: np.ndarray
    per_step: list[StepRecord]
    seed: int
    config_digest: str
    masks: list[np.ndarray] = field(default_factory=list, repr=False)

    def trajectory_rows(self) -> list[dict]:
        return [
            {
                "step": r.index,
                "t": r.t,
                "v_tilde_norm": r.v_tilde_norm,
                "v_hat_norm": r.v_hat_norm,
                "residual": r.residual,
                "mask_fraction": r.mask_fraction,
            }
            for r in self.per_step
        ]


# --------------------------------------------------------------------- ODE core
def euler_step(z, v, t_i: float, t_prev: float) -> np.ndarray:
    """``z + (t_prev - t_i) v`` for a step from ``t_i`` down to ``t_prev``."""
    if not t_prev < t_i:
        raise ValueError(f"expected t_prev < t_i, got {t_prev} >= {t_i}")
    z = np.asarray(z, dtype=float)
    v = np.asarray(v, dtype=float)
    if not (np.all(np.isfinite(z)) and np.all(np.isfinite(v))):
        raise FloatingPointError("non-finite state or velocity")
    return z + (t_prev - t_i) * v


def integrate(velocity_fn: Callable[[np.ndarray, float], np.ndarray], z, times) -> np.ndarray:
    """Explicit Euler along ``times`` (any order); ``velocity_fn(z, t)`` is evaluated at the step start."""
    z = np.asarray(z, dtype=float)
    for t_a, t_b in zip(times[:-1], times[1:]):
        z = z + (t_b - t_a) * velocity_fn(z, float(t_a))
    return z


def guided_velocity(model, z, t: float, cond: Condition, c_img: float = 1.0, c_text: float = 1.0) -> np.ndarray:
    """CFG velocity ``f(0,0) + c_img (f(0,ctx) - f(0,0)) + c_text (f(r,ctx) - f(0,ctx))``.

    Without guidance (``c_text = 1`` and no image term) the conditional
    velocity is returned directly.
    """
    if c_text == 1.0 and (c_img == 1.0 or cond.context is None):
        return model.velocity(z, t, cond)
    null = Condition(NULL_PROMPT)
    v_null = model.velocity(z, t, null)
    v_img = v_null if cond.context is None else model.velocity(z, t, Condition(NULL_PROMPT, cond.context))
    v_full = model.velocity(z, t, cond)
    return cfg_combine(v_null, v_img, v_full, c_img, c_text)


def guided_velocity_jacobian(model, z, t: float, cond: Condition, c_img: float = 1.0, c_text: float = 1.0):
    jac = getattr(model, "velocity_jacobian", None)
    if jac is None:
        raise ca.GuidanceError(f"{type(model).__name__} provides no velocity Jacobian")
    if c_text == 1.0 and (c_img == 1.0 or cond.context is None):
        return jac(z, t, cond)
    null = Condition(NULL_PROMPT)
    j_null = jac(z, t, null)
    j_img = j_null if cond.context is None else jac(z, t, Condition(NULL_PROMPT, cond.context))
    return cfg_combine(j_null, j_img, jac(z, t, cond), c_img, c_text)


def generate(model, cond: Condition, grid: TimeGrid, seed: int | np.random.Generator,
             n_samples: int | None = None, c_img: float = 1.0, c_text: float = 1.0) -> np.ndarray:
    """Draw ``z ~ N(0, I)`` at ``t_N`` and Euler-integrate down to ``t = 0``.

    With ``n_samples`` the draws form a batch ``(n_samples, d)``.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    shape = (model.latent_dim,) if n_samples is None else (n_samples, model.latent_dim)
    z = rng.standard_normal(shape)
    return integrate(lambda x, t: guided_velocity(model, x, t, cond, c_img, c_text), z, grid.times[::-1])


def invert(model, cond: Condition, grid: TimeGrid, z0, upto: int | None = None,
           c_img: float = 1.0, c_text: float = 1.0) -> np.ndarray:
    """Euler-integrate ``z0`` from ``t_0 = 0`` up to ``t_upto`` (default ``t_N``)."""
    upto = grid.n_steps if upto is None else upto
    times = grid.times[: upto + 1]
    return integrate(lambda x, t: guided_velocity(model, x, t, cond, c_img, c_text), z0, times)


# ------------------------------------------------------------------ editing
def flowedit_pair(z_t, z1, eps, t: float) -> tuple[np.ndarray, np.ndarray]:
    """``z_src = (1 - t) z1 + t eps`` and ``z_tar = z_t + z_src - z1``.

    ``eps`` may carry a leading sample axis.
    """
    z_t, z1, eps = (np.asarray(a, dtype=float) for a in (z_t, z1, eps))
    z_src = (1.0 - t) * z1 + t * eps
    z_tar = z_src + (z_t - z1)  # bitwise equal to z_src when z_t == z1
    return z_src, z_tar


@dataclass
class CombinedVelocity:
    v_tilde: np.ndarray
    v_src: np.ndarray  # (K, d)
    v_tar: np.ndarray  # (K, d)
    z_src: np.ndarray  # (K, d)
    z_tar: np.ndarray  # (K, d)
    eps: np.ndarray  # (K, d)
    concept_dists: np.ndarray | None = None  # (K, pixels, concepts)
    jacobian: np.ndarray | None = None  # d v_tilde / d z_t

    @property
    def per_sample(self) -> np.ndarray:
        return self.v_tar - self.v_src


def combined_velocity(
    model,
    z_t,
    z1,
    cond_src: Condition,
    cond_tar: Condition,
    t: float,
    k_samples: int,
    rng: np.random.Generator | None,
    cfg: EditConfig,
    eps=None,
    concepts: ConceptSet | None = None,
    with_jacobian: bool = False,
) -> CombinedVelocity:
    """K-sample average of ``v_tar(z_tar_k) - v_src(z_src_k)`` with a fresh noise per sample.

    The source branch never sees the context.  ``eps`` overrides the draws;
    with ``concepts`` the per-sample concept distributions at ``z_tar_k``
    under ``cond_tar`` are returned too.
    """
    if k_samples < 1:
        raise ValueError("k_samples must be >= 1")
    d = model.latent_dim
    if eps is None:
        eps = rng.standard_normal((k_samples, d))
    eps = np.asarray(eps, dtype=float).reshape(k_samples, d)
    z_src, z_tar = flowedit_pair(z_t, z1, eps, t)
    src = cond_src.without_context()
    v_src = guided_velocity(model, z_src, t, src, 1.0, cfg.cfg_src_T)
    v_tar = guided_velocity(model, z_tar, t, cond_tar, cfg.cfg_tar_img, cfg.cfg_tar_T)
    out = CombinedVelocity((v_tar - v_src).mean(axis=0), v_src, v_tar, z_src, z_tar, eps)
    if concepts is not None:
        out.concept_dists = np.stack(
            [model.concept_distribution(z_tar[k], t, cond_tar, concepts) for k in range(k_samples)]
        )
    if with_jacobian:
        # z_src_k does not depend on z_t and d z_tar_k / d z_t = I
        jacs = guided_velocity_jacobian(model, z_tar, t, cond_tar, cfg.cfg_tar_img, cfg.cfg_tar_T)
        out.jacobian = np.asarray(jacs).reshape(k_samples, d, d).mean(axis=0)
    return out


def _guided_update(model, z, t, t_prev, i, v_tilde, jac, dist, x_src, concepts, cfg, rng, masks):
    mask = ca.compute_mask(dist, concepts, cfg.tau)
    meas = ca.make_measurement(x_src, mask, cfg.sigma_meas, rng)
    z0_hat = ca.tweedie_z0(z, v_tilde, t)
    if cfg.alpha_guidance > 0:
        v_hat = ca.guidance_velocity(
            z, v_tilde, t, meas, model, cfg.alpha_guidance, cfg.sigma_meas, cfg.guidance_mode, rng,
            v_tilde_jacobian=jac,
        )
    else:
        v_hat = np.zeros_like(z)
    resid = ca.masked_residual(meas, model, z0_hat)
    masks.append(mask.values)
    record = StepRecord(
        index=i,
        t=t,
        v_tilde_norm=float(np.linalg.norm(v_tilde)),
        v_hat_norm=float(np.linalg.norm(v_hat)),
        residual=float(np.linalg.norm(resid)),
        mask_fraction=mask.fraction,
        z_t=z.copy(),
        z0_hat=z0_hat,
    )
    z_next = euler_step(z, v_tilde + v_hat, t, t_prev)
    return z_next, record


def _check_source(model, z_src, x_src):
    z_src = np.asarray(z_src, dtype=float)
    x_src = np.asarray(x_src, dtype=float)
    if z_src.shape != (model.latent_dim,):
        raise ValueError(f"z_src must have shape ({model.latent_dim},)")
    if not np.allclose(model.decode(z_src), x_src, rtol=1e-12, atol=1e-12):
        raise ValueError("x_src must equal decode(z_src)")
    return z_src, x_src


def vicoedit_run(
    model,
    z_src,
    cond_src: Condition,
    cond_tar: Condition,
    concepts: ConceptSet,
    x_src,
    config: EditConfig,
    rng: np.random.Generator | None = None,
) -> EditResult:
    """Inversion-free context-aware edit of ``z_src``.

    Starting from ``z = z_src`` at ``t_(n_max)``, each step draws ``K``
    noises, averages the coupled target/source velocity difference and the
    target-branch concept distributions, thresholds the preserved-concept
    mask, and adds the guidance velocity pulling the one-step clean estimate
    toward the source in masked pixels.
    """
    z_src, x_src = _check_source(model, z_src, x_src)
    rng = rng or np.random.default_rng(config.seed)
    through = config.guidance_mode == ca.THROUGH_MODEL and config.alpha_guidance > 0
    z1 = z_src
    z = z_src.copy()
    records, masks = [], []
    for i, t, t_prev in config.grid().edit_steps():
        try:
            cv = combined_velocity(
                model, z, z1, cond_src, cond_tar, t, config.k_samples, rng, config,
                concepts=concepts, with_jacobian=through,
            )
            dist = ca.aggregate_concepts(cv.concept_dists)
            z, rec = _guided_update(
                model, z, t, t_prev, i, cv.v_tilde, cv.jacobian, dist, x_src, concepts, config, rng, masks
            )
        except Exception as exc:
            raise EditError(i, exc) from exc
        records.append(rec)
    return EditResult(z, model.decode(z), records, config.seed, config.digest(), masks)


def flowedit_run(model, z_src, cond_src, cond_tar, concepts, x_src, config: EditConfig, rng=None) -> EditResult:
    """Plain coupled-velocity edit: no context, no guidance."""
    return vicoedit_run(
        model, z_src, cond_src, cond_tar.without_context(), concepts, x_src,
        config.replace(alpha_guidance=0.0), rng,
    )


def inversion_edit_run(
    model,
    z_src,
    cond_src: Condition,
    cond_tar: Condition,
    concepts: ConceptSet,
    x_src,
    config: EditConfig,
    rng: np.random.Generator | None = None,
) -> EditResult:
    """Inversion-based baseline with the same concept-aligned guidance.

    ``z_src`` is Euler-inverted under the source prompt up to ``t_(n_max)``
    and then regenerated under the target condition; each step uses the
    one-step estimate ``z - t v`` of the plain target velocity for guidance.
    """
    z_src, x_src = _check_source(model, z_src, x_src)
    rng = rng or np.random.default_rng(config.seed)
    grid = config.grid()
    through = config.guidance_mode == ca.THROUGH_MODEL and config.alpha_guidance > 0
    z = invert(model, cond_src.without_context(), grid, z_src, upto=grid.n_max, c_text=config.cfg_src_T)
    records, masks = [], []
    for i, t, t_prev in grid.edit_steps():
        try:
            v = guided_velocity(model, z, t, cond_tar, config.cfg_tar_img, config.cfg_tar_T)
            jac = None
            if through:
                jac = guided_velocity_jacobian(model, z, t, cond_tar, config.cfg_tar_img, config.cfg_tar_T)
            dist = model.concept_distribution(z, t, cond_tar, concepts)
            z, rec = _guided_update(model, z, t, t_prev, i, v, jac, dist, x_src, concepts, config, rng, masks)
        except Exception as exc:
            raise EditError(i, exc) from exc
        records.append(rec)
    return EditResult(z, model.decode(z), records, config.seed, config.digest(), masks)

