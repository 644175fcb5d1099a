"""Oracle cross-checks behind the ``verify`` subcommand.

Each check returns a :class:`Check` with the measured error and its
tolerance.  Suites:

``schedule``       drift/diffusion coefficient identities, grid layout
``flowmodel``      velocity = a z + b score, Jacobian vs finite differences,
                   velocity vs importance-sampling oracle
``tweedie``        one-step clean estimate vs analytic and MC posterior means,
                   VP-kernel Tweedie
``dps``            guidance gradient vs finite differences (both modes)
``decomposition``  guided generation recovers the conjugate posterior,
                   one-step estimate on the coupled edit path, identity-edit
                   fixpoint, K-sample variance reduction
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import conceptalign as ca
from . import oracle, toy
from .flowmodel import Condition, DomainMixtureModel
from .sampler import EditConfig, combined_velocity, integrate, vicoedit_run
from .schedule import PathScheduler, diffusion_coeffs, make_uniform_grid, path_coeffs

__all__ = ["Check", "SUITES", "run_suite"]


@dataclass(frozen=True)
class Check:
    name: str
    error: float
    tolerance: float
    passed: bool
    seconds: float = 0.0

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name:<52s} err={self.error:.3e}  tol={self.tolerance:.1e}  ({self.seconds:.2f}s)"


def _check(name: str, error: float, tol: float, start: float, passed: bool | None = None) -> Check:
    ok = bool(error <= tol) if passed is None else passed
    return Check(name, float(error), float(tol), ok, time.perf_counter() - start)


def _rel(a, b) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


SCHEDULERS = {"rectified-flow": PathScheduler.rectified_flow(), "vp": PathScheduler.vp()}


# ---------------------------------------------------------------- schedule
def coefficient_identities(n_points: int = 200, seed: int = 0) -> list[Check]:
    """``f_t = a_t`` and ``-g_t^2 / 2 = b_t`` at random interior times."""
    out = []
    rng = np.random.default_rng(seed)
    ts = rng.uniform(0.01, 0.99, n_points)
    for name, s in SCHEDULERS.items():
        start = time.perf_counter()
        err_f = err_g = 0.0
        for t in ts:
            a, b = path_coeffs(s, t)
            f, g2 = diffusion_coeffs(s, t)
            err_f = max(err_f, abs(f - a) / max(1.0, abs(a)))
            err_g = max(err_g, abs(-0.5 * g2 - b) / max(1.0, abs(b)))
        out.append(_check(f"schedule/{name}: f_t = a_t", err_f, 1e-10, start))
        out.append(_check(f"schedule/{name}: -g_t^2/2 = b_t", err_g, 1e-10, start))
    start = time.perf_counter()
    vp = SCHEDULERS["vp"]
    _, b = path_coeffs(vp, 0.37)
    out.append(_check("schedule/vp: b_t = -beta_t/2", abs(b + 0.5 * vp.beta(0.37)), 1e-10, start))
    start = time.perf_counter()
    g = make_uniform_grid(50)
    err = max(abs(g.times[0]), abs(g.times[-1] - 1.0), float(np.max(np.abs(np.diff(g.times) - 0.02))))
    out.append(_check("schedule: uniform grid spacing", err, 1e-12, start))
    return out


# --------------------------------------------------------------- flowmodel
def velocity_score_identity(n_points: int = 50, seed: int = 1) -> list[Check]:
    """``velocity = a_t z + b_t score`` on the three-component mixture."""
    model = toy.three_component_mixture()
    cond = Condition("p")
    out = []
    for name, s in SCHEDULERS.items():
        start = time.perf_counter()
        rng = np.random.default_rng(seed)
        worst = 0.0
        for _ in range(n_points):
            t = rng.uniform(0.02, 0.98)
            z = rng.normal(0.0, 2.0, 2)
            a, b = path_coeffs(s, t)
            v = model.velocity(z, t, cond, s)
            worst = max(worst, _rel(a * z + b * model.score(z, t, cond, s), v))
        out.append(_check(f"flowmodel/{name}: velocity = a z + b score", worst, 1e-6, start))
    return out


def jacobian_fd(n_points: int = 20, seed: int = 2) -> Check:
    start = time.perf_counter()
    model = toy.three_component_mixture()
    cond = Condition("p")
    rng = np.random.default_rng(seed)
    worst = 0.0
    h = 1e-6
    for _ in range(n_points):
        t = rng.uniform(0.05, 0.95)
        z = rng.normal(0.0, 1.5, 2)
        jac = model.velocity_jacobian(z, t, cond)
        fd = np.column_stack([
            (model.velocity(z + h * e, t, cond) - model.velocity(z - h * e, t, cond)) / (2 * h) for e in np.eye(2)
        ])
        worst = max(worst, _rel(jac, fd))
    return _check("flowmodel: velocity Jacobian vs finite differences", worst, 1e-6, start)


def velocity_mc(ts=(0.2, 0.5, 0.8), n: int = 200_000, seed: int = 3) -> list[Check]:
    """Velocity agrees with the importance-sampling oracle within 3 SE."""
    model = toy.three_component_mixture()
    cond = Condition("p")
    spec = oracle.mixture_spec(model, cond)
    rng = np.random.default_rng(seed)
    out = []
    for name, s in SCHEDULERS.items():
        for t in ts:
            start = time.perf_counter()
            z0 = model.sample_data(cond, 1, rng)[0]
            z = s.alpha(t) * z0 + s.sigma(t) * rng.standard_normal(2)
            est = oracle.mc_conditional(spec, z, t, "velocity", n, rng, s)
            zmax = float(np.max(est.z_scores(model.velocity(z, t, cond, s))))
            out.append(_check(f"flowmodel/{name}: velocity vs MC at t={t} (|z| in SE)", zmax, 3.0, start))
    return out


# ----------------------------------------------------------------- tweedie
def tweedie_gaussian(ts=(0.1, 0.3, 0.5, 0.7, 0.9), seed: int = 4) -> Check:
    """``z_t - t v`` equals the analytic posterior mean on a single Gaussian."""
    start = time.perf_counter()
    mean = np.array([0.7, -1.2])
    cov = np.array([[0.8, 0.3], [0.3, 0.5]])
    model = toy.gaussian_model(mean, cov)
    cond = Condition("p")
    rng = np.random.default_rng(seed)
    worst = 0.0
    for t in ts:
        for _ in range(4):
            z = rng.normal(0.0, 1.5, 2)
            est = ca.tweedie_z0(z, model.velocity(z, t, cond), t)
            ref, _ = oracle.analytic_linear_gaussian_posterior(mean, cov, (1 - t) * np.eye(2), t, z)
            worst = max(worst, float(np.max(np.abs(est - ref))))
    return _check("tweedie: single Gaussian vs analytic posterior", worst, 1e-8, start)


def tweedie_mixture(ts=(0.1, 0.3, 0.5, 0.7, 0.9), n: int = 200_000, seed: int = 5) -> list[Check]:
    """``z_t - t v`` within 3 SE of the MC posterior mean on the mixture."""
    model = toy.three_component_mixture()
    cond = Condition("p")
    spec = oracle.mixture_spec(model, cond)
    rng = np.random.default_rng(seed)
    out = []
    for t in ts:
        start = time.perf_counter()
        z0 = model.sample_data(cond, 1, rng)[0]
        z = (1 - t) * z0 + t * rng.standard_normal(2)
        est = oracle.mc_conditional(spec, z, t, "z0_mean", n, rng)
        zmax = float(np.max(est.z_scores(ca.tweedie_z0(z, model.velocity(z, t, cond), t))))
        out.append(_check(f"tweedie: mixture vs MC at t={t} (|z| in SE)", zmax, 3.0, start))
    return out


def tweedie_vp(seed: int = 6, n: int = 200_000) -> list[Check]:
    vp = SCHEDULERS["vp"]
    rng = np.random.default_rng(seed)
    out = []

    start = time.perf_counter()
    mean = np.array([0.5, 1.0])
    cov = np.array([[0.6, -0.2], [-0.2, 0.9]])
    g = toy.gaussian_model(mean, cov)
    worst = 0.0
    for t in (0.05, 0.2, 0.5):
        x = rng.normal(0.0, 1.0, 2)
        est = oracle.vp_tweedie(lambda v: g.score(v, t, Condition("p"), vp), x, t, vp)
        ref, _ = oracle.analytic_linear_gaussian_posterior(mean, cov, vp.alpha(t) * np.eye(2), vp.sigma(t), x)
        worst = max(worst, float(np.max(np.abs(est - ref))))
    out.append(_check("tweedie/vp: single Gaussian vs analytic posterior", worst, 1e-10, start))

    model = toy.three_component_mixture()
    cond = Condition("p")
    spec = oracle.mixture_spec(model, cond)
    for t in (0.05, 0.2):
        start = time.perf_counter()
        z0 = model.sample_data(cond, 1, rng)[0]
        x = vp.alpha(t) * z0 + vp.sigma(t) * rng.standard_normal(2)
        est = oracle.mc_conditional(spec, x, t, "z0_mean", n, rng, vp)
        tw = oracle.vp_tweedie(lambda v: model.score(v, t, cond, vp), x, t, vp)
        out.append(_check(f"tweedie/vp: mixture vs MC at t={t} (|z| in SE)", float(np.max(est.z_scores(tw))), 3.0,
                          start))
    return out


# --------------------------------------------------------------------- dps
def _random_decoder_model(rng: np.random.Generator) -> DomainMixtureModel:
    d, px = 3, 5
    decoder = rng.normal(size=(px, d))

    def comps(label):
        out = []
        for _ in range(2):
            a = rng.normal(size=(d, d))
            out.append({"weight": 0.5, "mean": rng.normal(size=d).tolist(),
                        "cov": (0.3 * a @ a.T / d + 0.2 * np.eye(d)).tolist(), "concepts": label})
        return out

    return DomainMixtureModel.from_components({"src": comps("u"), "tar": comps("w")}, d, decoder=decoder.tolist(),
                                              pixel_tokens=[0] * px)


def dps_gradients(n_instances: int = 20, seed: int = 7) -> list[Check]:
    """Guidance velocity / alpha against central differences of the guidance loss."""
    rng = np.random.default_rng(seed)
    cfg = EditConfig(k_samples=2)
    out = []
    for mode in ca.GUIDANCE_MODES:
        start = time.perf_counter()
        worst = 0.0
        for _ in range(n_instances):
            model = _random_decoder_model(rng)
            t = rng.uniform(0.1, 0.95)
            z1 = rng.normal(size=3)
            z_t = z1 + 0.3 * rng.normal(size=3)
            eps = rng.normal(size=(2, 3))
            mask = ca.ConceptMask((rng.random(5) < 0.6).astype(float), 0.5, np.zeros(5))
            sigma = float(rng.choice([0.0, 0.1]))
            meas = ca.make_measurement(model.decode(z1), mask, sigma, rng)
            s_tilde = sigma * rng.normal(size=5)
            alpha = rng.uniform(0.2, 2.0)

            def v_of(z):
                return combined_velocity(model, z, z1, Condition("src"), Condition("tar"), t, 2, None, cfg,
                                         eps=eps).v_tilde

            cv = combined_velocity(model, z_t, z1, Condition("src"), Condition("tar"), t, 2, None, cfg,
                                   eps=eps, with_jacobian=True)
            got = ca.guidance_velocity(z_t, cv.v_tilde, t, meas, model, alpha, mode=mode,
                                       v_tilde_jacobian=cv.jacobian, s_tilde=s_tilde)
            if mode == ca.DETACHED:
                v_fixed = cv.v_tilde

                def loss(z):
                    return ca.guidance_loss(ca.tweedie_z0(z, v_fixed, t), meas, model, s_tilde)
            else:
                def loss(z):
                    return ca.guidance_loss(ca.tweedie_z0(z, v_of(z), t), meas, model, s_tilde)
            worst = max(worst, _rel(got / alpha, oracle.fd_gradient(loss, z_t)))
        out.append(_check(f"dps/{mode}: guidance gradient vs finite differences", worst, 1e-4, start))
    return out


# ----------------------------------------------------------- decomposition
def posterior_recovery(n_runs: int = 500, n_steps: int = 200, seed: int = 8) -> Check:
    """Prior velocity plus exact ``b_t grad log p(y | z_t)``, integrated from
    noise, lands on the conjugate posterior: every coordinate of the sample
    mean within 3 SE of the analytic posterior mean."""
    start = time.perf_counter()
    prior_mean = np.array([0.5, -0.3, 1.0])
    prior_cov = np.array([[1.0, 0.3, 0.0], [0.3, 0.8, -0.2], [0.0, -0.2, 0.6]])
    forward = np.array([[1.0, 0.5, 0.0], [0.0, 1.0, -1.0]])
    sigma_y = 0.4
    y = np.array([1.2, -0.8])
    model = toy.gaussian_model(prior_mean, prior_cov)
    cond = Condition("p")

    def velocity(z, t):
        return model.velocity(z, t, cond) + oracle.linear_gaussian_guidance(
            prior_mean, prior_cov, forward, sigma_y, y, z, t)

    rng = np.random.default_rng(seed)
    grid = make_uniform_grid(n_steps)
    samples = integrate(velocity, rng.standard_normal((n_runs, 3)), grid.times[::-1])
    post_mean, _ = oracle.analytic_linear_gaussian_posterior(prior_mean, prior_cov, forward, sigma_y, y)
    se = samples.std(axis=0, ddof=1) / np.sqrt(n_runs)
    zmax = float(np.max(np.abs(samples.mean(axis=0) - post_mean) / se))
    return _check(f"decomposition: guided generation vs posterior ({n_runs} runs, |z| in SE)", zmax, 3.0, start)


def edit_source(seed: int) -> np.ndarray:
    """Source latent used by the toy-edit checks for a given seed."""
    return toy.two_domain_scenario().sample_source(np.random.default_rng(1000 + seed))


def coupled_denoising(n_runs: int = 100, t_probe: float = 0.9, min_fraction: float = 0.9) -> Check:
    """On a toy edit trajectory, ``z_t - t v`` at ``t_probe`` is closer to the
    final state than ``z_t`` is."""
    start = time.perf_counter()
    sc = toy.two_domain_scenario()
    hits = 0
    for s in range(n_runs):
        z_src = edit_source(s)
        res = vicoedit_run(sc.model, z_src, sc.cond_src, sc.cond_tar, sc.concepts, sc.model.decode(z_src),
                           EditConfig(seed=s))
        rec = min(res.per_step, key=lambda r: abs(r.t - t_probe))
        hits += np.linalg.norm(rec.z0_hat - res.z_final) < np.linalg.norm(rec.z_t - res.z_final)
    frac = hits / n_runs
    return _check(f"decomposition: one-step estimate at t={t_probe} (miss rate over {n_runs})",
                  1 - frac, 1 - min_fraction, start)


def identity_fixpoint(n_steps=(10, 50), k_values=(1, 3), seed: int = 9) -> Check:
    start = time.perf_counter()
    sc = toy.two_domain_scenario()
    z_src = edit_source(seed)
    x_src = sc.model.decode(z_src)
    worst = 0.0
    for n in n_steps:
        for k in k_values:
            cfg = EditConfig(n_steps=n, n_max=n - 1 if n < 50 else 47, k_samples=k, alpha_guidance=0.0, seed=seed)
            res = vicoedit_run(sc.model, z_src, sc.cond_src, sc.cond_src, sc.concepts, x_src, cfg)
            worst = max(worst, float(np.max(np.abs(res.x_final - x_src))))
    return _check("decomposition: identity edit returns the source", worst, 1e-10, start)


def k_variance(n_seeds: int = 200, t: float = 0.94, k: int = 3) -> Check:
    """Per-coordinate var of the K-averaged velocity is ``var(K=1) / K`` within [0.7, 1.3]."""
    start = time.perf_counter()
    sc = toy.two_domain_scenario()
    z1 = edit_source(0)
    cfg = EditConfig()

    def draws(kk):
        return np.array([
            combined_velocity(sc.model, z1, z1, sc.cond_src, sc.cond_tar, t, kk, np.random.default_rng(s), cfg).v_tilde
            for s in range(n_seeds)
        ])

    ratio = draws(k).var(axis=0, ddof=1) / (draws(1).var(axis=0, ddof=1) / k)
    err = float(np.max(np.abs(ratio - 1.0)))
    return _check(f"decomposition: K={k} variance ratio (max |ratio-1|)", err, 0.3, start)


# ------------------------------------------------------------------ suites
SUITES: dict[str, list[Callable[[], Check | list[Check]]]] = {
    "schedule": [coefficient_identities],
    "flowmodel": [velocity_score_identity, jacobian_fd, velocity_mc],
    "tweedie": [tweedie_gaussian, tweedie_mixture, tweedie_vp],
    "dps": [dps_gradients],
    "decomposition": [posterior_recovery, coupled_denoising, identity_fixpoint, k_variance],
}


def run_suite(name: str, report: Callable[[str], None] | None = print) -> list[Check]:
    """Run one suite (or ``all``); each check is reported as it finishes."""
    if name == "all":
        names = list(SUITES)
    elif name in SUITES:
        names = [name]
    else:
        raise ValueError(f"unknown suite {name!r}; choose from {', '.join([*SUITES, 'all'])}")
    results = []
    for suite in names:
        for fn in SUITES[suite]:
            got = fn()
            for c in got if isinstance(got, list) else [got]:
                results.append(c)
                if report:
                    report(c.line())
    return results
