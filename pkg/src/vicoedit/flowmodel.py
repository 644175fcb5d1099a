"""Velocity-field models.

:class:`DomainMixtureModel` is an analytic flow model: every prompt selects a
Gaussian mixture over the latent space, and the exact marginal velocity
``E[dz_t/dt | z_t]`` of the Gaussian path from that mixture to ``N(0, I)`` is
available in closed form.  It also supplies the score, the posterior mean
``E[z_0 | z_t]``, the velocity Jacobian, per-coordinate concept
probabilities (component responsibilities mapped to concept labels) and a
linear decoder.

Per component ``k`` with mean ``mu`` and covariance ``S``, writing
``C = alpha^2 S + sigma^2 I`` and ``delta = z - alpha mu``::

    E[z_0 | z, k] = mu + alpha S C^-1 delta
    E[eps | z, k] = sigma C^-1 delta
    u_k(z)        = alpha' E[z_0 | z, k] + sigma' E[eps | z, k]

and the mixture quantities are responsibility-weighted sums.

Model file schema (JSON)::

    {
      "format": "vicoedit.mixture-model", "version": 1,
      "latent_dim": 4,
      "tokens": [[0, 1], [2, 3]],          # optional, default one token
      "decoder": [[...], ...],             # optional, pixel_dim x latent_dim
      "pixel_tokens": [0, 0, 1, 1],        # optional, token of each pixel
      "prompts": {
        "<prompt_id>": {"components": [
          {"weight": 0.5, "mean": [...], "cov": [[...], ...],
           "concepts": "sky" | ["sky", "dog"],   # one label, or one per token
           "context_weight": 0.0 | [...]}        # optional, scalar or per coordinate
        ]}
      }
    }

A prompt named ``"null"`` is the unconditional prompt used by CFG; if absent
it is built as the weight-averaged union of all other prompts.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence, runtime_checkable

import numpy as np
from scipy.special import logsumexp

from .schedule import PathScheduler

__all__ = [
    "NULL_PROMPT",
    "Component",
    "ConceptSet",
    "Condition",
    "ConstantVelocityModel",
    "DomainMixtureModel",
    "Mixture",
    "ModelError",
    "VelocityModel",
    "cfg_combine",
    "load_model",
    "save_model",
]

NULL_PROMPT = "null"
MODEL_FORMAT = "vicoedit.mixture-model"
MODEL_VERSION = 1

_LOG_2PI = math.log(2.0 * math.pi)
_RF = PathScheduler()


class ModelError(ValueError):
    """Invalid model definition or evaluation request."""


@dataclass(frozen=True)
class ConceptSet:
    """Concepts to preserve (``pos``) and concepts expected to change (``neg``)."""

    pos: tuple[str, ...]
    neg: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "pos", tuple(self.pos))
        object.__setattr__(self, "neg", tuple(self.neg))
        if not self.pos and not self.neg:
            raise ModelError("concept set must not be empty")
        if set(self.pos) & set(self.neg):
            raise ModelError(f"pos and neg overlap: {sorted(set(self.pos) & set(self.neg))}")
        if len(set(self.all)) != len(self.all):
            raise ModelError("duplicate concept identifiers")

    @property
    def all(self) -> tuple[str, ...]:
        """Concept order used by every distribution: positives first."""
        return self.pos + self.neg

    @property
    def n_pos(self) -> int:
        return len(self.pos)


@dataclass(frozen=True)
class Condition:
    prompt_id: str
    context: np.ndarray | None = None
    concepts: ConceptSet | None = None

    def __post_init__(self):
        if self.context is not None:
            ctx = np.asarray(self.context, dtype=float)
            ctx.setflags(write=False)
            object.__setattr__(self, "context", ctx)

    def without_context(self) -> Condition:
        return Condition(self.prompt_id, None, self.concepts)

    def with_prompt(self, prompt_id: str) -> Condition:
        return Condition(prompt_id, self.context, self.concepts)


def cfg_combine(v_null, v_img, v_full, c_img: float, c_text: float) -> np.ndarray:
    """Dual-modality classifier-free guidance.

    ``v_null + c_img (v_img - v_null) + c_text (v_full - v_img)``.  Linear, so
    it applies unchanged to velocity Jacobians.
    """
    v_null, v_img, v_full = (np.asarray(v, dtype=float) for v in (v_null, v_img, v_full))
    if not v_null.shape == v_img.shape == v_full.shape:
        raise ModelError(f"shape mismatch {v_null.shape}, {v_img.shape}, {v_full.shape}")
    if c_img == 1.0 and c_text == 1.0:
        return v_full.copy()  # the sum telescopes; skip it so the result is exact
    return v_null + c_img * (v_img - v_null) + c_text * (v_full - v_img)


@runtime_checkable
class VelocityModel(Protocol):
    """What the samplers need from a model.

    ``velocity_jacobian`` is optional; guidance in ``through-model`` mode
    requires it.
    """

    latent_dim: int
    pixel_dim: int

    def velocity(self, z, t: float, cond: Condition) -> np.ndarray: ...

    def concept_distribution(self, z, t: float, cond: Condition, concepts: ConceptSet) -> np.ndarray: ...

    def decode(self, z) -> np.ndarray: ...

    def decode_vjp(self, z, cotangent) -> np.ndarray: ...


@dataclass(frozen=True)
class Component:
    weight: float
    mean: np.ndarray
    cov: np.ndarray
    concepts: tuple[str, ...]
    context_weight: np.ndarray

    def to_dict(self) -> dict:
        labels = self.concepts
        cw = self.context_weight
        out = {
            "weight": float(self.weight),
            "mean": self.mean.tolist(),
            "cov": self.cov.tolist(),
            "concepts": labels[0] if len(set(labels)) == 1 else list(labels),
        }
        if np.any(cw != 0):
            out["context_weight"] = float(cw[0]) if np.all(cw == cw[0]) else cw.tolist()
        return out


@dataclass(frozen=True)
class Mixture:
    """Stacked component parameters of one prompt."""

    weights: np.ndarray  # (K,)
    means: np.ndarray  # (K, d)
    covs: np.ndarray  # (K, d, d)
    labels: np.ndarray  # (K, n_tokens) of str
    context_weights: np.ndarray  # (K, d)

    @classmethod
    def from_components(cls, comps: Sequence[Component]) -> Mixture:
        return cls(
            weights=np.array([c.weight for c in comps], dtype=float),
            means=np.stack([c.mean for c in comps]),
            covs=np.stack([c.cov for c in comps]),
            labels=np.array([c.concepts for c in comps], dtype=object),
            context_weights=np.stack([c.context_weight for c in comps]),
        )

    @property
    def n_components(self) -> int:
        return self.weights.size

    def components(self) -> list[Component]:
        return [
            Component(
                float(self.weights[k]),
                self.means[k],
                self.covs[k],
                tuple(self.labels[k]),
                self.context_weights[k],
            )
            for k in range(self.n_components)
        ]

    def shifted_means(self, context: np.ndarray | None) -> np.ndarray:
        if context is None:
            return self.means
        return self.means + self.context_weights * (context[None, :] - self.means)


@dataclass
class _Terms:
    """Per-component quantities at a batch of points (n points, K components)."""

    alpha: float
    sigma: float
    means: np.ndarray  # (K, d)
    covs: np.ndarray  # (K, d, d)
    cinv: np.ndarray  # (K, d, d)
    sol: np.ndarray  # (n, K, d)  C^-1 (z - alpha mu)
    logp: np.ndarray  # (n, K)    log w_k N(z; alpha mu, C)
    resp: np.ndarray  # (n, K)


def _as_batch(z, dim: int) -> tuple[np.ndarray, bool]:
    z = np.asarray(z, dtype=float)
    single = z.ndim == 1
    z2 = z.reshape(1, -1) if single else z
    if z2.ndim != 2 or z2.shape[1] != dim:
        raise ModelError(f"expected points of dimension {dim}, got shape {z.shape}")
    return z2, single


@dataclass(frozen=True, eq=False)
class DomainMixtureModel:
    """Analytic flow model built from per-prompt Gaussian mixtures."""

    latent_dim: int
    prompts: dict[str, Mixture]
    decoder: np.ndarray | None = None
    tokens: tuple[tuple[int, ...], ...] | None = None
    pixel_tokens: np.ndarray | None = None
    _null_is_derived: bool = field(default=False, repr=False)

    def __post_init__(self):
        d = self.latent_dim
        if d < 1:
            raise ModelError("latent_dim must be positive")
        dec = np.eye(d) if self.decoder is None else np.asarray(self.decoder, dtype=float)
        if dec.ndim != 2 or dec.shape[1] != d:
            raise ModelError(f"decoder must be (pixel_dim, {d}), got {dec.shape}")
        if np.linalg.matrix_rank(dec) < d:
            raise ModelError("decoder must have full column rank")
        object.__setattr__(self, "decoder", dec)

        tokens = self.tokens or (tuple(range(d)),)
        tokens = tuple(tuple(int(i) for i in tok) for tok in tokens)
        if sorted(i for tok in tokens for i in tok) != list(range(d)):
            raise ModelError("tokens must partition the latent coordinates")
        object.__setattr__(self, "tokens", tokens)
        token_of = np.empty(d, dtype=int)
        for j, tok in enumerate(tokens):
            token_of[list(tok)] = j

        if self.pixel_tokens is None:
            if dec.shape[0] != d:
                raise ModelError("pixel_tokens is required when pixel_dim != latent_dim")
            pix = token_of
        else:
            pix = np.asarray(self.pixel_tokens, dtype=int)
        if pix.shape != (dec.shape[0],) or pix.min() < 0 or pix.max() >= len(tokens):
            raise ModelError("pixel_tokens must map every pixel to a token index")
        object.__setattr__(self, "pixel_tokens", pix)

        if not self.prompts:
            raise ModelError("model needs at least one prompt")
        for pid, mix in self.prompts.items():
            self._validate_mixture(pid, mix)
        if NULL_PROMPT not in self.prompts:
            others = list(self.prompts.values())
            comps = [
                Component(c.weight / len(others), c.mean, c.cov, c.concepts, c.context_weight)
                for mix in others
                for c in mix.components()
            ]
            prompts = dict(self.prompts)
            prompts[NULL_PROMPT] = Mixture.from_components(comps)
            object.__setattr__(self, "prompts", prompts)
            object.__setattr__(self, "_null_is_derived", True)

    def _validate_mixture(self, pid: str, mix: Mixture) -> None:
        d, n_tok = self.latent_dim, len(self.tokens)
        K = mix.n_components
        if K < 1:
            raise ModelError(f"prompt {pid!r} has no components")
        if mix.means.shape != (K, d) or mix.covs.shape != (K, d, d):
            raise ModelError(f"prompt {pid!r}: means/covs do not match latent_dim={d}")
        if mix.labels.shape != (K, n_tok):
            raise ModelError(f"prompt {pid!r}: need one concept label per token ({n_tok})")
        if mix.context_weights.shape != (K, d):
            raise ModelError(f"prompt {pid!r}: bad context_weight shape")
        if np.any(mix.weights <= 0) or abs(mix.weights.sum() - 1.0) > 1e-12:
            raise ModelError(f"prompt {pid!r}: weights must be positive and sum to 1")
        for k, cov in enumerate(mix.covs):
            if not np.allclose(cov, cov.T, rtol=0, atol=1e-12 * max(1.0, np.abs(cov).max())):
                raise ModelError(f"prompt {pid!r} component {k}: covariance not symmetric")
            try:
                np.linalg.cholesky(cov)
            except np.linalg.LinAlgError as exc:
                raise ModelError(f"prompt {pid!r} component {k}: covariance not positive definite") from exc

    # ------------------------------------------------------------------ basics
    @property
    def pixel_dim(self) -> int:
        return self.decoder.shape[0]

    @property
    def n_tokens(self) -> int:
        return len(self.tokens)

    @property
    def concept_vocabulary(self) -> frozenset[str]:
        return frozenset(str(lab) for mix in self.prompts.values() for lab in mix.labels.ravel())

    def mixture(self, prompt_id: str) -> Mixture:
        try:
            return self.prompts[prompt_id]
        except KeyError:
            raise ModelError(f"unknown prompt_id {prompt_id!r}") from None

    def component_means(self, cond: Condition) -> np.ndarray:
        """Component means of the data mixture selected by ``cond`` (context applied)."""
        return self.mixture(cond.prompt_id).shifted_means(self._context(cond))

    def _context(self, cond: Condition) -> np.ndarray | None:
        if cond.context is None:
            return None
        if cond.context.shape != (self.latent_dim,):
            raise ModelError(f"context must have shape ({self.latent_dim},), got {cond.context.shape}")
        return cond.context

    def _terms(self, z2: np.ndarray, t: float, cond: Condition, sched: PathScheduler) -> _Terms:
        if not 0.0 <= t <= 1.0:
            raise ModelError(f"t={t} outside [0, 1]")
        mix = self.mixture(cond.prompt_id)
        means = mix.shifted_means(self._context(cond))
        alpha, sigma = sched.alpha(t), sched.sigma(t)
        d = self.latent_dim
        C = alpha**2 * mix.covs + sigma**2 * np.eye(d)[None]
        cinv = np.linalg.inv(C)
        _, logdet = np.linalg.slogdet(C)
        delta = z2[:, None, :] - alpha * means[None]
        sol = np.einsum("kij,nkj->nki", cinv, delta)
        quad = np.einsum("nki,nki->nk", delta, sol)
        logp = np.log(mix.weights)[None] - 0.5 * (d * _LOG_2PI + logdet[None] + quad)
        resp = np.exp(logp - logsumexp(logp, axis=1, keepdims=True))
        return _Terms(alpha, sigma, means, mix.covs, cinv, sol, logp, resp)

    def _component_velocity(self, terms: _Terms, t: float, sched: PathScheduler) -> np.ndarray:
        # sigma' E[eps|z] = sigma sigma' C^-1 delta; stays finite where sigma' does not
        z0 = terms.means[None] + terms.alpha * np.einsum("kij,nkj->nki", terms.covs, terms.sol)
        return sched.alpha_dot(t) * z0 + sched.sigma_sigma_dot(t) * terms.sol

    # -------------------------------------------------------------- evaluation
    def velocity(self, z, t: float, cond: Condition, scheduler: PathScheduler | None = None) -> np.ndarray:
        """Exact marginal velocity ``E[alpha' z_0 + sigma' eps | z_t = z]``."""
        sched = scheduler or _RF
        z2, single = _as_batch(z, self.latent_dim)
        terms = self._terms(z2, t, cond, sched)
        v = np.einsum("nk,nki->ni", terms.resp, self._component_velocity(terms, t, sched))
        return v[0] if single else v

    def score(self, z, t: float, cond: Condition, scheduler: PathScheduler | None = None) -> np.ndarray:
        """``grad_z log p_t(z)`` of the time-``t`` marginal."""
        sched = scheduler or _RF
        z2, single = _as_batch(z, self.latent_dim)
        terms = self._terms(z2, t, cond, sched)
        s = -np.einsum("nk,nki->ni", terms.resp, terms.sol)
        return s[0] if single else s

    def posterior_mean_z0(self, z, t: float, cond: Condition, scheduler: PathScheduler | None = None) -> np.ndarray:
        sched = scheduler or _RF
        z2, single = _as_batch(z, self.latent_dim)
        terms = self._terms(z2, t, cond, sched)
        z0 = terms.means[None] + terms.alpha * np.einsum("kij,nkj->nki", terms.covs, terms.sol)
        m = np.einsum("nk,nki->ni", terms.resp, z0)
        return m[0] if single else m

    def velocity_jacobian(self, z, t: float, cond: Condition, scheduler: PathScheduler | None = None) -> np.ndarray:
        """``d velocity / d z`` as a ``(d, d)`` matrix (or ``(n, d, d)``)."""
        sched = scheduler or _RF
        z2, single = _as_batch(z, self.latent_dim)
        terms = self._terms(z2, t, cond, sched)
        vk = self._component_velocity(terms, t, sched)
        # d u_k / dz for the affine per-component velocity
        A = (
            sched.alpha_dot(t) * terms.alpha * np.einsum("kij,kjl->kil", terms.covs, terms.cinv)
            + sched.sigma_sigma_dot(t) * terms.cinv
        )
        sk = -terms.sol
        sbar = np.einsum("nk,nki->ni", terms.resp, sk)
        J = np.einsum("nk,kij->nij", terms.resp, A) + np.einsum(
            "nk,nki,nkj->nij", terms.resp, vk, sk - sbar[:, None, :]
        )
        return J[0] if single else J

    def responsibilities(self, z, t: float, cond: Condition, scheduler: PathScheduler | None = None) -> np.ndarray:
        sched = scheduler or _RF
        z2, single = _as_batch(z, self.latent_dim)
        r = self._terms(z2, t, cond, sched).resp
        return r[0] if single else r

    def concept_distribution(
        self,
        z,
        t: float,
        cond: Condition,
        concepts: ConceptSet,
        scheduler: PathScheduler | None = None,
    ) -> np.ndarray:
        """Per-pixel categorical over ``concepts.all``, shape ``(pixel_dim, n_concepts)``.

        Component responsibilities under the time-``t`` marginal are summed by
        the concept label each component carries on a token, renormalised over
        the requested concepts, and broadcast to the pixels of that token.  A
        token on which no component carries a requested concept gets the
        uniform distribution.
        """
        unknown = set(concepts.all) - self.concept_vocabulary
        if unknown:
            raise ModelError(f"concepts unknown to the model: {sorted(unknown)}")
        sched = scheduler or _RF
        z2, single = _as_batch(z, self.latent_dim)
        terms = self._terms(z2, t, cond, sched)
        labels = self.mixture(cond.prompt_id).labels
        names = concepts.all
        n, n_tok, n_c = z2.shape[0], self.n_tokens, len(names)
        logmass = np.full((n, n_tok, n_c), -np.inf)
        for j in range(n_tok):
            for c, name in enumerate(names):
                hit = labels[:, j] == name
                if hit.any():
                    logmass[:, j, c] = logsumexp(terms.logp[:, hit], axis=1)
        norm = logsumexp(logmass, axis=2, keepdims=True)
        with np.errstate(invalid="ignore"):
            dist = np.exp(logmass - norm)
        empty = ~np.isfinite(norm[..., 0])
        dist[empty] = 1.0 / n_c
        out = dist[:, self.pixel_tokens, :]
        return out[0] if single else out

    # ---------------------------------------------------------------- decoder
    def decode(self, z) -> np.ndarray:
        return np.asarray(z, dtype=float) @ self.decoder.T

    def decode_vjp(self, z, cotangent) -> np.ndarray:
        """``D^T cotangent``; ``z`` is accepted for interface symmetry (linear decoder)."""
        cot = np.asarray(cotangent, dtype=float)
        if cot.shape[-1] != self.pixel_dim:
            raise ModelError(f"cotangent must have {self.pixel_dim} entries")
        return cot @ self.decoder

    # --------------------------------------------------------------- sampling
    def sample_data(self, cond: Condition, n: int, rng: np.random.Generator) -> np.ndarray:
        """Exact draws from the data mixture (``t = 0``) selected by ``cond``."""
        mix = self.mixture(cond.prompt_id)
        means = mix.shifted_means(self._context(cond))
        ks = rng.choice(mix.n_components, size=n, p=mix.weights)
        chol = np.linalg.cholesky(mix.covs)
        eps = rng.standard_normal((n, self.latent_dim))
        return means[ks] + np.einsum("nij,nj->ni", chol[ks], eps)

    # ------------------------------------------------------------- (de)serialise
    def to_dict(self) -> dict:
        prompts = {
            pid: {"components": [c.to_dict() for c in mix.components()]}
            for pid, mix in self.prompts.items()
            if not (pid == NULL_PROMPT and self._null_is_derived)
        }
        out = {
            "format": MODEL_FORMAT,
            "version": MODEL_VERSION,
            "latent_dim": self.latent_dim,
            "tokens": [list(tok) for tok in self.tokens],
            "decoder": self.decoder.tolist(),
            "pixel_tokens": self.pixel_tokens.tolist(),
            "prompts": prompts,
        }
        return out

    @classmethod
    def from_dict(cls, data: dict) -> DomainMixtureModel:
        if data.get("format", MODEL_FORMAT) != MODEL_FORMAT:
            raise ModelError(f"not a mixture model file (format={data.get('format')!r})")
        if data.get("version", MODEL_VERSION) != MODEL_VERSION:
            raise ModelError(f"unsupported model version {data.get('version')}")
        d = int(data["latent_dim"])
        tokens = data.get("tokens")
        n_tok = len(tokens) if tokens else 1
        prompts = {}
        for pid, spec in data["prompts"].items():
            comps = []
            for k, c in enumerate(spec["components"]):
                labels = c["concepts"]
                labels = (labels,) * n_tok if isinstance(labels, str) else tuple(labels)
                cw = np.broadcast_to(np.asarray(c.get("context_weight", 0.0), dtype=float), (d,)).copy()
                comps.append(
                    Component(
                        weight=float(c["weight"]),
                        mean=np.asarray(c["mean"], dtype=float),
                        cov=np.asarray(c["cov"], dtype=float),
                        concepts=labels,
                        context_weight=cw,
                    )
                )
            try:
                prompts[pid] = Mixture.from_components(comps)
            except ValueError as exc:
                raise ModelError(f"prompt {pid!r}: inconsistent component shapes ({exc})") from exc
        return cls(
            latent_dim=d,
            prompts=prompts,
            decoder=data.get("decoder"),
            tokens=tokens,
            pixel_tokens=data.get("pixel_tokens"),
        )

    @classmethod
    def from_components(
        cls,
        prompts: dict[str, list[dict]],
        latent_dim: int,
        **kwargs,
    ) -> DomainMixtureModel:
        """Build from ``{prompt_id: [component dicts]}`` in the file schema."""
        data = {"latent_dim": latent_dim, "prompts": {p: {"components": c} for p, c in prompts.items()}}
        data.update({k: v for k, v in kwargs.items() if v is not None})
        return cls.from_dict(data)


def save_model(model: DomainMixtureModel, path) -> None:
    Path(path).write_text(json.dumps(model.to_dict(), indent=1) + "\n")


def load_model(path) -> DomainMixtureModel:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ModelError(f"{path}: line {exc.lineno}: {exc.msg}") from exc
    return DomainMixtureModel.from_dict(data)


class ConstantVelocityModel:
    """Returns the same velocity everywhere; zero Jacobian, identity decoder.

    Useful as a degenerate model in tests (``value = 0`` is the zero-velocity
    model).  The concept distribution is the fixed per-pixel table
    ``concept_table`` (uniform when not given).
    """

    def __init__(self, value, concept_table=None):
        self.value = np.asarray(value, dtype=float)
        self.latent_dim = self.pixel_dim = self.value.size
        self.concept_table = None if concept_table is None else np.asarray(concept_table, dtype=float)

    def velocity(self, z, t, cond, scheduler=None):
        z = np.asarray(z, dtype=float)
        return np.broadcast_to(self.value, z.shape).copy()

    def velocity_jacobian(self, z, t, cond, scheduler=None):
        z = np.asarray(z, dtype=float)
        return np.zeros(z.shape + (self.latent_dim,))

    def concept_distribution(self, z, t, cond, concepts):
        if self.concept_table is not None:
            return self.concept_table.copy()
        n_c = len(concepts.all)
        return np.full((self.pixel_dim, n_c), 1.0 / n_c)

    def decode(self, z):
        return np.asarray(z, dtype=float).copy()

    def decode_vjp(self, z, cotangent):
        return np.asarray(cotangent, dtype=float).copy()
