"""Small analytic models used by the verification suite, tests and example configs."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .flowmodel import ConceptSet, Condition, DomainMixtureModel
from .metrics import preserved_pixels

__all__ = [
    "EditScenario",
    "gaussian_model",
    "symmetric_pair_model",
    "three_component_mixture",
    "two_domain_scenario",
]


def gaussian_model(mean, cov=None, prompt_id: str = "p", concept: str = "all") -> DomainMixtureModel:
    mean = np.asarray(mean, dtype=float)
    cov = np.eye(mean.size) if cov is None else np.asarray(cov, dtype=float)
    comp = {"weight": 1.0, "mean": mean.tolist(), "cov": cov.tolist(), "concepts": concept}
    return DomainMixtureModel.from_components({prompt_id: [comp]}, mean.size)


def three_component_mixture(prompt_id: str = "p") -> DomainMixtureModel:
    """Fixed, well-conditioned 3-component mixture in 2D with correlated covariances."""
    comps = [
        {"weight": 0.3, "mean": [-1.5, 0.5], "cov": [[0.40, 0.15], [0.15, 0.30]], "concepts": "a"},
        {"weight": 0.5, "mean": [1.2, 1.0], "cov": [[0.25, -0.10], [-0.10, 0.50]], "concepts": "b"},
        {"weight": 0.2, "mean": [0.3, -1.4], "cov": [[0.60, 0.00], [0.00, 0.20]], "concepts": "c"},
    ]
    return DomainMixtureModel.from_components({prompt_id: comps}, 2)


def symmetric_pair_model(separation: float = 3.0, var: float = 0.2) -> DomainMixtureModel:
    """Two equal-weight isotropic components at ``(+-separation, 0)`` labelled ``A`` and ``B``."""
    cov = (var * np.eye(2)).tolist()
    comps = [
        {"weight": 0.5, "mean": [-separation, 0.0], "cov": cov, "concepts": "A"},
        {"weight": 0.5, "mean": [separation, 0.0], "cov": cov, "concepts": "B"},
    ]
    return DomainMixtureModel.from_components({"p": comps}, 2)


@dataclass(frozen=True)
class EditScenario:
    model: DomainMixtureModel
    cond_src: Condition
    cond_tar: Condition
    concepts: ConceptSet
    context: np.ndarray

    def sample_source(self, rng: np.random.Generator) -> np.ndarray:
        return self.model.sample_data(self.cond_src, 1, rng)[0]

    @property
    def preserved_pixels(self) -> np.ndarray:
        """Pixels whose token carries only preserved concepts in the source domain."""
        return preserved_pixels(self.model, self.cond_src.prompt_id, self.concepts)


def two_domain_scenario() -> EditScenario:
    """Four-dimensional "scene": two background coordinates and two subject coordinates.

    The source prompt places a ``dog`` subject over one of two backgrounds
    (``grass`` / ``sky``); the target prompt places a ``cat``.  Background and
    subject are correlated within each scene and the correlation differs
    between the domains, so an unguided edit also perturbs the background.
    Target components follow the context vector on the subject coordinates.
    """
    bg = {"grass": [1.0, -0.5], "sky": [-1.0, 0.8]}
    subj_src, subj_tar = [-1.5, -1.0], [1.5, 1.0]

    def cov(rho: float) -> list:
        c = 0.25 * np.eye(4)
        c[0, 2] = c[2, 0] = c[1, 3] = c[3, 1] = rho * 0.25
        return c.tolist()

    src, tar = [], []
    for name, b in bg.items():
        src.append({"weight": 0.5, "mean": b + subj_src, "cov": cov(0.6), "concepts": [name, "dog"]})
        tar.append({
            "weight": 0.5,
            "mean": b + subj_tar,
            "cov": cov(-0.6),
            "concepts": [name, "cat"],
            "context_weight": [0.0, 0.0, 1.0, 1.0],
        })
    model = DomainMixtureModel.from_components(
        {"src": src, "tar": tar}, 4, tokens=[[0, 1], [2, 3]]
    )
    context = np.array([0.0, 0.0, 2.0, 1.5])
    concepts = ConceptSet(pos=("grass", "sky"), neg=("dog", "cat"))
    return EditScenario(
        model=model,
        cond_src=Condition("src"),
        cond_tar=Condition("tar", context=context),
        concepts=concepts,
        context=context,
    )
