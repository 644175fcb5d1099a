"""Toy stand-ins for the image-editing metrics.

* preserved-region RMSE to the source (structure preservation)
* distance of the subject pixels to the nearest context-shifted target mode
  (context fidelity)
* whether the output is nearest to a target-domain mode (instruction following)
"""

from __future__ import annotations

import numpy as np

from .flowmodel import ConceptSet, Condition, DomainMixtureModel

__all__ = ["nearest_is_target", "preserved_pixels", "rmse", "target_mode_distance"]


def preserved_pixels(model: DomainMixtureModel, prompt_id: str, concepts: ConceptSet) -> np.ndarray:
    """Boolean mask of pixels whose token carries only preserved concepts under ``prompt_id``."""
    labels = model.mixture(prompt_id).labels
    keep = np.array([all(lab in concepts.pos for lab in labels[:, j]) for j in range(labels.shape[1])])
    return keep[model.pixel_tokens]


def rmse(a, b, where=None) -> float:
    diff = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    if where is not None:
        diff = diff[where]
    if diff.size == 0:
        return 0.0
    return float(np.sqrt(np.mean(diff**2)))


def target_mode_distance(model: DomainMixtureModel, x, cond_tar: Condition, where=None) -> float:
    """Smallest pixel-space distance from ``x`` to a decoded target component mean."""
    modes = model.decode(model.component_means(cond_tar))
    x = np.asarray(x, dtype=float)
    diff = x[None, :] - modes
    if where is not None:
        diff = diff[:, where]
    return float(np.min(np.linalg.norm(diff, axis=1)))


def nearest_is_target(model: DomainMixtureModel, x, cond_src: Condition, cond_tar: Condition) -> float:
    src = model.decode(model.component_means(cond_src.without_context()))
    tar = model.decode(model.component_means(cond_tar))
    d_src = np.min(np.linalg.norm(src - x, axis=1))
    d_tar = np.min(np.linalg.norm(tar - x, axis=1))
    return float(d_tar < d_src)
