"""Class weighting and the step, dependency and gated total losses."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import DataError, DimensionError, LabelError
from .ontology import Ontology, phase_transform


@dataclass(frozen=True)
class ClassWeights:
    step_weights: np.ndarray
    phase_weights: np.ndarray
    eps_log: float = 1e-7

    def __post_init__(self):
        for name in ("step_weights", "phase_weights"):
            w = np.asarray(getattr(self, name), dtype=np.float64)
            if (w < 0).any() or not (w > 0).any():
                raise DataError(f"{name} must be non-negative with at least one positive entry")
            object.__setattr__(self, name, w)


def median_frequency_weights(label_counts) -> np.ndarray:
    """``median(freq) / freq_c`` over present classes; absent classes get 0."""
    counts = np.asarray(label_counts, dtype=np.float64)
    if (counts < 0).any():
        raise DataError("label counts must be non-negative")
    total = counts.sum()
    if total <= 0:
        raise DataError("cannot weight classes with all-zero counts")
    present = counts > 0
    # the total cancels between median frequency and class frequency
    med = np.median(counts[present])
    w = np.zeros_like(counts)
    w[present] = med / counts[present]
    return w


def step_loss(logits: ad.Tensor, step_labels, w: ClassWeights) -> ad.Tensor:
    probs = ad.softmax_rows(logits)
    loss = ad.weighted_nll_rows(probs, step_labels, w.step_weights, w.eps_log)
    loss.tag = "step"
    return loss


def dependency_loss(logits: ad.Tensor, phase_labels, o: Ontology, w: ClassWeights) -> ad.Tensor:
    """Weighted phase cross-entropy on step probabilities mapped through the ontology."""
    if logits.values.ndim != 2 or logits.values.shape[1] != o.num_steps:
        raise DimensionError(f"logits have {logits.values.shape[-1]} columns, ontology has {o.num_steps} steps")
    q = phase_transform(o, ad.softmax_rows(logits))
    loss = ad.weighted_nll_rows(q, phase_labels, w.phase_weights, w.eps_log)
    loss.tag = "dep"
    return loss


def total_loss(logits: ad.Tensor, record, o: Ontology, w: ClassWeights) -> ad.Tensor:
    """Step loss for step-labelled videos, dependency loss otherwise.

    ``record`` needs ``delta_step``, ``step_labels`` and ``phase_labels``
    attributes aligned with the rows of ``logits``. Only the selected branch
    is evaluated.
    """
    if record.delta_step:
        if record.step_labels is None:
            raise LabelError("step-labelled video without step labels")
        return step_loss(logits, record.step_labels, w)
    if record.phase_labels is None:
        raise LabelError("phase-only video without phase labels")
    return dependency_loss(logits, record.phase_labels, o, w)
