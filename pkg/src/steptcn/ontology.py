"""Step/phase hierarchy as a binary step-to-phase membership matrix."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DimensionError, LabelError


@dataclass(frozen=True, eq=False)
class Ontology:
    step_names: tuple
    phase_names: tuple
    matrix: np.ndarray  # (S, P), 1 iff step i can occur in phase j

    def __post_init__(self):
        m = np.array(self.matrix, dtype=np.int8)
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "step_names", tuple(self.step_names))
        object.__setattr__(self, "phase_names", tuple(self.phase_names))

    def __eq__(self, other) -> bool:
        if not isinstance(other, Ontology):
            return NotImplemented
        return (self.step_names == other.step_names and self.phase_names == other.phase_names
                and np.array_equal(self.matrix, other.matrix))

    def __hash__(self) -> int:
        return hash((self.step_names, self.phase_names, self.matrix.tobytes()))

    @property
    def num_steps(self) -> int:
        return len(self.step_names)

    @property
    def num_phases(self) -> int:
        return len(self.phase_names)

    def steps_of_phase(self, phase) -> List[int]:
        j = self._phase_index(phase)
        return [int(i) for i in np.flatnonzero(self.matrix[:, j])]

    def phases_of_step(self, step) -> List[int]:
        i = step if isinstance(step, (int, np.integer)) else self.step_names.index(step)
        return [int(j) for j in np.flatnonzero(self.matrix[i])]

    def is_ambiguous(self, step: int) -> bool:
        return int(self.matrix[step].sum()) > 1

    def _phase_index(self, phase) -> int:
        if isinstance(phase, (int, np.integer)):
            return int(phase)
        return self.phase_names.index(phase)

    def to_json(self) -> dict:
        pairs = [[int(i), int(j)] for i, j in zip(*np.nonzero(self.matrix))]
        return {"steps": list(self.step_names), "phases": list(self.phase_names), "pairs": pairs}


def validate_ontology(o: Ontology) -> List[str]:
    """Return every invariant violation; an empty list means the ontology is valid."""
    problems = []
    m = np.asarray(o.matrix)
    S, P = len(o.step_names), len(o.phase_names)
    if m.ndim != 2 or m.shape != (S, P):
        problems.append(f"matrix shape {m.shape} does not match {S} steps x {P} phases")
        return problems
    if not np.isin(m, (0, 1)).all():
        problems.append("matrix entries must be 0 or 1")
    if P < 1:
        problems.append("at least one phase required")
    if S < P:
        problems.append(f"fewer steps ({S}) than phases ({P})")
    for r in np.flatnonzero(m.sum(axis=1) == 0):
        problems.append(f"step {r} unmapped")
    for c in np.flatnonzero(m.sum(axis=0) == 0):
        problems.append(f"phase {c} empty")
    return problems


def from_pairs(steps: Sequence[str], phases: Sequence[str], pairs) -> Ontology:
    m = np.zeros((len(steps), len(phases)), dtype=np.int8)
    seen = set()
    for pair in pairs:
        i, j = (int(v) for v in pair)
        if (i, j) in seen:
            raise ConfigError(f"duplicate pair ({i}, {j})")
        if not (0 <= i < len(steps) and 0 <= j < len(phases)):
            raise ConfigError(f"pair ({i}, {j}) out of range")
        seen.add((i, j))
        m[i, j] = 1
    return Ontology(tuple(steps), tuple(phases), m)


def ontology_from_json(doc: dict) -> Ontology:
    try:
        o = from_pairs(doc["steps"], doc["phases"], doc["pairs"])
    except KeyError as exc:
        raise ConfigError(f"ontology document missing key {exc}") from None
    problems = validate_ontology(o)
    if problems:
        raise ConfigError("invalid ontology: " + "; ".join(problems))
    return o


def load_ontology(ref) -> Ontology:
    """Resolve ``"builtin:cataracts"`` or a path to an ontology JSON document."""
    if str(ref) in BUILTINS:
        return BUILTINS[str(ref)]()
    try:
        doc = json.loads(Path(ref).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read ontology {ref}: {exc}") from None
    except ValueError as exc:
        raise ConfigError(f"ontology {ref} is not valid JSON: {exc}") from None
    return ontology_from_json(doc)


def save_ontology(o: Ontology, path) -> None:
    Path(path).write_text(json.dumps(o.to_json(), indent=1))


_CATARACT_PHASES = ("Idle", "Opening", "Phacoemulsification", "Implantation", "Closure")

_CATARACT_TABLE = {
    "Idle": ["Idle"],
    "Opening": ["Idle", "Toric Marking", "Implant Ejection", "Incision", "Viscodilatation",
                "Capsulorhexis", "Hydrodissection"],
    "Phacoemulsification": ["Idle", "Nucleus Breaking", "Phacoemulsification", "Vitrectomy",
                            "Irrigation/Aspiration"],
    "Implantation": ["Idle", "Incision", "Viscodilatation", "Preparing Implant", "Manual Aspiration",
                     "Implantation", "Positioning", "OVD Aspiration"],
    "Closure": ["Idle", "Suturing", "Sealing Control", "Wound Hydration"],
}


def builtin_cataracts_ontology() -> Ontology:
    """19 steps x 5 phases of cataract surgery."""
    steps: List[str] = []
    for phase in _CATARACT_PHASES:
        for s in _CATARACT_TABLE[phase]:
            if s not in steps:
                steps.append(s)
    m = np.zeros((len(steps), len(_CATARACT_PHASES)), dtype=np.int8)
    for j, phase in enumerate(_CATARACT_PHASES):
        for s in _CATARACT_TABLE[phase]:
            m[steps.index(s), j] = 1
    return Ontology(tuple(steps), _CATARACT_PHASES, m)


def local_idle_cataracts_ontology() -> Ontology:
    """Cataract table with Idle confined to the Idle phase.

    Incision and Viscodilatation stay shared between Opening and
    Implantation. A step that belongs to every phase is a zero-loss target
    for the dependency loss, and a model trained from scratch collapses onto
    it; this variant keeps the hierarchy without such a step.
    """
    o = builtin_cataracts_ontology()
    m = o.matrix.copy()
    m[o.step_names.index("Idle"), 1:] = 0
    return Ontology(o.step_names, o.phase_names, m)


BUILTINS = {
    "builtin:cataracts": builtin_cataracts_ontology,
    "builtin:cataracts-local-idle": local_idle_cataracts_ontology,
}


def derive_phase_labels(o: Ontology, steps) -> np.ndarray:
    """Phase per frame by table lookup.

    Steps that belong to several phases take the phase of the preceding
    frame; an ambiguous first frame (or a preceding phase that does not
    contain the step) falls back to the lowest-index containing phase.
    """
    steps = np.asarray(steps, dtype=np.int64)
    if steps.ndim != 1:
        raise DimensionError("step labels must be 1-D")
    if steps.size and (steps.min() < 0 or steps.max() >= o.num_steps):
        raise LabelError(f"step labels must lie in [0, {o.num_steps})")
    m = o.matrix
    first = m.argmax(axis=1)
    ambiguous = m.sum(axis=1) > 1
    out = np.empty_like(steps)
    prev = -1
    for t, s in enumerate(steps):
        if ambiguous[s] and prev >= 0 and m[s, prev]:
            p = prev
        else:
            p = first[s]
        out[t] = p
        prev = p
    return out


def phase_transform(o: Ontology, step_probs: ad.Tensor) -> ad.Tensor:
    """Map per-frame step scores into phase space: ``q[t, j] = sum_i m[i, j] p[t, i]``."""
    if step_probs.values.ndim != 2 or step_probs.values.shape[1] != o.num_steps:
        raise DimensionError(
            f"expected (T, {o.num_steps}) step scores, got {step_probs.values.shape}")
    return ad.matmul_const(step_probs, o.matrix.astype(np.float64))
