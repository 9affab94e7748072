"""Video records, their binary file format, the synthetic workflow generator
and annotation-regime assignment."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, DataError, FormatError, LabelError
from .ontology import Ontology, load_ontology, validate_ontology

VIDEO_MAGIC = b"HWTS"
VIDEO_VERSION = 1
_HEADER = struct.Struct("<4sHBBII")

FLAG_STEPS = 1
FLAG_PHASES = 2
FLAG_DELTA = 4

REGIMES = ("full", "phase_only", "unlabeled")
SPLITS = ("train", "val", "test")


@dataclass(eq=False)
class VideoRecord:
    video_id: str
    obs: np.ndarray
    step_labels: Optional[np.ndarray] = None
    phase_labels: Optional[np.ndarray] = None
    delta_step: bool = False

    def __post_init__(self):
        self.obs = np.asarray(self.obs, dtype=np.float64)
        if self.obs.ndim != 2:
            raise DataError(f"{self.video_id}: observations must be (T, obs_dim)")
        for name in ("step_labels", "phase_labels"):
            lab = getattr(self, name)
            if lab is not None:
                lab = np.asarray(lab, dtype=np.int64)
                if lab.shape != (self.T,):
                    raise DataError(f"{self.video_id}: {name} has shape {lab.shape}, expected ({self.T},)")
                setattr(self, name, lab)
        self.delta_step = bool(self.delta_step)
        if self.delta_step and self.step_labels is None:
            raise DataError(f"{self.video_id}: step-labelled video without step labels")

    @property
    def T(self) -> int:
        return self.obs.shape[0]

    @property
    def regime(self) -> str:
        if self.delta_step:
            return "full"
        if self.phase_labels is not None:
            return "phase_only"
        return "unlabeled"

    def window(self, start: int, stop: int) -> "VideoRecord":
        """Frames ``start:stop`` as a record with the same regime."""
        return VideoRecord(
            self.video_id,
            self.obs[start:stop],
            None if self.step_labels is None else self.step_labels[start:stop],
            None if self.phase_labels is None else self.phase_labels[start:stop],
            self.delta_step,
        )

    def check_labels(self, o: Ontology) -> None:
        for name, n in (("step_labels", o.num_steps), ("phase_labels", o.num_phases)):
            lab = getattr(self, name)
            if lab is not None and lab.size and (lab.min() < 0 or lab.max() >= n):
                raise LabelError(f"{self.video_id}: {name} outside [0, {n})")

    def same_as(self, other: "VideoRecord") -> bool:
        """Field-by-field equality including every observation bit."""

        def eq(a, b):
            if a is None or b is None:
                return a is None and b is None
            return a.shape == b.shape and a.tobytes() == b.tobytes()

        return (self.video_id == other.video_id and self.delta_step == other.delta_step
                and eq(self.obs, other.obs) and eq(self.step_labels, other.step_labels)
                and eq(self.phase_labels, other.phase_labels))


# ---------------------------------------------------------------------------
# binary video file


def encode_video(r: VideoRecord) -> bytes:
    if r.T == 0:
        raise DataError(f"{r.video_id}: refusing to write a zero-length video")
    flags = 0
    if r.step_labels is not None:
        flags |= FLAG_STEPS
    if r.phase_labels is not None:
        flags |= FLAG_PHASES
    if r.delta_step:
        flags |= FLAG_DELTA
    parts = [_HEADER.pack(VIDEO_MAGIC, VIDEO_VERSION, flags, 0, r.T, r.obs.shape[1]),
             np.ascontiguousarray(r.obs, dtype="<f8").tobytes()]
    for lab in (r.step_labels, r.phase_labels):
        if lab is not None:
            if lab.size and (lab.min() < 0 or lab.max() > 0xFFFF):
                raise LabelError(f"{r.video_id}: label outside u16 range")
            parts.append(lab.astype("<u2").tobytes())
    return b"".join(parts)


def decode_video(buf: bytes, video_id: str) -> VideoRecord:
    if len(buf) < _HEADER.size:
        raise FormatError(f"{video_id}: truncated header")
    magic, version, flags, reserved, T, obs_dim = _HEADER.unpack_from(buf, 0)
    if magic != VIDEO_MAGIC:
        raise FormatError(f"{video_id}: bad magic {magic!r}")
    if version != VIDEO_VERSION:
        raise FormatError(f"{video_id}: unsupported version {version}")
    if reserved != 0 or flags & ~7:
        raise FormatError(f"{video_id}: malformed header")
    n_lab = bool(flags & FLAG_STEPS) + bool(flags & FLAG_PHASES)
    expected = _HEADER.size + 8 * T * obs_dim + 2 * T * n_lab
    if len(buf) != expected:
        raise FormatError(f"{video_id}: payload is {len(buf)} bytes, expected {expected}")
    off = _HEADER.size
    obs = np.frombuffer(buf, dtype="<f8", count=T * obs_dim, offset=off).reshape(T, obs_dim)
    off += 8 * T * obs_dim
    labels = []
    for bit in (FLAG_STEPS, FLAG_PHASES):
        if flags & bit:
            labels.append(np.frombuffer(buf, dtype="<u2", count=T, offset=off).astype(np.int64))
            off += 2 * T
        else:
            labels.append(None)
    return VideoRecord(video_id, obs.astype(np.float64), labels[0], labels[1], bool(flags & FLAG_DELTA))


def write_video_file(r: VideoRecord, path) -> None:
    Path(path).write_bytes(encode_video(r))


def read_video_file(path, video_id: Optional[str] = None) -> VideoRecord:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read video {path}: {exc}") from None
    return decode_video(buf, video_id or path.stem)


# ---------------------------------------------------------------------------
# synthetic generator


@dataclass(frozen=True)
class GeneratorConfig:
    ontology: Ontology
    num_videos: int = 40
    frames_min: int = 200
    frames_max: int = 400
    obs_dim: int = 32
    mean_scale: float = 1.0
    phase_scale: float = 0.5
    noise_sigma: float = 1.0
    confusable_pairs: Tuple[Tuple[int, int], ...] = ()
    confusable_offset: float = 0.25
    phase_skip_prob: float = 0.0
    mean_duration: float = 12.0
    min_duration: int = 3
    seed: int = 0

    def validate(self) -> "GeneratorConfig":
        problems = validate_ontology(self.ontology)
        if problems:
            raise ConfigError("invalid ontology: " + "; ".join(problems))
        if self.num_videos < 1 or self.obs_dim < 1:
            raise ConfigError("num_videos and obs_dim must be >= 1")
        if not 1 <= self.frames_min <= self.frames_max:
            raise ConfigError("need 1 <= frames_min <= frames_max")
        if not self.noise_sigma > 0:
            raise ConfigError("noise_sigma must be > 0")
        if not 0.0 <= self.phase_skip_prob < 1.0:
            raise ConfigError("phase_skip_prob must lie in [0, 1)")
        if self.min_duration < 1 or self.mean_duration < self.min_duration:
            raise ConfigError("need 1 <= min_duration <= mean_duration")
        S = self.ontology.num_steps
        for a, b in self.confusable_pairs:
            if a == b or not (0 <= a < S and 0 <= b < S):
                raise ConfigError(f"confusable pair ({a}, {b}) must name two distinct steps")
        m = self.ontology.matrix
        first_phase = m.argmax(axis=1)
        for j in range(self.ontology.num_phases):
            members = np.flatnonzero(m[:, j])
            if not (m[members].sum(axis=1) == 1).any():
                # only reachable as the opening phase, where the first-frame fallback resolves it
                if j != 0 or (first_phase[members] != 0).any():
                    raise ConfigError(f"phase {j} has no single-phase step to open or close it")
        if self.frames_min < 2 * self.min_duration * self.ontology.num_phases:
            raise ConfigError("frames_min too small to fit every phase")
        return self

    def to_json(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "ontology"}
        d["confusable_pairs"] = [list(p) for p in self.confusable_pairs]
        d["ontology"] = self.ontology.to_json()
        return d


# cross-phase look-alikes first, then two same-phase pairs (step indices of the cataract table)
DEFAULT_CONFUSABLE_PAIRS = ((5, 8), (6, 10), (1, 16), (2, 11), (15, 18), (13, 14), (7, 9))


def default_generator_config(seed: int = 0, ontology: Optional[Ontology] = None) -> GeneratorConfig:
    """Desk-scale synthetic workflow: 40 videos of 200-400 frames."""
    if ontology is None:
        ontology = load_ontology("builtin:cataracts-local-idle")
    return GeneratorConfig(ontology, num_videos=40, confusable_pairs=DEFAULT_CONFUSABLE_PAIRS,
                           confusable_offset=0.5, seed=seed)


def generator_config_from_json(doc: dict) -> GeneratorConfig:
    """Generator config from JSON; missing keys take the desk-scale defaults."""
    doc = dict(doc)
    ref = doc.pop("ontology", "builtin:cataracts-local-idle")
    if isinstance(ref, dict):
        from .ontology import ontology_from_json
        o = ontology_from_json(ref)
    else:
        o = load_ontology(ref)
    for key in ("splits", "annotation"):
        doc.pop(key, None)
    unknown = set(doc) - set(GeneratorConfig.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"unknown generator keys: {sorted(unknown)}")
    if "confusable_pairs" in doc:
        doc["confusable_pairs"] = tuple(tuple(int(v) for v in p) for p in doc["confusable_pairs"])
    try:
        return replace(default_generator_config(ontology=o), **doc).validate()
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def class_means(cfg: GeneratorConfig) -> Tuple[np.ndarray, np.ndarray]:
    """Per-step and per-phase observation means used by the generator."""
    rng = np.random.default_rng([cfg.seed, 0xC1A55])
    S, P = cfg.ontology.num_steps, cfg.ontology.num_phases
    step_means = rng.normal(0.0, cfg.mean_scale, size=(S, cfg.obs_dim))
    phase_means = rng.normal(0.0, cfg.phase_scale, size=(P, cfg.obs_dim))
    for a, b in cfg.confusable_pairs:
        u = rng.normal(size=cfg.obs_dim)
        step_means[b] = step_means[a] + cfg.confusable_offset * u / np.linalg.norm(u)
    return step_means, phase_means


def _duration(rng, cfg: GeneratorConfig) -> int:
    return max(cfg.min_duration, int(rng.geometric(1.0 / cfg.mean_duration)))


def _phase_segments(rng, cfg: GeneratorConfig, phase: int, budget: int) -> List[Tuple[int, int]]:
    m = cfg.ontology.matrix
    allowed = np.flatnonzero(m[:, phase])
    single = allowed[m[allowed].sum(axis=1) == 1]
    if single.size == 0:
        return [(int(allowed[0]), budget)]

    def pick(pool, prev):
        pool = pool[pool != prev] if (pool != prev).any() else pool
        return int(pool[rng.integers(pool.size)])

    segs: List[Tuple[int, int]] = []
    remaining = budget
    prev = -1
    while True:
        d = _duration(rng, cfg)
        if remaining - d < cfg.min_duration:
            # closing segment must be a single-phase step
            segs.append((pick(single, prev), remaining))
            return segs
        s = pick(single if not segs else allowed, prev)
        segs.append((s, d))
        remaining -= d
        prev = s


def _generate_one(cfg: GeneratorConfig, index: int, step_means, phase_means) -> VideoRecord:
    rng = np.random.default_rng([cfg.seed, index])
    P = cfg.ontology.num_phases
    T = int(rng.integers(cfg.frames_min, cfg.frames_max + 1))
    kept = [j for j in range(P) if j in (0, P - 1) or rng.random() >= cfg.phase_skip_prob]
    share = rng.uniform(0.5, 1.5, size=len(kept))
    floor = 2 * cfg.min_duration
    budgets = floor + np.floor((T - floor * len(kept)) * share / share.sum()).astype(int)
    budgets[-1] += T - budgets.sum()

    steps = np.empty(T, dtype=np.int64)
    phases = np.empty(T, dtype=np.int64)
    t = 0
    for phase, budget in zip(kept, budgets):
        for s, d in _phase_segments(rng, cfg, phase, int(budget)):
            steps[t:t + d] = s
            phases[t:t + d] = phase
            t += d
    assert t == T
    obs = step_means[steps] + phase_means[phases] + rng.normal(0.0, cfg.noise_sigma, size=(T, cfg.obs_dim))
    return VideoRecord(f"video{index:03d}", obs, steps, phases, delta_step=True)


def generate_synthetic_dataset(cfg: GeneratorConfig) -> List[VideoRecord]:
    """Fully labelled synthetic videos; deterministic per ``cfg.seed``."""
    cfg.validate()
    step_means, phase_means = class_means(cfg)
    return [_generate_one(cfg, i, step_means, phase_means) for i in range(cfg.num_videos)]


# ---------------------------------------------------------------------------
# annotation regimes


def assign_annotation_regime(videos: Sequence[VideoRecord], k_step: int, m_phase: int, seed: int,
                             ontology: Optional[Ontology] = None) -> List[VideoRecord]:
    """Keep step labels on ``k_step`` videos, phase labels only on the next
    ``m_phase`` of a seeded shuffle, and strip the rest. Input order is kept."""
    n = len(videos)
    if k_step < 0 or m_phase < 0 or k_step + m_phase > n:
        raise ConfigError(f"k_step={k_step} + m_phase={m_phase} exceeds {n} videos")
    order = np.random.default_rng(seed).permutation(n)
    regime = {}
    for rank, i in enumerate(order):
        regime[int(i)] = "full" if rank < k_step else ("phase_only" if rank < k_step + m_phase else "unlabeled")
    out = []
    for i, r in enumerate(videos):
        out.append(apply_regime(r, regime[i], ontology))
    return out


def apply_regime(r: VideoRecord, regime: str, ontology: Optional[Ontology] = None) -> VideoRecord:
    if regime == "full":
        if r.step_labels is None:
            raise DataError(f"{r.video_id}: no step labels for the full regime")
        return replace(r, phase_labels=None, delta_step=True)
    if regime == "phase_only":
        phases = r.phase_labels
        if phases is None:
            if r.step_labels is None or ontology is None:
                raise DataError(f"{r.video_id}: no phase labels for the phase_only regime")
            from .ontology import derive_phase_labels
            phases = derive_phase_labels(ontology, r.step_labels)
        return replace(r, step_labels=None, phase_labels=phases, delta_step=False)
    if regime == "unlabeled":
        return replace(r, step_labels=None, phase_labels=None, delta_step=False)
    raise ConfigError(f"unknown regime {regime!r}")


# ---------------------------------------------------------------------------
# manifest


@dataclass
class DatasetManifest:
    ontology_ref: str
    videos: List[Dict[str, str]] = field(default_factory=list)  # path, split, regime

    def validate(self, root: Optional[Path] = None) -> None:
        ids: Dict[str, str] = {}
        for v in self.videos:
            if v.get("split") not in SPLITS:
                raise DataError(f"bad split {v.get('split')!r}")
            if v.get("regime", "full") not in REGIMES:
                raise DataError(f"bad regime {v.get('regime')!r}")
            vid = Path(v["path"]).stem
            if vid in ids and ids[vid] != v["split"]:
                raise DataError(f"video {vid} appears in splits {ids[vid]} and {v['split']}")
            ids[vid] = v["split"]
            if root is not None and not (root / v["path"]).exists():
                raise DataError(f"missing video file {v['path']}")

    def to_json(self) -> dict:
        return {"ontology": self.ontology_ref, "videos": self.videos}


def save_manifest(m: DatasetManifest, path) -> None:
    Path(path).write_text(json.dumps(m.to_json(), indent=1) + "\n")


def load_manifest(path, apply_regimes: bool = True) -> Tuple[DatasetManifest, Ontology, Dict[str, List[VideoRecord]]]:
    """Read a manifest and every video it lists, applying the stated regimes
    to the training split unless ``apply_regimes`` is false. Returns the
    manifest, the ontology and records per split."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
        m = DatasetManifest(doc["ontology"], list(doc["videos"]))
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from None
    m.validate(path.parent)
    ref = m.ontology_ref
    if not ref.startswith("builtin:"):
        ref = path.parent / ref
    o = load_ontology(ref)
    splits: Dict[str, List[VideoRecord]] = {s: [] for s in SPLITS}
    for v in m.videos:
        r = read_video_file(path.parent / v["path"])
        r.check_labels(o)
        if v["split"] == "train" and apply_regimes:
            r = apply_regime(r, v.get("regime", "full"), o)
        splits[v["split"]].append(r)
    return m, o, splits


def write_dataset(videos: Sequence[VideoRecord], out_dir, splits: Dict[str, int],
                  ontology_ref: str = "builtin:cataracts",
                  regimes: Optional[Dict[str, str]] = None) -> DatasetManifest:
    """Write videos in order, the first ``splits['train']`` to train and so on.

    ``regimes`` maps training video ids to their annotation regime (default full).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    need = sum(splits.get(s, 0) for s in SPLITS)
    if need > len(videos):
        raise ConfigError(f"splits need {need} videos, only {len(videos)} generated")
    entries = []
    i = 0
    for split in SPLITS:
        for _ in range(splits.get(split, 0)):
            r = videos[i]
            name = f"{r.video_id}.hwts"
            write_video_file(r, out_dir / name)
            regime = (regimes or {}).get(r.video_id, "full") if split == "train" else "full"
            entries.append({"path": name, "split": split, "regime": regime})
            i += 1
    manifest = DatasetManifest(ontology_ref, entries)
    save_manifest(manifest, out_dir / "manifest.json")
    return manifest
