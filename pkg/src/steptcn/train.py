"""End-to-end online training with the feature buffer, model selection on
the validation split, and binary checkpoints."""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .data import VideoRecord
from .errors import ConfigError, DataError, FormatError, NumericError
from .losses import ClassWeights, median_frequency_weights, total_loss
from .metrics import VideoMetrics, dataset_metrics, video_metrics
from .model import (FeatureBuffer, ModelConfig, ModelState, forward_offline, forward_video_online,
                    init_model, parameter_shapes)
from .ontology import Ontology, derive_phase_labels

logger = logging.getLogger(__name__)

CKPT_MAGIC = b"HWCK"
CKPT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    lr: float = 1e-3
    weight_decay: float = 5e-4
    batch_frames: int = 64
    seed: int = 0
    selection_metric: str = "f1"

    def validate(self) -> "TrainConfig":
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not self.lr >= 0:
            raise ConfigError("lr must be non-negative")
        if self.batch_frames < 1:
            raise ConfigError("batch_frames must be >= 1")
        if self.selection_metric.lower() not in ("f1", "acc"):
            raise ConfigError("selection_metric must be F1 or ACC")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d).validate()


def compute_class_weights(train: Sequence[VideoRecord], o: Ontology, eps_log: float = 1e-7) -> ClassWeights:
    """Step weights from step-labelled videos; phase weights from every
    training video, deriving phases from steps where only steps are kept."""
    step_counts = np.zeros(o.num_steps)
    phase_counts = np.zeros(o.num_phases)
    for r in train:
        if r.delta_step:
            step_counts += np.bincount(r.step_labels, minlength=o.num_steps)
            phases = r.phase_labels if r.phase_labels is not None else derive_phase_labels(o, r.step_labels)
            phase_counts += np.bincount(phases, minlength=o.num_phases)
        elif r.phase_labels is not None:
            phase_counts += np.bincount(r.phase_labels, minlength=o.num_phases)
    if step_counts.sum() == 0:
        raise DataError("no step-labelled training video")
    return ClassWeights(median_frequency_weights(step_counts), median_frequency_weights(phase_counts), eps_log)


@dataclass
class EpochStats:
    step_loss: Optional[float]
    dep_loss: Optional[float]
    # (video_id, delta_step, loss tag) for every optimizer step
    provenance: List[Tuple[str, bool, str]] = field(default_factory=list)


def _epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def train_epoch(state: ModelState, train: Sequence[VideoRecord], o: Ontology, w: ClassWeights,
                cfg: TrainConfig, epoch: int = 0) -> EpochStats:
    videos = [r for r in train if r.regime != "unlabeled"]
    losses: Dict[str, List[float]] = {"step": [], "dep": []}
    provenance = []
    buffer = FeatureBuffer()
    for i in _epoch_order(len(videos), cfg.seed, epoch):
        r = videos[i]
        buffer.reset(r.video_id, r.T)
        for start in range(0, r.T, cfg.batch_frames):
            chunk = r.window(start, min(start + cfg.batch_frames, r.T))
            logits = forward_video_online(state, buffer, chunk.obs, r.video_id)
            loss = total_loss(logits, chunk, o, w)
            value = loss.item()
            if not np.isfinite(value):
                raise NumericError(f"non-finite loss on {r.video_id} at frame {start}")
            ad.backward(loss)
            state.adam_step(cfg.lr, weight_decay=cfg.weight_decay)
            state.zero_grad()
            losses[loss.tag].append(value)
            provenance.append((r.video_id, r.delta_step, loss.tag))
        buffer.reset()
    mean = {k: (float(np.mean(v)) if v else None) for k, v in losses.items()}
    return EpochStats(mean["step"], mean["dep"], provenance)


def predict(state: ModelState, obs: np.ndarray) -> np.ndarray:
    with ad.no_grad():
        return forward_offline(state, obs).values.argmax(axis=1)


def evaluate(state: ModelState, videos: Sequence[VideoRecord]) -> Dict[str, VideoMetrics]:
    out = {}
    for r in videos:
        if r.step_labels is None:
            raise DataError(f"{r.video_id}: evaluation needs step labels")
        out[r.video_id] = video_metrics(r.step_labels, predict(state, r.obs), state.cfg.num_steps)
    return out


@dataclass
class FitResult:
    state: ModelState
    log: List[dict]
    best_epoch: int
    weights: ClassWeights

    def log_jsonl(self) -> str:
        return "".join(json.dumps(rec, sort_keys=True) + "\n" for rec in self.log)


def fit(train: Sequence[VideoRecord], val: Sequence[VideoRecord], o: Ontology, cfg: TrainConfig,
        model_cfg: ModelConfig, state: Optional[ModelState] = None, start_epoch: int = 0) -> FitResult:
    """Train up to ``cfg.epochs`` epochs and keep the epoch with the best
    validation step metric.

    ``state`` and ``start_epoch`` resume an interrupted run: the shuffle
    order of each epoch depends only on the seed and the epoch index, so the
    parameters after a resumed run match an uninterrupted one bit for bit.
    """
    cfg.validate()
    train = [r for r in train if r.regime != "unlabeled"]
    if not train or not val:
        raise DataError("train and val splits must be non-empty")
    w = compute_class_weights(train, o)
    state = state if state is not None else init_model(model_cfg, cfg.seed)
    key = cfg.selection_metric.lower()
    log = []
    best, best_score, best_epoch = None, -np.inf, -1
    for epoch in range(start_epoch, cfg.epochs):
        stats = train_epoch(state, train, o, w, cfg, epoch)
        val_metrics = dataset_metrics(list(evaluate(state, val).values())).mean
        log.append({"epoch": epoch + 1, "step_loss": stats.step_loss, "dep_loss": stats.dep_loss,
                    "val": val_metrics})
        logger.info("epoch %d step %.4f dep %s val f1 %.4f", epoch + 1,
                    stats.step_loss if stats.step_loss is not None else float("nan"),
                    stats.dep_loss, val_metrics["f1"])
        if val_metrics[key] > best_score:
            best, best_score, best_epoch = state.copy(), val_metrics[key], epoch + 1
    if best is None:
        best = state.copy()
    return FitResult(best, log, best_epoch, w)


def model_gradient_check(cfg: Optional[ModelConfig] = None, o: Optional[Ontology] = None, T: int = 32,
                         seed: int = 0, step: float = 1e-4) -> Dict[str, float]:
    """Finite-difference check of encoder + TCN + total loss on one random
    video, once step-labelled and once phase-only."""
    from .model import gradcheck_config
    from .ontology import builtin_cataracts_ontology

    o = o if o is not None else builtin_cataracts_ontology()
    cfg = (cfg if cfg is not None else gradcheck_config(num_steps=o.num_steps)).validate()
    if cfg.num_steps != o.num_steps:
        raise ConfigError("model and ontology disagree on the number of steps")
    rng = np.random.default_rng(seed)
    state = init_model(cfg, seed)
    obs = rng.normal(size=(T, cfg.obs_dim))
    steps = rng.integers(0, o.num_steps, size=T)
    w = ClassWeights(rng.uniform(0.5, 2.0, o.num_steps), rng.uniform(0.5, 2.0, o.num_phases))
    records = {"full": VideoRecord("gc", obs, steps, None, True),
               "phase_only": VideoRecord("gc", obs, None, derive_phase_labels(o, steps), False)}
    params = list(state.params.values())
    out = {}
    for name, rec in records.items():
        out[name] = ad.grad_check(lambda: total_loss(forward_offline(state, rec.obs), rec, o, w), params, step)
    return out


# ---------------------------------------------------------------------------
# checkpoints


def encode_checkpoint(state: ModelState) -> bytes:
    cfg = json.dumps(asdict(state.cfg), sort_keys=True).encode()
    parts = [CKPT_MAGIC, struct.pack("<HI", CKPT_VERSION, len(cfg)), cfg, struct.pack("<Q", state.step)]
    names = list(parameter_shapes(state.cfg))
    for table in ({k: p.values for k, p in state.params.items()}, state.m, state.v):
        for name in names:
            parts.append(np.ascontiguousarray(table[name], dtype="<f8").tobytes())
    return b"".join(parts)


def decode_checkpoint(buf: bytes) -> ModelState:
    if len(buf) < 10 or buf[:4] != CKPT_MAGIC:
        raise FormatError("not a checkpoint (bad magic)")
    version, n = struct.unpack_from("<HI", buf, 4)
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    off = 10
    try:
        cfg = ModelConfig.from_dict(json.loads(buf[off:off + n].decode()))
    except (ValueError, TypeError, ConfigError) as exc:
        raise FormatError(f"corrupt checkpoint config: {exc}") from None
    off += n
    shapes = parameter_shapes(cfg)
    total = sum(int(np.prod(s)) for s in shapes.values())
    if len(buf) != off + 8 + 3 * 8 * total:
        raise FormatError("checkpoint payload has the wrong length")
    (step,) = struct.unpack_from("<Q", buf, off)
    off += 8
    tables = []
    for _ in range(3):
        table = {}
        for name, shape in shapes.items():
            size = int(np.prod(shape))
            table[name] = np.frombuffer(buf, dtype="<f8", count=size, offset=off).reshape(shape).astype(np.float64)
            off += 8 * size
        tables.append(table)
    params = {k: ad.parameter(v) for k, v in tables[0].items()}
    return ModelState(cfg, params, tables[1], tables[2], int(step))


def save_checkpoint(state: ModelState, path) -> None:
    Path(path).write_bytes(encode_checkpoint(state))


def load_checkpoint(path) -> ModelState:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from None
    return decode_checkpoint(buf)
