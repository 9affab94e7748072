"""Frame encoder + single-stage causal TCN and the online feature buffer."""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DimensionError, SequencingError


@dataclass(frozen=True)
class ModelConfig:
    obs_dim: int = 32
    feat_dim: int = 64
    encoder_hidden: int = 64
    tcn_filters: int = 32
    tcn_layers: int = 8
    kernel_size: int = 3
    num_steps: int = 19

    def validate(self) -> "ModelConfig":
        for name, value in asdict(self).items():
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if self.tcn_layers > 16:
            raise ConfigError("tcn_layers must be <= 16")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d).validate()


def gradcheck_config(obs_dim: int = 8, num_steps: int = 19) -> ModelConfig:
    """Small configuration used for whole-model gradient checks."""
    return ModelConfig(obs_dim=obs_dim, feat_dim=12, encoder_hidden=12, tcn_filters=16,
                       tcn_layers=4, kernel_size=3, num_steps=num_steps)


def receptive_field(cfg: ModelConfig) -> int:
    return 1 + (cfg.kernel_size - 1) * (2 ** cfg.tcn_layers - 1)


def parameter_shapes(cfg: ModelConfig) -> Dict[str, tuple]:
    """Parameter names and shapes in checkpoint order."""
    F = cfg.tcn_filters
    shapes = {
        "enc.w1": (cfg.encoder_hidden, cfg.obs_dim),
        "enc.b1": (cfg.encoder_hidden,),
        "enc.w2": (cfg.feat_dim, cfg.encoder_hidden),
        "enc.b2": (cfg.feat_dim,),
        "tcn.in.w": (F, cfg.feat_dim),
        "tcn.in.b": (F,),
    }
    for l in range(cfg.tcn_layers):
        shapes[f"tcn.l{l}.conv.w"] = (F, F, cfg.kernel_size)
        shapes[f"tcn.l{l}.conv.b"] = (F,)
        shapes[f"tcn.l{l}.pw.w"] = (F, F)
        shapes[f"tcn.l{l}.pw.b"] = (F,)
    shapes["tcn.out.w"] = (cfg.num_steps, F)
    shapes["tcn.out.b"] = (cfg.num_steps,)
    return shapes


def parameter_count(cfg: ModelConfig) -> int:
    """Closed-form parameter count."""
    H, Nf, F, K, S = cfg.encoder_hidden, cfg.feat_dim, cfg.tcn_filters, cfg.kernel_size, cfg.num_steps
    encoder = cfg.obs_dim * H + H + H * Nf + Nf
    projection = Nf * F + F
    per_layer = (F * F * K + F) + (F * F + F)
    head = F * S + S
    return encoder + projection + cfg.tcn_layers * per_layer + head


@dataclass
class ModelState:
    """Parameters plus optimizer moments and step counter."""

    cfg: ModelConfig
    params: Dict[str, ad.Tensor]
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def __post_init__(self):
        for k, p in self.params.items():
            self.m.setdefault(k, np.zeros_like(p.values))
            self.v.setdefault(k, np.zeros_like(p.values))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def adam_step(self, lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
                  weight_decay: float = 0.0) -> None:
        self.step = ad.adam_step(self.params, self.m, self.v, self.step, lr, betas, eps, weight_decay)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, p in self.params.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.values, dtype="<f8").tobytes())
        return h.hexdigest()

    def copy(self) -> "ModelState":
        return ModelState(
            self.cfg,
            {k: ad.parameter(p.values) for k, p in self.params.items()},
            {k: a.copy() for k, a in self.m.items()},
            {k: a.copy() for k, a in self.v.items()},
            self.step,
        )

    def num_parameters(self) -> int:
        return sum(p.values.size for p in self.params.values())


def init_model(cfg: ModelConfig, seed: int) -> ModelState:
    """Uniform fan-in initialisation, U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    params = {}
    fan_in = None
    for name, shape in parameter_shapes(cfg).items():
        if name.endswith(".w") or name.endswith("w1") or name.endswith("w2"):
            fan_in = int(np.prod(shape[1:]))
        bound = 1.0 / np.sqrt(fan_in)
        params[name] = ad.parameter(rng.uniform(-bound, bound, size=shape))
    return ModelState(cfg, params)


def encode_frames(state: ModelState, obs: ad.Tensor) -> ad.Tensor:
    p = state.params
    if obs.values.ndim != 2 or obs.values.shape[1] != state.cfg.obs_dim:
        raise DimensionError(f"expected (B, {state.cfg.obs_dim}) observations, got {obs.values.shape}")
    h = ad.relu(ad.pointwise_linear(obs, p["enc.w1"], p["enc.b1"]))
    return ad.pointwise_linear(h, p["enc.w2"], p["enc.b2"])


def tcn_forward(state: ModelState, feats: ad.Tensor) -> ad.Tensor:
    """Per-frame step logits; frame t depends on frames <= t only."""
    cfg, p = state.cfg, state.params
    if feats.values.ndim != 2 or feats.values.shape[1] != cfg.feat_dim:
        raise DimensionError(f"expected (T, {cfg.feat_dim}) features, got {feats.values.shape}")
    x = ad.pointwise_linear(feats, p["tcn.in.w"], p["tcn.in.b"])
    for l in range(cfg.tcn_layers):
        h = ad.conv1d_causal(x, p[f"tcn.l{l}.conv.w"], p[f"tcn.l{l}.conv.b"], dilation=2 ** l)
        h = ad.pointwise_linear(ad.relu(h), p[f"tcn.l{l}.pw.w"], p[f"tcn.l{l}.pw.b"])
        x = ad.residual_add(x, h)
    return ad.pointwise_linear(x, p["tcn.out.w"], p["tcn.out.b"])


def forward_offline(state: ModelState, obs) -> ad.Tensor:
    """Whole-video forward pass (encoder then TCN)."""
    obs = obs if isinstance(obs, ad.Tensor) else ad.constant(obs)
    return tcn_forward(state, encode_frames(state, obs))


class FeatureBuffer:
    """Value snapshots of encoder outputs for the frames of one video seen so far."""

    def __init__(self, video_id: Optional[str] = None, num_frames: Optional[int] = None):
        self.video_id = video_id
        self.num_frames = num_frames
        self.stored: List[np.ndarray] = []

    def __len__(self) -> int:
        return sum(len(a) for a in self.stored)

    def reset(self, video_id: Optional[str] = None, num_frames: Optional[int] = None) -> None:
        self.stored = []
        self.video_id = video_id
        self.num_frames = num_frames

    def past(self, feat_dim: int) -> np.ndarray:
        if not self.stored:
            return np.zeros((0, feat_dim))
        return np.concatenate(self.stored, axis=0)

    def append(self, feats: np.ndarray) -> None:
        if self.num_frames is not None and len(self) + len(feats) > self.num_frames:
            raise SequencingError(
                f"buffer for {self.video_id!r} would exceed its {self.num_frames} frames")
        self.stored.append(np.array(feats, copy=True))


def forward_video_online(state: ModelState, buffer: FeatureBuffer, obs_batch,
                         video_id: Optional[str] = None) -> ad.Tensor:
    """Logits for the next contiguous chunk of the buffer's video.

    The chunk is encoded with gradients; earlier frames enter the TCN as the
    constant feature snapshots held in ``buffer``.
    """
    if video_id is not None and buffer.video_id != video_id:
        raise SequencingError(f"buffer holds {buffer.video_id!r}, got frames of {video_id!r}")
    obs_batch = obs_batch if isinstance(obs_batch, ad.Tensor) else ad.constant(obs_batch)
    cur = encode_frames(state, obs_batch)
    B = cur.values.shape[0]
    past = buffer.past(state.cfg.feat_dim)
    buffer.append(cur.values)
    if len(past):
        feats = ad.concat_rows(ad.constant(past), cur)
    else:
        feats = cur
    logits = tcn_forward(state, feats)
    if len(past):
        logits = ad.slice_rows(logits, len(past))
    assert logits.values.shape[0] == B
    return logits
