"""Experiment grids (FSA vs DEP, phase-count sweeps), result tables and
prediction ribbons."""

from __future__ import annotations

import csv
import hashlib
import io
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple
from xml.etree import ElementTree as ET

import numpy as np

from .data import (GeneratorConfig, VideoRecord, assign_annotation_regime, generate_synthetic_dataset,
                   generator_config_from_json, load_manifest)
from .errors import ConfigError, DimensionError, NumericError
from .metrics import METRIC_NAMES, DatasetMetrics, dataset_metrics
from .model import ModelConfig
from .ontology import Ontology, derive_phase_labels, load_ontology
from .train import TrainConfig, evaluate, fit

MODES = ("FSA", "DEP")


@dataclass
class Dataset:
    ontology: Ontology
    train: List[VideoRecord]
    val: List[VideoRecord]
    test: List[VideoRecord]
    descriptor: dict = field(default_factory=dict)


def dataset_from_generator(cfg: GeneratorConfig, splits=(24, 6, 10)) -> Dataset:
    n_train, n_val, n_test = splits
    if n_train + n_val + n_test > cfg.num_videos:
        raise ConfigError("splits exceed the number of generated videos")
    vids = generate_synthetic_dataset(cfg)
    return Dataset(cfg.ontology, vids[:n_train], vids[n_train:n_train + n_val],
                   vids[n_train + n_val:n_train + n_val + n_test],
                   {"generator": cfg.to_json(), "splits": list(splits)})


def load_dataset(doc: dict) -> Dataset:
    """``{"manifest": path}`` or ``{"generator": {...}, "splits": [train, val, test]}``."""
    if "manifest" in doc:
        # grids assign their own regimes, so keep every label on disk
        _, o, splits = load_manifest(doc["manifest"], apply_regimes=False)
        return Dataset(o, splits["train"], splits["val"], splits["test"], {"manifest": str(doc["manifest"])})
    if "generator" in doc:
        return dataset_from_generator(generator_config_from_json(doc["generator"]),
                                      tuple(doc.get("splits", (24, 6, 10))))
    raise ConfigError("dataset needs a 'manifest' or 'generator' entry")


@dataclass
class ExperimentSpec:
    dataset: dict
    seeds: Tuple[int, ...] = (0, 1, 2)
    k_values: Tuple[int, ...] = (3, 6, 12, 18)
    m_policy: object = "rest"  # "rest" or an explicit list of phase-video counts
    modes: Tuple[str, ...] = MODES
    train_config: TrainConfig = field(default_factory=TrainConfig)
    model_config: Optional[ModelConfig] = None
    output_dir: Optional[str] = None
    workers: int = 1

    def validate(self) -> "ExperimentSpec":
        for mode in self.modes:
            if mode not in MODES:
                raise ConfigError(f"unknown mode {mode!r}")
        if not self.seeds:
            raise ConfigError("at least one seed required")
        if self.m_policy != "rest" and not isinstance(self.m_policy, (list, tuple)):
            raise ConfigError("m_policy must be 'rest' or a list of counts")
        self.train_config.validate()
        return self

    @classmethod
    def from_json(cls, doc: dict) -> "ExperimentSpec":
        doc = dict(doc)
        tc = TrainConfig.from_dict(doc.pop("train_config", {}))
        mc = doc.pop("model_config", None)
        mc = ModelConfig(**mc) if mc is not None else None
        if "dataset" not in doc:
            raise ConfigError("experiment config needs a dataset")
        m_policy = doc.pop("m_policy", "rest")
        known = {"dataset", "seeds", "k_values", "modes", "output_dir", "workers"}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown experiment keys: {sorted(unknown)}")
        for key in ("seeds", "k_values", "modes"):
            if key in doc:
                doc[key] = tuple(doc[key])
        if isinstance(m_policy, list):
            m_policy = tuple(m_policy)
        return cls(train_config=tc, model_config=mc, m_policy=m_policy, **doc).validate()

    def to_json(self) -> dict:
        return {
            "dataset": self.dataset, "seeds": list(self.seeds), "k_values": list(self.k_values),
            "m_policy": self.m_policy if self.m_policy == "rest" else list(self.m_policy),
            "modes": list(self.modes), "train_config": asdict(self.train_config),
            "model_config": None if self.model_config is None else asdict(self.model_config),
        }


@dataclass
class ResultRow:
    model: str
    k_step: int
    m_phase: int
    seeds: Tuple[int, ...]
    mean: Dict[str, float]
    std: Dict[str, float]
    per_seed: List[DatasetMetrics]
    config_hash: str

    def flat(self) -> dict:
        d = {"model": self.model, "k_step": self.k_step, "m_phase": self.m_phase}
        for k in METRIC_NAMES:
            d[k] = self.mean[k]
            d[f"{k}_std"] = self.std[k]
        d["seeds"] = ";".join(str(s) for s in self.seeds)
        d["config_hash"] = self.config_hash
        return d

    def to_json(self) -> dict:
        d = self.flat()
        d["seeds"] = list(self.seeds)
        d["per_seed"] = [p.to_json() for p in self.per_seed]
        return d


def _config_hash(payload: dict) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


def run_cell(ds: Dataset, mode: str, k: int, m: int, seed: int, tcfg: TrainConfig,
             mcfg: ModelConfig) -> DatasetMetrics:
    """Assign regimes with ``seed``, train, and score the test split."""
    if mode == "FSA" and m != 0:
        raise ConfigError("FSA trains on step-labelled videos only")
    if mode == "DEP" and m < 1:
        raise ConfigError("DEP needs at least one phase-labelled video")
    train = assign_annotation_regime(ds.train, k, m, seed, ds.ontology)
    try:
        res = fit(train, ds.val, ds.ontology, replace(tcfg, seed=seed), mcfg)
    except NumericError as exc:
        raise NumericError(f"{mode} k={k} m={m} seed={seed}: {exc}") from None
    return dataset_metrics(list(evaluate(res.state, ds.test).values()))


def _run_cell_args(args):
    return run_cell(*args)


def _model_config(spec: ExperimentSpec, ds: Dataset) -> ModelConfig:
    obs_dim = ds.train[0].obs.shape[1]
    if spec.model_config is None:
        return ModelConfig(obs_dim=obs_dim, num_steps=ds.ontology.num_steps)
    return replace(spec.model_config, obs_dim=obs_dim, num_steps=ds.ontology.num_steps).validate()


def _run_cells(spec: ExperimentSpec, ds: Dataset, cells: Sequence[Tuple[str, int, int]]) -> List[ResultRow]:
    mcfg = _model_config(spec, ds)
    tasks = [(ds, mode, k, m, s, spec.train_config, mcfg) for mode, k, m in cells for s in spec.seeds]
    if spec.workers > 1:
        with ProcessPoolExecutor(spec.workers) as pool:
            results = list(pool.map(_run_cell_args, tasks))
    else:
        results = [_run_cell_args(t) for t in tasks]
    rows = []
    n = len(spec.seeds)
    for i, (mode, k, m) in enumerate(cells):
        per_seed = results[i * n:(i + 1) * n]
        mean = {key: float(np.mean([p.mean[key] for p in per_seed])) for key in METRIC_NAMES}
        std = {key: float(np.mean([p.std[key] for p in per_seed])) for key in METRIC_NAMES}
        h = _config_hash({"dataset": ds.descriptor, "mode": mode, "k": k, "m": m,
                          "seeds": list(spec.seeds), "train": asdict(spec.train_config),
                          "model": asdict(mcfg)})
        rows.append(ResultRow(mode, k, m, tuple(spec.seeds), mean, std, per_seed, h))
    return rows


def grid_cells(spec: ExperimentSpec, n_train: int) -> List[Tuple[str, int, int]]:
    cells = []
    for k in spec.k_values:
        if not 1 <= k <= n_train:
            raise ConfigError(f"k={k} outside [1, {n_train}]")
        for mode in spec.modes:
            if mode == "FSA":
                cells.append(("FSA", k, 0))
                continue
            ms = [n_train - k] if spec.m_policy == "rest" else list(spec.m_policy)
            for m in ms:
                if 1 <= m <= n_train - k:
                    cells.append(("DEP", k, int(m)))
    return cells


def run_weak_supervision_grid(spec: ExperimentSpec, ds: Optional[Dataset] = None) -> List[ResultRow]:
    spec.validate()
    ds = ds if ds is not None else load_dataset(spec.dataset)
    return _run_cells(spec, ds, grid_cells(spec, len(ds.train)))


def run_phase_count_sweep(spec: ExperimentSpec, k: int, m_values: Sequence[int],
                          ds: Optional[Dataset] = None) -> List[ResultRow]:
    """FSA baseline (m = 0) plus one DEP row per requested m, same step subset throughout."""
    spec.validate()
    ds = ds if ds is not None else load_dataset(spec.dataset)
    n = len(ds.train)
    cells = []
    for m in m_values:
        if not 0 <= m <= n - k:
            raise ConfigError(f"m={m} outside [0, {n - k}] for k={k}")
        cells.append(("FSA", k, 0) if m == 0 else ("DEP", k, int(m)))
    return _run_cells(spec, ds, cells)


# ---------------------------------------------------------------------------
# reports

CSV_COLUMNS = ["model", "k_step", "m_phase"] + [
    c for k in METRIC_NAMES for c in (k, f"{k}_std")] + ["seeds", "config_hash"]


def rows_to_csv(rows: Sequence[ResultRow]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.flat().items()})
    return buf.getvalue()


def parse_csv(text: str) -> List[dict]:
    out = []
    for rec in csv.DictReader(io.StringIO(text)):
        d = dict(rec)
        d["k_step"] = int(d["k_step"])
        d["m_phase"] = int(d["m_phase"])
        for k in METRIC_NAMES:
            d[k] = float(d[k])
            d[f"{k}_std"] = float(d[f"{k}_std"])
        out.append(d)
    return out


def _pct(mean: float, std: float) -> str:
    return f"{100 * mean:.2f} ± {100 * std:.2f}"


def rows_to_markdown(rows: Sequence[ResultRow]) -> str:
    lines = ["| Model | Step | Phase | ACC | PR | RE | F1 |", "|---|---|---|---|---|---|---|"]
    for r in rows:
        phase = "-" if r.m_phase == 0 else str(r.m_phase)
        cells = [r.model, str(r.k_step), phase] + [_pct(r.mean[k], r.std[k]) for k in METRIC_NAMES]
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def rows_to_json(rows: Sequence[ResultRow]) -> str:
    return json.dumps([r.to_json() for r in rows], indent=1, sort_keys=True) + "\n"


_WRITERS = {"csv": ("results.csv", rows_to_csv), "json": ("results.json", rows_to_json),
            "md": ("results.md", rows_to_markdown)}


def emit_report(rows: Sequence[ResultRow], out_dir, formats=("csv", "json", "md"),
                stem: str = "results") -> List[Path]:
    if not rows:
        raise ConfigError("no results to report")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for fmt in formats:
        if fmt not in _WRITERS:
            raise ConfigError(f"unknown report format {fmt!r}")
        name, writer = _WRITERS[fmt]
        path = out_dir / name.replace("results", stem)
        path.write_text(writer(rows))
        written.append(path)
    return written


# ---------------------------------------------------------------------------
# prediction ribbons

PX_PER_FRAME = 2
TRACK_HEIGHT = 24
TRACK_GAP = 10
LABEL_WIDTH = 110

PALETTE = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
           "#bcbd22", "#17becf", "#aec7e8", "#ffbb78", "#98df8a", "#ff9896", "#c5b0d5", "#c49c94",
           "#f7b6d2", "#c7c7c7", "#dbdb8d", "#9edae5")


def class_color(c: int) -> str:
    if c < len(PALETTE):
        return PALETTE[c]
    h = hashlib.md5(str(c).encode()).hexdigest()
    return "#" + h[:6]


def _runs(labels: np.ndarray):
    start = 0
    for t in range(1, len(labels) + 1):
        if t == len(labels) or labels[t] != labels[start]:
            yield start, t, int(labels[start])
            start = t


def predicted_phase_errors(o: Ontology, pred, phase_gt) -> np.ndarray:
    """Frames whose phase, derived from the predicted steps, differs from the true phase."""
    return derive_phase_labels(o, pred) != np.asarray(phase_gt)


def emit_ribbon_svg(gt, pred, phase_gt, phase_pred_derived, path, step_names: Optional[Sequence[str]] = None,
                    phase_names: Optional[Sequence[str]] = None) -> Path:
    """Four tracks: true steps, predicted steps, true phases, phase errors."""
    gt, pred = np.asarray(gt), np.asarray(pred)
    phase_gt, phase_pred = np.asarray(phase_gt), np.asarray(phase_pred_derived)
    T = len(gt)
    if not (len(pred) == len(phase_gt) == len(phase_pred) == T) or T == 0:
        raise DimensionError("ribbon inputs must share a non-zero length")
    width = T * PX_PER_FRAME
    classes = sorted(set(gt.tolist()) | set(pred.tolist()))
    legend_rows = (len(classes) + 3) // 4
    height = 4 * (TRACK_HEIGHT + TRACK_GAP) + 20 + 16 * legend_rows
    svg = ET.Element("svg", xmlns="http://www.w3.org/2000/svg", width=str(LABEL_WIDTH + width),
                     height=str(height), viewBox=f"0 0 {LABEL_WIDTH + width} {height}")

    tracks = [("gt-steps", "GT steps", gt, False), ("pred-steps", "Predicted steps", pred, False),
              ("gt-phases", "GT phases", phase_gt, False),
              ("phase-errors", "Phase errors", (phase_pred != phase_gt).astype(int), True)]
    for row, (tid, title, labels, is_error) in enumerate(tracks):
        y = row * (TRACK_HEIGHT + TRACK_GAP)
        g = ET.SubElement(svg, "g", {"class": "track", "id": tid, "data-width": str(width)})
        ET.SubElement(g, "text", x="0", y=str(y + TRACK_HEIGHT - 8), style="font: 11px sans-serif").text = title
        ET.SubElement(g, "rect", {"class": "frame", "x": str(LABEL_WIDTH), "y": str(y), "width": str(width),
                                  "height": str(TRACK_HEIGHT), "fill": "none", "stroke": "#444"})
        for a, b, c in _runs(labels):
            if is_error and c == 0:
                continue
            fill = "#d62728" if is_error else class_color(c)
            cls = "error" if is_error else f"seg c{c}"
            ET.SubElement(g, "rect", {"class": cls, "x": str(LABEL_WIDTH + a * PX_PER_FRAME), "y": str(y),
                                      "width": str((b - a) * PX_PER_FRAME), "height": str(TRACK_HEIGHT),
                                      "fill": fill})

    legend = ET.SubElement(svg, "g", {"class": "legend"})
    y0 = 4 * (TRACK_HEIGHT + TRACK_GAP) + 6
    for i, c in enumerate(classes):
        x = LABEL_WIDTH + (i % 4) * 160
        y = y0 + (i // 4) * 16
        ET.SubElement(legend, "rect", x=str(x), y=str(y), width="10", height="10", fill=class_color(c))
        name = step_names[c] if step_names is not None and c < len(step_names) else f"S{c}"
        ET.SubElement(legend, "text", x=str(x + 14), y=str(y + 9), style="font: 10px sans-serif").text = name

    path = Path(path)
    ET.ElementTree(svg).write(path, encoding="utf-8", xml_declaration=True)
    return path
