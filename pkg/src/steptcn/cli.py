"""Command line: gen-data, train, eval, grid, plot, gradcheck."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

from .data import (assign_annotation_regime, generate_synthetic_dataset, generator_config_from_json,
                   load_manifest, read_video_file, write_dataset)
from .errors import ConfigError, DataError, DimensionError, LabelError, NumericError, StepTCNError
from .harness import (ExperimentSpec, emit_report, emit_ribbon_svg, load_dataset,
                      predicted_phase_errors, run_phase_count_sweep, run_weak_supervision_grid)
from .metrics import dataset_metrics, metrics_csv, metrics_json
from .model import ModelConfig, gradcheck_config
from .ontology import derive_phase_labels, load_ontology, save_ontology
from .train import TrainConfig, evaluate, fit, load_checkpoint, model_gradient_check, predict, save_checkpoint

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
GRADCHECK_TOL = 1e-4


def _read_config(path) -> dict:
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except ValueError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    return doc


def _out_dir(args, doc: dict, default: str) -> Path:
    out = Path(args.out or doc.get("output_dir") or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gen_data(args) -> int:
    """Config: generator fields, plus optional ``splits`` [train, val, test]
    and ``annotation`` {k_step, m_phase, seed} for the training regimes."""
    doc = _read_config(args.config)
    if args.seed is not None:
        doc["seed"] = args.seed
    cfg = generator_config_from_json(doc)
    splits = doc.get("splits", [24, 6, 10])
    if len(splits) != 3:
        raise ConfigError("splits must list train, val and test counts")
    out = _out_dir(args, {}, "dataset")
    videos = generate_synthetic_dataset(cfg)
    regimes = None
    if "annotation" in doc:
        ann = doc["annotation"]
        train = videos[:splits[0]]
        labelled = assign_annotation_regime(train, int(ann["k_step"]), int(ann["m_phase"]),
                                            int(ann.get("seed", 0)), cfg.ontology)
        regimes = {r.video_id: r.regime for r in labelled}
    save_ontology(cfg.ontology, out / "ontology.json")
    write_dataset(videos, out, dict(zip(("train", "val", "test"), splits)), "ontology.json", regimes)
    (out / "generator.json").write_text(json.dumps(cfg.to_json(), indent=1, sort_keys=True) + "\n")
    print(out / "manifest.json")
    return EXIT_OK


def _model_config(doc: dict, obs_dim: int, num_steps: int) -> ModelConfig:
    mc = dict(doc.get("model_config") or {})
    mc.setdefault("obs_dim", obs_dim)
    mc.setdefault("num_steps", num_steps)
    cfg = ModelConfig.from_dict(mc)
    if cfg.obs_dim != obs_dim or cfg.num_steps != num_steps:
        raise ConfigError("model_config disagrees with the dataset's obs_dim or step count")
    return cfg


def cmd_train(args) -> int:
    """Config: ``manifest``, optional ``train_config`` and ``model_config``."""
    doc = _read_config(args.config)
    if "manifest" not in doc:
        raise ConfigError("train config needs a 'manifest' path")
    _, o, splits = load_manifest(doc["manifest"])
    tcfg = TrainConfig.from_dict(doc.get("train_config", {}))
    if args.seed is not None:
        tcfg = replace(tcfg, seed=args.seed)
    mcfg = _model_config(doc, splits["train"][0].obs.shape[1], o.num_steps)
    res = fit(splits["train"], splits["val"], o, tcfg, mcfg)
    out = _out_dir(args, doc, "run")
    save_checkpoint(res.state, out / "checkpoint.hwck")
    (out / "train_log.jsonl").write_text(res.log_jsonl())
    print(json.dumps({"best_epoch": res.best_epoch, "checkpoint": str(out / "checkpoint.hwck")}))
    return EXIT_OK


def cmd_eval(args) -> int:
    """Config: ``checkpoint``, ``manifest``, optional ``split`` (default test)."""
    doc = _read_config(args.config)
    for key in ("checkpoint", "manifest"):
        if key not in doc:
            raise ConfigError(f"eval config needs '{key}'")
    state = load_checkpoint(doc["checkpoint"])
    _, o, splits = load_manifest(doc["manifest"])
    split = doc.get("split", "test")
    if split not in splits or not splits[split]:
        raise DataError(f"split {split!r} is empty")
    if state.cfg.num_steps != o.num_steps:
        raise ConfigError("checkpoint and manifest disagree on the number of steps")
    per_video = evaluate(state, splits[split])
    agg = dataset_metrics(list(per_video.values()))
    fmt = args.format or "json"
    if fmt == "csv":
        rows = [dict(video_id=vid, **m.as_dict()) for vid, m in per_video.items()]
        text = metrics_csv(rows)
    elif fmt == "json":
        text = metrics_json(agg, per_video) + "\n"
    else:
        raise ConfigError("eval writes csv or json")
    if args.out:
        out = _out_dir(args, {}, "")
        (out / f"metrics.{fmt}").write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_grid(args) -> int:
    """Config: an experiment description; an optional ``sweep`` {k, m_values}
    runs the phase-count sweep instead of the FSA/DEP grid."""
    doc = _read_config(args.config)
    sweep = doc.pop("sweep", None)
    if args.seed is not None:
        doc["seeds"] = [args.seed]
    spec = ExperimentSpec.from_json(doc)
    ds = load_dataset(spec.dataset)
    if sweep is not None:
        rows = run_phase_count_sweep(spec, int(sweep["k"]), [int(m) for m in sweep["m_values"]], ds)
    else:
        rows = run_weak_supervision_grid(spec, ds)
    out = _out_dir(args, doc, "grid")
    formats = (args.format,) if args.format else ("csv", "json", "md")
    for path in emit_report(rows, out, formats):
        print(path)
    return EXIT_OK


def cmd_plot(args) -> int:
    """Config: ``checkpoint``, ``video`` (a video file) and optional ``ontology``."""
    doc = _read_config(args.config)
    for key in ("checkpoint", "video"):
        if key not in doc:
            raise ConfigError(f"plot config needs '{key}'")
    state = load_checkpoint(doc["checkpoint"])
    o = load_ontology(doc.get("ontology", "builtin:cataracts-local-idle"))
    r = read_video_file(doc["video"])
    r.check_labels(o)
    if r.step_labels is None:
        raise LabelError(f"{r.video_id}: plotting needs ground-truth steps")
    pred = predict(state, r.obs)
    phase_gt = r.phase_labels if r.phase_labels is not None else derive_phase_labels(o, r.step_labels)
    out = _out_dir(args, {}, ".")
    path = emit_ribbon_svg(r.step_labels, pred, phase_gt, derive_phase_labels(o, pred),
                           out / f"{r.video_id}.svg", o.step_names, o.phase_names)
    n_err = int(predicted_phase_errors(o, pred, phase_gt).sum())
    print(json.dumps({"svg": str(path), "phase_error_frames": n_err}))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    """Config: model config fields (defaults to the small check model)."""
    doc = _read_config(args.config)
    o = load_ontology(doc.pop("ontology", "builtin:cataracts"))
    T = int(doc.pop("frames", 32))
    base = asdict(gradcheck_config(num_steps=o.num_steps))
    base.update(doc)
    cfg = ModelConfig.from_dict(base)
    errors = model_gradient_check(cfg, o, T=T, seed=args.seed or 0)
    worst = max(errors.values())
    print(json.dumps({"max_rel_error": worst, **{k: float(v) for k, v in errors.items()},
                      "tolerance": GRADCHECK_TOL}))
    return EXIT_OK if worst < GRADCHECK_TOL else EXIT_NUMERIC


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "grid": cmd_grid,
            "plot": cmd_plot, "gradcheck": cmd_gradcheck}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="steptcn", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        sp = sub.add_parser(name, help=fn.__doc__.splitlines()[0] if fn.__doc__ else None)
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--format", choices=("csv", "json", "md"), help="output format")
    return p


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, NumericError):
        return EXIT_NUMERIC
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, (DataError, LabelError, DimensionError)):
        return EXIT_DATA
    return 1


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except StepTCNError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exit_code_for(exc)
    except FloatingPointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
