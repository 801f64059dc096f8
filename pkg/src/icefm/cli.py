"""Command-line entry points.

Every command reads one JSON config (--config), writes into one output
directory (--out, or the ICEFM_OUT_DIR environment variable), and drops a
resolved-config snapshot plus a provenance record next to its outputs, so a
result directory is self-describing. Exit codes: 0 success, 1 configuration
or input error (the message names the offending field or path), 2 unexpected
failure.

    icefm synth    --config synth.json    --out data/
    icefm bench    --config grid.json     --out runs/grid/
    icefm transfer --config transfer.json --out runs/transfer/
    icefm datasize --config sweep.json    --out runs/sweep/
    icefm train    --config train.json    --out runs/fit/
    icefm eval     --config eval.json     --out runs/eval/
    icefm distill  --config distill.json  --out runs/kd/
    icefm report   --config report.json   --out tables/
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
import traceback
from pathlib import Path

from . import __version__
from .adapt import LoraConfig, VptConfig, apply_strategy
from .bench import (GridSpec, SweepSpec, TransferSpec, config_hash, evaluate,
                    region_transfer_spec, run_grid, run_sweep, run_transfer,
                    season_transfer_spec, transfer_matrix)
from .distill import (DistillConfig, build_expert_teachers, distill,
                      load_teacher_ensemble)
from .errors import (CheckpointError, ConfigError, MetricsError,
                     SceneFormatError, UnsupportedArchitectureError)
from .metrics import METRIC_COLUMNS, write_report_rows
from .models import ModelSpec, build, load_checkpoint, unet_spec, vit_tiny_spec
from .profiler import write_efficiency_csv
from .sardata import (DatasetManifest, SynthConfig, build_patchset,
                      channels_for, generate_dataset, shift_free_config,
                      shift_heavy_config)
from .train import TrainConfig, fit

log = logging.getLogger("icefm")

_USER_ERRORS = (ConfigError, SceneFormatError, MetricsError, CheckpointError,
                UnsupportedArchitectureError, FileNotFoundError, ValueError)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="icefm",
        description="sea-ice segmentation benchmark: synthetic data, "
                    "fine-tuning strategies, transfer/data-size drivers, distillation")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, helptext in [
        ("synth", "generate a synthetic dataset and manifest"),
        ("train", "fit one model/strategy on a dataset"),
        ("eval", "evaluate a checkpoint on a dataset split"),
        ("bench", "run a model x strategy grid"),
        ("transfer", "run a domain-transfer matrix"),
        ("datasize", "run a training-set-size sweep"),
        ("distill", "train domain experts and distill a student"),
        ("report", "re-render tables from result CSVs"),
    ]:
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", required=True, help="path to JSON config")
        p.add_argument("--out", default=None,
                       help="output directory (default: $ICEFM_OUT_DIR)")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config's seed(s)")
        p.add_argument("--jobs", type=int, default=1,
                       help="worker count; cells currently execute sequentially")
        p.add_argument("--verbosity", type=int, default=1, choices=[0, 1, 2],
                       help="0 quiet, 1 progress, 2 debug")
    return parser


def _load_config(path: str) -> dict:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{p}: config must be a JSON object")
    return data


def _resolve_out(args) -> Path:
    out = args.out or os.environ.get("ICEFM_OUT_DIR")
    if not out:
        raise ConfigError("no output directory: pass --out or set ICEFM_OUT_DIR")
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_provenance(out: Path, command: str, config: dict, seed) -> None:
    (out / "config.resolved.json").write_text(
        json.dumps(config, indent=2, sort_keys=True, default=str) + "\n")
    provenance = {
        "tool": "icefm",
        "version": __version__,
        "command": command,
        "seed": seed,
        "config_hash": config_hash(json.loads(json.dumps(config, default=str))),
        "created_utc": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    }
    (out / "provenance.json").write_text(json.dumps(provenance, indent=2) + "\n")


def _model_from_config(data: dict) -> ModelSpec:
    if isinstance(data, str):  # shorthand: "vit_tiny" / "unet"
        if data == "vit_tiny":
            return vit_tiny_spec()
        if data == "unet":
            return unet_spec()
        raise ConfigError(f"unknown model shorthand {data!r}")
    return ModelSpec.from_dict(data)


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args, out: Path) -> int:
    config = _load_config(args.config)
    preset = config.pop("preset", None)
    if args.seed is not None:
        config["rng_seed"] = args.seed
    if preset == "shift_heavy":
        cfg = shift_heavy_config(**config)
    elif preset == "shift_free":
        cfg = shift_free_config(**config)
    elif preset is None:
        cfg = SynthConfig.from_dict(config)
    else:
        raise ConfigError(f"unknown synth preset {preset!r}")
    manifest = generate_dataset(cfg, out)
    _write_provenance(out, "synth", cfg.to_dict(), cfg.rng_seed)
    log.info("wrote %d scenes and manifest.json to %s", len(manifest.scenes), out)
    return 0


def _domain_filter_from(config: dict) -> dict:
    filt = {}
    if config.get("season"):
        filt["season"] = config["season"]
    if config.get("region"):
        filt["region"] = config["region"]
    return filt


def cmd_train(args, out: Path) -> int:
    config = _load_config(args.config)
    manifest = DatasetManifest.load(config["manifest"])
    model_spec = _model_from_config(config.get("model", "vit_tiny"))
    strategy = config.get("strategy", "full")
    train_cfg = TrainConfig.from_dict(config.get("train", {}))
    if args.seed is not None:
        train_cfg.seed = args.seed
    channels = channels_for(model_spec.in_channels)
    filt = _domain_filter_from(config)
    train_ids = manifest.split_ids("train", **filt)
    val_ids = manifest.split_ids("val", **filt)
    if not train_ids or not val_ids:
        raise ConfigError(f"no train/val scenes match filter {filt or 'none'}")
    train_set = build_patchset(manifest, train_ids, "random_train", channels,
                               per_scene=config.get("patches_per_scene", 8),
                               augment=True, seed=train_cfg.seed)
    val_set = build_patchset(manifest, val_ids, "random_train", channels,
                             per_scene=config.get("val_patches_per_scene", 4),
                             augment=False, seed=train_cfg.seed + 7919)
    model = build(model_spec, seed=train_cfg.seed)
    vpt = VptConfig(**config["vpt"]) if "vpt" in config else None
    lora = LoraConfig(**config["lora"]) if "lora" in config else None
    plan = apply_strategy(model, strategy, seed=train_cfg.seed, vpt=vpt, lora=lora)
    meta = {"train_domain": "/".join(f"{k}:{v}" for k, v in filt.items()) or "all"}
    result = fit(plan, train_set, val_set, train_cfg, out_dir=out,
                 checkpoint_meta=meta)
    write_efficiency_csv(out / "efficiency.csv", [result.efficiency])
    resolved = {**config, "model": model_spec.to_dict(),
                "train": train_cfg.to_dict(), "strategy": strategy}
    _write_provenance(out, "train", resolved, train_cfg.seed)
    log.info("best val loss %.4f at epoch %d; checkpoint %s",
             result.best_val_loss, result.best_epoch, result.checkpoint_path)
    return 0


def cmd_eval(args, out: Path) -> int:
    config = _load_config(args.config)
    manifest = DatasetManifest.load(config["manifest"])
    model, meta = load_checkpoint(config["checkpoint"])
    split = config.get("split", "test")
    scene_ids = manifest.split_ids(split, **_domain_filter_from(config))
    if not scene_ids:
        raise ConfigError(f"no scenes in split {split!r} match the filter")
    report, _, record = evaluate(model, manifest, scene_ids,
                                 batch_size=config.get("batch_size", 8),
                                 profile_phase="inference")
    report.save_json(out / "metrics.json")
    row = report.csv_row(model.spec.name, meta.get("strategy", "unknown"),
                         channels_for(model.spec.in_channels))
    write_report_rows(out / "metrics.csv", [row],
                      ["model", "strategy", "channels", *METRIC_COLUMNS])
    write_efficiency_csv(out / "efficiency.csv", [record])
    _write_provenance(out, "eval", config, args.seed)
    log.info("weighted F1 %.4f over %d pixels", report.weighted_f1, report.total_pixels)
    return 0


def cmd_bench(args, out: Path) -> int:
    config = _load_config(args.config)
    if args.seed is not None:
        config["seeds"] = [args.seed]
    spec = GridSpec.from_dict(config)
    rows = run_grid(spec, out)
    resolved = {**config, "models": [m.to_dict() for m in spec.models],
                "train": spec.train.to_dict()}
    _write_provenance(out, "bench", resolved, spec.seeds)
    ok = sum(1 for r in rows if r.get("status") == "ok")
    log.info("grid finished: %d rows (%d ok) -> %s", len(rows), ok, out / "report.csv")
    return 0


def cmd_transfer(args, out: Path) -> int:
    config = _load_config(args.config)
    if args.seed is not None:
        config["seeds"] = [args.seed]
    preset = config.pop("preset", None)
    if preset is not None:
        model = _model_from_config(config.pop("model", "vit_tiny"))
        dataset = config.pop("dataset")
        if "train" in config:
            config["train"] = TrainConfig.from_dict(config["train"])
        if preset == "season":
            spec = season_transfer_spec(model, dataset, **config)
        elif preset == "region":
            spec = region_transfer_spec(model, dataset, **config)
        else:
            raise ConfigError(f"unknown transfer preset {preset!r}")
        spec.validate()
    else:
        spec = TransferSpec.from_dict(config)
    rows = run_transfer(spec, out)
    resolved = {"axis": spec.axis, "model": spec.model.to_dict(),
                "dataset": str(spec.dataset), "train_domains": spec.train_domains,
                "test_domains": spec.test_domains, "strategy": spec.strategy,
                "train": spec.train.to_dict(), "seeds": spec.seeds}
    _write_provenance(out, "transfer", resolved, spec.seeds)
    log.info("transfer matrix %dx%d -> %s", len(spec.train_domains),
             len(spec.test_domains), out / "transfer_matrix.csv")
    return 0


def cmd_datasize(args, out: Path) -> int:
    config = _load_config(args.config)
    if args.seed is not None:
        config["seeds"] = [args.seed]
    spec = SweepSpec.from_dict(config)
    run_sweep(spec, out)
    resolved = {**config, "model": spec.model.to_dict(), "train": spec.train.to_dict()}
    _write_provenance(out, "datasize", resolved, spec.seeds)
    log.info("sweep over sizes %s -> %s", spec.sizes, out / "sweep.csv")
    return 0


def cmd_distill(args, out: Path) -> int:
    config = _load_config(args.config)
    manifest = DatasetManifest.load(config["manifest"])
    train_cfg = TrainConfig.from_dict(config.get("train", {}))
    if args.seed is not None:
        train_cfg.seed = args.seed
    student_spec = _model_from_config(config.get("student", "unet"))
    channels = channels_for(student_spec.in_channels)

    teachers = config.get("teachers", {})
    if "checkpoints" in teachers:
        ensemble = load_teacher_ensemble(teachers["checkpoints"])
    else:
        teacher_model = _model_from_config(teachers.get("model", {
            "name": "vit_teacher", "kind": "vit_tiny",
            "in_channels": student_spec.in_channels,
            "class_count": student_spec.class_count}))
        teacher_train = TrainConfig.from_dict(teachers.get("train", train_cfg.to_dict()))
        ensemble = build_expert_teachers(
            manifest, teacher_model, teacher_train,
            strategy=teachers.get("strategy", "full"),
            patches_per_scene=teachers.get("patches_per_scene", 8),
            val_patches_per_scene=teachers.get("val_patches_per_scene", 4),
            seed=teachers.get("seed", train_cfg.seed),
            out_dir=out / "teachers")

    per_scene = config.get("patches_per_scene", 8)
    val_per_scene = config.get("val_patches_per_scene", 4)
    train_set = build_patchset(manifest, manifest.splits["train"], "random_train",
                               channels, per_scene=per_scene, augment=True,
                               seed=train_cfg.seed)
    val_set = build_patchset(manifest, manifest.splits["val"], "random_train",
                             channels, per_scene=val_per_scene, augment=False,
                             seed=train_cfg.seed + 7919)

    dcfg = DistillConfig(student_spec=student_spec, train_cfg=train_cfg,
                         alpha=config.get("alpha", 0.5),
                         temperature=config.get("temperature", 3.0),
                         rescale_t2=config.get("rescale_t2", False))
    result = distill(dcfg, train_set, val_set, ensemble, out_dir=out / "student_kd")
    test_ids = manifest.splits["test"]
    kd_report, _, _ = evaluate(result.plan.model, manifest, test_ids,
                               batch_size=train_cfg.batch_size)
    rows = [kd_report.csv_row(f"{student_spec.name}_kd", "full", channels)]

    if config.get("baseline", True):
        base_model = build(student_spec, seed=train_cfg.seed)
        base_plan = apply_strategy(base_model, "full", seed=train_cfg.seed)
        base_result = fit(base_plan, train_set, val_set, train_cfg,
                          out_dir=out / "student_baseline")
        base_report, _, _ = evaluate(base_result.plan.model, manifest, test_ids,
                                     batch_size=train_cfg.batch_size)
        rows.append(base_report.csv_row(f"{student_spec.name}_baseline", "full", channels))

    write_report_rows(out / "distill_report.csv", rows,
                      ["model", "strategy", "channels", *METRIC_COLUMNS])
    resolved = {**config, "student": student_spec.to_dict(), "train": train_cfg.to_dict()}
    _write_provenance(out, "distill", resolved, train_cfg.seed)
    log.info("distillation report -> %s", out / "distill_report.csv")
    return 0


def cmd_report(args, out: Path) -> int:
    config = _load_config(args.config)
    fmt = config.get("format")
    src = config.get("input")
    if fmt not in ("table2", "radar", "transfer", "sweep", "table4"):
        raise ConfigError(f"unknown report format {fmt!r}")
    if not src:
        raise ConfigError("report config needs an 'input' CSV path")
    src = Path(src)
    if not src.exists():
        raise ConfigError(f"input CSV not found: {src}")
    import csv as _csv
    with open(src, newline="") as fh:
        rows = list(_csv.DictReader(fh))
    renderer = {"table2": _render_table2, "radar": _render_radar,
                "transfer": _render_transfer, "sweep": _render_sweep,
                "table4": _render_table4}[fmt]
    renderer(rows, out)
    _write_provenance(out, "report", config, args.seed)
    return 0


def _ok(rows: list[dict]) -> list[dict]:
    return [r for r in rows if r.get("status", "ok") == "ok"]


def _require(rows: list[dict], cols: list[str], src: str) -> None:
    if not rows:
        raise ConfigError(f"{src}: no usable rows")
    missing = set(cols) - set(rows[0])
    if missing:
        raise ConfigError(f"{src}: input lacks columns {sorted(missing)}")


def _median_by(rows: list[dict], key_cols: list[str], order: list[tuple]) -> list[dict]:
    import statistics
    grouped: dict[tuple, list[dict]] = {}
    for r in rows:
        grouped.setdefault(tuple(r[c] for c in key_cols), []).append(r)
    out_rows = []
    for key in order:
        members = grouped.get(key)
        if not members:
            continue
        row = dict(zip(key_cols, key))
        for m in METRIC_COLUMNS:
            row[m] = statistics.median(float(r[m]) for r in members)
        out_rows.append(row)
    return out_rows


def _render_table2(rows, out: Path) -> None:
    rows = _ok(rows)
    _require(rows, ["model", "strategy", "channels", *METRIC_COLUMNS], "table2")
    strategies = list(dict.fromkeys(r["strategy"] for r in rows))
    pairs = list(dict.fromkeys((r["strategy"], r["model"], r["channels"]) for r in rows))
    order = [p for s in strategies for p in pairs if p[0] == s]
    table = _median_by(rows, ["strategy", "model", "channels"], order)
    write_report_rows(out / "table2.csv", table,
                      ["strategy", "model", "channels", *METRIC_COLUMNS])


def _render_radar(rows, out: Path) -> None:
    rows = _ok(rows)
    _require(rows, ["model", "strategy", "f1"], "radar")
    import statistics
    strategies = list(dict.fromkeys(r["strategy"] for r in rows))
    models = list(dict.fromkeys(r["model"] for r in rows))
    cells: dict[tuple, list[float]] = {}
    for r in rows:
        cells.setdefault((r["strategy"], r["model"]), []).append(float(r["f1"]))
    out_rows = []
    for s in strategies:
        row = {"strategy": s}
        for m in models:
            vals = cells.get((s, m))
            row[m] = statistics.median(vals) if vals else ""
        out_rows.append(row)
    write_report_rows(out / "radar.csv", out_rows, ["strategy", *models])


def _render_transfer(rows, out: Path) -> None:
    rows = _ok(rows)
    _require(rows, ["train_domain", "test_domain", "f1"], "transfer")
    import statistics
    train_domains = list(dict.fromkeys(r["train_domain"] for r in rows))
    test_domains = list(dict.fromkeys(r["test_domain"] for r in rows))
    cells: dict[tuple, list[float]] = {}
    for r in rows:
        cells.setdefault((r["train_domain"], r["test_domain"]), []).append(float(r["f1"]))
    out_rows = []
    for td in train_domains:
        row = {"train_domain": td}
        for xd in test_domains:
            vals = cells.get((td, xd))
            row[xd] = statistics.median(vals) if vals else ""
        out_rows.append(row)
    write_report_rows(out / "transfer_matrix.csv", out_rows,
                      ["train_domain", *test_domains])


def _render_sweep(rows, out: Path) -> None:
    rows = _ok(rows)
    _require(rows, ["size", "seed", "f1"], "sweep")
    import statistics
    sizes = sorted({int(r["size"]) for r in rows})
    out_rows = []
    for size in sizes:
        vals = [float(r["f1"]) for r in rows if int(r["size"]) == size]
        out_rows.append({"size": size, "median_f1": statistics.median(vals),
                         "runs": len(vals)})
    write_report_rows(out / "sweep_series.csv", out_rows, ["size", "median_f1", "runs"])


def _render_table4(rows, out: Path) -> None:
    rows = _ok(rows)
    _require(rows, ["model", *METRIC_COLUMNS], "table4")
    order = [(m,) for m in dict.fromkeys(r["model"] for r in rows)]
    table = _median_by(rows, ["model"], order)
    write_report_rows(out / "table4.csv", table, ["model", *METRIC_COLUMNS])


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "transfer": cmd_transfer,
    "datasize": cmd_datasize,
    "distill": cmd_distill,
    "report": cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = {0: logging.WARNING, 1: logging.INFO, 2: logging.DEBUG}[args.verbosity]
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    if args.jobs < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return 1
    try:
        out = _resolve_out(args)
        return COMMANDS[args.command](args, out)
    except _USER_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception:
        traceback.print_exc()
        return 2


if __name__ == "__main__":
    sys.exit(main())
