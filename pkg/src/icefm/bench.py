"""Experiment drivers: strategy grid, domain-transfer matrices, data-size sweep.

Each driver expands a declarative spec into cells, runs every cell, and
emits plain CSV tables (results are data products; plotting is out of
scope). Cells are identified by a hash of their full configuration, and
every result row carries that hash plus the seed, so identical runs
reproduce identical rows and interrupted grids resume by skipping finished
(hash, seed) pairs.

Result CSVs contain only deterministic quantities; wall-clock and memory
telemetry go to a separate efficiency CSV, since those can never be
byte-stable across runs.
"""

from __future__ import annotations

import csv
import hashlib
import json
import statistics
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .adapt import STRATEGIES, apply_strategy
from .errors import ConfigError
from .metrics import METRIC_COLUMNS, ConfusionMatrix, write_report_rows
from .models import ModelSpec, build
from .profiler import ResourceSampler, training_memory_proxy
from .sardata import (REGIONS, SEASONS, DatasetManifest, build_patchset,
                      channels_for, extract_patches)
from .train import TrainConfig, fit

REPORT_COLUMNS = [
    "model", "strategy", "channels", "seed", "config_hash", "status", "error",
    *METRIC_COLUMNS,
    "total_pixels", "trainable_params", "total_params", "added_params",
    "optimizer_state_bytes", "train_state_bytes",
    "epochs_run", "best_epoch", "best_val_loss", "stopped_epoch",
]

TRANSFER_COLUMNS = [
    "axis", "train_domain", "test_domain", "seed", "config_hash", "status", "error",
    *METRIC_COLUMNS, "total_pixels",
]

TRANSFER_CLASS_COLUMNS = [
    "axis", "train_domain", "test_domain", "seed", "class_id",
    "precision", "recall", "f1", "iou", "support",
]

SWEEP_COLUMNS = [
    "size", "seed", "config_hash", "status", "error",
    *METRIC_COLUMNS, "total_pixels", "epochs_run",
]


def config_hash(payload: dict) -> str:
    """Stable 16-hex-digit digest of a JSON-serializable config."""
    canon = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]


def _median(values: list[float]) -> float:
    return statistics.median(values)


# ---------------------------------------------------------------------------
# evaluation


def evaluate(model: torch.nn.Module, manifest: DatasetManifest,
             scene_ids: list[str], batch_size: int = 8,
             profile_phase: str | None = None):
    """Tile every scene, run batched inference, pool one confusion matrix.

    Returns (MetricsReport, ConfusionMatrix, EfficiencyRecord | None). Tiles
    use stride = patch size with edge remainders dropped, so every labelled
    pixel inside the tiled area is counted exactly once.
    """
    if not scene_ids:
        raise ConfigError("evaluate needs at least one scene id")
    channels = channels_for(model.spec.in_channels)
    cm = ConfusionMatrix(manifest.class_count)
    sampler = None
    if profile_phase is not None:
        sampler = ResourceSampler()
        sampler.start()
    try:
        model.eval()
        for sid in scene_ids:
            scene = manifest.load_scene(sid)
            patches = extract_patches(scene, manifest, "tiled_eval", channels=channels)
            x = torch.from_numpy(np.stack([p.channels for p in patches]))
            with torch.no_grad():
                preds = []
                for start in range(0, x.shape[0], batch_size):
                    logits = model(x[start:start + batch_size])
                    preds.append(logits.argmax(dim=1).numpy())
            preds = np.concatenate(preds)
            for patch, pred in zip(patches, preds):
                cm = cm.accumulate(patch.labels, pred)
    finally:
        if sampler is not None:
            sampler.stop()
    record = sampler.record(profile_phase) if sampler is not None else None
    return cm.report(), cm, record


# ---------------------------------------------------------------------------
# strategy grid


@dataclass
class GridSpec:
    models: list[ModelSpec]
    strategies: list[str]
    dataset: str  # path to manifest.json
    train: TrainConfig = field(default_factory=TrainConfig)
    seeds: list[int] = field(default_factory=lambda: [0])
    patches_per_scene: int = 8
    val_patches_per_scene: int = 4
    eval_split: str = "test"

    def validate(self) -> None:
        if not self.models:
            raise ConfigError("grid needs at least one model")
        names = [m.name for m in self.models]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate model names in grid: {names}")
        for m in self.models:
            m.validate()
        bad = set(self.strategies) - set(STRATEGIES)
        if bad or not self.strategies:
            raise ConfigError(
                f"strategies must be a non-empty subset of {STRATEGIES}, got {self.strategies}")
        if not self.seeds:
            raise ConfigError("grid needs at least one seed")
        if self.patches_per_scene < 1 or self.val_patches_per_scene < 1:
            raise ConfigError("patches_per_scene values must be >= 1")
        self.train.validate()

    @classmethod
    def from_dict(cls, data: dict) -> "GridSpec":
        data = dict(data)
        try:
            data["models"] = [ModelSpec.from_dict(m) for m in data["models"]]
        except KeyError:
            raise ConfigError("grid config requires a 'models' list")
        if "train" in data:
            data["train"] = TrainConfig.from_dict(data["train"])
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown GridSpec fields: {sorted(unknown)}")
        spec = cls(**data)
        spec.validate()
        return spec

    def cell_hash(self, model: ModelSpec, strategy: str) -> str:
        train = self.train.to_dict()
        train.pop("seed")  # the sweep over seeds is explicit, not part of the cell
        return config_hash({
            "kind": "grid_cell",
            "model": model.to_dict(),
            "strategy": strategy,
            "train": train,
            "dataset": str(self.dataset),
            "patches_per_scene": self.patches_per_scene,
            "val_patches_per_scene": self.val_patches_per_scene,
            "eval_split": self.eval_split,
        })


def _strategy_supported(model: ModelSpec, strategy: str) -> bool:
    if strategy in ("vpt", "lora"):
        return model.kind == "vit_tiny"
    return True


def _load_rows(path: Path) -> list[dict]:
    if not path.exists():
        return []
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def run_grid(spec: GridSpec, out_dir: str | Path, resume: bool = True) -> list[dict]:
    """Train and evaluate every (model, strategy, seed) cell.

    Writes report.csv (deterministic results), efficiency.csv (telemetry)
    and radar.csv (strategy x model median-F1 pivot). Unsupported pairs
    produce 'skip' rows; cell failures produce 'error' rows and the grid
    carries on. With resume=True, finished ok/skip rows found in an existing
    report.csv are kept instead of re-run.
    """
    spec.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = DatasetManifest.load(spec.dataset)

    done: dict[tuple[str, str], dict] = {}
    if resume:
        for row in _load_rows(out / "report.csv"):
            if row.get("status") in ("ok", "skip"):
                done[(row["config_hash"], row["seed"])] = row

    train_ids = manifest.splits.get("train", [])
    val_ids = manifest.splits.get("val", [])
    eval_ids = manifest.splits.get(spec.eval_split, [])
    if not train_ids or not val_ids or not eval_ids:
        raise ConfigError(
            f"dataset must populate train, val and {spec.eval_split!r} splits")

    rows: list[dict] = []
    efficiency_rows: list[dict] = []
    for model_spec in spec.models:
        for strategy in spec.strategies:
            cell = spec.cell_hash(model_spec, strategy)
            for seed in spec.seeds:
                key = (cell, str(seed))
                if key in done:
                    rows.append(done[key])
                    continue
                base = {
                    "model": model_spec.name, "strategy": strategy,
                    "channels": channels_for(model_spec.in_channels),
                    "seed": seed, "config_hash": cell, "status": "ok", "error": "",
                }
                if not _strategy_supported(model_spec, strategy):
                    base["status"] = "skip"
                    base["error"] = f"{strategy} not applicable to {model_spec.kind}"
                    rows.append(base)
                    continue
                try:
                    row, eff = _run_grid_cell(spec, manifest, model_spec, strategy,
                                              seed, train_ids, val_ids, eval_ids)
                    base.update(row)
                    for phase_row in eff:
                        efficiency_rows.append({
                            "model": model_spec.name, "strategy": strategy,
                            "seed": seed, **phase_row})
                except Exception as exc:  # keep the grid going; the row records why
                    base["status"] = "error"
                    base["error"] = f"{type(exc).__name__}: {exc}"
                rows.append(base)

    write_report_rows(out / "report.csv", rows, REPORT_COLUMNS)
    _write_efficiency(out / "efficiency.csv", efficiency_rows)
    _write_radar(out / "radar.csv", spec, rows)
    return rows


def _run_grid_cell(spec: GridSpec, manifest: DatasetManifest, model_spec: ModelSpec,
                   strategy: str, seed: int, train_ids, val_ids, eval_ids):
    channels = channels_for(model_spec.in_channels)
    train_set = build_patchset(manifest, train_ids, "random_train", channels,
                               per_scene=spec.patches_per_scene, augment=True, seed=seed)
    val_set = build_patchset(manifest, val_ids, "random_train", channels,
                             per_scene=spec.val_patches_per_scene, augment=False,
                             seed=seed + 7919)
    model = build(model_spec, seed=seed)
    plan = apply_strategy(model, strategy, seed=seed)
    cfg = TrainConfig(**{**spec.train.to_dict(), "seed": seed})
    result = fit(plan, train_set, val_set, cfg)
    report, _, infer_rec = evaluate(plan.model, manifest, eval_ids,
                                    batch_size=cfg.batch_size,
                                    profile_phase="inference")
    proxy = training_memory_proxy(plan)
    row = {name: report.aggregate(name) for name in METRIC_COLUMNS}
    row.update({
        "total_pixels": report.total_pixels,
        "trainable_params": proxy["trainable_params"],
        "total_params": proxy["total_params"],
        "added_params": proxy["added_params"],
        "optimizer_state_bytes": proxy["optimizer_state_bytes"],
        "train_state_bytes": proxy["train_state_bytes"],
        "epochs_run": len(result.history),
        "best_epoch": result.best_epoch,
        "best_val_loss": result.best_val_loss,
        "stopped_epoch": result.stopped_epoch,
    })
    eff = [dict(result.efficiency.csv_row(), sample_count=result.efficiency.sample_count)]
    if infer_rec is not None:
        eff.append(dict(infer_rec.csv_row(), sample_count=infer_rec.sample_count))
    return row, eff


def _write_efficiency(path: Path, rows: list[dict]) -> None:
    columns = ["model", "strategy", "seed", "phase", "accel_mem_gb", "host_mem_gb",
               "accel_util_pct", "cpu_util_pct", "minutes_per_epoch",
               "total_minutes", "sample_count"]
    write_report_rows(path, rows, columns)


def _write_radar(path: Path, spec: GridSpec, rows: list[dict]) -> None:
    """strategy x model pivot of median F1 over seeds; '' where unavailable."""
    by_cell: dict[tuple[str, str], list[float]] = {}
    for row in rows:
        if row.get("status") != "ok":
            continue
        key = (str(row["strategy"]), str(row["model"]))
        by_cell.setdefault(key, []).append(float(row["f1"]))
    model_names = [m.name for m in spec.models]
    out_rows = []
    for strategy in spec.strategies:
        row = {"strategy": strategy}
        for name in model_names:
            vals = by_cell.get((strategy, name))
            row[name] = _median(vals) if vals else ""
        out_rows.append(row)
    write_report_rows(path, out_rows, ["strategy", *model_names])


# ---------------------------------------------------------------------------
# transfer matrices


@dataclass
class TransferSpec:
    axis: str  # "season" | "region"
    model: ModelSpec
    dataset: str
    train_domains: list[str] = field(default_factory=list)
    test_domains: list[str] = field(default_factory=list)  # may include "all"
    strategy: str = "full"
    train: TrainConfig = field(default_factory=TrainConfig)
    seeds: list[int] = field(default_factory=lambda: [0])
    patches_per_scene: int = 8
    val_patches_per_scene: int = 4

    def validate(self) -> None:
        if self.axis not in ("season", "region"):
            raise ConfigError(f"axis must be 'season' or 'region', got {self.axis!r}")
        domain_values = SEASONS if self.axis == "season" else REGIONS
        if not self.train_domains:
            raise ConfigError("transfer needs at least one train domain")
        for d in self.train_domains:
            if d not in domain_values:
                raise ConfigError(f"unknown {self.axis} {d!r} in train_domains")
        if not self.test_domains:
            raise ConfigError("transfer needs at least one test domain")
        for d in self.test_domains:
            if d != "all" and d not in domain_values:
                raise ConfigError(f"unknown {self.axis} {d!r} in test_domains")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}")
        if not self.seeds:
            raise ConfigError("transfer needs at least one seed")
        self.model.validate()
        self.train.validate()

    @classmethod
    def from_dict(cls, data: dict) -> "TransferSpec":
        data = dict(data)
        try:
            data["model"] = ModelSpec.from_dict(data["model"])
        except KeyError:
            raise ConfigError("transfer config requires a 'model'")
        if "train" in data:
            data["train"] = TrainConfig.from_dict(data["train"])
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown TransferSpec fields: {sorted(unknown)}")
        spec = cls(**data)
        spec.validate()
        return spec

    def cell_hash(self, train_domain: str) -> str:
        train = self.train.to_dict()
        train.pop("seed")
        return config_hash({
            "kind": "transfer_cell", "axis": self.axis,
            "train_domain": train_domain, "model": self.model.to_dict(),
            "strategy": self.strategy, "train": train,
            "dataset": str(self.dataset),
            "patches_per_scene": self.patches_per_scene,
            "val_patches_per_scene": self.val_patches_per_scene,
        })


def season_transfer_spec(model: ModelSpec, dataset: str, **kwargs) -> TransferSpec:
    """Train on each season, test on every season plus the pooled test set."""
    return TransferSpec(axis="season", model=model, dataset=dataset,
                        train_domains=list(SEASONS),
                        test_domains=[*SEASONS, "all"], **kwargs)


def region_transfer_spec(model: ModelSpec, dataset: str, **kwargs) -> TransferSpec:
    """Train on three regions, test on all four (one region held out entirely)."""
    return TransferSpec(axis="region", model=model, dataset=dataset,
                        train_domains=["east", "west", "canadian_arctic"],
                        test_domains=list(REGIONS), **kwargs)


def _domain_filter(axis: str, value: str) -> dict:
    return {"season": value} if axis == "season" else {"region": value}


def run_transfer(spec: TransferSpec, out_dir: str | Path) -> list[dict]:
    """Train per domain, evaluate across domains.

    Writes transfer_rows.csv (one row per train x test x seed),
    transfer_matrix.csv (median F1 over seeds, train domains as rows) and
    transfer_per_class.csv (per-class scores for every cell).
    """
    spec.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = DatasetManifest.load(spec.dataset)
    channels = channels_for(spec.model.in_channels)

    rows: list[dict] = []
    class_rows: list[dict] = []
    for train_domain in spec.train_domains:
        cell = spec.cell_hash(train_domain)
        train_ids = manifest.split_ids("train", **_domain_filter(spec.axis, train_domain))
        val_ids = manifest.split_ids("val", **_domain_filter(spec.axis, train_domain))
        if not train_ids or not val_ids:
            raise ConfigError(
                f"dataset has no train/val scenes for {spec.axis} {train_domain!r}")
        for seed in spec.seeds:
            train_set = build_patchset(manifest, train_ids, "random_train", channels,
                                       per_scene=spec.patches_per_scene,
                                       augment=True, seed=seed)
            val_set = build_patchset(manifest, val_ids, "random_train", channels,
                                     per_scene=spec.val_patches_per_scene,
                                     augment=False, seed=seed + 7919)
            model = build(spec.model, seed=seed)
            plan = apply_strategy(model, spec.strategy, seed=seed)
            cfg = TrainConfig(**{**spec.train.to_dict(), "seed": seed})
            fit(plan, train_set, val_set, cfg)
            for test_domain in spec.test_domains:
                if test_domain == "all":
                    test_ids = manifest.split_ids("test")
                else:
                    test_ids = manifest.split_ids(
                        "test", **_domain_filter(spec.axis, test_domain))
                base = {"axis": spec.axis, "train_domain": train_domain,
                        "test_domain": test_domain, "seed": seed,
                        "config_hash": cell, "status": "ok", "error": ""}
                if not test_ids:
                    base["status"] = "error"
                    base["error"] = f"no test scenes for {spec.axis} {test_domain!r}"
                    rows.append(base)
                    continue
                report, _, _ = evaluate(plan.model, manifest, test_ids,
                                        batch_size=cfg.batch_size)
                for name in METRIC_COLUMNS:
                    base[name] = report.aggregate(name)
                base["total_pixels"] = report.total_pixels
                rows.append(base)
                for c in report.per_class:
                    class_rows.append({
                        "axis": spec.axis, "train_domain": train_domain,
                        "test_domain": test_domain, "seed": seed,
                        "class_id": c.class_id, "precision": c.precision,
                        "recall": c.recall, "f1": c.f1, "iou": c.iou,
                        "support": c.support,
                    })

    write_report_rows(out / "transfer_rows.csv", rows, TRANSFER_COLUMNS)
    write_report_rows(out / "transfer_per_class.csv", class_rows, TRANSFER_CLASS_COLUMNS)
    _write_transfer_matrix(out / "transfer_matrix.csv", spec, rows)
    return rows


def transfer_matrix(spec: TransferSpec, rows: list[dict]) -> dict[tuple[str, str], float]:
    """(train_domain, test_domain) -> median F1 over seeds, ok rows only."""
    cells: dict[tuple[str, str], list[float]] = {}
    for row in rows:
        if row.get("status") != "ok":
            continue
        key = (str(row["train_domain"]), str(row["test_domain"]))
        cells.setdefault(key, []).append(float(row["f1"]))
    return {key: _median(vals) for key, vals in cells.items()}


def _write_transfer_matrix(path: Path, spec: TransferSpec, rows: list[dict]) -> None:
    matrix = transfer_matrix(spec, rows)
    out_rows = []
    for train_domain in spec.train_domains:
        row = {"train_domain": train_domain}
        for test_domain in spec.test_domains:
            row[test_domain] = matrix.get((train_domain, test_domain), "")
        out_rows.append(row)
    write_report_rows(path, out_rows, ["train_domain", *spec.test_domains])


# ---------------------------------------------------------------------------
# data-size sweep


@dataclass
class SweepSpec:
    model: ModelSpec
    dataset: str
    sizes: list[int] = field(default_factory=lambda: [50, 100, 200, 500, 1000, 5000])
    strategy: str = "full"
    train: TrainConfig = field(default_factory=TrainConfig)
    seeds: list[int] = field(default_factory=lambda: [0])
    pool_patches_per_scene: int = 200
    val_patches_per_scene: int = 4
    pool_seed: int = 1234

    def validate(self) -> None:
        if not self.sizes:
            raise ConfigError("sweep needs at least one size")
        if any(s < 1 for s in self.sizes):
            raise ConfigError(f"sweep sizes must be >= 1, got {self.sizes}")
        if sorted(self.sizes) != self.sizes or len(set(self.sizes)) != len(self.sizes):
            raise ConfigError(f"sweep sizes must be strictly increasing, got {self.sizes}")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}")
        if not self.seeds:
            raise ConfigError("sweep needs at least one seed")
        if self.pool_patches_per_scene < 1:
            raise ConfigError("pool_patches_per_scene must be >= 1")
        self.model.validate()
        self.train.validate()

    @classmethod
    def from_dict(cls, data: dict) -> "SweepSpec":
        data = dict(data)
        try:
            data["model"] = ModelSpec.from_dict(data["model"])
        except KeyError:
            raise ConfigError("sweep config requires a 'model'")
        if "train" in data:
            data["train"] = TrainConfig.from_dict(data["train"])
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown SweepSpec fields: {sorted(unknown)}")
        spec = cls(**data)
        spec.validate()
        return spec

    def cell_hash(self, size: int) -> str:
        train = self.train.to_dict()
        train.pop("seed")
        return config_hash({
            "kind": "sweep_cell", "size": size, "model": self.model.to_dict(),
            "strategy": self.strategy, "train": train, "dataset": str(self.dataset),
            "pool_patches_per_scene": self.pool_patches_per_scene,
            "pool_seed": self.pool_seed,
        })


def subsample_indices(pool_size: int, size: int, seed: int) -> np.ndarray:
    """First ``size`` entries of a seeded permutation of the pool.

    At size == pool_size this is a permutation of the whole pool: every
    patch used exactly once. Larger sizes are a config error upstream.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 271828]))
    return rng.permutation(pool_size)[:size]


def run_sweep(spec: SweepSpec, out_dir: str | Path) -> list[dict]:
    """Train at nested training-set sizes from one fixed patch pool.

    The pool is drawn once from the training split; each (seed, size) cell
    trains a fresh model on a seeded subsample and evaluates on the full
    test split. Emits sweep.csv (long form) and sweep_series.csv (median
    F1/IoU per size).
    """
    spec.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = DatasetManifest.load(spec.dataset)
    channels = channels_for(spec.model.in_channels)

    train_ids = manifest.splits.get("train", [])
    val_ids = manifest.splits.get("val", [])
    test_ids = manifest.splits.get("test", [])
    if not train_ids or not val_ids or not test_ids:
        raise ConfigError("sweep dataset must populate train, val and test splits")

    pool = build_patchset(manifest, train_ids, "random_train", channels,
                          per_scene=spec.pool_patches_per_scene, augment=True,
                          seed=spec.pool_seed)
    if len(pool) < max(spec.sizes):
        raise ConfigError(
            f"patch pool has {len(pool)} patches but the sweep needs "
            f"{max(spec.sizes)}; raise pool_patches_per_scene")
    val_set = build_patchset(manifest, val_ids, "random_train", channels,
                             per_scene=spec.val_patches_per_scene, augment=False,
                             seed=spec.pool_seed + 7919)

    rows: list[dict] = []
    for seed in spec.seeds:
        for size in spec.sizes:
            base = {"size": size, "seed": seed, "config_hash": spec.cell_hash(size),
                    "status": "ok", "error": ""}
            try:
                subset = pool.subset(subsample_indices(len(pool), size, seed))
                model = build(spec.model, seed=seed)
                plan = apply_strategy(model, spec.strategy, seed=seed)
                cfg = TrainConfig(**{**spec.train.to_dict(), "seed": seed})
                result = fit(plan, subset, val_set, cfg)
                report, _, _ = evaluate(plan.model, manifest, test_ids,
                                        batch_size=cfg.batch_size)
                for name in METRIC_COLUMNS:
                    base[name] = report.aggregate(name)
                base["total_pixels"] = report.total_pixels
                base["epochs_run"] = len(result.history)
            except Exception as exc:
                base["status"] = "error"
                base["error"] = f"{type(exc).__name__}: {exc}"
            rows.append(base)

    write_report_rows(out / "sweep.csv", rows, SWEEP_COLUMNS)
    _write_sweep_series(out / "sweep_series.csv", spec, rows)
    return rows


def _write_sweep_series(path: Path, spec: SweepSpec, rows: list[dict]) -> None:
    out_rows = []
    for size in spec.sizes:
        f1s = [float(r["f1"]) for r in rows
               if r.get("status") == "ok" and int(r["size"]) == size]
        ious = [float(r["iou"]) for r in rows
                if r.get("status") == "ok" and int(r["size"]) == size]
        out_rows.append({
            "size": size,
            "median_f1": _median(f1s) if f1s else "",
            "median_iou": _median(ious) if ious else "",
            "runs": len(f1s),
        })
    write_report_rows(path, out_rows, ["size", "median_f1", "median_iou", "runs"])
