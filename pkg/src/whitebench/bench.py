"""End-to-end experiment orchestration.

A plan is a list of cells (scenario, background, whitening, model,
methods); running it generates datasets, fits whitening transforms, trains
models, computes attributions for correctly-predicted test samples, scores
them, and aggregates. Every artifact is cached under a content hash of its
inputs, so re-running an unchanged plan touches nothing and changed config
fields invalidate exactly the dependent artifacts.

Cells run in a thread pool; each cell writes only into its own directory
and manifest updates are serialized.
"""

from __future__ import annotations

import csv
import hashlib
import json
import threading
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import attribution, datagen, metrics, models, serialize, whitening

WHITENINGS = ("none",) + tuple(m for m in whitening.METHODS if m != "none")
MODELS = ("llr", "mlp", "cnn")


class CalibrationError(RuntimeError):
    """The accuracy target is unreachable even at the maximum SNR weight."""


@dataclass(frozen=True)
class PlanCell:
    scenario: str
    background: str
    whitening: str
    model: str
    methods: tuple

    def __post_init__(self):
        if self.scenario not in datagen.SCENARIOS:
            raise ValueError(f"unknown scenario {self.scenario!r}")
        if self.background not in datagen.BACKGROUNDS:
            raise ValueError(f"unknown background {self.background!r}")
        if self.whitening not in WHITENINGS:
            raise ValueError(f"unknown whitening {self.whitening!r}")
        if self.model not in MODELS:
            raise ValueError(f"unknown model {self.model!r}")
        for m in self.methods:
            if m not in attribution.ALL_METHODS:
                raise ValueError(f"unknown attribution method {m!r}")

    @property
    def cell_id(self) -> str:
        return f"{self.scenario}-{self.background}-{self.whitening}-{self.model}"

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario,
            "background": self.background,
            "whitening": self.whitening,
            "model": self.model,
            "methods": list(self.methods),
        }


@dataclass(frozen=True)
class ExperimentPlan:
    cells: tuple
    seed: int = 0
    n_samples: int = 2000
    height: int = 8
    width: int = 8
    smooth_sigma: float = 3.0
    split: tuple = (0.8, 0.1, 0.1)
    alphas: dict = field(default_factory=dict)  # "SCENARIO-BACKGROUND" -> alpha
    epochs: int = 500
    batch_size: int | None = None
    method_config: attribution.MethodConfig = field(default_factory=attribution.MethodConfig)

    def __post_init__(self):
        ids = [c.cell_id for c in self.cells]
        if len(set(ids)) != len(ids):
            raise ValueError("plan cells must be unique")

    def data_config(self, cell: PlanCell) -> datagen.ScenarioConfig:
        key = f"{cell.scenario}-{cell.background}"
        alpha = self.alphas.get(key)
        return datagen.ScenarioConfig(
            scenario=cell.scenario,
            background=cell.background,
            n_samples=self.n_samples,
            height=self.height,
            width=self.width,
            alpha=alpha,
            smooth_sigma=self.smooth_sigma,
            seed=self.seed,
            split=self.split,
        )

    def train_config(self, cell: PlanCell) -> models.TrainConfig:
        return models.TrainConfig(
            epochs=self.epochs,
            lr=models.learning_rate_for(cell.scenario),
            batch_size=self.batch_size,
            seed=self.seed,
        )

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "data": {
                "n_samples": self.n_samples,
                "height": self.height,
                "width": self.width,
                "smooth_sigma": self.smooth_sigma,
                "split": list(self.split),
                "alphas": dict(self.alphas),
            },
            "train": {"epochs": self.epochs, "batch_size": self.batch_size},
            "methods_config": self.method_config.to_dict(),
            "cells": [c.to_dict() for c in self.cells],
        }

    @classmethod
    def from_dict(cls, d) -> "ExperimentPlan":
        data = d.get("data", {})
        train = d.get("train", {})
        mc = {k: v for k, v in d.get("methods_config", {}).items()}
        if "lime_kernel_width" in mc and mc["lime_kernel_width"] is not None:
            mc["lime_kernel_width"] = float(mc["lime_kernel_width"])
        cells = tuple(
            PlanCell(
                scenario=c["scenario"],
                background=c["background"],
                whitening=c.get("whitening", "none"),
                model=c["model"],
                methods=tuple(c.get("methods", ("saliency",))),
            )
            for c in d.get("cells", [])
        )
        return cls(
            cells=cells,
            seed=d.get("seed", 0),
            n_samples=data.get("n_samples", 2000),
            height=data.get("height", 8),
            width=data.get("width", 8),
            smooth_sigma=data.get("smooth_sigma", 3.0),
            split=tuple(data.get("split", (0.8, 0.1, 0.1))),
            alphas=dict(data.get("alphas", {})),
            epochs=train.get("epochs", 500),
            batch_size=train.get("batch_size"),
            method_config=attribution.MethodConfig(**mc),
        )


def load_plan(path) -> ExperimentPlan:
    return ExperimentPlan.from_dict(serialize.load_json(path))


def content_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


def _is_cached(meta_path: Path, input_hash: str) -> bool:
    if not meta_path.exists():
        return False
    try:
        meta = serialize.load_json(meta_path)
    except (OSError, json.JSONDecodeError):
        return False
    if meta.get("input_hash") != input_hash:
        return False
    payload = meta.get("payload")
    return payload is None or (meta_path.parent / payload).exists()


def _stamp(meta_path: Path, input_hash: str) -> None:
    meta = serialize.load_json(meta_path)
    meta["input_hash"] = input_hash
    serialize.dump_json(meta, meta_path)


class _Workspace:
    """Output directory layout plus artifact-level locking."""

    def __init__(self, out_dir):
        self.root = Path(out_dir)
        for sub in ("datasets", "transforms", "cells"):
            (self.root / sub).mkdir(parents=True, exist_ok=True)
        self._locks: dict = {}
        self._locks_guard = threading.Lock()
        self.manifest_lock = threading.Lock()

    def lock_for(self, key: str) -> threading.Lock:
        with self._locks_guard:
            return self._locks.setdefault(key, threading.Lock())


def ensure_dataset(ws: _Workspace, config: datagen.ScenarioConfig) -> tuple:
    """Generate (or reuse) the dataset for ``config``; returns (dataset, hash)."""
    h = content_hash(config.to_dict())
    path = ws.root / "datasets" / f"{config.scenario}-{config.background}-{h}.json"
    with ws.lock_for(f"dataset:{h}"):
        if _is_cached(path, h):
            return datagen.Dataset.load(path), h
        ds = datagen.generate_dataset(config)
        ds.save(path)
        _stamp(path, h)
        return ds, h


def ensure_transform(ws: _Workspace, dataset, dataset_hash: str, method: str):
    h = content_hash({"dataset": dataset_hash, "method": method})
    name = f"{dataset.config.scenario}-{dataset.config.background}-{method}-{h}.json"
    path = ws.root / "transforms" / name
    with ws.lock_for(f"transform:{h}"):
        if _is_cached(path, h):
            return whitening.WhiteningTransform.load(path), h
        wd = whitening.whiten_dataset(dataset, method)
        wd.transform.save(path)
        _stamp(path, h)
        return wd.transform, h


def _model_inputs(dataset, transform):
    """The flat pixel matrix the model sees (whitened + rescaled if fitted)."""
    flat = dataset.flat_pixels()
    if transform is None or transform.method == "none":
        return flat
    return transform.apply(flat, rescale=True)


def run_cell(ws: _Workspace, plan: ExperimentPlan, cell: PlanCell) -> dict:
    """Execute one cell end to end, reusing cached artifacts where possible."""
    started = time.time()
    record = {"cell": cell.to_dict(), "status": "ok", "files": {}, "error": None}
    try:
        data_cfg = plan.data_config(cell)
        dataset, ds_hash = ensure_dataset(ws, data_cfg)
        record["files"]["dataset"] = f"datasets/{data_cfg.scenario}-{data_cfg.background}-{ds_hash}.json"

        transform = None
        tr_hash = "none"
        if cell.whitening != "none":
            transform, tr_hash = ensure_transform(ws, dataset, ds_hash, cell.whitening)

        cell_dir = ws.root / "cells" / cell.cell_id
        cell_dir.mkdir(parents=True, exist_ok=True)

        train_cfg = plan.train_config(cell)
        model_hash = content_hash(
            {
                "dataset": ds_hash,
                "transform": tr_hash,
                "model": cell.model,
                "train": train_cfg.to_dict(),
            }
        )
        model_path = cell_dir / "model.json"
        pixels = _model_inputs(dataset, transform)
        wrapped = _PixelView(pixels, dataset.labels, dataset.split_indices)
        if _is_cached(model_path, model_hash):
            trained = models.TrainedModel.load(model_path)
        else:
            model = models.build_model(cell.model, plan.height, plan.width, seed=plan.seed)
            trained = models.train(model, wrapped, train_cfg)
            trained.save(model_path)
            _stamp(model_path, model_hash)
        record["files"]["model"] = str(model_path.relative_to(ws.root))
        record["test_accuracy"] = trained.test_accuracy
        record["gate_passed"] = trained.gate_passed

        if not trained.gate_passed:
            record["status"] = "gate_failed"
            record["reason"] = (
                f"test accuracy {trained.test_accuracy:.3f} below {models.ACCURACY_GATE:.2f};"
                " excluded from aggregate statistics"
            )
            return record

        test_idx = dataset.split_indices[2]
        preds = trained.model.predict(pixels[test_idx])
        correct = test_idx[preds == dataset.labels[test_idx]]

        method_cfg = plan.method_config
        metric_rows = []
        for method in cell.methods:
            attr_hash = content_hash(
                {"model": model_hash, "method": method, "config": method_cfg.to_dict()}
            )
            attr_path = cell_dir / f"attributions-{method}.json"
            if _is_cached(attr_path, attr_hash):
                maps = _load_attributions(attr_path)
            elif method == "pfi":
                # One global map from the full test split, repeated per sample.
                global_map = attribution.pfi(
                    trained.model, pixels[test_idx], dataset.labels[test_idx], method_cfg
                )
                maps = np.tile(
                    global_map.reshape(1, plan.height, plan.width), (len(correct), 1, 1)
                )
                _save_attributions(attr_path, cell, method, correct, maps, attr_hash)
            else:
                maps = attribution.explain_batch(
                    trained.model,
                    pixels[correct],
                    method,
                    method_cfg,
                    sample_indices=correct,
                    height=plan.height,
                    width=plan.width,
                )
                _save_attributions(attr_path, cell, method, correct, maps, attr_hash)
            record["files"][f"attributions-{method}"] = str(attr_path.relative_to(ws.root))

            for row, sample_id in enumerate(correct):
                mask = dataset.masks[sample_id]
                metric_rows.append(
                    {
                        "scenario": cell.scenario,
                        "background": cell.background,
                        "whitening": cell.whitening,
                        "model": cell.model,
                        "method": method,
                        "sample_id": int(sample_id),
                        "precision": metrics.precision_at_k(maps[row], mask),
                        "emd_score": metrics.emd_score(maps[row], mask),
                    }
                )

        metrics_path = cell_dir / "metrics.csv"
        _write_metrics_csv(metrics_path, metric_rows)
        record["files"]["metrics"] = str(metrics_path.relative_to(ws.root))
    except Exception as exc:  # cell errors never abort the run
        record["status"] = "error"
        record["error"] = f"{type(exc).__name__}: {exc}"
    record["wall_clock_s"] = round(time.time() - started, 3)
    return record


@dataclass
class _PixelView:
    """Adapter giving models.train() a dataset-like view of any pixel matrix."""

    _pixels: np.ndarray
    labels: np.ndarray
    split_indices: tuple

    def flat_pixels(self):
        return self._pixels


def _save_attributions(path: Path, cell: PlanCell, method: str, sample_ids, maps, input_hash):
    payload = path.with_suffix(".bin")
    layout = serialize.write_payload(payload, [("maps", maps, "f8")])
    serialize.dump_json(
        {
            "format_version": serialize.FORMAT_VERSION,
            "kind": "attributions",
            "cell": cell.to_dict(),
            "method": method,
            "sample_ids": [int(i) for i in sample_ids],
            "payload": payload.name,
            "layout": layout,
            "input_hash": input_hash,
        },
        path,
    )


def _load_attributions(path: Path) -> np.ndarray:
    meta = serialize.load_json(path)
    arrays = serialize.read_payload(Path(path).parent / meta["payload"], meta["layout"])
    return arrays["maps"]


def _write_metrics_csv(path: Path, rows) -> None:
    fields = [
        "scenario",
        "background",
        "whitening",
        "model",
        "method",
        "sample_id",
        "precision",
        "emd_score",
    ]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in rows:
            out = dict(row)
            out["precision"] = repr(float(row["precision"]))
            out["emd_score"] = repr(float(row["emd_score"]))
            writer.writerow(out)


def run(plan: ExperimentPlan, out_dir, jobs: int = 1, cell_filter: str | None = None) -> dict:
    """Execute a plan; returns the manifest dict (also written to disk)."""
    ws = _Workspace(out_dir)
    cells = [c for c in plan.cells if cell_filter is None or cell_filter in c.cell_id]
    manifest = {
        "format_version": serialize.FORMAT_VERSION,
        "plan": plan.to_dict(),
        "cells": {},
    }

    def _task(cell):
        record = run_cell(ws, plan, cell)
        with ws.manifest_lock:
            manifest["cells"][cell.cell_id] = record
            serialize.dump_json(manifest, ws.root / "manifest.json")
        return record

    if jobs <= 1:
        for cell in cells:
            _task(cell)
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            list(pool.map(_task, cells))

    if manifest["cells"]:
        aggregate(ws.root, ws.root)
    serialize.dump_json(manifest, ws.root / "manifest.json")
    return manifest


# --------------------------------------------------------------------------
# aggregation


def read_metrics(paths) -> list:
    rows = []
    for path in paths:
        with open(path, newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                row["precision"] = float(row["precision"])
                row["emd_score"] = float(row["emd_score"])
                rows.append(row)
    return rows


def summarize(rows) -> list:
    """Mean/median/quartiles of both metrics per experiment group."""
    groups: dict = {}
    for row in rows:
        key = (row["scenario"], row["background"], row["whitening"], row["model"], row["method"])
        groups.setdefault(key, []).append(row)
    out = []
    for key in sorted(groups):
        bucket = groups[key]
        entry = dict(
            zip(("scenario", "background", "whitening", "model", "method"), key)
        )
        entry["count"] = len(bucket)
        for metric in ("precision", "emd_score"):
            vals = np.array([r[metric] for r in bucket])
            q1, med, q3 = np.percentile(vals, [25, 50, 75])
            entry[f"{metric}_mean"] = float(vals.mean())
            entry[f"{metric}_median"] = float(med)
            entry[f"{metric}_q1"] = float(q1)
            entry[f"{metric}_q3"] = float(q3)
        out.append(entry)
    return out


def write_pgm16(path, values01: np.ndarray) -> None:
    """16-bit binary PGM (big-endian sample bytes, per the format spec)."""
    img = np.clip(np.asarray(values01, dtype=np.float64), 0.0, 1.0)
    data = np.round(img * 65535.0).astype(">u2")
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(data.tobytes())


def aggregate(run_dir, out_dir) -> Path:
    """Summary CSV plus mean-|attribution| heatmaps from a finished run.

    Cells that failed the accuracy gate have no metrics files and so drop
    out naturally; heatmaps average over correctly-predicted test samples
    and are skipped for RIGID, whose ground truth moves per sample.
    """
    run_dir, out_dir = Path(run_dir), Path(out_dir)
    metric_files = sorted(run_dir.glob("cells/*/metrics.csv"))
    rows = read_metrics(metric_files)
    summary = summarize(rows)
    out_dir.mkdir(parents=True, exist_ok=True)
    summary_path = out_dir / "summary.csv"
    fields = [
        "scenario", "background", "whitening", "model", "method", "count",
        "precision_mean", "precision_median", "precision_q1", "precision_q3",
        "emd_score_mean", "emd_score_median", "emd_score_q1", "emd_score_q3",
    ]
    with open(summary_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for entry in summary:
            writer.writerow(
                {k: repr(v) if isinstance(v, float) else v for k, v in entry.items()}
            )

    heat_dir = out_dir / "heatmaps"
    heat_dir.mkdir(exist_ok=True)
    for attr_path in sorted(run_dir.glob("cells/*/attributions-*.json")):
        meta = serialize.load_json(attr_path)
        if meta["cell"]["scenario"] == "RIGID":
            continue  # no static ground-truth pattern to average against
        maps = _load_attributions(attr_path)
        mean_abs = np.abs(maps).mean(axis=0)
        peak = mean_abs.max()
        if peak > 0:
            mean_abs = mean_abs / peak
        cell_id = attr_path.parent.name
        stem = f"{cell_id}-{meta['method']}"
        write_pgm16(heat_dir / f"{stem}.pgm", mean_abs)
        with open(heat_dir / f"{stem}.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            for row in mean_abs:
                writer.writerow([repr(float(v)) for v in row])
    return summary_path


# --------------------------------------------------------------------------
# SNR calibration


def calibrate_alpha(
    scenario: str,
    background: str,
    model_name: str,
    target: float = models.ACCURACY_GATE,
    n_samples: int = 2000,
    split=(0.5, 0.1, 0.4),
    epochs: int = 500,
    seed: int = 0,
    grid_resolution: int = 64,
) -> float:
    """Smallest alpha on a 1/64 grid whose trained model hits the target.

    Bisects the grid assuming accuracy grows with alpha. Raises
    :class:`CalibrationError` if even alpha = 1 misses the target.
    """

    def accuracy_at(k: int) -> float:
        alpha = k / grid_resolution
        cfg = datagen.ScenarioConfig(
            scenario, background, n_samples=n_samples, alpha=alpha, seed=seed, split=split
        )
        ds = datagen.generate_dataset(cfg)
        model = models.build_model(model_name, cfg.height, cfg.width, seed=seed)
        train_cfg = models.TrainConfig(
            epochs=epochs, lr=models.learning_rate_for(scenario), seed=seed
        )
        return models.train(model, ds, train_cfg).test_accuracy

    if accuracy_at(grid_resolution) < target:
        raise CalibrationError(
            f"{scenario}-{background}-{model_name}: target {target} unreachable at alpha=1"
        )
    lo, hi = 0, grid_resolution
    while lo < hi:
        mid = (lo + hi) // 2
        if accuracy_at(mid) >= target:
            hi = mid
        else:
            lo = mid + 1
    return hi / grid_resolution
