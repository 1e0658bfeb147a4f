"""Experiment runner: single runs, resumable sweeps, benchmarks, fits and reports.

Usage::

    python -m ppgdistill train  --config configs/dkd_single.json --out runs/dkd
    python -m ppgdistill sweep  --config configs/sweep_small.json --out runs/sweep --jobs 2 --resume
    python -m ppgdistill bench  --out runs/bench
    python -m ppgdistill fit    --out runs/sweep
    python -m ppgdistill report --out runs/sweep
    python -m ppgdistill synth  --out data/synth
    python -m ppgdistill inspect runs/dkd/checkpoints/student_resnet1_fold0.npz
"""
from __future__ import annotations

import argparse
import csv
import fcntl
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Iterable

import numpy as np

from . import datapipe
from .datapipe import PpgRecording, SynthCorpus, WindowedSample
from .distill import STRATEGIES, DistillConfig
from .errors import (
    CheckpointError,
    ConfigError,
    DatasetParseError,
    InsufficientDataError,
    TrainingDivergedError,
    ValidationError,
)
from .models import SWEEP_BLOCKS, ModelSpec, build_model, count_params, param_table
from .scaling import BenchResult, ScalingFit, benchmark, fit_exponential, predict_mae
from .trainer import TrainConfig, evaluate, load_checkpoint, save_checkpoint, train

log = logging.getLogger("ppgdistill")

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_PARTIAL = 3
OUT_ENV = "PPGDISTILL_OUT"
LOG_NAME = "cells.jsonl"


# --------------------------------------------------------------------------- config


def _strict(cls, d: Any, where: str) -> dict:
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object, got {type(d).__name__}")
    unknown = set(d) - {f.name for f in fields(cls)}
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    return dict(d)


def _model(d: Any, where: str) -> ModelSpec:
    try:
        return ModelSpec.from_dict(_strict(ModelSpec, d, where))
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None


@dataclass(frozen=True)
class DataConfig:
    source: str = "synthetic"
    path: str | None = None
    synthetic: SynthCorpus = field(default_factory=SynthCorpus)

    @classmethod
    def from_dict(cls, d) -> "DataConfig":
        d = _strict(cls, d, "data")
        if "synthetic" in d:
            d["synthetic"] = SynthCorpus(**_strict(SynthCorpus, d["synthetic"], "data.synthetic"))
        cfg = cls(**d)
        if cfg.source not in ("synthetic", "path"):
            raise ConfigError("data.source must be 'synthetic' or 'path'")
        if cfg.source == "path" and not cfg.path:
            raise ConfigError("data.path is required when data.source == 'path'")
        return cfg


@dataclass(frozen=True)
class SplitConfig:
    train_fraction: float = 0.8
    folds: tuple[int, ...] = (0, 1)
    seed: int = 0
    mode: str = "pooled"

    @classmethod
    def from_dict(cls, d) -> "SplitConfig":
        d = _strict(cls, d, "split")
        if "folds" in d:
            d["folds"] = tuple(d["folds"])
        cfg = cls(**d)
        if not cfg.folds or any(f not in (0, 1) for f in cfg.folds) or len(set(cfg.folds)) != len(cfg.folds):
            raise ConfigError("split.folds must be a nonempty subset of [0, 1]")
        if not 0 < cfg.train_fraction < 1:
            raise ConfigError("split.train_fraction must lie in (0, 1)")
        if cfg.mode not in ("pooled", "per_dataset"):
            raise ConfigError("split.mode must be 'pooled' or 'per_dataset'")
        return cfg


def _train_cfg(d: Any, where: str, distill: DistillConfig) -> TrainConfig:
    d = _strict(TrainConfig, d, where)
    if "distill" in d:
        raise ConfigError(f"{where}: put distillation settings in the top-level 'distill' section")
    return TrainConfig(**d, distill=distill)


@dataclass(frozen=True)
class TeacherConfig:
    model: ModelSpec = field(default_factory=lambda: ModelSpec.resnet(12))
    checkpoint: str | None = None
    train: TrainConfig = field(default_factory=TrainConfig)

    @classmethod
    def from_dict(cls, d) -> "TeacherConfig":
        d = _strict(cls, d, "teacher")
        if "model" in d:
            d["model"] = _model(d["model"], "teacher.model")
        d["train"] = _train_cfg(d.get("train", {}), "teacher.train", DistillConfig(strategy="scratch"))
        return cls(**d)


@dataclass(frozen=True)
class SweepConfig:
    strategies: tuple[str, ...] = ("dkd",)
    teacher_blocks: tuple[int, ...] = (12,)
    student_blocks: tuple[int, ...] = (1, 2, 3, 4, 5, 6, 8, 10)
    student_mlp_widths: tuple[tuple[int, ...], ...] = ()
    include_scratch: bool = True
    size_axis: str = "blocks"

    @classmethod
    def from_dict(cls, d) -> "SweepConfig":
        d = _strict(cls, d, "sweep")
        for k in ("strategies", "teacher_blocks", "student_blocks"):
            if k in d:
                d[k] = tuple(d[k])
        if "student_mlp_widths" in d:
            d["student_mlp_widths"] = tuple(tuple(w) for w in d["student_mlp_widths"])
        cfg = cls(**d)
        bad = [s for s in cfg.strategies if s not in STRATEGIES or s == "scratch"]
        if bad or not cfg.strategies:
            raise ConfigError(f"sweep.strategies must be distillation strategies from {STRATEGIES[1:]}, got {bad}")
        if not cfg.teacher_blocks or any(int(b) < 1 for b in cfg.teacher_blocks):
            raise ConfigError("sweep.teacher_blocks must be positive integers")
        if not (cfg.student_blocks or cfg.student_mlp_widths):
            raise ConfigError("sweep needs student_blocks or student_mlp_widths")
        if any(int(b) < 1 for b in cfg.student_blocks):
            raise ConfigError("sweep.student_blocks must be positive integers")
        if cfg.size_axis not in ("blocks", "params"):
            raise ConfigError("sweep.size_axis must be 'blocks' or 'params'")
        return cfg

    def students(self) -> list[ModelSpec]:
        specs = [ModelSpec.resnet(int(b)) for b in self.student_blocks]
        specs += [ModelSpec.mlp(w) for w in self.student_mlp_widths]
        return specs


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    teacher: TeacherConfig | None = None
    student: ModelSpec = field(default_factory=lambda: ModelSpec.resnet(1))
    distill: DistillConfig = field(default_factory=lambda: DistillConfig(strategy="scratch"))
    train: TrainConfig = field(default_factory=TrainConfig)
    output_dir: str | None = None
    sweep: SweepConfig | None = None

    @classmethod
    def from_dict(cls, d) -> "ExperimentConfig":
        d = _strict(cls, d, "config")
        try:
            distill = DistillConfig.from_dict(_strict(DistillConfig, d.get("distill", {}), "distill"))
        except TypeError as exc:
            raise ConfigError(f"distill: {exc}") from None
        kw: dict[str, Any] = {"distill": distill}
        if "data" in d:
            kw["data"] = DataConfig.from_dict(d["data"])
        if "split" in d:
            kw["split"] = SplitConfig.from_dict(d["split"])
        if d.get("teacher") is not None:
            kw["teacher"] = TeacherConfig.from_dict(d["teacher"])
        if "student" in d:
            kw["student"] = _model(d["student"], "student")
        kw["train"] = _train_cfg(d.get("train", {}), "train", distill)
        if "output_dir" in d:
            kw["output_dir"] = d["output_dir"]
        if d.get("sweep") is not None:
            kw["sweep"] = SweepConfig.from_dict(d["sweep"])
        try:
            cfg = cls(**kw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
        cfg.validate()
        return cfg

    def validate(self) -> None:
        needs_teacher = self.distill.needs_teacher if self.sweep is None else True
        if needs_teacher and self.teacher is None:
            raise ConfigError(
                f"strategy {self.distill.strategy!r} needs a 'teacher' section" if self.sweep is None
                else "a sweep needs a 'teacher' section (training recipe for the teachers)"
            )
        for spec in [self.student] + ([self.teacher.model] if self.teacher else []):
            if spec.num_classes != datapipe.NUM_BINS or spec.input_length != datapipe.WINDOW_SAMPLES:
                raise ConfigError(f"model {spec.label} must take 200-sample windows and emit 180 classes")
            build_model(spec, seed=None)  # raises ConfigError on bad specs

    def to_dict(self) -> dict:
        d = {
            "data": asdict(self.data),
            "split": {**asdict(self.split), "folds": list(self.split.folds)},
            "student": self.student.to_dict(),
            "distill": self.distill.to_dict(),
            "train": {k: v for k, v in self.train.to_dict().items() if k != "distill"},
            "output_dir": self.output_dir,
        }
        if self.teacher is not None:
            d["teacher"] = {
                "model": self.teacher.model.to_dict(),
                "checkpoint": self.teacher.checkpoint,
                "train": {k: v for k, v in self.teacher.train.to_dict().items() if k != "distill"},
            }
        if self.sweep is not None:
            s = asdict(self.sweep)
            d["sweep"] = {k: (list(map(list, v)) if k == "student_mlp_widths" else list(v) if isinstance(v, tuple) else v)
                          for k, v in s.items()}
        return d

    def with_seed(self, seed: int) -> "ExperimentConfig":
        teacher = self.teacher
        if teacher is not None:
            teacher = replace(teacher, train=replace(teacher.train, seed=seed))
        return replace(self, train=replace(self.train, seed=seed), teacher=teacher)


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return ExperimentConfig.from_dict(raw)


# --------------------------------------------------------------------------- data


def load_recordings(cfg: DataConfig) -> list[PpgRecording]:
    if cfg.source == "synthetic":
        return datapipe.synth_corpus(cfg.synthetic)
    return datapipe.load_dataset(cfg.path)


def load_windows(cfg: DataConfig) -> tuple[list[PpgRecording], list[WindowedSample]]:
    recs = load_recordings(cfg)
    samples = [s for r in recs for s in datapipe.prepare(r)]
    return recs, samples


def fold_split(recs, samples, split: SplitConfig, fold: int):
    if split.mode == "per_dataset":
        plan = datapipe.split_by_source(recs, split.train_fraction, fold, split.seed)
    else:
        plan = datapipe.split_participants([r.participant_id for r in recs], split.train_fraction, fold, split.seed)
    return plan.select(samples)


# --------------------------------------------------------------------------- result log


def append_record(path: Path, record: dict) -> None:
    """Append one JSON line under an exclusive lock (safe across processes)."""
    line = json.dumps(record, sort_keys=True) + "\n"
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a", encoding="utf-8") as fh:
        fcntl.flock(fh, fcntl.LOCK_EX)
        try:
            fh.write(line)
            fh.flush()
            os.fsync(fh.fileno())
        finally:
            fcntl.flock(fh, fcntl.LOCK_UN)


def read_records(path: Path) -> list[dict]:
    if not path.exists():
        return []
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(json.loads(line))
    return out


def cell_key(strategy: str, teacher: str | None, student: str, fold: int) -> str:
    return f"{strategy}|{teacher or '-'}|{student}|{fold}"


def _spec_size(spec: ModelSpec) -> int | None:
    return spec.num_blocks if spec.backbone == "resnet1d" else None


def _cell_record(strategy, teacher_spec, student_spec, fold, result=None, train_loss=None, reason=None) -> dict:
    rec = {
        "kind": "cell",
        "key": cell_key(strategy, teacher_spec.label if teacher_spec else None, student_spec.label, fold),
        "strategy": strategy,
        "teacher": teacher_spec.label if teacher_spec else None,
        "teacher_blocks": _spec_size(teacher_spec) if teacher_spec else None,
        "student": student_spec.label,
        "student_backbone": student_spec.backbone,
        "student_blocks": _spec_size(student_spec),
        "student_params": count_params(build_model(student_spec, seed=None)),
        "fold": fold,
        "status": "ok" if reason is None else "failed",
    }
    if result is not None:
        rec.update(mae=result.mae, abs_error_sum=result.abs_error_sum, count=result.count, final_train_loss=train_loss)
    if reason is not None:
        rec["reason"] = reason
    return rec


def latest_records(records: Iterable[dict], kind: str = "cell") -> dict[str, dict]:
    """Last record per key wins (a failed cell may later be rerun successfully)."""
    out: dict[str, dict] = {}
    for r in records:
        if r.get("kind") == kind:
            out[r["key"]] = r
    return out


# --------------------------------------------------------------------------- teacher handling


def _teacher_path(out: Path, spec: ModelSpec, fold: int) -> Path:
    return out / "checkpoints" / f"teacher_{spec.label}_fold{fold}.npz"


def obtain_teacher(cfg: ExperimentConfig, spec: ModelSpec, fold: int, train_set, test_set, out: Path, reuse: bool):
    """Load the configured teacher checkpoint, a cached one, or train it."""
    if cfg.teacher.checkpoint:
        path = Path(cfg.teacher.checkpoint.format(fold=fold, label=spec.label))
        return load_checkpoint(path, expected_spec=spec).model, None
    path = _teacher_path(out, spec, fold)
    if reuse and path.exists():
        return load_checkpoint(path, expected_spec=spec).model, None
    model, hist = train(spec, train_set, None, cfg.teacher.train)
    save_checkpoint(path, model, history=hist, epoch=len(hist))
    res = evaluate(model, test_set)
    rec = {
        "kind": "teacher",
        "key": f"teacher|{spec.label}|{fold}",
        "teacher": spec.label,
        "teacher_blocks": _spec_size(spec),
        "fold": fold,
        "mae": res.mae,
        "abs_error_sum": res.abs_error_sum,
        "count": res.count,
        "final_train_loss": hist.train_loss[-1],
    }
    append_record(out / LOG_NAME, rec)
    return model, rec


# --------------------------------------------------------------------------- single experiment


def run_experiment(cfg: ExperimentConfig, out: str | Path) -> dict:
    """Train (or load) the teacher, train the student per fold, evaluate and write a report."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    recs, samples = load_windows(cfg.data)
    strategy = cfg.distill.strategy
    rows = []
    teachers = []
    for fold in cfg.split.folds:
        train_set, test_set = fold_split(recs, samples, cfg.split, fold)
        teacher = None
        teacher_spec = cfg.teacher.model if cfg.distill.needs_teacher else None
        try:
            if teacher_spec is not None:
                teacher, trec = obtain_teacher(cfg, teacher_spec, fold, train_set, test_set, out, reuse=True)
                if trec:
                    teachers.append(trec)
            ckpt = out / "checkpoints" / f"student_{cfg.student.label}_{strategy}_fold{fold}.npz"
            model, hist = train(cfg.student, train_set, None, cfg.train, teacher, checkpoint_path=ckpt)
            rec = _cell_record(strategy, teacher_spec, cfg.student, fold, evaluate(model, test_set), hist.train_loss[-1])
        except (TrainingDivergedError, FloatingPointError, CheckpointError) as exc:
            rec = _cell_record(strategy, teacher_spec, cfg.student, fold, reason=str(exc))
        append_record(out / LOG_NAME, rec)
        rows.append(rec)
    report = {"config": cfg.to_dict(), "cells": rows, "teachers": teachers, "summary": summarize_cells(rows)}
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return report


def summarize_cells(rows: list[dict]) -> dict:
    ok = [r for r in rows if r["status"] == "ok"]
    if not ok:
        return {"ok": 0, "failed": len(rows)}
    return {
        "ok": len(ok),
        "failed": len(rows) - len(ok),
        "mae_fold_mean": float(np.mean([r["mae"] for r in ok])),
        "mae_pooled": sum(r["abs_error_sum"] for r in ok) / sum(r["count"] for r in ok),
    }


# --------------------------------------------------------------------------- sweep


@dataclass
class SweepResult:
    records: list[dict]

    @property
    def cells(self) -> dict[str, dict]:
        return latest_records(self.records, "cell")

    @property
    def teachers(self) -> dict[str, dict]:
        return latest_records(self.records, "teacher")

    def ok_cells(self) -> list[dict]:
        return [c for c in self.cells.values() if c["status"] == "ok"]

    def failed_cells(self) -> list[dict]:
        return [c for c in self.cells.values() if c["status"] != "ok"]


def plan_cells(cfg: ExperimentConfig) -> list[tuple[str, ModelSpec | None, ModelSpec, int]]:
    """(strategy, teacher spec or None, student spec, fold) for every requested cell."""
    sw = cfg.sweep
    cells = []
    for fold in cfg.split.folds:
        if sw.include_scratch:
            for s in sw.students():
                cells.append(("scratch", None, s, fold))
        for t in sw.teacher_blocks:
            tspec = replace(cfg.teacher.model, backbone="resnet1d", num_blocks=int(t), widths=None)
            for strategy in sw.strategies:
                for s in sw.students():
                    cells.append((strategy, tspec, s, fold))
    return cells


def _cell_worker(cfg_dict: dict, out: str, cell) -> dict:
    cfg = ExperimentConfig.from_dict(cfg_dict)
    strategy, tspec, sspec, fold = cell
    recs, samples = load_windows(cfg.data)
    train_set, test_set = fold_split(recs, samples, cfg.split, fold)
    try:
        teacher = None
        if tspec is not None:
            teacher = load_checkpoint(_teacher_path(Path(out), tspec, fold), expected_spec=tspec).model
        tc = replace(cfg.train, distill=replace(cfg.distill, strategy=strategy))
        model, hist = train(sspec, train_set, None, tc, teacher)
        rec = _cell_record(strategy, tspec, sspec, fold, evaluate(model, test_set), hist.train_loss[-1])
    except (TrainingDivergedError, FloatingPointError, CheckpointError) as exc:
        rec = _cell_record(strategy, tspec, sspec, fold, reason=f"{type(exc).__name__}: {exc}")
    append_record(Path(out) / LOG_NAME, rec)
    return rec


def _teacher_worker(cfg_dict: dict, out: str, tspec: ModelSpec, fold: int) -> None:
    cfg = ExperimentConfig.from_dict(cfg_dict)
    recs, samples = load_windows(cfg.data)
    train_set, test_set = fold_split(recs, samples, cfg.split, fold)
    obtain_teacher(cfg, tspec, fold, train_set, test_set, Path(out), reuse=True)


def run_sweep(cfg: ExperimentConfig, out: str | Path, jobs: int = 1, resume: bool = False) -> SweepResult:
    """Run every planned cell not yet completed; teachers are trained once per size and fold."""
    if cfg.sweep is None:
        raise ConfigError("config has no 'sweep' section")
    out = Path(out)
    log_path = out / LOG_NAME
    existing = read_records(log_path)
    if existing and not resume:
        raise ConfigError(f"{log_path} already has results; pass --resume to continue the sweep")
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    done = {k for k, r in latest_records(existing).items() if r["status"] == "ok"}
    todo = [c for c in plan_cells(cfg) if cell_key(c[0], c[1].label if c[1] else None, c[2].label, c[3]) not in done]
    teachers = sorted({(c[1], c[3]) for c in todo if c[1] is not None}, key=lambda t: (t[1], t[0].num_blocks))
    cfg_dict = cfg.to_dict()
    log.info("sweep: %d cells to run (%d already done), %d teachers", len(todo), len(done), len(teachers))

    if jobs <= 1:
        for tspec, fold in teachers:
            _teacher_worker(cfg_dict, str(out), tspec, fold)
        for c in todo:
            rec = _cell_worker(cfg_dict, str(out), c)
            log.info("%s -> %s", rec["key"], rec.get("mae", rec["status"]))
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            list(pool.map(_teacher_worker, [cfg_dict] * len(teachers), [str(out)] * len(teachers),
                          [t for t, _ in teachers], [f for _, f in teachers]))
            list(pool.map(_cell_worker, [cfg_dict] * len(todo), [str(out)] * len(todo), todo))
    return SweepResult(read_records(log_path))


# --------------------------------------------------------------------------- report


def _mean_by(cells: list[dict], key_fn) -> dict:
    groups: dict = {}
    for c in cells:
        groups.setdefault(key_fn(c), []).append(c)
    return {
        k: {
            "mae": float(np.mean([c["mae"] for c in v])),
            "mae_pooled": sum(c["abs_error_sum"] for c in v) / sum(c["count"] for c in v),
            "folds": len(v),
        }
        for k, v in groups.items()
    }


def _size(cell: dict, axis: str) -> float:
    if axis == "params" or cell.get("student_blocks") is None:
        return float(cell["student_params"])
    return float(cell["student_blocks"])


def sweep_fits(result: SweepResult, size_axis: str = "blocks") -> list[dict]:
    """One fit per (strategy, teacher, student backbone) column, or an insufficient-data marker."""
    cells = result.ok_cells()
    groups = _mean_by(cells, lambda c: (c["strategy"], c["teacher"], c["student_backbone"],
                                        _size(c, "params" if c["student_backbone"] == "mlp" else size_axis)))
    columns: dict = {}
    for (strategy, teacher, backbone, size), v in groups.items():
        columns.setdefault((strategy, teacher, backbone), []).append((size, v["mae"]))
    fits = []
    for (strategy, teacher, backbone), pts in sorted(columns.items(), key=lambda kv: tuple(str(x) for x in kv[0])):
        pts.sort()
        axis = "params" if backbone == "mlp" else size_axis
        row = {"strategy": strategy, "teacher": teacher or "From scratch", "student_backbone": backbone,
               "size_axis": axis, "n_points": len(pts), "sizes": [p[0] for p in pts], "maes": [p[1] for p in pts]}
        try:
            fit = fit_exponential([p[0] for p in pts], [p[1] for p in pts], size_axis=axis)
            row.update(status="ok", **{k: getattr(fit, k) for k in ("a", "b", "c", "rmse", "r2")})
        except InsufficientDataError as exc:
            row.update(status="insufficient_data", reason=str(exc))
        fits.append(row)
    return fits


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow(["" if v is None else (repr(float(v)) if isinstance(v, (float, np.floating)) else v) for v in r])


def _label_sort(label: str):
    digits = "".join(ch for ch in label if ch.isdigit())
    return (label.rstrip("0123456789x"), int(digits) if digits else 0, label)


PARAM_TABLE = "params_vs_reference.csv"


def write_param_table(out: str | Path) -> list[dict]:
    """Built parameter counts next to the reference ones, one row per sweep size."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    pt = param_table()
    cols = ["blocks", "params", "reference_params", "delta", "ratio"]
    _write_csv(out / PARAM_TABLE, cols, [[r[k] for k in cols] for r in pt])
    return pt


def emit_report(
    result: SweepResult,
    out: str | Path,
    fits: list[dict] | None = None,
    bench: list[BenchResult | dict] | None = None,
    size_axis: str = "blocks",
) -> dict:
    """Write result tables, scaling fits, benchmarks and plot series. A pure view of the records."""
    cells = result.ok_cells()
    if not cells:
        raise ValueError("no completed cells to report")
    out = Path(out)
    if out.exists() and not os.access(out, os.W_OK):
        raise PermissionError(f"{out} is not writable")
    out.mkdir(parents=True, exist_ok=True)
    fits = sweep_fits(result, size_axis) if fits is None else fits
    files = []

    # raw cells
    all_cells = sorted(result.cells.values(), key=lambda c: c["key"])
    cols = ["strategy", "teacher", "student", "student_blocks", "student_params", "fold", "status", "mae",
            "abs_error_sum", "count", "final_train_loss", "reason"]
    _write_csv(out / "cells.csv", cols, [[c.get(k) for k in cols] for c in all_cells])
    files.append("cells.csv")

    # "From scratch" + teacher columns per strategy (fold-mean and pooled)
    means = _mean_by(cells, lambda c: (c["strategy"], c["teacher"], c["student"]))
    students = sorted({c["student"] for c in cells}, key=_label_sort)
    teachers = sorted({c["teacher"] for c in cells if c["teacher"]}, key=_label_sort)
    strategies = [s for s in STRATEGIES if s != "scratch" and any(c["strategy"] == s for c in cells)]
    for strategy in strategies or ["scratch"]:
        for metric, suffix in (("mae", ""), ("mae_pooled", "_pooled")):
            rows = []
            for s in students:
                base = means.get(("scratch", None, s), {}).get(metric)
                rows.append([s, base] + [means.get((strategy, t, s), {}).get(metric) for t in teachers])
            name = f"matrix_{strategy}{suffix}.csv"
            _write_csv(out / name, ["student", "From scratch"] + teachers, rows)
            files.append(name)

    # strategy x student size at the largest teacher
    if teachers:
        top = teachers[-1]
        rows = []
        for strategy in ["scratch"] + strategies:
            t = None if strategy == "scratch" else top
            rows.append([strategy] + [means.get((strategy, t, s), {}).get("mae") for s in students])
        _write_csv(out / "strategy_table.csv", ["strategy"] + students, rows)
        files.append("strategy_table.csv")

    # fits + plot series
    fcols = ["strategy", "teacher", "student_backbone", "size_axis", "n_points", "status", "a", "b", "c", "rmse", "r2"]
    _write_csv(out / "fits.csv", fcols, [[f.get(k) for k in fcols] for f in fits])
    files.append("fits.csv")
    series_dir = out / "series"
    series_dir.mkdir(exist_ok=True)
    for f in fits:
        name = f"series/{f['strategy']}_{f['teacher'].replace(' ', '_')}_{f['student_backbone']}.csv"
        rows = []
        if f["status"] == "ok":
            fit = ScalingFit(f["a"], f["b"], f["c"], f["rmse"], f["r2"], f["n_points"], f["size_axis"])
            grid = np.linspace(min(f["sizes"]), max(f["sizes"]), 50)
            obs = dict(zip(f["sizes"], f["maes"]))
            for x in sorted(set(grid.tolist()) | set(f["sizes"])):
                rows.append([x, obs.get(x), predict_mae(fit, x)])
        else:
            rows = [[x, y, None] for x, y in zip(f["sizes"], f["maes"])]
        _write_csv(out / name, ["size", "observed_mae", "fitted_mae"], rows)
        files.append(name)

    # benchmark table
    bench_rows = [b.to_dict() if isinstance(b, BenchResult) else dict(b) for b in (bench or [])]
    if bench_rows:
        bcols = ["label", "num_params", "batch_size", "repetitions", "mean_s", "std_s", "transient_bytes",
                 "param_bytes", "memory_bytes"]
        _write_csv(out / "bench.csv", bcols, [[b.get(k) for k in bcols] for b in bench_rows])
        files.append("bench.csv")

    pt = write_param_table(out)
    files.append(PARAM_TABLE)

    summary = {
        "cells_ok": len(cells),
        "cells_failed": len(result.failed_cells()),
        "failed": [{"key": c["key"], "reason": c.get("reason")} for c in result.failed_cells()],
        "teachers": sorted(result.teachers.values(), key=lambda r: r["key"]),
        "fits": fits,
        "bench": bench_rows,
        "params_vs_reference": pt,
        "files": sorted(files),
    }
    (out / "report.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


# --------------------------------------------------------------------------- bench


def run_bench(blocks=(1, 2, 4, 8, 12), batch_size: int = 32, repetitions: int = 10, warmup: int = 3,
              seed: int = 0) -> list[BenchResult]:
    """Benchmarks must run alone: called serially, never from a worker pool."""
    return [benchmark(build_model(ModelSpec.resnet(b), seed=seed), batch_size, repetitions, warmup, seed) for b in blocks]


# --------------------------------------------------------------------------- argparse


def _out_dir(args, cfg: ExperimentConfig | None = None) -> Path:
    out = args.out or (cfg.output_dir if cfg else None) or os.environ.get(OUT_ENV)
    if not out:
        raise ConfigError(f"no output directory: pass --out, set output_dir, or set ${OUT_ENV}")
    return Path(out)


def _load(args) -> ExperimentConfig:
    if not args.config:
        raise ConfigError("--config is required")
    cfg = load_config(args.config)
    return cfg.with_seed(args.seed) if args.seed is not None else cfg


def cmd_train(args) -> int:
    cfg = _load(args)
    report = run_experiment(cfg, _out_dir(args, cfg))
    print(json.dumps(report["summary"], indent=2))
    return EXIT_OK if report["summary"].get("failed", 0) == 0 else EXIT_PARTIAL


def cmd_sweep(args) -> int:
    cfg = _load(args)
    if cfg.sweep is None:
        raise ConfigError("config has no 'sweep' section")
    out = _out_dir(args, cfg)
    result = run_sweep(cfg, out, jobs=args.jobs, resume=args.resume)
    bench = json.loads((out / "bench.json").read_text()) if (out / "bench.json").exists() else None
    emit_report(result, out, bench=bench, size_axis=cfg.sweep.size_axis)
    print(f"{len(result.ok_cells())} cells ok, {len(result.failed_cells())} failed -> {out}")
    return EXIT_OK if not result.failed_cells() else EXIT_PARTIAL


def cmd_bench(args) -> int:
    out = _out_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    blocks = [int(b) for b in args.blocks.split(",")] if args.blocks else list(SWEEP_BLOCKS)
    res = run_bench(blocks, args.batch_size, args.repetitions, seed=args.seed or 0)
    rows = [r.to_dict() for r in res]
    (out / "bench.json").write_text(json.dumps(rows, indent=2) + "\n")
    write_param_table(out)
    for r in rows:
        print(f"{r['label']:>10} params={r['num_params']:>8} time={r['mean_s']:.5f}±{r['std_s']:.5f}s "
              f"mem={r['memory_bytes'] / 1e6:.3f}MB")
    return EXIT_OK


def cmd_fit(args) -> int:
    if args.csv:
        with open(args.csv, newline="") as fh:
            rows = [r for r in csv.DictReader(fh)]
        fit = fit_exponential([float(r["size"]) for r in rows], [float(r["mae"]) for r in rows])
        print(json.dumps(fit.to_dict(), indent=2))
        return EXIT_OK
    out = _out_dir(args)
    fits = sweep_fits(SweepResult(read_records(out / LOG_NAME)), args.size_axis)
    (out / "fits.json").write_text(json.dumps(fits, indent=2) + "\n")
    for f in fits:
        if f["status"] == "ok":
            print(f"{f['strategy']:>8} {f['teacher']:>12}: a={f['a']:.4f} b={f['b']:.4g} c={f['c']:.4f} "
                  f"rmse={f['rmse']:.4f} r2={f['r2']:.4f} (n={f['n_points']})")
        else:
            print(f"{f['strategy']:>8} {f['teacher']:>12}: insufficient data (n={f['n_points']})")
    return EXIT_OK


def cmd_report(args) -> int:
    out = _out_dir(args)
    result = SweepResult(read_records(out / LOG_NAME))
    bench = json.loads((out / "bench.json").read_text()) if (out / "bench.json").exists() else None
    summary = emit_report(result, out, bench=bench, size_axis=args.size_axis)
    print("\n".join(summary["files"]))
    return EXIT_OK if summary["cells_failed"] == 0 else EXIT_PARTIAL


def cmd_synth(args) -> int:
    out = _out_dir(args)
    corpus = load_config(args.config).data.synthetic if args.config else SynthCorpus()
    overrides = {k: v for k, v in (("participants", args.participants), ("duration_s", args.duration),
                                   ("noise_level", args.noise), ("seed", args.seed)) if v is not None}
    corpus = replace(corpus, **overrides)
    paths = datapipe.write_dataset(datapipe.synth_corpus(corpus), out)
    print(f"wrote {len(paths)} recordings to {out}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    info = {
        "spec": ck.model.spec.to_dict(),
        "num_params": count_params(ck.model),
        "epoch": ck.epoch,
        "optimizer_step": ck.optimizer.step if ck.optimizer else None,
        "has_projector": ck.projector is not None,
        "final_train_loss": ck.history.train_loss[-1] if ck.history.train_loss else None,
    }
    print(json.dumps(info, indent=2))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ppgdistill", description="PPG heart-rate distillation experiments")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="experiment config (JSON)")
        sp.add_argument("--out", help=f"output directory (default: config output_dir or ${OUT_ENV})")
        sp.add_argument("--seed", type=int, default=None)
        return sp

    common(sub.add_parser("train", help="run one distillation experiment")).set_defaults(func=cmd_train)
    sp = common(sub.add_parser("sweep", help="run a teacher x student x strategy sweep"))
    sp.add_argument("--jobs", type=int, default=1)
    sp.add_argument("--resume", action="store_true", help="skip cells already completed")
    sp.set_defaults(func=cmd_sweep)
    sp = common(sub.add_parser("bench", help="inference time / memory benchmark"), config=False)
    sp.add_argument("--blocks", help="comma-separated block counts (default: full sweep)")
    sp.add_argument("--batch-size", type=int, default=32)
    sp.add_argument("--repetitions", type=int, default=10)
    sp.set_defaults(func=cmd_bench)
    sp = common(sub.add_parser("fit", help="fit exponential scaling curves"), config=False)
    sp.add_argument("--csv", help="CSV with 'size' and 'mae' columns instead of a sweep directory")
    sp.add_argument("--size-axis", choices=["blocks", "params"], default="blocks")
    sp.set_defaults(func=cmd_fit)
    sp = common(sub.add_parser("report", help="rebuild report files from a sweep directory"), config=False)
    sp.add_argument("--size-axis", choices=["blocks", "params"], default="blocks")
    sp.set_defaults(func=cmd_report)
    sp = common(sub.add_parser("synth", help="write a synthetic dataset in the participant file format"))
    sp.add_argument("--participants", type=int)
    sp.add_argument("--duration", type=float, help="seconds per participant")
    sp.add_argument("--noise", type=float)
    sp.set_defaults(func=cmd_synth)
    sp = sub.add_parser("inspect", help="print a checkpoint's spec and parameter count")
    sp.add_argument("checkpoint")
    sp.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ValidationError, DatasetParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (CheckpointError, FileNotFoundError, PermissionError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
