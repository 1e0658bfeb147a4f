"""Training loop, teacher-to-student distillation, MAE evaluation and checkpoints."""
from __future__ import annotations

import io
import json
import logging
import os
import time
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .datapipe import WindowedSample, bin_to_bpm, stack_samples
from .distill import DistillConfig, Projector, total_loss
from .errors import CheckpointError, ConfigError, TrainingDivergedError
from .models import Model, ModelSpec, build_model
from .numcore import Adam, AdamState

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 300
    lr: float = 5e-4
    batch_size: int = 128
    seed: int = 0
    distill: DistillConfig = field(default_factory=lambda: DistillConfig(strategy="scratch"))
    teacher_checkpoint: str | None = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not self.lr > 0:
            raise ConfigError("lr must be > 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["distill"] = self.distill.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown train keys: {sorted(unknown)}")
        d = dict(d)
        if isinstance(d.get("distill"), dict):
            d["distill"] = DistillConfig.from_dict(d["distill"])
        return cls(**d)


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_mae: list[float] = field(default_factory=list)
    epoch_seconds: list[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.train_loss)

    def metrics(self) -> dict:
        """Everything except wall-clock timings."""
        return {"train_loss": list(self.train_loss), "val_mae": list(self.val_mae)}

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainHistory":
        return cls(**d)


@dataclass(frozen=True)
class WindowArrays:
    """Stacked windows: inputs [N,1,200], class bins [N], ground-truth BPM [N]."""

    X: np.ndarray
    bins: np.ndarray
    bpm: np.ndarray

    def __len__(self) -> int:
        return len(self.bins)

    @classmethod
    def from_samples(cls, samples: Sequence[WindowedSample]) -> "WindowArrays":
        if len(samples) == 0:
            raise ValueError("no samples")
        return cls(*stack_samples(samples))


def as_arrays(data) -> WindowArrays:
    if isinstance(data, WindowArrays):
        return data
    return WindowArrays.from_samples(data)


# --------------------------------------------------------------------------- evaluation


@dataclass(frozen=True)
class EvalResult:
    mae: float
    abs_error_sum: float
    count: int


def predict_bpm(model: Model, X: np.ndarray, batch_size: int = 256) -> np.ndarray:
    preds = []
    for i in range(0, len(X), batch_size):
        logits, _ = model.forward(X[i : i + batch_size], training=False)
        preds.append(bin_to_bpm(np.argmax(logits, axis=1)))
    return np.concatenate(preds)


def evaluate(model: Model, data, batch_size: int = 256) -> EvalResult:
    arr = as_arrays(data)
    err = np.abs(predict_bpm(model, arr.X, batch_size) - arr.bpm)
    return EvalResult(float(err.mean()), float(err.sum()), int(err.size))


def evaluate_mae(model: Model, samples, batch_size: int = 256) -> float:
    """Mean |bin-centre prediction - true BPM| over the given windows."""
    if len(samples) == 0:
        raise ValueError("evaluate_mae needs at least one sample")
    return evaluate(model, samples, batch_size).mae


# --------------------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    model: Model
    optimizer: AdamState | None
    projector: Projector | None
    history: TrainHistory
    epoch: int
    meta: dict


def save_checkpoint(
    path: str | Path,
    model: Model,
    optimizer: AdamState | None = None,
    *,
    projector: Projector | None = None,
    history: TrainHistory | None = None,
    epoch: int = 0,
    extra: dict | None = None,
) -> Path:
    path = Path(path)
    arrays = dict(model.state_arrays())
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "spec": model.spec.to_dict(),
        "epoch": epoch,
        "history": (history or TrainHistory()).to_dict(),
        "extra": extra or {},
    }
    if optimizer is not None:
        meta["optimizer"] = {
            "step": optimizer.step,
            "beta1": optimizer.beta1,
            "beta2": optimizer.beta2,
            "eps": optimizer.eps,
        }
        for k in optimizer.m:
            arrays[f"adam_m/{k}"] = optimizer.m[k]
            arrays[f"adam_v/{k}"] = optimizer.v[k]
    if projector is not None:
        meta["projector"] = [projector.student_dim, projector.teacher_dim]
        for k, t in projector.params.items():
            arrays[f"projector/{k}"] = t.data
    arrays["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    os.replace(tmp, path)
    return path


def load_checkpoint(path: str | Path, expected_spec: ModelSpec | None = None) -> Checkpoint:
    path = Path(path)
    try:
        with np.load(path, allow_pickle=False) as z:
            arrays = {k: z[k] for k in z.files}
    except (zipfile.BadZipFile, EOFError, ValueError, OSError) as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from None
    if "__meta__" not in arrays:
        raise CheckpointError(f"{path}: missing metadata")
    meta = json.loads(arrays.pop("__meta__").tobytes().decode())
    if meta.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: format version {meta.get('format_version')} != {CHECKPOINT_VERSION}")
    spec = ModelSpec.from_dict(meta["spec"])
    if expected_spec is not None and spec != expected_spec:
        raise CheckpointError(f"{path}: checkpoint spec {spec} does not match expected {expected_spec}")
    model = build_model(spec, seed=None)
    state = {k: v for k, v in arrays.items() if k.startswith(("param/", "buffer/"))}
    try:
        model.load_state_arrays(state)
    except ValueError as exc:
        raise CheckpointError(f"{path}: {exc}") from None
    opt = None
    if "optimizer" in meta:
        o = meta["optimizer"]
        opt = AdamState(step=o["step"], beta1=o["beta1"], beta2=o["beta2"], eps=o["eps"])
        for k, v in arrays.items():
            if k.startswith("adam_m/"):
                opt.m[k[7:]] = v.copy()
            elif k.startswith("adam_v/"):
                opt.v[k[7:]] = v.copy()
    projector = None
    if "projector" in meta:
        projector = Projector(*meta["projector"])
        for k in projector.params:
            projector.params[k].data = arrays[f"projector/{k}"].copy()
    return Checkpoint(model, opt, projector, TrainHistory.from_dict(meta["history"]), meta["epoch"], meta)


# --------------------------------------------------------------------------- training


def _epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def train(
    student_spec: ModelSpec,
    train_data,
    val_data=None,
    config: TrainConfig = TrainConfig(),
    teacher: Model | None = None,
    *,
    resume_from: str | Path | None = None,
    checkpoint_path: str | Path | None = None,
    checkpoint_every: int = 0,
) -> tuple[Model, TrainHistory]:
    """Train a student; distil from ``teacher`` when the strategy asks for one.

    The teacher only ever runs in evaluation mode. With ``resume_from`` the
    run continues from a saved epoch up to ``config.epochs``; the per-epoch
    shuffle seed makes that identical to an uninterrupted run.
    """
    dcfg = config.distill
    if dcfg.needs_teacher and teacher is None:
        raise ConfigError(f"strategy {dcfg.strategy!r} requires a teacher model")
    if not dcfg.needs_teacher and teacher is not None:
        raise ConfigError("strategy 'scratch' must not be given a teacher")
    train_arr = as_arrays(train_data)
    val_arr = as_arrays(val_data) if val_data is not None and len(val_data) else None

    if resume_from is not None:
        ckpt = load_checkpoint(resume_from, expected_spec=student_spec)
        student, history, start_epoch = ckpt.model, ckpt.history, ckpt.epoch
        projector = ckpt.projector
        opt_state = ckpt.optimizer or AdamState()
    else:
        student = build_model(student_spec, seed=config.seed)
        history, start_epoch, projector, opt_state = TrainHistory(), 0, None, AdamState()
    if dcfg.strategy == "feature" and projector is None:
        projector = Projector(student.feature_dim, teacher.feature_dim, seed=config.seed + 1)

    params = student.named_parameters()
    if projector is not None:
        params.update(projector.named_parameters())
    opt = Adam(params, lr=config.lr, state=opt_state)

    n = len(train_arr)
    for epoch in range(start_epoch, config.epochs):
        t0 = time.perf_counter()
        order = _epoch_order(config.seed, epoch, n)
        total, seen = 0.0, 0
        for b, i in enumerate(range(0, n, config.batch_size)):
            idx = order[i : i + config.batch_size]
            xb = train_arr.X[idx]
            yb = train_arr.bins[idx]
            opt.zero_grad()
            logits, feats = student.forward(xb, training=True)
            t_logits = t_feats = None
            if teacher is not None:
                t_logits, t_feats = teacher.forward(xb, training=False)
            res = total_loss(dcfg, logits, yb, t_logits, feats, t_feats, projector)
            if not np.isfinite(res.loss):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch} batch {b} ({dcfg.strategy}, {student_spec.label}): {res.parts}"
                )
            student.backward(res.logit_grad, res.feature_grad)
            opt.step()
            total += res.loss * len(idx)
            seen += len(idx)
        history.train_loss.append(total / seen)
        history.val_mae.append(evaluate(student, val_arr).mae if val_arr is not None else float("nan"))
        history.epoch_seconds.append(time.perf_counter() - t0)
        log.debug("epoch %d loss %.4f val_mae %.3f", epoch, history.train_loss[-1], history.val_mae[-1])
        if checkpoint_path and checkpoint_every and (epoch + 1) % checkpoint_every == 0:
            save_checkpoint(checkpoint_path, student, opt.state, projector=projector, history=history, epoch=epoch + 1)

    if checkpoint_path:
        save_checkpoint(checkpoint_path, student, opt.state, projector=projector, history=history, epoch=config.epochs)
    return student, history
