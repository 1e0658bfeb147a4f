"""Distillation losses: hard labels, tempered KL, decoupled KD and feature matching.

Every loss returns ``(loss, grad)`` where ``grad`` is taken with respect to the
student's logits (or features). Teacher inputs are treated as constants.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError
from .numcore import Linear, Tensor, log_softmax, softmax_cross_entropy

STRATEGIES = ("scratch", "hard", "soft", "dkd", "feature")


@dataclass(frozen=True)
class DistillConfig:
    strategy: str = "dkd"
    alpha: float = 1.0
    beta: float = 8.0
    temperature: float = 2.0
    ce_weight: float = 1.0
    feature_weight: float = 1.0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if not self.temperature > 0:
            raise ConfigError("temperature must be > 0")
        for name in ("alpha", "beta", "ce_weight", "feature_weight"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")

    @property
    def needs_teacher(self) -> bool:
        return self.strategy != "scratch"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DistillConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown distill keys: {sorted(unknown)}")
        return cls(**d)


def _check_pair(student: np.ndarray, teacher: np.ndarray) -> None:
    if student.shape != teacher.shape or student.ndim != 2:
        raise ShapeError(f"student {list(student.shape)} and teacher {list(teacher.shape)} logits differ")


def _kl_rows(log_p: np.ndarray, log_q: np.ndarray) -> np.ndarray:
    """Row-wise KL(p || q) from log-probabilities; 0·log 0 terms count as 0."""
    p = np.exp(log_p)
    live = p > 0
    diff = np.where(live, log_p, 0.0) - np.where(live, log_q, 0.0)
    return (p * diff).sum(axis=-1)


def hard_loss(student_logits, teacher_logits):
    """Cross-entropy against the teacher's argmax (lowest index wins ties)."""
    s = np.asarray(student_logits, dtype=np.float64)
    t = np.asarray(teacher_logits, dtype=np.float64)
    _check_pair(s, t)
    return softmax_cross_entropy(s, np.argmax(t, axis=1))


def soft_loss(student_logits, teacher_logits, temperature: float = 2.0):
    """``τ² · mean_b KL(softmax(t/τ) || softmax(s/τ))``."""
    s = np.asarray(student_logits, dtype=np.float64)
    t = np.asarray(teacher_logits, dtype=np.float64)
    _check_pair(s, t)
    tau = float(temperature)
    if not tau > 0:
        raise ConfigError("temperature must be > 0")
    B = s.shape[0]
    log_pt = log_softmax(t / tau)
    log_ps = log_softmax(s / tau)
    loss = tau * tau * _kl_rows(log_pt, log_ps).mean()
    grad = tau * (np.exp(log_ps) - np.exp(log_pt)) / B
    return float(loss), grad


def _dkd_parts(logits: np.ndarray, target: np.ndarray, tau: float):
    """Tempered log-probs split into the binary (target / rest) and non-target views."""
    z = logits / tau
    rows = np.arange(z.shape[0])
    log_p = log_softmax(z)
    masked = z.copy()
    masked[rows, target] = -np.inf
    m = masked.max(axis=1, keepdims=True)
    lse_nt = m[:, 0] + np.log(np.exp(masked - m).sum(axis=1))
    lse = z.max(axis=1) + np.log(np.exp(z - z.max(axis=1, keepdims=True)).sum(axis=1))
    log_pt = log_p[rows, target]
    log_rest = lse_nt - lse
    log_binary = np.stack([log_pt, log_rest], axis=1)
    log_hat = masked - lse_nt[:, None]  # -inf at the target column
    return log_p, log_binary, log_hat


def dkd_components(student_logits, teacher_logits, target, temperature: float = 2.0):
    """Per-sample (TCKD, NCKD) arrays, without the τ² factor or weights."""
    s = np.asarray(student_logits, dtype=np.float64)
    t = np.asarray(teacher_logits, dtype=np.float64)
    _check_pair(s, t)
    target = np.asarray(target, dtype=np.int64)
    _, sb, sh = _dkd_parts(s, target, temperature)
    _, tb, th = _dkd_parts(t, target, temperature)
    tckd = _kl_rows(tb, sb)
    nckd = _kl_rows(th, np.where(np.isfinite(sh), sh, 0.0))
    return tckd, nckd


def dkd_loss(student_logits, teacher_logits, target, alpha=1.0, beta=8.0, temperature=2.0):
    """Decoupled KD: ``τ² · mean_b(α·TCKD + β·NCKD)``.

    ``beta`` may be a scalar or a per-sample array.
    """
    s = np.asarray(student_logits, dtype=np.float64)
    t = np.asarray(teacher_logits, dtype=np.float64)
    _check_pair(s, t)
    B, K = s.shape
    if K < 2:
        raise ShapeError("DKD needs at least 2 classes")
    target = np.asarray(target, dtype=np.int64)
    if target.shape != (B,) or target.min() < 0 or target.max() >= K:
        raise ValueError(f"targets must be {B} indices in [0, {K})")
    tau = float(temperature)
    if not tau > 0:
        raise ConfigError("temperature must be > 0")
    rows = np.arange(B)
    log_ps, sb, sh = _dkd_parts(s, target, tau)
    _, tb, th = _dkd_parts(t, target, tau)
    sh_finite = np.where(np.isfinite(sh), sh, 0.0)
    tckd = _kl_rows(tb, sb)
    nckd = _kl_rows(th, sh_finite)
    alpha = np.asarray(alpha, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    loss = tau * tau * (alpha * tckd + beta * nckd).mean()

    # d/dz with z = s / τ
    p = np.exp(log_ps)
    bt = np.exp(tb)  # teacher [p_t, 1 - p_t]
    rest_s = np.exp(sb[:, 1])
    d_tckd = p.copy()
    d_tckd[rows, target] -= bt[:, 0]
    nt = np.ones_like(p, dtype=bool)
    nt[rows, target] = False
    scale = np.where(rest_s > 0, bt[:, 1] / np.where(rest_s > 0, rest_s, 1.0), 0.0)
    d_tckd -= np.where(nt, p * scale[:, None], 0.0)
    d_nckd = np.where(nt, np.exp(sh_finite) - np.exp(th), 0.0)
    a = np.broadcast_to(alpha, (B,))[:, None]
    b = np.broadcast_to(beta, (B,))[:, None]
    grad = tau * (a * d_tckd + b * d_nckd) / B
    return float(loss), grad


class Projector(Linear):
    """Trainable linear map from student to teacher feature width."""

    def __init__(self, student_dim: int, teacher_dim: int, seed: int = 0):
        super().__init__(student_dim, teacher_dim)
        if student_dim == teacher_dim:
            self.params["weight"].data = np.eye(teacher_dim)
        else:
            rng = np.random.default_rng(seed)
            self.params["weight"].data = rng.normal(0.0, np.sqrt(1.0 / student_dim), size=(teacher_dim, student_dim))

    @property
    def student_dim(self) -> int:
        return self.in_features

    @property
    def teacher_dim(self) -> int:
        return self.out_features

    def named_parameters(self) -> dict[str, Tensor]:
        return {f"projector.{k}": t for k, t in self.params.items()}


def feature_loss(student_features, teacher_features, projector: Projector, weight: float = 1.0):
    """MSE between projected student features and teacher features.

    Returns ``(loss, d_student_features)`` for the unweighted loss; the
    gradients (student features and those accumulated into the projector)
    are scaled by ``weight``.
    """
    fs = np.asarray(student_features, dtype=np.float64)
    ft = np.asarray(teacher_features, dtype=np.float64)
    if fs.ndim != 2 or ft.ndim != 2 or fs.shape[0] != ft.shape[0]:
        raise ShapeError(f"feature batches {list(fs.shape)} / {list(ft.shape)} disagree")
    if fs.shape[1] != projector.student_dim or ft.shape[1] != projector.teacher_dim:
        raise ShapeError(
            f"projector maps {projector.student_dim}->{projector.teacher_dim}, "
            f"features are {fs.shape[1]}->{ft.shape[1]}"
        )
    proj = projector.forward(fs, training=True)
    diff = proj - ft
    loss = float((diff**2).mean())
    d_proj = 2.0 * weight * diff / diff.size
    return loss, projector.backward(d_proj)


@dataclass
class LossResult:
    loss: float
    logit_grad: np.ndarray
    feature_grad: np.ndarray | None = None
    parts: dict = field(default_factory=dict)


def total_loss(
    config: DistillConfig,
    student_logits,
    labels,
    teacher_logits=None,
    student_features=None,
    teacher_features=None,
    projector: Projector | None = None,
) -> LossResult:
    """Combine supervised cross-entropy with the configured distillation term."""
    strategy = config.strategy
    if strategy != "scratch" and teacher_logits is None:
        raise ConfigError(f"strategy {strategy!r} needs teacher outputs")
    if strategy == "scratch":
        ce, g = softmax_cross_entropy(student_logits, labels)
        return LossResult(ce, g, parts={"ce": ce})
    if strategy == "hard":
        h, g = hard_loss(student_logits, teacher_logits)
        return LossResult(h, g, parts={"hard": h})

    ce, g_ce = softmax_cross_entropy(student_logits, labels)
    w = config.ce_weight
    if strategy == "soft":
        kd, g_kd = soft_loss(student_logits, teacher_logits, config.temperature)
        return LossResult(w * ce + kd, w * g_ce + g_kd, parts={"ce": ce, "soft": kd})
    if strategy == "dkd":
        kd, g_kd = dkd_loss(student_logits, teacher_logits, labels, config.alpha, config.beta, config.temperature)
        return LossResult(w * ce + kd, w * g_ce + g_kd, parts={"ce": ce, "dkd": kd})
    # feature
    if teacher_features is None or student_features is None or projector is None:
        raise ConfigError("feature distillation needs student/teacher features and a projector")
    fw = config.feature_weight
    fl, g_f = feature_loss(student_features, teacher_features, projector, weight=fw)
    return LossResult(w * ce + fw * fl, w * g_ce, feature_grad=g_f, parts={"ce": ce, "feature": fl})
