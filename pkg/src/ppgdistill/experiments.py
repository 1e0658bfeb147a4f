"""Desk-scale experiments shared by the scripts and the acceptance suite."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .datapipe import SynthCorpus, split_participants, synth_corpus, window
from .distill import DistillConfig
from .models import ModelSpec
from .trainer import TrainConfig, TrainHistory, evaluate_mae, train

# 30 participants x 80 s (40 min of signal). Knots every 10 s with large
# steps give each participant a wide HR range, so a participant-independent
# test fold sees rates the teacher has actually been trained on.
DESK_CORPUS = SynthCorpus(
    participants=30, duration_s=80.0, hr_min=50.0, hr_max=180.0, noise_level=0.3, seed=0,
    knot_every_s=10.0, step_sd=40.0,
)


@dataclass
class StrategyComparison:
    teacher_mae: float
    teacher_train_mae: float
    maes: dict[str, list[float]] = field(default_factory=dict)
    histories: dict[str, list[TrainHistory]] = field(default_factory=dict)
    seconds: float = 0.0

    def mean(self, strategy: str) -> float:
        return float(np.mean(self.maes[strategy]))

    def means(self) -> dict[str, float]:
        return {k: self.mean(k) for k in self.maes}


def desk_split(corpus: SynthCorpus = DESK_CORPUS, fold: int = 0, split_seed: int = 0):
    recs = synth_corpus(corpus)
    samples = [s for r in recs for s in window(r)]
    plan = split_participants([r.participant_id for r in recs], 0.8, fold, split_seed)
    return plan.select(samples)


def compare_strategies(
    corpus: SynthCorpus = DESK_CORPUS,
    strategies=("scratch", "hard", "soft", "dkd"),
    seeds=(0, 1, 2),
    teacher_blocks: int = 6,
    student_blocks: int = 1,
    epochs: int = 30,
    batch_size: int = 64,
    teacher_seed: int = 100,
    log=None,
) -> StrategyComparison:
    """Train one teacher, then a student per (strategy, seed); report test MAE."""
    t0 = time.perf_counter()
    train_set, test_set = desk_split(corpus)
    teacher, _ = train(ModelSpec.resnet(teacher_blocks), train_set, None,
                       TrainConfig(epochs=epochs, batch_size=batch_size, seed=teacher_seed))
    out = StrategyComparison(evaluate_mae(teacher, test_set), evaluate_mae(teacher, train_set))
    if log:
        log(f"teacher resnet{teacher_blocks}: test MAE {out.teacher_mae:.3f}, train MAE {out.teacher_train_mae:.3f}")
    student = ModelSpec.resnet(student_blocks)
    for seed in seeds:
        for strategy in strategies:
            cfg = TrainConfig(epochs=epochs, batch_size=batch_size, seed=seed, distill=DistillConfig(strategy))
            model, hist = train(student, train_set, None, cfg, None if strategy == "scratch" else teacher)
            mae = evaluate_mae(model, test_set)
            out.maes.setdefault(strategy, []).append(mae)
            out.histories.setdefault(strategy, []).append(hist)
            if log:
                log(f"seed {seed} {strategy:>8}: test MAE {mae:.3f}")
    out.seconds = time.perf_counter() - t0
    return out
