"""PPG ingestion, resampling, windowing, label binning, participant splits and a synthetic generator."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.signal import firwin

from .errors import DatasetParseError, ValidationError

TARGET_HZ = 25.0
WINDOW_SECONDS = 8.0
STRIDE_SECONDS = 2.0
WINDOW_SAMPLES = 200
STRIDE_SAMPLES = 50
NUM_BINS = 180
MIN_BPM = 30
FIR_TAPS = 127
FIR_CUTOFF_FRACTION = 0.45


@dataclass
class PpgRecording:
    participant_id: str
    samples: np.ndarray
    sample_rate_hz: float
    hr_series: list[tuple[float, float]]
    source: str = ""

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        self.hr_series = [(float(t), float(b)) for t, b in self.hr_series]

    def validate(self) -> "PpgRecording":
        if not self.participant_id:
            raise ValidationError("participant_id is empty")
        if not (self.sample_rate_hz > 0 and math.isfinite(self.sample_rate_hz)):
            raise ValidationError(f"{self.participant_id}: sample_rate_hz must be > 0, got {self.sample_rate_hz}")
        if not np.isfinite(self.samples).all():
            raise ValidationError(f"{self.participant_id}: non-finite PPG samples")
        times = [t for t, _ in self.hr_series]
        if any(b <= 0 or b >= 300 or not math.isfinite(b) for _, b in self.hr_series):
            raise ValidationError(f"{self.participant_id}: HR values must lie in (0, 300)")
        if any(t1 < t0 for t0, t1 in zip(times, times[1:])):
            raise ValidationError(f"{self.participant_id}: HR times must be nondecreasing")
        return self

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate_hz


@dataclass(frozen=True)
class WindowedSample:
    participant_id: str
    window: np.ndarray  # [1, 200]
    hr_bpm: float
    class_bin: int
    source: str = ""


@dataclass(frozen=True)
class SplitPlan:
    fold: int
    train_participants: frozenset[str]
    test_participants: frozenset[str]

    def select(self, samples: Iterable[WindowedSample]) -> tuple[list[WindowedSample], list[WindowedSample]]:
        train, test = [], []
        for s in samples:
            if s.participant_id in self.train_participants:
                train.append(s)
            elif s.participant_id in self.test_participants:
                test.append(s)
        return train, test


# --------------------------------------------------------------------------- labels


def bin_hr(bpm: float) -> int:
    """1-BPM class bins over 30-210 BPM; out-of-range values clamp to the edge bins."""
    bpm = float(bpm)
    if not math.isfinite(bpm):
        raise ValueError(f"bpm must be finite, got {bpm}")
    return int(min(max(math.floor(bpm) - MIN_BPM, 0), NUM_BINS - 1))


def bin_to_bpm(index) -> float | np.ndarray:
    """Bin centre in BPM. Accepts a scalar index or an integer array."""
    idx = np.asarray(index)
    if idx.dtype.kind not in "iu" and not np.all(np.mod(idx, 1) == 0):
        raise ValueError("bin index must be an integer")
    if np.any(idx < 0) or np.any(idx >= NUM_BINS):
        raise ValueError(f"bin index must lie in [0, {NUM_BINS})")
    out = MIN_BPM + 0.5 + idx.astype(np.float64)
    return float(out) if out.ndim == 0 else out


# --------------------------------------------------------------------------- signal ops


def resample(signal, src_hz: float, dst_hz: float) -> np.ndarray:
    """Low-pass (when downsampling) then linearly interpolate onto the new grid."""
    x = np.asarray(signal, dtype=np.float64)
    if x.size == 0:
        raise ValueError("cannot resample an empty signal")
    if not (src_hz > 0 and dst_hz > 0):
        raise ValueError("sample rates must be > 0")
    if src_hz == dst_hz:
        return x.copy()
    if dst_hz < src_hz:
        taps = firwin(FIR_TAPS, FIR_CUTOFF_FRACTION * dst_hz, fs=src_hz)
        half = FIR_TAPS // 2
        padded = np.pad(x, half, mode="reflect" if x.size > half else "edge")
        x = np.convolve(padded, taps, mode="valid")
    n_out = int(round(x.size * dst_hz / src_hz))
    t_src = np.arange(x.size) / src_hz
    t_dst = np.arange(n_out) / dst_hz
    return np.interp(t_dst, t_src, x)


def window_count(n_samples: int) -> int:
    if n_samples < WINDOW_SAMPLES:
        return 0
    return (n_samples - WINDOW_SAMPLES) // STRIDE_SAMPLES + 1


def window(recording: PpgRecording) -> list[WindowedSample]:
    """8 s windows at a 2 s stride, z-scored, labelled with the mean HR inside each window.

    Windows without any HR point in their span, or with zero variance, are dropped.
    """
    if abs(recording.sample_rate_hz - TARGET_HZ) > 1e-9:
        raise ValueError(f"window() expects {TARGET_HZ} Hz input, got {recording.sample_rate_hz}")
    x = recording.samples
    hr_t = np.array([t for t, _ in recording.hr_series], dtype=np.float64)
    hr_v = np.array([b for _, b in recording.hr_series], dtype=np.float64)
    out = []
    for k in range(window_count(x.size)):
        start = k * STRIDE_SAMPLES
        seg = x[start : start + WINDOW_SAMPLES]
        t0 = start / TARGET_HZ
        t1 = t0 + WINDOW_SECONDS
        in_span = (hr_t >= t0) & (hr_t < t1)
        if not in_span.any():
            continue
        sd = seg.std()
        if sd == 0:
            continue
        z = (seg - seg.mean()) / sd
        hr = float(hr_v[in_span].mean())
        out.append(WindowedSample(recording.participant_id, z[None, :], hr, bin_hr(hr), recording.source))
    return out


def prepare(recording: PpgRecording) -> list[WindowedSample]:
    """Resample to 25 Hz (if needed) and window."""
    if recording.sample_rate_hz != TARGET_HZ:
        recording = PpgRecording(
            recording.participant_id,
            resample(recording.samples, recording.sample_rate_hz, TARGET_HZ),
            TARGET_HZ,
            recording.hr_series,
            recording.source,
        )
    return window(recording)


def stack_samples(samples: Sequence[WindowedSample]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``(X [N,1,200], bins [N], bpm [N])``."""
    X = np.stack([s.window for s in samples]).astype(np.float64)
    bins = np.array([s.class_bin for s in samples], dtype=np.int64)
    bpm = np.array([s.hr_bpm for s in samples], dtype=np.float64)
    return X, bins, bpm


# --------------------------------------------------------------------------- synthetic data


def synth_ppg(
    hr_profile: Sequence[tuple[float, float]],
    duration_s: float,
    noise_level: float = 0.1,
    seed: int = 0,
    sample_rate_hz: float = TARGET_HZ,
    participant_id: str = "synth",
    wander_amplitude: float = 0.5,
) -> PpgRecording:
    """Pulse-like signal following ``hr_profile`` (piecewise-linear in time).

    Fundamental at the instantaneous HR plus 2nd/3rd harmonics (0.4, 0.2),
    sub-0.1 Hz baseline wander and white Gaussian noise. HR ground truth is
    reported once per second.
    """
    if duration_s <= 0:
        raise ValueError("duration_s must be > 0")
    prof_t = np.array([p[0] for p in hr_profile], dtype=np.float64)
    prof_b = np.array([p[1] for p in hr_profile], dtype=np.float64)
    if prof_b.size == 0 or np.any(prof_b <= 30) or np.any(prof_b >= 210):
        raise ValueError("hr_profile values must lie in (30, 210)")
    rng = np.random.default_rng(seed)
    n = int(round(duration_s * sample_rate_hz))
    t = np.arange(n) / sample_rate_hz
    freq = np.interp(t, prof_t, prof_b) / 60.0
    phase = 2 * np.pi * np.cumsum(freq) / sample_rate_hz + rng.uniform(0, 2 * np.pi)
    ph2, ph3 = rng.uniform(0, 2 * np.pi, size=2)
    pulse = np.sin(phase) + 0.4 * np.sin(2 * phase + ph2) + 0.2 * np.sin(3 * phase + ph3)
    wander = np.zeros(n)
    for _ in range(3):
        f = rng.uniform(0.01, 0.09)
        wander += np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
    wander *= wander_amplitude / 3
    noise = rng.normal(0.0, noise_level, size=n) if noise_level > 0 else 0.0
    hr_times = np.arange(0.0, duration_s, 1.0)
    hr_vals = np.interp(hr_times, prof_t, prof_b)
    return PpgRecording(participant_id, pulse + wander + noise, sample_rate_hz, list(zip(hr_times, hr_vals)))


def random_hr_profile(
    duration_s: float,
    rng: np.random.Generator,
    lo: float = 50.0,
    hi: float = 180.0,
    knot_every_s: float = 20.0,
    step_sd: float = 15.0,
) -> list[tuple[float, float]]:
    """Piecewise-linear random walk between ``lo`` and ``hi`` BPM."""
    knots = np.arange(0.0, duration_s + knot_every_s, knot_every_s)
    vals = [rng.uniform(lo, hi)]
    for _ in knots[1:]:
        vals.append(float(np.clip(vals[-1] + rng.normal(0, step_sd), lo, hi)))
    return list(zip(knots.tolist(), vals))


@dataclass(frozen=True)
class SynthCorpus:
    participants: int = 30
    duration_s: float = 80.0
    hr_min: float = 50.0
    hr_max: float = 180.0
    noise_level: float = 0.5
    seed: int = 0
    knot_every_s: float = 20.0
    step_sd: float = 15.0


def synth_corpus(cfg: SynthCorpus = SynthCorpus()) -> list[PpgRecording]:
    rng = np.random.default_rng(cfg.seed)
    recs = []
    for i in range(cfg.participants):
        profile = random_hr_profile(cfg.duration_s, rng, cfg.hr_min, cfg.hr_max, cfg.knot_every_s, cfg.step_sd)
        recs.append(
            synth_ppg(profile, cfg.duration_s, cfg.noise_level, seed=int(rng.integers(2**31)), participant_id=f"p{i:03d}")
        )
    return recs


# --------------------------------------------------------------------------- splits


def split_participants(ids: Iterable[str], train_fraction: float = 0.8, fold: int = 0, seed: int = 0) -> SplitPlan:
    """Participant-independent split; each fold tests a disjoint slice of the shuffled ids."""
    ids = sorted(set(ids))
    if fold not in (0, 1):
        raise ValueError(f"fold must be 0 or 1, got {fold}")
    if not 0 < train_fraction < 1:
        raise ValueError("train_fraction must lie in (0, 1)")
    n = len(ids)
    n_test = int(round(n * (1 - train_fraction)))
    if n < 2 or n_test < 1 or 2 * n_test > n:
        raise ValueError(f"{n} participants cannot form 2 disjoint test folds at train_fraction={train_fraction}")
    order = np.random.default_rng(seed).permutation(n)
    test_idx = order[fold * n_test : (fold + 1) * n_test]
    test = frozenset(ids[i] for i in test_idx)
    return SplitPlan(fold, frozenset(ids) - test, test)


def split_by_source(
    recordings: Sequence[PpgRecording], train_fraction: float = 0.8, fold: int = 0, seed: int = 0
) -> SplitPlan:
    """Per-dataset split: every source contributes its own train/test partition."""
    groups: dict[str, list[str]] = {}
    for r in recordings:
        groups.setdefault(r.source, []).append(r.participant_id)
    train: set[str] = set()
    test: set[str] = set()
    for src in sorted(groups):
        plan = split_participants(groups[src], train_fraction, fold, seed)
        train |= plan.train_participants
        test |= plan.test_participants
    return SplitPlan(fold, frozenset(train), frozenset(test))


# --------------------------------------------------------------------------- file format


def _fmt(x: float) -> str:
    return repr(float(x))


def save_recording(rec: PpgRecording, path: str | Path) -> Path:
    path = Path(path)
    lines = [
        f"participant_id,{rec.participant_id}",
        f"sample_rate_hz,{_fmt(rec.sample_rate_hz)}",
        "ppg," + ",".join(_fmt(v) for v in rec.samples),
        "hr," + ",".join(f"{_fmt(t)}:{_fmt(b)}" for t, b in rec.hr_series),
    ]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def _parse_floats(values: list[str], where: str) -> list[float]:
    try:
        return [float(v) for v in values if v.strip() != ""]
    except ValueError as exc:
        raise DatasetParseError(f"{where}: {exc}") from None


def read_recording(path: str | Path) -> PpgRecording:
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except UnicodeDecodeError as exc:
        raise DatasetParseError(f"{path}: not UTF-8 ({exc})") from None
    expected = ["participant_id", "sample_rate_hz", "ppg", "hr"]
    lines = [ln for ln in lines if ln.strip()]
    if len(lines) != 4:
        raise DatasetParseError(f"{path}: expected 4 lines, found {len(lines)}")
    fields = {}
    for lineno, (line, key) in enumerate(zip(lines, expected), start=1):
        head, _, rest = line.partition(",")
        if head.strip() != key:
            raise DatasetParseError(f"{path}:{lineno}: expected '{key},...', found '{head}'")
        fields[key] = (lineno, rest)
    pid = fields["participant_id"][1].strip()
    lineno, rate_txt = fields["sample_rate_hz"]
    try:
        rate = float(rate_txt)
    except ValueError:
        raise DatasetParseError(f"{path}:{lineno}: bad sample rate {rate_txt!r}") from None
    lineno, ppg_txt = fields["ppg"]
    samples = _parse_floats(ppg_txt.split(","), f"{path}:{lineno}")
    lineno, hr_txt = fields["hr"]
    hr = []
    for item in filter(None, (s.strip() for s in hr_txt.split(","))):
        t, sep, b = item.partition(":")
        if not sep:
            raise DatasetParseError(f"{path}:{lineno}: HR entry {item!r} is not 'time:bpm'")
        hr.append(tuple(_parse_floats([t, b], f"{path}:{lineno}")))
    return PpgRecording(pid, np.array(samples), rate, hr).validate()


def load_dataset(path: str | Path) -> list[PpgRecording]:
    """Load one file, or every ``*.csv`` under a directory.

    The name of the first-level subdirectory becomes the recording's
    ``source`` (used by per-dataset splits).
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    if path.is_file():
        return [read_recording(path)]
    recs = []
    for f in sorted(path.rglob("*.csv")):
        rec = read_recording(f)
        rel = f.relative_to(path).parts
        rec.source = rel[0] if len(rel) > 1 else ""
        recs.append(rec)
    ids = [r.participant_id for r in recs]
    if len(set(ids)) != len(ids):
        raise ValidationError(f"{path}: duplicate participant ids")
    return recs


def write_dataset(recordings: Iterable[PpgRecording], directory: str | Path) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    return [save_recording(r, directory / f"{r.participant_id}.csv") for r in recordings]
