"""Epoch containers, the EPO1 binary format, filtering, windowing, synthetic
oddball data and stratified splitting."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy import signal

from .errors import (
    BadMagicError,
    ConfigurationError,
    DimensionError,
    LengthMismatchError,
    RangeError,
    StratificationError,
    TruncatedError,
)

COHORTS = ("NT", "ALS", "AUT", "SYN")
MAGIC = b"EPO1"
VERSION = 1
# magic, version, n_trials, n_channels, n_samples, fs, t0, cohort, subject, session
_HEADER = struct.Struct("<4sHIHIffBII")


@dataclass
class EpochSet:
    """Stimulus-locked trials, shape ``(n_trials, n_channels, n_samples)`` in µV."""

    data: np.ndarray
    labels: np.ndarray
    sample_rate_hz: float
    t0_s: float
    cohort: str = "SYN"
    subject: int = 0
    session: int = 0

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        if self.data.ndim != 3:
            raise DimensionError(f"data must be (trials, channels, samples), got {self.data.shape}")
        if self.labels.shape != (self.data.shape[0],):
            raise DimensionError(f"{self.labels.shape[0]} labels for {self.data.shape[0]} trials")
        if np.any(self.labels > 1):
            raise ConfigurationError("labels must be 0 or 1")
        if not np.all(np.isfinite(self.data)):
            raise ConfigurationError("epoch data contains non-finite values")
        if self.sample_rate_hz <= 0:
            raise ConfigurationError("sample rate must be positive")
        if self.cohort not in COHORTS:
            raise ConfigurationError(f"unknown cohort tag {self.cohort!r}; expected one of {COHORTS}")
        if not (self.t0_s < 0 < self.t0_s + self.n_samples / self.sample_rate_hz):
            raise RangeError(
                f"stimulus onset must lie inside the epoch (t0={self.t0_s}, "
                f"duration={self.n_samples / self.sample_rate_hz})"
            )

    @property
    def n_trials(self) -> int:
        return self.data.shape[0]

    @property
    def n_channels(self) -> int:
        return self.data.shape[1]

    @property
    def n_samples(self) -> int:
        return self.data.shape[2]

    @property
    def times(self) -> np.ndarray:
        return self.t0_s + np.arange(self.n_samples) / self.sample_rate_hz

    def subset(self, idx) -> "EpochSet":
        return replace(self, data=self.data[idx], labels=self.labels[idx])


# ---------------------------------------------------------------------------
# EPO1 format


def encode_epochs(x: EpochSet) -> bytes:
    header = _HEADER.pack(
        MAGIC, VERSION, x.n_trials, x.n_channels, x.n_samples,
        x.sample_rate_hz, x.t0_s, COHORTS.index(x.cohort), x.subject, x.session,
    )
    return header + x.labels.astype("<u1").tobytes() + x.data.astype("<f4").tobytes()


def decode_epochs(buf: bytes) -> EpochSet:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagicError(f"bad magic {bytes(buf[:4])!r}, expected {MAGIC!r}", offset=0)
    if len(buf) < _HEADER.size:
        raise TruncatedError(
            f"header needs {_HEADER.size} bytes, file has {len(buf)}", offset=len(buf)
        )
    _, version, n, c, t, fs, t0, tag, subject, session = _HEADER.unpack_from(buf, 0)
    if version != VERSION:
        raise LengthMismatchError(f"unsupported EPO1 version {version}", offset=4)
    if tag >= len(COHORTS):
        raise LengthMismatchError(f"unknown cohort tag {tag}", offset=_HEADER.size - 9)
    expected = _HEADER.size + n + 4 * n * c * t
    if len(buf) < expected:
        raise TruncatedError(
            f"payload truncated: expected {expected} bytes for {n}x{c}x{t}, got {len(buf)}",
            offset=len(buf),
        )
    if len(buf) > expected:
        raise LengthMismatchError(
            f"trailing data: expected {expected} bytes for {n}x{c}x{t}, got {len(buf)}",
            offset=expected,
        )
    off = _HEADER.size
    labels = np.frombuffer(buf, dtype="<u1", count=n, offset=off)
    if np.any(labels > 1):
        raise LengthMismatchError("label values must be 0 or 1", offset=off + int(np.argmax(labels > 1)))
    data = np.frombuffer(buf, dtype="<f4", count=n * c * t, offset=off + n).reshape(n, c, t)
    return EpochSet(
        data=data.astype(np.float64), labels=labels.copy(), sample_rate_hz=float(fs),
        t0_s=float(t0), cohort=COHORTS[tag], subject=subject, session=session,
    )


def save_epochs(x: EpochSet, path) -> None:
    Path(path).write_bytes(encode_epochs(x))


def load_epochs(path) -> EpochSet:
    return decode_epochs(Path(path).read_bytes())


def write_manifest(path, entries) -> None:
    """Sidecar manifest: ``entries`` are dicts with path, cohort, subject, session."""
    doc = {"schema_version": 1, "files": list(entries)}
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def read_manifest(path) -> list[dict]:
    path = Path(path)
    doc = json.loads(path.read_text())
    if doc.get("schema_version") != 1 or "files" not in doc:
        raise ConfigurationError(f"{path}: not a version-1 epoch manifest")
    out = []
    for entry in doc["files"]:
        entry = dict(entry)
        p = Path(entry["path"])
        entry["path"] = str(p if p.is_absolute() else path.parent / p)
        out.append(entry)
    return out


def import_csv_epochs(directory, sample_rate_hz: float, t0_s: float,
                      cohort: str = "SYN", subject: int = 0, session: int = 0) -> EpochSet:
    """Build an EpochSet from a directory of per-trial CSV files.

    The directory holds ``labels.csv`` (``file,label`` rows, header optional)
    and one CSV per trial with one row per channel.
    """
    directory = Path(directory)
    label_file = directory / "labels.csv"
    if not label_file.exists():
        raise ConfigurationError(f"{label_file} not found")
    trials, labels = [], []
    for line in label_file.read_text().splitlines():
        line = line.strip()
        if not line or line.lower().startswith("file,"):
            continue
        name, label = (s.strip() for s in line.split(","))
        trials.append(np.loadtxt(directory / name, delimiter=",", ndmin=2))
        labels.append(int(label))
    if not trials:
        raise ConfigurationError(f"{label_file} lists no trials")
    shapes = {t.shape for t in trials}
    if len(shapes) != 1:
        raise DimensionError(f"trial files disagree in shape: {sorted(shapes)}")
    return EpochSet(np.stack(trials), np.array(labels), sample_rate_hz, t0_s, cohort, subject, session)


# ---------------------------------------------------------------------------
# Preprocessing


@dataclass(frozen=True)
class FilterSpec:
    band_low_hz: float = 0.1
    band_high_hz: float = 30.0
    notch_hz: float = 50.0
    notch_q: float = 30.0
    filter_order: int = 4

    def validate(self, sample_rate_hz: float):
        nyq = sample_rate_hz / 2.0
        if not (0 < self.band_low_hz < self.band_high_hz < nyq):
            raise ConfigurationError(
                f"band {self.band_low_hz}-{self.band_high_hz} Hz invalid for Nyquist {nyq} Hz"
            )
        if not (0 < self.notch_hz < nyq):
            raise ConfigurationError(f"notch {self.notch_hz} Hz invalid for Nyquist {nyq} Hz")
        if self.filter_order < 1 or self.notch_q <= 0:
            raise ConfigurationError("filter order and notch Q must be positive")


def filter_sos(spec: FilterSpec, sample_rate_hz: float) -> np.ndarray:
    spec.validate(sample_rate_hz)
    band = signal.butter(
        spec.filter_order, [spec.band_low_hz, spec.band_high_hz],
        btype="bandpass", fs=sample_rate_hz, output="sos",
    )
    b, a = signal.iirnotch(spec.notch_hz, spec.notch_q, fs=sample_rate_hz)
    return np.vstack([band, signal.tf2sos(b, a)])


def filter_array(data: np.ndarray, spec: FilterSpec, sample_rate_hz: float) -> np.ndarray:
    """Zero-phase band-pass + notch along the last axis.

    Epochs are short compared with the 0.1 Hz high-pass time constant, so the
    default odd-extension padding of ``sosfiltfilt`` leaves a slow start-up
    transient. Instead each row has its mean removed (DC lies in the stop band
    anyway) and is zero-padded by ``max(n, fs)`` samples on both sides.
    """
    sos = filter_sos(spec, sample_rate_hz)
    x = np.asarray(data, dtype=np.float64)
    n = x.shape[-1]
    pad = max(n, int(round(sample_rate_hz)))
    zeros = np.zeros(x.shape[:-1] + (pad,))
    padded = np.concatenate([zeros, x - x.mean(axis=-1, keepdims=True), zeros], axis=-1)
    return signal.sosfiltfilt(sos, padded, axis=-1, padtype=None)[..., pad:pad + n]


def bandpass_notch(x: EpochSet, spec: FilterSpec = FilterSpec()) -> EpochSet:
    return replace(x, data=filter_array(x.data, spec, x.sample_rate_hz))


def round_half_up(v: float) -> int:
    return int(math.floor(v + 0.5))


def extract_window(x: EpochSet, start_s: float, end_s: float) -> EpochSet:
    """Crop to ``[start_s, end_s)`` relative to stimulus onset.

    The new sample count is ``round_half_up((end_s - start_s) * fs)`` and the
    new ``t0_s`` is ``start_s``.
    """
    if end_s <= start_s:
        raise RangeError(f"empty window [{start_s}, {end_s}]")
    fs = x.sample_rate_hz
    n_new = round_half_up((end_s - start_s) * fs)
    first = round_half_up((start_s - x.t0_s) * fs)
    rec_end = x.t0_s + x.n_samples / fs
    if first < 0 or first + n_new > x.n_samples:
        raise RangeError(
            f"window [{start_s}, {end_s}] s outside recording [{x.t0_s}, {rec_end}] s"
        )
    return replace(x, data=x.data[:, :, first:first + n_new], t0_s=float(start_s))


# ---------------------------------------------------------------------------
# Synthetic oddball data


@dataclass(frozen=True)
class SynthSpec:
    n_target: int = 400
    n_nontarget: int = 1600
    p300_latency_s: float = 0.35
    p300_width_s: float = 0.075
    p300_amp_uv: float = 5.0
    latency_jitter_s: float = 0.025
    noise_sigma_uv: float = 1.25
    active_channels: tuple | None = None  # None: all channels
    seed: int = 7
    t0_s: float = -0.195


def latency_sample(latency_s: float, t0_s: float, fs: float) -> int:
    return round_half_up((latency_s - t0_s) * fs)


def synth_oddball(spec: SynthSpec, n_channels: int, n_samples: int, fs: float,
                  cohort: str = "SYN", subject: int = 0, session: int = 0) -> EpochSet:
    """Gaussian P300 bumps on target trials plus white noise everywhere.

    The bump centre is snapped to the sample grid so that a noiseless,
    jitter-free target peaks at exactly ``p300_amp_uv``. ``p300_width_s`` is
    the Gaussian standard deviation.
    """
    if spec.n_target < 0 or spec.n_nontarget < 0 or spec.n_target + spec.n_nontarget == 0:
        raise ConfigurationError("need a positive number of trials")
    if spec.p300_width_s <= 0 or spec.latency_jitter_s < 0 or spec.noise_sigma_uv < 0:
        raise ConfigurationError("widths must be positive and jitter/noise non-negative")
    active = tuple(range(n_channels)) if spec.active_channels is None else tuple(spec.active_channels)
    if any(c < 0 or c >= n_channels for c in active):
        raise ConfigurationError(f"active channels {active} outside [0, {n_channels})")

    rng = np.random.default_rng(spec.seed)
    n = spec.n_target + spec.n_nontarget
    labels = np.zeros(n, dtype=np.uint8)
    labels[: spec.n_target] = 1
    labels = labels[rng.permutation(n)]
    data = rng.standard_normal((n, n_channels, n_samples)) * spec.noise_sigma_uv
    jitter = rng.standard_normal(n) * spec.latency_jitter_s

    idx = np.arange(n_samples)
    width = spec.p300_width_s * fs
    chans = np.array(active, dtype=int)
    for i in np.flatnonzero(labels):
        centre = latency_sample(spec.p300_latency_s + jitter[i], spec.t0_s, fs)
        bump = spec.p300_amp_uv * np.exp(-0.5 * ((idx - centre) / width) ** 2)
        data[i, chans, :] += bump
    return EpochSet(data, labels, float(fs), spec.t0_s, cohort, subject, session)


# ---------------------------------------------------------------------------
# Splitting


def split_train_valid(x: EpochSet, ratio: float = 0.8, seed: int = 0) -> tuple[EpochSet, EpochSet]:
    """Stratified seeded split.

    The target stratum keeps ``floor(n_target * ratio)`` trials on the first
    side and the non-target stratum keeps ``ceil(n_nontarget * ratio)``; each
    side keeps the original trial order.
    """
    if not 0 < ratio < 1:
        raise ConfigurationError(f"ratio must lie in (0, 1), got {ratio}")
    rng = np.random.default_rng(seed)
    first, second = [], []
    for label, rounder in ((1, math.floor), (0, math.ceil)):
        idx = np.flatnonzero(x.labels == label)
        if idx.size < 2:
            name = "target" if label else "non-target"
            raise StratificationError(f"{name} class has {idx.size} trials; need at least 2")
        k = min(max(rounder(idx.size * ratio + (1e-9 if rounder is math.floor else -1e-9)), 1), idx.size - 1)
        perm = rng.permutation(idx)
        first.append(perm[:k])
        second.append(perm[k:])
    a = np.sort(np.concatenate(first))
    b = np.sort(np.concatenate(second))
    return x.subset(a), x.subset(b)
