"""Run configuration and the per-subject train / evaluate / analyse steps."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import interpret, metrics
from .epochs import EpochSet, FilterSpec, SynthSpec, bandpass_notch, extract_window, split_train_valid
from .errors import ConfigurationError, DimensionError
from .model import ModelDims, ModelState, load_checkpoint, predict_proba, save_checkpoint
from .training import TrainConfig, fit

log = logging.getLogger(__name__)

CONFIG_SCHEMA_VERSION = 1
CHECKPOINT_FILE = "checkpoint.bin"
EPOCH_LOG_FILE = "epochs.jsonl"
METRICS_FILE = "metrics.json"
SUMMARY_FILE = "summary.json"


@dataclass(frozen=True)
class SynthGeometry:
    n_channels: int = 8
    n_samples: int = 255
    sample_rate_hz: float = 256.0
    cohort: str = "SYN"
    subject: int = 0
    session: int = 0


@dataclass(frozen=True)
class ModelHyper:
    n_channels: int | None = None  # when set, data must match
    n_rules_spatial: int = 5
    n_rules_temporal: int = 5
    latent_dim: int = 16
    out_channels: int | None = None
    out_samples: int | None = None
    hidden: int = 64
    dropout: float = 0.25

    def dims(self, n_channels: int, n_samples: int) -> ModelDims:
        if self.n_channels is not None and self.n_channels != n_channels:
            raise ConfigurationError(
                f"config declares {self.n_channels} channels but the data has {n_channels}"
            )
        kw = asdict(self)
        del kw["n_channels"]
        return ModelDims(n_channels, n_samples, **kw)


@dataclass(frozen=True)
class AnalysisConfig:
    window_s: tuple = interpret.DEFAULT_WINDOW
    alpha: float = 0.05
    reference: str | None = None


@dataclass(frozen=True)
class RunConfig:
    schema_version: int = CONFIG_SCHEMA_VERSION
    synth: SynthSpec = SynthSpec()
    geometry: SynthGeometry = SynthGeometry()
    filter: FilterSpec = FilterSpec()
    preprocess: bool = True
    epoch_window_s: tuple | None = (-0.195, 0.8)
    split_ratio: float = 0.8
    split_seed: int = 0
    train: TrainConfig = TrainConfig()
    model: ModelHyper = ModelHyper()
    analysis: AnalysisConfig = AnalysisConfig()

    def to_dict(self) -> dict:
        return asdict(self)


_SECTIONS = {
    "synth": SynthSpec,
    "geometry": SynthGeometry,
    "filter": FilterSpec,
    "train": TrainConfig,
    "model": ModelHyper,
    "analysis": AnalysisConfig,
}


def config_from_dict(doc: dict) -> RunConfig:
    version = doc.get("schema_version", CONFIG_SCHEMA_VERSION)
    if version != CONFIG_SCHEMA_VERSION:
        raise ConfigurationError(f"unrecognised config schema version {version}")
    kwargs = {}
    known = {f.name for f in fields(RunConfig)}
    for key, value in doc.items():
        if key not in known:
            raise ConfigurationError(f"unknown config key {key!r}")
        if key in _SECTIONS:
            cls = _SECTIONS[key]
            allowed = {f.name for f in fields(cls)}
            bad = set(value) - allowed
            if bad:
                raise ConfigurationError(f"unknown keys in {key!r}: {sorted(bad)}")
            value = {k: tuple(v) if isinstance(v, list) else v for k, v in value.items()}
            kwargs[key] = cls(**value)
        elif key == "epoch_window_s" and value is not None:
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    return RunConfig(**kwargs)


def load_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"config file {path} not found")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: invalid JSON ({exc})") from exc
    return config_from_dict(doc)


def dump_json(obj, path):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------


def preprocess(data: EpochSet, spec: FilterSpec, window: tuple | None, apply_filter: bool = True) -> EpochSet:
    if apply_filter:
        data = bandpass_notch(data, spec)
    if window is not None:
        start, end = window
        if not (np.isclose(start, data.t0_s, atol=0.5 / data.sample_rate_hz)
                and round((end - start) * data.sample_rate_hz) == data.n_samples):
            data = extract_window(data, start, end)
    return data


def train_subject(data: EpochSet, cfg: RunConfig, out_dir, apply_filter: bool | None = None) -> dict:
    """Preprocess, split 8:2, fit and write checkpoint + logs into ``out_dir``.

    Returns the metrics document (also written to metrics.json).
    """
    dims = cfg.model.dims(data.n_channels, data.n_samples)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    apply_filter = cfg.preprocess if apply_filter is None else apply_filter
    data = preprocess(data, cfg.filter, cfg.epoch_window_s, apply_filter)
    train, valid = split_train_valid(data, cfg.split_ratio, cfg.split_seed)
    dims = replace(dims, n_samples=data.n_samples)
    with open(out / EPOCH_LOG_FILE, "w") as fh:
        run = fit(train, valid, cfg.train, dims=dims, epoch_log=fh)

    p = predict_proba(run.model, valid.data, cfg.train.batch_size)
    doc = metrics.evaluation_report(p, valid.labels)
    doc.update({
        "split": "valid",
        "n_trials": int(valid.n_trials),
        "best_epoch": run.best_epoch,
        "epochs_run": run.epochs_run,
        "cohort": data.cohort,
        "subject": int(data.subject),
        "session": int(data.session),
    })
    hyper = {
        "train": asdict(cfg.train),
        "filter": asdict(cfg.filter),
        "preprocess": bool(apply_filter),
        "epoch_window_s": list(cfg.epoch_window_s) if cfg.epoch_window_s else None,
        "data": {
            "t0_s": data.t0_s,
            "sample_rate_hz": data.sample_rate_hz,
            "cohort": data.cohort,
            "subject": int(data.subject),
            "session": int(data.session),
        },
    }
    save_checkpoint(run.model, out / CHECKPOINT_FILE, hyper)
    dump_json(doc, out / METRICS_FILE)
    summary = run.summary()
    summary["metadata"] = {"wall_time_s": run.wall_time_s}
    dump_json(summary, out / SUMMARY_FILE)
    return doc


def evaluate_checkpoint(model: ModelState, hyper: dict, data: EpochSet, apply_filter: bool | None = None) -> dict:
    """Evaluation-mode metrics of a checkpoint on a dataset, reusing the
    checkpoint's recorded preprocessing."""
    if data.n_trials == 0:
        raise ConfigurationError("evaluation data contains no trials")
    if apply_filter is None:
        apply_filter = hyper.get("preprocess", False)
    if apply_filter:
        data = bandpass_notch(data, FilterSpec(**hyper["filter"]))
    window = hyper.get("epoch_window_s")
    data = preprocess(data, FilterSpec(), tuple(window) if window else None, apply_filter=False)
    d = model.dims
    if data.data.shape[1:] != (d.n_channels, d.n_samples):
        raise DimensionError(
            f"checkpoint expects (C, T) = ({d.n_channels}, {d.n_samples}), "
            f"data has {data.data.shape[1:]}"
        )
    p = predict_proba(model, data.data)
    doc = metrics.evaluation_report(p, data.labels)
    doc["n_trials"] = int(data.n_trials)
    return doc


def read_checkpoint_manifest(path) -> dict[str, list]:
    """``{"schema_version": 1, "checkpoints": [{"path", "cohort"}, ...]}`` to
    cohort-grouped ``(model, hyper)`` lists, in manifest order."""
    path = Path(path)
    doc = json.loads(path.read_text())
    if doc.get("schema_version") != 1 or "checkpoints" not in doc:
        raise ConfigurationError(f"{path}: not a version-1 checkpoint manifest")
    groups: dict[str, list] = {}
    for entry in doc["checkpoints"]:
        p = Path(entry["path"])
        p = p if p.is_absolute() else path.parent / p
        model, hyper = load_checkpoint(p)
        cohort = entry.get("cohort") or hyper.get("data", {}).get("cohort")
        if cohort is None:
            raise ConfigurationError(f"{p}: no cohort tag in manifest or checkpoint")
        groups.setdefault(cohort, []).append((model, hyper))
    return groups


def analyze(groups: dict[str, list], out_dir, analysis: AnalysisConfig = AnalysisConfig()):
    if len(groups) < 2:
        raise ConfigurationError(f"analysis needs at least two cohorts, got {sorted(groups)}")
    first = next(iter(groups.values()))[0][1].get("data", {})
    t0 = first.get("t0_s")
    fs = first.get("sample_rate_hz")
    if t0 is None or fs is None:
        raise ConfigurationError("checkpoint lacks time-axis metadata (t0_s, sample_rate_hz)")
    models = {c: [m for m, _ in items] for c, items in groups.items()}
    report = interpret.center_report(models, t0, fs, tuple(analysis.window_s), analysis.alpha, analysis.reference)
    interpret.write_report(report, out_dir)
    return report
