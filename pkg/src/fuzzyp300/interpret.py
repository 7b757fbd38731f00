"""Centre reconstruction and cohort-level comparison of learned prototypes.

A rule centre ``mu_k`` lives in the latent space reached by the query
projection ``u = P x + b``. Mapping it back with ``x = P^+ (mu_k - b)`` gives
a channel pattern (spatial bank) or a waveform over the epoch (temporal bank).
Waveforms from models trained on different cohorts are then compared sample
by sample with a one-way ANOVA, Welch post-hoc tests against a reference
cohort and, at each sample, one Holm correction over the omnibus and post-hoc
tests.
"""

from __future__ import annotations

import csv
import datetime as _dt
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from .errors import ConfigurationError, DimensionError
from .model import FuzzyRuleBank, ModelState
from .tensor import pseudoinverse

REPORT_SCHEMA_VERSION = 1
DEFAULT_WINDOW = (0.25, 0.50)


@dataclass
class ReconstructedCenter:
    rule: int
    kind: str  # "spatial" | "temporal"
    cohort: str
    pattern: np.ndarray
    t0_s: float | None = None
    sample_rate_hz: float | None = None

    @property
    def times(self) -> np.ndarray | None:
        if self.kind != "temporal" or self.sample_rate_hz is None:
            return None
        return self.t0_s + np.arange(self.pattern.size) / self.sample_rate_hz


def reconstruct_center(bank: FuzzyRuleBank, rule: int, kind: str = "temporal", cohort: str = "SYN",
                       t0_s: float | None = None, sample_rate_hz: float | None = None,
                       rel_tol: float | None = None) -> ReconstructedCenter:
    """Signal-domain pattern of one rule: ``P^+ (mu_k - b_k)``."""
    if not 0 <= rule < bank.n_rules:
        raise DimensionError(f"rule {rule} outside [0, {bank.n_rules})")
    p = bank.query_w.value[rule]
    u = bank.centers.value[rule] - bank.query_b.value[rule]
    x = pseudoinverse(p, rel_tol) @ u
    return ReconstructedCenter(rule, kind, cohort, x, t0_s, sample_rate_hz)


def reconstruct_model(model: ModelState, cohort: str, t0_s: float, sample_rate_hz: float):
    """``(spatial_centers, temporal_centers)`` for every rule of a model."""
    spatial = [reconstruct_center(model.spatial, k, "spatial", cohort) for k in range(model.spatial.n_rules)]
    temporal = [
        reconstruct_center(model.temporal, k, "temporal", cohort, t0_s, sample_rate_hz)
        for k in range(model.temporal.n_rules)
    ]
    return spatial, temporal


# ---------------------------------------------------------------------------
# Point-wise statistics


def holm(pvals, axis: int = -1) -> np.ndarray:
    """Holm step-down adjusted p-values along ``axis``; NaNs stay NaN and are
    left out of the family."""
    p = np.moveaxis(np.asarray(pvals, dtype=np.float64), axis, -1)
    out = np.full_like(p, np.nan)
    flat_p = p.reshape(-1, p.shape[-1])
    flat_o = out.reshape(-1, p.shape[-1])
    for row_p, row_o in zip(flat_p, flat_o):
        valid = np.flatnonzero(~np.isnan(row_p))
        m = valid.size
        if m == 0:
            continue
        order = valid[np.argsort(row_p[valid], kind="stable")]
        adj = np.maximum.accumulate(row_p[order] * (m - np.arange(m)))
        row_o[order] = np.minimum(adj, 1.0)
    return np.moveaxis(out, -1, axis)


def _zero_within(ss_within, ss_total_raw):
    return ss_within <= 1e-20 * np.maximum(ss_total_raw, np.finfo(float).tiny)


def oneway_anova(groups) -> tuple[np.ndarray, np.ndarray, tuple[int, int], np.ndarray]:
    """Column-wise one-way ANOVA over a list of ``(n_i, T)`` arrays.

    Returns ``(F, p, (df_between, df_within), zero_variance_flag)``. Samples
    with zero within-group variance get ``F = p = NaN`` and a set flag.
    """
    groups = [np.atleast_2d(np.asarray(g, dtype=np.float64)) for g in groups]
    k = len(groups)
    n = np.array([g.shape[0] for g in groups])
    N = n.sum()
    means = np.stack([g.mean(axis=0) for g in groups])
    grand = np.concatenate(groups).mean(axis=0)
    ss_between = np.sum(n[:, None] * (means - grand) ** 2, axis=0)
    ss_within = sum(np.sum((g - m) ** 2, axis=0) for g, m in zip(groups, means))
    raw = sum(np.sum(g ** 2, axis=0) for g in groups)
    df_b, df_w = k - 1, N - k
    flagged = _zero_within(ss_within, raw)
    with np.errstate(divide="ignore", invalid="ignore"):
        F = (ss_between / df_b) / (ss_within / df_w)
    F = np.where(flagged, np.nan, F)
    p = np.where(flagged, np.nan, stats.f.sf(np.where(flagged, 0.0, F), df_b, df_w))
    return F, p, (int(df_b), int(df_w)), flagged


def welch_test(a, b) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Column-wise Welch two-sample t-test; returns ``(t, df, p)``."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    na, nb = a.shape[0], b.shape[0]
    va = a.var(axis=0, ddof=1) / na
    vb = b.var(axis=0, ddof=1) / nb
    se2 = va + vb
    raw = np.sum(a ** 2, axis=0) + np.sum(b ** 2, axis=0)
    flagged = _zero_within(se2 * (na + nb), raw)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (a.mean(axis=0) - b.mean(axis=0)) / np.sqrt(se2)
        df = se2 ** 2 / (va ** 2 / (na - 1) + vb ** 2 / (nb - 1))
    t = np.where(flagged, np.nan, t)
    df = np.where(flagged, np.nan, df)
    p = np.where(flagged, np.nan, 2.0 * stats.t.sf(np.abs(np.nan_to_num(t)), np.nan_to_num(df, nan=1.0)))
    return t, df, p


@dataclass
class PointwiseStats:
    F: np.ndarray
    p: np.ndarray
    df: tuple[int, int]
    pairs: list  # [(cohort, reference), ...]
    pairwise_p: np.ndarray  # (n_pairs, T)
    corrected_anova_p: np.ndarray  # (T,)
    corrected_pairwise_p: np.ndarray  # (n_pairs, T)
    corrected_p: np.ndarray  # max(corrected ANOVA p, smallest corrected pairwise p)
    mask: np.ndarray
    flagged: np.ndarray
    alpha: float


def pointwise_anova(groups: dict, alpha: float = 0.05, reference: str | None = None) -> PointwiseStats:
    """Per-sample one-way ANOVA across cohorts with Welch post-hoc tests.

    ``groups`` maps cohort name to an ``(n_replicates, T)`` array. Post-hoc
    tests compare each cohort with ``reference`` (``"NT"`` when present,
    otherwise the first cohort). At every sample the ANOVA p and the post-hoc
    p-values form one Holm family; the sample enters the mask when the
    corrected ANOVA p and at least one corrected post-hoc p fall below
    ``alpha``. Samples with zero within-group variance are flagged and never
    masked.
    """
    names = list(groups)
    if len(names) < 2:
        raise ConfigurationError(f"need at least two cohorts, got {names}")
    arrays = [np.atleast_2d(np.asarray(groups[c], dtype=np.float64)) for c in names]
    for c, g in zip(names, arrays):
        if g.shape[0] < 2:
            raise ConfigurationError(f"cohort {c!r} has {g.shape[0]} replicate(s); need at least 2")
    lengths = {g.shape[1] for g in arrays}
    if len(lengths) != 1:
        raise DimensionError(f"waveform lengths differ across cohorts: {sorted(lengths)}")
    if reference is None:
        reference = "NT" if "NT" in names else names[0]
    if reference not in groups:
        raise ConfigurationError(f"reference cohort {reference!r} not among {names}")

    F, p, df, flagged = oneway_anova(arrays)
    pairs = [(c, reference) for c in names if c != reference]
    ref = arrays[names.index(reference)]
    pair_p = np.stack([welch_test(arrays[names.index(c)], ref)[2] for c, _ in pairs])
    # one Holm family per sample: the omnibus test plus every post-hoc test
    family = holm(np.vstack([p[None], pair_p]), axis=0)
    anova_corrected, corrected = family[0], family[1:]
    with np.errstate(invalid="ignore"):
        gate = np.fmax(anova_corrected, np.fmin.reduce(corrected, axis=0))
        gate = np.where(np.isnan(anova_corrected) | np.all(np.isnan(corrected), axis=0), np.nan, gate)
        mask = (gate < alpha) & ~flagged
    return PointwiseStats(F, p, df, pairs, pair_p, anova_corrected, corrected, gate, mask,
                          flagged | np.isnan(gate), alpha)


# ---------------------------------------------------------------------------
# Embedding


@dataclass
class CenterEmbedding:
    coords: np.ndarray  # (n, 2)
    explained: np.ndarray  # (2,) fractions of total variance
    components: np.ndarray  # (2, L)
    mean: np.ndarray  # (L,)
    cohorts: list = field(default_factory=list)


def embed_centers(centers, n_components: int = 2) -> CenterEmbedding:
    """Principal-component projection of mean-centred patterns.

    Each component is signed so that its largest-magnitude loading is positive.
    """
    if len(centers) and isinstance(centers[0], ReconstructedCenter):
        cohorts = [c.cohort for c in centers]
        X = np.stack([c.pattern for c in centers])
    else:
        X = np.atleast_2d(np.asarray(centers, dtype=np.float64))
        cohorts = []
    if X.shape[0] < 2:
        raise ConfigurationError(f"need at least 2 centres to embed, got {X.shape[0]}")
    mean = X.mean(axis=0)
    Xc = X - mean
    _, s, vt = np.linalg.svd(Xc, full_matrices=False)
    comps = np.zeros((n_components, X.shape[1]))
    k = min(n_components, vt.shape[0])
    comps[:k] = vt[:k]
    for i in range(k):
        j = np.argmax(np.abs(comps[i]))
        if comps[i, j] < 0:
            comps[i] = -comps[i]
    var = s ** 2
    total = var.sum()
    explained = np.zeros(n_components)
    if total > 0:
        explained[:k] = var[:k] / total
    return CenterEmbedding(Xc @ comps.T, explained, comps, mean, cohorts)


# ---------------------------------------------------------------------------
# Cohort report


@dataclass
class CenterReport:
    cohorts: list
    times: np.ndarray
    window: tuple
    waveforms: dict  # rule -> {cohort: (n_rep, T)}
    topographies: dict  # rule -> {cohort: (n_rep, C)}
    stats: dict  # rule -> PointwiseStats
    embeddings: dict  # rule -> (CenterEmbedding, [(cohort, replicate), ...])

    def window_mask(self) -> np.ndarray:
        lo, hi = self.window
        return (self.times >= lo) & (self.times <= hi)

    def significant_in_window(self) -> dict:
        w = self.window_mask()
        return {r: bool(np.any(s.mask & w)) for r, s in self.stats.items()}

    def summary(self) -> dict:
        pre = self.times < 0
        in_window = self.significant_in_window()
        rules = []
        for r, s in self.stats.items():
            emb = self.embeddings[r][0]
            rules.append({
                "rule": int(r),
                "n_significant": int(s.mask.sum()),
                "n_flagged": int(s.flagged.sum()),
                "significant_in_window": in_window[r],
                "prestimulus_false_positive_fraction": float(s.mask[pre].mean()) if pre.any() else 0.0,
                "explained_variance": [float(v) for v in emb.explained],
            })
        return {
            "schema_version": REPORT_SCHEMA_VERSION,
            "cohorts": list(self.cohorts),
            "replicates": {c: int(next(iter(self.waveforms.values()))[c].shape[0]) for c in self.cohorts},
            "reference": self.stats[next(iter(self.stats))].pairs[0][1],
            "alpha": float(next(iter(self.stats.values())).alpha),
            "window_s": [float(self.window[0]), float(self.window[1])],
            "n_samples": int(self.times.size),
            "any_significant_in_window": any(in_window.values()),
            "rules": rules,
        }


def center_report(models: dict, t0_s: float, sample_rate_hz: float,
                  window: tuple = DEFAULT_WINDOW, alpha: float = 0.05,
                  reference: str | None = None) -> CenterReport:
    """Compare reconstructed centres of per-cohort model lists rule by rule.

    ``models`` maps cohort name to a list of trained :class:`ModelState`
    (replicates). Rule ``k`` is compared across replicates, so replicate
    models should share their initialisation seed.
    """
    cohorts = list(models)
    if len(cohorts) < 2:
        raise ConfigurationError(f"center report needs at least two cohorts, got {cohorts}")
    for c in cohorts:
        if len(models[c]) < 2:
            raise ConfigurationError(f"cohort {c!r} has {len(models[c])} model(s); need at least 2 replicates")
    dims = {(m.dims.n_channels, m.dims.n_samples, m.spatial.n_rules, m.temporal.n_rules)
            for ms in models.values() for m in ms}
    if len(dims) != 1:
        raise DimensionError(f"models disagree in (C, T, K_s, K_t): {sorted(dims)}")
    n_channels, n_samples, k_s, k_t = dims.pop()

    recon = {c: [reconstruct_model(m, c, t0_s, sample_rate_hz) for m in models[c]] for c in cohorts}
    waveforms = {
        k: {c: np.stack([temporal[k].pattern for _, temporal in recon[c]]) for c in cohorts}
        for k in range(k_t)
    }
    topographies = {
        k: {c: np.stack([spatial[k].pattern for spatial, _ in recon[c]]) for c in cohorts}
        for k in range(k_s)
    }
    stats_by_rule = {k: pointwise_anova(waveforms[k], alpha, reference) for k in range(k_t)}
    embeddings = {}
    for k in range(k_t):
        tags = [(c, i) for c in cohorts for i in range(waveforms[k][c].shape[0])]
        emb = embed_centers(np.concatenate([waveforms[k][c] for c in cohorts]))
        emb.cohorts = [c for c, _ in tags]
        embeddings[k] = (emb, tags)
    times = t0_s + np.arange(n_samples) / sample_rate_hz
    return CenterReport(cohorts, times, tuple(window), waveforms, topographies, stats_by_rule, embeddings)


def _f(v) -> str:
    return repr(float(v))


def write_report(report: CenterReport, out_dir) -> Path:
    """Write waveforms.csv, topography.csv, stats.csv, embedding.csv and report.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "waveforms.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rule", "cohort", "replicate", "t", "value"])
        for k, per in report.waveforms.items():
            for c, arr in per.items():
                for i, row in enumerate(arr):
                    for t, v in zip(report.times, row):
                        w.writerow([k, c, i, _f(t), _f(v)])
    with open(out / "topography.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rule", "cohort", "replicate", "channel", "value"])
        for k, per in report.topographies.items():
            for c, arr in per.items():
                for i, row in enumerate(arr):
                    for ch, v in enumerate(row):
                        w.writerow([k, c, i, ch, _f(v)])
    with open(out / "stats.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        pairs = next(iter(report.stats.values())).pairs
        names = [f"{a}_vs_{b}" for a, b in pairs]
        w.writerow(["rule", "t", "F", "p", "p_holm"] + [f"p_{n}" for n in names]
                   + [f"p_holm_{n}" for n in names] + ["p_corrected", "mask", "flagged"])
        for k, s in report.stats.items():
            for j, t in enumerate(report.times):
                w.writerow([k, _f(t), _f(s.F[j]), _f(s.p[j]), _f(s.corrected_anova_p[j])]
                           + [_f(v) for v in s.pairwise_p[:, j]]
                           + [_f(v) for v in s.corrected_pairwise_p[:, j]]
                           + [_f(s.corrected_p[j]), int(s.mask[j]), int(s.flagged[j])])
    with open(out / "embedding.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rule", "cohort", "pc1", "pc2"])
        for k, (emb, tags) in report.embeddings.items():
            for (c, _), xy in zip(tags, emb.coords):
                w.writerow([k, c, _f(xy[0]), _f(xy[1])])
    doc = report.summary()
    doc["metadata"] = {"created_utc": _dt.datetime.now(_dt.timezone.utc).isoformat()}
    (out / "report.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return out


REPORT_JSON_SCHEMA = {
    "type": "object",
    "required": ["schema_version", "cohorts", "replicates", "reference", "alpha", "window_s",
                 "n_samples", "any_significant_in_window", "rules", "metadata"],
    "properties": {
        "schema_version": {"const": REPORT_SCHEMA_VERSION},
        "cohorts": {"type": "array", "items": {"type": "string"}, "minItems": 2},
        "replicates": {"type": "object", "additionalProperties": {"type": "integer", "minimum": 2}},
        "reference": {"type": "string"},
        "alpha": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "window_s": {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2},
        "n_samples": {"type": "integer", "minimum": 1},
        "any_significant_in_window": {"type": "boolean"},
        "rules": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["rule", "n_significant", "n_flagged", "significant_in_window",
                             "prestimulus_false_positive_fraction", "explained_variance"],
                "properties": {
                    "rule": {"type": "integer", "minimum": 0},
                    "n_significant": {"type": "integer", "minimum": 0},
                    "n_flagged": {"type": "integer", "minimum": 0},
                    "significant_in_window": {"type": "boolean"},
                    "prestimulus_false_positive_fraction": {"type": "number", "minimum": 0, "maximum": 1},
                    "explained_variance": {"type": "array", "items": {"type": "number", "minimum": 0, "maximum": 1}},
                },
            },
        },
        "metadata": {"type": "object", "required": ["created_utc"]},
    },
}
