"""Fuzzy spatiotemporal encoder with a two-layer MLP head.

Both fuzzy filters share one mechanism. Given an input ``Z`` of shape
``(B, A, L)`` the bank's projections act on axis ``A``:

* query ``h_k = W^Q_k mean_L(Z) + b_k`` (length ``Q`` per rule),
* Gaussian activation of ``h_k`` against centre ``mu_k`` with widths ``delta_k``,
* normalised rule weight ``pi_k`` (a scalar per trial),
* value ``v_k = W^V_k Z`` and output ``sum_k pi_k v_k`` of shape ``(B, O, L)``.

The spatial filter feeds ``X`` directly (``A`` = channels, pooled over time).
The temporal filter feeds the transposed spatial output (``A`` = time, pooled
over channels) and transposes its result back to ``(B, C_out, T_out)``.

Gradients are derived by hand for this fixed graph.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import DimensionError, ParseError, StateError, TruncatedError
from .tensor import Param, dropout_mask, sigmoid

MIN_WIDTH = 1e-3
NORM_FLOOR = 1e-12
PROB_CLAMP = 1e-7
CHECKPOINT_MAGIC = b"FZCK"
CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------------------
# Rule primitives


def effective_widths(log_widths: np.ndarray) -> np.ndarray:
    return np.maximum(np.exp(log_widths), MIN_WIDTH)


def rule_activation(h, centers, log_widths) -> np.ndarray:
    """Gaussian rule activations ``rho``.

    ``h`` is either one latent vector of length Q shared by all rules or a
    per-rule array broadcastable against ``centers`` (``(..., K, Q)``).
    """
    h = np.asarray(h, dtype=np.float64)
    if h.ndim == 1:
        h = h[None, :]
    d = (h - centers) / effective_widths(log_widths)
    return np.exp(-0.5 * np.sum(d * d, axis=-1))


def normalize_rules(rho) -> np.ndarray:
    """``pi_k = rho_k / sum_j rho_j`` along the last axis (denominator floored)."""
    rho = np.asarray(rho, dtype=np.float64)
    return rho / np.maximum(rho.sum(axis=-1, keepdims=True), NORM_FLOOR)


# ---------------------------------------------------------------------------
# Parameter containers


@dataclass
class FuzzyRuleBank:
    query_w: Param  # (K, Q, A)
    query_b: Param  # (K, Q)
    value_w: Param  # (K, O, A)
    centers: Param  # (K, Q)
    log_widths: Param  # (K, Q)

    @property
    def n_rules(self) -> int:
        return self.centers.shape[0]

    @property
    def latent_dim(self) -> int:
        return self.centers.shape[1]

    @property
    def in_dim(self) -> int:
        return self.query_w.shape[2]

    @property
    def out_dim(self) -> int:
        return self.value_w.shape[1]

    def params(self) -> dict[str, Param]:
        return {
            "query_w": self.query_w,
            "query_b": self.query_b,
            "value_w": self.value_w,
            "centers": self.centers,
            "log_widths": self.log_widths,
        }

    @classmethod
    def init(cls, rng, n_rules, latent_dim, in_dim, out_dim) -> "FuzzyRuleBank":
        bound = 1.0 / np.sqrt(in_dim)
        return cls(
            query_w=Param(rng.uniform(-bound, bound, (n_rules, latent_dim, in_dim))),
            query_b=Param(rng.uniform(-bound, bound, (n_rules, latent_dim))),
            value_w=Param(rng.uniform(-bound, bound, (n_rules, out_dim, in_dim))),
            centers=Param(rng.standard_normal((n_rules, latent_dim)) / np.sqrt(latent_dim)),
            log_widths=Param(np.zeros((n_rules, latent_dim))),
        )


@dataclass
class Head:
    w1: Param  # (H, F)
    b1: Param  # (H,)
    w2: Param  # (H,)
    b2: Param  # (1,)

    def params(self) -> dict[str, Param]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    @classmethod
    def init(cls, rng, n_in, hidden) -> "Head":
        b_in = 1.0 / np.sqrt(n_in)
        b_hid = 1.0 / np.sqrt(hidden)
        return cls(
            w1=Param(rng.uniform(-b_in, b_in, (hidden, n_in))),
            b1=Param(rng.uniform(-b_in, b_in, hidden)),
            w2=Param(rng.uniform(-b_hid, b_hid, hidden)),
            b2=Param(rng.uniform(-b_hid, b_hid, 1)),
        )


@dataclass(frozen=True)
class ModelDims:
    n_channels: int
    n_samples: int
    n_rules_spatial: int = 5
    n_rules_temporal: int = 5
    latent_dim: int = 16
    out_channels: int | None = None  # defaults to n_channels
    out_samples: int | None = None  # defaults to n_samples
    hidden: int = 64
    dropout: float = 0.25

    @property
    def c_out(self) -> int:
        return self.n_channels if self.out_channels is None else self.out_channels

    @property
    def t_out(self) -> int:
        return self.n_samples if self.out_samples is None else self.out_samples

    def validate(self):
        counts = (self.n_channels, self.n_samples, self.n_rules_spatial, self.n_rules_temporal,
                  self.latent_dim, self.c_out, self.t_out, self.hidden)
        if any(int(c) < 1 for c in counts):
            raise DimensionError(f"all model dimensions must be positive: {self}")
        if not 0.0 <= self.dropout < 1.0:
            raise DimensionError(f"dropout must lie in [0, 1), got {self.dropout}")


@dataclass
class ModelState:
    dims: ModelDims
    spatial: FuzzyRuleBank
    temporal: FuzzyRuleBank
    head: Head
    seed: int = 0
    training: bool = False

    def __post_init__(self):
        self._pending = None

    def params(self) -> dict[str, Param]:
        """All parameters in checkpoint order: spatial bank, temporal bank, head."""
        out = {}
        for prefix, group in (("spatial", self.spatial), ("temporal", self.temporal), ("head", self.head)):
            for name, p in group.params().items():
                out[f"{prefix}.{name}"] = p
        return out

    def train(self):
        self.training = True
        return self

    def eval(self):
        self.training = False
        return self

    def zero_grads(self):
        for p in self.params().values():
            p.zero_grad()

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: p.value.copy() for k, p in self.params().items()}

    def load_snapshot(self, snap: dict[str, np.ndarray]):
        for k, p in self.params().items():
            p.value[...] = snap[k]


def init_model(dims: ModelDims, seed: int = 0) -> ModelState:
    """Seeded initialisation.

    Projections and biases are uniform in ``±1/sqrt(fan_in)``, centres are
    standard normal scaled by ``1/sqrt(Q)`` and log-widths start at zero.
    """
    dims.validate()
    rng = np.random.default_rng(seed)
    spatial = FuzzyRuleBank.init(rng, dims.n_rules_spatial, dims.latent_dim, dims.n_channels, dims.c_out)
    temporal = FuzzyRuleBank.init(rng, dims.n_rules_temporal, dims.latent_dim, dims.n_samples, dims.t_out)
    head = Head.init(rng, dims.c_out * dims.t_out, dims.hidden)
    return ModelState(dims, spatial, temporal, head, seed=seed)


# ---------------------------------------------------------------------------
# Forward


@dataclass
class BankCache:
    z_flat: np.ndarray  # (A, B*L)
    z_mean: np.ndarray  # (B, A)
    d: np.ndarray  # (B, K, Q) normalised distance (h - mu) / delta
    widths: np.ndarray  # (K, Q)
    values: np.ndarray  # (K, O, B, L)
    pi: np.ndarray  # (B, K)
    shape: tuple


def bank_forward(bank: FuzzyRuleBank, z: np.ndarray):
    """Rule-weighted aggregation over axis 1 of ``z`` (shape ``(B, A, L)``).

    Returns ``(out, rho, pi, cache)`` with ``out`` of shape ``(B, O, L)``.
    """
    B, A, L = z.shape
    if A != bank.in_dim:
        raise DimensionError(f"bank expects input axis {bank.in_dim}, got input of shape {z.shape}")
    K, O = bank.n_rules, bank.out_dim
    z_mean = z.mean(axis=2)
    h = np.einsum("kqa,ba->bkq", bank.query_w.value, z_mean) + bank.query_b.value
    widths = effective_widths(bank.log_widths.value)
    d = (h - bank.centers.value) / widths
    s = 0.5 * np.sum(d * d, axis=-1)
    rho = np.exp(-s)
    # scale invariance of the normalisation lets us shift s to avoid underflow
    pi = normalize_rules(np.exp(-(s - s.min(axis=-1, keepdims=True))))

    z_flat = z.transpose(1, 0, 2).reshape(A, B * L)
    values = (bank.value_w.value.reshape(K * O, A) @ z_flat).reshape(K, O, B, L)
    out = np.einsum("bk,kobl->bol", pi, values)
    cache = BankCache(z_flat, z_mean, d, widths, values, pi, (B, A, L))
    return out, rho, pi, cache


def bank_backward(bank: FuzzyRuleBank, cache: BankCache, g_out: np.ndarray, need_input_grad: bool = True):
    """Accumulate parameter gradients; return dL/dz (or None)."""
    B, A, L = cache.shape
    K, O = bank.n_rules, bank.out_dim
    pi = cache.pi

    g_pi = np.einsum("bol,kobl->bk", g_out, cache.values)
    g_s = -pi * (g_pi - np.sum(pi * g_pi, axis=-1, keepdims=True))
    g_h = g_s[..., None] * cache.d / cache.widths
    bank.centers.grad -= g_h.sum(axis=0)
    unclamped = np.exp(bank.log_widths.value) > MIN_WIDTH
    bank.log_widths.grad -= np.sum(g_s[..., None] * cache.d ** 2, axis=0) * unclamped
    bank.query_b.grad += g_h.sum(axis=0)
    bank.query_w.grad += np.einsum("bkq,ba->kqa", g_h, cache.z_mean)

    g_weighted = (pi.T[:, None, :, None] * g_out.transpose(1, 0, 2)[None]).reshape(K * O, B * L)
    bank.value_w.grad += (g_weighted @ cache.z_flat.T).reshape(K, O, A)
    if not need_input_grad:
        return None
    wv = bank.value_w.value.reshape(K * O, A)
    g_z = (wv.T @ g_weighted).reshape(A, B, L).transpose(1, 0, 2)
    g_zmean = np.einsum("bkq,kqa->ba", g_h, bank.query_w.value)
    return g_z + g_zmean[:, :, None] / L


@dataclass
class ForwardTrace:
    """Intermediate quantities of one forward pass (leading axis = trial)."""

    rho_spatial: np.ndarray
    pi_spatial: np.ndarray
    rho_temporal: np.ndarray
    pi_temporal: np.ndarray
    h_spatial: np.ndarray
    h_temporal: np.ndarray
    logit: np.ndarray
    prob: np.ndarray


@dataclass
class _GradCache:
    spatial: BankCache
    temporal: BankCache
    flat: np.ndarray
    z1: np.ndarray
    mask: np.ndarray
    a1d: np.ndarray
    prob: np.ndarray


def _check_input(model: ModelState, x: np.ndarray):
    d = model.dims
    if x.ndim != 3 or x.shape[1:] != (d.n_channels, d.n_samples):
        raise DimensionError(
            f"input shape {x.shape[1:] if x.ndim == 3 else x.shape} does not match model "
            f"({d.n_channels}, {d.n_samples})"
        )


def forward_batch(model: ModelState, x, rng: np.random.Generator | None = None,
                  record: bool = False) -> ForwardTrace:
    """Forward pass over ``x`` of shape ``(B, C, T)``.

    Dropout is active only when ``model.training`` is set, in which case
    ``rng`` drives the mask. With ``record=True`` the intermediate cache is
    kept so that :func:`backward` can run once.
    """
    x = np.asarray(x, dtype=np.float64)
    _check_input(model, x)
    B = x.shape[0]
    h_s, rho_s, pi_s, cache_s = bank_forward(model.spatial, x)
    out_t, rho_t, pi_t, cache_t = bank_forward(model.temporal, h_s.transpose(0, 2, 1))
    h_t = out_t.transpose(0, 2, 1)

    head = model.head
    flat = h_t.reshape(B, -1)
    z1 = flat @ head.w1.value.T + head.b1.value
    a1 = np.maximum(z1, 0.0)
    rate = model.dims.dropout if model.training else 0.0
    if rate > 0.0:
        if rng is None:
            raise StateError("training-mode forward with dropout needs an rng")
        mask = dropout_mask(a1.shape, rate, rng)
    else:
        mask = np.ones_like(a1)
    a1d = a1 * mask
    logit = a1d @ head.w2.value + head.b2.value[0]
    prob = sigmoid(logit)

    model._pending = _GradCache(cache_s, cache_t, flat, z1, mask, a1d, prob) if record else None
    return ForwardTrace(rho_s, pi_s, rho_t, pi_t, h_s, h_t, logit, prob)


def forward(x, model: ModelState, rng=None):
    """Single-trial forward: ``x`` is ``(C, T)``. Returns ``(p_hat, trace)``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionError(f"expected one (C, T) epoch, got shape {x.shape}")
    tr = forward_batch(model, x[None], rng=rng)
    squeezed = ForwardTrace(*(np.asarray(v)[0] for v in vars(tr).values()))
    return float(tr.prob[0]), squeezed


def predict_proba(model: ModelState, x, batch_size: int = 256) -> np.ndarray:
    """Evaluation-mode probabilities, processed in chunks."""
    was = model.training
    model.eval()
    try:
        x = np.asarray(x, dtype=np.float64)
        parts = [forward_batch(model, x[i:i + batch_size]).prob for i in range(0, x.shape[0], batch_size)]
    finally:
        model.training = was
    return np.concatenate(parts) if parts else np.zeros(0)


def bce_loss(p_hat, z) -> float:
    """Mean binary cross-entropy with probabilities clamped to ``[1e-7, 1 - 1e-7]``."""
    p = np.clip(np.asarray(p_hat, dtype=np.float64), PROB_CLAMP, 1.0 - PROB_CLAMP)
    z = np.asarray(z, dtype=np.float64)
    if p.shape != z.shape:
        raise DimensionError(f"{p.shape} probabilities vs {z.shape} labels")
    return float(-np.mean(z * np.log(p) + (1.0 - z) * np.log(1.0 - p)))


def backward(model: ModelState, z) -> None:
    """Accumulate dL/dparam of the mean BCE into every ``Param.grad``.

    Consumes the cache of the last recorded forward; calling twice without a
    new forward raises :class:`StateError`. The logit gradient is
    ``(p - z) / M``; the probability clamp is treated as identity here so a
    saturated wrong prediction still receives a gradient.
    """
    cache = model._pending
    if cache is None:
        raise StateError("backward called without a recorded forward pass")
    model._pending = None
    z = np.asarray(z, dtype=np.float64)
    B = cache.prob.shape[0]
    if z.shape != (B,):
        raise DimensionError(f"{z.shape} labels for a batch of {B}")
    head = model.head

    g_logit = (cache.prob - z) / B
    head.w2.grad += cache.a1d.T @ g_logit
    head.b2.grad += g_logit.sum()
    g_z1 = np.outer(g_logit, head.w2.value) * cache.mask * (cache.z1 > 0)
    head.w1.grad += g_z1.T @ cache.flat
    head.b1.grad += g_z1.sum(axis=0)
    g_flat = g_z1 @ head.w1.value

    d = model.dims
    g_ht = g_flat.reshape(B, d.c_out, d.t_out)
    g_hs_t = bank_backward(model.temporal, cache.temporal, g_ht.transpose(0, 2, 1))
    bank_backward(model.spatial, cache.spatial, g_hs_t.transpose(0, 2, 1), need_input_grad=False)


def loss_and_grad(model: ModelState, x, z, rng=None) -> float:
    """Zero gradients, run forward + backward, return the batch loss."""
    model.zero_grads()
    tr = forward_batch(model, x, rng=rng, record=True)
    loss = bce_loss(tr.prob, z)
    backward(model, z)
    return loss


# ---------------------------------------------------------------------------
# Checkpoints


def encode_checkpoint(model: ModelState, hyperparameters: dict | None = None) -> bytes:
    params = model.params()
    header = {
        "format_version": CHECKPOINT_VERSION,
        "dims": asdict(model.dims),
        "seed": model.seed,
        "hyperparameters": hyperparameters or {},
        "params": [[name, list(p.shape)] for name, p in params.items()],
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = b"".join(p.value.astype("<f8").tobytes() for p in params.values())
    return CHECKPOINT_MAGIC + struct.pack("<I", len(hbytes)) + hbytes + payload


def decode_checkpoint(buf: bytes) -> tuple[ModelState, dict]:
    if buf[:4] != CHECKPOINT_MAGIC:
        raise ParseError(f"bad checkpoint magic {bytes(buf[:4])!r}", offset=0)
    if len(buf) < 8:
        raise TruncatedError("checkpoint header length missing", offset=len(buf))
    (hlen,) = struct.unpack_from("<I", buf, 4)
    if len(buf) < 8 + hlen:
        raise TruncatedError(f"checkpoint header needs {hlen} bytes", offset=len(buf))
    header = json.loads(buf[8:8 + hlen].decode("utf-8"))
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise ParseError(f"unsupported checkpoint version {header.get('format_version')}", offset=8)
    model = init_model(ModelDims(**header["dims"]), seed=header["seed"])
    params = model.params()
    off = 8 + hlen
    for name, shape in header["params"]:
        p = params[name]
        if tuple(shape) != p.shape:
            raise ParseError(f"parameter {name} has shape {shape}, expected {p.shape}", offset=off)
        n = int(np.prod(shape))
        if len(buf) < off + 8 * n:
            raise TruncatedError(f"payload for {name} truncated", offset=len(buf))
        p.value[...] = np.frombuffer(buf, dtype="<f8", count=n, offset=off).reshape(shape)
        off += 8 * n
    if off != len(buf):
        raise ParseError(f"{len(buf) - off} trailing bytes after parameters", offset=off)
    return model, header.get("hyperparameters", {})


def save_checkpoint(model: ModelState, path, hyperparameters: dict | None = None):
    Path(path).write_bytes(encode_checkpoint(model, hyperparameters))


def load_checkpoint(path) -> tuple[ModelState, dict]:
    return decode_checkpoint(Path(path).read_bytes())
