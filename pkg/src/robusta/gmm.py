"""Diagonal-covariance Gaussian mixtures for clean-feature likelihood gating.

A mixture is fitted by EM to clean training segments of one modality. The
negative log-likelihood of a test segment under that mixture measures how far
it has drifted from clean data; :func:`calibrate_sigmoid` picks the logistic
scale and shift that turn it into a fusion weight.
"""

import io
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .core import ContractError, FormatError, Modality, _Reader
from .seeding import derive_rng

VAR_FLOOR = 1e-6
LOG_2PI = math.log(2.0 * math.pi)


@dataclass(eq=False)
class GmmParams:
    weights: np.ndarray  # (K,)
    means: np.ndarray  # (K, d)
    variances: np.ndarray  # (K, d)
    modality: Optional[Modality] = None
    history: list = field(default_factory=list, compare=False)

    def __eq__(self, other):
        if not isinstance(other, GmmParams):
            return NotImplemented
        return self.modality == other.modality and all(
            np.array_equal(a, b)
            for a, b in ((self.weights, other.weights), (self.means, other.means), (self.variances, other.variances))
        )

    @property
    def k(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def validate(self, var_floor=VAR_FLOOR):
        if self.k < 1:
            raise ContractError("mixture needs at least one component")
        if self.means.shape != (self.k, self.means.shape[1]) or self.variances.shape != self.means.shape:
            raise ContractError("means and variances must both be (K, d)")
        if abs(self.weights.sum() - 1.0) > 1e-9 or np.any(self.weights < 0):
            raise ContractError("mixture weights must lie on the simplex")
        if np.any(self.variances < var_floor):
            raise ContractError("variance below floor")


@dataclass(frozen=True)
class SigmoidCalibration:
    scale: float  # c
    shift: float  # x_0

    def __post_init__(self):
        if not (math.isfinite(self.scale) and math.isfinite(self.shift)) or self.scale <= 0:
            raise ContractError(f"calibration needs finite shift and positive finite scale, got {self}")


def logsumexp(a, axis=-1):
    a = np.asarray(a, dtype=np.float64)
    peak = np.max(a, axis=axis, keepdims=True)
    peak = np.where(np.isfinite(peak), peak, 0.0)
    out = np.log(np.sum(np.exp(a - peak), axis=axis, keepdims=True)) + peak
    return np.squeeze(out, axis=axis)


def component_log_densities(x, means, variances):
    """``(N, K)`` matrix of log N(x_n | mu_k, diag(var_k))."""
    x = np.asarray(x, dtype=np.float64)
    K, d = means.shape
    out = np.empty((x.shape[0], K))
    for k in range(K):
        diff = x - means[k]
        out[:, k] = -0.5 * (d * LOG_2PI + np.log(variances[k]).sum() + (diff * diff / variances[k]).sum(axis=1))
    return out


def _log_joint(x, gmm: GmmParams):
    with np.errstate(divide="ignore"):
        log_w = np.log(gmm.weights)
    return component_log_densities(x, gmm.means, gmm.variances) + log_w


def nll(x, gmm: GmmParams):
    """Negative log-likelihood of a vector (returns float) or of each row of a matrix."""
    arr = np.asarray(x, dtype=np.float64)
    single = arr.ndim == 1
    rows = arr[None, :] if single else arr
    if rows.ndim != 2 or rows.shape[1] != gmm.dim:
        raise ContractError(f"expected dimension {gmm.dim}, got shape {arr.shape}")
    out = -logsumexp(_log_joint(rows, gmm), axis=1)
    return float(out[0]) if single else out


def _kmeans_pp_centers(x, K, rng):
    n = x.shape[0]
    centers = [x[rng.integers(n)]]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, K):
        total = d2.sum()
        idx = rng.choice(n, p=d2 / total) if total > 0 else rng.integers(n)
        centers.append(x[idx])
        d2 = np.minimum(d2, ((x - x[idx]) ** 2).sum(axis=1))
    return np.array(centers)


def _m_step(x, resp, var_floor, prev: Optional[GmmParams] = None):
    n = x.shape[0]
    nk = resp.sum(axis=0)
    weights = nk / n
    K = resp.shape[1]
    means = np.empty((K, x.shape[1]))
    variances = np.empty_like(means)
    for k in range(K):
        if nk[k] < 1e-10:
            # dead component: keep its previous shape, weight goes to ~0
            if prev is not None:
                means[k], variances[k] = prev.means[k], prev.variances[k]
            else:
                means[k], variances[k] = x.mean(axis=0), np.maximum(x.var(axis=0), var_floor)
            continue
        r = resp[:, k]
        means[k] = r @ x / nk[k]
        diff = x - means[k]
        variances[k] = np.maximum(r @ (diff * diff) / nk[k], var_floor)
    weights = weights / weights.sum()
    return weights, means, variances


def _round_f32(gmm: GmmParams, var_floor):
    """Make parameters exactly representable in the f32 checkpoint format."""
    gmm.means = gmm.means.astype(np.float32).astype(np.float64)
    v32 = gmm.variances.astype(np.float32)
    low = v32.astype(np.float64) < np.maximum(gmm.variances, var_floor)
    v32[low] = np.nextafter(v32[low], np.float32(np.inf))
    gmm.variances = v32.astype(np.float64)


def fit_gmm(features, K=8, seed=0, max_iter=200, tol=1e-6, var_floor=VAR_FLOOR, modality=None) -> GmmParams:
    """Fit a K-component diagonal mixture by EM with k-means++ seeding.

    Stops when the per-sample average log-likelihood improves by less than
    ``tol`` (``tol=None`` always runs ``max_iter`` iterations). The returned
    ``history`` holds the average log-likelihood after each iteration.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ContractError(f"features must be an (N, d) matrix, got shape {x.shape}")
    if K < 1 or x.shape[0] < K:
        raise ContractError(f"need at least K={K} samples, got {x.shape[0]}")
    if not np.all(np.isfinite(x)):
        raise ContractError("features contain non-finite values")
    rng = derive_rng(seed, "gmm-init", modality.value if modality else "any")
    centers = _kmeans_pp_centers(x, K, rng)
    d2 = np.stack([((x - c) ** 2).sum(axis=1) for c in centers], axis=1)
    resp = np.zeros((x.shape[0], K))
    resp[np.arange(x.shape[0]), np.argmin(d2, axis=1)] = 1.0
    gmm = GmmParams(*_m_step(x, resp, var_floor), modality=modality)

    history = []
    for _ in range(max_iter):
        log_joint = _log_joint(x, gmm)
        log_norm = logsumexp(log_joint, axis=1)
        avg_ll = float(log_norm.mean())
        if history and tol is not None and avg_ll - history[-1] < tol:
            history.append(avg_ll)
            break
        history.append(avg_ll)
        resp = np.exp(log_joint - log_norm[:, None])
        gmm = GmmParams(*_m_step(x, resp, var_floor, gmm), modality=modality)
    else:
        history.append(float(logsumexp(_log_joint(x, gmm), axis=1).mean()))

    _round_f32(gmm, var_floor)
    gmm.history = history
    return gmm


def calibrate_sigmoid(clean_nlls, target_clean_weight=0.45, quantile=0.95) -> SigmoidCalibration:
    """Pick (c, x_0) so the ``quantile`` of clean NLLs maps to ``target_clean_weight``.

    The scale comes from the spread between that quantile and the median, so
    typical clean segments sit near the 0.5 ceiling and the weight falls off
    over a few spreads beyond the quantile.
    """
    values = np.asarray(clean_nlls, dtype=np.float64).ravel()
    if values.size == 0:
        raise ContractError("need at least one clean NLL to calibrate")
    if not np.all(np.isfinite(values)):
        raise ContractError("clean NLLs must be finite")
    if not 0.0 < target_clean_weight < 0.5:
        raise ContractError("target_clean_weight must lie in (0, 0.5)")
    if not 0.0 < quantile < 1.0:
        raise ContractError("quantile must lie in (0, 1)")
    q = float(np.quantile(values, quantile))
    spread = max(q - float(np.median(values)), 1e-6)
    # logit of the target on the (0, 0.5) scale: ln(t / (0.5 - t))
    logit = math.log(target_clean_weight / (0.5 - target_clean_weight))
    scale = abs(logit) / spread if abs(logit) > 1e-12 else 1.0 / spread
    shift = -logit / scale - q
    return SigmoidCalibration(scale, shift)


# --- RAG1 gate checkpoint --------------------------------------------------
#
# magic "RAG1" | version u8 (=1) | seed u64 | config_hash u64 | modality u8 (0 audio, 1 visual)
# K u32 | d u32 | weights f64[K] | means f32[K*d] | variances f32[K*d]
# has_calibration u8 | if 1: scale f64 | shift f64

RAG_MAGIC = b"RAG1"
_MODALITY_CODES = {Modality.AUDIO: 0, Modality.VISUAL: 1}


def encode_gmm(gmm: GmmParams, calibration: Optional[SigmoidCalibration] = None, seed=0, cfg_hash=0) -> bytes:
    if gmm.modality is None:
        raise ContractError("checkpointed mixtures need a modality tag")
    out = io.BytesIO()
    out.write(RAG_MAGIC)
    out.write(struct.pack("<BQQB", 1, seed & 0xFFFFFFFFFFFFFFFF, cfg_hash, _MODALITY_CODES[gmm.modality]))
    out.write(struct.pack("<II", gmm.k, gmm.dim))
    out.write(np.asarray(gmm.weights).astype("<f8").tobytes())
    for arr in (gmm.means, gmm.variances):
        out.write(np.asarray(arr).astype("<f4").tobytes())
    if calibration is None:
        out.write(b"\x00")
    else:
        out.write(b"\x01")
        out.write(struct.pack("<dd", calibration.scale, calibration.shift))
    return out.getvalue()


def decode_gmm(data: bytes):
    """Return ``(gmm, calibration or None, seed, config_hash)``."""
    r = _Reader(data, "RAG1")
    if r.take(4) != RAG_MAGIC:
        raise FormatError("RAG1: bad magic")
    version, seed, cfg_hash, code = r.unpack("<BQQB")
    if version != 1 or code not in (0, 1):
        raise FormatError(f"RAG1: unsupported version {version} or modality code {code}")
    K, d = r.unpack("<II")
    if K == 0 or d == 0:
        raise FormatError("RAG1: empty mixture")
    w = r.floats(K, "<f8")
    means = r.floats(K * d).astype(np.float64).reshape(K, d)
    variances = r.floats(K * d).astype(np.float64).reshape(K, d)
    (has_cal,) = r.unpack("<B")
    cal = None
    if has_cal:
        cal = SigmoidCalibration(*r.unpack("<dd"))
    r.finish()
    modality = Modality.AUDIO if code == 0 else Modality.VISUAL
    gmm = GmmParams(w, means, variances, modality)
    try:
        gmm.validate()
    except ContractError as exc:
        raise FormatError(f"RAG1: {exc}") from None
    return gmm, cal, seed, cfg_hash


def save_gmm(gmm, path, calibration=None, seed=0, cfg_hash=0):
    Path(path).write_bytes(encode_gmm(gmm, calibration, seed, cfg_hash))


def load_gmm(path):
    return decode_gmm(Path(path).read_bytes())
