"""Segment-level anomaly detector, audio projection, MIL loss and trainers.

The detector is a small ReLU MLP ending in a logistic unit, so every segment
gets a score in (0, 1). Two training regimes are provided:

* ``train_concat`` scores the concatenation of audio and visual features
  (the conventional fusion baseline);
* ``train_shared`` scores each modality on its own with one shared detector.
  Audio features are lifted to the visual dimension by a learned affine
  projection (or, for the ablation, by zero padding), and every epoch visits
  both views of every video.

Gradients are derived by hand and verified by :func:`gradient_check`.
"""

import enum
import io
import json
import logging
import math
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Callable, List, Optional

import numpy as np

from .core import ContractError, FormatError, _Reader
from .seeding import derive_rng

log = logging.getLogger(__name__)

EPS = 1e-7
HIDDEN = (128, 32)


class View(enum.Enum):
    AUDIO = "audio"
    VISUAL = "visual"
    CONCAT = "concat"


class Mode(enum.Enum):
    CONCAT = "concat"
    SHARED = "shared"
    PADDING = "padding"


MODE_CODES = {Mode.CONCAT: 0, Mode.SHARED: 1, Mode.PADDING: 2}


@dataclass
class ProjectionParams:
    weight: np.ndarray  # (d_audio, d_visual)
    bias: np.ndarray  # (d_visual,)

    @property
    def d_audio(self):
        return self.weight.shape[0]

    @property
    def d_visual(self):
        return self.weight.shape[1]

    def arrays(self):
        return {"proj_w": self.weight, "proj_b": self.bias}

    def copy(self):
        return ProjectionParams(self.weight.copy(), self.bias.copy())


@dataclass
class DetectorParams:
    weights: List[np.ndarray]
    biases: List[np.ndarray]

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ContractError("detector needs matching, non-empty weight and bias lists")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ContractError(f"layer {i}: weight {w.shape} and bias {b.shape} do not chain")
            if i and w.shape[0] != self.weights[i - 1].shape[1]:
                raise ContractError(f"layer {i} input {w.shape[0]} != previous output {self.weights[i - 1].shape[1]}")
        if self.weights[-1].shape[1] != 1:
            raise ContractError("detector must end in a single output unit")

    @property
    def d_in(self):
        return self.weights[0].shape[0]

    def arrays(self):
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"w{i}"] = w
            out[f"b{i}"] = b
        return out

    def copy(self):
        return DetectorParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    lr: float = 1e-3
    batch_size: int = 64
    weight_decay: float = 1e-5
    topk: Optional[int] = None  # None -> ceil(m / 16) + 1
    hidden: tuple = HIDDEN
    seed: int = 0

    def validate(self):
        if self.epochs < 0 or self.batch_size < 1 or self.lr < 0 or self.weight_decay < 0:
            raise ContractError(f"invalid training config {self}")
        if self.topk is not None and self.topk < 1:
            raise ContractError("topk must be positive")

    def as_dict(self):
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


@dataclass
class TrainingSample:
    features: np.ndarray  # (m, d_in); raw audio features for AUDIO views
    label: int
    view: View


@dataclass
class TrainedModel:
    mode: Mode
    detector: DetectorParams
    projection: Optional[ProjectionParams]
    d_audio: int
    d_visual: int
    config: TrainConfig = field(default_factory=TrainConfig)
    history: list = field(default_factory=list)

    def lift_audio(self, audio):
        """Map raw audio features into the detector input space."""
        if self.mode is Mode.SHARED:
            return project(audio, self.projection)
        if self.mode is Mode.PADDING:
            return pad_audio(audio, self.d_visual)
        raise ContractError("concat models score joint features; use score_concat")

    def score_audio(self, audio):
        return forward_score(self.lift_audio(audio), self.detector)

    def score_visual(self, visual):
        if self.mode is Mode.CONCAT:
            raise ContractError("concat models score joint features; use score_concat")
        return forward_score(visual, self.detector)

    def score_concat(self, audio, visual):
        if self.mode is not Mode.CONCAT:
            raise ContractError(f"{self.mode.value} model cannot score concatenated features")
        return forward_score(np.concatenate([audio, visual], axis=1), self.detector)


def default_topk(m: int) -> int:
    return min(m, math.ceil(m / 16) + 1)


def glorot(rng, fan_in, fan_out):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_detector(d_in, rng, hidden=HIDDEN) -> DetectorParams:
    sizes = [d_in, *hidden, 1]
    weights = [glorot(rng, a, b) for a, b in zip(sizes[:-1], sizes[1:])]
    biases = [np.zeros(b) for b in sizes[1:]]
    return DetectorParams(weights, biases)


def init_projection(d_audio, d_visual, rng) -> ProjectionParams:
    return ProjectionParams(glorot(rng, d_audio, d_visual), np.zeros(d_visual))


def project(audio_features, params: ProjectionParams):
    x = np.asarray(audio_features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.d_audio:
        raise ContractError(f"projection expects (m, {params.d_audio}) input, got {x.shape}")
    return x @ params.weight + params.bias


def pad_audio(audio_features, d_visual):
    x = np.asarray(audio_features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] > d_visual:
        raise ContractError(f"cannot zero-pad features of shape {x.shape} to width {d_visual}")
    out = np.zeros((x.shape[0], d_visual))
    out[:, : x.shape[1]] = x
    return out


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _forward(x, params: DetectorParams):
    """Return (scores, cache) for rows of ``x``."""
    acts = [x]
    h = x
    n_layers = len(params.weights)
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ w + b
        h = np.maximum(z, 0.0) if i < n_layers - 1 else z
        acts.append(h)
    scores = _sigmoid(acts[-1][:, 0])
    return scores, acts


def _backward(acts, dscores, scores, params: DetectorParams):
    """Gradients of the loss w.r.t. parameters and input rows, given dL/dscores."""
    n_layers = len(params.weights)
    grad_w = [None] * n_layers
    grad_b = [None] * n_layers
    delta = (dscores * scores * (1.0 - scores))[:, None]
    for i in range(n_layers - 1, -1, -1):
        grad_w[i] = acts[i].T @ delta
        grad_b[i] = delta.sum(axis=0)
        delta = delta @ params.weights[i].T
        if i > 0:
            delta = delta * (acts[i] > 0.0)
    return grad_w, grad_b, delta


def forward_score(features, params: DetectorParams):
    """Per-segment anomaly scores in (0, 1)."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.d_in:
        raise ContractError(f"detector expects (m, {params.d_in}) input, got {x.shape}")
    return _forward(x, params)[0]


def topk_indices(scores, k):
    """Indices of the ``k`` largest scores per row; ties go to the lowest index."""
    order = np.argsort(-np.asarray(scores), axis=-1, kind="stable")
    return order[..., :k]


def mil_loss(scores, y, k):
    """Top-k mean binary cross-entropy of one bag and its gradient w.r.t. ``scores``."""
    scores = np.asarray(scores, dtype=np.float64)
    loss, grad = mil_loss_batch(scores[None, :], np.array([y]), k)
    return float(loss[0]), grad[0]


def mil_loss_batch(scores, labels, k):
    """Row-wise :func:`mil_loss` for a ``(B, m)`` score matrix."""
    scores = np.asarray(scores, dtype=np.float64)
    B, m = scores.shape
    if not 1 <= k <= m:
        raise ContractError(f"top-k count {k} outside [1, {m}]")
    labels = np.asarray(labels, dtype=np.float64)
    idx = topk_indices(scores, k)
    top = np.take_along_axis(scores, idx, axis=1)
    clipped = np.clip(top, EPS, 1.0 - EPS)
    p = clipped.mean(axis=1)
    loss = -(labels * np.log(p) + (1.0 - labels) * np.log1p(-p))
    dp = -labels / p + (1.0 - labels) / (1.0 - p)
    inside = (top > EPS) & (top < 1.0 - EPS)
    grad = np.zeros_like(scores)
    np.put_along_axis(grad, idx, (dp[:, None] / k) * inside, axis=1)
    return loss, grad


def batch_loss_and_grads(det: DetectorParams, proj: Optional[ProjectionParams], samples, k, pad_width=None):
    """Summed MIL loss of ``samples`` and its gradients.

    Audio-view samples carry raw audio features and pass through ``proj`` (or
    zero padding to ``pad_width`` when ``proj`` is None).
    Returns ``(loss, det_grads, proj_grads)`` where ``proj_grads`` is None if
    no projection was involved.
    """
    rows, labels, audio_mask = [], [], []
    for s in samples:
        x = np.asarray(s.features, dtype=np.float64)
        if s.view is View.AUDIO:
            x = project(x, proj) if proj is not None else pad_audio(x, pad_width or det.d_in)
        rows.append(x)
        labels.append(s.label)
        audio_mask.append(s.view is View.AUDIO)
    m = rows[0].shape[0]
    if any(r.shape[0] != m for r in rows):
        raise ContractError("all samples in a batch must have the same segment count")
    x = np.concatenate(rows, axis=0)
    if x.shape[1] != det.d_in:
        raise ContractError(f"detector expects width {det.d_in}, got {x.shape[1]}")
    scores, acts = _forward(x, det)
    loss, dscores = mil_loss_batch(scores.reshape(len(samples), m), labels, k)
    gw, gb, dx = _backward(acts, dscores.reshape(-1), scores, det)
    det_grads = DetectorParams(gw, gb)
    proj_grads = None
    if proj is not None and any(audio_mask):
        sel = np.repeat(np.array(audio_mask), m)
        raw = np.concatenate([np.asarray(s.features, dtype=np.float64) for s in samples if s.view is View.AUDIO])
        proj_grads = ProjectionParams(raw.T @ dx[sel], dx[sel].sum(axis=0))
    return float(loss.sum()), det_grads, proj_grads


def _cosine_lr(lr0, step, total):
    if total <= 1:
        return lr0
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total))


def _sgd_update(params, grads, lr, wd):
    for name, p in params.arrays().items():
        g = grads.arrays()[name] if grads is not None else 0.0
        p -= lr * (g + wd * p)


def _round_f32(params):
    for p in params.arrays().values():
        p[...] = p.astype(np.float32)


def _check_dataset(dataset):
    if not dataset:
        raise ContractError("training set is empty")
    for bag in dataset:
        if bag.audio is None or bag.visual is None:
            raise ContractError(f"bag {bag.id!r}: training requires both modalities")
    m = dataset[0].segment_count
    if any(b.segment_count != m for b in dataset):
        raise ContractError("training bags must share one segment count")
    return m, dataset[0].audio.dim, dataset[0].visual.dim


def _run_training(samples_for_epoch, det, proj, cfg: TrainConfig, k, n_samples, pad_width=None):
    steps_per_epoch = math.ceil(n_samples / cfg.batch_size)
    total = steps_per_epoch * cfg.epochs
    step = 0
    history = []
    for epoch in range(cfg.epochs):
        samples = samples_for_epoch(epoch)
        epoch_loss = 0.0
        for start in range(0, len(samples), cfg.batch_size):
            batch = samples[start : start + cfg.batch_size]
            loss, gdet, gproj = batch_loss_and_grads(det, proj, batch, k, pad_width)
            lr = _cosine_lr(cfg.lr, step, total)
            _sgd_update(det, gdet, lr, cfg.weight_decay)
            if proj is not None:
                _sgd_update(proj, gproj, lr, cfg.weight_decay)
            epoch_loss += loss
            step += 1
        history.append(epoch_loss / len(samples))
        log.debug("epoch %d mean MIL loss %.5f", epoch, history[-1])
    return history


def dataset_loss(dataset, model: "TrainedModel", k=None):
    """Mean MIL loss over the training views a model of this mode would see."""
    m = dataset[0].segment_count
    k = k or default_topk(m)
    samples = training_samples(dataset, model.mode)
    loss, _, _ = batch_loss_and_grads(model.detector, model.projection, samples, k, model.d_visual)
    return loss / len(samples)


def training_samples(dataset, mode: Mode):
    if mode is Mode.CONCAT:
        return [
            TrainingSample(np.concatenate([b.audio.values, b.visual.values], axis=1), b.label, View.CONCAT)
            for b in dataset
        ]
    out = []
    for b in dataset:
        out.append(TrainingSample(b.visual.values, b.label, View.VISUAL))
        out.append(TrainingSample(b.audio.values, b.label, View.AUDIO))
    return out


def train_concat(dataset, cfg: TrainConfig = TrainConfig(), init: Optional[DetectorParams] = None) -> TrainedModel:
    """Train the detector on concatenated audio||visual segment features."""
    cfg.validate()
    m, d_a, d_v = _check_dataset(dataset)
    k = cfg.topk or default_topk(m)
    if k > m:
        raise ContractError(f"topk {k} exceeds segment count {m}")
    det = init.copy() if init is not None else init_detector(d_a + d_v, derive_rng(cfg.seed, "init", "concat"), cfg.hidden)
    samples = training_samples(dataset, Mode.CONCAT)

    def epoch_samples(epoch):
        order = derive_rng(cfg.seed, "shuffle", "concat", epoch).permutation(len(samples))
        return [samples[i] for i in order]

    history = _run_training(epoch_samples, det, None, cfg, k, len(samples))
    _round_f32(det)
    return TrainedModel(Mode.CONCAT, det, None, d_a, d_v, cfg, history)


def train_shared(
    dataset,
    cfg: TrainConfig = TrainConfig(),
    projection: str = "linear",
    init: Optional[tuple] = None,
) -> TrainedModel:
    """Train one detector on both modalities' views (2n samples per epoch).

    ``projection`` is ``"linear"`` for the learned audio projection or
    ``"pad"`` for the zero-padding ablation.
    """
    cfg.validate()
    if projection not in ("linear", "pad"):
        raise ContractError(f"projection must be 'linear' or 'pad', got {projection!r}")
    m, d_a, d_v = _check_dataset(dataset)
    k = cfg.topk or default_topk(m)
    if k > m:
        raise ContractError(f"topk {k} exceeds segment count {m}")
    mode = Mode.SHARED if projection == "linear" else Mode.PADDING
    if init is not None:
        det, proj = init[0].copy(), (init[1].copy() if init[1] is not None else None)
    else:
        rng = derive_rng(cfg.seed, "init", mode.value)
        det = init_detector(d_v, rng, cfg.hidden)
        proj = init_projection(d_a, d_v, rng) if mode is Mode.SHARED else None
    samples = training_samples(dataset, mode)

    def epoch_samples(epoch):
        order = derive_rng(cfg.seed, "shuffle", mode.value, epoch).permutation(len(samples))
        return [samples[i] for i in order]

    history = _run_training(epoch_samples, det, proj, cfg, k, len(samples), pad_width=d_v)
    _round_f32(det)
    if proj is not None:
        _round_f32(proj)
    return TrainedModel(mode, det, proj, d_a, d_v, cfg, history)


def analytic_gradients(det, proj, sample, k):
    """Flat name -> gradient mapping for a single sample."""
    _, gdet, gproj = batch_loss_and_grads(det, proj, [sample], k)
    grads = dict(gdet.arrays())
    if proj is not None:
        if gproj is None:
            gproj = ProjectionParams(np.zeros_like(proj.weight), np.zeros_like(proj.bias))
        grads.update(gproj.arrays())
    return grads


def gradient_check(
    params,
    sample: TrainingSample,
    k=None,
    n_entries=40,
    step=1e-4,
    seed=0,
    grad_fn: Optional[Callable] = None,
):
    """Max relative error between analytic and central-difference gradients.

    ``params`` is a :class:`DetectorParams` or a ``(DetectorParams,
    ProjectionParams)`` pair. A random subset of ``n_entries`` parameter
    entries is probed. ``grad_fn(det, proj, sample, k)`` overrides the analytic
    gradient (used to sanity-check the checker itself).
    """
    det, proj = (params, None) if isinstance(params, DetectorParams) else params
    det = det.copy()
    proj = proj.copy() if proj is not None else None
    k = k or default_topk(np.asarray(sample.features).shape[0])
    grads = (grad_fn or analytic_gradients)(det, proj, sample, k)

    arrays = dict(det.arrays())
    if proj is not None:
        arrays.update(proj.arrays())
    names = sorted(arrays)
    sizes = np.array([arrays[n].size for n in names])
    rng = derive_rng(seed, "gradcheck")
    flat_picks = rng.choice(sizes.sum(), size=min(n_entries, sizes.sum()), replace=False)
    bounds = np.cumsum(sizes)

    def loss():
        return batch_loss_and_grads(det, proj, [sample], k)[0]

    worst = 0.0
    for flat in flat_picks:
        which = int(np.searchsorted(bounds, flat, side="right"))
        name = names[which]
        local = int(flat - (bounds[which - 1] if which else 0))
        arr = arrays[name].reshape(-1)
        orig = arr[local]
        arr[local] = orig + step
        up = loss()
        arr[local] = orig - step
        down = loss()
        arr[local] = orig
        numeric = (up - down) / (2 * step)
        analytic = float(np.asarray(grads[name]).reshape(-1)[local])
        denom = max(abs(numeric), abs(analytic), 1e-8)
        worst = max(worst, abs(numeric - analytic) / denom)
    return worst


# --- RAM1 model checkpoint -------------------------------------------------
#
# magic "RAM1" | version u8 (=1) | seed u64 | config_hash u64 | mode u8
# d_audio u32 | d_visual u32 | n_layers u32
# per layer: rows u32 | cols u32 | weight f32[rows*cols] | bias f32[cols]
# has_projection u8 | if 1: weight f32[d_audio*d_visual] | bias f32[d_visual]
# config_len u32 | config JSON (UTF-8)

RAM_MAGIC = b"RAM1"


def encode_model(model: TrainedModel, seed=0, cfg_hash=0) -> bytes:
    out = io.BytesIO()
    out.write(RAM_MAGIC)
    out.write(struct.pack("<BQQB", 1, seed & 0xFFFFFFFFFFFFFFFF, cfg_hash, MODE_CODES[model.mode]))
    det = model.detector
    out.write(struct.pack("<III", model.d_audio, model.d_visual, len(det.weights)))
    for w, b in zip(det.weights, det.biases):
        out.write(struct.pack("<II", *w.shape))
        out.write(w.astype("<f4").tobytes())
        out.write(b.astype("<f4").tobytes())
    if model.projection is not None:
        out.write(b"\x01")
        out.write(model.projection.weight.astype("<f4").tobytes())
        out.write(model.projection.bias.astype("<f4").tobytes())
    else:
        out.write(b"\x00")
    echo = json.dumps({"train": model.config.as_dict(), "history": model.history}, sort_keys=True).encode()
    out.write(struct.pack("<I", len(echo)))
    out.write(echo)
    return out.getvalue()


def decode_model(data: bytes):
    """Return ``(model, seed, config_hash)``."""
    r = _Reader(data, "RAM1")
    if r.take(4) != RAM_MAGIC:
        raise FormatError("RAM1: bad magic")
    version, seed, cfg_hash, code = r.unpack("<BQQB")
    if version != 1:
        raise FormatError(f"RAM1: unsupported version {version}")
    modes = {v: k for k, v in MODE_CODES.items()}
    if code not in modes:
        raise FormatError(f"RAM1: unknown mode code {code}")
    d_a, d_v, n_layers = r.unpack("<III")
    weights, biases = [], []
    for _ in range(n_layers):
        rows, cols = r.unpack("<II")
        weights.append(r.floats(rows * cols).astype(np.float64).reshape(rows, cols))
        biases.append(r.floats(cols).astype(np.float64))
    try:
        det = DetectorParams(weights, biases)
    except ContractError as exc:
        raise FormatError(f"RAM1: {exc}") from None
    (has_proj,) = r.unpack("<B")
    proj = None
    if has_proj:
        proj = ProjectionParams(
            r.floats(d_a * d_v).astype(np.float64).reshape(d_a, d_v), r.floats(d_v).astype(np.float64)
        )
    (n_echo,) = r.unpack("<I")
    echo = json.loads(r.take(n_echo).decode("utf-8"))
    r.finish()
    tc = echo["train"]
    tc["hidden"] = tuple(tc["hidden"])
    model = TrainedModel(modes[code], det, proj, d_a, d_v, TrainConfig(**tc), echo.get("history", []))
    return model, seed, cfg_hash


def save_model(model, path, seed=0, cfg_hash=0):
    Path(path).write_bytes(encode_model(model, seed, cfg_hash))


def load_model(path):
    return decode_model(Path(path).read_bytes())
