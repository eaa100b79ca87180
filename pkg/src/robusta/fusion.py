"""Late fusion of per-modality segment scores.

Each present modality is scored by the shared detector; the two score
streams are averaged with per-segment weights. Under the dynamic scheme a
modality's raw weight is a decreasing logistic of its GMM negative
log-likelihood, capped at 0.5, and the two weights are renormalized to sum
to one. A missing modality always gets weight zero.
"""

import csv
import enum
from dataclasses import dataclass
from typing import Mapping, Optional

import numpy as np

from .core import ContractError, Modality, VideoBag
from .detector import Mode, TrainedModel
from .gmm import GmmParams, SigmoidCalibration, nll

_TINY = np.finfo(np.float64).tiny
_BELOW_HALF = np.nextafter(0.5, 0.0)


class Scheme(enum.Enum):
    NAIVE = "naive"
    DYNAMIC = "dynamic"
    CONCAT = "concat"


@dataclass(frozen=True)
class ModalityGate:
    gmm: GmmParams
    calibration: SigmoidCalibration


@dataclass
class ModalityWeights:
    lambda_audio: np.ndarray
    lambda_visual: np.ndarray


@dataclass
class FusionTrace:
    audio_scores: Optional[np.ndarray]
    visual_scores: Optional[np.ndarray]
    lambda_audio: Optional[np.ndarray]
    lambda_visual: Optional[np.ndarray]
    fused: np.ndarray


def dynamic_weight(nll_value, cal: SigmoidCalibration):
    """``0.5 / (1 + exp(c * (nll + x_0)))``, kept strictly inside (0, 0.5)."""
    with np.errstate(over="ignore"):
        z = cal.scale * (np.asarray(nll_value, dtype=np.float64) + cal.shift)
    ez = np.exp(-np.abs(z))
    w = np.where(z > 0, 0.5 * ez / (1.0 + ez), 0.5 / (1.0 + ez))
    w = np.clip(w, _TINY, _BELOW_HALF)
    return float(w) if np.ndim(w) == 0 else w


def normalize_weights(raw_audio, raw_visual, audio_present=True, visual_present=True) -> ModalityWeights:
    """Zero absent modalities, then scale the weights to sum to one."""
    if not (audio_present or visual_present):
        raise ContractError("cannot weight a segment with both modalities absent")
    a = np.asarray(raw_audio, dtype=np.float64) if audio_present else None
    v = np.asarray(raw_visual, dtype=np.float64) if visual_present else None
    ref = a if a is not None else v
    if not audio_present:
        return ModalityWeights(np.zeros_like(ref), np.ones_like(ref))
    if not visual_present:
        return ModalityWeights(np.ones_like(ref), np.zeros_like(ref))
    a, v = np.broadcast_arrays(a, v)
    if np.any(a < 0) or np.any(v < 0) or np.any(a > 0.5) or np.any(v > 0.5):
        raise ContractError("raw weights must lie in [0, 0.5]")
    total = a + v
    both_tiny = (a < 1e-12) & (v < 1e-12)
    safe = np.where(both_tiny, 1.0, total)
    la = np.where(both_tiny, 0.5, a / safe)
    lv = np.where(both_tiny, 0.5, v / safe)
    return ModalityWeights(la, lv)


def fuse(audio_scores, visual_scores, weights: ModalityWeights):
    """Per-segment ``lambda_A * a + lambda_V * v``; an absent stream contributes nothing."""
    if audio_scores is None and visual_scores is None:
        raise ContractError("nothing to fuse")
    if audio_scores is not None and visual_scores is not None and len(audio_scores) != len(visual_scores):
        raise ContractError(f"score length mismatch: audio {len(audio_scores)}, visual {len(visual_scores)}")
    ref = audio_scores if audio_scores is not None else visual_scores
    fused = np.zeros(len(ref))
    if audio_scores is not None:
        fused = fused + weights.lambda_audio * np.asarray(audio_scores, dtype=np.float64)
    if visual_scores is not None:
        fused = fused + weights.lambda_visual * np.asarray(visual_scores, dtype=np.float64)
    return np.clip(fused, 0.0, 1.0)


def _check_scheme(model: TrainedModel, scheme: Scheme):
    if scheme is Scheme.CONCAT and model.mode is not Mode.CONCAT:
        raise ContractError(f"concat scheme needs a concat-trained detector, got {model.mode.value}")
    if scheme is not Scheme.CONCAT and model.mode is Mode.CONCAT:
        raise ContractError(f"{scheme.value} scheme needs a shared-space detector, got a concat detector")


def gate_nll(features, gate: ModalityGate, granularity="segment"):
    """Per-segment NLLs, or the video's median NLL broadcast to every segment."""
    values = nll(features, gate.gmm)
    if granularity == "video":
        return np.full_like(values, np.median(values))
    if granularity != "segment":
        raise ContractError(f"granularity must be 'segment' or 'video', got {granularity!r}")
    return values


def score_video_trace(
    bag: VideoBag,
    model: TrainedModel,
    scheme: Scheme,
    gates: Optional[Mapping[Modality, ModalityGate]] = None,
    granularity: str = "segment",
) -> FusionTrace:
    scheme = Scheme(scheme) if isinstance(scheme, str) else scheme
    _check_scheme(model, scheme)
    if bag.audio is None and bag.visual is None:
        raise ContractError(f"bag {bag.id!r} has no modality")
    m = bag.segment_count

    if scheme is Scheme.CONCAT:
        # an absent block is zero-filled
        audio = bag.audio.values if bag.audio is not None else np.zeros((m, model.d_audio))
        visual = bag.visual.values if bag.visual is not None else np.zeros((m, model.d_visual))
        fused = model.score_concat(audio, visual)
        return FusionTrace(None, None, None, None, fused)

    a = model.score_audio(bag.audio.values) if bag.audio is not None else None
    v = model.score_visual(bag.visual.values) if bag.visual is not None else None
    if scheme is Scheme.NAIVE:
        raw_a = raw_v = np.full(m, 0.5)
    else:
        if not gates:
            raise ContractError("dynamic scheme needs fitted modality gates")
        raw_a = raw_v = None
        if bag.audio is not None:
            gate = gates[Modality.AUDIO]
            raw_a = dynamic_weight(gate_nll(bag.audio.values, gate, granularity), gate.calibration)
        if bag.visual is not None:
            gate = gates[Modality.VISUAL]
            raw_v = dynamic_weight(gate_nll(bag.visual.values, gate, granularity), gate.calibration)
    weights = normalize_weights(raw_a, raw_v, bag.audio is not None, bag.visual is not None)
    fused = fuse(a, v, weights)
    return FusionTrace(a, v, weights.lambda_audio, weights.lambda_visual, fused)


def score_video(bag, model, scheme, gates=None, granularity="segment"):
    """Fused per-segment anomaly scores of one bag."""
    return score_video_trace(bag, model, scheme, gates, granularity).fused


TRACE_HEADER = ["video_id", "segment_index", "audio_score", "visual_score", "lambda_a", "lambda_v", "fused"]


def write_traces(traces, path):
    """Write ``{video_id: FusionTrace}`` as one CSV row per segment."""

    def cell(arr, i):
        return "" if arr is None else f"{float(arr[i]):.9g}"

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TRACE_HEADER)
        for vid, tr in traces.items():
            for i in range(len(tr.fused)):
                writer.writerow(
                    [vid, i, cell(tr.audio_scores, i), cell(tr.visual_scores, i),
                     cell(tr.lambda_audio, i), cell(tr.lambda_visual, i), cell(tr.fused, i)]
                )
