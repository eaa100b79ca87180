"""Shared domain types and the RAF1 binary feature-file format.

RAF1 layout (little-endian throughout)::

    magic "RAF1" | version u8 (=1) | video_count u32
    per video:
        id_len u16 | id bytes (UTF-8) | label u8 | m u32
        d_audio u32 (0 = absent) | d_visual u32 (0 = absent)
        audio payload m*d_audio f32 | visual payload m*d_visual f32
        truth_flag u8 | if 1: m bytes of 0/1
"""

import enum
import io
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np


class RobustaError(Exception):
    """Base class for all toolkit errors."""


class ContractError(RobustaError, ValueError):
    """A caller violated an operation's precondition."""


class ValidationError(RobustaError, ValueError):
    """A domain object violates one of its invariants."""


class FormatError(RobustaError, ValueError):
    """A binary artifact is malformed."""


class Modality(enum.Enum):
    AUDIO = "audio"
    VISUAL = "visual"


def _frozen_array(values, dtype):
    arr = np.array(values, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class SegmentedModalityFeatures:
    """An ``m x d`` matrix of per-segment features for one modality of one video.

    Values are held as a read-only float32 array. Finiteness is not enforced
    here so that invalid inputs can be constructed and rejected by
    :func:`validate_bag` with a precise message.
    """

    modality: Modality
    values: np.ndarray

    def __post_init__(self):
        arr = _frozen_array(self.values, np.float32)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValidationError(
                f"{self.modality.value} features must be a non-empty 2-D matrix, got shape {arr.shape}"
            )
        object.__setattr__(self, "values", arr)

    @property
    def segment_count(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def __eq__(self, other):
        if not isinstance(other, SegmentedModalityFeatures):
            return NotImplemented
        return (
            self.modality == other.modality
            and self.values.shape == other.values.shape
            and self.values.tobytes() == other.values.tobytes()
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class VideoBag:
    """One video: id, video-level label and per-modality segment features."""

    id: str
    label: int
    audio: Optional[SegmentedModalityFeatures] = None
    visual: Optional[SegmentedModalityFeatures] = None
    segment_truth: Optional[np.ndarray] = field(default=None)

    def __post_init__(self):
        if self.segment_truth is not None:
            object.__setattr__(self, "segment_truth", _frozen_array(self.segment_truth, np.uint8))

    @property
    def segment_count(self) -> int:
        feats = self.audio if self.audio is not None else self.visual
        if feats is None:
            raise ValidationError(f"bag {self.id!r}: no modality present")
        return feats.segment_count

    def replace(self, **changes) -> "VideoBag":
        kwargs = dict(
            id=self.id,
            label=self.label,
            audio=self.audio,
            visual=self.visual,
            segment_truth=self.segment_truth,
        )
        kwargs.update(changes)
        return VideoBag(**kwargs)

    def __eq__(self, other):
        if not isinstance(other, VideoBag):
            return NotImplemented
        if (self.segment_truth is None) != (other.segment_truth is None):
            return False
        if self.segment_truth is not None and not np.array_equal(self.segment_truth, other.segment_truth):
            return False
        return (
            self.id == other.id
            and self.label == other.label
            and self.audio == other.audio
            and self.visual == other.visual
        )

    __hash__ = None


def validate_bag(bag: VideoBag) -> None:
    """Raise :class:`ValidationError` naming the bag and the violated invariant."""
    prefix = f"bag {bag.id!r}"
    if bag.label not in (0, 1):
        raise ValidationError(f"{prefix}: label must be 0 or 1, got {bag.label!r}")
    if bag.audio is None and bag.visual is None:
        raise ValidationError(f"{prefix}: at least one modality must be present")
    for feats, modality in ((bag.audio, Modality.AUDIO), (bag.visual, Modality.VISUAL)):
        if feats is None:
            continue
        if feats.modality is not modality:
            raise ValidationError(f"{prefix}: {modality.value} slot holds {feats.modality.value} features")
        if not np.all(np.isfinite(feats.values)):
            raise ValidationError(f"{prefix}: non-finite value in {modality.value} features")
    if bag.audio is not None and bag.visual is not None:
        if bag.audio.segment_count != bag.visual.segment_count:
            raise ValidationError(
                f"{prefix}: segment count mismatch (audio {bag.audio.segment_count}, "
                f"visual {bag.visual.segment_count})"
            )
    if bag.segment_truth is not None:
        truth = bag.segment_truth
        if truth.ndim != 1 or truth.shape[0] != bag.segment_count:
            raise ValidationError(
                f"{prefix}: segment_truth length {truth.size} != segment count {bag.segment_count}"
            )
        if np.any(truth > 1):
            raise ValidationError(f"{prefix}: segment_truth flags must be 0/1")
        if bag.label == 0 and np.any(truth):
            raise ValidationError(f"{prefix}: label 0 bag has anomalous segment_truth flags")


MAGIC = b"RAF1"
VERSION = 1


def encode_features(bags: Sequence[VideoBag]) -> bytes:
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<BI", VERSION, len(bags)))
    for bag in bags:
        validate_bag(bag)
        ident = bag.id.encode("utf-8")
        if len(ident) > 0xFFFF:
            raise ValidationError(f"bag {bag.id[:32]!r}...: id longer than 65535 bytes")
        m = bag.segment_count
        d_audio = bag.audio.dim if bag.audio is not None else 0
        d_visual = bag.visual.dim if bag.visual is not None else 0
        out.write(struct.pack("<H", len(ident)))
        out.write(ident)
        out.write(struct.pack("<BIII", bag.label, m, d_audio, d_visual))
        for feats in (bag.audio, bag.visual):
            if feats is not None:
                out.write(feats.values.astype("<f4").tobytes())
        if bag.segment_truth is None:
            out.write(b"\x00")
        else:
            out.write(b"\x01")
            out.write(bag.segment_truth.astype(np.uint8).tobytes())
    return out.getvalue()


class _Reader:
    def __init__(self, data: bytes, what: str):
        self.data = data
        self.pos = 0
        self.what = what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"{self.what}: truncated payload at byte {self.pos} (need {n} more)")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def floats(self, count: int, dtype="<f4") -> np.ndarray:
        itemsize = np.dtype(dtype).itemsize
        return np.frombuffer(self.take(count * itemsize), dtype=dtype).astype(dtype.replace("<", "="))

    def finish(self):
        if self.pos != len(self.data):
            raise FormatError(f"{self.what}: {len(self.data) - self.pos} trailing bytes after declared content")


def decode_features(data: bytes) -> list:
    r = _Reader(data, "RAF1")
    if r.take(4) != MAGIC:
        raise FormatError("RAF1: bad magic")
    version, count = r.unpack("<BI")
    if version != VERSION:
        raise FormatError(f"RAF1: unsupported version {version}")
    bags = []
    for _ in range(count):
        (id_len,) = r.unpack("<H")
        try:
            ident = r.take(id_len).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"RAF1: video id is not UTF-8: {exc}") from None
        label, m, d_audio, d_visual = r.unpack("<BIII")
        if m == 0 or (d_audio == 0 and d_visual == 0):
            raise FormatError(f"RAF1: video {ident!r} declares m={m}, d_audio={d_audio}, d_visual={d_visual}")
        audio = visual = None
        if d_audio:
            audio = SegmentedModalityFeatures(Modality.AUDIO, r.floats(m * d_audio).reshape(m, d_audio))
        if d_visual:
            visual = SegmentedModalityFeatures(Modality.VISUAL, r.floats(m * d_visual).reshape(m, d_visual))
        (truth_flag,) = r.unpack("<B")
        truth = None
        if truth_flag == 1:
            truth = np.frombuffer(r.take(m), dtype=np.uint8)
        elif truth_flag != 0:
            raise FormatError(f"RAF1: video {ident!r} has truth flag {truth_flag}")
        bag = VideoBag(ident, label, audio, visual, truth)
        try:
            validate_bag(bag)
        except ValidationError as exc:
            raise FormatError(f"RAF1: {exc}") from None
        bags.append(bag)
    r.finish()
    return bags


def write_features(bags: Sequence[VideoBag], path) -> None:
    data = encode_features(bags)
    Path(path).write_bytes(data)


def read_features(path) -> list:
    return decode_features(Path(path).read_bytes())
