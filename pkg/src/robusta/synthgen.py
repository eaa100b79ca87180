"""Seeded synthetic audio-visual scenes with injected anomalous events.

Each scene is ``m`` segments long. The audio track is band-limited background
noise over a faint hiss, scaled by a random per-video level; the video is a
smooth drifting grayscale background under random per-video lighting.
Anomalous segments carry a loud burst together with a bright moving patch.
Benign events are either quiet thumps with dim slow blobs or, with
probability ``mimic_prob``, weaker look-alikes of the anomalous event, so
neither modality separates the classes on its own.
"""

import io
import math
import struct
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .core import ContractError, FormatError, ValidationError, _Reader, _frozen_array
from .seeding import derive_rng

EVENT_MODALITIES = ("both", "audio", "visual")


@dataclass(frozen=True)
class GenConfig:
    n_train: int = 400
    n_test: int = 100
    segments_per_video: int = 16
    samples_per_segment: int = 1024
    sample_rate: int = 8000
    frames_per_segment: int = 4
    height: int = 32
    width: int = 32
    anomaly_ratio: float = 0.5
    # event model
    background_rms: float = 0.03
    burst_gain: float = 6.0
    tonal_prob: float = 0.7
    flash_intensity: float = 0.3
    patch_size: int = 8
    event_duration: int = 3
    max_events: int = 2
    event_modality: str = "both"
    distractor_rate: float = 0.15
    hiss_rms: float = 0.002  # broadband microphone noise floor
    lighting_jitter: float = 0.4
    level_jitter: float = 0.5  # per-video audio gain in octaves
    mimic_prob: float = 0.8  # share of benign events that look anomalous in both modalities
    seed: int = 0

    @property
    def video_count(self) -> int:
        return self.n_train + self.n_test

    def validate(self) -> None:
        counts = dict(
            n_train=self.n_train,
            segments_per_video=self.segments_per_video,
            samples_per_segment=self.samples_per_segment,
            sample_rate=self.sample_rate,
            frames_per_segment=self.frames_per_segment,
            height=self.height,
            width=self.width,
            patch_size=self.patch_size,
            event_duration=self.event_duration,
            max_events=self.max_events,
        )
        for name, value in counts.items():
            if int(value) != value or value < 1:
                raise ValidationError(f"GenConfig.{name} must be a positive integer, got {value!r}")
        if self.n_test < 0:
            raise ValidationError("GenConfig.n_test must be non-negative")
        if self.segments_per_video < 2:
            raise ValidationError("GenConfig.segments_per_video must be at least 2")
        if not 0.0 < self.anomaly_ratio < 1.0:
            raise ValidationError(f"GenConfig.anomaly_ratio must lie in (0, 1), got {self.anomaly_ratio}")
        if self.event_modality not in EVENT_MODALITIES:
            raise ValidationError(f"GenConfig.event_modality must be one of {EVENT_MODALITIES}")
        if self.patch_size > min(self.height, self.width):
            raise ValidationError("GenConfig.patch_size exceeds the frame size")
        if not 0.0 <= self.tonal_prob <= 1.0:
            raise ValidationError("GenConfig.tonal_prob must lie in [0, 1]")
        if not 0.0 <= self.mimic_prob <= 1.0:
            raise ValidationError("GenConfig.mimic_prob must lie in [0, 1]")
        if not 0.0 <= self.distractor_rate < 1.0:
            raise ValidationError("GenConfig.distractor_rate must lie in [0, 1)")
        if not 0.0 < self.background_rms < 1.0 or self.burst_gain < 3.0 / 0.55:
            raise ValidationError(f"GenConfig needs 0 < background_rms < 1 and burst_gain >= {3.0 / 0.55:.4f}")
        if not 0.0 < self.flash_intensity <= 1.0:
            raise ValidationError("GenConfig.flash_intensity must lie in (0, 1]")

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True, eq=False)
class RawScene:
    id: str
    label: int
    sample_rate: int
    audio: np.ndarray  # float32, length m * samples_per_segment
    frames: np.ndarray  # float32, (m, F, H, W)
    segment_truth: np.ndarray  # uint8, length m

    def __post_init__(self):
        object.__setattr__(self, "audio", _frozen_array(self.audio, np.float32))
        object.__setattr__(self, "frames", _frozen_array(self.frames, np.float32))
        object.__setattr__(self, "segment_truth", _frozen_array(self.segment_truth, np.uint8))
        if self.frames.ndim != 4:
            raise ValidationError(f"scene {self.id!r}: frames must be (m, F, H, W), got {self.frames.shape}")
        m = self.frames.shape[0]
        if self.audio.ndim != 1 or self.audio.size % m:
            raise ValidationError(f"scene {self.id!r}: audio length {self.audio.size} not divisible by m={m}")
        if self.segment_truth.shape != (m,):
            raise ValidationError(f"scene {self.id!r}: segment_truth must have length {m}")

    @property
    def segment_count(self) -> int:
        return self.frames.shape[0]

    @property
    def samples_per_segment(self) -> int:
        return self.audio.size // self.segment_count

    def replace(self, **changes) -> "RawScene":
        kwargs = dict(
            id=self.id,
            label=self.label,
            sample_rate=self.sample_rate,
            audio=self.audio,
            frames=self.frames,
            segment_truth=self.segment_truth,
        )
        kwargs.update(changes)
        return RawScene(**kwargs)

    def __eq__(self, other):
        if not isinstance(other, RawScene):
            return NotImplemented
        return (
            self.id == other.id
            and self.label == other.label
            and self.sample_rate == other.sample_rate
            and self.audio.tobytes() == other.audio.tobytes()
            and self.frames.shape == other.frames.shape
            and self.frames.tobytes() == other.frames.tobytes()
            and self.segment_truth.tobytes() == other.segment_truth.tobytes()
        )

    __hash__ = None


def _half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def positive_counts(cfg: GenConfig):
    """(train positives, test positives); the total is round(n * anomaly_ratio)."""
    total = _half_up(cfg.video_count * cfg.anomaly_ratio)
    test = min(_half_up(cfg.n_test * cfg.anomaly_ratio), total)
    return total - test, test


def split_of(cfg: GenConfig, index: int) -> str:
    return "train" if index < cfg.n_train else "test"


def scene_label(cfg: GenConfig, index: int) -> int:
    if not 0 <= index < cfg.video_count:
        raise ContractError(f"scene index {index} outside [0, {cfg.video_count})")
    train_pos, test_pos = positive_counts(cfg)
    if index < cfg.n_train:
        order = derive_rng(cfg.seed, "labels", "train").permutation(cfg.n_train)
        return int(order[index] < train_pos)
    order = derive_rng(cfg.seed, "labels", "test").permutation(cfg.n_test)
    return int(order[index - cfg.n_train] < test_pos)


def _bandlimited_noise(rng, n, sample_rate, lo_hz, hi_hz):
    spectrum = np.fft.rfft(rng.standard_normal(n))
    freqs = np.fft.rfftfreq(n, d=1.0 / sample_rate)
    spectrum[(freqs < lo_hz) | (freqs > hi_hz)] = 0.0
    x = np.fft.irfft(spectrum, n)
    rms = np.sqrt(np.mean(x**2))
    return x / rms if rms > 0 else x


def _smooth_field(rng, h, w, lo, hi, n_waves=3):
    yy, xx = np.meshgrid(np.arange(h) / h, np.arange(w) / w, indexing="ij")
    field = np.zeros((h, w))
    for _ in range(n_waves):
        fy, fx = rng.uniform(0.3, 1.5, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        field += np.cos(2 * np.pi * (fy * yy + fx * xx) + phase)
    field -= field.min()
    peak = field.max()
    if peak > 0:
        field /= peak
    return lo + (hi - lo) * field


def _reflect_unit(x):
    """Reflect values into [0, 1] (mirror at both edges)."""
    y = np.mod(x, 2.0)
    return np.where(y > 1.0, 2.0 - y, y)


def _event_segments(rng, cfg: GenConfig):
    m = cfg.segments_per_video
    cap = m // 2
    flags = np.zeros(m, dtype=np.uint8)
    n_events = int(rng.integers(1, cfg.max_events + 1))
    for _ in range(n_events):
        remaining = cap - int(flags.sum())
        if remaining <= 0:
            break
        length = int(min(rng.integers(1, cfg.event_duration + 1), remaining))
        start = int(rng.integers(0, m - length + 1))
        flags[start : start + length] = 1
        # overlapping placement can exceed the cap only through union; trim from the end
        while flags.sum() > cap:
            flags[np.flatnonzero(flags)[-1]] = 0
    if flags.sum() == 0:
        flags[int(rng.integers(0, m))] = 1
    return flags


def _moving_patch_masks(rng, n_frames, h, w, size, speed):
    """Boolean masks (n_frames, h, w) of a square patch bouncing around the frame."""
    pos = np.array([rng.uniform(0, h - size), rng.uniform(0, w - size)])
    angle = rng.uniform(0, 2 * np.pi)
    vel = speed * np.array([np.sin(angle), np.cos(angle)])
    masks = np.zeros((n_frames, h, w), dtype=bool)
    limit = np.array([h - size, w - size], dtype=float)
    for t in range(n_frames):
        y, x = np.round(pos).astype(int)
        masks[t, y : y + size, x : x + size] = True
        pos = pos + vel
        for ax in range(2):
            if pos[ax] < 0:
                pos[ax], vel[ax] = -pos[ax], -vel[ax]
            elif pos[ax] > limit[ax]:
                pos[ax], vel[ax] = 2 * limit[ax] - pos[ax], -vel[ax]
    return masks


def generate_scene(cfg: GenConfig, index: int) -> RawScene:
    """Build scene ``index``; a pure function of ``(cfg, index)``."""
    cfg.validate()
    label = scene_label(cfg, index)
    rng = derive_rng(cfg.seed, "scene", index)
    m, sps, sr = cfg.segments_per_video, cfg.samples_per_segment, cfg.sample_rate
    F, H, W = cfg.frames_per_segment, cfg.height, cfg.width
    n_samples = m * sps

    truth = _event_segments(rng, cfg) if label == 1 else np.zeros(m, dtype=np.uint8)
    distract = (rng.random(m) < cfg.distractor_rate) & (truth == 0)
    audio_events = truth if cfg.event_modality in ("both", "audio") else np.zeros_like(truth)
    visual_events = truth if cfg.event_modality in ("both", "visual") else np.zeros_like(truth)

    # audio: background noise with slow amplitude wobble
    bg = _bandlimited_noise(rng, n_samples, sr, 100.0, 0.25 * sr)
    t = np.arange(n_samples) / sr
    wobble = 1.0 + 0.2 * np.sin(2 * np.pi * rng.uniform(0.1, 0.5) * t + rng.uniform(0, 2 * np.pi))
    hiss = cfg.hiss_rms * 2.0 ** (rng.uniform(-1.0, 1.0) * cfg.level_jitter)
    audio = cfg.background_rms * bg * wobble + hiss * rng.standard_normal(n_samples)
    # benign event loudness is relative to the median background segment RMS
    ref = float(np.median(np.sqrt(np.mean(audio.reshape(m, sps) ** 2, axis=1))))
    seg_t = np.arange(sps) / sr
    envelope = np.hanning(sps) ** 0.25

    def burst(gain, tonal):
        sig = _bandlimited_noise(rng, sps, sr, 300.0, 0.45 * sr)
        if tonal:
            f0 = rng.uniform(600.0, 1200.0)
            sig = 0.6 * sig + 1.1 * np.sin(2 * np.pi * f0 * seg_t + rng.uniform(0, 2 * np.pi))
        sig = sig * envelope
        return sig * (gain * ref / np.sqrt(np.mean(sig**2)))

    # benign events: a quiet thump with a slow dim blob, or a "mimic" that
    # resembles an anomaly in both modalities at once
    mimic = distract & (rng.random(m) < cfg.mimic_prob)
    for s in np.flatnonzero(distract):
        if mimic[s]:
            tonal = rng.random() < 1.0 - cfg.tonal_prob
            audio[s * sps : (s + 1) * sps] += burst(rng.uniform(0.35, 0.8) * cfg.burst_gain, tonal)
        else:
            thump = _bandlimited_noise(rng, sps, sr, 40.0, 300.0) * np.exp(-seg_t * rng.uniform(8.0, 20.0))
            thump *= rng.uniform(2.0, 4.0) * ref / np.sqrt(np.mean(thump**2))
            audio[s * sps : (s + 1) * sps] += thump
    # anomalous bursts are scaled against the median normal segment, distractors included
    normal = np.sqrt(np.mean(audio.reshape(m, sps) ** 2, axis=1))[truth == 0]
    ref = float(np.median(normal))
    for s in np.flatnonzero(audio_events):
        tonal = rng.random() < cfg.tonal_prob
        gain = rng.uniform(0.55, 1.0) * cfg.burst_gain
        audio[s * sps : (s + 1) * sps] += burst(gain, tonal)
    # per-video recording level
    audio = np.clip(audio * 2.0 ** (rng.uniform(-1.0, 1.0) * cfg.level_jitter), -1.0, 1.0)

    # video: smooth field plus reflected random-walk brightness drift
    n_frames = m * F
    base = _smooth_field(rng, H, W, 0.25, 0.55)
    drift = np.cumsum(rng.normal(0.0, 0.01, size=n_frames))
    frames = base[None, :, :] + drift[:, None, None]
    frames = frames + rng.normal(0.0, 0.015, size=frames.shape)
    frames = _reflect_unit(frames).reshape(m, F, H, W)
    # per-video lighting: contrast and exposure around mid-gray
    gain = 1.0 + rng.uniform(-1.0, 1.0) * cfg.lighting_jitter
    offset = rng.uniform(-1.0, 1.0) * cfg.lighting_jitter * 0.5
    frames = 0.5 + (frames - 0.5) * gain + offset
    for s in np.flatnonzero(distract):
        if mimic[s]:
            masks = _moving_patch_masks(rng, F, H, W, cfg.patch_size, speed=rng.uniform(1.5, 4.5))
            lift = rng.uniform(0.4, 0.8) * cfg.flash_intensity * (1.0 - 0.3 * rng.random(F))
            frames[s] = np.where(masks, frames[s] + lift[:, None, None], frames[s])
        else:
            masks = _moving_patch_masks(rng, F, H, W, max(2, cfg.patch_size - 2), speed=rng.uniform(0.5, 1.5))
            frames[s] = np.where(masks, np.minimum(frames[s] + rng.uniform(0.1, 0.35), 1.0), frames[s])
    for s in np.flatnonzero(visual_events):
        masks = _moving_patch_masks(rng, F, H, W, cfg.patch_size, speed=rng.uniform(2.0, 6.0))
        lift = rng.uniform(0.5, 1.0) * cfg.flash_intensity * (1.0 - 0.3 * rng.random(F))
        frames[s] = np.where(masks, frames[s] + lift[:, None, None], frames[s])
    frames = np.clip(frames, 0.0, 1.0)

    return RawScene(
        id=f"{split_of(cfg, index)}-{index:05d}",
        label=label,
        sample_rate=sr,
        audio=audio.astype(np.float32),
        frames=frames.astype(np.float32),
        segment_truth=truth,
    )


def generate_dataset(cfg: GenConfig, workers: int = 1):
    """Return ``(train_scenes, test_scenes)``.

    Scenes derive their own random streams from ``(seed, index)``, so the
    result does not depend on ``workers``.
    """
    cfg.validate()
    indices = range(cfg.video_count)
    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            scenes = list(pool.map(lambda i: generate_scene(cfg, i), indices))
    else:
        scenes = [generate_scene(cfg, i) for i in indices]
    return scenes[: cfg.n_train], scenes[cfg.n_train :]


# --- RAS1 raw scene dump ---------------------------------------------------
#
# magic "RAS1" | version u8 (=1) | seed u64 | config_hash u64 | scene_count u32
# per scene: id_len u16 | id | label u8 | sample_rate u32 | m u32 | samples_per_segment u32
#            F u32 | H u32 | W u32 | audio f32[m*sps] | frames f32[m*F*H*W] | truth u8[m]

RAS_MAGIC = b"RAS1"
RAS_VERSION = 1


def encode_scenes(scenes, seed: int = 0, cfg_hash: int = 0) -> bytes:
    out = io.BytesIO()
    out.write(RAS_MAGIC)
    out.write(struct.pack("<BQQI", RAS_VERSION, seed & 0xFFFFFFFFFFFFFFFF, cfg_hash, len(scenes)))
    for sc in scenes:
        if not (np.all(np.isfinite(sc.audio)) and np.all(np.isfinite(sc.frames))):
            raise ValidationError(f"scene {sc.id!r}: non-finite raw signal")
        ident = sc.id.encode("utf-8")
        m, F, H, W = sc.frames.shape
        out.write(struct.pack("<H", len(ident)))
        out.write(ident)
        out.write(struct.pack("<BIIIIII", sc.label, sc.sample_rate, m, sc.samples_per_segment, F, H, W))
        out.write(sc.audio.astype("<f4").tobytes())
        out.write(sc.frames.astype("<f4").tobytes())
        out.write(sc.segment_truth.astype(np.uint8).tobytes())
    return out.getvalue()


def decode_scenes(data: bytes):
    """Return ``(scenes, seed, config_hash)``."""
    r = _Reader(data, "RAS1")
    if r.take(4) != RAS_MAGIC:
        raise FormatError("RAS1: bad magic")
    version, seed, cfg_hash, count = r.unpack("<BQQI")
    if version != RAS_VERSION:
        raise FormatError(f"RAS1: unsupported version {version}")
    scenes = []
    for _ in range(count):
        (id_len,) = r.unpack("<H")
        ident = r.take(id_len).decode("utf-8", errors="strict")
        label, sr, m, sps, F, H, W = r.unpack("<BIIIIII")
        if min(m, sps, F, H, W) == 0:
            raise FormatError(f"RAS1: scene {ident!r} has a zero dimension")
        audio = r.floats(m * sps)
        frames = r.floats(m * F * H * W).reshape(m, F, H, W)
        truth = np.frombuffer(r.take(m), dtype=np.uint8)
        scenes.append(RawScene(ident, label, sr, audio, frames, truth))
    r.finish()
    return scenes, seed, cfg_hash


def write_scenes(scenes, path, seed: int = 0, cfg_hash: int = 0) -> None:
    Path(path).write_bytes(encode_scenes(scenes, seed, cfg_hash))


def read_scenes(path):
    return decode_scenes(Path(path).read_bytes())
