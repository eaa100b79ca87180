"""Audio and visual corruptions with five severity levels each.

Every transform is a pure function of ``(input, kind, severity, seed)``; the
parametric building blocks (``add_noise_at_snr``, ``contrast`` ...) are
exposed for direct use and testing.
"""

import enum
import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage, signal

from .core import ContractError, Modality
from .seeding import derive_rng

ALLOWED_FRACTIONS = (0.0, 0.1, 0.3, 0.5, 0.7, 0.9, 1.0)
DEFAULT_SEVERITY = 3


class CorruptionKind(enum.Enum):
    BIT_ERROR = "bit_error"
    BRIGHTNESS = "brightness"
    CONTRAST = "contrast"
    FOG = "fog"
    RAIN = "rain"
    MOTION_BLUR = "motion_blur"
    SATURATE = "saturate"
    SHOT_NOISE = "shot_noise"
    BABBLE = "babble"
    BITRATE = "bitrate"
    HF_CHANNEL = "hf_channel"
    PINK = "pink"
    PITCH_SHIFT = "pitch_shift"
    RANDOM_DROPOUT = "random_dropout"
    REVERB = "reverb"
    WHITE = "white"

    @property
    def modality(self) -> Modality:
        return Modality.VISUAL if self in VISUAL_KINDS else Modality.AUDIO

    @classmethod
    def parse(cls, name: str) -> "CorruptionKind":
        key = name.strip().lower().replace("-", "_").replace(" ", "_")
        aliases = {"hfchannel": "hf_channel", "motionblur": "motion_blur", "biterror": "bit_error",
                   "shotnoise": "shot_noise", "pitchshift": "pitch_shift", "randomdropout": "random_dropout",
                   "overlay": "babble", "saturation": "saturate"}
        key = aliases.get(key, key)
        try:
            return cls(key)
        except ValueError:
            raise ContractError(f"unknown corruption kind {name!r}") from None


VISUAL_KINDS = (
    CorruptionKind.BIT_ERROR,
    CorruptionKind.BRIGHTNESS,
    CorruptionKind.CONTRAST,
    CorruptionKind.FOG,
    CorruptionKind.RAIN,
    CorruptionKind.MOTION_BLUR,
    CorruptionKind.SATURATE,
    CorruptionKind.SHOT_NOISE,
)
AUDIO_KINDS = (
    CorruptionKind.BABBLE,
    CorruptionKind.BITRATE,
    CorruptionKind.HF_CHANNEL,
    CorruptionKind.PINK,
    CorruptionKind.PITCH_SHIFT,
    CorruptionKind.RANDOM_DROPOUT,
    CorruptionKind.REVERB,
    CorruptionKind.WHITE,
)

# severity ladders, index = severity - 1
SNR_DB = (20.0, 15.0, 10.0, 5.0, 0.0)
BITRATE_BITS = (12, 10, 8, 6, 4)
HF_CUTOFF = (0.1, 0.2, 0.3, 0.4, 0.5)
DROPOUT_FRACTION = (0.10, 0.20, 0.35, 0.50, 0.70)
RT60_S = (0.1, 0.2, 0.4, 0.7, 1.0)
BRIGHTNESS_SHIFT = (0.1, 0.2, 0.3, 0.4, 0.5)
CONTRAST_FACTOR = (0.7, 0.55, 0.4, 0.3, 0.2)
FOG_ALPHA = (0.15, 0.3, 0.45, 0.6, 0.75)
RAIN_COVERAGE = (0.02, 0.04, 0.07, 0.10, 0.14)
BLUR_LENGTH = (3, 5, 7, 9, 11)
SATURATE_GAMMA = (0.7, 0.55, 0.4, 0.3, 0.2)
SHOT_PHOTONS = (60, 25, 12, 5, 3)
BIT_FLIP_PROB = (0.001, 0.005, 0.01, 0.05, 0.1)


@dataclass(frozen=True)
class CorruptionSpec:
    kind: CorruptionKind
    severity: int = DEFAULT_SEVERITY
    fraction: float = 1.0
    seed: int = 0

    def __post_init__(self):
        check_severity(self.severity)
        check_fraction(self.fraction)


def check_severity(severity) -> int:
    if int(severity) != severity or not 1 <= severity <= 5:
        raise ContractError(f"severity must be an integer in 1..5, got {severity!r}")
    return int(severity)


def check_fraction(fraction) -> float:
    for allowed in ALLOWED_FRACTIONS:
        if abs(fraction - allowed) < 1e-12:
            return allowed
    raise ContractError(f"fraction {fraction!r} not in {ALLOWED_FRACTIONS}")


def _rms(x) -> float:
    return float(np.sqrt(np.mean(np.square(x, dtype=np.float64))))


# --- audio building blocks -------------------------------------------------


def add_noise_at_snr(x, noise, snr_db):
    """Return ``x + g * noise`` with ``g`` set so that rms(x) / rms(g * noise) hits ``snr_db``.

    No clipping is applied here.
    """
    x = np.asarray(x, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    noise_rms = _rms(noise)
    if noise_rms == 0.0:
        return x.copy()
    target = _rms(x) * 10.0 ** (-snr_db / 20.0)
    return x + noise * (target / noise_rms)


def pink_noise(rng, n):
    spectrum = np.fft.rfft(rng.standard_normal(n))
    freqs = np.arange(spectrum.size, dtype=np.float64)
    freqs[0] = 1.0
    spectrum /= np.sqrt(freqs)
    spectrum[0] = 0.0
    return np.fft.irfft(spectrum, n)


def babble_noise(rng, n, sample_rate, tracks=4):
    """Sum of band-limited harmonic hums with slow amplitude modulation."""
    t = np.arange(n) / sample_rate
    out = np.zeros(n)
    for _ in range(tracks):
        f0 = rng.uniform(90.0, 350.0)
        track = np.zeros(n)
        for h in range(1, 6):
            if h * f0 >= 0.45 * sample_rate:
                break
            track += np.sin(2 * np.pi * h * f0 * t + rng.uniform(0, 2 * np.pi)) / h
        mod = 0.6 + 0.4 * np.sin(2 * np.pi * rng.uniform(1.0, 5.0) * t + rng.uniform(0, 2 * np.pi))
        out += track * mod
    return out


def requantize(x, bits):
    levels = 2 ** (int(bits) - 1) - 1
    return np.round(np.clip(x, -1.0, 1.0) * levels) / levels


def highpass(x, cutoff_fraction, order=4):
    sos = signal.butter(order, cutoff_fraction, btype="highpass", output="sos")
    return signal.sosfiltfilt(sos, np.asarray(x, dtype=np.float64))


def pitch_shift(x, semitones):
    """Resample by ``2**(semitones/12)`` and trim/zero-pad back to the input length."""
    x = np.asarray(x, dtype=np.float64)
    factor = 2.0 ** (semitones / 12.0)
    n = x.size
    positions = np.arange(n) * factor
    return np.interp(positions, np.arange(n), x, right=0.0)


def random_dropout(x, fraction, rng, chunks=8):
    """Zero contiguous chunks covering exactly ``round(fraction * len(x))`` samples."""
    x = np.array(x, dtype=np.float64, copy=True)
    n = x.size
    total = int(math.floor(fraction * n + 0.5))
    if total >= n:
        return np.zeros_like(x)
    if total == 0:
        return x
    k = max(1, min(chunks, total))
    # chunk lengths: random composition of total into k positive parts
    cuts = np.sort(rng.choice(np.arange(1, total), size=k - 1, replace=False)) if k > 1 else np.array([], int)
    lengths = np.diff(np.concatenate([[0], cuts, [total]]))
    # gaps: random composition of the kept samples into k + 1 non-negative parts
    gap_cuts = np.sort(rng.integers(0, n - total + 1, size=k))
    gaps = np.diff(np.concatenate([[0], gap_cuts, [n - total]]))
    pos = 0
    for gap, length in zip(gaps[:-1], lengths):
        pos += int(gap)
        x[pos : pos + int(length)] = 0.0
        pos += int(length)
    return x


def reverb(x, rt60, sample_rate, rng):
    """Convolve with an exponentially decaying noise tail and restore the input peak."""
    x = np.asarray(x, dtype=np.float64)
    length = max(2, int(rt60 * sample_rate))
    t = np.arange(length) / sample_rate
    ir = rng.standard_normal(length) * np.exp(-3.0 * np.log(10.0) * t / rt60)
    ir[0] = 1.0
    y = signal.fftconvolve(x, ir)[: x.size]
    peak_in = np.max(np.abs(x)) if x.size else 0.0
    peak_out = np.max(np.abs(y)) if y.size else 0.0
    if peak_out > 0:
        y *= peak_in / peak_out
    return y


def corrupt_audio(waveform, kind, severity, seed, sample_rate=8000):
    """Apply an audio corruption; output has the input's length and lies in [-1, 1]."""
    kind = CorruptionKind.parse(kind) if isinstance(kind, str) else kind
    if kind.modality is not Modality.AUDIO:
        raise ContractError(f"{kind.value} is a visual corruption, cannot apply to audio")
    s = check_severity(severity) - 1
    x = np.asarray(waveform, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise ContractError("waveform must be a non-empty 1-D signal")
    if not np.all(np.isfinite(x)):
        raise ContractError("waveform contains non-finite samples")
    rng = derive_rng(seed, "corrupt-audio", kind.value)
    n = x.size
    if kind is CorruptionKind.WHITE:
        y = add_noise_at_snr(x, rng.standard_normal(n), SNR_DB[s])
    elif kind is CorruptionKind.PINK:
        y = add_noise_at_snr(x, pink_noise(rng, n), SNR_DB[s])
    elif kind is CorruptionKind.BABBLE:
        y = add_noise_at_snr(x, babble_noise(rng, n, sample_rate), SNR_DB[s])
    elif kind is CorruptionKind.BITRATE:
        y = requantize(x, BITRATE_BITS[s])
    elif kind is CorruptionKind.HF_CHANNEL:
        y = highpass(x, HF_CUTOFF[s])
    elif kind is CorruptionKind.PITCH_SHIFT:
        sign = 1.0 if rng.random() < 0.5 else -1.0
        y = pitch_shift(x, sign * (s + 1))
    elif kind is CorruptionKind.RANDOM_DROPOUT:
        y = random_dropout(x, DROPOUT_FRACTION[s], rng)
    elif kind is CorruptionKind.REVERB:
        y = reverb(x, RT60_S[s], sample_rate, rng)
    else:  # pragma: no cover - exhaustive over AUDIO_KINDS
        raise ContractError(f"unhandled audio kind {kind}")
    return np.clip(y, -1.0, 1.0)


# --- visual building blocks ------------------------------------------------


def brightness(frames, shift):
    return np.asarray(frames, dtype=np.float64) + shift


def contrast(frames, factor):
    return (np.asarray(frames, dtype=np.float64) - 0.5) * factor + 0.5


def fog_field(rng, h, w, coarse=4):
    """Smooth low-frequency field with values in [0.6, 1]."""
    grid = rng.random((coarse, coarse))
    field = ndimage.zoom(grid, (h / coarse, w / coarse), order=3, mode="reflect", grid_mode=True)[:h, :w]
    lo, hi = field.min(), field.max()
    field = (field - lo) / (hi - lo) if hi > lo else np.zeros_like(field)
    return 0.6 + 0.4 * field


def fog(frames, alpha, field):
    frames = np.asarray(frames, dtype=np.float64)
    return (1.0 - alpha) * frames + alpha * field


def rain_mask(rng, h, w, coverage, streak=4):
    """Mask of diagonal streaks covering at least ``coverage`` of the pixels."""
    mask = np.zeros((h, w), dtype=bool)
    target = coverage * h * w
    offsets = np.arange(streak)
    while mask.sum() < target:
        y, x = rng.integers(0, h), rng.integers(0, w)
        ys, xs = y + offsets, x + offsets
        keep = (ys < h) & (xs < w)
        mask[ys[keep], xs[keep]] = True
    return mask


def rain(frames, coverage, rng, value=0.9):
    frames = np.array(frames, dtype=np.float64, copy=True)
    flat = frames.reshape(-1, *frames.shape[-2:])
    h, w = flat.shape[-2:]
    for i in range(flat.shape[0]):
        flat[i][rain_mask(rng, h, w, coverage)] = value
    return flat.reshape(frames.shape)


def motion_blur(frames, length):
    kernel = np.full(int(length), 1.0 / length)
    return ndimage.convolve1d(np.asarray(frames, dtype=np.float64), kernel, axis=-1, mode="nearest")


def saturate(frames, gamma):
    return np.power(np.clip(np.asarray(frames, dtype=np.float64), 0.0, 1.0), gamma)


def shot_noise(frames, photons, rng):
    frames = np.clip(np.asarray(frames, dtype=np.float64), 0.0, 1.0)
    return rng.poisson(frames * photons) / photons


def bit_error(frames, flip_prob, rng):
    """Flip bits of the 8-bit quantized pixels; pixels with no flipped bit are left untouched."""
    frames = np.asarray(frames, dtype=np.float64)
    quantized = np.round(np.clip(frames, 0.0, 1.0) * 255.0).astype(np.uint8)
    flips = rng.random(frames.shape + (8,)) < flip_prob
    weights = (1 << np.arange(8)).astype(np.uint8)
    xor = (flips * weights).sum(axis=-1).astype(np.uint8)
    corrupted = (quantized ^ xor).astype(np.float64) / 255.0
    return np.where(xor != 0, corrupted, frames)


def corrupt_visual(frames, kind, severity, seed):
    """Apply a visual corruption to a frame stack ``(..., H, W)``; output in [0, 1]."""
    kind = CorruptionKind.parse(kind) if isinstance(kind, str) else kind
    if kind.modality is not Modality.VISUAL:
        raise ContractError(f"{kind.value} is an audio corruption, cannot apply to frames")
    s = check_severity(severity) - 1
    x = np.asarray(frames, dtype=np.float64)
    if x.ndim < 2 or x.size == 0:
        raise ContractError("frames must be a non-empty stack of 2-D images")
    rng = derive_rng(seed, "corrupt-visual", kind.value)
    if kind is CorruptionKind.BRIGHTNESS:
        y = brightness(x, BRIGHTNESS_SHIFT[s])
    elif kind is CorruptionKind.CONTRAST:
        y = contrast(x, CONTRAST_FACTOR[s])
    elif kind is CorruptionKind.FOG:
        y = fog(x, FOG_ALPHA[s], fog_field(rng, *x.shape[-2:]))
    elif kind is CorruptionKind.RAIN:
        y = rain(x, RAIN_COVERAGE[s], rng)
    elif kind is CorruptionKind.MOTION_BLUR:
        y = motion_blur(x, BLUR_LENGTH[s])
    elif kind is CorruptionKind.SATURATE:
        y = saturate(x, SATURATE_GAMMA[s])
    elif kind is CorruptionKind.SHOT_NOISE:
        y = shot_noise(x, SHOT_PHOTONS[s], rng)
    elif kind is CorruptionKind.BIT_ERROR:
        y = bit_error(x, BIT_FLIP_PROB[s], rng)
    else:  # pragma: no cover
        raise ContractError(f"unhandled visual kind {kind}")
    return np.clip(y, 0.0, 1.0)


def corrupt_scene(scene, kind, severity, seed):
    """Corrupt the matching modality of a :class:`~robusta.synthgen.RawScene`."""
    kind = CorruptionKind.parse(kind) if isinstance(kind, str) else kind
    if kind.modality is Modality.AUDIO:
        audio = corrupt_audio(scene.audio, kind, severity, seed, scene.sample_rate)
        return scene.replace(audio=audio.astype(np.float32))
    frames = corrupt_visual(scene.frames, kind, severity, seed)
    return scene.replace(frames=frames.astype(np.float32))


def select_corrupted_subset(video_ids, fraction, seed):
    """Seeded shuffle plus prefix take; subsets are nested across fractions."""
    return set(corruption_order(video_ids, seed)[: subset_size(len(video_ids), fraction)])


def subset_size(count, fraction) -> int:
    fraction = check_fraction(fraction)
    return int(math.floor(fraction * count + 0.5))


def corruption_order(video_ids, seed):
    """The seeded order in which videos join the corrupted subset."""
    ids = list(video_ids)
    if len(set(ids)) != len(ids):
        raise ContractError("video ids must be unique")
    perm = derive_rng(seed, "corrupt-subset").permutation(len(ids))
    return [ids[i] for i in perm]
