"""Hand-crafted per-segment feature extractors for raw scenes.

Audio rows hold filterbank log-energy statistics over short frames inside each
segment; visual rows hold grid-patch means, standard deviations and
inter-frame motion energy.
"""

from dataclasses import dataclass

import numpy as np

from .core import ContractError, Modality, SegmentedModalityFeatures, VideoBag

LOG_FLOOR = 1e-8


@dataclass(frozen=True)
class ExtractorConfig:
    d_audio: int = 64
    d_visual: int = 256
    n_filters: int = 20
    audio_frames: int = 8  # short-time frames per segment
    fmin_hz: float = 50.0
    patch_grids: tuple = (4, 8)
    # audio log-energies are mapped through (log_e - log_offset) / log_scale
    log_offset: float = -8.0
    log_scale: float = 4.0
    # (offset, scale) per feature block, applied as (x - offset) / scale; the
    # defaults standardize clean scenes from the default generator
    audio_block_norm: tuple = ((1.345, 0.389), (0.169, 0.0514), (0.203, 0.0694))  # mean, std, delta
    visual_block_norm: tuple = ((0.420, 0.149), (0.0322, 0.0165), (0.0206, 0.0109))  # mean, std, motion

    def validate(self):
        if self.d_audio < 1 or self.d_visual < 1:
            raise ContractError("feature dimensions must be positive")
        if self.d_audio >= self.d_visual:
            raise ContractError(f"d_audio ({self.d_audio}) must be smaller than d_visual ({self.d_visual})")
        if self.n_filters < 1 or self.audio_frames < 2 or self.log_scale <= 0:
            raise ContractError("invalid filterbank settings")
        if not self.patch_grids or any(g < 1 for g in self.patch_grids):
            raise ContractError("patch_grids must be positive")
        for norm in (self.audio_block_norm, self.visual_block_norm):
            if len(norm) != 3 or any(scale <= 0 for _, scale in norm):
                raise ContractError("block normalization needs three (offset, positive scale) pairs")


def _normalize_blocks(blocks, norm):
    return [(b - off) / scale for b, (off, scale) in zip(blocks, norm)]


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


def filter_centers(n_filters, n_fft, sample_rate, fmin_hz=50.0):
    """Center frequencies (Hz) of the triangular filterbank."""
    mels = np.linspace(_hz_to_mel(fmin_hz), _hz_to_mel(sample_rate / 2.0), n_filters + 2)
    return _mel_to_hz(mels)[1:-1]


def triangular_filterbank(n_filters, n_fft, sample_rate, fmin_hz=50.0):
    """``(n_filters, n_fft // 2 + 1)`` matrix of mel-spaced triangular filters (peak 1)."""
    mels = np.linspace(_hz_to_mel(fmin_hz), _hz_to_mel(sample_rate / 2.0), n_filters + 2)
    edges = _mel_to_hz(mels)
    freqs = np.fft.rfftfreq(n_fft, d=1.0 / sample_rate)
    bank = np.zeros((n_filters, freqs.size))
    for j in range(n_filters):
        lo, mid, hi = edges[j], edges[j + 1], edges[j + 2]
        rising = (freqs - lo) / (mid - lo)
        falling = (hi - freqs) / (hi - mid)
        bank[j] = np.clip(np.minimum(rising, falling), 0.0, None)
    return bank


def _fit_width(block, width):
    out = np.zeros((block.shape[0], width))
    n = min(width, block.shape[1])
    out[:, :n] = block[:, :n]
    return out


def filterbank_log_energies(audio, segment_count, cfg: ExtractorConfig, sample_rate):
    """Raw natural-log filter energies, shape ``(m, audio_frames, n_filters)``."""
    x = np.asarray(audio, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise ContractError("audio must be a non-empty 1-D signal")
    if segment_count < 1 or x.size % segment_count:
        raise ContractError(f"audio length {x.size} not divisible into {segment_count} segments")
    sps = x.size // segment_count
    frame_len = sps // cfg.audio_frames
    if frame_len < 8:
        raise ContractError(f"segments of {sps} samples are too short for {cfg.audio_frames} frames")
    frames = x.reshape(segment_count, sps)[:, : frame_len * cfg.audio_frames]
    frames = frames.reshape(segment_count, cfg.audio_frames, frame_len)
    power = np.abs(np.fft.rfft(frames * np.hanning(frame_len), axis=-1)) ** 2
    bank = triangular_filterbank(cfg.n_filters, frame_len, sample_rate, cfg.fmin_hz)
    energies = power @ bank.T
    return np.log(np.maximum(energies, LOG_FLOOR))


def extract_audio_features(audio, segment_count, cfg: ExtractorConfig = ExtractorConfig(), sample_rate=8000):
    """Per segment: mean, std and mean absolute delta of normalized log-energies."""
    cfg.validate()
    log_e = (filterbank_log_energies(audio, segment_count, cfg, sample_rate) - cfg.log_offset) / cfg.log_scale
    mean = log_e.mean(axis=1)
    std = log_e.std(axis=1)
    delta = np.abs(np.diff(log_e, axis=1)).mean(axis=1)
    rows = np.concatenate(_normalize_blocks([mean, std, delta], cfg.audio_block_norm), axis=1)
    return SegmentedModalityFeatures(Modality.AUDIO, _fit_width(rows, cfg.d_audio).astype(np.float32))


def _patch_view(frames, grid):
    m, F, H, W = frames.shape
    ph, pw = H // grid, W // grid
    if ph == 0 or pw == 0:
        raise ContractError(f"frames {H}x{W} too small for a {grid}x{grid} grid")
    cropped = frames[:, :, : ph * grid, : pw * grid]
    return cropped.reshape(m, F, grid, ph, grid, pw)


def extract_visual_features(frames, cfg: ExtractorConfig = ExtractorConfig()):
    """Per segment and grid: patch means, patch stds, mean inter-frame |difference|."""
    cfg.validate()
    x = np.asarray(frames, dtype=np.float64)
    if x.ndim != 4 or x.shape[0] == 0 or x.shape[1] == 0:
        raise ContractError(f"frames must be a non-empty (m, F, H, W) stack, got shape {x.shape}")
    m, F = x.shape[:2]
    means, stds, motions = [], [], []
    for grid in cfg.patch_grids:
        patches = _patch_view(x, grid)
        means.append(patches.mean(axis=(1, 3, 5)).reshape(m, -1))
        stds.append(patches.std(axis=(1, 3, 5)).reshape(m, -1))
        if F > 1:
            diff = np.abs(np.diff(patches, axis=1)).mean(axis=(1, 3, 5))
        else:
            diff = np.zeros((m, grid, grid))
        motions.append(diff.reshape(m, -1))
    blocks = [np.concatenate(b, axis=1) for b in (means, stds, motions)]
    rows = np.concatenate(_normalize_blocks(blocks, cfg.visual_block_norm), axis=1)
    return SegmentedModalityFeatures(Modality.VISUAL, _fit_width(rows, cfg.d_visual).astype(np.float32))


def extract_bag(scene, cfg: ExtractorConfig = ExtractorConfig(), with_truth=True) -> VideoBag:
    """Featurize a raw scene into a :class:`VideoBag`."""
    m = scene.segment_count
    return VideoBag(
        id=scene.id,
        label=scene.label,
        audio=extract_audio_features(scene.audio, m, cfg, scene.sample_rate),
        visual=extract_visual_features(scene.frames, cfg),
        segment_truth=scene.segment_truth if with_truth else None,
    )
