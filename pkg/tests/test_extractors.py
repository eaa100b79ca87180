import numpy as np
import pytest

from robusta.core import ContractError, Modality
from robusta.extractors import (
    LOG_FLOOR,
    ExtractorConfig,
    extract_audio_features,
    extract_bag,
    extract_visual_features,
    filter_centers,
    filterbank_log_energies,
)
from robusta.synthgen import GenConfig, generate_scene

IDENT = ((0.0, 1.0), (0.0, 1.0), (0.0, 1.0))
RAW = ExtractorConfig(audio_block_norm=IDENT, visual_block_norm=IDENT)
SR = 8000


def test_silence_hits_log_floor():
    cfg = RAW
    feats = extract_audio_features(np.zeros(4 * 800), 4, cfg, SR).values
    floor = (np.log(LOG_FLOOR) - cfg.log_offset) / cfg.log_scale
    nf = cfg.n_filters
    assert np.allclose(feats[:, :nf], floor, atol=1e-6)
    assert np.allclose(feats[:, nf:3 * nf], 0.0)
    assert np.all(feats[:, 3 * nf:] == 0.0)


def test_tone_peaks_in_its_filter():
    cfg = RAW
    frame_len = 800 // cfg.audio_frames
    centers = filter_centers(cfg.n_filters, frame_len, SR, cfg.fmin_hz)
    t = np.arange(2 * 800) / SR
    for j in (4, 10, 16):
        tone = 0.5 * np.sin(2 * np.pi * centers[j] * t)
        log_e = filterbank_log_energies(tone, 2, cfg, SR)
        assert np.all(np.argmax(log_e, axis=-1) == j)


def test_filter_energy_matches_direct_dft():
    cfg = RAW
    rng = np.random.default_rng(0)
    x = 0.1 * rng.standard_normal(800)
    frame_len = 800 // cfg.audio_frames
    frame = x[:frame_len] * np.hanning(frame_len)
    n = np.arange(frame_len)
    k = np.arange(frame_len // 2 + 1)
    dft = np.exp(-2j * np.pi * np.outer(k, n) / frame_len) @ frame
    from robusta.extractors import triangular_filterbank

    bank = triangular_filterbank(cfg.n_filters, frame_len, SR, cfg.fmin_hz)
    expected = np.log(np.maximum(bank @ np.abs(dft) ** 2, LOG_FLOOR))
    got = filterbank_log_energies(x, 1, cfg, SR)[0, 0]
    assert np.allclose(got, expected, atol=1e-9)


def test_constant_frames():
    frames = np.full((3, 4, 32, 32), 0.5)
    feats = extract_visual_features(frames, RAW).values
    cells = sum(g * g for g in RAW.patch_grids)
    assert np.allclose(feats[:, :cells], 0.5)
    assert np.allclose(feats[:, cells:3 * cells], 0.0)
    assert np.all(feats[:, 3 * cells:] == 0.0)


def test_still_frames_have_no_motion():
    rng = np.random.default_rng(2)
    still = np.repeat(rng.random((2, 1, 32, 32)), 5, axis=1)
    feats = extract_visual_features(still, RAW).values
    cells = sum(g * g for g in RAW.patch_grids)
    assert np.all(feats[:, 2 * cells:3 * cells] == 0.0)
    assert np.all(feats[:, cells:2 * cells] > 0.0)


def test_bright_patch_shows_in_its_cell():
    frames = np.zeros((1, 2, 32, 32))
    frames[:, :, :8, :8] = 1.0  # top-left cell of the 4x4 grid
    feats = extract_visual_features(frames, RAW).values[0]
    assert feats[0] == pytest.approx(1.0)
    assert np.all(feats[1:16] == 0.0)


def test_block_normalization_is_affine():
    frames = np.random.default_rng(1).random((2, 3, 32, 32))
    norm = ((0.4, 0.1), (0.03, 0.02), (0.02, 0.01))
    raw = extract_visual_features(frames, RAW).values.astype(np.float64)
    scaled = extract_visual_features(frames, ExtractorConfig(visual_block_norm=norm)).values.astype(np.float64)
    cells = sum(g * g for g in RAW.patch_grids)
    for b, (off, scale) in enumerate(norm):
        sl = slice(b * cells, (b + 1) * cells)
        assert np.allclose(scaled[:, sl], (raw[:, sl] - off) / scale, atol=1e-4)


def test_bag_shapes_and_types():
    cfg = GenConfig(n_train=2, n_test=0, segments_per_video=8)
    scene = generate_scene(cfg, 0)
    bag = extract_bag(scene)
    assert bag.audio.modality is Modality.AUDIO and bag.visual.modality is Modality.VISUAL
    assert bag.audio.values.shape == (8, 64)
    assert bag.visual.values.shape == (8, 256)
    assert bag.audio.values.dtype == np.float32
    assert np.all(np.isfinite(bag.audio.values)) and np.all(np.isfinite(bag.visual.values))
    assert extract_bag(scene, with_truth=False).segment_truth is None


def test_features_respond_to_content():
    cfg = GenConfig(n_train=2, n_test=0, segments_per_video=8)
    scene = generate_scene(cfg, 0)
    base = extract_bag(scene)
    loud = extract_bag(scene.replace(audio=np.clip(scene.audio * 4, -1, 1)))
    dark = extract_bag(scene.replace(frames=scene.frames * 0.5))
    assert not np.allclose(base.audio.values, loud.audio.values)
    assert not np.allclose(base.visual.values, dark.visual.values)


@pytest.mark.parametrize("bad", [
    dict(d_audio=256, d_visual=256),
    dict(d_audio=0),
    dict(patch_grids=()),
    dict(audio_block_norm=((0.0, 1.0), (0.0, 0.0), (0.0, 1.0))),
])
def test_invalid_config(bad):
    with pytest.raises(ContractError):
        extract_visual_features(np.zeros((1, 2, 32, 32)), ExtractorConfig(**bad))


def test_bad_inputs():
    with pytest.raises(ContractError):
        extract_audio_features(np.zeros(801), 4)
    with pytest.raises(ContractError):
        extract_visual_features(np.zeros((2, 32, 32)))
    with pytest.raises(ContractError):
        extract_visual_features(np.zeros((1, 2, 4, 4)))
