import math
from dataclasses import replace

import numpy as np
import pytest

from robusta.core import ContractError, FormatError
from robusta.detector import (
    EPS,
    DetectorParams,
    Mode,
    ProjectionParams,
    TrainConfig,
    TrainingSample,
    View,
    analytic_gradients,
    batch_loss_and_grads,
    dataset_loss,
    decode_model,
    default_topk,
    encode_model,
    forward_score,
    gradient_check,
    init_detector,
    init_projection,
    load_model,
    mil_loss,
    pad_audio,
    project,
    save_model,
    train_concat,
    train_shared,
    training_samples,
)
from robusta.extractors import extract_bag
from robusta.synthgen import GenConfig, generate_dataset
from conftest import make_bag


def reference_forward(x, weights, biases):
    h = x
    for i, (w, b) in enumerate(zip(weights, biases)):
        h = h @ w + b
        if i < len(weights) - 1:
            h = np.where(h > 0, h, 0.0)
    return 1.0 / (1.0 + np.exp(-h[:, 0]))


def toy_dataset(n=6, m=8, d_a=4, d_v=10, seed=0):
    return [make_bag(vid=f"t{i}", label=i % 2, m=m, d_audio=d_a, d_visual=d_v, seed=seed + i) for i in range(n)]


def test_default_topk():
    assert default_topk(16) == 2
    assert default_topk(32) == 3
    assert default_topk(17) == 3
    assert default_topk(1) == 1


def test_projection_examples():
    x = np.random.default_rng(0).normal(size=(5, 3))
    zero = ProjectionParams(np.zeros((3, 7)), np.zeros(7))
    assert np.array_equal(project(x, zero), np.zeros((5, 7)))
    eye = np.zeros((3, 7))
    eye[:3, :3] = np.eye(3)
    out = project(x, ProjectionParams(eye, np.zeros(7)))
    assert np.array_equal(out[:, :3], x) and np.all(out[:, 3:] == 0)
    with pytest.raises(ContractError):
        project(np.zeros((2, 64)), init_projection(32, 64, np.random.default_rng(0)))


def test_pad_audio():
    x = np.ones((2, 3))
    assert np.array_equal(pad_audio(x, 5), np.array([[1, 1, 1, 0, 0]] * 2, dtype=float))
    with pytest.raises(ContractError):
        pad_audio(np.ones((2, 6)), 5)


def test_zero_params_score_one_half():
    det = init_detector(6, np.random.default_rng(0))
    det = DetectorParams([np.zeros_like(w) for w in det.weights], [np.zeros_like(b) for b in det.biases])
    assert np.all(forward_score(np.random.default_rng(1).normal(size=(4, 6)), det) == 0.5)


def test_forward_matches_reference():
    det = init_detector(12, np.random.default_rng(7))
    det.biases = [np.random.default_rng(8 + i).normal(size=b.shape) * 0.1 for i, b in enumerate(det.biases)]
    x = np.random.default_rng(9).normal(size=(3, 12))
    ref = reference_forward(x, det.weights, det.biases)
    got = forward_score(x, det)
    assert np.allclose(got, ref, atol=1e-6)
    assert np.array_equal(got, forward_score(x, det))
    with pytest.raises(ContractError):
        forward_score(np.zeros((3, 11)), det)


def test_layer_shapes():
    det = init_detector(256, np.random.default_rng(0))
    assert [w.shape for w in det.weights] == [(256, 128), (128, 32), (32, 1)]


def test_mil_loss_examples():
    loss, _ = mil_loss(np.full(8, EPS), 0, 2)
    assert loss < 1e-6
    loss, grad = mil_loss(np.array([0.1, 0.5, 0.2, 0.3]), 1, 1)
    assert loss == pytest.approx(-math.log(0.5), abs=1e-9)
    assert loss == pytest.approx(0.693147, abs=1e-6)
    assert np.count_nonzero(grad) == 1 and grad[1] == pytest.approx(-2.0)
    with pytest.raises(ContractError):
        mil_loss(np.zeros(4), 1, 5)
    with pytest.raises(ContractError):
        mil_loss(np.zeros(4), 1, 0)


def test_mil_loss_uses_top_scores_mean():
    scores = np.array([0.9, 0.1, 0.7, 0.2])
    loss, _ = mil_loss(scores, 0, 2)
    assert loss == pytest.approx(-math.log(1 - 0.8))


def test_learning_rate_zero_keeps_params():
    data = toy_dataset()
    rng = np.random.default_rng(3)
    det = init_detector(10, rng)
    proj = init_projection(4, 10, rng)
    cfg = TrainConfig(epochs=3, lr=0.0, weight_decay=0.0, batch_size=4)
    model = train_shared(data, cfg, init=(det, proj))
    for a, b in zip(det.weights, model.detector.weights):
        assert np.allclose(a, b, atol=1e-6)
    assert np.allclose(proj.weight, model.projection.weight, atol=1e-6)
    cmodel = train_concat(data, cfg, init=init_detector(14, rng))
    assert len(cmodel.detector.weights) == 3


def test_one_step_decreases_loss():
    data = toy_dataset(n=2)
    cfg = TrainConfig(epochs=1, lr=0.05, batch_size=4, weight_decay=0.0)
    rng = np.random.default_rng(0)
    init = (init_detector(10, rng), init_projection(4, 10, rng))
    before = train_shared(data, replace(cfg, epochs=0), init=init)
    after = train_shared(data, cfg, init=init)
    assert dataset_loss(data, after) < dataset_loss(data, before)


def test_shared_sees_both_views():
    data = toy_dataset(n=5)
    samples = training_samples(data, Mode.SHARED)
    assert len(samples) == 10
    assert sum(s.view is View.AUDIO for s in samples) == 5
    assert len(training_samples(data, Mode.CONCAT)) == 5


def test_training_is_deterministic():
    data = toy_dataset()
    cfg = TrainConfig(epochs=4, lr=0.01, batch_size=4)
    a, b = train_shared(data, cfg), train_shared(data, cfg)
    for x, y in zip(a.detector.weights, b.detector.weights):
        assert np.array_equal(x, y)
    assert a.history == b.history


def test_missing_modality_rejected():
    data = toy_dataset()
    data[1] = data[1].replace(audio=None)
    with pytest.raises(ContractError):
        train_shared(data, TrainConfig(epochs=1))
    with pytest.raises(ContractError):
        train_shared(toy_dataset(), TrainConfig(epochs=1), projection="conv")


def test_gradient_check_fresh_params():
    rng = np.random.default_rng(1)
    det, proj = init_detector(10, rng), init_projection(4, 10, rng)
    audio = TrainingSample(rng.normal(size=(8, 4)), 1, View.AUDIO)
    visual = TrainingSample(rng.normal(size=(8, 10)), 0, View.VISUAL)
    assert gradient_check((det, proj), audio, n_entries=100) < 1e-4
    assert gradient_check(det, visual, n_entries=100) < 1e-4


def test_gradient_checker_catches_bad_gradients():
    rng = np.random.default_rng(2)
    det = init_detector(10, rng)
    sample = TrainingSample(rng.normal(size=(8, 10)), 1, View.VISUAL)

    def broken(det, proj, sample, k):
        return {name: g + 0.1 for name, g in analytic_gradients(det, proj, sample, k).items()}

    assert gradient_check(det, sample, n_entries=30, grad_fn=broken) > 1e-2


def test_saturated_point_has_tiny_gradients():
    rng = np.random.default_rng(3)
    det = init_detector(6, rng)
    det.biases[-1][:] = -40.0  # every score pinned near 0
    sample = TrainingSample(rng.normal(size=(4, 6)), 0, View.VISUAL)
    loss, grads, _ = batch_loss_and_grads(det, None, [sample], 2)
    assert loss < 1e-6
    assert max(np.abs(g).max() for g in grads.arrays().values()) < 1e-6


def test_desk_training_halves_loss():
    cfg = GenConfig(n_train=400, n_test=0, segments_per_video=16, seed=0)
    train, _ = generate_dataset(cfg)
    bags = [extract_bag(s) for s in train]
    model = train_shared(bags, TrainConfig(seed=0))
    assert model.history[-1] < 0.5 * model.history[0]


def test_model_file_round_trip(tmp_path):
    data = toy_dataset()
    for model in (
        train_shared(data, TrainConfig(epochs=2)),
        train_shared(data, TrainConfig(epochs=2), projection="pad"),
        train_concat(data, TrainConfig(epochs=2)),
    ):
        path = tmp_path / f"{model.mode.value}.ram"
        save_model(model, path, seed=5, cfg_hash=77)
        back, seed, h = load_model(path)
        assert (seed, h, back.mode) == (5, 77, model.mode)
        for a, b in zip(model.detector.weights, back.detector.weights):
            assert np.array_equal(a, b)
        assert back.history == model.history
        assert (back.projection is None) == (model.projection is None)


def test_model_file_errors():
    data = encode_model(train_shared(toy_dataset(), TrainConfig(epochs=1)))
    with pytest.raises(FormatError):
        decode_model(b"XXXX" + data[4:])
    with pytest.raises(FormatError):
        decode_model(data[:-10])
