import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from robusta.core import ContractError, FormatError, Modality
from robusta.fusion import dynamic_weight
from robusta.gmm import (
    VAR_FLOOR,
    GmmParams,
    SigmoidCalibration,
    calibrate_sigmoid,
    decode_gmm,
    encode_gmm,
    fit_gmm,
    load_gmm,
    nll,
    save_gmm,
)

HALF_LOG_2PI = 0.5 * math.log(2 * math.pi)


def standard_normal():
    return GmmParams(np.array([1.0]), np.zeros((1, 1)), np.ones((1, 1)))


def brute_force_nll(x, gmm):
    total = 0.0
    for w, mu, var in zip(gmm.weights, gmm.means, gmm.variances):
        dens = np.prod(np.exp(-0.5 * (x - mu) ** 2 / var) / np.sqrt(2 * np.pi * var))
        total += w * dens
    return -math.log(total)


def random_gmm(rng, K, d):
    w = rng.random(K) + 0.1
    return GmmParams(w / w.sum(), rng.normal(size=(K, d)), rng.uniform(0.3, 2.0, size=(K, d)))


def test_standard_normal_closed_form():
    gmm = standard_normal()
    assert nll(np.array([0.0]), gmm) == pytest.approx(HALF_LOG_2PI, abs=1e-12)
    assert nll(np.array([1.0]), gmm) == pytest.approx(HALF_LOG_2PI + 0.5, abs=1e-12)
    assert HALF_LOG_2PI == pytest.approx(0.918939, abs=1e-6)


def test_identical_components_match_single():
    single = standard_normal()
    double = GmmParams(np.array([0.5, 0.5]), np.zeros((2, 1)), np.ones((2, 1)))
    for x in (-2.0, 0.0, 0.7):
        assert nll(np.array([x]), double) == pytest.approx(nll(np.array([x]), single), abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**32 - 1))
def test_nll_matches_direct_density(K, d, seed):
    rng = np.random.default_rng(seed)
    gmm = random_gmm(rng, K, d)
    x = rng.normal(size=d)
    assert nll(x, gmm) == pytest.approx(brute_force_nll(x, gmm), abs=1e-8)
    perm = rng.permutation(K)
    shuffled = GmmParams(gmm.weights[perm], gmm.means[perm], gmm.variances[perm])
    assert nll(x, shuffled) == pytest.approx(nll(x, gmm), abs=1e-10)


def test_nll_no_underflow_in_high_dimension():
    rng = np.random.default_rng(0)
    gmm = random_gmm(rng, 3, 2048)
    value = nll(rng.normal(size=2048) * 3, gmm)
    assert math.isfinite(value) and value > 0


def test_nll_rows_and_dim_check():
    gmm = standard_normal()
    out = nll(np.array([[0.0], [1.0]]), gmm)
    assert out.shape == (2,)
    with pytest.raises(ContractError):
        nll(np.zeros(2), gmm)


def test_degenerate_data_hits_floor():
    x = np.tile(np.array([1.5, -2.0, 0.25]), (20, 1))
    gmm = fit_gmm(x, K=1)
    assert np.allclose(gmm.means[0], x[0], atol=1e-6)
    assert np.all(gmm.variances >= VAR_FLOOR)
    assert np.allclose(gmm.variances, VAR_FLOOR, rtol=1e-6)


def test_two_cluster_recovery():
    rng = np.random.default_rng(0)
    a = rng.normal(0.0, 0.1, size=(200, 2))
    b = rng.normal(0.0, 0.1, size=(200, 2)) + np.array([10.0, 0.0])
    gmm = fit_gmm(np.concatenate([a, b]), K=2, seed=1)
    found = sorted(gmm.means.tolist())
    for got, oracle in zip(found, [a.mean(axis=0), b.mean(axis=0)]):
        assert np.max(np.abs(np.array(got) - oracle)) < 0.05


def test_em_log_likelihood_never_drops():
    rng = np.random.default_rng(4)
    x = np.concatenate([rng.normal(c, 1.0, size=(150, 5)) for c in (-2, 0, 3)])
    gmm = fit_gmm(x, K=6, seed=2, max_iter=80, tol=None)
    hist = np.array(gmm.history)
    assert len(hist) >= 50
    assert np.all(np.diff(hist) >= -1e-9)


def test_fit_invariants_and_errors():
    x = np.random.default_rng(1).normal(size=(50, 3))
    gmm = fit_gmm(x, K=4, seed=0)
    gmm.validate()
    assert abs(gmm.weights.sum() - 1) < 1e-9
    assert fit_gmm(x, K=4, seed=0) == gmm
    with pytest.raises(ContractError):
        fit_gmm(x[:3], K=4)
    with pytest.raises(ContractError):
        fit_gmm(np.zeros(5), K=1)


def test_calibration_hits_target_at_quantile():
    rng = np.random.default_rng(0)
    values = rng.gamma(3.0, 2.0, size=1000)
    cal = calibrate_sigmoid(values, 0.45, 0.95)
    q = float(np.quantile(values, 0.95))
    assert dynamic_weight(q, cal) == pytest.approx(0.45, abs=1e-12)
    assert cal.scale > 0
    assert np.mean(dynamic_weight(values, cal) >= 0.4) >= 0.9


def test_calibration_equal_values():
    cal = calibrate_sigmoid(np.full(10, 3.0))
    assert math.isfinite(cal.scale) and cal.scale > 0


def test_calibration_errors():
    with pytest.raises(ContractError):
        calibrate_sigmoid([])
    with pytest.raises(ContractError):
        calibrate_sigmoid([1.0, 2.0], target_clean_weight=0.5)
    with pytest.raises(ContractError):
        SigmoidCalibration(-1.0, 0.0)


def test_gate_file_round_trip(tmp_path):
    x = np.random.default_rng(2).normal(size=(60, 4))
    gmm = fit_gmm(x, K=3, modality=Modality.VISUAL)
    cal = calibrate_sigmoid(nll(x, gmm))
    path = tmp_path / "g.rag"
    save_gmm(gmm, path, cal, seed=9, cfg_hash=4)
    back, back_cal, seed, h = load_gmm(path)
    assert back == gmm and back_cal == cal and (seed, h) == (9, 4)
    assert np.array_equal(nll(x, back), nll(x, gmm))
    assert decode_gmm(encode_gmm(gmm))[1] is None


def test_gate_file_errors():
    gmm = fit_gmm(np.random.default_rng(2).normal(size=(20, 2)), K=2, modality=Modality.AUDIO)
    data = encode_gmm(gmm)
    with pytest.raises(FormatError):
        decode_gmm(b"RAM1" + data[4:])
    with pytest.raises(FormatError):
        decode_gmm(data[:-1])
    with pytest.raises(ContractError):
        encode_gmm(fit_gmm(np.random.default_rng(2).normal(size=(20, 2)), K=2))
