"""Linear and non-linear estimator units plus full detector behavior."""

import numpy as np
import pytest

from uura import PriorEstimates, build_codebook
from uura.oamp import (DetectorOptions, detect_slot, linear_estimate,
                       nonlinear_estimate, write_trace_csv)


def _noise(shape, sigma2, rng):
    std = np.sqrt(sigma2 / 2.0)
    return std * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))


def test_linear_estimate_dual_path_agreement():
    """The FFT shortcut for the row-orthogonal codebook matches the explicit
    per-antenna LMMSE-plus-orthogonalization path."""
    cb = build_codebook(64, 8, seed=0)
    rng = np.random.default_rng(1)
    M = 4
    S = rng.standard_normal((256, M)) + 1j * rng.standard_normal((256, M))
    Y = rng.standard_normal((64, M)) + 1j * rng.standard_normal((64, M))
    sigma2, v = 0.3, 0.7
    R1, u1 = linear_estimate(Y, S, v, sigma2, cb)
    R2, u2 = linear_estimate(Y, S, v, sigma2, cb, force_general=True)
    assert np.max(np.abs(R1 - R2)) < 1e-9
    assert np.max(np.abs(u1 - u2)) < 1e-9
    assert np.allclose(u1, sigma2 + (cb.gram_scale - 1.0) * v)


def test_linear_estimate_rejects_bad_variances():
    cb = build_codebook(64, 8, seed=0)
    Z = np.zeros((256, 2), dtype=complex)
    Y = np.zeros((64, 2), dtype=complex)
    with pytest.raises(ValueError):
        linear_estimate(Y, Z, -1.0, 0.1, cb)
    with pytest.raises(ValueError):
        linear_estimate(Y, Z, 1.0, 0.0, cb)


def test_posterior_spot_value():
    # r = 0, g = u = 1, M = 8, eps = 0.01:
    # log-odds = log 99 + 8 log 2, pi = expit(-(log 99 + 8 log 2))
    R = np.zeros((1, 8), dtype=complex)
    den, _, _ = nonlinear_estimate(R, 1.0, np.array([0.01]), np.array([1.0]))
    expected = 1.0 / (1.0 + 99.0 * 2.0 ** 8)
    assert den.pi[0] == pytest.approx(expected, rel=1e-12)
    assert expected == pytest.approx(3.945e-5, rel=1e-3)


def test_denoiser_shrinkage_at_equal_scales():
    # g = u: lambda = r/2, rho = u/2
    rng = np.random.default_rng(2)
    R = rng.standard_normal((16, 4)) + 1j * rng.standard_normal((16, 4))
    u = 0.8
    den, _, _ = nonlinear_estimate(R, u, np.full(16, 0.3), np.full(16, u))
    assert np.allclose(den.lam, R / 2.0)
    assert np.allclose(den.rho, u / 2.0)
    assert np.allclose(den.s_hat, den.pi[:, None] * den.lam)
    with pytest.raises(ValueError):
        nonlinear_estimate(R, 0.0, np.full(16, 0.3), np.full(16, u))


def test_denoiser_zero_gain_rows_inactive():
    rng = np.random.default_rng(3)
    R = rng.standard_normal((8, 4)) + 1j * rng.standard_normal((8, 4))
    den, _, _ = nonlinear_estimate(R, 1.0, np.full(8, 0.1), np.zeros(8))
    assert np.allclose(den.s_hat, 0.0)
    assert np.all(den.pi < 0.11)


def test_first_iteration_u():
    """From S = 0, v = 1 the first-iteration observation variance is
    sigma2 + (2^J/n0 - 1)."""
    cb = build_codebook(256, 10, seed=1)
    rng = np.random.default_rng(4)
    sigma2 = 0.01
    Y = _noise((256, 4), sigma2, rng)
    res = detect_slot(Y, cb, DetectorOptions(max_iters=1, em=False,
                                             priors=PriorEstimates(
                                                 sigma2, np.full(1024, 0.01),
                                                 np.ones(1024))))
    assert res.trace[0][0] == pytest.approx(sigma2 + 3.0, rel=1e-12)


def test_detector_high_snr_support_recovery():
    """sigma2 = 1e-8, 10 active rows out of 1024: the detector recovers the
    support and the estimate NMSE is far below 1e-4."""
    cb = build_codebook(256, 10, seed=2)
    rng = np.random.default_rng(5)
    M = 8
    rows = np.sort(rng.choice(1024, size=10, replace=False))
    X = np.zeros((1024, M), dtype=complex)
    X[rows] = rng.standard_normal((10, M)) + 1j * rng.standard_normal((10, M))
    Y = cb.apply(X) + _noise((256, M), 1e-8, rng)
    res = detect_slot(Y, cb, truth=X)
    assert res.converged
    assert np.array_equal(np.flatnonzero(res.pi_final > 0.5), rows)
    nmse = np.linalg.norm(res.X_hat - X) ** 2 / np.linalg.norm(X) ** 2
    assert nmse < 1e-4
    assert res.trace[-1][2] == pytest.approx(nmse, rel=1e-6)


def test_detector_pure_noise_selects_nothing():
    cb = build_codebook(256, 10, seed=3)
    rng = np.random.default_rng(6)
    Y = _noise((256, 8), 0.5, rng)
    res = detect_slot(Y, cb)
    assert int(np.sum(res.pi_final > 0.5)) == 0


def test_trace_shape_and_decreasing_u():
    cb = build_codebook(256, 10, seed=2)
    rng = np.random.default_rng(7)
    M = 8
    rows = np.sort(rng.choice(1024, size=20, replace=False))
    X = np.zeros((1024, M), dtype=complex)
    X[rows] = rng.standard_normal((20, M)) + 1j * rng.standard_normal((20, M))
    Y = cb.apply(X) + _noise((256, M), 1e-6, rng)
    res = detect_slot(Y, cb, truth=X)
    us = [tr[0] for tr in res.trace]
    assert len(res.trace) == res.iterations_used
    assert us[-1] <= us[0]
    rels = [tr[5] for tr in res.trace]
    assert rels[-1] < 1e-4  # settled at the stop
    assert all(len(tr) == 6 for tr in res.trace)


def test_trace_csv_roundtrip(tmp_path):
    cb = build_codebook(64, 8, seed=0)
    rng = np.random.default_rng(8)
    Y = _noise((64, 2), 1.0, rng)
    res = detect_slot(Y, cb, truth=np.zeros((256, 2), dtype=complex))
    path = tmp_path / "trace.csv"
    write_trace_csv(res, path)
    import csv as _csv
    with open(path) as f:
        rows = list(_csv.reader(f))
    assert rows[0] == ["t", "u", "v", "nmse", "u_empirical", "n_selected",
                       "rel_change"]
    assert len(rows) == 1 + len(res.trace)
    assert float(rows[1][1]) == pytest.approx(res.trace[0][0])
