"""Smoke tests for the python bindings: each exported operation runs and
agrees with an independent numpy reference on a small case."""

import math

import numpy as np
import pytest

import brainmt


def sequential_scan_reference(u, delta, B, C, A):
    L, d = u.shape
    N = A.shape[1]
    y = np.zeros((L, d))
    for c in range(d):
        h = np.zeros(N)
        for t in range(L):
            dt = delta[t, c]
            s = dt * A[c]
            e = np.exp(s)
            coef = np.where(np.abs(s) < 1e-8, dt, (e - 1.0) / A[c])
            h = e * h + coef * B[t] * u[t, c]
            y[t, c] = np.dot(C[t], h)
    return y


def test_selective_scan_matches_reference():
    rng = np.random.default_rng(0)
    L, d, N = 70, 3, 8
    u = rng.normal(size=(L, d))
    delta = 0.01 + np.abs(rng.normal(size=(L, d))) * 0.2
    B = rng.normal(size=(L, N))
    C = rng.normal(size=(L, N))
    A = -np.arange(1.0, N + 1.0)[None, :].repeat(d, axis=0)
    y = brainmt.selective_scan(u, delta, B, C, A)
    ref = sequential_scan_reference(u, delta, B, C, A)
    np.testing.assert_allclose(y, ref, rtol=1e-10, atol=1e-12)


def test_zoh_closed_form():
    abar, bbar = brainmt.zoh_discretize(np.array([-1.0]), np.array([1.0]), 1.0)
    assert abar[0] == pytest.approx(math.exp(-1.0), rel=1e-12)
    assert bbar[0] == pytest.approx(1.0 - math.exp(-1.0), rel=1e-12)


def test_reorder_round_trip():
    rng = np.random.default_rng(1)
    T, K, Z = 3, 4, 5
    body = rng.normal(size=(T * K, Z))
    fwd = brainmt.reorder(body, T, K, "spatial_first", "temporal_first")
    # time-fastest layout: row k*T + t is body row t*K + k
    for t in range(T):
        for k in range(K):
            np.testing.assert_array_equal(fwd[k * T + t], body[t * K + k])
    back = brainmt.reorder(fwd, T, K, "temporal_first", "spatial_first")
    np.testing.assert_array_equal(back, body)


def test_zscore_normalize_stats():
    rng = np.random.default_rng(2)
    vol = rng.normal(loc=3.0, scale=2.0, size=(2, 32, 32, 32))
    mask = np.ones((32, 32, 32), dtype=bool)
    mask[:8, :8, :8] = False
    out = brainmt.zscore_normalize(vol, mask)
    fg = out[:, mask]
    assert abs(fg.mean()) < 1e-10
    assert abs(fg.var() - 1.0) < 1e-10
    assert np.all(out[:, ~mask] == fg.min())


def test_model_forward_deterministic():
    model = brainmt.Model("desk", dims=32, frames=4, channels=2,
                          mamba_layers=1, transformer_layers=1, seed=3)
    assert model.token_count() == 4 * 8 + 1
    rng = np.random.default_rng(3)
    vol = rng.normal(size=(4, 32, 32, 32))
    a = model.forward(vol)
    b = model.forward(vol)
    assert a == b
    assert math.isfinite(a)


def test_model_checkpoint_round_trip(tmp_path):
    model = brainmt.Model("desk", dims=32, frames=2, channels=2,
                          mamba_layers=1, transformer_layers=1, seed=4)
    rng = np.random.default_rng(4)
    vol = rng.normal(size=(2, 32, 32, 32))
    path = str(tmp_path / "ck.bmt")
    model.save(path)
    back = brainmt.Model.load(path)
    assert back.forward(vol) == model.forward(vol)
    assert back.parameter_count() == model.parameter_count()


def test_volume_file_round_trip(tmp_path):
    rng = np.random.default_rng(5)
    vol = rng.normal(size=(2, 16, 16, 16))
    path = str(tmp_path / "v.vol")
    brainmt.save_volume(path, vol)
    back = brainmt.load_volume(path)
    np.testing.assert_array_equal(back, vol)


def test_integrated_gradients_zero_at_baseline():
    model = brainmt.Model("desk", dims=32, frames=2, channels=2,
                          mamba_layers=1, transformer_layers=1, seed=6)
    vol = np.full((2, 32, 32, 32), -1.25)
    attr = model.integrated_gradients(vol, m=2)
    assert np.all(attr == 0.0)


def test_errors_map_to_python_exceptions():
    with pytest.raises(ValueError):
        brainmt.Model("desk", dims=30)  # not divisible by 16
    with pytest.raises(ValueError):
        rng = np.random.default_rng(7)
        brainmt.reorder(rng.normal(size=(6, 2)), 2, 2, "spatial_first", "temporal_first")
