import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spikedict import oracle
from spikedict.topology import (
    NetworkParams,
    SimConfig,
    build_network,
    configure_from_dictionary,
    consistency_pairs,
    consistency_residual,
    equilibrium_feedback,
    equilibrium_feedforward,
    random_init,
    run_feedback,
    run_feedforward,
    run_stages,
    write_readout_csv,
)

STEADY = SimConfig(warmup=20.0)


def _instance(seed, M=8, N=4):
    rng = np.random.default_rng(seed)
    D = rng.uniform(size=(M, N)) ** 4
    D /= np.linalg.norm(D, axis=0)
    x = D @ rng.uniform(0.5, 1.5, N)
    return D, x / np.linalg.norm(x)


def test_identity_dictionary():
    p = configure_from_dictionary(np.eye(2), 0.0)
    for m in (p.F, p.B, p.H):
        np.testing.assert_array_equal(m, np.eye(2))
    np.testing.assert_array_equal(p.L, [-1.0, -1.0])


def test_configured_net_is_consistent():
    rng = np.random.default_rng(0)
    D = rng.uniform(size=(6, 9))
    p = configure_from_dictionary(D, 0.1)
    np.testing.assert_array_equal(p.F @ p.B - p.H, np.zeros((9, 9)))
    assert consistency_residual(p) == 0.0
    Du = D / np.linalg.norm(D, axis=0)
    np.testing.assert_allclose(configure_from_dictionary(Du).thresholds, 1.0)
    with pytest.raises(ValueError):
        configure_from_dictionary(np.zeros((3, 2)))


def test_random_init():
    p = random_init(16, 24, seed=1)
    assert p.violations() == []
    np.testing.assert_array_equal(p.thresholds, 1.0)
    np.testing.assert_array_equal(p.L, -1.0)
    assert np.all(p.F <= 0.25) and np.all(p.B <= 0.25)
    assert not np.allclose(p.F, p.B.T)
    assert not np.array_equal(p.F, random_init(16, 24, seed=2).F)
    assert consistency_residual(p) > 0.1


def test_params_validation():
    p = random_init(3, 2, seed=0)
    with pytest.raises(ValueError):
        NetworkParams(p.F, p.B.T, p.H, p.L)
    with pytest.raises(ValueError):
        NetworkParams(p.F, p.B, p.H, p.L, gamma=1.0)
    bad = p.with_weights(F=-p.F)
    assert "F >= 0" in bad.violations()


def test_network_layout():
    p = random_init(3, 2, seed=0, gamma=0.25)
    x = np.array([0.1, 0.2, 0.3])
    W, pop = build_network(p, x, p.gamma)
    np.testing.assert_array_equal(W[3:5, :3], p.F)
    np.testing.assert_array_equal(W[:3, 3:5], 0.25 * p.B)
    np.testing.assert_array_equal(W[3:5, 5], p.L)
    assert W[3, 3] == 0 and W[3, 4] == -p.H[0, 1]
    np.testing.assert_allclose(pop.drive, [0.075, 0.15, 0.225, 0, 0, 0.075])
    np.testing.assert_array_equal(pop.thresholds, [1, 1, 1, 1, 1, 1])


def test_zero_input():
    p = configure_from_dictionary(_instance(0)[0], 0.1)
    ro = run_feedforward(p, np.zeros(8))
    assert np.all(ro.y == 0) and np.all(ro.z == 0)


def test_input_rates_track_drive():
    D, x = _instance(1)
    ro = run_feedforward(configure_from_dictionary(D, 0.1), x)
    assert np.max(np.abs(ro.y - x)) <= ro.quantum


@pytest.mark.parametrize("seed", range(6))
def test_feedforward_matches_oracle(seed):
    D, x = _instance(seed)
    ro = run_feedforward(configure_from_dictionary(D, 0.1), x, STEADY)
    a = oracle.solve(D, x, 0.1).a
    assert np.max(np.abs(ro.z - a)) <= 2 * ro.quantum


def test_balance_residual_of_code_layer():
    D, x = _instance(2)
    p = configure_from_dictionary(D, 0.1)
    ro = run_feedforward(p, x, STEADY)
    u = p.F @ x + p.lam * p.L - p.H @ ro.z
    viol = np.where(ro.z > 0, np.abs(u), np.maximum(u, 0))
    assert viol.max() <= 3 * ro.quantum


def test_large_lambda_silences_codes():
    D, x = _instance(3)
    lam = float(np.max(D.T @ x)) + 0.05
    assert np.all(oracle.solve(D, x, lam).a == 0)
    ro = run_feedforward(configure_from_dictionary(D, lam), x)
    assert np.all(ro.z == 0)


@pytest.mark.parametrize("seed", range(4))
def test_feedback_invariance(seed):
    D, x = _instance(seed)
    p = configure_from_dictionary(D, 0.1, gamma=0.5)
    ff, fb = run_stages(p, x, STEADY)
    q = ff.quantum
    assert np.max(np.abs(fb.z - ff.z)) <= 2 * q
    assert np.max(np.abs((fb.y - ff.y) - 0.5 * (p.B @ ff.z - x))) <= 2 * q
    e2 = 0.5 * (p.F @ x + p.lam * p.L - p.H @ fb.z)
    assert np.max(np.abs(fb.e - e2)) <= 3 * q


def test_gamma_zero_feedback_is_plain_window():
    D, x = _instance(4)
    p = configure_from_dictionary(D, 0.1, gamma=0.0)
    ff, fb = run_stages(p, x)
    ref = run_feedforward(p, x, STEADY)
    assert np.max(np.abs(fb.z - ref.z)) <= 2 * ff.quantum
    assert np.max(np.abs(fb.y - x)) <= ff.quantum


def test_stage_identity_any_params():
    rng = np.random.default_rng(7)
    p = random_init(16, 24, seed=3)
    for _ in range(3):
        x = rng.uniform(size=16)
        x /= np.linalg.norm(x)
        ff, fb = run_stages(p, x)
        g = p.gamma
        lhs = g * (p.H - p.F @ p.B) @ fb.z
        rhs = -fb.e + (1 - g) * ff.e - (1 - g) * p.H @ (fb.z - ff.z)
        assert np.max(np.abs(lhs - rhs)) <= 2 * ff.quantum


def test_feedback_continues_clock():
    D, x = _instance(5)
    p = configure_from_dictionary(D, 0.1)
    ff = run_feedforward(p, x)
    assert ff.state.t == pytest.approx(20.0)
    fb = run_feedback(p, x, ff.state)
    assert fb.state.t == pytest.approx(40.0)


def test_equilibrium_matches_oracle():
    for seed in range(5):
        D, x = _instance(seed, M=10, N=6)
        p = configure_from_dictionary(D, 0.1)
        ff = equilibrium_feedforward(p, x)
        np.testing.assert_allclose(ff.z, oracle.solve(D, x, 0.1, tol=1e-12).a, atol=1e-9)
        fb = equilibrium_feedback(p, x)
        np.testing.assert_allclose(fb.z, ff.z, atol=1e-9)
        np.testing.assert_allclose(fb.y - x, 0.5 * (p.B @ ff.z - x), atol=1e-9)


def test_consistency_helpers(tmp_path):
    p = random_init(4, 3, seed=0)
    h, fb = consistency_pairs(p)
    assert h.shape == fb.shape == (9,)
    zero = p.with_weights(F=np.zeros_like(p.F))
    res, rel = consistency_residual(zero, return_flag=True)
    assert not rel and res == pytest.approx(np.linalg.norm(p.H))
    D, x = _instance(0)
    ff, fb_ro = run_stages(configure_from_dictionary(D, 0.1), x)
    path = tmp_path / "ro.csv"
    write_readout_csv(path, [ff, fb_ro])
    lines = path.read_text().splitlines()
    assert lines[0] == "stage,layer,neuron_id,rate,imbalance"
    assert len(lines) == 1 + 2 * (8 + 4)


def test_negative_input_rejected():
    p = random_init(3, 2, seed=0)
    with pytest.raises(ValueError):
        run_feedforward(p, np.array([0.1, -0.1, 0.2]))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.0, 0.9))
def test_stage_rates_nonnegative_and_quantized(seed, gamma):
    rng = np.random.default_rng(seed)
    p = random_init(6, 5, seed=seed, gamma=gamma)
    ff, fb = run_stages(p, rng.uniform(size=6))
    for r in (ff.y, ff.z, fb.y, fb.z):
        assert np.all(r >= 0)
        np.testing.assert_allclose(r * 20, np.round(r * 20), atol=1e-9)
