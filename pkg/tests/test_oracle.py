import numpy as np
import pytest

from freq_unravel.errors import ConfigError
from freq_unravel.grid import make_grid
from freq_unravel.model import initial_state, two_level_model
from freq_unravel.oracle import (
    emitted_photons,
    finite_tau_spectrum,
    integrate_master,
    invariant_drift,
    lindblad_rhs,
    liouvillian_residual,
    reconstruct_density,
    spectrum_tail_bound,
    stationary_spectrum,
    steady_state,
    two_time_correlation,
    windowed_stationary_spectrum,
)

from conftest import lorentz_candidate


def test_dark_state_constant(undriven):
    rho0 = initial_state(undriven, "ground")
    s = integrate_master(undriven, rho0, 2.0, 0.01)
    assert np.all(s.rhos == rho0)


def test_undriven_decay(undriven):
    s = integrate_master(undriven, initial_state(undriven, "excited"), 4.0, 1e-3)
    assert np.abs(s.rhos[:, 1, 1].real - np.exp(-s.times)).max() < 1e-8


def test_driven_approaches_steady_state(driven):
    s = integrate_master(driven, initial_state(driven, "ground"), 50.0, 0.005)
    assert abs(s.rhos[-1, 1, 1].real - 36 / 73) < 1e-6
    d = invariant_drift(s)
    assert d["trace"] < 1e-8 and d["hermiticity"] < 1e-8 and d["negativity"] < 1e-8


def test_steady_state(undriven, driven):
    assert np.allclose(steady_state(undriven), np.diag([1.0, 0.0]), atol=1e-12)
    rho = steady_state(driven)
    assert abs(rho[1, 1].real - 36 / 73) < 1e-10
    for m in (undriven, driven, two_level_model(0.3)):
        assert liouvillian_residual(m, steady_state(m)) < 1e-10


def test_reconstruct_trivial(undriven, ground):
    grid = make_grid(1.0, 8.0)
    s = reconstruct_density(undriven, grid, 0, "ordered", ground, 1.0, 0.01)
    assert np.all(s.rhos == np.diag([1.0, 0.0]))


def test_reconstruct_one_photon_trace(undriven, excited):
    grid = make_grid(1.0, 32.0)
    s = reconstruct_density(undriven, grid, 1, "ordered", excited, 1.0, 0.05 / 33)
    assert abs(np.trace(s.rhos[-1]).real - 1.0) < 1 / (np.pi * 32) + 1e-6


def test_reconstruct_budget_guard(driven, ground):
    with pytest.raises(ConfigError):
        reconstruct_density(driven, make_grid(4.0, 12.0), 8, "ordered", ground, 4.0, 0.003)


@pytest.fixture(scope="module")
def small_reconstruction():
    model = two_level_model(6.0)
    grid = make_grid(1.0, 32.0)
    dt = 0.05 / 39
    psi = np.array([1.0, 0.0], dtype=complex)
    out = {m: reconstruct_density(model, grid, 3, m, psi, 1.0, dt, times=(0.25, 0.5))
           for m in ("ordered", "unordered")}
    me = integrate_master(model, initial_state(model, "ground"), 1.0, dt, times=(0.25, 0.5))
    return model, out, me


def test_reconstruction_matches_master(small_reconstruction):
    _, out, me = small_reconstruction
    bound = 1 / (np.pi * 32)
    for s in out.values():
        assert np.allclose(s.times, me.times)
        assert np.abs(s.rhos - me.rhos).max() < bound


@pytest.mark.xfail(strict=True, reason="on a truncated grid the two record sums differ by ~5e-5; "
                                       "they agree only as omega_max grows")
def test_ordered_unordered_agree_to_1e6(small_reconstruction):
    _, out, _ = small_reconstruction
    assert np.abs(out["ordered"].rhos - out["unordered"].rhos).max() < 1e-6


def test_ordered_unordered_difference_shrinks_with_grid(driven, ground):
    diffs = []
    for om in (8.0, 16.0, 32.0):
        grid = make_grid(1.0, om)
        dt = 0.05 / (om + 7)
        o = reconstruct_density(driven, grid, 2, "ordered", ground, 1.0, dt, n_samples=10)
        u = reconstruct_density(driven, grid, 2, "unordered", ground, 1.0, dt, n_samples=10)
        diffs.append(np.abs(o.rhos - u.rhos).max())
    assert diffs[0] > diffs[1] > diffs[2]


def test_reconstruction_obeys_master_equation(small_reconstruction):
    model, out, _ = small_reconstruction
    s = out["ordered"]
    f = lindblad_rhs(model)
    for i in (len(s.times) // 4, len(s.times) // 2, 3 * len(s.times) // 4):
        h = s.times[i + 1] - s.times[i - 1]
        deriv = (s.rhos[i + 1] - s.rhos[i - 1]) / h
        assert np.abs(deriv - f(0.0, s.rhos[i])).max() < 2 * 6 / (np.pi * 32) + 10 * h**2


def test_correlation_examples(undriven, driven):
    c = two_time_correlation(undriven, initial_state(undriven, "excited"), 2.0, 0.002)
    s = c.times
    assert np.abs(c.values - np.exp(-(s[:, None] + s[None, :]) / 2)).max() < 1e-6
    c = two_time_correlation(driven, initial_state(driven, "ground"), 2.0, 0.002)
    me = integrate_master(driven, initial_state(driven, "ground"), 2.0, 0.002, n_samples=10**9)
    pe = np.interp(c.times, me.times, me.rhos[:, 1, 1].real)
    assert np.abs(np.diag(c.values).real - pe).max() < 1e-8
    assert np.abs(c.values - c.values.conj().T).max() < 1e-8


def test_spectrum_closed_form_and_symmetry(undriven):
    tau = 4.0
    w = make_grid(tau, 12.0).frequencies
    S = finite_tau_spectrum(undriven, initial_state(undriven, "excited"), tau, 0.001, omegas=w)
    assert np.abs(S - lorentz_candidate(w, tau)).max() < 1e-4
    assert np.all(S >= 0) and np.allclose(S, S[::-1], atol=1e-12)


@pytest.mark.parametrize("init", ["ground", "steady"])
def test_spectrum_sum_rule(driven, init):
    tau, dt = 4.0, 0.05 / 19
    grid = make_grid(tau, 12.0)
    rho0 = initial_state(driven, init)
    S = finite_tau_spectrum(driven, rho0, tau, dt, omegas=grid.frequencies)
    n_int, r0, rt = emitted_photons(driven, rho0, tau, dt)
    assert abs(S.sum() - n_int) <= spectrum_tail_bound(driven, grid, r0, rt) + 1e-4


def test_mollow_triplet_at_tau_4(driven):
    from freq_unravel.validation import local_maxima

    grid = make_grid(4.0, 12.0)
    S = finite_tau_spectrum(driven, steady_state(driven), 4.0, 0.05 / 19, omegas=grid.frequencies)
    peaks = grid.frequencies[local_maxima(S)]
    assert len(peaks) == 3
    assert abs(abs(peaks[0]) - 6) <= grid.spacing and abs(peaks[2] - 6) <= grid.spacing


def test_stationary_spectrum_total_weight(driven):
    nu = np.linspace(-200, 200, 400001)
    coherent, smooth = stationary_spectrum(driven, nu)
    assert abs(coherent + np.trapezoid(smooth, nu) / (2 * np.pi) - 36 / 73) < 1e-3


def test_window_convolution_matches_finite_window(driven):
    tau = 4.0
    w = make_grid(tau, 12.0).frequencies
    S = finite_tau_spectrum(driven, steady_state(driven), tau, 0.001, omegas=w)
    assert np.abs(windowed_stationary_spectrum(driven, tau, w) - S).max() < 1e-4
