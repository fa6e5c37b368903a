"""Acceptance suite: one test per criterion, each reporting PASS/FAIL with its numbers.

A summary line per criterion is printed at the end of the pytest run.  The
Monte Carlo runs take several minutes in total; deselect them with
``-m "not slow"``.
"""

import filecmp
import time

import numpy as np
import pytest

from freq_unravel import cli
from freq_unravel.engine import DecayRecord, sum_identity_residual
from freq_unravel.grid import make_grid
from freq_unravel.model import EXCITED, GROUND, initial_state, two_level_model
from freq_unravel.montecarlo import run_ensemble
from freq_unravel.oracle import (
    emitted_photons,
    finite_tau_spectrum,
    integrate_master,
    reconstruct_density,
    spectrum_tail_bound,
    steady_state,
)
from freq_unravel.validation import local_maxima

from conftest import record_criterion

OMEGA = 6.0
SE_FLOOR = 1e-9  # keeps z finite where the sampled spread is exactly zero (t = 0)


def default_dt(omega_max, omega=OMEGA):
    return 0.05 / (omega_max + omega + 1.0)


@pytest.fixture(scope="module")
def model():
    return two_level_model(OMEGA)


def _report(number, passed, detail):
    record_criterion(number, passed, detail)
    print(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
    assert passed, detail


def test_criterion_1_oracle_correctness():
    start = time.perf_counter()
    undriven = two_level_model(0.0)
    decay = integrate_master(undriven, initial_state(undriven, "excited"), 4.0, 1e-3)
    err_decay = np.abs(decay.rhos[:, 1, 1].real - np.exp(-decay.times)).max()
    driven = two_level_model(OMEGA)
    rho_ss = steady_state(driven)
    err_null = abs(rho_ss[1, 1].real - 36 / 73)
    long = integrate_master(driven, initial_state(driven, "ground"), 50.0, 0.005, n_samples=2)
    err_long = abs(long.rhos[-1, 1, 1].real - rho_ss[1, 1].real)
    elapsed = time.perf_counter() - start
    ok = err_decay < 1e-8 and err_null < 1e-10 and err_long < 1e-6 and elapsed < 1.0
    _report(1, ok, f"decay err {err_decay:.2e} (<1e-8), null-space err {err_null:.2e} (<1e-10), "
                   f"long-time err {err_long:.2e} (<1e-6), {elapsed:.2f} s (<1 s)")


@pytest.fixture(scope="module")
def reconstruction_sweep(model):
    """Exhaustive ordered and unordered sums at omega_max 8, 16, 32 (tau = 1, n_max = 3)."""
    start = time.perf_counter()
    out = {}
    times = (0.25, 0.5, 1.0)
    for om in (8.0, 16.0, 32.0):
        grid = make_grid(1.0, om)
        dt = default_dt(om)
        me = integrate_master(model, initial_state(model, "ground"), 1.0, dt, times=times)
        rows = [me.at(t) for t in times]
        for mode in ("ordered", "unordered"):
            rec = reconstruct_density(model, grid, 3, mode, GROUND, 1.0, dt, times=times)
            out[(om, mode)] = (np.array([rec.at(t) for t in times]), np.array(rows))
    return out, time.perf_counter() - start


def test_criterion_2_unraveling_equivalence(reconstruction_sweep):
    out, elapsed = reconstruction_sweep
    parts, ok = [], elapsed < 120
    for mode in ("ordered", "unordered"):
        errs = [np.abs(out[(om, mode)][0] - out[(om, mode)][1]).max() for om in (8.0, 16.0, 32.0)]
        monotone = errs[1] <= 1.05 * errs[0] and errs[2] <= 1.05 * errs[1]
        ok &= errs[2] < 0.05 and monotone
        parts.append(f"{mode} max err " + "/".join(f"{e:.4f}" for e in errs) + " at omega_max 8/16/32")
    _report(2, ok, "; ".join(parts) + f" (<0.05 at 32, monotone); {elapsed:.1f} s (<120 s)")


@pytest.fixture(scope="module")
def driven_ensemble(model):
    tau, om = 4.0, OMEGA + 6.0
    grid = make_grid(tau, om)
    dt = default_dt(om)
    rho0 = initial_state(model, "ground")
    start = time.perf_counter()
    est = run_ensemble(model, grid, rho0, 8, tau, dt, 2500, seed=1)
    elapsed = time.perf_counter() - start
    me = integrate_master(model, rho0, tau, dt)
    assert np.allclose(me.times, est.times)
    return est, me.rhos[:, 1, 1].real, elapsed


@pytest.mark.slow
def test_criterion_3_trace(reconstruction_sweep, driven_ensemble):
    out, _ = reconstruction_sweep
    det_dev = max(abs(np.trace(out[(32.0, m)][0], axis1=1, axis2=2).real - 1).max()
                  for m in ("ordered", "unordered"))
    est, _, _ = driven_ensemble
    dev = np.abs(est.trace_mean - 1.0)
    allowed = 3 * est.trace_stderr + est.trace_bias + SE_FLOOR
    frac = np.mean(dev <= allowed)
    worst = np.argmax(dev - allowed)
    ok = det_dev < 0.05 and frac == 1.0
    _report(3, ok, f"deterministic |trace-1| {det_dev:.4f} (<0.05); MC trace within 3 SE + bias at "
                   f"{100 * frac:.1f}% of times (need 100%); worst t={est.times[worst]:.3f}: "
                   f"|1-trace| {dev[worst]:.4f} vs 3 SE {3 * est.trace_stderr[worst]:.4f} + bias "
                   f"{est.trace_bias[worst]:.4f}")


@pytest.mark.slow
def test_criterion_4_driven_population_ensemble(driven_ensemble):
    est, pe, elapsed = driven_ensemble
    z = np.abs(est.mean - pe) / (est.stderr + SE_FLOOR)
    frac = np.mean(z <= 3.0)
    ok = frac >= 0.99 and elapsed < 600
    _report(4, ok, f"2500 trials: {100 * frac:.1f}% of {len(z)} sample times within 3 SE (need >= 99%); "
                   f"mean(sim - master) {np.mean(est.mean - pe):+.4f}; {elapsed:.0f} s (<600 s)")


def _spectrum_run(model, tau, om, n_trials=2500, seed=1):
    grid = make_grid(tau, om)
    dt = default_dt(om)
    rho0 = steady_state(model)
    est = run_ensemble(model, grid, rho0, 8, tau, dt, n_trials, seed=seed, spectrum_channel=0)
    ref = finite_tau_spectrum(model, rho0, tau, dt, omegas=grid.frequencies)
    n_int, r0, rt = emitted_photons(model, rho0, tau, dt)
    return grid, est, ref, n_int, spectrum_tail_bound(model, grid, r0, rt)


@pytest.fixture(scope="module")
def mollow_spectrum(model):
    return _spectrum_run(model, 4.0, OMEGA + 6.0)


@pytest.fixture(scope="module")
def short_window_spectrum(model):
    return _spectrum_run(model, 1.0, 32.0)


@pytest.mark.slow
def test_criterion_5_mollow_spectrum(mollow_spectrum, short_window_spectrum):
    grid, est, ref, _, _ = mollow_spectrum
    w = grid.frequencies
    z = np.abs(est.spectrum_mean - ref) / (est.spectrum_stderr + SE_FLOOR)
    frac = np.mean(z <= 3.0)
    peaks = w[local_maxima(est.spectrum_mean)]
    resolved = w[local_maxima(est.spectrum_mean, est.spectrum_stderr)]
    triplet = (len(peaks) == 3 and abs(peaks[0] + OMEGA) <= grid.spacing
               and abs(peaks[2] - OMEGA) <= grid.spacing)
    g1, est1, _, _, _ = short_window_spectrum
    peaks1 = g1.frequencies[local_maxima(est1.spectrum_mean)]
    ok = frac >= 0.95 and triplet and len(peaks1) != 3
    _report(5, ok, f"tau=4: {100 * frac:.0f}% of grid within 3 SE (need >= 95%), maxima at "
                   f"{np.round(peaks, 3).tolist()} (2-SE resolved: {np.round(resolved, 3).tolist()}); "
                   f"tau=1: maxima at {np.round(peaks1, 3).tolist()} (must not be three)")


def test_criterion_6_summation_identity():
    undriven = two_level_model(0.0)
    sweep = (8.0, 16.0, 32.0, 64.0)
    res = np.array([sum_identity_residual(undriven, make_grid(1.0, om), DecayRecord(()), EXCITED, 1.0,
                                          default_dt(om, 0.0)) for om in sweep])
    slope = np.polyfit(np.log(sweep), np.log(res), 1)[0]
    edge = sum_identity_residual(undriven, make_grid(1.0, 32.0), DecayRecord(()), EXCITED, 1.0,
                                 default_dt(32.0, 0.0), include_initial_edge=True)
    ok = res[2] < 0.05 and slope <= -0.8
    _report(6, ok, f"residual at omega_max 8/16/32/64 = " + "/".join(f"{r:.4f}" for r in res)
                   + f" (need <0.05 at 32), log-log slope {slope:.2f} (need about -1); "
                     f"with the t=0 endpoint term subtracted: {edge:.4f}")


@pytest.mark.slow
def test_criterion_7_unbiased_closed_instance(model):
    tau, om, n_max = 0.5, 26.0, 2
    grid = make_grid(tau, om)
    assert grid.p_max == 2
    dt = default_dt(om)
    ref = reconstruct_density(model, grid, n_max, "ordered", GROUND, tau, dt)
    ref_pe = ref.rhos[:, 1, 1].real
    ref_tr = np.trace(ref.rhos, axis1=1, axis2=2).real
    rho0 = initial_state(model, "ground")
    est = run_ensemble(model, grid, rho0, n_max, tau, dt, 100_000, seed=7)
    z_pe = np.abs(est.mean - ref_pe) / (est.stderr + SE_FLOOR)
    z_tr = np.abs(est.trace_mean - ref_tr) / (est.trace_stderr + SE_FLOOR)
    scaled = []
    for n in (625, 2500, 10_000):
        e = run_ensemble(model, grid, rho0, n_max, tau, dt, n, seed=11)
        scaled.append(np.mean(e.stderr[1:]) * np.sqrt(n))
    spread = max(scaled) / min(scaled)
    ok = z_pe.max() <= 4 and z_tr.max() <= 4 and spread <= 1.2
    _report(7, ok, f"1e5 trials: max |z| excited {z_pe.max():.2f}, trace {z_tr.max():.2f} (<=4); "
                   f"SE*sqrt(N) at N=625/2500/1e4: " + "/".join(f"{s:.4f}" for s in scaled)
                   + f", max/min {spread:.3f} (<=1.2)")


@pytest.mark.slow
def test_criterion_8_spectrum_sum_rule(mollow_spectrum, short_window_spectrum):
    parts, ok = [], True
    for label, (grid, est, ref, n_int, bound) in (("tau=4", mollow_spectrum), ("tau=1", short_window_spectrum)):
        d_sim = abs(est.spectrum_total_mean - n_int)
        d_ref = abs(ref.sum() - n_int)
        ok &= d_sim <= bound + 3 * est.spectrum_total_stderr and d_ref <= bound
        parts.append(f"{label}: emitted {n_int:.4f}, sampled sum {est.spectrum_total_mean:.4f} "
                     f"+- {est.spectrum_total_stderr:.4f}, correlation sum {ref.sum():.4f}, "
                     f"tail bound {bound:.4f}")
    _report(8, ok, "; ".join(parts))


DETERMINISM_CONFIGS = {
    "trajectory": "model = two_level\ntau = 62.83185307179586\nomega_max = 4\nrecord = 3.0, 0.5, -0.3\n",
    "ensemble": "model = two_level\ntau = 4\nn_trials = 300\nn_max = 5\nseed = 3\n",
    "spectrum": "model = two_level\ntau = 1\nomega_max = 32\nn_trials = 200\nn_max = 4\n"
                "initial_state = steady\nseed = 3\n",
    "reconstruct": "model = two_level\ntau = 1\nomega_max = 16\nn_max = 3\n",
    "validate": "model = two_level\ntau = 4\n",
}


@pytest.mark.slow
def test_criterion_9_determinism(tmp_path):
    same = []
    for mode, text in DETERMINISM_CONFIGS.items():
        cfg = tmp_path / f"{mode}.ini"
        cfg.write_text(text)
        outs = []
        for run in ("a", "b"):
            out = tmp_path / f"{mode}_{run}.out"
            assert cli.main([mode, "--config", str(cfg), "--out", str(out)]) == 0
            outs.append(out)
        files = [(outs[0], outs[1])]
        if mode != "validate":
            files.append((tmp_path / f"{mode}_a.out.report.json", tmp_path / f"{mode}_b.out.report.json")
                         if mode != "trajectory" else (outs[0], outs[1]))
        same.append(all(filecmp.cmp(a, b, shallow=False) for a, b in files))
    ok = all(same)
    _report(9, ok, "byte-identical reruns: " + ", ".join(
        f"{m} {'yes' if s else 'no'}" for m, s in zip(DETERMINISM_CONFIGS, same)))
