"""Self-checks run by ``freq-unravel validate``.

Each check compares a computed quantity with an independent reference and
reports ``{name, residual, bound, passed}``.  The suite is sized to finish in
well under a minute on one core for the default two-level configuration.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .config import RunConfig
from .engine import DecayRecord, evolve_ordered_hierarchy, sum_identity_residual
from .grid import make_grid
from .model import EXCITED, GROUND, initial_state, preset
from .montecarlo import InitialMixture, run_ensemble
from .numerics import rk4_step, step_count
from .oracle import (
    emitted_photons,
    finite_tau_spectrum,
    integrate_master,
    invariant_drift,
    liouvillian_residual,
    reconstruct_density,
    spectrum_tail_bound,
    steady_state,
    windowed_stationary_spectrum,
)

E = 1  # basis index of the excited level


@dataclass
class Check:
    name: str
    residual: float
    bound: float
    passed: bool
    detail: str = ""

    def as_dict(self) -> dict:
        return asdict(self)


def _check(name: str, residual: float, bound: float, detail: str = "") -> Check:
    residual = float(residual)
    return Check(name, residual, float(bound), bool(np.isfinite(residual) and residual <= bound), detail)


def rk4_order(dts=(0.02, 0.01, 0.005)) -> float:
    """Observed global order of rk4_step on y' = i y - y / 2 over [0, 1]."""
    errs = []
    for dt in dts:
        n, h = step_count(1.0, dt)
        y = np.array([1.0 + 0j])
        for k in range(n):
            y = rk4_step(lambda t, v: (1j - 0.5) * v, y, k * h, h)
        errs.append(abs(y[0] - np.exp(1j - 0.5)))
    return float(np.polyfit(np.log(dts), np.log(errs), 1)[0])


def pure_components(rho) -> list[tuple[float, np.ndarray]]:
    mix = InitialMixture(rho)
    return list(zip(mix.probabilities, mix.states))


def run_checks(cfg: RunConfig) -> list[Check]:
    model = preset(cfg.model, omega_rabi=cfg.omega_rabi)
    undriven = preset(cfg.model, omega_rabi=0.0)
    rho0 = initial_state(model, cfg.initial_state)
    tau, dt, om = cfg.tau, cfg.dt, cfg.omega_max
    grid = make_grid(tau, om)
    checks = []

    slope = rk4_order()
    checks.append(_check("rk4_global_order", abs(slope - 4.0), 0.8, f"slope {slope:.4f}"))

    series = integrate_master(model, rho0, tau, dt, check=False)
    drift = invariant_drift(series)
    checks.append(_check("master_trace_drift", drift["trace"], 1e-9))
    checks.append(_check("master_hermiticity", drift["hermiticity"], 1e-9))
    checks.append(_check("master_positivity", drift["negativity"], 1e-9))

    decay = integrate_master(undriven, initial_state(undriven, "excited"), tau, dt)
    pe = decay.rhos[:, E, E].real
    checks.append(_check("undriven_decay", np.abs(pe - np.exp(-decay.times)).max(), 1e-9))

    rho_ss = steady_state(model)
    checks.append(_check("steady_state_residual", liouvillian_residual(model, rho_ss), 1e-10))
    if cfg.model == "two_level":
        w2 = cfg.omega_rabi**2
        checks.append(_check("steady_state_closed_form",
                             abs(rho_ss[E, E].real - w2 / (1 + 2 * w2)), 1e-10))

    # one emission from the undriven excited state: level 0 plus all level-1 states
    psi_e = EXCITED.copy()
    ts, _ = evolve_ordered_hierarchy(undriven, grid, DecayRecord(()), psi_e, tau, dt)
    budget = ts.level_norm2[-1, 0] + ts.candidate_norm2[-1].sum()
    checks.append(_check("one_emission_norm_budget", abs(1.0 - budget), 1.0 / (math.pi * om),
                         "bound: mass of the emission line outside |w| <= omega_max"))

    # candidate sum identity: converges as the grid widens
    psi_g = GROUND.copy()
    r1 = sum_identity_residual(model, grid, DecayRecord(()), psi_g, tau, dt)
    r2 = sum_identity_residual(model, make_grid(tau, 2 * om), DecayRecord(()), psi_g, tau,
                               0.05 / (2 * om + cfg.omega_rabi + 1))
    checks.append(_check("candidate_sum_identity_convergence", r2, 0.75 * r1,
                         f"residual {r1:.4g} at omega_max, {r2:.4g} at 2 omega_max"))

    # exhaustive reconstruction on a small instance
    small_tau, small_om, small_n = 1.0, 32.0, 3
    small_grid = make_grid(small_tau, small_om)
    small_dt = 0.05 / (small_om + cfg.omega_rabi + 1)
    me = integrate_master(model, initial_state(model, "ground"), small_tau, small_dt, n_samples=20)
    rec = {m: reconstruct_density(model, small_grid, small_n, m, psi_g, small_tau, small_dt,
                                  n_samples=20) for m in ("ordered", "unordered")}
    err = np.abs(rec["ordered"].rhos - me.rhos).max()
    checks.append(_check("exhaustive_reconstruction", err, 1.0 / (math.pi * small_om),
                         f"tau={small_tau}, omega_max={small_om}, n_max={small_n}"))
    diff = np.abs(rec["ordered"].rhos - rec["unordered"].rhos).max()
    checks.append(_check("ordered_vs_unordered", diff, 1.0 / (math.pi * small_om) ** 2))

    # spectrum oracle against the closed form for undriven decay
    w = grid.frequencies
    S = finite_tau_spectrum(undriven, initial_state(undriven, "excited"), tau, dt, omegas=w)
    z = 0.5 + 1j * w
    exact = np.abs((1 - np.exp(-z * tau)) / z) ** 2 / tau
    checks.append(_check("spectrum_closed_form", np.abs(S - exact).max(), 1e-4))

    # steady-state spectrum: finite window vs window-convolved long-time spectrum
    reach = 1000.0
    S_ss = finite_tau_spectrum(model, rho_ss, tau, dt, omegas=w)
    S_win = windowed_stationary_spectrum(model, tau, w, reach=reach)
    checks.append(_check("spectrum_window_convolution", np.abs(S_ss - S_win).max(),
                         2.0 / (math.pi * tau * reach) * S_ss.max() + 1e-5))

    # spectrum sum rule over the grid
    S0 = finite_tau_spectrum(model, rho0, tau, dt, omegas=w)
    n_int, r0, rt = emitted_photons(model, rho0, tau, dt)
    checks.append(_check("spectrum_sum_rule", abs(S0.sum() - n_int),
                         spectrum_tail_bound(model, grid, r0, rt) + 1e-4,
                         f"grid sum {S0.sum():.6g}, emitted {n_int:.6g}"))

    # Monte Carlo vs exhaustive sum on a closed instance (grid |p| <= 2, n_max = 2)
    mc_tau, mc_om, mc_n, mc_trials = 0.5, 26.0, 2, 4000
    mc_grid = make_grid(mc_tau, mc_om)
    mc_dt = 0.05 / (mc_om + cfg.omega_rabi + 1)
    est = run_ensemble(model, mc_grid, initial_state(model, "ground"), mc_n, mc_tau, mc_dt,
                       mc_trials, cfg.seed, workers=1)
    ref = reconstruct_density(model, mc_grid, mc_n, "ordered", psi_g, mc_tau, mc_dt)
    ref_pe = ref.rhos[:, E, E].real
    ref_tr = np.trace(ref.rhos, axis1=1, axis2=2).real
    z_pe = np.abs(est.mean - ref_pe) / (est.stderr + 1e-9)
    z_tr = np.abs(est.trace_mean - ref_tr) / (est.trace_stderr + 1e-9)
    checks.append(_check("monte_carlo_vs_exhaustive", max(z_pe.max(), z_tr.max()), 5.0,
                         f"{mc_trials} trials; residual is the largest |z| over sample times"))
    return checks


def report(cfg: RunConfig) -> dict:
    checks = run_checks(cfg)
    return {
        "passed": all(c.passed for c in checks),
        "checks": [c.as_dict() for c in checks],
    }


def local_maxima(values, stderr=None, z: float = 2.0) -> list[int]:
    """Indices of interior local maxima that stand above both neighbours.

    With ``stderr`` a point only counts if it exceeds each neighbour by
    ``z`` combined standard errors, so sampling noise does not add peaks.
    """
    v = np.asarray(values, dtype=float)
    se = np.zeros_like(v) if stderr is None else np.asarray(stderr, dtype=float)
    out = []
    for i in range(1, len(v) - 1):
        left = v[i] - v[i - 1] > z * np.hypot(se[i], se[i - 1])
        right = v[i] - v[i + 1] > z * np.hypot(se[i], se[i + 1])
        if left and right:
            out.append(i)
    return out
