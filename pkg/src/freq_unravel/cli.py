"""Command line entry point: ``freq-unravel <mode> --config <path>``.

Exit codes: 0 success, 1 configuration error, 2 numerical failure,
3 validation failure.  Tables are CSV with ``%.17g`` numbers; checks are JSON.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import MODES, RunConfig, parse_config
from .engine import evolve_record
from .errors import ConfigError, ContractViolation, NumericalFailure, ValidationFailure
from .grid import make_grid
from .model import initial_state, preset
from .montecarlo import InitialMixture, run_ensemble
from .oracle import (
    emitted_photons,
    finite_tau_spectrum,
    integrate_master,
    reconstruct_density,
    spectrum_tail_bound,
)
from .validation import local_maxima, report

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_VALIDATION = 0, 1, 2, 3
TIME = "t [1/Gamma]"


def _pure_state(model, cfg: RunConfig) -> np.ndarray:
    mix = InitialMixture(initial_state(model, cfg.initial_state))
    if len(mix.probabilities) != 1:
        raise ConfigError(f"initial_state {cfg.initial_state!r} is mixed; trajectory mode needs a pure state")
    return mix.states[0]


def _write_table(path: str | None, columns: list[str], data: np.ndarray) -> None:
    out = sys.stdout if path is None else open(path, "w", newline="")
    try:
        np.savetxt(out, np.asarray(data, dtype=float), fmt="%.17g", delimiter=",",
                   header=",".join(columns), comments="")
    finally:
        if path is not None:
            out.close()


def _write_report(path: str | None, payload: dict, sidecar: bool) -> None:
    text = json.dumps(payload, indent=2) + "\n"
    if path is None:
        (sys.stderr if sidecar else sys.stdout).write(text)
        return
    target = Path(str(path) + ".report.json") if sidecar else Path(path)
    target.write_text(text)


def _entry(name: str, residual: float, bound: float) -> dict:
    residual, bound = float(residual), float(bound)
    return {"name": name, "residual": residual, "bound": bound, "passed": bool(residual <= bound)}


def run_trajectory(cfg: RunConfig) -> None:
    model = preset(cfg.model, omega_rabi=cfg.omega_rabi)
    grid = make_grid(cfg.tau, cfg.omega_max)
    ts = evolve_record(model, grid, cfg.record, _pure_state(model, cfg), cfg.tau, cfg.dt)
    obs = ts.level_observables[cfg.observable] if cfg.observable != "identity" else ts.level_norm2
    cols, data = [TIME], [ts.times]
    for k in range(ts.level_norm2.shape[1]):
        cols += [f"norm2_level_{k} [1]", f"{cfg.observable}_level_{k} [unnormalized]"]
        data += [ts.level_norm2[:, k], obs[:, k]]
    _write_table(cfg.output, cols, np.column_stack(data))


def run_ensemble_mode(cfg: RunConfig) -> None:
    model = preset(cfg.model, omega_rabi=cfg.omega_rabi)
    grid = make_grid(cfg.tau, cfg.omega_max)
    rho0 = initial_state(model, cfg.initial_state)
    est = run_ensemble(model, grid, rho0, cfg.n_max, cfg.tau, cfg.dt, cfg.n_trials, cfg.seed,
                       observable=cfg.observable)
    me = integrate_master(model, rho0, cfg.tau, cfg.dt)
    ref = np.interp(est.times, me.times, me.expectation(model.observable(cfg.observable)))
    name = cfg.observable
    _write_table(cfg.output,
                 [TIME, f"{name}_mean [1]", f"{name}_stderr [1]", "trace_mean [1]", "trace_stderr [1]",
                  "trace_truncation_bias [1]", f"{name}_master_equation [1]"],
                 np.column_stack([est.times, est.mean, est.stderr, est.trace_mean, est.trace_stderr,
                                  est.trace_bias, ref]))
    z = np.abs(est.mean - ref) / (est.stderr + 1e-9)
    within = float(np.mean(z <= 3.0))
    _write_report(cfg.output, {
        "mode": "ensemble", "n_trials": est.count, "seed": cfg.seed,
        "checks": [
            _entry("fraction_outside_3_stderr", 1.0 - within, 0.01),
            _entry("trace_deviation_minus_bias",
                   np.max(np.abs(1.0 - est.trace_mean) - est.trace_bias - 3 * est.trace_stderr), 0.0),
        ],
    }, sidecar=True)


def run_spectrum(cfg: RunConfig) -> None:
    model = preset(cfg.model, omega_rabi=cfg.omega_rabi)
    grid = make_grid(cfg.tau, cfg.omega_max)
    rho0 = initial_state(model, cfg.initial_state)
    est = run_ensemble(model, grid, rho0, cfg.n_max, cfg.tau, cfg.dt, cfg.n_trials, cfg.seed,
                       observable=cfg.observable, spectrum_channel=cfg.spectrum_channel)
    w = grid.frequencies
    ref = finite_tau_spectrum(model, rho0, cfg.tau, cfg.dt, cfg.spectrum_channel, omegas=w)
    _write_table(cfg.output,
                 ["omega [Gamma]", "spectrum_mean [1]", "spectrum_stderr [1]", "spectrum_correlation [1]"],
                 np.column_stack([w, est.spectrum_mean, est.spectrum_stderr, ref]))
    n_int, r0, rt = emitted_photons(model, rho0, cfg.tau, cfg.dt, cfg.spectrum_channel)
    bound = spectrum_tail_bound(model, grid, r0, rt)
    z = np.abs(est.spectrum_mean - ref) / (est.spectrum_stderr + 1e-9)
    _write_report(cfg.output, {
        "mode": "spectrum", "n_trials": est.count, "seed": cfg.seed,
        "local_maxima_sampled": [float(w[i]) for i in local_maxima(est.spectrum_mean)],
        "local_maxima_sampled_2_stderr": [float(w[i]) for i in local_maxima(est.spectrum_mean,
                                                                             est.spectrum_stderr)],
        "local_maxima_correlation": [float(w[i]) for i in local_maxima(ref)],
        "checks": [
            _entry("max_abs_z_vs_correlation", z.max(), 3.0),
            _entry("sum_rule_correlation", abs(ref.sum() - n_int), bound),
            _entry("sum_rule_sampled",
                   max(0.0, abs(est.spectrum_total_mean - n_int) - 3 * est.spectrum_total_stderr), bound),
        ],
    }, sidecar=True)


def run_reconstruct(cfg: RunConfig) -> None:
    model = preset(cfg.model, omega_rabi=cfg.omega_rabi)
    grid = make_grid(cfg.tau, cfg.omega_max)
    rho0 = initial_state(model, cfg.initial_state)
    mix = InitialMixture(rho0)
    me = integrate_master(model, rho0, cfg.tau, cfg.dt)
    modes = ("ordered", "unordered") if cfg.reconstruct_mode == "both" else (cfg.reconstruct_mode,)
    cols, data = [TIME], [me.times]

    def columns(tag, rhos):
        cols.extend(f"{tag}_{c} [1]" for c in ("rho_gg", "rho_ee", "re_rho_eg", "im_rho_eg", "trace"))
        data.extend([rhos[:, 0, 0].real, rhos[:, 1, 1].real, rhos[:, 1, 0].real, rhos[:, 1, 0].imag,
                     np.trace(rhos, axis1=1, axis2=2).real])

    columns("master", me.rhos)
    checks = []
    for mode in modes:
        rhos = sum(p * reconstruct_density(model, grid, cfg.n_max, mode, psi, cfg.tau, cfg.dt).rhos
                   for p, psi in zip(mix.probabilities, mix.states))
        columns(mode, rhos)
        checks.append(_entry(f"{mode}_max_entry_error", np.abs(rhos - me.rhos).max(),
                             1.0 / (np.pi * cfg.omega_max)))
    _write_table(cfg.output, cols, np.column_stack(data))
    _write_report(cfg.output, {"mode": "reconstruct", "checks": checks}, sidecar=True)


def run_validate(cfg: RunConfig) -> int:
    result = report(cfg)
    _write_report(cfg.output, result, sidecar=False)
    return EXIT_OK if result["passed"] else EXIT_VALIDATION


RUNNERS = {
    "trajectory": run_trajectory,
    "ensemble": run_ensemble_mode,
    "spectrum": run_spectrum,
    "reconstruct": run_reconstruct,
    "validate": run_validate,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        # usage errors are configuration errors; argparse's default 2 means numerical failure here
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="freq-unravel",
                                description="Frequency-resolved unraveling of the Lindblad master equation.")
    p.add_argument("mode", choices=MODES)
    p.add_argument("--config", required=True, help="path to a key = value configuration file")
    p.add_argument("--seed", type=int, help="override the configured seed")
    p.add_argument("--trials", type=int, help="override the configured number of trials")
    p.add_argument("--out", help="output path (default: standard output)")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        try:
            text = Path(args.config).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {args.config!r}: {exc.strerror}") from None
        cfg = parse_config(text).with_overrides(mode=args.mode, seed=args.seed, n_trials=args.trials,
                                                output=args.out)
        code = RUNNERS[args.mode](cfg)
        return EXIT_OK if code is None else code
    except (ConfigError, ContractViolation) as exc:
        print(f"freq-unravel: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalFailure as exc:
        where = "" if exc.seed is None else f" (seed {exc.seed})"
        print(f"freq-unravel: numerical failure: {exc}{where}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValidationFailure as exc:
        print(f"freq-unravel: validation failure: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
