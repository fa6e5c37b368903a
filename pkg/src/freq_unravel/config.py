"""Run configuration: a flat ``key = value`` document, optionally grouped in sections.

Example::

    # driven atom, 2500 trials
    [model]
    model = two_level
    omega_rabi = 6

    [simulation]
    tau = 4
    n_trials = 2500
    seed = 1

Section names are free-form and only group keys; every key may appear once.
Lines starting with ``#`` or ``;`` are comments.  ``record`` is a comma list of
frequencies, each optionally prefixed by a channel id (``0:3.0, 0:0.5``).
"""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, replace

from .engine import DecayRecord
from .errors import ConfigError

MODES = ("trajectory", "ensemble", "spectrum", "reconstruct", "validate")
INITIAL_STATES = ("ground", "excited", "steady")
KEYS = {
    "model", "omega_rabi", "tau", "omega_max", "dt", "n_max", "n_trials", "seed", "mode",
    "observable", "initial_state", "record", "output", "spectrum_channel",
    "reconstruct_mode",
}
REQUIRED = ("model", "tau")
MAX_STEPS = 10**8


@dataclass(frozen=True)
class RunConfig:
    model: str
    omega_rabi: float
    tau: float
    omega_max: float
    dt: float
    n_max: int
    n_trials: int
    seed: int
    mode: str | None
    observable: str
    initial_state: str
    record: DecayRecord | None
    output: str | None
    spectrum_channel: int
    reconstruct_mode: str

    @property
    def dt_bound(self) -> float:
        return 0.1 / (self.omega_max + self.omega_rabi + 1.0)

    def with_overrides(self, **kw) -> "RunConfig":
        kw = {k: v for k, v in kw.items() if v is not None}
        return validate(replace(self, **kw)) if kw else self


def _number(key: str, raw: str, kind=float):
    try:
        value = kind(raw)
    except ValueError:
        raise ConfigError(f"{key}: expected {kind.__name__}, got {raw!r}") from None
    if kind is float and not math.isfinite(value):
        raise ConfigError(f"{key}: must be finite, got {raw!r}")
    return value


def _record(raw: str) -> DecayRecord:
    events = []
    for item in raw.split(","):
        item = item.strip()
        if not item:
            continue
        if ":" in item:
            ch, w = item.split(":", 1)
            events.append((_number("record", ch, int), _number("record", w)))
        else:
            events.append((0, _number("record", item)))
    return DecayRecord(tuple(events))


def _read_pairs(text: str) -> dict[str, str]:
    parser = configparser.ConfigParser(strict=False, interpolation=None, delimiters=("=", ":"),
                                       comment_prefixes=("#", ";"), inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    body = text if text.lstrip().startswith("[") else "[run]\n" + text
    try:
        parser.read_string(body)
    except configparser.Error as exc:
        raise ConfigError(f"malformed configuration: {exc}") from None
    pairs: dict[str, str] = {}
    for section in parser.sections():
        for key, value in parser.items(section, raw=True):
            if key in pairs:
                raise ConfigError(f"{key}: given more than once")
            pairs[key] = value.strip()
    return pairs


def parse_config(text: str) -> RunConfig:
    """Parse and validate a configuration document, filling documented defaults."""
    pairs = _read_pairs(text)
    unknown = sorted(set(pairs) - KEYS)
    if unknown:
        raise ConfigError(f"unknown key(s) {unknown}; allowed: {sorted(KEYS)}")
    missing = [k for k in REQUIRED if k not in pairs]
    if missing:
        raise ConfigError(f"missing required key(s) {missing}")

    omega_rabi = _number("omega_rabi", pairs.get("omega_rabi", "6"))
    tau = _number("tau", pairs["tau"])
    omega_max = _number("omega_max", pairs["omega_max"]) if "omega_max" in pairs else omega_rabi + 6.0
    dt = (_number("dt", pairs["dt"]) if "dt" in pairs
          else 0.05 / (omega_max + omega_rabi + 1.0))
    cfg = RunConfig(
        model=pairs["model"],
        omega_rabi=omega_rabi,
        tau=tau,
        omega_max=omega_max,
        dt=dt,
        n_max=_number("n_max", pairs.get("n_max", "8"), int),
        n_trials=_number("n_trials", pairs.get("n_trials", "2500"), int),
        seed=_number("seed", pairs.get("seed", "0"), int),
        mode=pairs.get("mode"),
        observable=pairs.get("observable", "excited_population"),
        initial_state=pairs.get("initial_state", "ground"),
        record=_record(pairs["record"]) if "record" in pairs else None,
        output=pairs.get("output"),
        spectrum_channel=_number("spectrum_channel", pairs.get("spectrum_channel", "0"), int),
        reconstruct_mode=pairs.get("reconstruct_mode", "both"),
    )
    return validate(cfg)


def validate(cfg: RunConfig) -> RunConfig:
    if cfg.model != "two_level":
        raise ConfigError(f"model: unknown preset {cfg.model!r}; available: ['two_level']")
    if cfg.omega_rabi < 0:
        raise ConfigError(f"omega_rabi: must be >= 0, got {cfg.omega_rabi}")
    if not cfg.tau > 0:
        raise ConfigError(f"tau: must be > 0, got {cfg.tau}")
    if not cfg.omega_max > 0:
        raise ConfigError(f"omega_max: must be > 0, got {cfg.omega_max}")
    if math.floor(cfg.omega_max * cfg.tau / (2 * math.pi) + 1e-12) < 1:
        raise ConfigError(
            f"omega_max: omega_max * tau = {cfg.omega_max * cfg.tau:.4g} must be >= 2 pi "
            "so the grid has p_max >= 1"
        )
    if not cfg.dt > 0:
        raise ConfigError(f"dt: must be > 0, got {cfg.dt}")
    if cfg.dt > cfg.dt_bound * (1 + 1e-12):
        raise ConfigError(
            f"dt: {cfg.dt:.6g} exceeds the stability bound 0.1/(omega_max + omega_rabi + 1) "
            f"= {cfg.dt_bound:.6g}"
        )
    if cfg.tau / cfg.dt > MAX_STEPS:
        raise ConfigError(f"dt: tau / dt = {cfg.tau / cfg.dt:.3g} steps exceeds the limit {MAX_STEPS:.0e}")
    if cfg.n_max < 1:
        raise ConfigError(f"n_max: must be >= 1, got {cfg.n_max}")
    if cfg.mode is not None and cfg.mode not in MODES:
        raise ConfigError(f"mode: must be one of {MODES}, got {cfg.mode!r}")
    if cfg.mode in ("ensemble", "spectrum") and cfg.n_trials < 2:
        raise ConfigError(f"n_trials: must be >= 2 for {cfg.mode} mode, got {cfg.n_trials}")
    if not 0 <= cfg.seed < 2**64:
        raise ConfigError(f"seed: must be a 64-bit unsigned integer, got {cfg.seed}")
    if cfg.initial_state not in INITIAL_STATES:
        raise ConfigError(f"initial_state: must be one of {INITIAL_STATES}, got {cfg.initial_state!r}")
    if cfg.mode == "trajectory" and not cfg.record:
        raise ConfigError("record: trajectory mode needs a non-empty decay record")
    if cfg.reconstruct_mode not in ("ordered", "unordered", "both"):
        raise ConfigError(f"reconstruct_mode: must be ordered, unordered or both, got {cfg.reconstruct_mode!r}")
    return cfg
