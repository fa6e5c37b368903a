"""Frequency-sampling Monte Carlo over ordered decay records.

A trial draws an initial pure state, integrates every level-1 candidate on
the grid, samples omega_1 in proportion to the candidate norms at tau, fixes
it, integrates the level-2 candidates, and so on up to ``n_max`` decays.
Each level enters the estimator with weight 1 / P_traj, the inverse of the
probability that its family was evaluated.

Trials sharing an initial state and a sampled prefix share the integration
of that family; the per-trial random streams are keyed by (seed, trial index)
so results do not depend on batching or on the number of workers.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .engine import FLUX, DecayRecord, Support, evolve_families
from .errors import ConfigError, ContractViolation, NumericalFailure, TrialTerminated
from .grid import FrequencyGrid
from .model import ModelSpec
from .numerics import NeumaierSum

TERMINATION_THRESHOLD = 1e-12
CHUNK_SIZE = 1024
WORKERS_ENV = "FREQ_UNRAVEL_WORKERS"


def trial_rng(seed: int, index: int) -> np.random.Generator:
    """Counter-based stream for one trial: Philox keyed by (seed, trial index)."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(index)])))


class InitialMixture:
    """Eigen-decomposition of rho0 used to draw initial pure states."""

    def __init__(self, rho0, tol: float = 1e-10):
        rho0 = np.asarray(rho0, dtype=complex)
        if rho0.ndim != 2 or rho0.shape[0] != rho0.shape[1]:
            raise ContractViolation(f"rho0 must be square, got shape {rho0.shape}")
        if not np.allclose(rho0, rho0.conj().T, atol=tol, rtol=0):
            raise ContractViolation("rho0 is not Hermitian")
        if abs(np.trace(rho0).real - 1.0) > tol:
            raise ContractViolation(f"rho0 has trace {np.trace(rho0).real}, expected 1")
        vals, vecs = np.linalg.eigh(rho0)
        if vals.min() < -tol:
            raise ContractViolation(f"rho0 has a negative eigenvalue {vals.min():.3g}")
        vals = np.clip(vals, 0.0, None)
        keep = vals > 0
        self.probabilities = vals[keep] / vals[keep].sum()
        self.states = vecs[:, keep].T.copy()
        self._cum = np.cumsum(self.probabilities)

    def pick(self, u) -> np.ndarray:
        """Index of the eigenvector selected by uniform(s) ``u`` in [0, 1)."""
        idx = np.searchsorted(self._cum, np.asarray(u) * self._cum[-1], side="right")
        return np.minimum(idx, len(self.probabilities) - 1)


def sample_initial_state(rho0, rng: np.random.Generator) -> np.ndarray:
    mix = InitialMixture(rho0)
    return mix.states[int(mix.pick(rng.random()))]


@dataclass(frozen=True)
class DecayDistribution:
    support: list
    probabilities: np.ndarray

    def sample(self, u: float) -> int:
        cum = np.cumsum(self.probabilities)
        return int(min(np.searchsorted(cum, u * cum[-1], side="right"), len(cum) - 1))


def decay_distribution(norms, support=None, threshold: float = TERMINATION_THRESHOLD) -> DecayDistribution:
    """Probabilities proportional to candidate squared norms at tau.

    ``norms`` is either a mapping (channel, frequency) -> squared norm or an
    array aligned with ``support``.  Raises :class:`TrialTerminated` when the
    total is below ``threshold``.
    """
    if isinstance(norms, Mapping):
        support = list(norms)
        values = np.array([norms[k] for k in support], dtype=float)
    else:
        values = np.asarray(norms, dtype=float)
        support = list(range(len(values))) if support is None else list(support)
    if not np.all(np.isfinite(values)) or np.any(values < 0):
        raise ContractViolation("candidate norms must be finite and non-negative")
    total = values.sum()
    if not total >= threshold:
        raise TrialTerminated(f"candidate norm sum {total:.3g} below {threshold:g}")
    return DecayDistribution(support, values / total)


@dataclass
class LevelData:
    weight: float
    observables: np.ndarray  # (T, K) summed over the level's candidates (level 0: its single state)
    norm2_tau: np.ndarray | None = None  # (S,) candidate squared norms at tau, levels >= 1
    tail: np.ndarray | None = None  # (T, K) infinite-grid remainder of the level
    partial_norm2_tau: np.ndarray | None = None  # (M,) spectrum partial states at tau


@dataclass
class TrialResult:
    index: int
    seed: int | None
    times: np.ndarray
    obs_names: list[str]
    initial_index: int
    record: DecayRecord
    probabilities: list[float]
    levels: list[LevelData]
    terminated_at: int | None = None

    def obs_index(self, name: str) -> int:
        try:
            return self.obs_names.index(name)
        except ValueError:
            raise ConfigError(f"unknown observable {name!r}") from None


def _run_batch(model: ModelSpec, grid: FrequencyGrid, rho0, n_max: int, tau: float, dt: float,
               uniforms: np.ndarray, indices, seed, spectrum_channel, backend) -> list[TrialResult]:
    if n_max < 1:
        raise ConfigError(f"n_max must be >= 1, got {n_max}")
    mix = InitialMixture(rho0)
    support = Support(model, grid)
    n_trials = len(uniforms)
    init = mix.pick(uniforms[:, 0])
    prefix: list[list[int]] = [[] for _ in range(n_trials)]
    weight = np.ones(n_trials)
    probs: list[list[float]] = [[] for _ in range(n_trials)]
    levels: list[list[LevelData]] = [[] for _ in range(n_trials)]
    terminated: list[int | None] = [None] * n_trials
    alive = list(range(n_trials))
    times = names = None

    for n in range(1, n_max + 1):
        if not alive:
            break
        keys = {}
        fam_of = []
        for i in alive:
            key = (int(init[i]), tuple(prefix[i]))
            fam_of.append(keys.setdefault(key, len(keys)))
        uniq = list(keys)
        prefixes = np.array([k[1] for k in uniq], dtype=np.int64).reshape(len(uniq), n - 1)
        psi0s = mix.states[[k[0] for k in uniq]]
        try:
            batch = evolve_families(model, grid, prefixes, psi0s, tau, dt,
                                    spectrum_channel=spectrum_channel, tail=True, backend=backend)
        except NumericalFailure as exc:
            exc.seed = seed
            raise
        times, names = batch.times, batch.obs_names
        still = []
        for i, u in zip(alive, fam_of):
            if n == 1:
                levels[i].append(LevelData(1.0, batch.chain_obs[u, :, 0]))
            part = batch.partial_norm2_tau[u, n - 1] if batch.partial_norm2_tau is not None else None
            norm2 = batch.cand_norm2_tau[u]
            levels[i].append(LevelData(float(weight[i]), batch.cand_obs[u], norm2,
                                       batch.tail_obs[u], part))
            if n == n_max:
                continue
            try:
                dist = decay_distribution(norm2)
            except TrialTerminated:
                terminated[i] = n
                continue
            e = dist.sample(uniforms[i, n])
            p = float(dist.probabilities[e])
            prefix[i].append(e)
            probs[i].append(p)
            weight[i] = weight[i] / p
            still.append(i)
        alive = still

    return [
        TrialResult(
            index=int(indices[i]),
            seed=seed,
            times=times,
            obs_names=names,
            initial_index=int(init[i]),
            record=DecayRecord(tuple(support.event(e) for e in prefix[i])),
            probabilities=probs[i],
            levels=levels[i],
            terminated_at=terminated[i],
        )
        for i in range(n_trials)
    ]


def run_trials(model, grid, rho0, n_max, tau, dt, seed: int, indices, spectrum_channel=None,
               backend: str = "numba") -> list[TrialResult]:
    """Trials for the given indices, each with its own (seed, index) stream."""
    indices = list(indices)
    uniforms = np.array([trial_rng(seed, i).random(n_max) for i in indices]).reshape(len(indices), n_max)
    return _run_batch(model, grid, rho0, n_max, tau, dt, uniforms, indices, seed,
                      spectrum_channel, backend)


def run_trial(model, grid, rho0, n_max, tau, dt, rng: np.random.Generator, spectrum_channel=None,
              backend: str = "numba") -> TrialResult:
    """One trial driven by ``rng`` (n_max uniforms: initial state, then omega_1 .. omega_{n_max-1})."""
    uniforms = rng.random(n_max)[None]
    return _run_batch(model, grid, rho0, n_max, tau, dt, uniforms, [0], None, spectrum_channel,
                      backend)[0]


class Moments:
    """Shifted, compensated first and second moments; mergeable."""

    def __init__(self, shape=()):
        self.count = 0
        self.shift = None
        self.s1 = NeumaierSum(shape)
        self.s2 = NeumaierSum(shape)

    def add(self, x) -> None:
        x = np.asarray(x, dtype=float)
        if self.shift is None:
            self.shift = x.copy()
        y = x - self.shift
        self.s1.add(y)
        self.s2.add(y * y)
        self.count += 1

    def merge(self, other: "Moments") -> None:
        if other.count == 0:
            return
        if self.count == 0:
            self.count, self.shift, self.s1, self.s2 = other.count, other.shift, other.s1, other.s2
            return
        delta = other.shift - self.shift
        o1 = other.s1.value
        self.s1.merge(other.s1)
        self.s1.add(other.count * delta)
        self.s2.merge(other.s2)
        self.s2.add(2.0 * delta * o1 + other.count * delta * delta)
        self.count += other.count

    def mean(self) -> np.ndarray:
        return self.shift + self.s1.value / self.count

    def stderr(self) -> np.ndarray:
        n = self.count
        m1 = self.s1.value / n
        var = (self.s2.value - n * m1 * m1) / (n - 1)
        return np.sqrt(np.maximum(var, 0.0) / n)


@dataclass
class EnsembleAccumulator:
    """Running sums of per-trial estimates for one observable (plus trace and spectrum)."""

    observable: str
    n_levels: int
    count: int = 0
    times: np.ndarray | None = None
    obs: Moments = field(default_factory=Moments)
    trace: Moments = field(default_factory=Moments)
    obs_tail: Moments = field(default_factory=Moments)
    trace_tail: Moments = field(default_factory=Moments)
    trace_deficit: Moments = field(default_factory=Moments)
    per_level: list = field(default_factory=list)
    spectrum: Moments | None = None
    spectrum_total: Moments | None = None

    def __post_init__(self):
        if not self.per_level:
            self.per_level = [Moments() for _ in range(self.n_levels + 1)]

    def merge(self, other: "EnsembleAccumulator") -> None:
        if other.count == 0:
            return
        if self.times is None:
            self.times = other.times
        self.count += other.count
        for name in ("obs", "trace", "obs_tail", "trace_tail", "trace_deficit"):
            getattr(self, name).merge(getattr(other, name))
        for a, b in zip(self.per_level, other.per_level):
            a.merge(b)
        if other.spectrum is not None:
            if self.spectrum is None:
                self.spectrum, self.spectrum_total = Moments(), Moments()
            self.spectrum.merge(other.spectrum)
            self.spectrum_total.merge(other.spectrum_total)


def _cumtrapz(y: np.ndarray, t: np.ndarray) -> np.ndarray:
    out = np.zeros_like(y)
    out[1:] = np.cumsum(0.5 * (y[1:] + y[:-1]) * np.diff(t))
    return out


def accumulate(acc: EnsembleAccumulator, trial: TrialResult, observable: str | None = None
               ) -> EnsembleAccumulator:
    """Add one trial's weighted estimate sum_levels (1/P_traj) sum_candidates <psi|O|psi>."""
    observable = acc.observable if observable is None else observable
    k = trial.obs_index(observable)
    ident = trial.obs_index("identity")
    flux = trial.obs_index(FLUX)
    if acc.times is None:
        acc.times = trial.times
    T = len(trial.times)
    est = np.zeros(T)
    tr = np.zeros(T)
    obs_tail = np.zeros(T)
    tr_tail = np.zeros(T)
    for n in range(acc.n_levels + 1):
        if n < len(trial.levels):
            lv = trial.levels[n]
            contrib = lv.weight * lv.observables[:, k]
            est += contrib
            tr += lv.weight * lv.observables[:, ident]
            if lv.tail is not None:
                obs_tail += lv.weight * lv.tail[:, k]
                tr_tail += lv.weight * lv.tail[:, ident]
        else:
            contrib = np.zeros(T)
        acc.per_level[n].add(contrib)
    last = trial.levels[-1]
    deficit = last.weight * _cumtrapz(last.observables[:, flux], trial.times)
    acc.obs.add(est)
    acc.trace.add(tr)
    acc.obs_tail.add(obs_tail)
    acc.trace_tail.add(tr_tail)
    acc.trace_deficit.add(deficit)
    if trial.levels[1:] and trial.levels[1].partial_norm2_tau is not None:
        spec = sum(lv.weight * lv.partial_norm2_tau for lv in trial.levels[1:])
        if acc.spectrum is None:
            acc.spectrum, acc.spectrum_total = Moments(), Moments()
        acc.spectrum.add(spec)
        acc.spectrum_total.add(spec.sum())
    acc.count += 1
    return acc


@dataclass
class Estimates:
    count: int
    times: np.ndarray
    mean: np.ndarray
    stderr: np.ndarray
    trace_mean: np.ndarray
    trace_stderr: np.ndarray
    trace_bias: np.ndarray  # estimated trace missing from grid truncation and n_max
    observable_tail: np.ndarray  # estimated observable missing from grid truncation
    level_mean: np.ndarray  # (n_levels + 1, T)
    level_stderr: np.ndarray
    spectrum_mean: np.ndarray | None = None
    spectrum_stderr: np.ndarray | None = None
    spectrum_total_mean: float | None = None
    spectrum_total_stderr: float | None = None


def finalize(acc: EnsembleAccumulator) -> Estimates:
    if acc.count < 2:
        raise ConfigError(f"need at least 2 trials to estimate errors, have {acc.count}")
    est = Estimates(
        count=acc.count,
        times=acc.times,
        mean=acc.obs.mean(),
        stderr=acc.obs.stderr(),
        trace_mean=acc.trace.mean(),
        trace_stderr=acc.trace.stderr(),
        trace_bias=acc.trace_tail.mean() + acc.trace_deficit.mean(),
        observable_tail=acc.obs_tail.mean(),
        level_mean=np.array([m.mean() for m in acc.per_level]),
        level_stderr=np.array([m.stderr() for m in acc.per_level]),
    )
    if acc.spectrum is not None:
        est.spectrum_mean = acc.spectrum.mean()
        est.spectrum_stderr = acc.spectrum.stderr()
        est.spectrum_total_mean = float(acc.spectrum_total.mean())
        est.spectrum_total_stderr = float(acc.spectrum_total.stderr())
    return est


def _chunk_accumulator(args) -> EnsembleAccumulator:
    (model, grid, rho0, n_max, tau, dt, seed, start, stop, spectrum_channel, observable, backend) = args
    acc = EnsembleAccumulator(observable, n_max)
    for trial in run_trials(model, grid, rho0, n_max, tau, dt, seed, range(start, stop),
                            spectrum_channel, backend):
        accumulate(acc, trial)
    return acc


def worker_count() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None
    return max(1, n)


def run_ensemble(model: ModelSpec, grid: FrequencyGrid, rho0, n_max: int, tau: float, dt: float,
                 n_trials: int, seed: int, observable: str = "excited_population",
                 spectrum_channel: int | None = None, backend: str = "numba",
                 workers: int | None = None, chunk_size: int = CHUNK_SIZE) -> Estimates:
    """Run ``n_trials`` trials in fixed-size chunks and merge them in chunk order."""
    model.observable(observable)
    if n_trials < 2:
        raise ConfigError(f"n_trials must be >= 2, got {n_trials}")
    bounds = [(s, min(s + chunk_size, n_trials)) for s in range(0, n_trials, chunk_size)]
    jobs = [(model, grid, rho0, n_max, tau, dt, seed, a, b, spectrum_channel, observable, backend)
            for a, b in bounds]
    workers = worker_count() if workers is None else workers
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_chunk_accumulator, jobs))
    else:
        parts = [_chunk_accumulator(job) for job in jobs]
    total = EnsembleAccumulator(observable, n_max)
    for part in parts:
        total.merge(part)
    return finalize(total)
