"""Conditional wavefunction hierarchies for the frequency-domain unraveling.

One *pass* integrates, in lockstep over [0, tau], a family of coupled linear
ODEs attached to a fixed prefix of decay events (omega_1 .. omega_{n-1}):

* the ordered chain psi_0 .. psi_{n-1} (level 0 is the no-decay state),
* one candidate psi_{.., (gamma, omega)} per channel and grid frequency,
* optionally the partially ordered spectrum states for every grid omega,
* optionally the matrix X(t) = sum over the *infinite* grid of candidate
  outer products, used to measure what the truncated grid misses.

All states are unnormalized and start from the vacuum (zero) except level 0.
Each vector obeys

    d/dt v = -i (H_eff + shift_v) v + (1/sqrt(tau)) sum_sources a_{ch} v_src

so a pass is described by a small "graph" (shift, sources, channels).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.linalg import expm

from . import _kernel
from .errors import ConfigError, ContractViolation, NumericalFailure
from .grid import FrequencyGrid
from .model import ModelSpec, build_effective_hamiltonian
from .numerics import rk4_step, sample_steps, step_count

FLUX = "_flux"


@dataclass(frozen=True)
class DecayRecord:
    """Ordered (channel id, frequency) pairs conditioning a trajectory."""

    events: tuple[tuple[int, float], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "events", tuple((int(c), float(w)) for c, w in self.events))

    def __len__(self) -> int:
        return len(self.events)

    @classmethod
    def of(cls, frequencies: Sequence[float], channel: int = 0) -> "DecayRecord":
        return cls(tuple((channel, w) for w in frequencies))


class Support:
    """Enumerates every (channel, grid frequency) event; event e = channel_index * M + p_index."""

    def __init__(self, model: ModelSpec, grid: FrequencyGrid):
        self.model = model
        self.grid = grid
        self.n_channels = len(model.channels)
        self.M = len(grid)
        self.S = self.n_channels * self.M
        self.frequencies = grid.frequencies
        self.channel_of = np.repeat(np.arange(self.n_channels), self.M)
        self.freq_of = np.tile(self.frequencies, self.n_channels)

    def event_index(self, channel_id: int, omega: float) -> int:
        c = self.model.channel_index(channel_id)
        return c * self.M + self.grid.index_of(omega)

    def encode(self, record: DecayRecord) -> np.ndarray:
        return np.array([self.event_index(c, w) for c, w in record.events], dtype=np.int64)

    def event(self, e: int) -> tuple[int, float]:
        return self.model.channels[self.channel_of[e]].id, float(self.freq_of[e])

    @property
    def events(self) -> list[tuple[int, float]]:
        return [self.event(e) for e in range(self.S)]


def observable_stack(model: ModelSpec) -> tuple[list[str], np.ndarray]:
    """Named observables plus the total decay-rate operator (key ``_flux``)."""
    names = sorted(model.observables)
    mats = [model.observables[n] for n in names]
    names.append(FLUX)
    mats.append(model.decay_operator())
    return names, np.stack(mats).astype(complex)


def _expect(V: np.ndarray, O: np.ndarray) -> np.ndarray:
    """<v|O_k|v> for a stack of vectors (..., d) and operators (K, d, d) -> (..., K)."""
    OV = np.einsum("kij,...j->...ki", O, V)
    return np.einsum("...i,...ki->...k", V.conj(), OV).real


@dataclass
class _Graph:
    L: int
    part: slice
    cand: slice
    N: int
    shift: np.ndarray
    src1: np.ndarray
    ch1: np.ndarray
    src2: np.ndarray
    ch2: np.ndarray


def _build_graph(support: Support | None, prefixes: np.ndarray, spectrum_ci: int | None,
                 candidates: bool, M: int) -> _Graph:
    B, Lm1 = prefixes.shape
    L = Lm1 + 1
    n_part = L * M if spectrum_ci is not None else 0
    n_cand = support.S if candidates else 0
    N = L + n_part + n_cand
    shift = np.zeros((B, N))
    src1 = np.full(N, -1, dtype=np.int64)
    src2 = np.full(N, -1, dtype=np.int64)
    ch1 = np.zeros((B, N), dtype=np.int64)
    ch2 = np.zeros((B, N), dtype=np.int64)

    if Lm1:
        ev_freq = support.freq_of[prefixes]
        ev_ch = support.channel_of[prefixes]
    else:
        ev_freq = np.zeros((B, 0))
        ev_ch = np.zeros((B, 0), dtype=np.int64)
    cum = np.zeros((B, L))
    cum[:, 1:] = np.cumsum(ev_freq, axis=1)
    shift[:, :L] = cum
    src1[1:L] = np.arange(L - 1)
    ch1[:, 1:L] = ev_ch

    part = slice(L, L + n_part)
    if n_part:
        freqs = support.frequencies
        for m in range(L):
            sl = slice(L + m * M, L + (m + 1) * M)
            shift[:, sl] = cum[:, m : m + 1] + freqs[None, :]
            src1[sl] = m
            ch1[:, sl] = spectrum_ci
            if m >= 1:
                src2[sl] = np.arange(L + (m - 1) * M, L + m * M)
                ch2[:, sl] = ev_ch[:, m - 1 : m]
    cand = slice(L + n_part, N)
    if n_cand:
        shift[:, cand] = cum[:, L - 1 : L] + support.freq_of[None, :]
        src1[cand] = L - 1
        ch1[:, cand] = support.channel_of[None, :]
    return _Graph(L, part, cand, N, shift, src1, ch1, src2, ch2)


def _graph_rhs(V, X, g: _Graph, H, A, scale, use_x):
    B = V.shape[0]
    out = -1j * (V @ H.T + g.shift[..., None] * V)
    AV = np.einsum("cij,bnj->bnci", A, V)
    bidx = np.arange(B)[:, None]
    for src, ch in ((g.src1, g.ch1), (g.src2, g.ch2)):
        idx = np.flatnonzero(src >= 0)
        if idx.size:
            out[:, idx] += scale * AV[bidx, src[idx][None, :], ch[:, idx]]
    if not use_x:
        return out, X
    top = AV[:, g.L - 1]
    dX = -1j * (H @ X - X @ H.conj().T) + np.einsum("bci,bcj->bij", top, top.conj())
    return out, dX


@dataclass
class FamilyBatch:
    """Output of one pass over a batch of prefixes (all of equal length)."""

    times: np.ndarray
    obs_names: list[str]
    chain_obs: np.ndarray  # (B, T, L', K); L' = L if full else 1 (level 0 only)
    cand_obs: np.ndarray | None  # (B, T, K): sum over candidates
    cand_obs_each: np.ndarray | None  # (B, T, S, K) when per_candidate
    tail_obs: np.ndarray | None  # (B, T, K): tr(O X) - cand_obs
    cand_norm2_tau: np.ndarray | None  # (B, S)
    partial_norm2_tau: np.ndarray | None  # (B, L, M)
    final: np.ndarray  # (B, N, d)
    graph: _Graph = field(repr=False)

    def obs_index(self, name: str) -> int:
        return self.obs_names.index(name)


def evolve_families(model: ModelSpec, grid: FrequencyGrid | None, prefixes, psi0s, tau: float,
                    dt: float, *, spectrum_channel: int | None = None, candidates: bool = True,
                    tail: bool = False, full: bool = False, per_candidate: bool = False,
                    backend: str = "numpy", n_samples: int = 400) -> FamilyBatch:
    """Integrate one pass for a batch of equal-length prefixes (event indices).

    ``backend`` is ``"numpy"`` (generic RK4 via :func:`numerics.rk4_step`) or
    ``"numba"`` (fused kernel, same scheme).
    """
    prefixes = np.asarray(prefixes, dtype=np.int64)
    if prefixes.ndim != 2:
        raise ContractViolation("prefixes must be a 2-D array (batch, n_events)")
    psi0s = np.asarray(psi0s, dtype=complex)
    B, Lm1 = prefixes.shape
    d = model.dim
    if psi0s.shape != (B, d):
        raise ContractViolation(f"psi0s has shape {psi0s.shape}, expected {(B, d)}")
    if not tau > 0:
        raise ContractViolation(f"tau must be positive, got {tau}")
    needs_grid = candidates or spectrum_channel is not None or Lm1 > 0
    if needs_grid and grid is None:
        raise ContractViolation("a frequency grid is required for decay events")
    if grid is not None and abs(grid.tau - tau) > 1e-12 * tau:
        raise ContractViolation(f"grid was built for tau={grid.tau}, not {tau}")
    support = Support(model, grid) if grid is not None else None
    if support is not None and prefixes.size and (prefixes.min() < 0 or prefixes.max() >= support.S):
        raise ContractViolation("prefix event index outside the grid support")
    spectrum_ci = model.channel_index(spectrum_channel) if spectrum_channel is not None else None
    M = support.M if support is not None else 0
    g = _build_graph(support, prefixes, spectrum_ci, candidates, M)
    use_x = bool(tail and candidates)

    H = np.ascontiguousarray(build_effective_hamiltonian(model), dtype=complex)
    A = np.ascontiguousarray(model.jump_operators, dtype=complex)
    scale = 1.0 / np.sqrt(tau)
    names, O = observable_stack(model)

    n_steps, h = step_count(tau, dt)
    samples = sample_steps(n_steps, n_samples)
    T = len(samples)
    L = g.L
    S = support.S if (candidates and support is not None) else 0
    K = len(names)

    V = np.zeros((B, g.N, d), dtype=complex)
    V[:, 0] = psi0s
    X = np.zeros((B, d, d), dtype=complex)

    chain_obs = np.empty((B, T, L if full else 1, K))
    cand_obs = np.empty((B, T, K)) if S else None
    each = np.empty((B, T, S, K)) if (S and per_candidate) else None
    tail_obs = np.empty((B, T, K)) if use_x else None

    def record(i):
        chain_obs[:, i] = _expect(V[:, : (L if full else 1)], O)
        if S:
            e = _expect(V[:, g.cand], O)
            cand_obs[:, i] = e.sum(axis=1)
            if each is not None:
                each[:, i] = e
            if use_x:
                tail_obs[:, i] = np.einsum("kij,bji->bk", O, X).real - cand_obs[:, i]

    if backend == "numba" and not _kernel.HAVE_NUMBA:
        backend = "numpy"
    record(0)
    done = 0
    for i in range(1, T):
        todo = int(samples[i] - done)
        if backend == "numba":
            bad = _kernel.advance(V, X, H, A, np.ascontiguousarray(g.shift), g.src1,
                                  np.ascontiguousarray(g.ch1), g.src2, np.ascontiguousarray(g.ch2),
                                  scale, L - 1, use_x, h, todo)
            if bad >= 0:
                t_bad = (done + bad) * h
                raise NumericalFailure(f"non-finite state at t={t_bad:.6g}", t=t_bad)
        elif backend == "numpy":
            def f(t, y):
                return _graph_rhs(y[0], y[1], g, H, A, scale, use_x)

            y = (V, X)
            for k in range(todo):
                y = rk4_step(f, y, (done + k) * h, h)
            V, X = y
        else:
            raise ConfigError(f"unknown backend {backend!r}")
        done = int(samples[i])
        record(i)

    cand_norm2 = None
    if S:
        cand_norm2 = np.sum(np.abs(V[:, g.cand]) ** 2, axis=-1)
    partial_norm2 = None
    if spectrum_ci is not None:
        P = V[:, g.part].reshape(B, L, M, d)
        partial_norm2 = np.sum(np.abs(P) ** 2, axis=-1)
    return FamilyBatch(
        times=samples * h,
        obs_names=names,
        chain_obs=chain_obs,
        cand_obs=cand_obs,
        cand_obs_each=each,
        tail_obs=tail_obs,
        cand_norm2_tau=cand_norm2,
        partial_norm2_tau=partial_norm2,
        final=V,
        graph=g,
    )


@dataclass
class TrajectoryTimeSeries:
    times: np.ndarray
    level_norm2: np.ndarray  # (T, levels)
    level_observables: dict[str, np.ndarray]  # name -> (T, levels)
    candidate_events: list[tuple[int, float]] = field(default_factory=list)
    candidate_norm2: np.ndarray | None = None  # (T, S)
    candidate_observables: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def candidate_norm2_tau(self) -> dict[tuple[int, float], float]:
        if self.candidate_norm2 is None:
            return {}
        return {ev: float(v) for ev, v in zip(self.candidate_events, self.candidate_norm2[-1])}


@dataclass
class HierarchyState:
    chain: list[np.ndarray]
    candidates: dict[tuple[int, float], np.ndarray]
    partials: dict[float, list[np.ndarray]] = field(default_factory=dict)


def _series(batch: FamilyBatch, support: Support | None) -> TrajectoryTimeSeries:
    names = batch.obs_names
    ident = names.index("identity")
    obs = {n: batch.chain_obs[0, :, :, k] for k, n in enumerate(names) if n not in ("identity", FLUX)}
    ts = TrajectoryTimeSeries(batch.times, batch.chain_obs[0, :, :, ident], obs)
    if batch.cand_obs_each is not None:
        ts.candidate_events = support.events
        ts.candidate_norm2 = batch.cand_obs_each[0, :, :, ident]
        ts.candidate_observables = {
            n: batch.cand_obs_each[0, :, :, k] for k, n in enumerate(names) if n not in ("identity", FLUX)
        }
    return ts


def _check_psi0(psi0, d):
    psi0 = np.asarray(psi0, dtype=complex)
    if psi0.shape != (d,):
        raise ContractViolation(f"psi0 has shape {psi0.shape}, expected {(d,)}")
    if abs(np.vdot(psi0, psi0).real - 1.0) > 1e-9:
        raise ContractViolation("psi0 must be normalized")
    return psi0


def evolve_zero(model: ModelSpec, psi0, tau: float, dt: float) -> TrajectoryTimeSeries:
    """No-decay trajectory d psi/dt = -i H_eff psi."""
    psi0 = _check_psi0(psi0, model.dim)
    batch = evolve_families(model, None, np.zeros((1, 0), dtype=np.int64), psi0[None], tau, dt,
                            candidates=False, full=True)
    return _series(batch, None)


def evolve_record(model: ModelSpec, grid: FrequencyGrid, record: DecayRecord, psi0, tau: float,
                  dt: float) -> TrajectoryTimeSeries:
    """Chain levels 0..n for a complete ordered record (no candidates)."""
    psi0 = _check_psi0(psi0, model.dim)
    support = Support(model, grid)
    batch = evolve_families(model, grid, support.encode(record)[None], psi0[None], tau, dt,
                            candidates=False, full=True)
    return _series(batch, support)


def evolve_ordered_hierarchy(model: ModelSpec, grid: FrequencyGrid, record: DecayRecord, psi0,
                             tau: float, dt: float, spectrum_channel: int | None = None,
                             backend: str = "numpy"):
    """Chain for ``record`` (n-1 events) plus every level-n candidate over the grid.

    Returns ``(TrajectoryTimeSeries, HierarchyState at tau)``.
    """
    psi0 = _check_psi0(psi0, model.dim)
    support = Support(model, grid)
    batch = evolve_families(model, grid, support.encode(record)[None], psi0[None], tau, dt,
                            spectrum_channel=spectrum_channel, full=True, per_candidate=True,
                            backend=backend)
    g = batch.graph
    V = batch.final[0]
    state = HierarchyState(
        chain=[V[k].copy() for k in range(g.L)],
        candidates={ev: V[g.cand][s].copy() for s, ev in enumerate(support.events)},
    )
    if spectrum_channel is not None:
        P = V[g.part].reshape(g.L, support.M, model.dim)
        state.partials = {float(w): [P[m, j].copy() for m in range(g.L)]
                          for j, w in enumerate(support.frequencies)}
    return _series(batch, support), state


def evolve_unordered(model: ModelSpec, grid: FrequencyGrid, events: Sequence[tuple[int, float]],
                     psi0, tau: float, dt: float, cap: int = 3) -> dict[tuple[int, ...], np.ndarray]:
    """All 2^n subset states of the unordered hierarchy at tau.

    Keys are sorted tuples of positions into ``events``; ``()`` is the
    no-decay state and ``tuple(range(n))`` the full record.
    """
    n = len(events)
    if n > cap:
        raise ConfigError(f"unordered hierarchy with n={n} exceeds the cap {cap} (cost grows as 2^n)")
    psi0 = _check_psi0(psi0, model.dim)
    support = Support(model, grid)
    # integrate in a canonical event order so the result is exactly permutation symmetric
    ev_orig = [support.event_index(c, w) for c, w in events]
    order = sorted(range(n), key=lambda p: ev_orig[p])
    ev = [ev_orig[p] for p in order]
    chans = [support.channel_of[e] for e in ev]
    freqs = np.array([support.freq_of[e] for e in ev])
    H = build_effective_hamiltonian(model)
    A = model.jump_operators
    scale = 1.0 / np.sqrt(tau)
    masks = range(1 << n)
    shift = np.array([sum(freqs[p] for p in range(n) if m >> p & 1) for m in masks])
    sources = [[(m ^ (1 << p), chans[p]) for p in range(n) if m >> p & 1] for m in masks]

    def f(t, V):
        out = -1j * (V @ H.T + shift[:, None] * V)
        for m, srcs in enumerate(sources):
            for sm, c in srcs:
                out[m] += scale * (A[c] @ V[sm])
        return out

    V = np.zeros((1 << n, model.dim), dtype=complex)
    V[0] = psi0
    n_steps, h = step_count(tau, dt)
    for k in range(n_steps):
        V = rk4_step(f, V, k * h, h)
    return {tuple(sorted(order[p] for p in range(n) if m >> p & 1)): V[m] for m in masks}


def sum_identity_residual(model: ModelSpec, grid: FrequencyGrid, record: DecayRecord, psi0,
                          tau: float, dt: float, channel: int | None = None,
                          include_initial_edge: bool = False) -> float:
    """|| sum_{omega_n} psi_{.., omega_n}(tau) - (sqrt(tau)/2) a_gamma psi_{..}(tau) ||.

    With ``include_initial_edge`` the half-weight contribution of the lower
    integration limit, (sqrt(tau)/2) exp(-i (H_eff + sum omega) tau) a psi_{..}(0),
    is subtracted as well; it vanishes whenever the source state starts in
    the vacuum or is annihilated by a_gamma.
    """
    psi0 = _check_psi0(psi0, model.dim)
    channel = model.channels[0].id if channel is None else channel
    ci = model.channel_index(channel)
    _, state = evolve_ordered_hierarchy(model, grid, record, psi0, tau, dt)
    total = sum(v for (c, _), v in state.candidates.items() if c == channel)
    a = model.channels[ci].operator
    rhs = 0.5 * np.sqrt(tau) * (a @ state.chain[-1])
    if include_initial_edge and len(record) == 0:
        prefix_sum = sum(w for _, w in record.events)
        H = build_effective_hamiltonian(model)
        U = expm(-1j * (H + prefix_sum * np.eye(model.dim)) * tau)
        rhs = rhs + 0.5 * np.sqrt(tau) * (U @ (a @ psi0))
    return float(np.linalg.norm(total - rhs))
