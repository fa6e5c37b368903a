"""Brute-force reference computations used to check the unraveling.

Nothing here calls the trajectory engine or the sampler: the master
equation, its steady state, the exhaustive record sums and the two-time
correlations are all integrated directly.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractViolation, NumericalFailure, ValidationFailure
from .grid import FrequencyGrid, sinc_window
from .model import ModelSpec, build_effective_hamiltonian
from .numerics import adjoint, rk4_step, sample_steps, step_count


@dataclass
class DensitySeries:
    times: np.ndarray
    rhos: np.ndarray  # (T, d, d)

    def at(self, t: float, tol: float = 1e-9) -> np.ndarray:
        i = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[i] - t) > tol * max(1.0, abs(t)):
            raise ContractViolation(f"t={t} is not a sample time")
        return self.rhos[i]

    def expectation(self, O) -> np.ndarray:
        return np.einsum("ij,tji->t", np.asarray(O), self.rhos).real


def _check_density(rho, tol: float = 1e-8) -> np.ndarray:
    rho = np.asarray(rho, dtype=complex)
    if rho.ndim != 2 or rho.shape[0] != rho.shape[1]:
        raise ContractViolation(f"density matrix must be square, got {rho.shape}")
    if not np.allclose(rho, adjoint(rho), atol=1e-10, rtol=0):
        raise ContractViolation("density matrix is not Hermitian")
    if abs(np.trace(rho).real - 1.0) > tol:
        raise ContractViolation(f"density matrix trace {np.trace(rho).real} != 1")
    if np.linalg.eigvalsh(rho).min() < -tol:
        raise ContractViolation("density matrix has a negative eigenvalue")
    return rho


def lindblad_rhs(model: ModelSpec):
    """Right-hand side of the Lindblad equation; accepts a matrix or a stack of matrices."""
    H = model.h_sys
    ops = [c.operator for c in model.channels]
    ops_dag = [adjoint(a) for a in ops]
    decay = model.decay_operator()

    def f(t, rho):
        out = -1j * (H @ rho - rho @ H) - 0.5 * (decay @ rho + rho @ decay)
        for a, ad in zip(ops, ops_dag):
            out = out + a @ rho @ ad
        return out

    return f


def lindblad_step(model: ModelSpec, rho, t: float, dt: float) -> np.ndarray:
    return rk4_step(lindblad_rhs(model), np.asarray(rho, dtype=complex), t, dt)


def rk4_propagator(model: ModelSpec, h: float) -> np.ndarray:
    """One RK4 step of the master equation as a matrix on row-major vec(rho).

    For the linear autonomous Lindblad equation the four RK4 stages collapse
    to the degree-4 Taylor polynomial of h L.
    """
    hL = h * liouvillian(model)
    eye = np.eye(hL.shape[0])
    return eye + hL @ (eye + hL @ (eye + hL @ (eye + hL / 4.0) / 3.0) / 2.0)


def integrate_master(model: ModelSpec, rho0, tau: float, dt: float, n_samples: int = 400,
                     check: bool = True, times=()) -> DensitySeries:
    """RK4 integration of the master equation over [0, tau]."""
    rho = _check_density(rho0)
    d = model.dim
    n_steps, h = step_count(tau, dt)
    P = rk4_propagator(model, h)
    samples = sample_steps(n_steps, n_samples, times, h)
    out = np.empty((len(samples), d, d), dtype=complex)
    v = rho.reshape(-1).copy()
    out[0] = rho
    for j in range(1, len(samples)):
        for _ in range(samples[j] - samples[j - 1]):
            v = P @ v
        if not np.all(np.isfinite(v)):
            raise NumericalFailure(f"non-finite density matrix by t={samples[j] * h:.6g}",
                                   t=float(samples[j] * h))
        out[j] = v.reshape(d, d)
    series = DensitySeries(samples * h, out)
    if check:
        drift = invariant_drift(series)
        if max(drift.values()) > 1e-6:
            raise ValidationFailure(f"master-equation invariants drifted: {drift}")
    return series


def invariant_drift(series: DensitySeries) -> dict[str, float]:
    rhos = series.rhos
    trace = np.abs(np.einsum("tii->t", rhos) - 1.0).max()
    herm = np.abs(rhos - np.conj(np.swapaxes(rhos, 1, 2))).max()
    herm_rhos = 0.5 * (rhos + np.conj(np.swapaxes(rhos, 1, 2)))
    neg = max(0.0, -np.linalg.eigvalsh(herm_rhos).min())
    return {"trace": float(trace), "hermiticity": float(herm), "negativity": float(neg)}


def liouvillian(model: ModelSpec) -> np.ndarray:
    """Superoperator acting on row-major vec(rho): vec(A rho B) = (A kron B^T) vec(rho)."""
    d = model.dim
    I = np.eye(d)
    H = model.h_sys
    L = -1j * (np.kron(H, I) - np.kron(I, H.T))
    for c in model.channels:
        a = c.operator
        ada = adjoint(a) @ a
        L += np.kron(a, a.conj()) - 0.5 * np.kron(ada, I) - 0.5 * np.kron(I, ada.T)
    return L


def steady_state(model: ModelSpec, tol: float = 1e-9) -> np.ndarray:
    """Null vector of the Liouvillian, normalized to unit trace."""
    d = model.dim
    L = liouvillian(model)
    _, s, vh = np.linalg.svd(L)
    scale = max(1.0, s[0])
    null_dim = int(np.sum(s < tol * scale))
    if null_dim != 1:
        raise ValidationFailure(
            f"Liouvillian null space has dimension {null_dim}; steady state is not unique"
        )
    rho = vh[-1].conj().reshape(d, d)
    rho = rho / np.trace(rho)
    rho = 0.5 * (rho + adjoint(rho))
    return rho


def liouvillian_residual(model: ModelSpec, rho) -> float:
    return float(np.linalg.norm(liouvillian(model) @ np.asarray(rho).reshape(-1)))


def _check_budget(count: int, budget: int):
    if count > budget:
        raise ConfigError(
            f"exhaustive record sum needs {count} terms, above the budget {budget}; "
            "use a smaller grid or n_max"
        )


def _ordered_tree(S: int, n_max: int, freq_of, chan_of):
    shift, src, ch, level = [0.0], [-1], [0], [0]
    parents = [0]
    offset = 1
    for n in range(1, n_max + 1):
        new = []
        for p in parents:
            for e in range(S):
                shift.append(shift[p] + freq_of[e])
                src.append(p)
                ch.append(chan_of[e])
                level.append(n)
                new.append(offset)
                offset += 1
        parents = new
    edges = [(i, src[i], ch[i], 1.0) for i in range(1, len(src))]
    return np.array(shift), edges, np.ones(len(shift)), np.array(level)


def _unordered_tree(S: int, n_max: int, freq_of, chan_of):
    index = {(): 0}
    shift, weight, level = [0.0], [1.0], [0]
    edges = []
    for n in range(1, n_max + 1):
        for ms in itertools.combinations_with_replacement(range(S), n):
            i = len(shift)
            index[ms] = i
            shift.append(float(sum(freq_of[e] for e in ms)))
            level.append(n)
            mult = {e: ms.count(e) for e in set(ms)}
            weight.append(1.0 / math.prod(math.factorial(m) for m in mult.values()))
            for e, m in mult.items():
                rest = list(ms)
                rest.remove(e)
                edges.append((i, index[tuple(rest)], chan_of[e], float(m)))
    return np.array(shift), edges, np.array(weight), np.array(level)


def reconstruct_density(model: ModelSpec, grid: FrequencyGrid, n_max: int, mode: str, psi0,
                        tau: float, dt: float, budget: int = 10**6, n_samples: int = 400,
                        per_level: bool = False, times=()):
    """Exhaustive sum over every record with up to ``n_max`` decays.

    ``mode`` is ``"ordered"`` (weight 1 per record) or ``"unordered"`` (each
    distinct multiset weighted by 1 / prod(multiplicity!), i.e. n!/prod(m!)
    orderings each carrying 1/n!).
    """
    if mode not in ("ordered", "unordered"):
        raise ConfigError(f"mode must be ordered or unordered, got {mode!r}")
    S = len(model.channels) * len(grid)
    _check_budget(S**n_max, budget)
    psi0 = np.asarray(psi0, dtype=complex)
    if psi0.shape != (model.dim,):
        raise ContractViolation(f"psi0 has shape {psi0.shape}")
    freqs = grid.frequencies
    freq_of = np.tile(freqs, len(model.channels))
    chan_of = np.repeat(np.arange(len(model.channels)), len(grid))
    build = _ordered_tree if mode == "ordered" else _unordered_tree
    shift, edges, weight, level = build(S, n_max, freq_of, chan_of)

    H = build_effective_hamiltonian(model)
    A = model.jump_operators
    scale = 1.0 / np.sqrt(tau)
    dst = np.array([e[0] for e in edges], dtype=np.int64)
    src = np.array([e[1] for e in edges], dtype=np.int64)
    chn = np.array([e[2] for e in edges], dtype=np.int64)
    fac = np.array([e[3] for e in edges])

    def f(t, V):
        out = -1j * (V @ H.T + shift[:, None] * V)
        if dst.size:
            srcv = np.einsum("eij,ej->ei", A[chn], V[src]) * (scale * fac)[:, None]
            np.add.at(out, dst, srcv)
        return out

    V = np.zeros((len(shift), model.dim), dtype=complex)
    V[0] = psi0
    n_steps, h = step_count(tau, dt)
    samples = sample_steps(n_steps, n_samples, times, h)
    levels = n_max + 1 if per_level else 1
    rhos = np.empty((len(samples), levels, model.dim, model.dim), dtype=complex)

    def density(V):
        W = V * np.sqrt(weight)[:, None]
        if not per_level:
            return np.einsum("ni,nj->ij", W, W.conj())[None]
        return np.stack([np.einsum("ni,nj->ij", W[level == n], W[level == n].conj())
                         for n in range(n_max + 1)])

    rhos[0] = density(V)
    j = 1
    for k in range(n_steps):
        V = rk4_step(f, V, k * h, h)
        if j < len(samples) and k + 1 == samples[j]:
            rhos[j] = density(V)
            j += 1
    if per_level:
        return samples * h, rhos
    return DensitySeries(samples * h, rhos[:, 0])


@dataclass
class CorrelationGrid:
    times: np.ndarray  # (N,) uniform over [0, tau]
    values: np.ndarray  # (N, N): C[i, j] = <a^dag(s_i) a(s_j)>


def two_time_correlation(model: ModelSpec, rho_init, tau: float, dt: float, channel: int | None = None,
                         spacing_steps: int = 10) -> CorrelationGrid:
    """Quantum-regression two-time correlation on a uniform grid of spacing ``spacing_steps * dt``.

    For s_i >= s_j, C = Tr[a^dag Lambda_{s_i - s_j}(a rho(s_j))]; the upper
    triangle follows from Hermitian symmetry.
    """
    rho = _check_density(rho_init)
    channel = model.channels[0].id if channel is None else channel
    a = model.channels[model.channel_index(channel)].operator
    ad = adjoint(a)
    n_steps, _ = step_count(tau, dt)
    n_cells = int(np.ceil(n_steps / spacing_steps))
    h = tau / (n_cells * spacing_steps)
    N = n_cells + 1

    d = model.dim
    # spacing_steps RK4 steps at once, acting on row-major vec(rho) from the right
    Pt = np.linalg.matrix_power(rk4_propagator(model, h), spacing_steps).T
    rhos = np.empty((N, d * d), dtype=complex)
    rhos[0] = rho.reshape(-1)
    for i in range(1, N):
        rhos[i] = rhos[i - 1] @ Pt

    C = np.zeros((N, N), dtype=complex)
    B = (a @ rhos.reshape(N, d, d)).reshape(N, d * d)
    adT = ad.T.reshape(-1)  # Tr(ad X) = sum_ij ad_ji X_ij
    C[np.arange(N), np.arange(N)] = B @ adT
    for lag in range(1, N):
        live = N - lag
        B = B[:live] @ Pt
        vals = B @ adT
        j = np.arange(live)
        C[j + lag, j] = vals
        C[j, j + lag] = np.conj(vals)
    return CorrelationGrid(np.linspace(0.0, tau, N), C)


def spectrum_from_correlation(corr: CorrelationGrid, omegas) -> np.ndarray:
    """(1/tau) double integral of exp(-i w (s - s')) C(s, s') by 2-D trapezoid quadrature."""
    s = corr.times
    tau = s[-1] - s[0]
    w = np.full(len(s), s[1] - s[0])
    w[0] *= 0.5
    w[-1] *= 0.5
    omegas = np.atleast_1d(np.asarray(omegas, dtype=float))
    E = np.exp(-1j * np.outer(omegas, s)) * w[None, :]
    S = np.einsum("wi,ij,wj->w", E, corr.values, E.conj()).real / tau
    if S.min() < -1e-8:
        raise ValidationFailure(f"spectrum is negative ({S.min():.3g}) beyond quadrature tolerance")
    return np.maximum(S, 0.0)


def finite_tau_spectrum(model: ModelSpec, rho_init, tau: float, dt: float, channel: int | None = None,
                        omegas=None, spacing_steps: int = 10) -> np.ndarray:
    corr = two_time_correlation(model, rho_init, tau, dt, channel, spacing_steps)
    return spectrum_from_correlation(corr, omegas)


def emitted_photons(model: ModelSpec, rho_init, tau: float, dt: float, channel: int | None = None
                    ) -> tuple[float, float, float]:
    """(integral of Tr(a^dag a rho) over [0, tau], rate at 0, rate at tau) for one channel."""
    channel = model.channels[0].id if channel is None else channel
    a = model.channels[model.channel_index(channel)].operator
    series = integrate_master(model, rho_init, tau, dt, n_samples=10**9)
    rate = series.expectation(adjoint(a) @ a)
    return float(np.trapezoid(rate, series.times)), float(rate[0]), float(rate[-1])


def spectral_gap(model: ModelSpec) -> float:
    """Largest Bohr frequency of H_sys (spread of its eigenvalues)."""
    e = np.linalg.eigvalsh(model.h_sys)
    return float(e[-1] - e[0])


def spectrum_tail_bound(model: ModelSpec, grid: FrequencyGrid, rate0: float, rate_tau: float) -> float:
    """Estimate of sum over off-grid frequencies of the finite-window spectrum.

    Far from the Bohr frequencies the window transform is dominated by its
    end points, S(w) <~ 2 (n(0) + n(tau)) / (tau (|w| - gap)^2).
    """
    gap = spectral_gap(model)
    return 2.0 * (rate0 + rate_tau) / grid.tau * grid.tail_sum_inverse_square(gap)


def stationary_spectrum(model: ModelSpec, omegas, channel: int | None = None
                        ) -> tuple[float, np.ndarray]:
    """Long-time emission spectrum of the steady state.

    Returns ``(coherent, incoherent)``: the weight of the elastic delta at
    w = 0, |<a>|^2, and the smooth part 2 Re Tr[a^dag (i w - L)^-1 (a - <a>) rho_ss]
    at each ``omegas``, from the Liouvillian resolvent.
    """
    channel = model.channels[0].id if channel is None else channel
    a = model.channels[model.channel_index(channel)].operator
    d = model.dim
    rho = steady_state(model)
    mean_a = np.trace(a @ rho)
    src = (a @ rho - mean_a * rho).reshape(-1)
    L = liouvillian(model)
    omegas = np.atleast_1d(np.asarray(omegas, dtype=float))
    M = 1j * omegas[:, None, None] * np.eye(d * d)[None] - L[None]
    B = np.broadcast_to(src, (len(omegas), d * d))
    near = np.abs(omegas) < 1e-9
    X = np.empty((len(omegas), d * d), dtype=complex)
    X[~near] = np.linalg.solve(M[~near], B[~near][..., None])[..., 0]
    if near.any():
        # L is singular at w = 0; the source is traceless, so keep the traceless solution
        x0 = np.linalg.lstsq(-L, src, rcond=None)[0]
        x0 = x0 - np.trace(x0.reshape(d, d)) * rho.reshape(-1)
        X[near] = x0
    vals = np.einsum("ij,nji->n", adjoint(a), X.reshape(-1, d, d))
    return float(abs(mean_a) ** 2), 2.0 * vals.real


def windowed_stationary_spectrum(model: ModelSpec, tau: float, omegas, channel: int | None = None,
                                 reach: float = 1000.0, step: float = 0.01) -> np.ndarray:
    """Steady-state spectrum seen through a window of length ``tau``.

    The long-time spectrum convolved with ``sinc_window``; the smooth part is
    integrated on a uniform grid over [-reach, reach].  For a stationary
    start this must agree with ``finite_tau_spectrum`` up to the mass of the
    window beyond ``reach`` (about 2 / (pi tau reach) relative).
    """
    omegas = np.atleast_1d(np.asarray(omegas, dtype=float))
    nu = np.arange(-reach, reach + 0.5 * step, step)
    coherent, smooth = stationary_spectrum(model, nu, channel)
    out = coherent * 2.0 * np.pi * sinc_window(omegas, tau)
    for i, w in enumerate(omegas):
        out[i] += np.trapezoid(smooth * sinc_window(w - nu, tau), nu)
    return out
