"""Dense complex helpers and the classical fixed-step RK4 integrator.

States handed to :func:`rk4_step` may be a single ndarray or a tuple of
ndarrays (a "state collection"); the derivative must return the same
structure.  Everything is in units where hbar = Gamma = 1.
"""

from __future__ import annotations

from typing import Callable, Sequence, Union

import numpy as np

from .errors import ContractViolation, NumericalFailure

State = Union[np.ndarray, tuple]
Derivative = Callable[[float, State], State]


def _combine(y: State, k: State, h: float) -> State:
    if isinstance(y, tuple):
        return tuple(_combine(a, b, h) for a, b in zip(y, k))
    return y + h * k


def _all_finite(y: State) -> bool:
    if isinstance(y, tuple):
        return all(_all_finite(a) for a in y)
    return bool(np.all(np.isfinite(y)))


def rk4_step(derivative: Derivative, state: State, t: float, dt: float) -> State:
    """Advance ``state`` from ``t`` to ``t + dt`` with the classical RK4 scheme.

    Raises
    ------
    NumericalFailure
        If the updated state contains NaN or Inf.  The exception carries the
        time at which the step started.
    """
    if not dt > 0:
        raise ContractViolation(f"dt must be positive, got {dt}")
    half = 0.5 * dt
    k1 = derivative(t, state)
    k2 = derivative(t + half, _combine(state, k1, half))
    k3 = derivative(t + half, _combine(state, k2, half))
    k4 = derivative(t + dt, _combine(state, k3, dt))
    sixth = dt / 6.0
    if isinstance(state, tuple):
        out = tuple(
            y + sixth * (a + 2.0 * b + 2.0 * c + d)
            for y, a, b, c, d in zip(state, k1, k2, k3, k4)
        )
    else:
        out = state + sixth * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not _all_finite(out):
        raise NumericalFailure(f"non-finite state after RK4 step at t={t:.6g}", t=t)
    return out


def integrate(derivative: Derivative, state: State, t0: float, dt: float, n_steps: int):
    """Take ``n_steps`` RK4 steps; returns the final state."""
    t = t0
    for i in range(n_steps):
        state = rk4_step(derivative, state, t, dt)
        t = t0 + (i + 1) * dt
    return state


def step_count(tau: float, dt: float) -> tuple[int, float]:
    """Number of RK4 steps covering [0, tau] with a step no larger than ``dt``.

    The returned step divides ``tau`` exactly so the last sample lands on tau.
    """
    n = int(np.ceil(tau / dt - 1e-9))
    n = max(n, 1)
    return n, tau / n


def sample_stride(n_steps: int, target: int = 400) -> int:
    """Steps between stored samples: every ceil(n_steps / target) steps."""
    return max(1, int(np.ceil(n_steps / target)))


def sample_steps(n_steps: int, target: int = 400, extra=(), h: float | None = None) -> np.ndarray:
    """Step indices at which series are recorded; always includes 0 and n_steps.

    ``extra`` are additional sample times; each must fall on a step boundary of size ``h``.
    """
    stride = sample_stride(n_steps, target)
    steps = set(range(0, n_steps + 1, stride))
    steps.add(n_steps)
    for t in extra:
        k = t / h
        if abs(k - round(k)) > 1e-6 or not 0 <= round(k) <= n_steps:
            raise ContractViolation(f"sample time {t} is not a multiple of the step {h:.6g}")
        steps.add(int(round(k)))
    return np.asarray(sorted(steps), dtype=np.int64)


def _check_square(M: np.ndarray) -> None:
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ContractViolation(f"expected a square matrix, got shape {M.shape}")


def matvec(M: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Matrix-vector product with a dimension check."""
    M = np.asarray(M)
    v = np.asarray(v)
    _check_square(M)
    if v.shape != (M.shape[1],):
        raise ContractViolation(f"dimension mismatch: matrix {M.shape}, vector {v.shape}")
    return M @ v


def expectation(O: np.ndarray, v: np.ndarray) -> complex:
    """<v|O|v> on the unnormalized vector ``v``."""
    return complex(np.vdot(v, matvec(O, v)))


def adjoint(M: np.ndarray) -> np.ndarray:
    return np.conj(np.asarray(M)).T


def is_hermitian(M: np.ndarray, atol: float = 1e-12) -> bool:
    M = np.asarray(M)
    return M.ndim == 2 and M.shape[0] == M.shape[1] and np.allclose(M, adjoint(M), atol=atol, rtol=0)


class NeumaierSum:
    """Elementwise compensated (Kahan-Babuska-Neumaier) running sum of arrays."""

    def __init__(self, shape: Sequence[int] | int = ()):
        self.total = np.zeros(shape)
        self.comp = np.zeros(shape)

    def add(self, x) -> None:
        x = np.asarray(x, dtype=float)
        if self.total.shape != x.shape:
            self.total = np.broadcast_to(self.total, x.shape).copy()
            self.comp = np.broadcast_to(self.comp, x.shape).copy()
        t = self.total + x
        big = np.abs(self.total) >= np.abs(x)
        self.comp += np.where(big, (self.total - t) + x, (x - t) + self.total)
        self.total = t

    def merge(self, other: "NeumaierSum") -> None:
        self.add(other.total)
        self.add(other.comp)

    @property
    def value(self) -> np.ndarray:
        return self.total + self.comp
