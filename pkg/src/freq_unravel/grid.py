"""Discrete measurement frequencies omega_p = 2 pi p / tau and the finite-window kernel."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import polygamma

from .errors import ConfigError, ContractViolation


@dataclass(frozen=True)
class FrequencyGrid:
    tau: float
    p_max: int

    @property
    def spacing(self) -> float:
        return 2.0 * np.pi / self.tau

    @property
    def indices(self) -> np.ndarray:
        return np.arange(-self.p_max, self.p_max + 1)

    @property
    def frequencies(self) -> np.ndarray:
        return 2.0 * np.pi * self.indices / self.tau

    @property
    def omega_max(self) -> float:
        """Largest frequency actually on the grid."""
        return 2.0 * np.pi * self.p_max / self.tau

    def __len__(self) -> int:
        return 2 * self.p_max + 1

    def index_of(self, omega: float, tol: float = 1e-9) -> int:
        """Position of ``omega`` in :attr:`frequencies`; off-grid values are rejected."""
        x = omega / self.spacing
        p = int(round(x))
        if abs(x - p) > tol or abs(p) > self.p_max:
            raise ContractViolation(
                f"frequency {omega} is not on the grid (spacing {self.spacing:.6g}, p_max {self.p_max})"
            )
        return p + self.p_max

    def tail_sum_inverse_square(self, shift: float = 0.0) -> float:
        """sum over |p| > p_max of 1 / (|omega_p| - shift)^2, for 0 <= shift < first tail frequency."""
        h = self.spacing
        q0 = self.p_max + 1 - shift / h
        if q0 <= 0:
            return np.inf
        # sum_{q = q0, q0+1, ...} 1/(h q)^2 = trigamma(q0) / h^2, doubled for both signs
        return float(2.0 * polygamma(1, q0) / h**2)


def make_grid(tau: float, omega_max: float) -> FrequencyGrid:
    if not tau > 0:
        raise ConfigError(f"tau must be positive, got {tau}")
    if not omega_max > 0:
        raise ConfigError(f"omega_max must be positive, got {omega_max}")
    p_max = int(np.floor(omega_max * tau / (2.0 * np.pi) + 1e-12))
    if p_max < 1:
        raise ConfigError(
            f"omega_max * tau = {omega_max * tau:.4g} < 2 pi leaves only omega = 0 on the grid; "
            "increase omega_max or tau"
        )
    return FrequencyGrid(tau=float(tau), p_max=p_max)


def sinc_window(omega, tau: float):
    """(tau / 2 pi) sinc^2(omega tau / 2 pi) with sinc(x) = sin(pi x) / (pi x)."""
    if not tau > 0:
        raise ContractViolation(f"tau must be positive, got {tau}")
    return tau / (2.0 * np.pi) * np.sinc(np.asarray(omega) * tau / (2.0 * np.pi)) ** 2
