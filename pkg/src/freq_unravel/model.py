"""Open-system models: system Hamiltonian plus rate-carrying jump channels.

Basis convention for the two-level preset: index 0 = ground |g>, index 1 =
excited |e>.  Jump operators absorb the rate, e.g. sqrt(Gamma) * sigma_minus.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .errors import ConfigError, ContractViolation
from .numerics import adjoint, is_hermitian

GROUND = np.array([1.0, 0.0], dtype=complex)
EXCITED = np.array([0.0, 1.0], dtype=complex)
SIGMA_MINUS = np.array([[0.0, 1.0], [0.0, 0.0]], dtype=complex)
SIGMA_PLUS = SIGMA_MINUS.T.copy()


def _frozen(M) -> np.ndarray:
    M = np.array(M, dtype=complex)
    M.setflags(write=False)
    return M


@dataclass(frozen=True)
class JumpChannel:
    id: int
    operator: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "operator", _frozen(self.operator))
        if not np.any(self.operator != 0):
            raise ContractViolation(f"jump channel {self.id} has an identically zero operator")


@dataclass(frozen=True)
class ModelSpec:
    """Immutable description of H_sys, the decay channels and named observables."""

    dim: int
    h_sys: np.ndarray
    channels: tuple[JumpChannel, ...]
    observables: Mapping[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "h_sys", _frozen(self.h_sys))
        object.__setattr__(self, "channels", tuple(self.channels))
        obs = {name: _frozen(O) for name, O in dict(self.observables).items()}
        obs.setdefault("identity", _frozen(np.eye(self.dim)))
        object.__setattr__(self, "observables", obs)

        d = self.dim
        if self.h_sys.shape != (d, d):
            raise ContractViolation(f"h_sys has shape {self.h_sys.shape}, expected {(d, d)}")
        if not is_hermitian(self.h_sys, atol=1e-12):
            raise ContractViolation("h_sys is not Hermitian")
        if not self.channels:
            raise ContractViolation("a model needs at least one jump channel")
        ids = [c.id for c in self.channels]
        if len(set(ids)) != len(ids):
            raise ContractViolation(f"duplicate channel ids {ids}")
        for c in self.channels:
            if c.operator.shape != (d, d):
                raise ContractViolation(f"channel {c.id} operator has shape {c.operator.shape}")
        for name, O in obs.items():
            if O.shape != (d, d):
                raise ContractViolation(f"observable {name!r} has shape {O.shape}")

    @property
    def jump_operators(self) -> np.ndarray:
        """Stacked channel operators, shape (n_channels, d, d)."""
        return np.stack([c.operator for c in self.channels])

    def channel_index(self, channel_id: int) -> int:
        for i, c in enumerate(self.channels):
            if c.id == channel_id:
                return i
        raise ContractViolation(f"unknown channel id {channel_id}")

    def decay_operator(self) -> np.ndarray:
        """sum_gamma a_gamma^dagger a_gamma."""
        return sum(adjoint(c.operator) @ c.operator for c in self.channels)

    def observable(self, name: str) -> np.ndarray:
        try:
            return self.observables[name]
        except KeyError:
            raise ConfigError(
                f"unknown observable {name!r}; available: {sorted(self.observables)}"
            ) from None


def build_effective_hamiltonian(model: ModelSpec) -> np.ndarray:
    """H_eff = H_sys - (i/2) sum_gamma a_gamma^dagger a_gamma."""
    h_eff = model.h_sys - 0.5j * model.decay_operator()
    h_eff.setflags(write=False)
    return h_eff


def two_level_model(omega_rabi: float) -> ModelSpec:
    """Resonantly driven two-level atom, H_sys = (Omega/2)(sigma+ + sigma-), a = sigma-.

    Units: Gamma = 1, so the single channel operator is sigma_minus itself.
    """
    if omega_rabi < 0 or not np.isfinite(omega_rabi):
        raise ConfigError(f"omega_rabi must be a finite number >= 0, got {omega_rabi}")
    h_sys = 0.5 * omega_rabi * (SIGMA_PLUS + SIGMA_MINUS)
    return ModelSpec(
        dim=2,
        h_sys=h_sys,
        channels=(JumpChannel(0, SIGMA_MINUS),),
        observables={
            "excited_population": SIGMA_PLUS @ SIGMA_MINUS,
            "identity": np.eye(2),
        },
    )


PRESETS = {"two_level": two_level_model}


def preset(name: str, **params) -> ModelSpec:
    try:
        factory = PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown model {name!r}; available: {sorted(PRESETS)}") from None
    return factory(**params)


def initial_state(model: ModelSpec, spec: str) -> np.ndarray:
    """Density matrix for "ground" | "excited" | "steady" (two-level basis convention)."""
    d = model.dim
    if spec == "ground":
        rho = np.zeros((d, d), dtype=complex)
        rho[0, 0] = 1.0
        return rho
    if spec == "excited":
        rho = np.zeros((d, d), dtype=complex)
        rho[d - 1, d - 1] = 1.0
        return rho
    if spec == "steady":
        from .oracle import steady_state

        return steady_state(model)
    raise ConfigError(f"initial_state must be ground, excited or steady, got {spec!r}")
