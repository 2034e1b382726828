"""Entanglement distribution: two-mode squeezed vacuum sources and pure-loss fiber.

Loss is modeled as a beamsplitter coupling to an explicit vacuum environment
mode, kept inline as a purification until a trace is actually needed. This
makes every intermediate state a ket and allows term-by-term validation of
the downstream pipeline.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .fock import Mode, ModeCollisionError, MultiModeKet


@dataclass(frozen=True)
class SourceParams:
    """Two-mode squeezing parameter chi of a TMSV source, 0 <= chi < 1."""

    chi: float

    def __post_init__(self):
        if not 0.0 <= self.chi < 1.0:
            raise ValueError(f"chi must be in [0, 1), got {self.chi}")


@dataclass(frozen=True)
class FiberChannel:
    """Optical fiber of given length; default attenuation 0.2 dB/km."""

    length_km: float
    attenuation_db_per_km: float = 0.2

    def __post_init__(self):
        if self.length_km < 0:
            raise ValueError(f"length must be >= 0, got {self.length_km}")

    def transmissivity(self) -> float:
        return 10.0 ** (-self.attenuation_db_per_km * self.length_km / 10.0)


def transmissivity(c: FiberChannel) -> float:
    """Power transmissivity eta = 10^(-attenuation * length / 10)."""
    return c.transmissivity()


def tmsv(p: SourceParams | float, cutoff: int,
         labels: tuple[str, str] = ("A", "B")) -> MultiModeKet:
    """Two-mode squeezed vacuum, amplitude sqrt(1-chi^2) chi^n on |n, n>.

    Normalized up to the truncation tail: the squared norm at cutoff N is
    1 - chi^(2(N+1)).
    """
    chi = p.chi if isinstance(p, SourceParams) else SourceParams(p).chi
    if cutoff < 0:
        raise ValueError("cutoff must be >= 0")
    modes = (Mode(labels[0], cutoff), Mode(labels[1], cutoff))
    amps = np.zeros((cutoff + 1, cutoff + 1), dtype=complex)
    diag = math.sqrt(1.0 - chi * chi) * chi ** np.arange(cutoff + 1)
    np.fill_diagonal(amps, diag)
    return MultiModeKet(modes, amps)


def _loss_tensor(dim: int, eta: float) -> np.ndarray:
    """Binomial beamsplitter splitting tensor T[n, p, q].

    |n>|0>_env -> sum_p sqrt(C(n,p)) eta^(p/2) (1-eta)^((n-p)/2) |p>|n-p>_env,
    exact on the truncated lattice and norm preserving.
    """
    t = np.zeros((dim, dim, dim))
    for n in range(dim):
        for p_ in range(n + 1):
            coeff = math.sqrt(math.comb(n, p_)) * eta ** (p_ / 2.0) \
                * (1.0 - eta) ** ((n - p_) / 2.0)
            t[n, p_, n - p_] = coeff
    return t


def apply_loss(state: MultiModeKet, mode: str, eta: float, env: str) -> MultiModeKet:
    """Pass one mode through a pure-loss channel of transmissivity eta.

    The environment mode ``env`` (same cutoff as the signal) is appended as
    the last mode of the output ket. Norm is preserved exactly.
    """
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"eta must be in [0, 1], got {eta}")
    if env in state.labels:
        raise ModeCollisionError(f"environment label {env!r} already present")
    ax = state.axis(mode)
    dim = state.modes[ax].dim
    t = _loss_tensor(dim, eta)
    # contract the signal axis against T[n, p, q]: the p axis replaces the
    # signal in place, q becomes the trailing environment axis
    amps = np.tensordot(state.amps, t, axes=(ax, 0))
    amps = np.moveaxis(amps, -2, ax)
    modes = list(state.modes)
    modes.append(Mode(env, dim - 1))
    return MultiModeKet(modes, amps)
