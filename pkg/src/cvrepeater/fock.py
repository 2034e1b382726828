"""Truncated multimode Fock-space engine.

States live on the occupation lattice of a set of labelled bosonic modes,
each mode with its own photon-number cutoff. Amplitude/density arrays are
dense: the lattices used by the repeater pipeline are small (tens of levels
per mode at most), where dense storage beats sparse bookkeeping.

Kets are allowed to be unnormalized on purpose -- the squared norm carries
heralding probabilities through the pipeline. Every operation is a pure
function of its inputs, so parameter sweeps can evaluate points concurrently
without locking.

Quadrature convention: x = a + a^dag, p = -i(a - a^dag), so the vacuum has
variance 1 in both quadratures (shot-noise units).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np

#: max elementwise deviation from Hermiticity tolerated by assert_physical
HERMITICITY_TOL = 1e-10
#: eigenvalue floor (negative values above this are numerical noise)
PSD_FLOOR = -1e-9


class ModeCollisionError(ValueError):
    """An operation would introduce a duplicate mode label."""


class UnknownModeError(KeyError):
    """A mode label is not present in the state."""


@dataclass(frozen=True)
class Mode:
    """A labelled bosonic mode truncated at photon number ``cutoff``."""

    label: str
    cutoff: int

    def __post_init__(self):
        if self.cutoff < 0:
            raise ValueError(f"cutoff must be >= 0, got {self.cutoff}")

    @property
    def dim(self) -> int:
        return self.cutoff + 1


def _labels(modes: Sequence[Mode]) -> tuple[str, ...]:
    return tuple(m.label for m in modes)


def _check_unique(modes: Sequence[Mode]) -> None:
    labels = _labels(modes)
    if len(set(labels)) != len(labels):
        raise ModeCollisionError(f"duplicate mode labels in {labels}")


class MultiModeKet:
    """Complex amplitudes over the occupation lattice of labelled modes.

    ``amps`` has one axis per mode, axis k of dimension ``modes[k].dim``.
    """

    __slots__ = ("modes", "amps")

    def __init__(self, modes: Sequence[Mode], amps: np.ndarray):
        modes = tuple(modes)
        _check_unique(modes)
        expected = tuple(m.dim for m in modes)
        amps = np.asarray(amps, dtype=complex)
        if amps.shape != expected:
            raise ValueError(f"amplitude shape {amps.shape} != mode dims {expected}")
        if not np.all(np.isfinite(amps)):
            raise ValueError("non-finite amplitudes")
        self.modes = modes
        self.amps = amps

    # -- bookkeeping -------------------------------------------------------

    @property
    def labels(self) -> tuple[str, ...]:
        return _labels(self.modes)

    def axis(self, label: str) -> int:
        try:
            return self.labels.index(label)
        except ValueError:
            raise UnknownModeError(label) from None

    def mode(self, label: str) -> Mode:
        return self.modes[self.axis(label)]

    def norm_sq(self) -> float:
        return float(np.vdot(self.amps, self.amps).real)

    def norm(self) -> float:
        return math.sqrt(self.norm_sq())

    def normalized(self) -> "MultiModeKet":
        n = self.norm()
        if n == 0.0:
            raise ValueError("cannot normalize a zero ket")
        return MultiModeKet(self.modes, self.amps / n)

    def amplitude(self, occupation: Sequence[int]) -> complex:
        return complex(self.amps[tuple(occupation)])

    # -- conversions -------------------------------------------------------

    def to_density(self) -> "MultiModeDensity":
        flat = self.amps.reshape(-1)
        return MultiModeDensity(self.modes, np.outer(flat, flat.conj()))

    def reduced_density(self, keep: Iterable[str]) -> "MultiModeDensity":
        """Partial trace of |psi><psi| over all modes not in ``keep``.

        Avoids forming the full projector: reshaping to (kept, traced) gives
        the reduced matrix as M M^dag.
        """
        keep = set(keep)
        for lbl in keep:
            if lbl not in self.labels:
                raise UnknownModeError(lbl)
        kept_axes = [i for i, m in enumerate(self.modes) if m.label in keep]
        traced_axes = [i for i, m in enumerate(self.modes) if m.label not in keep]
        perm = kept_axes + traced_axes
        kept_modes = tuple(self.modes[i] for i in kept_axes)
        dk = int(np.prod([self.modes[i].dim for i in kept_axes])) if kept_axes else 1
        dt = int(np.prod([self.modes[i].dim for i in traced_axes])) if traced_axes else 1
        m = np.transpose(self.amps, perm).reshape(dk, dt)
        return MultiModeDensity(kept_modes, m @ m.conj().T)


class MultiModeDensity:
    """Density matrix over the flattened occupation lattice of labelled modes."""

    __slots__ = ("modes", "mat")

    def __init__(self, modes: Sequence[Mode], mat: np.ndarray):
        modes = tuple(modes)
        _check_unique(modes)
        dim = int(np.prod([m.dim for m in modes]))
        mat = np.asarray(mat, dtype=complex)
        if mat.shape != (dim, dim):
            raise ValueError(f"matrix shape {mat.shape} != ({dim}, {dim})")
        if not np.all(np.isfinite(mat)):
            raise ValueError("non-finite matrix entries")
        self.modes = modes
        self.mat = mat

    @property
    def labels(self) -> tuple[str, ...]:
        return _labels(self.modes)

    def axis(self, label: str) -> int:
        try:
            return self.labels.index(label)
        except ValueError:
            raise UnknownModeError(label) from None

    def dims(self) -> tuple[int, ...]:
        return tuple(m.dim for m in self.modes)

    def trace(self) -> float:
        return float(np.trace(self.mat).real)

    def normalized(self) -> "MultiModeDensity":
        t = np.trace(self.mat)
        if abs(t) == 0.0:
            raise ValueError("cannot normalize a zero-trace density")
        return MultiModeDensity(self.modes, self.mat / t.real)

    def lattice_view(self) -> np.ndarray:
        """View reshaped to one ket axis and one bra axis per mode."""
        d = self.dims()
        return self.mat.reshape(*d, *d)

    # -- physicality checks ------------------------------------------------

    def hermiticity_defect(self) -> float:
        return float(np.max(np.abs(self.mat - self.mat.conj().T)))

    def min_eigenvalue(self) -> float:
        return float(np.linalg.eigvalsh((self.mat + self.mat.conj().T) / 2.0)[0])

    def assert_physical(self, *, herm_tol: float = HERMITICITY_TOL,
                        psd_floor: float = PSD_FLOOR) -> None:
        defect = self.hermiticity_defect()
        if defect > herm_tol:
            raise ValueError(f"density not Hermitian: max deviation {defect:.3e}")
        lo = self.min_eigenvalue()
        if lo < psd_floor:
            raise ValueError(f"density not PSD: min eigenvalue {lo:.3e}")
        t = np.trace(self.mat)
        if not (t.real > 0 and abs(t.imag) <= herm_tol * max(1.0, t.real)):
            raise ValueError(f"density trace not real positive: {t}")


# -- construction helpers ----------------------------------------------------


def ket_from_occupation(modes: Sequence[Mode], occupation: Sequence[int]) -> MultiModeKet:
    """Basis ket |n0 n1 ...> on the given modes."""
    modes = tuple(modes)
    occupation = tuple(occupation)
    if len(occupation) != len(modes):
        raise ValueError("occupation length must match number of modes")
    for n, m in zip(occupation, modes):
        if not 0 <= n <= m.cutoff:
            raise ValueError(f"occupation {n} outside [0, {m.cutoff}] for mode {m.label}")
    amps = np.zeros(tuple(m.dim for m in modes), dtype=complex)
    amps[occupation] = 1.0
    return MultiModeKet(modes, amps)


def vacuum(modes: Sequence[Mode]) -> MultiModeKet:
    return ket_from_occupation(modes, [0] * len(tuple(modes)))


# -- core operations ---------------------------------------------------------


def tensor(s1: MultiModeKet, s2: MultiModeKet) -> MultiModeKet:
    """Tensor product of two kets on disjoint mode sets; norms multiply."""
    overlap = set(s1.labels) & set(s2.labels)
    if overlap:
        raise ModeCollisionError(f"modes present on both factors: {sorted(overlap)}")
    amps = np.multiply.outer(s1.amps, s2.amps)
    return MultiModeKet(s1.modes + s2.modes, amps)


def partial_trace(rho: MultiModeDensity, keep: Iterable[str]) -> MultiModeDensity:
    """Trace out every mode not listed in ``keep``; preserves the trace."""
    keep = set(keep)
    for lbl in keep:
        if lbl not in rho.labels:
            raise UnknownModeError(lbl)
    n = len(rho.modes)
    kept = [i for i in range(n) if rho.modes[i].label in keep]
    traced = [i for i in range(n) if rho.modes[i].label not in keep]
    if not traced:
        return MultiModeDensity(rho.modes, rho.mat.copy())

    letters = "abcdefghijklmnopqrstuvwxyz"
    ket_idx = [""] * n
    bra_idx = [""] * n
    pos = 0
    for i in kept:
        ket_idx[i] = letters[pos]
        bra_idx[i] = letters[pos + 1]
        pos += 2
    for i in traced:
        ket_idx[i] = bra_idx[i] = letters[pos]
        pos += 1
    src = "".join(ket_idx) + "".join(bra_idx)
    dst = "".join(ket_idx[i] for i in kept) + "".join(bra_idx[i] for i in kept)
    reduced = np.einsum(f"{src}->{dst}", rho.lattice_view())
    kept_modes = tuple(rho.modes[i] for i in kept)
    dk = int(np.prod([m.dim for m in kept_modes]))
    return MultiModeDensity(kept_modes, reduced.reshape(dk, dk))


def annihilation(cutoff: int) -> np.ndarray:
    """Single-mode annihilation operator on a (cutoff+1)-level space."""
    return np.diag(np.sqrt(np.arange(1.0, cutoff + 1)), k=1).astype(complex)


def default_guard(alpha: complex) -> int:
    return max(10, math.ceil(4.0 * abs(alpha) ** 2))


@lru_cache(maxsize=64)
def _ray_eigensystem(phase: complex, big_dim: int) -> tuple[np.ndarray, np.ndarray]:
    """Eigensystem of the Hermitian generator along one ray of alpha values.

    alpha a^dag - alpha* a = i |alpha| H with H Hermitian depending only on
    arg(alpha); one diagonalization serves every magnitude on the ray (the
    quadrature grids reuse a fixed ray, typically the real axis).
    """
    a = annihilation(big_dim - 1)
    h = -1j * (phase * a.conj().T - np.conj(phase) * a)
    evals, vecs = np.linalg.eigh(h)
    return evals, vecs


@lru_cache(maxsize=512)
def _displacement_guarded(alpha: complex, big_dim: int) -> np.ndarray:
    """Exact matrix exponential of (alpha a^dag - alpha* a), spectral form."""
    if alpha == 0:
        return np.eye(big_dim, dtype=complex)
    s = abs(alpha)
    evals, vecs = _ray_eigensystem(alpha / s, big_dim)
    return (vecs * np.exp(1j * s * evals)) @ vecs.conj().T


def displacement(alpha: complex, cutoff: int, *, guard: int | None = None) -> np.ndarray:
    """Displacement operator D(alpha) on the truncated Fock basis.

    Built as the exact matrix exponential of (alpha a^dag - alpha* a) in an
    enlarged space with a guard band, then cut back to (cutoff+1)^2. The
    guard band keeps the retained block free of boundary artifacts.
    """
    if cutoff < 0:
        raise ValueError("cutoff must be >= 0")
    return displacement_block(alpha, cutoff, cutoff, guard=guard)


def displacement_block(alpha: complex, out_cutoff: int, in_cutoff: int,
                       *, guard: int | None = None) -> np.ndarray:
    """Rectangular block <m|D(alpha)|n>, m <= out_cutoff, n <= in_cutoff."""
    if guard is None:
        guard = default_guard(alpha)
    big = max(out_cutoff, in_cutoff) + 1 + guard
    full = _displacement_guarded(complex(alpha), big)
    return full[: out_cutoff + 1, : in_cutoff + 1].copy()


def apply_one_mode(ket: MultiModeKet, label: str, block: np.ndarray,
                   *, new_cutoff: int | None = None) -> MultiModeKet:
    """Apply a (possibly rectangular) single-mode operator to one mode.

    ``block`` has shape (out_dim, in_dim) with in_dim equal to the mode's
    current dimension; the mode's cutoff becomes out_dim - 1.
    """
    ax = ket.axis(label)
    mode = ket.modes[ax]
    out_dim, in_dim = block.shape
    if in_dim != mode.dim:
        raise ValueError(f"operator input dim {in_dim} != mode dim {mode.dim}")
    if new_cutoff is not None and new_cutoff != out_dim - 1:
        raise ValueError("new_cutoff inconsistent with operator shape")
    amps = np.tensordot(block, ket.amps, axes=(1, ax))
    amps = np.moveaxis(amps, 0, ax)
    modes = list(ket.modes)
    modes[ax] = Mode(label, out_dim - 1)
    return MultiModeKet(modes, amps)


def displace_mode(ket: MultiModeKet, label: str, alpha: complex,
                  *, pad: int = 0, guard: int | None = None) -> MultiModeKet:
    """Displace one mode by alpha, enlarging its cutoff by ``pad`` levels."""
    cutoff = ket.mode(label).cutoff
    block = displacement_block(alpha, cutoff + pad, cutoff, guard=guard)
    return apply_one_mode(ket, label, block)


# -- quadrature moments ------------------------------------------------------


def moments(rho: MultiModeDensity, pair: tuple[str, str],
            *, trace: float | None = None) -> tuple[np.ndarray, np.ndarray]:
    """First and second quadrature moments of a mode pair.

    Returns (means, cov): the mean vector (<x_A>, <p_A>, <x_B>, <p_B>) and
    the symmetrized 4x4 covariance matrix in shot-noise units (vacuum
    variance 1).

    The input must either have unit trace or the caller passes its trace
    explicitly; other modes present are traced out first.
    """
    la, lb = pair
    if la == lb:
        raise ValueError("moments needs two distinct modes")
    for lbl in pair:
        if lbl not in rho.labels:
            raise UnknownModeError(lbl)
    if set(rho.labels) != {la, lb}:
        rho = partial_trace(rho, keep={la, lb})
    if trace is None:
        t = rho.trace()
        if abs(t - 1.0) > 1e-8:
            raise ValueError(
                f"density trace {t} != 1; normalize first or pass trace=")
    else:
        t = float(trace)
        if t <= 0:
            raise ValueError("trace must be positive")

    # order the lattice view as (A, B)
    perm = (rho.axis(la), rho.axis(lb))
    da = rho.modes[perm[0]].dim
    db = rho.modes[perm[1]].dim
    t4 = rho.lattice_view().transpose(perm[0], perm[1], perm[0] + 2, perm[1] + 2)

    a_op = annihilation(da - 1)
    b_op = annihilation(db - 1)
    ia = np.eye(da, dtype=complex)
    ib = np.eye(db, dtype=complex)

    def ev(oa: np.ndarray, ob: np.ndarray) -> complex:
        # Tr[rho (O_A x O_B)] on the (ket_A, ket_B, bra_A, bra_B) view
        return complex(np.einsum("abcd,ca,db->", t4, oa, ob)) / t

    e_a = ev(a_op, ib)
    e_b = ev(ia, b_op)
    e_aa = ev(a_op @ a_op, ib)
    e_bb = ev(ia, b_op @ b_op)
    e_na = ev(a_op.conj().T @ a_op, ib)
    e_nb = ev(ia, b_op.conj().T @ b_op)
    e_ab = ev(a_op, b_op)
    e_abd = ev(a_op, b_op.conj().T)

    means = np.array([2 * e_a.real, 2 * e_a.imag, 2 * e_b.real, 2 * e_b.imag])

    # raw symmetrized second moments in x = a + a^dag, p = -i(a - a^dag)
    vxx_a = 2 * e_aa.real + 2 * e_na.real + 1
    vpp_a = -2 * e_aa.real + 2 * e_na.real + 1
    vxp_a = 2 * e_aa.imag
    vxx_b = 2 * e_bb.real + 2 * e_nb.real + 1
    vpp_b = -2 * e_bb.real + 2 * e_nb.real + 1
    vxp_b = 2 * e_bb.imag
    xaxb = 2 * e_ab.real + 2 * e_abd.real
    xapb = 2 * e_ab.imag - 2 * e_abd.imag
    paxb = 2 * e_ab.imag + 2 * e_abd.imag
    papb = -2 * e_ab.real + 2 * e_abd.real

    raw = np.array([
        [vxx_a, vxp_a, xaxb, xapb],
        [vxp_a, vpp_a, paxb, papb],
        [xaxb, paxb, vxx_b, vxp_b],
        [xapb, papb, vxp_b, vpp_b],
    ])
    cov = raw - np.outer(means, means)
    return means, cov
