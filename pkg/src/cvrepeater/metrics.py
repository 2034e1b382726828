"""Gaussian information quantities from two-mode covariance matrices.

Mutual information, Holevo bound and key rates for entanglement-based
CV-QKD with reverse reconciliation, entanglement of formation, and the
direct-transmission baselines. All quantities are computed from the
covariance matrix in shot-noise units (vacuum variance 1); because the
repeater output carries slight non-Gaussianity from the scissor truncation,
every rate reported by this module is a Gaussian-CM-based bound (Gaussian
extremality overestimates the eavesdropper), never an exact non-Gaussian
rate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

__all__ = [
    "PhysicalityError", "CovarianceMatrixTM", "KeyRateInputs",
    "entropy_g", "symplectic_eigs", "pt_min_symplectic", "mutual_info",
    "holevo_reverse", "raw_key", "eof_gaussian", "pure_state_entanglement",
    "plob", "direct_transmission_cm", "direct_transmission_key",
    "DirectTransmissionResult", "eof_infinite_squeezing",
]

#: symplectic eigenvalues may dip below 1 by at most this much
NU_FLOOR = 1e-6


class PhysicalityError(ValueError):
    """A covariance matrix (or probability) violates physicality bounds."""


def _standard_full(a: float, b: float, c: float) -> np.ndarray:
    z = np.diag([1.0, -1.0])
    top = np.hstack([a * np.eye(2), c * z])
    bot = np.hstack([c * z, b * np.eye(2)])
    return np.vstack([top, bot])


@dataclass(frozen=True)
class CovarianceMatrixTM:
    """Two-mode covariance matrix in standard form [[a I, c Z], [c Z, b I]].

    ``full`` keeps the raw 4x4 matrix the standard form was extracted from;
    ``residual`` is the largest deviation between the two. Means are ordered
    (x_A, p_A, x_B, p_B).
    """

    a: float
    b: float
    c: float
    full: np.ndarray
    means: np.ndarray
    residual: float = 0.0

    @classmethod
    def from_standard(cls, a: float, b: float, c: float,
                      means: np.ndarray | None = None) -> "CovarianceMatrixTM":
        m = np.zeros(4) if means is None else np.asarray(means, dtype=float)
        return cls(a=float(a), b=float(b), c=float(c),
                   full=_standard_full(a, b, c), means=m)

    @classmethod
    def from_moments(cls, means: np.ndarray, cov: np.ndarray,
                     *, atol: float = 1e-6) -> "CovarianceMatrixTM":
        """Extract the standard form from a raw 4x4 covariance matrix.

        Raises PhysicalityError if the matrix is further than ``atol`` from
        standard form (the pipeline's states are standard-form exact up to
        quadrature noise).
        """
        cov = np.asarray(cov, dtype=float)
        cov = (cov + cov.T) / 2.0
        a = (cov[0, 0] + cov[1, 1]) / 2.0
        b = (cov[2, 2] + cov[3, 3]) / 2.0
        c = (cov[0, 2] - cov[1, 3]) / 2.0
        residual = float(np.max(np.abs(cov - _standard_full(a, b, c))))
        if residual > atol:
            raise PhysicalityError(
                f"covariance matrix not in standard form (residual {residual:.3e})")
        return cls(a=a, b=b, c=c, full=cov,
                   means=np.asarray(means, dtype=float), residual=residual)

    def validate(self, *, nu_floor: float = NU_FLOOR) -> None:
        if self.a < 1.0 - 1e-8 or self.b < 1.0 - 1e-8:
            raise PhysicalityError(
                f"diagonal variances below shot noise: a={self.a}, b={self.b}")
        n1, n2 = symplectic_eigs(self)
        if min(n1, n2) < 1.0 - nu_floor:
            raise PhysicalityError(
                f"symplectic eigenvalue below 1: {min(n1, n2)}")


@dataclass(frozen=True)
class KeyRateInputs:
    """Reconciliation efficiency and detection protocol (reverse rec., Bob reference)."""

    beta: float = 0.95
    protocol: str = "hom"

    def __post_init__(self):
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError(f"beta must be in [0, 1], got {self.beta}")
        if self.protocol not in ("hom", "het"):
            raise ValueError(f"protocol must be 'hom' or 'het', got {self.protocol}")


def entropy_g(x: float) -> float:
    """Bosonic entropy function G(x) = (1+x) log2(1+x) - x log2 x, G(0) = 0."""
    if x < 0.0:
        if x > -1e-9:
            return 0.0
        raise ValueError(f"entropy argument must be >= 0, got {x}")
    if x == 0.0:
        return 0.0
    return (1.0 + x) * math.log2(1.0 + x) - x * math.log2(x)


def symplectic_eigs(V: CovarianceMatrixTM) -> tuple[float, float]:
    """Symplectic eigenvalues (nu_plus, nu_minus) of the standard-form CM."""
    a, b, c = V.a, V.b, V.c
    delta = a * a + b * b - 2.0 * c * c
    det = (a * b - c * c) ** 2
    disc = delta * delta - 4.0 * det
    if disc < 0.0:
        if disc < -1e-9 * max(1.0, delta * delta):
            raise PhysicalityError(f"negative symplectic discriminant {disc:.3e}")
        disc = 0.0
    root = math.sqrt(disc)
    lo = (delta - root) / 2.0
    if lo < -1e-9 * max(1.0, abs(delta)):
        raise PhysicalityError(f"negative squared symplectic eigenvalue {lo:.3e}")
    nu_p = math.sqrt(max((delta + root) / 2.0, 0.0))
    nu_m = math.sqrt(max(lo, 0.0))
    return nu_p, nu_m


def pt_min_symplectic(V: CovarianceMatrixTM) -> float:
    """Smallest symplectic eigenvalue of the partial transpose (< 1: entangled)."""
    a, b, c = V.a, V.b, V.c
    delta = a * a + b * b + 2.0 * c * c
    det = (a * b - c * c) ** 2
    disc = max(delta * delta - 4.0 * det, 0.0)
    return math.sqrt(max((delta - math.sqrt(disc)) / 2.0, 0.0))


def mutual_info(V: CovarianceMatrixTM, protocol: str) -> float:
    """Mutual information of the two entangled modes under hom/het detection."""
    a, b, c = V.a, V.b, V.c
    if protocol == "het":
        return math.log2((1.0 + a) / (1.0 + a - c * c / (1.0 + b)))
    if protocol == "hom":
        return 0.5 * math.log2(a / (a - c * c / b))
    raise ValueError(f"unknown protocol {protocol!r}")


def holevo_reverse(V: CovarianceMatrixTM) -> float:
    """Holevo bound on the eavesdropper's information, Bob the reference.

    S(E) = S(AB) by purification; the conditional term uses the symplectic
    eigenvalue nu_3 = a - c^2/(1+b) of Alice's covariance conditioned on
    Bob's measurement.
    """
    nu1, nu2 = symplectic_eigs(V)
    nu3 = V.a - V.c * V.c / (1.0 + V.b)
    s_ab = entropy_g(max((nu1 - 1.0) / 2.0, 0.0)) + entropy_g(max((nu2 - 1.0) / 2.0, 0.0))
    s_cond = entropy_g(max((nu3 - 1.0) / 2.0, 0.0))
    return s_ab - s_cond


def raw_key(V: CovarianceMatrixTM, inputs: KeyRateInputs) -> float:
    """Raw key per accepted use, max(0, beta I_AB - I_BE); clamped at zero."""
    i_ab = mutual_info(V, inputs.protocol)
    i_be = holevo_reverse(V)
    return max(0.0, inputs.beta * i_ab - i_be)


# -- entanglement of formation -----------------------------------------------


def pure_state_entanglement(u: float) -> float:
    """Entropy of entanglement of a pure two-mode squeezed state, chi = tanh u."""
    return entropy_g(math.sinh(u) ** 2)


def _williamson_decoupled(a: float, b: float, c: float):
    """Williamson data of a standard-form CM, staying x/p decoupled.

    The x and p sectors of [[a, c], [c, b]]-type matrices are linked: with
    Sx^T P Sx = D and X = Sx D Sx^T (D the symplectic spectrum), the
    congruence S = Sx (+) Sx^(-T) diagonalizes the full CM. Returns
    (Sx, nu) with nu sorted descending.
    """
    x_blk = np.array([[a, c], [c, b]])
    p_blk = np.array([[a, -c], [-c, b]])
    w = _sqrtm_2x2(p_blk)
    evals, q = np.linalg.eigh(w @ x_blk @ w)
    evals = np.maximum(evals, 1e-300)
    order = np.argsort(evals)[::-1]
    evals, q = evals[order], q[:, order]
    nu = np.sqrt(evals)
    sx = np.linalg.solve(w, q) @ np.diag(np.sqrt(nu))
    return sx, nu


def _sqrtm_2x2(m: np.ndarray) -> np.ndarray:
    evals, vecs = np.linalg.eigh(m)
    return vecs @ np.diag(np.sqrt(np.maximum(evals, 0.0))) @ vecs.T


def _pure_entanglement_from_marginal(det_b1: float) -> float:
    nu = math.sqrt(max(det_b1, 1.0))
    return entropy_g((nu - 1.0) / 2.0)


def _eof_tangent_class(a: float, b: float, c: float, nu: np.ndarray,
                       sx: np.ndarray) -> float:
    """Exact EOF when the smaller symplectic eigenvalue equals 1.

    With nu_2 = 1 the second Williamson mode of any dominated pure state is
    pinned to vacuum and decoupled, so the feasible pure states are exactly
    S (G1 (+) I) S^T over single-mode pure G1 <= nu_1 * I. Minimize the
    physical-bipartition entanglement over that family (squeezing r and
    angle phi of G1).
    """
    sxi_t = np.linalg.inv(sx).T
    r_max = 0.5 * math.log(float(nu[0]))

    def entanglement(r: float, phi: float) -> float:
        co, si = math.cos(phi), math.sin(phi)
        rot = np.array([[co, -si], [si, co]])
        g1 = rot @ np.diag([math.exp(2 * r), math.exp(-2 * r)]) @ rot.T
        # grouped ordering (x_A, x_B | p_A, p_B); Williamson mode 1 carries g1
        gx = sx @ np.array([[g1[0, 0], 0.0], [0.0, 1.0]]) @ sx.T
        gp = sxi_t @ np.array([[g1[1, 1], 0.0], [0.0, 1.0]]) @ sxi_t.T
        gxp = sx @ np.array([[g1[0, 1], 0.0], [0.0, 0.0]]) @ sxi_t.T
        det_b1 = gx[0, 0] * gp[0, 0] - gxp[0, 0] ** 2
        return _pure_entanglement_from_marginal(det_b1)

    rs = np.linspace(0.0, r_max, 49)
    phis = np.linspace(0.0, math.pi, 33)
    best = math.inf
    best_x = (0.0, 0.0)
    for r in rs:
        for phi in phis:
            val = entanglement(r, phi)
            if val < best:
                best, best_x = val, (r, phi)
    res = minimize(lambda z: entanglement(min(max(z[0], 0.0), r_max), z[1]),
                   np.array(best_x), method="Nelder-Mead",
                   options={"xatol": 1e-10, "fatol": 1e-12, "maxiter": 400})
    return float(min(best, res.fun))


def _sector_slack(u: float, a: float, b: float, c: float,
                  grid: int = 61) -> float:
    """Best-case slack of fitting a pure state of squeezing u under V.

    The candidate pure CMs decouple into an x-sector block and its inverse
    in the p sector; V - Gamma >= 0 splits into two 2x2 conditions whose
    worst eigenvalue is maximized over the local squeezings (log-grid plus
    Nelder-Mead polish). Nonnegative slack means u is attainable.
    """
    ch, sh = math.cosh(2.0 * u), math.sinh(2.0 * u)
    sab = math.sqrt(a * b)
    if ch >= sab:
        return -math.inf
    qc = math.sqrt(a / b)

    def slack(logp: np.ndarray, logq: np.ndarray):
        p = np.exp(logp)
        q = np.exp(logq)
        d1x, d2x, offx = a - ch * p * q, b - ch * p / q, c - sh * p
        d1p, d2p, offp = a - ch / (p * q), b - ch * q / p, c - sh / p
        lx = 0.5 * ((d1x + d2x) - np.hypot(d1x - d2x, 2 * offx))
        lp = 0.5 * ((d1p + d2p) - np.hypot(d1p - d2p, 2 * offp))
        return np.minimum(lx, lp)

    lp_lo, lp_hi = math.log(ch / sab), math.log(sab / ch)
    lq_lo = math.log(min(qc, 1 / qc)) - 1.0
    lq_hi = math.log(max(qc, 1 / qc)) + 1.0
    ps = np.linspace(lp_lo, lp_hi, grid)
    qs = np.linspace(lq_lo, lq_hi, grid)
    pg, qg = np.meshgrid(ps, qs, indexing="ij")
    vals = slack(pg, qg)
    k = np.unravel_index(int(np.argmax(vals)), vals.shape)
    res = minimize(lambda z: -float(slack(np.array(z[0]), np.array(z[1]))),
                   np.array([ps[k[0]], qs[k[1]]]), method="Nelder-Mead",
                   options={"xatol": 1e-12, "fatol": 1e-14, "maxiter": 400})
    return max(float(vals[k]), -float(res.fun))


def eof_gaussian(V: CovarianceMatrixTM, *, method: str = "auto",
                 u_tol: float = 1e-9) -> float:
    """Entanglement of formation of the two-mode Gaussian state with CM V.

    The exact Gaussian decomposition construction: the least-entangled pure
    two-mode Gaussian state whose CM fits under V. Separable states return
    0; symmetric states (a = b) use the closed form in the smallest
    partial-transpose symplectic eigenvalue; states with the smaller
    symplectic eigenvalue at 1 (one-sided-loss class) have an explicit
    feasible family that is minimized directly; the remaining mixed states
    bisect the attainable-squeezing edge, bracketed from above by the
    Williamson pure part of V (always attainable).
    """
    nu_pt = pt_min_symplectic(V)
    if nu_pt >= 1.0 - 1e-12:
        return 0.0
    symmetric = abs(V.a - V.b) <= 1e-8 * max(1.0, V.a, V.b)
    if method == "symmetric" or (method == "auto" and symmetric):
        return pure_state_entanglement(-0.5 * math.log(nu_pt))
    if method not in ("auto", "general"):
        raise ValueError(f"unknown method {method!r}")

    a, b, c = V.a, V.b, abs(V.c)
    sx, nu = _williamson_decoupled(a, b, c)
    if nu[1] <= 1.0 + 1e-6:
        return _eof_tangent_class(a, b, c, nu, sx)

    # Williamson pure part: attainable by construction, brackets from above
    g_mat = sx @ sx.T
    corr = abs(g_mat[0, 1]) / math.sqrt(g_mat[0, 0] * g_mat[1, 1])
    u_hi = 0.5 * math.atanh(min(corr, 1.0 - 1e-15))
    if _sector_slack(u_hi, a, b, c) < 0.0:
        u_hi *= 1.0 + 1e-9  # absorb rounding of the tangency point
    u_lo = 0.0
    while u_hi - u_lo > u_tol:
        mid = 0.5 * (u_lo + u_hi)
        if _sector_slack(mid, a, b, c) >= 0.0:
            u_hi = mid
        else:
            u_lo = mid
    return pure_state_entanglement(u_hi)


# -- direct-transmission baselines --------------------------------------------


def plob(eta: float) -> float:
    """Repeaterless secret-key capacity of the pure-loss channel, -log2(1-eta)."""
    if not 0.0 < eta < 1.0:
        raise ValueError(f"eta must be in (0, 1), got {eta}")
    return -math.log2(1.0 - eta)


def direct_transmission_cm(chi: float, eta: float) -> CovarianceMatrixTM:
    """CM of a TMSV with one mode kept and the other sent through loss eta."""
    a = (1.0 + chi * chi) / (1.0 - chi * chi)
    b = eta * (a - 1.0) + 1.0
    c = math.sqrt(eta) * 2.0 * chi / (1.0 - chi * chi)
    return CovarianceMatrixTM.from_standard(a, b, c)


@dataclass(frozen=True)
class DirectTransmissionResult:
    key: float
    chi: float
    hit_window_edge: bool
    window: tuple[float, float] = field(default=(1e-4, 0.995))


def direct_transmission_key(L_km: float, beta: float,
                            *, attenuation_db_per_km: float = 0.2,
                            window: tuple[float, float] = (1e-4, 0.995),
                            ) -> DirectTransmissionResult:
    """Best homodyne reverse-reconciliation key for direct transmission.

    Squeezing chi is optimized inside a bounded search window; hitting the
    upper edge (lossless or near-lossless channels, where the key grows with
    chi without bound) is reported, not an error.
    """
    if L_km < 0:
        raise ValueError("distance must be >= 0")
    eta = 10.0 ** (-attenuation_db_per_km * L_km / 10.0)
    inputs = KeyRateInputs(beta=beta, protocol="hom")

    def key_of(chi: float) -> float:
        return raw_key(direct_transmission_cm(chi, eta), inputs)

    lo, hi = window
    grid = np.linspace(lo, hi, 41)
    vals = [key_of(x) for x in grid]
    k = int(np.argmax(vals))
    g_lo = grid[max(k - 1, 0)]
    g_hi = grid[min(k + 1, len(grid) - 1)]
    # golden-section refine on the bracketing interval
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    x1, x2 = g_hi - invphi * (g_hi - g_lo), g_lo + invphi * (g_hi - g_lo)
    f1, f2 = key_of(x1), key_of(x2)
    for _ in range(80):
        if g_hi - g_lo < 1e-10:
            break
        if f1 < f2:
            g_lo, x1, f1 = x1, x2, f2
            x2 = g_lo + invphi * (g_hi - g_lo)
            f2 = key_of(x2)
        else:
            g_hi, x2, f2 = x2, x1, f1
            x1 = g_hi - invphi * (g_hi - g_lo)
            f1 = key_of(x1)
    chi_opt = 0.5 * (g_lo + g_hi)
    best = key_of(chi_opt)
    if best < max(vals):  # grid point beat the refinement (edge optimum)
        chi_opt, best = float(grid[k]), float(vals[k])
    return DirectTransmissionResult(
        key=float(best), chi=float(chi_opt),
        hit_window_edge=bool(chi_opt >= window[1] - 1e-6), window=window)


def eof_infinite_squeezing(eta: float,
                           chis: tuple[float, ...] = (0.999, 0.9999, 0.99999),
                           cauchy_tol: float = 1e-4) -> float:
    """EOF of the infinite-squeezing TMSV through loss eta, by extrapolation.

    The limit state has no finite covariance matrix, so the chi -> 1 limit is
    taken by linear extrapolation in (1 - chi) over successive pairs; the two
    extrapolants must agree within ``cauchy_tol`` ebits.
    """
    if len(chis) < 3:
        raise ValueError("need at least three chi values to extrapolate")
    vals = [eof_gaussian(direct_transmission_cm(chi, eta)) for chi in chis]
    ts = [1.0 - chi for chi in chis]

    def extrapolate(i: int, j: int) -> float:
        # linear model E(t) = E0 + s t evaluated at t = 0
        return vals[i] - ts[i] * (vals[j] - vals[i]) / (ts[j] - ts[i])

    e1 = extrapolate(len(chis) - 3, len(chis) - 2)
    e2 = extrapolate(len(chis) - 2, len(chis) - 1)
    if abs(e2 - e1) > cauchy_tol:
        raise PhysicalityError(
            f"infinite-squeezing EOF extrapolation not Cauchy: |{e2} - {e1}| > {cauchy_tol}")
    return max(e2, 0.0)
