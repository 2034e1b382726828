import math

import numpy as np
import pytest

from cvrepeater.channel import apply_loss, tmsv
from cvrepeater.fock import moments, partial_trace
from cvrepeater.metrics import (CovarianceMatrixTM, DirectTransmissionResult,
                                KeyRateInputs, PhysicalityError,
                                direct_transmission_cm, direct_transmission_key,
                                entropy_g, eof_gaussian, eof_infinite_squeezing,
                                holevo_reverse, mutual_info, plob,
                                pt_min_symplectic, pure_state_entanglement,
                                raw_key, symplectic_eigs)


def tmsv_cm(chi):
    a = (1 + chi ** 2) / (1 - chi ** 2)
    c = 2 * chi / (1 - chi ** 2)
    return CovarianceMatrixTM.from_standard(a, a, c)


def vn_entropy(mat):
    vals = np.linalg.eigvalsh((mat + mat.conj().T) / 2)
    vals = vals[vals > 1e-15]
    return float(-np.sum(vals * np.log2(vals)))


class TestEntropyG:
    def test_values(self):
        assert entropy_g(0.0) == 0.0
        assert entropy_g(1e-12) == pytest.approx(0.0, abs=1e-10)
        assert entropy_g(0.5) == pytest.approx(1.5 * math.log2(1.5) - 0.5 * math.log2(0.5))
        assert entropy_g(5.0) == pytest.approx(6 * math.log2(6) - 5 * math.log2(5))

    def test_monotone(self):
        xs = [0.0, 1e-12, 1e-6, 0.1, 0.5, 1.0, 5.0]
        vals = [entropy_g(x) for x in xs]
        assert all(b >= a for a, b in zip(vals, vals[1:]))


class TestSymplectic:
    def test_identity(self):
        assert symplectic_eigs(CovarianceMatrixTM.from_standard(1, 1, 0)) == \
            pytest.approx((1.0, 1.0))

    def test_pure_tmsv(self):
        n1, n2 = symplectic_eigs(tmsv_cm(0.45))
        assert n1 == pytest.approx(1.0, abs=1e-12)
        assert n2 == pytest.approx(1.0, abs=1e-12)

    def test_two_thermal(self):
        assert symplectic_eigs(CovarianceMatrixTM.from_standard(2, 2, 0)) == \
            pytest.approx((2.0, 2.0))

    def test_unphysical_raises(self):
        with pytest.raises(PhysicalityError):
            # strongly correlated beyond physicality
            symplectic_eigs(CovarianceMatrixTM.from_standard(1.0, 1.0, 2.0))

    def test_from_moments_standard_extraction(self):
        chi = 0.3
        rho = tmsv(chi, 40).to_density().normalized()
        mean, cov = moments(rho, ("A", "B"))
        V = CovarianceMatrixTM.from_moments(mean, cov)
        assert V.a == pytest.approx((1 + chi ** 2) / (1 - chi ** 2), abs=1e-8)
        assert V.c == pytest.approx(2 * chi / (1 - chi ** 2), abs=1e-8)
        assert V.residual <= 1e-8
        V.validate()


class TestMutualInfo:
    def test_uncorrelated(self):
        V = CovarianceMatrixTM.from_standard(1.7, 1.3, 0.0)
        assert mutual_info(V, "hom") == 0.0
        assert mutual_info(V, "het") == 0.0

    def test_pure_tmsv_hom_identity(self):
        # a - c^2/b = 1/a for a pure state, so I_hom = log2(a)
        V = tmsv_cm(0.3)
        assert mutual_info(V, "hom") == pytest.approx(math.log2(V.a), rel=1e-12)

    def test_pure_tmsv_het_value(self):
        V = tmsv_cm(0.3)
        # direct substitution collapses to log2((1+a)/2) for pure states
        assert mutual_info(V, "het") == pytest.approx(math.log2((1 + V.a) / 2), rel=1e-12)
        assert mutual_info(V, "het") == pytest.approx(0.1360615, abs=1e-6)


class TestHolevo:
    def test_pure_state_zero(self):
        assert holevo_reverse(tmsv_cm(0.3)) == pytest.approx(0.0, abs=1e-10)

    def test_identity_zero(self):
        assert holevo_reverse(CovarianceMatrixTM.from_standard(1, 1, 0)) == 0.0

    def test_lossy_tmsv_against_fock_oracle(self):
        # independent high-precision route: S(AB) and S(E|B) from the Fock
        # representation of the lossy TMSV
        chi, eta = 0.3, 0.1
        ket = apply_loss(tmsv(chi, 30), "B", eta, "E")
        rho_ab = ket.reduced_density(keep=("A", "B")).normalized()
        s_ab_fock = vn_entropy(rho_ab.mat)
        # conditional state of A given a vacuum heterodyne outcome on B
        lat = rho_ab.lattice_view()
        rho_a_cond = lat[:, 0, :, 0]
        rho_a_cond = rho_a_cond / np.trace(rho_a_cond).real
        s_cond_fock = vn_entropy(rho_a_cond)

        V = direct_transmission_cm(chi, eta)
        n1, n2 = symplectic_eigs(V)
        s_ab_formula = entropy_g((n1 - 1) / 2) + entropy_g((n2 - 1) / 2)
        nu3 = V.a - V.c ** 2 / (1 + V.b)
        s_cond_formula = entropy_g((nu3 - 1) / 2)

        assert s_ab_formula == pytest.approx(s_ab_fock, abs=1e-10)
        assert s_cond_formula == pytest.approx(s_cond_fock, abs=1e-10)
        assert holevo_reverse(V) == pytest.approx(s_ab_fock - s_cond_fock, abs=1e-10)


class TestRawKey:
    def test_uncorrelated_zero(self):
        V = CovarianceMatrixTM.from_standard(1.5, 1.5, 0.0)
        assert raw_key(V, KeyRateInputs()) == 0.0

    def test_pure_tmsv_beta_one(self):
        V = tmsv_cm(0.3)
        key = raw_key(V, KeyRateInputs(beta=1.0, protocol="hom"))
        assert key >= math.log2(1.1978) - 1e-4
        assert key == pytest.approx(math.log2(V.a), rel=1e-10)

    def test_clamped_at_zero(self):
        V = direct_transmission_cm(0.9, 1e-4)
        assert raw_key(V, KeyRateInputs(beta=0.5, protocol="hom")) >= 0.0


class TestEof:
    def test_identity_zero(self):
        assert eof_gaussian(CovarianceMatrixTM.from_standard(1, 1, 0)) == 0.0

    def test_separable_thermal(self):
        assert eof_gaussian(CovarianceMatrixTM.from_standard(3, 2, 0.5)) == 0.0

    def test_pure_tmsv_vs_entropy_oracle(self):
        for chi in (0.2, 0.35, 0.5):
            rho = tmsv(chi, 40).to_density().normalized()
            red = partial_trace(rho, keep={"A"})
            oracle = vn_entropy(red.mat)
            r = math.atanh(chi)
            closed = math.cosh(r) ** 2 * math.log2(math.cosh(r) ** 2) \
                - math.sinh(r) ** 2 * math.log2(math.sinh(r) ** 2)
            assert oracle == pytest.approx(closed, abs=1e-10)
            assert eof_gaussian(tmsv_cm(chi)) == pytest.approx(oracle, abs=1e-6)

    def test_general_matches_symmetric_closed_form(self):
        for chi in (0.25, 0.4):
            for extra in (0.0, 0.3):
                a = (1 + chi ** 2) / (1 - chi ** 2) + extra
                c = 2 * chi / (1 - chi ** 2)
                V = CovarianceMatrixTM.from_standard(a, a, c)
                if pt_min_symplectic(V) >= 1:
                    continue
                sym = eof_gaussian(V, method="symmetric")
                gen = eof_gaussian(V, method="general")
                assert gen == pytest.approx(sym, abs=1e-6)

    def test_asymmetric_lossy_state(self):
        # asymmetric mixed state: EOF positive, below the lossless value,
        # invariant under swapping the two modes
        V = direct_transmission_cm(0.4, 0.6)
        e = eof_gaussian(V)
        assert 0.0 < e < pure_state_entanglement(math.atanh(0.4))
        V_swapped = CovarianceMatrixTM.from_standard(V.b, V.a, V.c)
        assert eof_gaussian(V_swapped) == pytest.approx(e, abs=1e-6)

    def test_monotone_in_loss(self):
        vals = [eof_gaussian(direct_transmission_cm(0.4, eta))
                for eta in (0.9, 0.6, 0.3, 0.1)]
        assert all(a > b for a, b in zip(vals, vals[1:]))


class TestBaselines:
    def test_plob_half(self):
        assert plob(0.5) == pytest.approx(1.0)

    def test_plob_small_eta_asymptote(self):
        eta = 1e-7
        assert plob(eta) == pytest.approx(eta / math.log(2), rel=1e-6)

    def test_plob_322km(self):
        eta = 10 ** (-0.02 * 322)
        assert plob(eta) == pytest.approx(5.24e-7, rel=0.01)

    def test_plob_domain(self):
        with pytest.raises(ValueError):
            plob(0.0)
        with pytest.raises(ValueError):
            plob(1.0)

    def test_direct_key_below_plob(self):
        for L in (50.0, 150.0, 250.0, 322.0):
            eta = 10 ** (-0.02 * L)
            res = direct_transmission_key(L, 0.95)
            assert isinstance(res, DirectTransmissionResult)
            assert res.key <= plob(eta)
            assert res.key > 0.0

    def test_direct_key_monotone_in_distance(self):
        keys = [direct_transmission_key(L, 0.95).key for L in (50, 100, 200, 300)]
        assert all(a > b for a, b in zip(keys, keys[1:]))

    def test_lossless_hits_window_edge(self):
        res = direct_transmission_key(0.0, 1.0)
        assert res.hit_window_edge

    def test_infinite_squeezing_eof_converges(self):
        val = eof_infinite_squeezing(0.1)
        assert val > 0.0
        # more entanglement survives weaker loss
        assert eof_infinite_squeezing(0.5) > val


class TestEofAgainstRotatedDecompositions:
    def _min_violation(self, V, u, starts=30):
        """Best effort to fit a pure state of squeezing u under V, allowing
        arbitrary local rotations and squeezers; returns min lmax(Gamma - V)."""
        from scipy.optimize import minimize as _minimize
        from cvrepeater.metrics import _standard_full

        def rot(t):
            return np.array([[math.cos(t), -math.sin(t)],
                             [math.sin(t), math.cos(t)]])

        def local(t1, v, t2):
            return rot(t1) @ np.diag([math.exp(v), math.exp(-v)]) @ rot(t2)

        ch, sh = math.cosh(2 * u), math.sinh(2 * u)
        tms = np.block([[ch * np.eye(2), sh * np.diag([1.0, -1.0])],
                        [sh * np.diag([1.0, -1.0]), ch * np.eye(2)]])
        full = _standard_full(V.a, V.b, abs(V.c))

        def viol(z):
            big = np.zeros((4, 4))
            big[:2, :2] = local(z[0], z[1], z[2])
            big[2:, 2:] = local(z[3], z[4], z[5])
            gamma = big @ tms @ big.T
            return float(np.linalg.eigvalsh(gamma - full)[-1])

        rng = np.random.default_rng(42)
        best = math.inf
        for _ in range(starts):
            res = _minimize(viol, rng.normal(scale=0.3, size=6),
                            method="Nelder-Mead",
                            options={"maxiter": 600, "xatol": 1e-10,
                                     "fatol": 1e-13})
            best = min(best, float(res.fun))
        return best

    def test_rotations_cannot_beat_the_reported_edge(self):
        base = direct_transmission_cm(0.45, 0.5)
        fat = CovarianceMatrixTM.from_standard(base.a + 0.12, base.b + 0.08, base.c)
        assert symplectic_eigs(fat)[1] > 1.001  # genuinely mixed window case
        for V in (direct_transmission_cm(0.4, 0.35), fat):
            ours = eof_gaussian(V)
            # invert the entanglement to recover the edge squeezing
            lo, hi = 0.0, 5.0
            for _ in range(80):
                mid = 0.5 * (lo + hi)
                if pure_state_entanglement(mid) < ours:
                    lo = mid
                else:
                    hi = mid
            u_edge = 0.5 * (lo + hi)
            # below the edge no pure state fits, rotations included
            assert self._min_violation(V, u_edge - 0.01) > 1e-8
            if symplectic_eigs(V)[1] > 1.001:
                # fat feasibility window: just above the edge the fit exists
                assert self._min_violation(V, u_edge + 0.01) <= 1e-9
            else:
                # tangent class: feasibility is a zero-slack touching point
                assert abs(self._min_violation(V, u_edge)) <= 1e-3
