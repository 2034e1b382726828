import math

import numpy as np
import pytest

from cvrepeater.channel import tmsv
from cvrepeater.fock import Mode, MultiModeKet, moments, tensor, vacuum
from cvrepeater.metrics import CovarianceMatrixTM, KeyRateInputs, raw_key, symplectic_eigs
from cvrepeater.scissor import p_nla
from cvrepeater.swap import (ChainConfig, ConvergenceError, DisplacementGains,
                             IntractableConfigError, LinkParams,
                             NestedSwapFamily, PostSelectionRule, SwapOutcome,
                             TwoLinkFamily, _plane_integral, averaged_cm,
                             averaged_state, chain_evaluate, dual_hd_project,
                             ideal_chain_state, link_output_state, nested_swap)


def swapped_literal(chi, eta, g, gamma, N):
    """Literal six-term expansion of the swapped pre-displacement ket.

    Independent of the pipeline; modes ordered (A, D, B, E). Term families:
    both links in the zero-photon branch, link-2 one-photon, link-1
    one-photon (two ways the projector connects it), and both one-photon
    (again two ways).
    """
    out = np.zeros((N + 1, N + 1, 2, N + 1), dtype=complex)
    pref = (1 / math.sqrt(math.pi)) * (1 - chi ** 2) / (g ** 2 + 1) \
        * math.exp(-abs(gamma) ** 2 / 2)
    ge = g * math.sqrt(eta)
    for n in range(N + 1):
        for m in range(N + 1):
            a0 = chi ** n * (1 - eta) ** (n / 2.0)
            a1 = chi ** n * math.sqrt(n) * (1 - eta) ** ((n - 1) / 2.0) if n else 0.0
            b0 = chi ** m * (1 - eta) ** (m / 2.0)
            b1 = chi ** m * math.sqrt(m) * (1 - eta) ** ((m - 1) / 2.0) if m else 0.0
            mg = (-gamma) ** m / math.sqrt(math.factorial(m))
            mg1 = (-gamma) ** (m - 1) / math.sqrt(math.factorial(m - 1)) if m else 0.0
            out[n, n, 0, m] += pref * a0 * b0 * mg
            if m >= 1:
                out[n, n, 1, m - 1] += pref * ge * a0 * b1 * mg
            if n >= 1:
                out[n, n - 1, 0, m] += pref * ge * a1 * b0 * np.conj(gamma) * mg
                if m >= 1:
                    out[n, n - 1, 0, m] += pref * ge * a1 * b0 * math.sqrt(m) * mg1
                    out[n, n - 1, 1, m - 1] += pref * ge * ge * a1 * b1 \
                        * (np.conj(gamma) * mg + math.sqrt(m) * mg1)
    return out


class TestDualHdProject:
    def test_vacuum_overlap(self):
        phi = tmsv(0.4, 5, labels=("A", "B"))
        joint = tensor(phi, vacuum([Mode("F", 4), Mode("C", 4)]))
        out = dual_hd_project(joint, "F", "C", 0.0)
        assert out.labels == ("A", "B")
        assert np.max(np.abs(out.amps - phi.amps / math.sqrt(math.pi))) <= 1e-14

    def test_completeness(self):
        # resolution of identity over the outcome plane, via polar quadrature
        rng = np.random.default_rng(21)
        amps = rng.normal(size=(3, 5, 5)) + 1j * rng.normal(size=(3, 5, 5))
        ket = MultiModeKet([Mode("A", 2), Mode("C", 4), Mode("F", 4)], amps)

        def trace_at(gamma):
            return dual_hd_project(ket, "F", "C", gamma).norm_sq()

        integral = _plane_integral(trace_at, 7.0, 64, False, 32)
        assert integral == pytest.approx(ket.norm_sq(), rel=1e-4)

    def test_outcome_record_accepted(self):
        joint = tensor(tmsv(0.2, 3, labels=("A", "C")), tmsv(0.2, 3, labels=("B", "F")))
        out1 = dual_hd_project(joint, "F", "C", 0.3 + 0.1j)
        out2 = dual_hd_project(joint, "F", "C", SwapOutcome(0.3 + 0.1j, ("F", "C")))
        assert np.allclose(out1.amps, out2.amps)


class TestTwoLinkFamily:
    def test_six_family_audit(self):
        chi, eta, g, N = 0.3, 0.2, 2.5, 5
        fam = TwoLinkFamily(LinkParams(chi, eta, g), LinkParams(chi, eta, g),
                            cutoff=N)
        for gamma in (0.0, 0.4, 0.3 - 0.55j):
            mine = fam.project(gamma)  # modes (A, D, B, E)
            lit = swapped_literal(chi, eta, g, gamma, N)
            assert np.max(np.abs(mine.amps - lit)) <= 1e-14

    def test_gamma_zero_matches_projection_path(self):
        link = LinkParams(0.3, 0.3, 2.0)
        fam = TwoLinkFamily(link, link, cutoff=8)
        rho = fam.rho_at(0.0)
        direct = fam.project(0.0).reduced_density(keep=("A", "B"))
        assert np.max(np.abs(rho.mat - direct.mat)) <= 1e-14

    def test_link_output_state_one_shot(self):
        link = LinkParams(0.3, 0.3, 2.0)
        rho = link_output_state(link, link, 0.2, DisplacementGains(-0.2, 0.2),
                                cutoff=8)
        rho.assert_physical(psd_floor=-1e-9)
        assert rho.labels == ("A", "B")

    def test_physicality_across_outcomes(self):
        link = LinkParams(0.35, 0.15, 4.0)
        fam = TwoLinkFamily(link, link, cutoff=8)
        for gamma in (0.0, 0.2, 0.5j, 0.4 - 0.3j):
            rho = fam.rho_at(gamma)
            assert rho.hermiticity_defect() <= 1e-12
            assert rho.min_eigenvalue() >= -1e-9
            assert rho.trace() > 0

    def test_trace_equals_projected_norm(self):
        link = LinkParams(0.3, 0.2, 3.0)
        fam = TwoLinkFamily(link, link, cutoff=8)
        for gamma in (0.1, 0.3 + 0.2j):
            assert fam.trace_at(gamma) == pytest.approx(
                fam.project(gamma).norm_sq(), rel=1e-12)

    def test_phase_covariance(self):
        link = LinkParams(0.3, 0.1, 3.0)
        fam = TwoLinkFamily(link, link, cutoff=8)
        assert fam.phase_covariant
        r = 0.31
        t0 = fam.trace_at(r)
        for theta in (0.4, 1.1, 2.9):
            assert abs(fam.trace_at(r * np.exp(1j * theta)) - t0) <= 1e-9 * t0
        # rotating the outcome conjugates the displaced output by local
        # photon-number phases, counter-rotating on the left mode
        theta = 1.1
        rho_r = fam.rho_at(r)
        rho_t = fam.rho_at(r * np.exp(1j * theta))
        da, db = rho_r.dims()
        phases = np.kron(np.exp(-1j * theta * np.arange(da)),
                         np.exp(1j * theta * np.arange(db)))
        rotated = (phases[:, None] * rho_r.mat) * phases.conj()[None, :]
        assert np.max(np.abs(rotated - rho_t.mat)) <= 1e-12

    def test_mean_nulling(self):
        link = LinkParams(0.33, 10 ** -2.0, 5.0)
        fam = TwoLinkFamily(link, link)
        for gamma in (fam.probe, 0.25 * np.exp(0.7j)):
            rho = fam.rho_at(gamma)
            mean, _ = moments(rho, ("A", "B"), trace=rho.trace())
            assert np.max(np.abs(mean)) <= 1e-8

    def test_lossless_unit_gain_state_is_pure(self):
        # scissored lossless links swap into an exactly pure state
        fam = TwoLinkFamily(LinkParams(0.3, 1.0, 1.0), LinkParams(0.3, 1.0, 1.0),
                            cutoff=10)
        for gamma in (0.0, 0.3, 0.2 - 0.4j):
            rho = fam.rho_at(gamma).normalized()
            purity = float(np.trace(rho.mat @ rho.mat).real)
            assert abs(purity - 1.0) <= 1e-10

    def test_lossless_unit_gain_cm_gaussian_limit(self):
        # the scissor truncation makes the pure output slightly non-Gaussian;
        # its CM symplectic eigenvalues exceed 1 by ~4 chi^8, so the
        # eigenvalue check at the 1e-6 level applies in the small-chi regime
        fam = TwoLinkFamily(LinkParams(0.1, 1.0, 1.0), LinkParams(0.1, 1.0, 1.0),
                            cutoff=10)
        rho = fam.rho_at(0.0).normalized()
        mean, cov = moments(rho, ("A", "B"))
        n1, n2 = symplectic_eigs(CovarianceMatrixTM.from_moments(mean, cov))
        assert abs(n1 - 1.0) <= 1e-6
        assert abs(n2 - 1.0) <= 1e-6


class TestPsProbability:
    def setup_method(self):
        link = LinkParams(0.3, 0.1, 3.0)
        self.fam = TwoLinkFamily(link, link, cutoff=10)

    def test_endpoints_and_monotonicity(self):
        from cvrepeater.swap import ps_probability
        assert ps_probability(self.fam, PostSelectionRule(0.0)) == 0.0
        vals = [ps_probability(self.fam, PostSelectionRule(gm))
                for gm in (0.1, 0.3, 0.5, 1.0, 2.0)]
        assert all(b > a for a, b in zip(vals, vals[1:]))
        assert ps_probability(self.fam, PostSelectionRule(6.5)) == 1.0
        for v in vals:
            assert 0.0 <= v <= 1.0

    def test_plane_integral_equals_heralding_product(self):
        # total outcome mass equals the product of the two NLA heralding
        # probabilities (completeness of the dual-homodyne measurement)
        den = _plane_integral(self.fam.trace_at, 6.0, 64, True, 1)
        expected = p_nla(0.3, 0.1, 3.0) ** 2
        assert den == pytest.approx(expected, rel=1e-6)

    def test_quadrature_convergence_error(self):
        class Spiky:
            phase_covariant = True

            def trace_at(self, gamma):
                # discontinuous outcome density defeats the quadrature
                return 1.0 if abs(gamma) < 0.37 else 0.0

        from cvrepeater.swap import ps_probability
        with pytest.raises(ConvergenceError):
            ps_probability(Spiky(), PostSelectionRule(0.5), check_tol=1e-9)


class TestAveragedState:
    def test_constant_family(self):
        link = LinkParams(0.3, 0.4, 2.0)
        fam = TwoLinkFamily(link, link, cutoff=6)
        rho0 = fam.rho_at(0.33)

        def constant(gamma):
            return rho0

        avg = averaged_state(constant, PostSelectionRule(0.4))
        assert np.max(np.abs(avg.mat - rho0.normalized().mat)) <= 1e-12

    def test_small_disk_continuity(self):
        link = LinkParams(0.3, 0.2, 2.0)
        fam = TwoLinkFamily(link, link, cutoff=6)
        avg = averaged_state(fam, PostSelectionRule(1e-3))
        rho0 = fam.rho_at(0.0).normalized()
        # embed the gamma = 0 state into the displacement-padded lattice
        da, db = avg.dims()
        ea, eb = rho0.dims()
        lat = np.zeros((da, db, da, db), dtype=complex)
        lat[:ea, :eb, :ea, :eb] = rho0.lattice_view()
        ref = lat.reshape(da * db, da * db)
        assert np.max(np.abs(avg.mat - ref)) <= 1e-5

    def test_average_is_physical_and_standard_form(self):
        link = LinkParams(0.33, 10 ** -1.5, 4.0)
        fam = TwoLinkFamily(link, link)
        avg = averaged_state(fam, PostSelectionRule(0.5))
        avg.assert_physical()
        mean, cov = moments(avg, ("A", "B"))
        V = CovarianceMatrixTM.from_moments(mean, cov)
        assert np.max(np.abs(mean)) <= 1e-10
        V.validate()

    def test_elementwise_cm_close_to_mixture_cm(self):
        # with mean-nulled displacement gains the elementwise-averaged CM and
        # the CM of the averaged state agree closely
        link = LinkParams(0.33, 10 ** -1.5, 4.0)
        fam = TwoLinkFamily(link, link)
        V1 = averaged_cm(fam, PostSelectionRule(0.5))
        avg = averaged_state(fam, PostSelectionRule(0.5))
        mean, cov = moments(avg, ("A", "B"))
        V2 = CovarianceMatrixTM.from_moments(mean, cov)
        assert V1.a == pytest.approx(V2.a, rel=2e-3)
        assert V1.b == pytest.approx(V2.b, rel=2e-3)
        assert V1.c == pytest.approx(V2.c, rel=2e-2)


class TestNestedSwap:
    def tmsv_density(self, chi, cutoff, labels):
        return tmsv(chi, cutoff, labels=labels).to_density().normalized()

    def test_pure_gaussian_inputs_stay_pure(self):
        chi = 0.3
        rho1 = self.tmsv_density(chi, 20, ("A", "B"))
        rho2 = self.tmsv_density(chi, 20, ("M", "N"))
        out = nested_swap(rho1, rho2, 0.0, None).normalized()
        mean, cov = moments(out, ("A", "N"))
        n1, n2 = symplectic_eigs(CovarianceMatrixTM.from_moments(mean, cov))
        assert abs(n1 - 1.0) <= 1e-6
        assert abs(n2 - 1.0) <= 1e-6
        # the swap composes the squeezing parameters
        a_expected = (1 + chi ** 4) / (1 - chi ** 4)
        assert cov[0, 0] == pytest.approx(a_expected, abs=1e-6)

    def test_mirrored_projector_symmetry(self):
        # reading the chain in the mirrored order puts the projector's
        # displacement on the other measured mode; since D(g)^T = D(-g*),
        # both orders give the same output at the conjugated outcome
        import math as _m
        from cvrepeater.fock import displacement_block
        from cvrepeater.swap import _relabel
        link = LinkParams(0.3, 0.25, 2.0)
        fam = TwoLinkFamily(link, link, cutoff=6)
        base = averaged_state(fam, PostSelectionRule(0.4))
        rho1, rho2 = base, _relabel(base, {"A": "M", "B": "N"})
        gamma = 0.23 - 0.31j
        out = nested_swap(rho1, rho2, gamma, None)
        # manual contraction with the displacement on the second measured mode
        dim_b = rho1.modes[1].dim
        dim_m = rho2.modes[0].dim
        kern = displacement_block(-np.conj(gamma), dim_m - 1, dim_b - 1).T \
            / _m.sqrt(_m.pi)
        t1 = np.einsum("abcd,bm,dM->amcM", rho1.lattice_view(),
                       kern.conj(), kern, optimize=True)
        ref = np.einsum("amcM,mnMN->ancN", t1, rho2.lattice_view(),
                        optimize=True)
        dim = rho1.modes[0].dim * rho2.modes[1].dim
        assert np.max(np.abs(ref.reshape(dim, dim) - out.mat)) <= 1e-9

    def test_trace_path_matches_full_contraction(self):
        link = LinkParams(0.3, 0.2, 3.0)
        fam = TwoLinkFamily(link, link, cutoff=6)
        base = averaged_state(fam, PostSelectionRule(0.4))
        from cvrepeater.swap import _relabel
        nested = NestedSwapFamily(base, _relabel(base, {"A": "M", "B": "N"}))
        for gamma in (0.1, 0.35, 0.2 + 0.3j):
            full = nested.rho_at(gamma, displaced=False).trace()
            assert nested.trace_at(gamma) == pytest.approx(full, rel=1e-10)

    def test_mode_collision(self):
        rho = self.tmsv_density(0.2, 4, ("A", "B"))
        with pytest.raises(Exception):
            nested_swap(rho, rho, 0.0, None)


class TestChainEvaluate:
    def test_numeric_restricted_to_two_links(self):
        with pytest.raises(IntractableConfigError):
            ChainConfig(n_levels=2, total_distance_km=100.0, chi=0.3, g=3.0,
                        gamma_max=(0.5, 0.5), bound_mode="numeric")

    def test_gamma_list_length(self):
        with pytest.raises(ValueError):
            ChainConfig(n_levels=2, total_distance_km=100.0, chi=0.3, g=3.0,
                        gamma_max=(0.5,), bound_mode="upper")

    def test_two_link_numeric_equals_lower(self):
        kw = dict(n_levels=1, total_distance_km=200.0, chi=0.32, g=5.0,
                  gamma_max=(0.5,))
        num = chain_evaluate(ChainConfig(bound_mode="numeric", **kw))
        low = chain_evaluate(ChainConfig(bound_mode="lower", **kw))
        assert num.cm.a == pytest.approx(low.cm.a, rel=1e-12)
        assert num.p_ps == low.p_ps

    def test_bound_ordering_four_links(self):
        inputs = KeyRateInputs(beta=0.95, protocol="hom")
        up = chain_evaluate(ChainConfig(
            n_levels=2, total_distance_km=220.0, chi=0.3, g=6.0,
            gamma_max=(0.5, 0.5), bound_mode="upper"))
        lo = chain_evaluate(ChainConfig(
            n_levels=2, total_distance_km=220.0, chi=0.3, g=6.0,
            gamma_max=(0.2, 0.45), bound_mode="lower"))
        assert raw_key(up.cm, inputs) >= raw_key(lo.cm, inputs)
        for p in (*up.p_ps, *lo.p_ps, up.p_nla, lo.p_nla):
            assert 0.0 < p <= 1.0

    def test_upper_cm_matches_ideal_state(self):
        cfg = ChainConfig(n_levels=1, total_distance_km=150.0, chi=0.3, g=4.0,
                          gamma_max=(0.5,), bound_mode="upper")
        res = chain_evaluate(cfg)
        mean, cov = moments(ideal_chain_state(cfg), ("A", "B"))
        V = CovarianceMatrixTM.from_moments(mean, cov)
        assert res.cm.a == pytest.approx(V.a, rel=1e-12)
        assert res.cm.c == pytest.approx(V.c, rel=1e-12)

    def test_raw_key_monotone_in_gamma_max(self):
        # tighter post-selection keeps higher-quality states
        inputs = KeyRateInputs(beta=0.95, protocol="hom")
        keys = []
        for gm in (0.1, 0.5):
            cfg = ChainConfig(n_levels=1, total_distance_km=322.0, chi=0.33,
                              g=25.0, gamma_max=(gm,), bound_mode="numeric")
            keys.append(raw_key(chain_evaluate(cfg).cm, inputs))
        assert keys[0] >= keys[1]
