"""Tests for equilibrium finding, local bifurcation curves, and phase classification.

Landmark values below are frozen from independent probe scripts: pitchfork
locations from the resultant quadratic in lambda_plus**2 cross-checked against
det(J) sign changes, Hopf points against eigenvalue crossings, saddle-node
slopes against superradiant root counting on rays, and the periodic-orbit
geometry against direct integration.
"""

import numpy as np
import pytest

from lmglab.model import (
    ChartError,
    ModelParams,
    derive_params,
    lmg_jacobian,
    lmg_rhs,
    parity,
    spherical_rhs,
)
from lmglab.localbif import (
    DegenerateEquilibriumManifoldError,
    NoOrbitError,
    axis_relative_equilibrium,
    bialternate,
    bialternate_test,
    classify_phase,
    hopf_curve,
    hopf_lambda_plus,
    normal_equilibrium,
    pitchfork_curve,
    pitchfork_lambda_plus,
    po_geometry,
    saddlenode_lines,
    spheroid_axes,
    superradiant_equilibria,
)

# Strongly dissipative cavity, down-pumped spins.  xi = 0, eta = 0.2,
# sigma = 0.01, delta = -0.01, gamma_eq = -0.5.
P_K5 = ModelParams(omega=0.0, omega0=1.0, kappa=5.0, lambda_minus=0.5,
                   lambda_plus=1.0, gamma_down=0.01)

# Mixed-coupling set used for the phase diagram and the chaotic window.
# xi = 0.0307692, eta = 0.2461538, sigma = 0.02, gamma_eq = -0.5.
def p_mix(lm, lp, **kw):
    kw.setdefault("gamma_down", 0.02)
    return ModelParams(omega=0.5, omega0=0.2, kappa=4.0,
                       lambda_minus=lm, lambda_plus=lp, **kw)


class TestNormalEquilibrium:
    def test_state_and_residual(self):
        eq = normal_equilibrium(P_K5)
        assert eq.state == pytest.approx([0.0, 0.0, -0.5], abs=1e-14)
        assert np.max(np.abs(lmg_rhs(eq.state, P_K5))) < 1e-12
        assert eq.label == "normal"

    def test_eigenvalues_closed_form_xi_zero(self):
        # For xi = 0 the linearization block-diagonalizes: the transverse
        # pair is -(mu*gamma_eq + sigma) +- i*omega0, the axis mode -2*sigma.
        eq = normal_equilibrium(P_K5)
        ev = np.sort_complex(eq.eigenvalues)
        assert ev[2] == pytest.approx(0.14 + 1j, abs=1e-12)
        assert ev[1] == pytest.approx(0.14 - 1j, abs=1e-12)
        assert ev[0] == pytest.approx(-0.02 + 0j, abs=1e-12)
        assert eq.stability == "saddle(2)"

    def test_sink_below_hopf(self):
        p = ModelParams(omega=0.0, omega0=1.0, kappa=5.0, lambda_minus=0.5,
                        lambda_plus=0.45, gamma_down=0.01)
        eq = normal_equilibrium(p)
        assert eq.stability == "sink"
        re = np.real(np.sort_complex(eq.eigenvalues))
        assert re[2] == pytest.approx(-0.0195, abs=1e-12)

    def test_up_pumped_inversion(self):
        p = ModelParams(omega=0.0, omega0=1.0, kappa=5.0, lambda_minus=0.5,
                        lambda_plus=1.0, gamma_down=0.01, gamma_up=0.03)
        eq = normal_equilibrium(p)
        assert eq.state[2] == pytest.approx(0.25, abs=1e-14)

    def test_saddle_one_in_chaotic_window(self):
        eq = normal_equilibrium(p_mix(1.5, 1.532895))
        re = np.sort(np.real(eq.eigenvalues))
        assert re == pytest.approx([-0.12429495, -0.04, 0.13341105], abs=1e-7)
        assert np.max(np.abs(np.imag(eq.eigenvalues))) < 1e-12
        assert eq.stability == "saddle(1)"

    def test_no_pumping_raises(self):
        p = ModelParams(omega=0.0, omega0=1.0, kappa=5.0, lambda_minus=0.5,
                        lambda_plus=1.0)
        with pytest.raises(DegenerateEquilibriumManifoldError):
            normal_equilibrium(p)

    def test_eigenvectors_satisfy_definition(self):
        eq = normal_equilibrium(P_K5)
        J = lmg_jacobian(eq.state, P_K5)
        for lam, v in zip(eq.eigenvalues, eq.eigenvectors.T):
            assert np.linalg.norm(J @ v - lam * v) < 1e-10

    def test_axis_spectrum_without_pumping(self):
        # with Gamma = 0 every point of the gamma-axis is at rest with
        # eigenvalues -mu*gamma +- i*omega0 and 0
        p = ModelParams(omega=0.0, omega0=1.0, kappa=5.0, lambda_minus=0.5,
                        lambda_plus=1.0)
        ev = np.sort_complex(np.linalg.eigvals(
            lmg_jacobian(np.array([0.0, 0.0, 0.3]), p)))
        assert ev[0] == pytest.approx(-0.09 - 1j, abs=1e-12)
        assert ev[1] == pytest.approx(-0.09 + 1j, abs=1e-12)
        assert ev[2] == pytest.approx(0.0 + 0j, abs=1e-12)


class TestSuperradiantEquilibria:
    def test_absent_below_threshold(self):
        assert superradiant_equilibria(p_mix(1.5, 1.2)) == []

    def test_pair_between_pitchforks(self):
        eqs = superradiant_equilibria(p_mix(1.5, 1.45))
        assert len(eqs) == 2
        assert [e.label for e in eqs] == ["superradiant-plus",
                                          "superradiant-minus"]
        assert all(e.stability == "sink" for e in eqs)
        # exact parity partners
        assert eqs[1].state == pytest.approx(parity(eqs[0].state), abs=1e-10)
        assert eqs[0].state[0] > 0
        for e in eqs:
            assert np.max(np.abs(lmg_rhs(e.state, p_mix(1.5, 1.45)))) < 1e-12

    def test_paired_eigenvalues_agree(self):
        eqs = superradiant_equilibria(p_mix(1.5, 1.45))
        assert np.sort_complex(eqs[0].eigenvalues) == pytest.approx(
            np.sort_complex(eqs[1].eigenvalues), abs=1e-12)

    def test_unstable_pair_above_subcritical_hopf(self):
        eqs = superradiant_equilibria(p_mix(1.5, 1.6))
        assert len(eqs) == 2
        assert all(e.stability == "saddle(2)" for e in eqs)

    def test_states_in_chaotic_window(self):
        eqs = superradiant_equilibria(p_mix(1.5, 1.532895))
        assert len(eqs) == 2
        assert eqs[0].state == pytest.approx(
            [0.32187918, -0.00425454, -0.35338204], abs=1e-7)
        assert all(e.stability == "sink" for e in eqs)

    def test_wedge_two_pairs(self):
        eqs = superradiant_equilibria(p_mix(2.5, 2.24))
        assert len(eqs) == 4
        rho = [np.hypot(e.state[0], e.state[1]) for e in eqs]
        # ordered by descending transverse amplitude, pairs adjacent
        assert rho[0] == pytest.approx(rho[1], abs=1e-10)
        assert rho[2] == pytest.approx(rho[3], abs=1e-10)
        assert rho[0] > rho[2]
        assert rho[0] == pytest.approx(0.35338043, abs=1e-7)
        assert rho[2] == pytest.approx(0.26035570, abs=1e-7)
        assert [e.stability for e in eqs] == ["sink", "sink",
                                              "saddle(1)", "saddle(1)"]
        assert [e.label for e in eqs] == ["superradiant-plus",
                                          "superradiant-minus",
                                          "superradiant-plus",
                                          "superradiant-minus"]

    def test_none_on_resonant_axis_coupling(self):
        # xi = 0 forces dphi/dt = omega0 != 0, so no off-axis rest points.
        assert superradiant_equilibria(P_K5) == []


class TestHopf:
    def test_closed_form_on_axis_cavity(self):
        lp = hopf_lambda_plus(P_K5, 0.5)
        assert lp == pytest.approx(np.sqrt(0.3), abs=1e-10)

    def test_marginal_eigenvalues(self):
        p = ModelParams(omega=0.0, omega0=1.0, kappa=5.0, lambda_minus=0.5,
                        lambda_plus=np.sqrt(0.3), gamma_down=0.01)
        eq = normal_equilibrium(p)
        ev = np.sort_complex(eq.eigenvalues)
        assert ev[2] == pytest.approx(1j, abs=1e-10)
        assert ev[1] == pytest.approx(-1j, abs=1e-10)

    def test_threshold_at_zero_counter_coupling(self):
        pts = hopf_curve(P_K5, [0.0, 0.5])
        assert len(pts) == 2
        assert pts[0][1] == pytest.approx(0.01 / np.sqrt(0.002), abs=1e-10)
        assert pts[1][1] == pytest.approx(np.sqrt(0.3), abs=1e-10)

    def test_mixed_curve_offset(self):
        # lambda_plus**2 - lambda_minus**2 = -sigma**2/(eta*delta) = 0.08125
        pts = hopf_curve(p_mix(1.0, 1.0), [0.5, 0.8, 1.2])
        assert len(pts) == 3
        for lm, lp in pts:
            assert lp == pytest.approx(np.sqrt(lm**2 + 0.08125), rel=1e-10)
        assert pts[1][1] == pytest.approx(0.8492644, abs=1e-6)

    def test_rejects_non_oscillatory_branch(self):
        # beyond lambda_minus ~ 1.2588 the candidate crossing has real
        # eigenvalues, not a complex pair
        assert hopf_lambda_plus(p_mix(1.0, 1.0), 1.25) is not None
        assert hopf_lambda_plus(p_mix(1.0, 1.0), 1.27) is None
        assert hopf_lambda_plus(p_mix(1.0, 1.0), 1.5) is None


class TestPitchfork:
    def test_chaotic_window_bracket(self):
        roots = pitchfork_lambda_plus(p_mix(1.5, 1.0), 1.5)
        assert roots == pytest.approx([1.3801225165, 1.7190875020], rel=1e-8)

    def test_wedge_bracket(self):
        roots = pitchfork_lambda_plus(p_mix(1.5, 1.0), 2.5)
        assert roots == pytest.approx([2.2495255082, 2.7927826603], rel=1e-8)

    def test_absent_at_weak_coupling(self):
        assert pitchfork_lambda_plus(p_mix(1.5, 1.0), 0.5) == []

    def test_absent_for_axis_cavity(self):
        assert pitchfork_lambda_plus(P_K5, 1.5) == []

    def test_jacobian_singular_on_curve(self):
        for lm in (1.5, 2.5):
            for lp in pitchfork_lambda_plus(p_mix(1.5, 1.0), lm):
                eq = normal_equilibrium(p_mix(lm, lp))
                J = lmg_jacobian(eq.state, p_mix(lm, lp))
                assert abs(np.linalg.det(J)) < 1e-10

    def test_curve_matches_scalar(self):
        pts = pitchfork_curve(p_mix(1.5, 1.0), [0.5, 1.5, 2.5])
        assert len(pts) == 4
        assert pts[0] == pytest.approx((1.5, 1.3801225165), rel=1e-8)

    def test_superradiant_birth_consistency(self):
        # equilibrium count flips across the supercritical branch
        assert len(superradiant_equilibria(p_mix(1.5, 1.3795))) == 0
        assert len(superradiant_equilibria(p_mix(1.5, 1.3810))) == 2


class TestSaddleNode:
    def test_mixed_slopes(self):
        lo, hi = saddlenode_lines(p_mix(1.0, 1.0))
        assert lo == pytest.approx(0.8933253400, abs=1e-9)
        assert hi == pytest.approx(1.1477525709, abs=1e-9)

    def test_small_splitting_limit(self):
        p = ModelParams(omega=0.5, omega0=1e-12, kappa=4.0,
                        lambda_minus=1.0, lambda_plus=1.0, gamma_down=0.02)
        lo, hi = saddlenode_lines(p)
        assert lo == pytest.approx(1.0, abs=1e-8)
        assert hi == pytest.approx(1.0, abs=1e-8)

    def test_degenerate_direction_raises(self):
        # xi*sigma = eta*omega0 makes the ray direction ill-defined
        p = ModelParams(omega=0.5, omega0=0.0025, kappa=4.0,
                        lambda_minus=1.0, lambda_plus=1.0, gamma_down=0.02)
        with pytest.raises(DegenerateEquilibriumManifoldError):
            saddlenode_lines(p)

    def test_lower_line_bounds_wedge(self):
        # crossing the lower saddle-node ray changes the root count
        lo, _ = saddlenode_lines(p_mix(1.0, 1.0))
        lm = 2.5
        below = superradiant_equilibria(p_mix(lm, lo * lm - 0.003))
        above = superradiant_equilibria(p_mix(lm, lo * lm + 0.003))
        assert len(below) == 0
        assert len(above) == 4


class TestBialternate:
    def test_eigenvalue_sums_random(self):
        rng = np.random.default_rng(7)
        M = rng.standard_normal((3, 3))
        ev = np.linalg.eigvals(M)
        sums = sorted([ev[0] + ev[1], ev[0] + ev[2], ev[1] + ev[2]],
                      key=lambda z: (z.real, z.imag))
        got = sorted(np.linalg.eigvals(bialternate(M)),
                     key=lambda z: (z.real, z.imag))
        assert got == pytest.approx(sums, abs=1e-10)

    def test_diagonal_matrix(self):
        M = np.diag([1.0, 2.0, 3.0])
        assert sorted(np.linalg.eigvals(bialternate(M))) == \
            pytest.approx([3.0, 4.0, 5.0])
        assert bialternate_test(M) != 0.0

    def test_pure_imaginary_pair(self):
        M = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, -1.0]])
        assert abs(bialternate_test(M)) < 1e-14

    def test_vanishes_at_hopf(self):
        lm = 0.8
        lp = hopf_lambda_plus(p_mix(1.0, 1.0), lm)
        eq = normal_equilibrium(p_mix(lm, lp))
        J = lmg_jacobian(eq.state, p_mix(lm, lp))
        assert abs(bialternate_test(J)) < 1e-12

    def test_nonzero_off_curve(self):
        eq = normal_equilibrium(p_mix(0.8, 0.5))
        J = lmg_jacobian(eq.state, p_mix(0.8, 0.5))
        assert abs(bialternate_test(J)) > 1e-6


class TestPOGeometry:
    def test_frozen_values(self):
        po = po_geometry(P_K5)
        assert 0.0 <= po.theta_po <= np.pi
        assert np.cos(po.theta_po) == pytest.approx(-0.18569533817705186,
                                                    abs=1e-12)
        assert po.r_po == pytest.approx(0.17950549357115013, abs=1e-12)
        assert po.gamma_po == pytest.approx(-1.0 / 30.0, abs=1e-12)
        assert po.max_bx == pytest.approx(0.17638342073763937, abs=1e-12)
        assert po.period == pytest.approx(2.0 * np.pi, abs=1e-12)

    def test_spherical_stationarity(self):
        # the orbit is a rest point of the (r, theta) subsystem
        po = po_geometry(P_K5)
        ds = spherical_rhs(np.array([po.r_po, po.theta_po, 0.3]), P_K5)
        assert abs(ds[0]) < 1e-15
        assert abs(ds[1]) < 1e-14
        assert ds[2] == pytest.approx(1.0)

    def test_integration_confirms_geometry(self):
        from lmglab.integrate import extrema_events, integrate
        from lmglab.model import lmg_vector_field
        po = po_geometry(P_K5)
        s0 = np.array([po.max_bx, 0.0, po.gamma_po])
        tr = integrate(lmg_vector_field(P_K5), s0, (0.0, 40.0),
                       rtol=1e-11, atol=1e-13)
        gam = tr.sol(np.linspace(0.0, 40.0, 2000))[2]
        assert np.max(np.abs(gam - po.gamma_po)) < 1e-9
        maxima = [e for e in extrema_events(tr, component=0) if e.kind == "max"]
        assert maxima[0].value == pytest.approx(po.max_bx, abs=1e-8)
        gaps = np.diff([e.time for e in maxima])
        assert gaps == pytest.approx(po.period, abs=1e-6)

    def test_no_orbit_below_hopf(self):
        p = ModelParams(omega=0.0, omega0=1.0, kappa=5.0, lambda_minus=0.5,
                        lambda_plus=np.sqrt(0.3) - 1e-6, gamma_down=0.01)
        with pytest.raises(NoOrbitError):
            po_geometry(p)

    def test_orbit_shrinks_to_hopf(self):
        p = ModelParams(omega=0.0, omega0=1.0, kappa=5.0, lambda_minus=0.5,
                        lambda_plus=np.sqrt(0.3) + 1e-5, gamma_down=0.01)
        assert 0.0 < po_geometry(p).max_bx < 0.02

    def test_mixed_coupling_raises(self):
        with pytest.raises(ChartError):
            po_geometry(p_mix(0.5, 1.0))

    def test_spheroid_axes(self):
        a, b = spheroid_axes(P_K5)
        assert a == pytest.approx(-0.25, abs=1e-14)
        assert b == pytest.approx(-0.35355339059327373, abs=1e-12)

    def test_orbit_family_on_spheroid(self):
        a, b = spheroid_axes(P_K5)
        g_eq = derive_params(P_K5).gamma_eq
        for lp in np.linspace(0.56, 1.4, 15):
            p = ModelParams(omega=0.0, omega0=1.0, kappa=5.0,
                            lambda_minus=0.5, lambda_plus=lp,
                            gamma_down=0.01)
            po = po_geometry(p)
            lhs = ((po.gamma_po - 0.5 * g_eq) / a) ** 2 + (po.max_bx / b) ** 2
            assert lhs == pytest.approx(1.0, abs=1e-8)

    def test_axis_relative_equilibrium(self):
        r, th = axis_relative_equilibrium(P_K5)
        assert r == pytest.approx(0.5)
        assert th == pytest.approx(np.pi)
        p_up = ModelParams(omega=0.0, omega0=1.0, kappa=5.0, lambda_minus=0.5,
                           lambda_plus=1.0, gamma_up=0.01)
        r, th = axis_relative_equilibrium(p_up)
        assert r == pytest.approx(0.5)
        assert th == pytest.approx(0.0)
        p_bal = ModelParams(omega=0.0, omega0=1.0, kappa=5.0, lambda_minus=0.5,
                            lambda_plus=1.0, gamma_down=0.01, gamma_up=0.01)
        r, th = axis_relative_equilibrium(p_bal)
        assert r == 0.0
        assert np.isnan(th)


class TestClassifyPhase:
    def test_normal_phase(self):
        assert classify_phase(p_mix(0.3, 0.3)) == "N"

    def test_counter_lasing(self):
        assert classify_phase(p_mix(0.5, 1.0)) == "CL"

    def test_superradiant(self):
        assert classify_phase(p_mix(1.5, 1.45)) == "SR"

    def test_coexistence(self):
        assert classify_phase(p_mix(2.5, 2.24)) == "N+SR"

    def test_normal_below_wedge(self):
        assert classify_phase(p_mix(2.5, 2.1)) == "N"

    def test_lasing_up_pumped(self):
        p = ModelParams(omega=0.5, omega0=0.2, kappa=4.0, lambda_minus=1.0,
                        lambda_plus=0.5, gamma_up=0.02)
        assert classify_phase(p) == "L"
