import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from degcontrol.core_model import Grid, PiecewiseStaticControl, ProblemSpec, example_nonlinearity, \
    legendre_coefficient, zero_nonlinearity
from degcontrol.export import plan_text, read_plan
from degcontrol.solver import GapConstants, SolverConfig, evolve, evolve_linear
from degcontrol.sturm_liouville import assemble, eigen
from degcontrol.synthesis import (PositiveOverlapError, PreconditionError, StageError, SynthesisOptions,
                                  ToleranceNotReached, lift_target, plan_step1, plan_step2, plan_step3,
                                  stage2_shift, synthesize, synthesize_signed)

A = legendre_coefficient()
F = example_nonlinearity(2.0, 0.0)
N = 256


def loose_gap(theta=2.0):
    # a gap constant so small that the gap horizon never binds
    return GapConstants.from_problem(theta, 0.0, 0.0, C_hat=1e-30)


@pytest.fixture(scope="module")
def problem():
    g = Grid(N)
    x = g.centers
    u_d = 2.0 + x**2
    return dict(grid=g, u0=1.0 + np.cos(np.pi * x), u_d=u_d, eps=0.05 * g.norm(u_d))


@pytest.fixture(scope="module")
def plan(problem):
    p = problem
    return synthesize(p["u0"], p["u_d"], p["eps"], A, F, SynthesisOptions(j_max=12))


class TestLift:
    def test_within_half_eps_and_positive(self):
        g = Grid(128)
        raw = np.maximum(g.centers, 0.0)
        for eps in (1e-3, 0.05, 0.5):
            t = lift_target(raw, eps)
            assert g.norm(t.u_d - raw) <= eps / 2
            assert np.min(t.u_d) > 0

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000), st.floats(1e-3, 1.0))
    def test_random_targets(self, seed, eps):
        g = Grid(64)
        raw = np.abs(np.random.default_rng(seed).standard_normal(64))
        t = lift_target(raw, eps)
        assert g.norm(t.u_d - raw) <= eps / 2 and np.min(t.u_d) > 0

    def test_zero_target_lifted(self):
        t = lift_target(np.zeros(32), 0.1)
        assert np.all(t.u_d > 0)


class TestStep1:
    def test_two_mode_closed_form(self):
        g = Grid(N)
        basis = eigen(assemble(A, None, g))
        c1, c2 = 1.0, 0.3
        u0 = c1 * basis.omegas[0] + c2 * basis.omegas[1]
        lam2 = basis.lambdas[1]
        for s in (0.4, 0.1, 0.01):
            t1, alpha1 = plan_step1(u0, s, basis, loose_gap())
            # drift of the free flow is |c2| (1 - exp(-lam2 t))
            expected = -math.log(1 - s / (2 * abs(c2))) / lam2
            assert t1 == pytest.approx(expected, rel=1e-9)
            assert math.exp(alpha1 * t1) == pytest.approx(s, rel=1e-13)

    def test_constant_state_bounded_by_one(self):
        basis = eigen(assemble(A, None, Grid(32)))
        t1, _ = plan_step1(np.ones(32), 0.5, basis, loose_gap())
        assert t1 == 1.0

    def test_gap_horizon_binds(self):
        basis = eigen(assemble(A, None, Grid(32)))
        gc = GapConstants.from_problem(2.0, 0.0, 0.0, C_hat=1.0)
        t1, _ = plan_step1(np.ones(32), 0.5, basis, gc)
        # t^(1/4) <= s^2 / (2 C ||u0||^2) with ||1||^2 = 2
        assert t1 == pytest.approx((0.25 / 4) ** 4, rel=1e-9)

    def test_rejects_bad_scale(self):
        basis = eigen(assemble(A, None, Grid(32)))
        for s in (0.0, 1.0, 2.0):
            with pytest.raises(ValueError):
                plan_step1(np.ones(32), s, basis, loose_gap())

    def test_linear_stage_is_scaled_free_flow(self):
        g = Grid(128)
        basis = eigen(assemble(A, None, g))
        u0 = 1 + np.cos(np.pi * g.centers)
        t1, alpha1 = plan_step1(u0, 0.1, basis, loose_gap())
        ctrl = PiecewiseStaticControl(np.array([t1]), np.zeros((1, 128)), np.array([alpha1]))
        v = evolve_linear(ProblemSpec(g, A, zero_nonlinearity(), u0, ctrl), None, SolverConfig(dt=1e-3)).final
        z = basis.synthesize(np.exp(-basis.lambdas * t1) * basis.coefficients(u0))
        assert g.norm(v - 0.1 * z) <= 1e-10 * g.norm(u0)
        assert g.norm(v - 0.1 * u0) <= 0.1 * 0.1 / 2 * (1 + 1e-9)


class TestStep2:
    def test_shift_value(self):
        assert stage2_shift(2.0, 0.5, 3.0, 2.0) == -4.0
        assert stage2_shift(0.0, 0.5, 0.0, 2.0) == -1.0

    def test_aligned_state_increment(self):
        g = Grid(N)
        u_d = 2 + g.centers**2
        target = lift_target(u_d, 1e-8)
        s, eta = 0.25, 0.5
        st2 = plan_step2(s * target.u_d, target, s, eta, loose_gap(), A)
        assert st2.increment == pytest.approx(eta * math.log(s) / st2.beta, rel=1e-12)
        assert st2.increment > 0
        assert st2.beta <= -1
        assert np.max(st2.alpha2) <= -1 + 1e-12

    def test_nonpositive_overlap(self):
        g = Grid(64)
        target = lift_target(np.ones(64), 0.01)
        with pytest.raises(StageError, match="ground-state coefficient nonpositive"):
            plan_step2(-np.ones(64), target, 0.5, 0.5, loose_gap(), A)

    def test_scale_too_large(self):
        g = Grid(64)
        target = lift_target(np.ones(64), 0.01)
        with pytest.raises(StageError, match="s not small enough"):
            plan_step2(0.01 * 0.5 * target.u_d, target, 0.5, 0.5, loose_gap(), A)

    def test_eta_range(self):
        target = lift_target(np.ones(64), 0.01)
        with pytest.raises(ValueError):
            plan_step2(np.ones(64), target, 0.5, 1.0, loose_gap(), A)

    def test_locks_ground_state(self):
        g = Grid(N)
        u_d = 2 + g.centers**2
        s, eta = 0.125, 0.5
        target = lift_target(u_d, 1e-6)
        st2 = plan_step2(s * target.u_d, target, s, eta, loose_gap(), A)
        b = eigen(assemble(A, st2.alpha2, g))
        assert b.lambdas[0] == pytest.approx(-st2.beta, rel=1e-6)
        v = target.u_d / g.norm(target.u_d)
        assert abs(g.inner(b.omegas[0], v)) >= 1 - 1e-6


class TestStep3:
    def test_identity_and_zero_nonlinearity(self):
        g = Grid(128)
        basis = eigen(assemble(A, None, g))
        target = lift_target(2 + g.centers**2, 0.01)
        s, eta = 0.25, 0.5
        state2 = s**(1 + eta) * target.u_d
        tau, alpha3 = plan_step3(state2, s, eta, target, loose_gap(), 0.1, basis)
        assert math.exp(alpha3 * tau) * s**(1 + eta) == pytest.approx(1.0, rel=1e-13)
        assert 0 < tau <= 1

    def test_unreachable(self):
        g = Grid(64)
        basis = eigen(assemble(A, None, g))
        target = lift_target(np.ones(64), 0.01)
        gc = GapConstants.from_problem(2.0, 0.0, 0.0, C_hat=1e300)
        with pytest.raises(StageError, match="decrease s"):
            plan_step3(target.u_d, 0.5, 0.5, target, gc, 1e-3, basis, tau_min=1e-12)


class TestSynthesize:
    def test_accepted(self, plan, problem):
        assert plan.achieved_error <= problem["eps"]
        assert plan.control.n_segments == 3
        assert plan.attempts[-1].j <= 12
        assert plan.nonnegativity.passed

    def test_signs(self, plan):
        assert plan.alpha1 < 0
        assert plan.alpha3 > 0
        assert np.max(plan.alpha2) <= -1 + 1e-12
        assert np.all(plan.durations > 0)

    def test_identities(self, plan):
        for key, val in plan.identities().items():
            assert val <= 1e-12, key

    def test_closed_loop_replay(self, plan, problem):
        p = problem
        traj = evolve(ProblemSpec(p["grid"], A, F, p["u0"], plan.control), None, SolverConfig())
        np.testing.assert_array_equal(traj.final, plan.trajectory.final)

    def test_export_round_trip(self, plan, problem):
        rec = read_plan(plan_text(plan, {"note": "x"}))
        assert rec.meta == {"note": "x"}
        np.testing.assert_array_equal(rec.durations, plan.durations)
        np.testing.assert_array_equal(rec.alpha2, plan.alpha2)
        c0, c1 = plan.control, rec.control
        np.testing.assert_array_equal(c0.profiles, c1.profiles)
        np.testing.assert_array_equal(c0.shifts, c1.shifts)
        p = problem
        a = evolve(ProblemSpec(p["grid"], A, F, p["u0"], c1), None, SolverConfig()).final
        assert a.tobytes() == plan.trajectory.final.tobytes()

    def test_target_already_close(self):
        g = Grid(128)
        u_d = 1 + 0.3 * np.cos(np.pi * g.centers)
        plan = synthesize(u_d, u_d, 0.5 * g.norm(u_d), A, F)
        assert plan.attempts[-1].j == 0
        assert plan.achieved_error <= 0.5 * g.norm(u_d)

    def test_tolerance_not_reached(self, problem):
        p = problem
        with pytest.raises(ToleranceNotReached) as info:
            synthesize(p["u0"], p["u_d"], 1e-6, A, F, SynthesisOptions(j_max=1))
        assert len(info.value.attempts) == 2

    def test_signed_perturbed_target(self, problem):
        p = problem
        u0 = p["u_d"] + 0.5 * np.sin(np.pi * p["grid"].centers)
        plan = synthesize_signed(u0, p["u_d"], p["eps"], A, F, SynthesisOptions(j_max=12))
        assert plan.achieved_error <= p["eps"]
        assert plan.nonnegativity is None

    def test_signed_sign_changing(self, problem):
        # cosine of the angle to the target is about 0.2, so s goes deep
        p = problem
        u0 = 0.3 + 2 * np.sin(np.pi * p["grid"].centers)
        assert np.min(u0) < 0 < p["grid"].inner(u0, p["u_d"])
        plan = synthesize_signed(u0, p["u_d"], p["eps"], A, F, SynthesisOptions(j_max=40))
        assert plan.achieved_error <= p["eps"]
        for key, val in plan.identities().items():
            assert val <= 1e-12, key


class TestPreconditions:
    def test_negative_u0(self):
        g = Grid(32)
        with pytest.raises(PreconditionError, match="synthesize_signed"):
            synthesize(g.centers.copy(), np.ones(32), 0.1, A, F)

    def test_negative_target(self):
        with pytest.raises(PreconditionError):
            synthesize(np.ones(32), -np.ones(32), 0.1, A, F)

    def test_theta_range(self):
        with pytest.raises(PreconditionError, match="theta"):
            synthesize(np.ones(32), np.ones(32), 0.1, A, example_nonlinearity(1.0, 0.0))

    def test_eps(self):
        with pytest.raises(ValueError):
            synthesize(np.ones(32), np.ones(32), 0.0, A, F)

    def test_zero_state(self):
        with pytest.raises(PreconditionError):
            synthesize(np.zeros(32), np.ones(32), 0.1, A, F)

    def test_orthogonal_overlap(self):
        g = Grid(64)
        with pytest.raises(PositiveOverlapError, match=r"<u0, u_d> > 0 violated"):
            synthesize_signed(np.sin(np.pi * g.centers), 2 + g.centers**2, 0.1, A, F)

    def test_negative_overlap(self):
        g = Grid(64)
        with pytest.raises(PositiveOverlapError):
            synthesize_signed(-np.ones(64), np.ones(64), 0.1, A, F)
