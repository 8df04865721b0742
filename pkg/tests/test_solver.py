import numpy as np
import pytest

from fragflow.coagulation import CoagResult, TruncatedCoagulation, truncated_coag
from fragflow.errors import SolverError
from fragflow.grids import MassGrid, SpatialGrid, StateField, classical_moment, weighted_norm
from fragflow.kernels import AbsorptionRate, CoagulationKernel, DaughterKernel
from fragflow.fragmentation import FragmentationOperator
from fragflow.solver import (
    MildSolveConfig,
    continue_maximal,
    measure_growth_envelope,
    mild_solve,
    predicted_contraction,
    split_solve,
)
from fragflow.transport import AbsorptionAction


def coag_setup(n_m=128, m_max=12.0):
    space = SpatialGrid.line(2, 0.0, 1.0)
    mass = MassGrid.uniform(n_m, m_max)
    u0 = StateField.from_function(space, mass, lambda x, m: np.exp(-m) + 0 * x)
    return space, mass, u0


def shifted_problem(u0, r=1.0, k0=1.0, ball=None):
    """Linear shift semigroup + shifted nonlinearity for constant-kernel
    coagulation (the canonical mild-solve pairing)."""
    b = ball if ball is not None else 2.0 * weighted_norm(u0, r)
    tc = TruncatedCoagulation(CoagulationKernel.constant(k0), ball=b, r=r)
    linear = AbsorptionAction(tc.shift_absorption())
    nonlin = lambda u: truncated_coag(u, tc)
    return tc, linear, nonlin


class TestMildSolve:
    def test_zero_nonlinearity_one_iteration(self):
        space, mass, u0 = coag_setup(n_m=48, m_max=6.0)
        act = AbsorptionAction(AbsorptionRate.linear())
        zero = lambda u: CoagResult(field=u.copy(values=np.zeros_like(u.values)),
                                    overflow_rate=0.0)
        cfg = MildSolveConfig(T=0.4, dt=0.1, r=1.0)
        traj = mild_solve(u0, cfg, act, zero)
        assert traj.extras["picard_iterations"] == 1
        exact = act.apply(0.4, u0)
        diff = weighted_norm(exact.copy(values=exact.values - traj.final.values), 1.0)
        assert diff <= 1e-12

    def test_constant_kernel_number_decay(self):
        # classical oracle: M0(t) = M0(0) / (1 + M0(0) t / 2); verified by
        # substitution into dN/dt = -N^2/2 before use
        space, mass, u0 = coag_setup()
        tc, linear, nonlin = shifted_problem(u0)
        cfg = MildSolveConfig(T=0.5, dt=1 / 64, r=1.0, picard_tol=1e-10,
                              ball=tc.ball)
        traj = mild_solve(u0, cfg, linear, nonlin)
        n0 = classical_moment(u0, 0.0)
        for t, f in zip(traj.times, traj.fields):
            expected = n0 / (1 + n0 * t / 2)
            assert classical_moment(f, 0.0) == pytest.approx(expected, rel=1e-4)

    def test_mass_conserved_through_picard(self):
        space, mass, u0 = coag_setup()
        tc, linear, nonlin = shifted_problem(u0)
        cfg = MildSolveConfig(T=0.25, dt=1 / 64, r=1.0, ball=tc.ball)
        traj = mild_solve(u0, cfg, linear, nonlin)
        m0 = classical_moment(u0, 1.0)
        m_end = classical_moment(traj.final, 1.0) + traj.report.overflow[-1]
        assert m_end == pytest.approx(m0, rel=1e-6)

    def test_picard_iterates_dominate_seed(self):
        # the Duhamel term only adds mass for a positive nonlinearity, so
        # every iterate sits above the linear seed; consecutive iterates are
        # monotone up to the small loss cross-term
        space, mass, u0 = coag_setup(n_m=64)
        tc, linear, nonlin = shifted_problem(u0)
        cfg = MildSolveConfig(T=0.2, dt=0.05, r=1.0, ball=tc.ball)
        traj = mild_solve(u0, cfg, linear, nonlin)
        assert traj.extras["min_iterate_vs_seed"] >= -1e-12
        assert traj.extras["min_iterate_increment"] >= -1e-5

    def test_snapshots_nonnegative(self):
        space, mass, u0 = coag_setup(n_m=64)
        tc, linear, nonlin = shifted_problem(u0)
        cfg = MildSolveConfig(T=0.3, dt=0.05, r=1.0, ball=tc.ball)
        traj = mild_solve(u0, cfg, linear, nonlin)
        for f in traj.fields:
            assert f.values.min() >= -1e-13

    def test_shift_equivalence(self):
        # moving the stabilizing shift between the linear and nonlinear part
        # must not change the solution
        space, mass, u0 = coag_setup(n_m=96)
        tc, linear, nonlin = shifted_problem(u0)
        cfg = MildSolveConfig(T=0.25, dt=1 / 128, r=1.0, picard_tol=1e-11,
                              ball=tc.ball)
        a = mild_solve(u0, cfg, linear, nonlin)

        plain = lambda u: __import__("fragflow.coagulation", fromlist=["coag_apply"]) \
            .coag_apply(u, u, tc.kernel)
        identity = AbsorptionAction(AbsorptionRate.zero())
        b = mild_solve(u0, cfg, identity, plain)
        diff = weighted_norm(a.final.copy(values=a.final.values - b.final.values), 1.0)
        assert diff <= 2e-4 * weighted_norm(a.final, 1.0)

    def test_initial_state_must_fit_ball(self):
        space, mass, u0 = coag_setup(n_m=32)
        tc, linear, nonlin = shifted_problem(u0, ball=0.9 * weighted_norm(u0, 1.0))
        cfg = MildSolveConfig(T=0.1, dt=0.05, r=1.0, ball=tc.ball)
        with pytest.raises(Exception):
            mild_solve(u0, cfg, linear, nonlin)

    def test_contraction_bound_holds(self):
        space, mass, u0 = coag_setup(n_m=64)
        tc, linear, nonlin = shifted_problem(u0)
        consts = tc.constants()
        cfg = MildSolveConfig(T=0.002, dt=0.0005, r=1.0, ball=tc.ball,
                              M_p=1.0, omega_p=0.0, q_prime=0.0,
                              lipschitz=consts["L"])
        assert predicted_contraction(cfg) < 1.0
        traj = mild_solve(u0, cfg, linear, nonlin)
        assert traj.extras["measured_contraction"] <= traj.extras["predicted_contraction"]


class TestGrowthEnvelope:
    def test_absorption_envelope(self):
        space, mass, u0 = coag_setup(n_m=48, m_max=6.0)
        act = AbsorptionAction(AbsorptionRate.constant(0.8))
        M, omega = measure_growth_envelope(act, [u0], np.linspace(0.05, 0.5, 6), r=1.0)
        assert M >= 1.0
        assert omega == pytest.approx(-0.8, abs=0.05)
        for t in (0.1, 0.3):
            ratio = weighted_norm(act.apply(t, u0), 1.0) / weighted_norm(u0, 1.0)
            assert ratio <= M * np.exp(omega * t) * (1 + 1e-9)


class TestSplitSolve:
    def test_single_part_reduces_to_integrator(self):
        space, mass, u0 = coag_setup(n_m=64, m_max=8.0)
        op = FragmentationOperator(mass, AbsorptionRate.linear(),
                                   DaughterKernel.uniform_binary())
        traj = split_solve(u0, 0.5, 0.1, r=1.0, frag=op)
        direct = u0
        for _ in range(5):
            half = op.fragment_step(direct, 0.05)
            direct = op.fragment_step(half, 0.05)
        diff = weighted_norm(traj.final.copy(values=traj.final.values - direct.values), 1.0)
        assert diff <= 1e-12

    def test_split_agrees_with_mild(self):
        space, mass, u0 = coag_setup()
        tc, linear, nonlin = shifted_problem(u0)
        cfg = MildSolveConfig(T=0.5, dt=1 / 64, r=1.0, picard_tol=1e-10, ball=tc.ball)
        mild = mild_solve(u0, cfg, linear, nonlin)
        split = split_solve(u0, 0.5, 1 / 64, r=1.0, coag_kernel=tc.kernel)
        diff = weighted_norm(mild.final.copy(values=mild.final.values - split.final.values), 1.0)
        assert diff / weighted_norm(mild.final, 1.0) <= 5e-3

    def test_split_second_order_in_dt(self):
        space, mass, u0 = coag_setup(n_m=96)
        tc, linear, nonlin = shifted_problem(u0)
        cfg = MildSolveConfig(T=0.4, dt=1 / 256, r=1.0, picard_tol=1e-12, ball=tc.ball)
        ref = mild_solve(u0, cfg, linear, nonlin).final
        errs = []
        for dt in (1 / 16, 1 / 32):
            s = split_solve(u0, 0.4, dt, r=1.0, coag_kernel=tc.kernel).final
            errs.append(weighted_norm(s.copy(values=s.values - ref.values), 1.0))
        assert errs[0] / errs[1] == pytest.approx(4.0, rel=0.5)

    def test_ledger_reconciles(self):
        space, mass, u0 = coag_setup(n_m=96, m_max=10.0)
        op = FragmentationOperator(mass, AbsorptionRate.linear(),
                                   DaughterKernel.uniform_binary())
        traj = split_solve(u0, 0.5, 0.05, r=1.0, frag=op,
                           coag_kernel=CoagulationKernel.constant())
        residuals = traj.report.ledger_residuals()
        assert np.max(np.abs(residuals)) <= 1e-4 * traj.report.mass[0]


class TestContinueMaximal:
    def make_builder(self, k0=1.0, r=1.0, n_steps=4):
        def build(u, ball):
            tc = TruncatedCoagulation(CoagulationKernel.constant(k0), ball=ball, r=r)
            linear = AbsorptionAction(tc.shift_absorption())
            consts = tc.constants()
            cfg = MildSolveConfig(T=0.05, dt=0.05 / n_steps, r=r, ball=ball,
                                  picard_tol=1e-10, lipschitz=consts["L"])
            return cfg, linear, (lambda v: truncated_coag(v, tc))
        return build

    def test_runs_to_horizon_with_oracle(self):
        space, mass, u0 = coag_setup()
        base = MildSolveConfig(T=0.05, dt=0.0125, r=1.0)
        traj = continue_maximal(u0, 0.3, 1.0, self.make_builder(), base)
        assert traj.termination == "horizon"
        n0 = classical_moment(u0, 0.0)
        got = classical_moment(traj.final, 0.0)
        assert got == pytest.approx(n0 / (1 + n0 * 0.15), rel=1e-3)
        assert traj.extras["n_windows"] >= 2

    def test_zero_state_runs_to_horizon(self):
        space, mass, _ = coag_setup(n_m=32)
        z = StateField.zeros(space, mass)
        base = MildSolveConfig(T=0.1, dt=0.05, r=1.0)
        traj = continue_maximal(z, 2.0, 1.0, self.make_builder(), base)
        assert traj.termination == "horizon"
        assert weighted_norm(traj.final, 1.0) == 0.0

    def test_window_chaining_consistency(self):
        space, mass, u0 = coag_setup(n_m=96)
        tol = 1e-10
        ball = 2.0 * weighted_norm(u0, 1.0)
        tc, linear, nonlin = shifted_problem(u0, ball=ball)
        cfg1 = MildSolveConfig(T=0.2, dt=0.2 / 32, r=1.0, picard_tol=tol, ball=ball)
        one = mild_solve(u0, cfg1, linear, nonlin)
        mid = one.fields[16]
        cfg2 = MildSolveConfig(T=0.1, dt=0.1 / 16, r=1.0, picard_tol=tol, ball=ball)
        first = mild_solve(u0, cfg2, linear, nonlin)
        second = mild_solve(first.final, cfg2, linear, nonlin)
        diff = weighted_norm(second.final.copy(values=second.final.values
                                               - one.final.values), 1.0)
        assert diff <= 2 * tol
        mid_diff = weighted_norm(first.final.copy(values=first.final.values - mid.values), 1.0)
        assert mid_diff <= 2 * tol

    def test_suspected_blowup_detected(self):
        # synthetic strong source: the contraction pricing collapses below
        # the window floor while the norm runs away from the last healthy
        # reference, so the run must stop and say so
        space, mass, u0 = coag_setup(n_m=32, m_max=4.0)

        def build(u, ball):
            growth = 80.0

            def source(v):
                return CoagResult(field=v.copy(values=growth * v.values),
                                  overflow_rate=0.0)

            linear = AbsorptionAction(AbsorptionRate.zero())
            cfg = MildSolveConfig(T=0.05, dt=0.0125, r=1.0, ball=ball,
                                  picard_tol=1e-9, lipschitz=25.0)
            return cfg, linear, source

        base = MildSolveConfig(T=0.05, dt=0.0125, r=1.0)
        traj = continue_maximal(u0, 10.0, 1.0, build, base, window_floor=0.05)
        assert traj.termination == "suspected-blowup"
        assert traj.times[-1] < 10.0
