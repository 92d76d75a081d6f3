"""Steppers, the Newton elliptic solver, the truncated system, splittings."""

import numpy as np
import pytest

from bfflow import analysis as an
from bfflow import dynamics as dyn
from bfflow import grid as gr
from bfflow import physics as ph
from bfflow import reference as ref
from bfflow.cli import make_initial_state
from bfflow.grid import Grid, ScalarField, VectorField
from bfflow.krylov import conjugate_gradient
from bfflow.physics import Forcing, MediumMatrix, NonlinearityParams
from bfflow.rng import SplitMix64

LINEAR = NonlinearityParams(0.0, 0.0)
QUINTIC = NonlinearityParams(1.0, 1.0, 0.0, l=2.0)


def small_setup(n=8, diag=(1.0, 2.0)):
    g = Grid(2, n)
    return g, MediumMatrix.diagonal(diag)


class TestSolverConfig:
    def test_cfl_enforced_for_rk4(self):
        g, D = small_setup()
        cfg = dyn.SolverConfig(dt=1.0)
        with pytest.raises(ValueError):
            cfg.validate(g, D)

    def test_semi_implicit_unconstrained(self):
        g, D = small_setup()
        dyn.SolverConfig(dt=1.0, scheme="semi_implicit").validate(g, D)

    def test_unknown_scheme(self):
        with pytest.raises(ValueError):
            dyn.SolverConfig(dt=0.1, scheme="leapfrog")


class TestRhsFull:
    def test_zero_state_zero_forcing(self):
        g, D = small_setup()
        du, dp = dyn.rhs_full(dyn.SimState.zero(g), gr.zeros_vector(g), D, QUINTIC)
        assert np.all(du.values == 0.0) and np.all(dp.values == 0.0)

    def test_definition_unrolls_for_pressure_mode(self):
        g, D = small_setup()
        p = gr.project_mean_zero(gr.sine_mode(g, (1, 1)))
        state = dyn.SimState(gr.zeros_vector(g), p)
        rng = SplitMix64(3)
        gf = VectorField(g, rng.normal((2,) + g.shape))
        du, _ = dyn.rhs_full(state, gf, D, QUINTIC)
        expected = -gr.grad(p).values + gf.values
        assert np.abs(du.values - expected).max() <= 1e-14 * np.abs(expected).max()

    def test_pressure_rate_is_mean_zero(self):
        g, D = small_setup()
        rng = SplitMix64(5)
        for _ in range(20):
            state = dyn.SimState(
                VectorField(g, rng.normal((2,) + g.shape)),
                gr.project_mean_zero(ScalarField(g, rng.normal(g.shape))))
            _, dp = dyn.rhs_full(state, gr.zeros_vector(g), D, QUINTIC)
            assert abs(dp.values.mean()) <= 1e-13


class TestStep:
    def test_zero_fixed_point(self):
        g, D = small_setup()
        cfg = dyn.SolverConfig(dt=1e-3)
        out = dyn.step(dyn.SimState.zero(g), cfg, gr.zeros_vector(g), D, QUINTIC)
        assert np.all(out.u.values == 0.0) and np.all(out.p.values == 0.0)
        assert out.t == pytest.approx(1e-3)

    def test_local_order_against_dense_exponential(self):
        # linear case: one rk4 step vs the matrix exponential, local order >= 4.5
        g, D = small_setup()
        prop = ref.build_propagator(g, D)
        state = make_initial_state(g, "smooth", 1.0, seed=11)
        errs = []
        for dt in (4e-4, 2e-4):
            cfg = dyn.SolverConfig(dt=dt)
            out = dyn.step(state, cfg, gr.zeros_vector(g), D, LINEAR)
            ue, pe = prop.apply(state.u, state.p, dt)
            errs.append(np.sqrt(np.sum((out.u.values - ue.values) ** 2)
                                + np.sum((out.p.values - pe.values) ** 2)))
        order = np.log2(errs[0] / errs[1])
        assert order >= 4.5

    def test_energy_audit_single_step_third_order(self):
        # trapezoid residual of the energy identity: |r| <= C dt^3, C stable
        g, D = small_setup()
        state = make_initial_state(g, "smooth", 1.0, seed=13)
        rng = SplitMix64(17)
        gf = VectorField(g, 0.3 * rng.normal((2,) + g.shape))
        cs = []
        for dt in (4e-4, 2e-4, 1e-4):
            cfg = dyn.SolverConfig(dt=dt)
            traj = dyn.simulate(state, cfg, gf, D, QUINTIC, t_max=dt,
                                collect_work=True)
            audit = an.energy_audit(traj)
            cs.append(abs(float(audit.residual_trap[0])) / dt ** 3)
        assert cs[0] > 0
        assert max(cs) <= 1.6 * min(cs)  # constant stable under halving

    def test_semi_implicit_consistent_with_rk4(self):
        g, D = small_setup()
        state = make_initial_state(g, "smooth", 1.0, seed=19)
        fine = dyn.simulate(state, dyn.SolverConfig(dt=1e-4), gr.zeros_vector(g),
                            D, QUINTIC, t_max=0.05, snapshot_every=500)
        u_ref, p_ref = fine.states[-1]
        errs = []
        for dt in (5e-3, 2.5e-3):
            cfg = dyn.SolverConfig(dt=dt, scheme="semi_implicit", cg_tol=1e-12)
            traj = dyn.simulate(state, cfg, gr.zeros_vector(g), D, QUINTIC,
                                t_max=0.05, snapshot_every=int(0.05 / dt))
            u, p = traj.states[-1]
            errs.append(np.sqrt(np.sum((u - u_ref) ** 2) + np.sum((p - p_ref) ** 2)))
        assert 1.5 <= errs[0] / errs[1] <= 2.6  # first order in dt

    def test_blowup_detected_with_step_count(self):
        g, D = small_setup()
        state = make_initial_state(g, "smooth", 1.0, seed=23)
        # drag-stiff configuration: linear CFL holds, explicit drag does not
        hot = dyn.SimState(VectorField(g, 60.0 * state.u.values), state.p, 0.0)
        cfg = dyn.SolverConfig(dt=2e-3)
        with np.errstate(over="ignore", invalid="ignore"):
            with pytest.raises(dyn.BlowUpError) as err:
                dyn.simulate(hot, cfg, gr.zeros_vector(g), D, QUINTIC, t_max=1.0)
        assert err.value.step_count >= 1

    def test_mean_preserved_along_run(self):
        g, D = small_setup()
        state = make_initial_state(g, "smooth", 1.0, seed=29)
        traj = dyn.simulate(state, dyn.SolverConfig(dt=1e-3), gr.zeros_vector(g),
                            D, QUINTIC, t_max=0.2, snapshot_every=20)
        worst = max(abs(float(p.mean())) for _, p in traj.states)
        assert worst <= 1e-12 * 0.2


class TestLipschitz:
    def test_difference_admits_exponential_envelope(self):
        g, D = small_setup()
        base = make_initial_state(g, "smooth", 1.0, seed=31)
        pert = make_initial_state(g, "smooth", 1.0, seed=32)
        scale = 1e-3 / an.energy_norm(pert.u, pert.p)
        other = dyn.SimState(
            VectorField(g, base.u.values + scale * pert.u.values),
            ScalarField(g, base.p.values + scale * pert.p.values))
        cfg = dyn.SolverConfig(dt=1e-3)
        tr1 = dyn.simulate(base, cfg, gr.zeros_vector(g), D, QUINTIC, 2.0,
                           snapshot_every=100)
        tr2 = dyn.simulate(other, cfg, gr.zeros_vector(g), D, QUINTIC, 2.0,
                           snapshot_every=100)
        ratios = []
        for (u1, p1), (u2, p2) in zip(tr1.states, tr2.states):
            ratios.append(an.energy_norm(VectorField(g, u1 - u2),
                                         ScalarField(g, p1 - p2)))
        ratios = np.array(ratios) / ratios[0]
        C, K = an.fit_envelope(tr1.times, ratios)
        assert np.isfinite(K)
        assert np.max(ratios / (C * np.exp(K * tr1.times))) <= 1.05


class TestEllipticSolver:
    def test_zero_data(self):
        g, _ = small_setup()
        u = dyn.solve_elliptic_u(gr.zeros_scalar(g), gr.zeros_vector(g), QUINTIC)
        assert np.all(u.values == 0.0)

    def test_linear_matches_direct_cg(self):
        g, _ = small_setup()
        rng = SplitMix64(37)
        p = gr.project_mean_zero(ScalarField(g, rng.normal(g.shape)))
        gt = VectorField(g, rng.normal((2,) + g.shape))
        u = dyn.solve_elliptic_u(p, gt, LINEAR, newton_tol=1e-12)
        rhs = gt.values - gr.grad(p).values
        direct = conjugate_gradient(
            lambda x: -gr.lap_array(x, g.h, g.dim), rhs, rtol=1e-13)
        assert np.abs(u.values - direct).max() <= 1e-10

    @pytest.mark.parametrize("amp", [1.0, 10.0])
    def test_quintic_converges_with_quadratic_tail(self, amp):
        g, _ = small_setup(n=16)
        rng = SplitMix64(41)
        p = gr.project_mean_zero(ScalarField(g, rng.normal(g.shape)))
        gt = VectorField(g, rng.normal((2,) + g.shape))
        gt = VectorField(g, gt.values * (amp / gr.norm_l2(gt)))
        u, hist = dyn.solve_elliptic_arrays(p.values, gt.values, QUINTIC, g,
                                            newton_tol=1e-10, newton_max=20)
        assert hist[-1] <= 1e-10
        assert len(hist) <= 20
        tail = [r for r in hist if 1e-9 < r < 1e-1]
        rates = [b / a for a, b in zip(tail, tail[1:])]
        assert all(r2 < r1 for r1, r2 in zip(rates, rates[1:])) or len(rates) <= 1

    def test_weighted_problem_accepts_nonnegative_weight(self):
        g, _ = small_setup()
        rng = SplitMix64(43)
        a = ScalarField(g, rng.uniform(g.shape) * 5.0)
        p = gr.project_mean_zero(ScalarField(g, rng.normal(g.shape)))
        gt = VectorField(g, rng.normal((2,) + g.shape))
        u = dyn.solve_elliptic_u(p, gt, LINEAR, extra_linear=a, newton_tol=1e-11)
        res = (-gr.lap_array(u.values, g.h, g.dim) + a.values * u.values
               + gr.grad(p).values - gt.values)
        assert np.sqrt(g.cell_volume * np.sum(res ** 2)) <= 1e-11
        bad = ScalarField(g, -np.ones(g.shape))
        with pytest.raises(ValueError):
            dyn.solve_elliptic_u(p, gt, LINEAR, extra_linear=bad)

    def test_nonconvergence_reports_history(self):
        g, _ = small_setup()
        rng = SplitMix64(47)
        p = gr.project_mean_zero(ScalarField(g, rng.normal(g.shape)))
        gt = VectorField(g, 10.0 * rng.normal((2,) + g.shape))
        with pytest.raises(dyn.NewtonError) as err:
            dyn.solve_elliptic_arrays(p.values, gt.values, QUINTIC, g,
                                      newton_tol=1e-14, newton_max=1)
        assert len(err.value.history) >= 1


class TestTruncated:
    def test_zero_fixed_point(self):
        g, D = small_setup()
        cfg = dyn.SolverConfig(dt=0.05)
        out = dyn.step_truncated(gr.zeros_scalar(g), Forcing.zero(g), cfg, D, QUINTIC)
        assert np.all(out.values == 0.0)

    def test_linear_matches_operator_exponential(self):
        # oracle: dense assembled pressure operator, exponential + Duhamel
        g, D = small_setup()
        op = an.assemble_operator(g, D)
        rng = SplitMix64(53)
        p0 = gr.project_mean_zero(ScalarField(g, rng.normal(g.shape)))
        gf = VectorField(g, 0.5 * rng.normal((2,) + g.shape))
        cfg = dyn.SolverConfig(dt=0.01, newton_tol=1e-12, cg_tol=1e-13)
        traj = dyn.run_truncated(p0, gf, cfg, D, LINEAR, t_max=0.5,
                                 snapshot_every=50)
        # constant source in reduced coordinates
        minv_g = conjugate_gradient(lambda x: -gr.lap_array(x, g.h, g.dim),
                                    gf.values, rtol=1e-13)
        r = -gr.mean_project_array(
            gr.div_array(D.apply_array(minv_g), g.h, g.dim), g.dim)
        c_r = op.basis.T @ r.ravel()
        c0 = op.basis.T @ p0.values.ravel()
        V, s = op.eigenvectors, op.spectrum
        t = 0.5
        decay = np.exp(-s * t)
        c_t = V @ (decay * (V.T @ c0)) + V @ ((1.0 - decay) / s * (V.T @ c_r))
        p_exact = (op.basis @ c_t).reshape(g.shape)
        err = np.linalg.norm(traj.ps[-1] - p_exact) / np.linalg.norm(p_exact)
        assert err <= 1e-6

    def test_unforced_linear_norm_decays(self):
        g, D = small_setup()
        rng = SplitMix64(59)
        p0 = gr.project_mean_zero(ScalarField(g, rng.normal(g.shape)))
        cfg = dyn.SolverConfig(dt=0.05, newton_tol=1e-12)
        traj = dyn.run_truncated(p0, Forcing.zero(g), cfg, D, LINEAR, t_max=1.0)
        norms = [np.linalg.norm(p) for p in traj.ps]
        assert all(b < a for a, b in zip(norms, norms[1:]))


class TestSplits:
    def _reference(self, g, D, params, seed=61, t_max=2.0, amp=1.0):
        rng = SplitMix64(seed)
        p0 = gr.project_mean_zero(ScalarField(g, amp * rng.normal(g.shape)))
        gf = VectorField(g, 0.5 * rng.normal((2,) + g.shape))
        cfg = dyn.SolverConfig(dt=0.05, newton_tol=1e-12, cg_tol=1e-13)
        return dyn.run_truncated(p0, gf, cfg, D, params, t_max,
                                 snapshot_every=4), cfg, gf

    def test_zero_reference_gives_zero_parts(self):
        g, D = small_setup()
        cfg = dyn.SolverConfig(dt=0.05, newton_tol=1e-12)
        refr = dyn.run_truncated(gr.zeros_scalar(g), Forcing.zero(g), cfg, D,
                                 QUINTIC, t_max=0.5)
        split = dyn.run_split(refr, cfg, D, QUINTIC, L=0.0)
        for (q, v), (r, w) in zip(split.qv, split.rw):
            assert np.abs(q.values).max() <= 1e-12
            assert np.abs(r.values).max() <= 1e-12

    def test_recombination_and_contraction(self):
        g, D = small_setup(n=8)
        reference, cfg, _ = self._reference(g, D, QUINTIC)
        L = ph.monotone_shift(QUINTIC, 10.0)
        split = dyn.run_split(reference, cfg, D, QUINTIC, L)
        assert split.recombination_p <= 1e-8
        assert split.recombination_u <= 1e-8
        qn = np.array([gr.norm_l2(q) ** 2 for q, _ in split.qv])
        fit = an.fit_decay(split.times[qn > 1e-28], qn[qn > 1e-28])
        assert fit.rate < 0.0

    def test_bootstrap_parts(self):
        g, D = small_setup(n=8)
        reference, cfg, _ = self._reference(g, D, QUINTIC, seed=67)
        split = dyn.run_bootstrap_split(reference, cfg, D, QUINTIC)
        assert split.recombination_p <= 1e-8
        p1 = np.array([gr.norm_l2(q) ** 2 for q, _ in split.qv])
        fit = an.fit_decay(split.times[p1 > 1e-28], p1[p1 > 1e-28])
        assert fit.rate < 0.0
        h1 = [gr.spectral_norm(gr.project_mean_zero(r), 1.0) for r, _ in split.rw]
        assert np.isfinite(h1).all()

    def test_bootstrap_zero_reference(self):
        g, D = small_setup()
        cfg = dyn.SolverConfig(dt=0.05, newton_tol=1e-12)
        refr = dyn.run_truncated(gr.zeros_scalar(g), Forcing.zero(g), cfg, D,
                                 QUINTIC, t_max=0.5)
        split = dyn.run_bootstrap_split(refr, cfg, D, QUINTIC)
        for (q, _), (r, _) in zip(split.qv, split.rw):
            assert np.abs(q.values).max() <= 1e-12
            assert np.abs(r.values).max() <= 1e-12


class TestExpSplit:
    def test_identical_trajectories_give_zero(self):
        g, D = small_setup()
        state = make_initial_state(g, "smooth", 1.0, seed=71)
        cfg = dyn.SolverConfig(dt=1e-3)
        tr = dyn.simulate(state, cfg, gr.zeros_vector(g), D, QUINTIC, 0.2,
                          snapshot_every=50)
        es = dyn.run_exp_split(tr, tr, cfg, D, QUINTIC)
        for (uh, phat), (ut, pt) in zip(es.hat, es.tilde):
            assert np.abs(uh.values).max() <= 1e-13
            assert np.abs(ut.values).max() <= 1e-13

    def test_hat_decays_tilde_smooth(self):
        g, D = small_setup()
        base = make_initial_state(g, "smooth", 1.0, seed=73)
        pert = make_initial_state(g, "smooth", 1.0, seed=74)
        scale = 1e-3 / an.energy_norm(pert.u, pert.p)
        other = dyn.SimState(
            VectorField(g, base.u.values + scale * pert.u.values),
            ScalarField(g, base.p.values + scale * pert.p.values))
        cfg = dyn.SolverConfig(dt=1e-3)
        tr1 = dyn.simulate(base, cfg, gr.zeros_vector(g), D, QUINTIC, 2.0,
                           snapshot_every=100)
        tr2 = dyn.simulate(other, cfg, gr.zeros_vector(g), D, QUINTIC, 2.0,
                           snapshot_every=100)
        es = dyn.run_exp_split(tr1, tr2, cfg, D, QUINTIC)
        assert es.recombination <= 1e-8
        hat2 = np.array([an.energy_norm(u, p) ** 2 for u, p in es.hat])
        fit = an.fit_decay(es.times, hat2)
        assert fit.rate < 0.0
        tilde_h1 = [gr.spectral_norm(gr.project_mean_zero(p), 1.0)
                    for _, p in es.tilde]
        assert np.isfinite(tilde_h1).all()
        d0 = an.energy_norm(VectorField(g, tr1.states[0][0] - tr2.states[0][0]),
                            ScalarField(g, tr1.states[0][1] - tr2.states[0][1]))
        C, K = an.fit_envelope(es.times[1:], np.array(tilde_h1[1:]) / d0)
        assert np.isfinite(K)
