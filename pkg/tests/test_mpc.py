import math

import numpy as np
import pytest

from latentmpc.mpc import (
    DecisionVector,
    MpcController,
    MpcProblem,
    ObstaclePrediction,
    SolverDivergedError,
    CostWeights,
    materialize_decision,
    predict_constant_velocity,
    shift_warm_start,
    solve,
    solve_hard_baseline,
    solve_soft_baseline,
    stage_cost,
)
from latentmpc.vehicle import ControlInput, VehicleParams, VehicleState, step_euler

EMPTY_PREDICTION = ObstaclePrediction(np.zeros((0, 51, 2)), np.zeros(0), np.zeros((0, 2)))


def np_wrap(theta):
    w = np.mod(theta, 2.0 * np.pi)
    return np.where(w > np.pi, w - 2.0 * np.pi, w)


def batch_objective(U, x0, problem, z_abs):
    """Independent vectorized implementation of the solver's objective.

    U has shape (B, N, 2); returns (B,) costs.  Deliberately written with
    numpy reductions instead of the solver's reverse-mode kernel.
    """
    p = problem.params
    goal = problem.goal.as_array()
    qx, qu, qdu = problem.weights.q_x, problem.weights.q_u, problem.weights.q_du
    qref, xref = z_abs.q_ref, z_abs.x_ref
    u_prev = problem.u_prev.as_array()
    dt, hw = problem.dt, problem.speed_hinge_weight
    B, N, _ = U.shape
    x = np.full(B, x0.x)
    y = np.full(B, x0.y)
    psi = np.full(B, x0.psi)
    v = np.full(B, x0.v)
    prev = np.tile(u_prev, (B, 1))
    cost = np.zeros(B)

    def state_quad(w):
        res_psi = np_wrap(psi - w[1][2])
        return (
            w[0][0] * (x - w[1][0]) ** 2
            + w[0][1] * (y - w[1][1]) ** 2
            + w[0][2] * res_psi**2
            + w[0][3] * (v - w[1][3]) ** 2
        )

    for k in range(N):
        a = U[:, k, 0]
        d = U[:, k, 1]
        cost += state_quad((qx, goal)) + state_quad((qref, xref))
        cost += qu[0] * a**2 + qu[1] * d**2
        cost += qdu[0] * (a - prev[:, 0]) ** 2 + qdu[1] * (d - prev[:, 1]) ** 2
        vc = v + a * dt
        cost += hw * np.maximum(0.0, p.v_min - vc) ** 2
        cost += hw * np.maximum(0.0, vc - p.v_max) ** 2
        theta = psi + d
        x = x + v * np.cos(theta) * dt
        y = y + v * np.sin(theta) * dt
        psi = np_wrap(psi + (2.0 * v / p.wheelbase) * np.sin(d) * dt)
        v = np.clip(vc, p.v_min, p.v_max)
        prev = U[:, k, :]
    cost += state_quad((qx, goal))
    return cost


def grid_oracle(problem, x0, z, points=9):
    """Two-phase coarse/fine grid search over piecewise-constant controls."""
    p = problem.params
    z_abs = materialize_decision(z, x0.x, problem.weights)
    n = problem.horizon

    def enumerate_grid(vals_a, vals_d):
        per_step = np.stack(np.meshgrid(vals_a, vals_d, indexing="ij"), axis=-1).reshape(-1, 2)
        m = per_step.shape[0]
        idx = np.indices((m,) * n).reshape(n, -1).T
        U = per_step[idx]
        costs = batch_objective(U, x0, problem, z_abs)
        best = int(np.argmin(costs))
        return float(costs[best]), U[best]

    vals_a = np.linspace(p.a_min, p.a_max, points)
    vals_d = np.linspace(-p.delta_max, p.delta_max, points)
    cost1, best1 = enumerate_grid(vals_a, vals_d)
    # phase 2: refine one coarse cell around the incumbent, per step and dim
    span_a = vals_a[1] - vals_a[0]
    span_d = vals_d[1] - vals_d[0]
    best_cost = cost1
    for k in range(n):
        fa = np.clip(np.linspace(best1[k, 0] - span_a, best1[k, 0] + span_a, points), p.a_min, p.a_max)
        fd = np.clip(np.linspace(best1[k, 1] - span_d, best1[k, 1] + span_d, points), -p.delta_max, p.delta_max)
        vals_list_a = [fa if j == k else np.array([best1[j, 0]]) for j in range(n)]
        vals_list_d = [fd if j == k else np.array([best1[j, 1]]) for j in range(n)]
        # refine jointly per step while freezing the others
        per_step = [
            np.stack(np.meshgrid(va, vd, indexing="ij"), axis=-1).reshape(-1, 2)
            for va, vd in zip(vals_list_a, vals_list_d)
        ]
        sizes = [s.shape[0] for s in per_step]
        idx = np.indices(sizes).reshape(n, -1).T
        U = np.stack([per_step[j][idx[:, j]] for j in range(n)], axis=1)
        costs = batch_objective(U, x0, problem, z_abs)
        b = int(np.argmin(costs))
        if costs[b] < best_cost:
            best_cost = float(costs[b])
            best1 = U[b]
    return best_cost


def random_instance(rng, horizon=10):
    goal = VehicleState(float(rng.uniform(5, 30)), float(rng.uniform(-4, 4)), float(rng.uniform(-0.3, 0.3)), 0.0)
    problem = MpcProblem(goal=goal, horizon=horizon)
    x0 = VehicleState(0.0, float(rng.uniform(-4, 4)), float(rng.uniform(-0.4, 0.4)), float(rng.uniform(1.0, 9.0)))
    z = DecisionVector(
        np.array([rng.uniform(-20, 20), rng.uniform(-8, 8), rng.uniform(-1.2, 1.2), rng.uniform(-10, 20)]),
        rng.uniform(0, 20, 4),
    )
    return problem, x0, z


class TestStageCost:
    def test_zero_at_global_minimum(self):
        goal = VehicleState(10.0, 0.0, 0.0, 5.0)
        problem = MpcProblem(goal=goal)
        z = DecisionVector(goal.as_array(), np.array([5.0, 5.0, 5.0, 5.0]))
        c = stage_cost(goal, ControlInput(0.0, 0.0), ControlInput(0.0, 0.0), z, problem)
        assert c == 0.0

    def test_unit_offset_costs_weight(self):
        goal = VehicleState(10.0, 0.0, 0.0, 5.0)
        problem = MpcProblem(goal=goal)
        z = DecisionVector(goal.as_array(), np.zeros(4))
        state = VehicleState(11.0, 0.0, 0.0, 5.0)
        c = stage_cost(state, ControlInput(0.0, 0.0), ControlInput(0.0, 0.0), z, problem)
        assert c == pytest.approx(100.0)

    def test_matches_quadratic_form_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(500):
            goal = VehicleState(*rng.uniform(-10, 10, 4))
            problem = MpcProblem(goal=goal)
            z = DecisionVector(rng.uniform(-10, 10, 4), rng.uniform(0, 20, 4))
            xk = rng.uniform(-10, 10, 4)
            uk = rng.uniform(-2, 2, 2)
            up = rng.uniform(-2, 2, 2)
            got = stage_cost(xk, uk, up, z, problem)
            # naive summation oracle
            want = 0.0
            for j, (q, ref) in enumerate(
                [(problem.weights.q_x, goal.as_array()), (z.q_ref, z.x_ref)]
            ):
                for i in range(4):
                    r = xk[i] - ref[i]
                    if i == 2:
                        r = math.remainder(r, 2.0 * math.pi)
                        if r == -math.pi:
                            r = math.pi
                    want += q[i] * r * r
            for i in range(2):
                want += problem.weights.q_u[i] * uk[i] ** 2
                want += problem.weights.q_du[i] * (uk[i] - up[i]) ** 2
            assert got == pytest.approx(want, rel=1e-12, abs=1e-12)


class TestMaterialize:
    def test_offset_and_proportion(self):
        z = DecisionVector(np.array([5.0, 1.0, 0.2, 8.0]), np.array([0.1, 0.1, 0.1, 0.1]))
        weights = CostWeights()
        out = materialize_decision(z, 40.0, weights)
        assert out.x_ref == pytest.approx([45.0, 1.0, 0.2, 8.0])
        assert out.q_ref == pytest.approx([10.0, 10.0, 10.0, 1.0])


class TestSolve:
    def test_already_at_goal(self):
        goal = VehicleState(100.0, 0.0, 0.0, 0.0)
        problem = MpcProblem(goal=goal)
        z = DecisionVector(np.zeros(4), np.full(4, 0.5))
        sol = solve(problem, goal, z)
        assert sol.cost < 1e-3
        assert np.abs(sol.controls[:, 0]).max() < 0.05
        assert np.abs(sol.controls[:, 1]).max() < 0.01

    def test_reaches_top_speed_on_open_road(self):
        goal = VehicleState(500.0, 0.0, 0.0, 0.0)
        problem = MpcProblem(goal=goal)
        x0 = VehicleState(0.0, 0.0, 0.0, 5.0)
        z = DecisionVector(np.array([20.0, 0.0, 0.0, 10.0]), np.full(4, 10.0))
        sol = solve(problem, x0, z)
        assert sol.states[-1, 3] >= 0.95 * problem.params.v_max

    def test_brute_force_grid_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(5):
            problem, x0, z = random_instance(rng, horizon=3)
            sol = solve(problem, x0, z)
            oracle = grid_oracle(problem, x0, z)
            assert sol.cost <= oracle + 1e-3

    def test_gradient_matches_finite_differences(self):
        from latentmpc.mpc import _make_eval, _EMPTY_RSAFE

        rng = np.random.default_rng(21)
        for _ in range(20):
            problem, x0, z = random_instance(rng, horizon=10)
            z_abs = materialize_decision(z, x0.x, problem.weights)
            n = problem.horizon
            obs_c = np.zeros((0, n + 1, 2))
            ev, _, _ = _make_eval(
                problem, x0.as_array(), np.zeros(2), z_abs.q_ref, z_abs.x_ref,
                obs_c, _EMPTY_RSAFE, np.zeros((0, n)), 0.0, np.zeros((2, n)), 0.0,
            )
            w = rng.normal(0.0, 1.0, (n, 2))
            _, g, _ = ev(w)
            h = 1e-6
            fd = np.zeros_like(g)
            for i in range(n):
                for j in range(2):
                    wp = w.copy()
                    wp[i, j] += h
                    wm = w.copy()
                    wm[i, j] -= h
                    fd[i, j] = (ev(wp)[0] - ev(wm)[0]) / (2.0 * h)
            rel = np.linalg.norm(fd - g) / max(1.0, np.linalg.norm(g))
            assert rel < 1e-6

    def test_cost_trace_nonincreasing(self):
        rng = np.random.default_rng(9)
        for _ in range(10):
            problem, x0, z = random_instance(rng)
            sol = solve(problem, x0, z)
            trace = np.asarray(sol.cost_trace)
            assert np.all(np.diff(trace) <= 0.0)

    def test_single_shooting_consistency(self):
        rng = np.random.default_rng(13)
        for _ in range(10):
            problem, x0, z = random_instance(rng)
            sol = solve(problem, x0, z)
            s = x0
            for k in range(problem.horizon):
                np.testing.assert_allclose(sol.states[k], s.as_array(), atol=1e-12)
                s = step_euler(s, ControlInput(*sol.controls[k]), problem.dt, problem.params)
            np.testing.assert_allclose(sol.states[-1], s.as_array(), atol=1e-12)

    def test_controls_inside_box(self):
        rng = np.random.default_rng(17)
        for _ in range(10):
            problem, x0, z = random_instance(rng)
            sol = solve(problem, x0, z)
            p = problem.params
            assert np.all(sol.controls[:, 0] >= p.a_min) and np.all(sol.controls[:, 0] <= p.a_max)
            assert np.all(np.abs(sol.controls[:, 1]) <= p.delta_max)

    def test_latent_reference_tracking_is_effective(self):
        goal = VehicleState(300.0, 0.0, 0.0, 0.0)
        x0 = VehicleState(0.0, 0.0, 0.0, 6.0)
        y_ref = 3.5
        z_track = DecisionVector(np.array([15.0, y_ref, 0.0, 8.0]), np.array([0.0, 10.0, 0.0, 0.0]))
        z_free = DecisionVector(np.array([15.0, y_ref, 0.0, 8.0]), np.zeros(4))
        sol_track = solve(MpcProblem(goal=goal), x0, z_track)
        sol_free = solve(MpcProblem(goal=goal), x0, z_free)
        dev_track = np.mean(np.abs(sol_track.states[:, 1] - y_ref))
        dev_free = np.mean(np.abs(sol_free.states[:, 1] - y_ref))
        assert dev_track < dev_free

    def test_warm_start_does_not_hurt(self):
        goal = VehicleState(400.0, 0.0, 0.0, 0.0)
        controller = MpcController(MpcProblem(goal=goal))
        z = DecisionVector(np.array([15.0, 0.0, 0.0, 9.0]), np.full(4, 5.0))
        x = VehicleState(0.0, 0.5, 0.05, 3.0)
        wins = 0
        total = 0
        for _ in range(60):
            cold_problem = MpcProblem(goal=goal, u_prev=controller.problem.u_prev)
            cold = solve(cold_problem, x, z, warm_start=None)
            warm = controller.step(x, z)
            total += 1
            if warm.cost_trace[0] <= cold.cost_trace[0] + 1e-9:
                wins += 1
            x = VehicleState.from_array(warm.states[1])
        assert wins / total >= 0.95

    def test_rejects_out_of_range_decision(self):
        problem = MpcProblem(goal=VehicleState(50.0, 0.0, 0.0, 0.0))
        z = DecisionVector(np.array([25.0, 0.0, 0.0, 0.0]), np.zeros(4))
        with pytest.raises(ValueError):
            solve(problem, VehicleState(0, 0, 0, 0), z)

    def test_rejects_nonfinite_x0(self):
        problem = MpcProblem(goal=VehicleState(50.0, 0.0, 0.0, 0.0))
        z = DecisionVector(np.zeros(4), np.zeros(4))
        with pytest.raises(ValueError):
            solve(problem, VehicleState(float("nan"), 0, 0, 0), z)

    def test_diverged_solve_raises(self):
        goal = VehicleState(1e150, 0.0, 0.0, 0.0)
        problem = MpcProblem(goal=goal, weights=CostWeights(q_x=np.array([1e300, 0, 0, 0])))
        z = DecisionVector(np.zeros(4), np.zeros(4))
        with pytest.raises(SolverDivergedError):
            solve(problem, VehicleState(0, 0, 0, 5.0), z)


class TestPrediction:
    def test_uniform_motion(self):
        preds = predict_constant_velocity([(VehicleState(10.0, 0.0, 0.0, 5.0), (2.0, 1.0))], 50, 0.1)
        np.testing.assert_allclose(preds.centers[0, 10], [15.0, 0.0])

    def test_zero_speed_is_static(self):
        preds = predict_constant_velocity([(VehicleState(3.0, 1.0, 0.7, 0.0), (2.0, 1.0))], 20, 0.1)
        assert np.all(preds.centers[0] == preds.centers[0, 0])

    def test_heading_direction(self):
        preds = predict_constant_velocity([(VehicleState(0.0, 0.0, math.pi / 2, 2.0), (2.0, 1.0))], 10, 0.1)
        np.testing.assert_allclose(preds.centers[0, 5], [0.0, 1.0], atol=1e-12)


class TestBaselines:
    def test_soft_without_obstacles_matches_latent(self):
        goal = VehicleState(200.0, 0.0, 0.0, 0.0)
        x0 = VehicleState(0.0, 0.0, 0.0, 5.0)
        z0 = DecisionVector(np.zeros(4), np.zeros(4))
        lat = solve(MpcProblem(goal=goal), x0, z0)
        soft = solve_soft_baseline(MpcProblem(goal=goal, constraint_mode="soft"), x0, EMPTY_PREDICTION)
        assert abs(soft.cost - lat.cost) < 1e-9

    def test_soft_keeps_distance_from_stationary_obstacle(self):
        goal = VehicleState(15.0, 0.0, 0.0, 0.0)
        problem = MpcProblem(goal=goal, constraint_mode="soft")
        x0 = VehicleState(0.0, 0.0, 0.0, 2.0)
        obs_state = VehicleState(10.0, 0.0, 0.0, 0.0)
        preds = predict_constant_velocity([(obs_state, (2.35, 0.95))], problem.horizon, problem.dt)
        sol = solve_soft_baseline(problem, x0, preds)
        r_safe = 2.0 * math.hypot(2.35, 0.95) + problem.safety_margin
        dists = np.hypot(sol.states[:, 0] - 10.0, sol.states[:, 1])
        assert dists.min() > r_safe - 0.2

    def test_soft_ignores_obstacle_beyond_reach(self):
        goal = VehicleState(200.0, 0.0, 0.0, 0.0)
        x0 = VehicleState(0.0, 0.0, 0.0, 5.0)
        preds = predict_constant_velocity([(VehicleState(60.0, 0.0, 0.0, 0.0), (2.35, 0.95))], 50, 0.1)
        with_obs = solve_soft_baseline(MpcProblem(goal=goal, constraint_mode="soft"), x0, preds)
        without = solve_soft_baseline(MpcProblem(goal=goal, constraint_mode="soft"), x0, EMPTY_PREDICTION)
        assert np.abs(with_obs.controls - without.controls).max() < 1e-6
        assert abs(with_obs.cost - without.cost) < 1e-6

    def test_hard_without_obstacles_matches_latent(self):
        goal = VehicleState(200.0, 0.0, 0.0, 0.0)
        x0 = VehicleState(0.0, 0.0, 0.0, 5.0)
        z0 = DecisionVector(np.zeros(4), np.zeros(4))
        lat = solve(MpcProblem(goal=goal), x0, z0)
        hard = solve_hard_baseline(MpcProblem(goal=goal, constraint_mode="hard"), x0, EMPTY_PREDICTION)
        assert abs(hard.cost - lat.cost) < 1e-6

    def test_hard_satisfies_constraints(self):
        goal = VehicleState(15.0, 0.0, 0.0, 0.0)
        problem = MpcProblem(goal=goal, constraint_mode="hard")
        x0 = VehicleState(0.0, 0.0, 0.0, 2.0)
        preds = predict_constant_velocity([(VehicleState(10.0, 0.0, 0.0, 0.0), (2.35, 0.95))], problem.horizon, problem.dt)
        sol = solve_hard_baseline(problem, x0, preds)
        assert sol.max_violation <= 1e-3
        assert sol.converged

    def test_hard_infeasible_start_flagged(self):
        goal = VehicleState(200.0, 0.0, 0.0, 0.0)
        problem = MpcProblem(goal=goal, constraint_mode="hard")
        x0 = VehicleState(0.0, 7.0, 0.0, 2.0)  # off the road
        preds = predict_constant_velocity([(VehicleState(50.0, 0.0, 0.0, 0.0), (2.35, 0.95))], problem.horizon, problem.dt)
        sol = solve_hard_baseline(problem, x0, preds)
        assert not sol.converged
        assert sol.max_violation > 1e-3

    def test_mode_mismatch_rejected(self):
        problem = MpcProblem(goal=VehicleState(50.0, 0.0, 0.0, 0.0), constraint_mode="latent")
        with pytest.raises(ValueError):
            solve_soft_baseline(problem, VehicleState(0, 0, 0, 0), EMPTY_PREDICTION)


class TestWarmStartShift:
    def test_shift(self):
        controls = np.array([[1.0, 0.1], [2.0, 0.2], [3.0, 0.3]])
        shifted = shift_warm_start(controls)
        np.testing.assert_allclose(shifted, [[2.0, 0.2], [3.0, 0.3], [3.0, 0.3]])
