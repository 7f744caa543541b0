"""Online nonlinear MPC with a latent reference cost, plus baseline variants.

The controller solves, at every decision step, a single-shooting problem
whose only decision variables are the N control inputs.  Controls are kept
inside their box by a tanh reparameterization, states are reconstructed by
the same forward-Euler map the simulator's control model uses, and the
objective gradient is accumulated analytically in reverse through the
rollout.  The latent mode carries no obstacle constraints at all: avoidance
enters purely through the tracked reference state and its weights.  The
soft/hard baselines add explicit obstacle and road-boundary terms around
the same descent engine.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .vehicle import ControlInput, VehicleParams, VehicleState

TWO_PI = 2.0 * math.pi

# Policy-side component ranges of the decision vector:
# (x_ref offset, y_ref, psi_ref, v_ref, four weight proportions).
DECISION_LOW = np.array([-20.0, -10.0, -math.pi / 2.0, -10.0, 0.0, 0.0, 0.0, 0.0])
DECISION_HIGH = np.array([20.0, 10.0, math.pi / 2.0, 20.0, 20.0, 20.0, 20.0, 20.0])


class SolverDivergedError(RuntimeError):
    """Objective or gradient became non-finite; carries the last finite iterate."""

    def __init__(self, message, solution=None):
        super().__init__(message)
        self.solution = solution


@dataclass
class DecisionVector:
    """Reference state plus nonnegative diagonal tracking weights.

    In policy (action) form ``x_ref[0]`` is an offset from the current
    longitudinal position and ``q_ref`` holds proportions of the goal-cost
    diagonal; :func:`materialize_decision` converts to the absolute form the
    cost evaluation uses.
    """

    x_ref: np.ndarray
    q_ref: np.ndarray

    def __post_init__(self):
        self.x_ref = np.asarray(self.x_ref, dtype=float).reshape(4)
        self.q_ref = np.asarray(self.q_ref, dtype=float).reshape(4)
        if np.any(self.q_ref < 0.0):
            raise ValueError("q_ref must be nonnegative")

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.x_ref, self.q_ref])

    @staticmethod
    def from_array(arr) -> "DecisionVector":
        arr = np.asarray(arr, dtype=float).reshape(8)
        return DecisionVector(arr[:4].copy(), arr[4:].copy())


@dataclass
class CostWeights:
    """Diagonal weights of the goal, control-effort, and control-rate costs."""

    q_x: np.ndarray = field(default_factory=lambda: np.array([100.0, 100.0, 100.0, 10.0]))
    q_u: np.ndarray = field(default_factory=lambda: np.array([1.0, 1.0]))
    q_du: np.ndarray = field(default_factory=lambda: np.array([0.1, 0.1]))

    def __post_init__(self):
        self.q_x = np.asarray(self.q_x, dtype=float).reshape(4)
        self.q_u = np.asarray(self.q_u, dtype=float).reshape(2)
        self.q_du = np.asarray(self.q_du, dtype=float).reshape(2)
        if np.any(self.q_x < 0.0) or np.any(self.q_u < 0.0) or np.any(self.q_du < 0.0):
            raise ValueError("cost weights must be nonnegative")


@dataclass
class MpcProblem:
    """Everything that defines one receding-horizon problem except x0 and z."""

    goal: VehicleState
    horizon: int = 50
    dt: float = 0.1
    params: VehicleParams = field(default_factory=VehicleParams)
    weights: CostWeights = field(default_factory=CostWeights)
    u_prev: ControlInput = field(default_factory=lambda: ControlInput(0.0, 0.0))
    constraint_mode: str = "latent"  # latent | soft | hard
    speed_hinge_weight: float = 1e3
    obstacle_weight: float = 1e5
    boundary_weight: float = 1e5
    safety_margin: float = 0.5
    y_bound: float = 5.25
    rel_tol: float = 1e-6
    max_iterations: int = 100
    al_outer_iterations: int = 8
    al_initial_penalty: float = 1e3

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be at least 1")
        if self.dt <= 0.0:
            raise ValueError("dt must be positive")
        if self.constraint_mode not in ("latent", "soft", "hard"):
            raise ValueError(f"unknown constraint_mode {self.constraint_mode!r}")

    @property
    def y_safe(self) -> float:
        return self.y_bound - self.params.half_width


@dataclass
class MpcSolution:
    """Optimal trajectory, control sequence, and solver diagnostics."""

    states: np.ndarray  # (N+1, 4)
    controls: np.ndarray  # (N, 2)
    cost: float
    iterations: int
    converged: bool
    cost_trace: list
    max_violation: float = 0.0

    def diagnostics(self) -> dict:
        return {
            "cost": self.cost,
            "iterations": self.iterations,
            "converged": self.converged,
            "max_violation": self.max_violation,
            "cost_trace": [float(c) for c in self.cost_trace],
        }


@dataclass
class ObstaclePrediction:
    """Predicted obstacle motion over the horizon, one row per obstacle."""

    centers: np.ndarray  # (M, N+1, 2)
    headings: np.ndarray  # (M,)
    half_extents: np.ndarray  # (M, 2) as (half_length, half_width)

    def __post_init__(self):
        self.centers = np.asarray(self.centers, dtype=float)
        self.headings = np.asarray(self.headings, dtype=float)
        self.half_extents = np.asarray(self.half_extents, dtype=float)

    @property
    def count(self) -> int:
        return self.centers.shape[0]

    @property
    def length(self) -> int:
        return self.centers.shape[1]


def predict_constant_velocity(obstacles, horizon: int, dt: float) -> ObstaclePrediction:
    """Advance each obstacle along its current heading at its current speed.

    ``obstacles`` is an iterable of ``(VehicleState, (half_length, half_width))``.
    """
    states = [(s, e) for s, e in obstacles]
    m = len(states)
    centers = np.zeros((m, horizon + 1, 2))
    headings = np.zeros(m)
    extents = np.zeros((m, 2))
    for i, (s, ext) in enumerate(states):
        headings[i] = s.psi
        extents[i] = (ext[0], ext[1])
        ks = np.arange(horizon + 1) * dt * s.v
        centers[i, :, 0] = s.x + ks * math.cos(s.psi)
        centers[i, :, 1] = s.y + ks * math.sin(s.psi)
    return ObstaclePrediction(centers, headings, extents)


def materialize_decision(z: DecisionVector, x_t: float, weights: CostWeights) -> DecisionVector:
    """Convert a policy-form decision vector to absolute reference and weights."""
    x_ref = z.x_ref.copy()
    x_ref[0] = x_ref[0] + x_t
    return DecisionVector(x_ref, z.q_ref * weights.q_x)


def stage_cost(state_k, control_k, control_prev, z_abs: DecisionVector, problem: MpcProblem) -> float:
    """One stage of the objective: goal, effort, rate, and latent reference terms.

    ``z_abs`` is in absolute form (see :func:`materialize_decision`); heading
    residuals are wrapped to (-pi, pi].
    """
    x = np.asarray(state_k, dtype=float) if not isinstance(state_k, VehicleState) else state_k.as_array()
    u = np.asarray(control_k, dtype=float) if not isinstance(control_k, ControlInput) else control_k.as_array()
    up = np.asarray(control_prev, dtype=float) if not isinstance(control_prev, ControlInput) else control_prev.as_array()
    goal = problem.goal.as_array()
    qx, qu, qdu = problem.weights.q_x, problem.weights.q_u, problem.weights.q_du

    def quad(res, w):
        return float(np.sum(w * res * res))

    res_goal = x - goal
    res_goal[2] = _wrap_py(res_goal[2])
    res_ref = x - z_abs.x_ref
    res_ref[2] = _wrap_py(res_ref[2])
    du = u - up
    return quad(res_goal, qx) + quad(u, qu) + quad(du, qdu) + quad(res_ref, z_abs.q_ref)


def _wrap_py(theta: float) -> float:
    w = theta % TWO_PI
    if w > math.pi:
        w -= TWO_PI
    return w


# ---------------------------------------------------------------------------
# numba kernels
# ---------------------------------------------------------------------------


@njit(cache=True)
def _wrap(theta):
    w = theta % TWO_PI
    if w > math.pi:
        w -= TWO_PI
    return w


@njit(cache=True)
def _objective_grad(
    controls,
    x0,
    u_prev,
    dt,
    wheelbase,
    v_min,
    v_max,
    q_x,
    q_u,
    q_du,
    q_ref,
    x_ref,
    goal,
    hinge_w,
    obs_c,
    r_safe,
    lam_obs,
    mu_obs,
    y_safe,
    lam_bnd,
    mu_bnd,
    grad_u,
    states,
):
    """Objective value and gradient w.r.t. the control sequence.

    The rollout replicates the simulator's Euler control model exactly
    (heading wrap, speed clamp); obstacle and boundary terms use the
    Powell-Hestenes-Rockafellar form so lam=0 with mu=2*weight reduces to a
    plain quadratic hinge penalty and lam>0 implements the augmented
    Lagrangian of the hard-constrained baseline.
    """
    n = controls.shape[0]
    n_obs = obs_c.shape[0]

    vc = np.empty(n)  # pre-clamp speed candidates
    s_ind = np.empty(n)  # clamp pass-through indicator
    states[0, 0] = x0[0]
    states[0, 1] = x0[1]
    states[0, 2] = x0[2]
    states[0, 3] = x0[3]
    for k in range(n):
        x = states[k, 0]
        y = states[k, 1]
        psi = states[k, 2]
        v = states[k, 3]
        a = controls[k, 0]
        delta = controls[k, 1]
        theta = psi + delta
        states[k + 1, 0] = x + v * math.cos(theta) * dt
        states[k + 1, 1] = y + v * math.sin(theta) * dt
        states[k + 1, 2] = _wrap(psi + (2.0 * v / wheelbase) * math.sin(delta) * dt)
        cand = v + a * dt
        vc[k] = cand
        if cand < v_min:
            cand = v_min
        if cand > v_max:
            cand = v_max
        states[k + 1, 3] = cand
        s_ind[k] = 1.0 if (v_min <= vc[k] <= v_max) else 0.0

    cost = 0.0
    gx = np.zeros((n + 1, 4))
    gu = np.zeros((n, 2))

    # stage costs k = 0..N-1
    for k in range(n):
        for j in range(4):
            r = states[k, j] - goal[j]
            if j == 2:
                r = _wrap(r)
            cost += q_x[j] * r * r
            gx[k, j] += 2.0 * q_x[j] * r
            r = states[k, j] - x_ref[j]
            if j == 2:
                r = _wrap(r)
            cost += q_ref[j] * r * r
            gx[k, j] += 2.0 * q_ref[j] * r
        for j in range(2):
            u = controls[k, j]
            cost += q_u[j] * u * u
            gu[k, j] += 2.0 * q_u[j] * u
            prev = u_prev[j] if k == 0 else controls[k - 1, j]
            d = u - prev
            cost += q_du[j] * d * d
            gu[k, j] += 2.0 * q_du[j] * d
            if k > 0:
                gu[k - 1, j] -= 2.0 * q_du[j] * d
        # speed bound hinge on the pre-clamp candidate of this transition
        lo_gap = v_min - vc[k]
        if lo_gap > 0.0:
            cost += hinge_w * lo_gap * lo_gap
            gx[k, 3] -= 2.0 * hinge_w * lo_gap
            gu[k, 0] -= 2.0 * hinge_w * lo_gap * dt
        hi_gap = vc[k] - v_max
        if hi_gap > 0.0:
            cost += hinge_w * hi_gap * hi_gap
            gx[k, 3] += 2.0 * hinge_w * hi_gap
            gu[k, 0] += 2.0 * hinge_w * hi_gap * dt

    # terminal goal cost on x_N
    for j in range(4):
        r = states[n, j] - goal[j]
        if j == 2:
            r = _wrap(r)
        cost += q_x[j] * r * r
        gx[n, j] += 2.0 * q_x[j] * r

    # obstacle and boundary terms on x_1..x_N (PHR form)
    if mu_obs > 0.0:
        for m in range(n_obs):
            for k in range(1, n + 1):
                dx = states[k, 0] - obs_c[m, k, 0]
                dy = states[k, 1] - obs_c[m, k, 1]
                dist = math.sqrt(dx * dx + dy * dy)
                if dist < 1e-9:
                    dist = 1e-9
                c = dist - r_safe[m]
                t = lam_obs[m, k - 1] - mu_obs * c
                cost -= lam_obs[m, k - 1] * lam_obs[m, k - 1] / (2.0 * mu_obs)
                if t > 0.0:
                    cost += t * t / (2.0 * mu_obs)
                    # dcost/dc = -t
                    gx[k, 0] -= t * dx / dist
                    gx[k, 1] -= t * dy / dist
    if mu_bnd > 0.0:
        for k in range(1, n + 1):
            yk = states[k, 1]
            c_left = y_safe - yk
            t = lam_bnd[0, k - 1] - mu_bnd * c_left
            cost -= lam_bnd[0, k - 1] * lam_bnd[0, k - 1] / (2.0 * mu_bnd)
            if t > 0.0:
                cost += t * t / (2.0 * mu_bnd)
                gx[k, 1] += t
            c_right = yk + y_safe
            t = lam_bnd[1, k - 1] - mu_bnd * c_right
            cost -= lam_bnd[1, k - 1] * lam_bnd[1, k - 1] / (2.0 * mu_bnd)
            if t > 0.0:
                cost += t * t / (2.0 * mu_bnd)
                gx[k, 1] -= t

    # reverse sweep through the rollout
    lam0 = gx[n, 0]
    lam1 = gx[n, 1]
    lam2 = gx[n, 2]
    lam3 = gx[n, 3]
    for k in range(n - 1, -1, -1):
        v = states[k, 3]
        delta = controls[k, 1]
        theta = states[k, 2] + delta
        sin_t = math.sin(theta)
        cos_t = math.cos(theta)
        s = s_ind[k]
        gu[k, 0] += lam3 * s * dt
        gu[k, 1] += (-lam0 * v * sin_t + lam1 * v * cos_t) * dt + lam2 * (
            2.0 * v / wheelbase
        ) * math.cos(delta) * dt
        n0 = gx[k, 0] + lam0
        n1 = gx[k, 1] + lam1
        n2 = gx[k, 2] + (-lam0 * v * sin_t + lam1 * v * cos_t) * dt + lam2
        n3 = (
            gx[k, 3]
            + lam0 * cos_t * dt
            + lam1 * sin_t * dt
            + lam2 * (2.0 / wheelbase) * math.sin(delta) * dt
            + lam3 * s
        )
        lam0, lam1, lam2, lam3 = n0, n1, n2, n3

    for k in range(n):
        grad_u[k, 0] = gu[k, 0]
        grad_u[k, 1] = gu[k, 1]
    return cost


@njit(cache=True)
def _constraint_gaps(states, obs_c, r_safe, y_safe, c_obs, c_bnd):
    """Inequality gaps (nonnegative when satisfied) for x_1..x_N."""
    n = states.shape[0] - 1
    for m in range(obs_c.shape[0]):
        for k in range(1, n + 1):
            dx = states[k, 0] - obs_c[m, k, 0]
            dy = states[k, 1] - obs_c[m, k, 1]
            c_obs[m, k - 1] = math.sqrt(dx * dx + dy * dy) - r_safe[m]
    for k in range(1, n + 1):
        c_bnd[0, k - 1] = y_safe - states[k, 1]
        c_bnd[1, k - 1] = states[k, 1] + y_safe


# ---------------------------------------------------------------------------
# solver driver
# ---------------------------------------------------------------------------

_EMPTY_OBS = np.zeros((0, 2, 2))
_EMPTY_RSAFE = np.zeros(0)


def _unsquash(controls, u_lo, u_hi):
    mid = 0.5 * (u_lo + u_hi)
    half = 0.5 * (u_hi - u_lo)
    z = np.clip((controls - mid) / half, -1.0 + 1e-9, 1.0 - 1e-9)
    return np.arctanh(z)


def _line_search(eval_fn, w, cost, direction, gd, t0):
    """Armijo search with one quadratic-interpolation refinement.

    Returns ``(t, cost, grad, aux)`` for an accepted step or ``None``.  The
    interpolation step makes the 1-D minimization near exact on quadratic
    stretches, which is what lets the conjugate directions pay off.
    """
    t = t0
    for _ in range(48):
        c1, g1, aux1 = eval_fn(w + t * direction)
        if math.isfinite(c1) and c1 <= cost + 1e-4 * t * gd:
            q = (c1 - cost - gd * t) / (t * t)
            if q > 0.0:
                ts = -gd / (2.0 * q)
                if 0.05 * t <= ts <= 20.0 * t and abs(ts - t) > 1e-14:
                    c2, g2, aux2 = eval_fn(w + ts * direction)
                    if math.isfinite(c2) and c2 < c1 and c2 <= cost + 1e-4 * ts * gd:
                        return ts, c2, g2, aux2
            return t, c1, g1, aux1
        if math.isfinite(c1):
            q = (c1 - cost - gd * t) / (t * t)
            if q > 0.0:
                ts = -gd / (2.0 * q)
                t = min(max(ts, 0.1 * t), 0.5 * t)
                continue
        t *= 0.5
    return None


def _descend(eval_fn, w0, max_iter, rel_tol):
    """First-order descent with an interpolating backtracking line search.

    Polak-Ribiere+ conjugate directions with automatic steepest-descent
    restarts; a step is only ever accepted when it decreases the cost, so
    the recorded trace is nonincreasing by construction.  Stopping uses the
    relative cost decrease with a short patience window, since conjugate
    steps alternate small and large decreases.
    """
    w = w0.copy()
    cost, grad, aux = eval_fn(w)
    if not (math.isfinite(cost) and np.all(np.isfinite(grad))):
        raise SolverDivergedError("non-finite objective at the initial iterate")
    trace = [cost]
    best = (w, cost, aux)
    direction = -grad
    alpha = None
    converged = False
    iterations = 0
    stall = 0
    for _ in range(max_iter):
        iterations += 1
        g2 = float(np.dot(grad.ravel(), grad.ravel()))
        if g2 <= 1e-20:
            converged = True
            break
        gd = float(np.dot(grad.ravel(), direction.ravel()))
        if gd >= 0.0:
            direction = -grad
            gd = -g2
        if alpha is None:
            alpha = 1.0 / (1.0 + math.sqrt(g2))
        step = _line_search(eval_fn, w, cost, direction, gd, alpha * 2.0)
        if step is None and gd != -g2:
            direction = -grad
            gd = -g2
            step = _line_search(eval_fn, w, cost, direction, gd, alpha * 2.0)
        if step is None:
            converged = True
            break
        trial, c_try, g_try, aux_try = step
        if not np.all(np.isfinite(g_try)):
            raise SolverDivergedError("non-finite gradient", solution=best)
        w = w + trial * direction
        alpha = trial
        rel_dec = (cost - c_try) / max(1.0, abs(cost))
        beta = max(0.0, float(np.dot(g_try.ravel(), (g_try - grad).ravel())) / g2)
        direction = -g_try + beta * direction
        cost, grad, aux = c_try, g_try, aux_try
        best = (w, cost, aux)
        trace.append(cost)
        stall = stall + 1 if rel_dec < rel_tol else 0
        if stall >= 5:
            converged = True
            break
    return w, cost, aux, trace, converged, iterations


def _make_eval(problem, x0_arr, u_prev_arr, q_ref, x_ref, obs_c, r_safe, lam_obs, mu_obs, lam_bnd, mu_bnd):
    n = problem.horizon
    p = problem.params
    u_lo = np.array([p.a_min, -p.delta_max])
    u_hi = np.array([p.a_max, p.delta_max])
    goal = problem.goal.as_array()
    qx, qu, qdu = problem.weights.q_x, problem.weights.q_u, problem.weights.q_du

    mid = 0.5 * (u_lo + u_hi)
    half = 0.5 * (u_hi - u_lo)

    def eval_controls(controls):
        grad_u = np.empty((n, 2))
        states = np.empty((n + 1, 4))
        cost = _objective_grad(
            controls,
            x0_arr,
            u_prev_arr,
            problem.dt,
            p.wheelbase,
            p.v_min,
            p.v_max,
            qx,
            qu,
            qdu,
            q_ref,
            x_ref,
            goal,
            problem.speed_hinge_weight,
            obs_c,
            r_safe,
            lam_obs,
            mu_obs,
            problem.y_safe,
            lam_bnd,
            mu_bnd,
            grad_u,
            states,
        )
        return cost, grad_u, states

    def eval_w(w):
        t = np.tanh(w)
        controls = mid + half * t
        cost, grad_u, states = eval_controls(controls)
        grad_w = grad_u * (half * (1.0 - t * t))
        return cost, grad_w, (states, controls)

    return eval_w, eval_controls, u_lo, u_hi


def _initial_w(problem, warm_start, u_lo, u_hi):
    n = problem.horizon
    if warm_start is None:
        controls = np.zeros((n, 2))
    else:
        controls = np.asarray(warm_start, dtype=float).reshape(n, 2)
        controls = np.clip(controls, u_lo, u_hi)
    return _unsquash(controls, u_lo, u_hi)


def _cold_start_candidates(problem):
    # The wrapped-heading and reference quadratics are multimodal (left/right
    # turn basins, brake-vs-drive basins); a cold solve explores a fixed set
    # of starting profiles and keeps the best descent result.
    n = problem.horizon
    p = problem.params
    coast = np.zeros((n, 2))
    left = np.zeros((n, 2))
    left[:, 1] = 0.8 * p.delta_max
    right = np.zeros((n, 2))
    right[:, 1] = -0.8 * p.delta_max
    brake = np.zeros((n, 2))
    brake[:, 0] = 0.5 * p.a_min
    brake_left = brake.copy()
    brake_left[:, 1] = 0.8 * p.delta_max
    brake_right = brake.copy()
    brake_right[:, 1] = -0.8 * p.delta_max
    return [coast, left, right, brake, brake_left, brake_right]


def _snap_to_bounds(controls, u_lo, u_hi):
    snapped = controls.copy()
    for j in range(2):
        tol = 0.05 * (u_hi[j] - u_lo[j])
        col = snapped[:, j]
        col[col - u_lo[j] < tol] = u_lo[j]
        col[u_hi[j] - col < tol] = u_hi[j]
    return snapped


def _optimize(problem, eval_w, eval_controls, start, u_lo, u_hi):
    """Descent from one start plus a bound polish.

    The tanh squash approaches the control box asymptotically, so optima on
    a box face are reached only in the w -> inf limit; after the descent
    stalls, snap near-bound controls onto the face, keep the snap only when
    it lowers the cost, and continue the descent from there.
    """
    w0 = _initial_w(problem, start, u_lo, u_hi)
    w, cost, aux, trace, converged, iterations = _descend(
        eval_w, w0, problem.max_iterations, problem.rel_tol
    )
    for _ in range(3):
        controls = aux[1]
        snapped = _snap_to_bounds(controls, u_lo, u_hi)
        if np.array_equal(snapped, controls):
            break
        c_snap, _, states_snap = eval_controls(snapped)
        if not (math.isfinite(c_snap) and c_snap < cost):
            break
        cost, aux = c_snap, (states_snap, snapped)
        trace.append(cost)
        w2 = _unsquash(snapped, u_lo, u_hi)
        _, c3, aux3, _, _, it3 = _descend(eval_w, w2, problem.max_iterations, problem.rel_tol)
        iterations += it3
        if c3 < cost:
            cost, aux = c3, aux3
            trace.append(cost)
        else:
            break
    return cost, aux, trace, converged, iterations


def _finish(problem, cost, aux, trace, converged, iterations, max_violation=0.0):
    states, controls = aux
    return MpcSolution(
        states=states,
        controls=controls,
        cost=float(cost),
        iterations=iterations,
        converged=converged,
        cost_trace=trace,
        max_violation=float(max_violation),
    )


def _validate_x0(x0: VehicleState):
    arr = x0.as_array()
    if not np.all(np.isfinite(arr)):
        raise ValueError("x0 must be finite")
    return arr


def solve(problem: MpcProblem, x0: VehicleState, z: DecisionVector, warm_start=None) -> MpcSolution:
    """Solve the latent-mode problem for one decision step.

    ``z`` is in policy form (longitudinal offset, weight proportions) and
    must lie inside the decision-variable ranges; the absolute reference is
    formed against ``x0``.  ``warm_start`` is an (N, 2) control sequence,
    typically the previous solution shifted by one step.
    """
    x0_arr = _validate_x0(x0)
    z_arr = z.as_array()
    if np.any(z_arr < DECISION_LOW - 1e-9) or np.any(z_arr > DECISION_HIGH + 1e-9):
        raise ValueError("decision vector outside its value ranges")
    z_abs = materialize_decision(z, x0.x, problem.weights)

    obs_c = np.zeros((0, problem.horizon + 1, 2))
    lam_obs = np.zeros((0, problem.horizon))
    lam_bnd = np.zeros((2, problem.horizon))
    eval_w, eval_controls, u_lo, u_hi = _make_eval(
        problem, x0_arr, problem.u_prev.as_array(), z_abs.q_ref, z_abs.x_ref,
        obs_c, _EMPTY_RSAFE, lam_obs, 0.0, lam_bnd, 0.0,
    )
    if warm_start is not None:
        starts = [np.asarray(warm_start, dtype=float).reshape(problem.horizon, 2)]
    else:
        starts = _cold_start_candidates(problem)
    result = None
    for start in starts:
        cost, aux, trace, converged, iterations = _optimize(
            problem, eval_w, eval_controls, start, u_lo, u_hi
        )
        if result is None or cost < result[0]:
            result = (cost, aux, trace, converged, iterations)
    cost, aux, trace, converged, iterations = result
    return _finish(problem, cost, aux, trace, converged, iterations)


def _cold_start_for(problem: MpcProblem, x0_arr, obs_c, r_safe, warm_start):
    # A cold solve that coasts into an obstacle splits the trajectory across
    # it and strands the descent in a plow-through local minimum; start from
    # a braking profile instead so the safe basin is the initial one.  Only
    # do so when an obstacle is reachable within the horizon, so unreachable
    # obstacles leave the solve bit-identical to the obstacle-free one.
    if warm_start is not None or obs_c.shape[0] == 0:
        return warm_start
    reach = problem.horizon * problem.dt * problem.params.v_max
    gaps = np.hypot(obs_c[:, :, 0] - x0_arr[0], obs_c[:, :, 1] - x0_arr[1]) - r_safe[:, None]
    if float(np.min(gaps)) > reach:
        return warm_start
    brake = np.zeros((problem.horizon, 2))
    brake[:, 0] = 0.5 * problem.params.a_min
    return brake


def _obstacle_arrays(problem: MpcProblem, predictions: ObstaclePrediction):
    if predictions.length < problem.horizon + 1:
        raise ValueError("obstacle prediction shorter than the horizon")
    p = problem.params
    ego_half_diag = math.hypot(p.half_length, p.half_width)
    obs_c = np.ascontiguousarray(predictions.centers[:, : problem.horizon + 1, :])
    r_safe = np.array(
        [
            ego_half_diag + math.hypot(hl, hw) + problem.safety_margin
            for hl, hw in predictions.half_extents
        ]
    )
    return obs_c, r_safe


def _solution_violation(problem, states, obs_c, r_safe):
    n = problem.horizon
    c_obs = np.zeros((obs_c.shape[0], n))
    c_bnd = np.zeros((2, n))
    _constraint_gaps(states, obs_c, r_safe, problem.y_safe, c_obs, c_bnd)
    worst = 0.0
    if c_obs.size:
        worst = max(worst, float(np.max(-c_obs)))
    worst = max(worst, float(np.max(-c_bnd)))
    return worst, c_obs, c_bnd


def solve_soft_baseline(problem: MpcProblem, x0: VehicleState, predictions: ObstaclePrediction,
                        warm_start=None) -> MpcSolution:
    """Baseline with quadratic hinge penalties on obstacle distance and |y|."""
    if problem.constraint_mode != "soft":
        raise ValueError("problem.constraint_mode must be 'soft'")
    x0_arr = _validate_x0(x0)
    obs_c, r_safe = _obstacle_arrays(problem, predictions)
    n = problem.horizon
    zeros4 = np.zeros(4)
    lam_obs = np.zeros((obs_c.shape[0], n))
    lam_bnd = np.zeros((2, n))
    eval_w, eval_controls, u_lo, u_hi = _make_eval(
        problem, x0_arr, problem.u_prev.as_array(), zeros4, zeros4,
        obs_c, r_safe, lam_obs, 2.0 * problem.obstacle_weight,
        lam_bnd, 2.0 * problem.boundary_weight,
    )
    start = _cold_start_for(problem, x0_arr, obs_c, r_safe, warm_start)
    cost, aux, trace, converged, iterations = _optimize(
        problem, eval_w, eval_controls, start, u_lo, u_hi
    )
    worst, _, _ = _solution_violation(problem, aux[0], obs_c, r_safe)
    return _finish(problem, cost, aux, trace, converged, iterations, worst)


def solve_hard_baseline(problem: MpcProblem, x0: VehicleState, predictions: ObstaclePrediction,
                        warm_start=None) -> MpcSolution:
    """Baseline treating avoidance/boundary terms as inequality constraints.

    An augmented-Lagrangian outer loop (multiplier update, penalty growth
    x10, at most ``al_outer_iterations`` passes) wraps the same descent
    engine.  If the final max violation exceeds 1e-3 -- including when x0
    already violates -- the best-effort solution is returned with
    ``converged=False``.
    """
    if problem.constraint_mode != "hard":
        raise ValueError("problem.constraint_mode must be 'hard'")
    x0_arr = _validate_x0(x0)
    obs_c, r_safe = _obstacle_arrays(problem, predictions)
    n = problem.horizon
    zeros4 = np.zeros(4)
    lam_obs = np.zeros((obs_c.shape[0], n))
    lam_bnd = np.zeros((2, n))
    mu = problem.al_initial_penalty
    warm = _cold_start_for(problem, x0_arr, obs_c, r_safe, warm_start)
    total_iterations = 0
    full_trace: list = []
    best = None
    worst = math.inf
    for _outer in range(problem.al_outer_iterations):
        eval_w, eval_controls, u_lo, u_hi = _make_eval(
            problem, x0_arr, problem.u_prev.as_array(), zeros4, zeros4,
            obs_c, r_safe, lam_obs, mu, lam_bnd, mu,
        )
        cost, aux, trace, _conv, iterations = _optimize(
            problem, eval_w, eval_controls, warm, u_lo, u_hi
        )
        total_iterations += iterations
        full_trace.append(trace)
        warm = aux[1]
        worst, c_obs, c_bnd = _solution_violation(problem, aux[0], obs_c, r_safe)
        best = (cost, aux)
        if worst <= 1e-3:
            break
        lam_obs = np.maximum(0.0, lam_obs - mu * c_obs)
        lam_bnd = np.maximum(0.0, lam_bnd - mu * c_bnd)
        mu *= 10.0
    cost, aux = best
    return _finish(problem, cost, aux, full_trace[-1], worst <= 1e-3, total_iterations, worst)


def shift_warm_start(controls: np.ndarray) -> np.ndarray:
    """Shift a control sequence one step, repeating the last control."""
    shifted = np.empty_like(controls)
    shifted[:-1] = controls[1:]
    shifted[-1] = controls[-1]
    return shifted


class MpcController:
    """Stateful receding-horizon wrapper owning warm start and u_prev.

    Instances are strictly sequential per episode; use one per world.
    """

    def __init__(self, problem: MpcProblem):
        self.problem = problem
        self._warm = None

    def reset(self, goal: VehicleState | None = None):
        self._warm = None
        self.problem.u_prev = ControlInput(0.0, 0.0)
        if goal is not None:
            self.problem.goal = goal

    def step(self, x0: VehicleState, z: DecisionVector | None = None,
             predictions: ObstaclePrediction | None = None) -> MpcSolution:
        mode = self.problem.constraint_mode
        if mode == "latent":
            if z is None:
                raise ValueError("latent mode needs a decision vector")
            solution = solve(self.problem, x0, z, warm_start=self._warm)
        elif mode == "soft":
            solution = solve_soft_baseline(self.problem, x0, predictions, warm_start=self._warm)
        else:
            solution = solve_hard_baseline(self.problem, x0, predictions, warm_start=self._warm)
        self._warm = shift_warm_start(solution.controls)
        self.problem.u_prev = ControlInput(float(solution.controls[0, 0]), float(solution.controls[0, 1]))
        return solution
