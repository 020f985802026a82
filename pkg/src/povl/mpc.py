"""Receding-horizon planner: control-effort, potential-field and reference costs
minimised over the control sequence by sequential quadratic programming.

Decision variables are the p controls; states follow by rolling the discrete
ego model forward (single shooting), so every plan satisfies the dynamics.
Each SQP iteration builds a Gauss-Newton quadratic model of the cost around
the current controls, solves the box-constrained QP with an active-set method
and accepts the step through a monotone backtracking line search.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .dynamics import DEFAULT_PARAMS, IU, IX, IY, VehicleParams, integrate, step, step_jacobians
from .geometry import ReferencePath
from .potential import DEFAULT_POTENTIAL, Environment, PotentialConfig, obstacle_field, u_env_batch


class PlannerUsageError(ValueError):
    pass


@dataclass(frozen=True)
class PlannerConfig:
    horizon: int = 25
    dt: float = 0.2
    Q1: tuple[float, float] = (1e-7, 10.0)     # control effort, per N^2 and rad^2
    Q2: tuple[float, float] = (1e-6, 50.0)     # control rate, per (N/s)^2 and (rad/s)^2
    Q3: tuple[float, float] = (1.0, 0.5)       # lateral and speed deviation
    F_max: float = 6000.0
    delta_max: float = 0.2
    max_iter: int = 30
    tol: float = 1e-6            # projected-gradient norm, scaled controls
    substeps: int = 10
    max_backtracks: int = 12
    explore: bool = True         # also try a few lane-change/braking initial guesses
    potential: PotentialConfig = DEFAULT_POTENTIAL
    vehicle: VehicleParams = DEFAULT_PARAMS

    def __post_init__(self):
        for name in ("Q1", "Q2", "Q3"):
            if any(w < 0 for w in getattr(self, name)):
                raise ValueError(f"{name} weights must be nonnegative")
        if self.horizon < 1 or self.dt <= 0 or self.F_max <= 0 or self.delta_max <= 0:
            raise ValueError("horizon, dt and control bounds must be positive")

    @property
    def bounds(self) -> np.ndarray:
        return np.array([self.F_max, self.delta_max])


@dataclass(frozen=True)
class Reference:
    """Desired lateral position (a lane centre on ``path``) and speed."""

    path: ReferencePath
    d_des: float
    u_des: float

    @classmethod
    def for_lane(cls, road, lane) -> "Reference":
        return cls(road.paths[lane.path], float(lane.center), float(lane.nominal_speed))

    def lateral_error(self, pos: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(d - d_des, d(d)/d(pos)) for points (M, 2)."""
        s, d, _ = self.path.project(pos)
        t = self.path.tangent(s)
        return d - self.d_des, np.stack([-t[:, 1], t[:, 0]], -1)


@dataclass
class EgoPlan:
    controls: np.ndarray           # (p, 2) [F_u, delta_f]
    states: np.ndarray             # (p + 1, 6)
    cost: float
    breakdown: dict                # per-step arrays "U_ev", "U_env", "U_ref"
    status: str = "converged"
    iterations: int = 0
    cost_history: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.status in ("converged", "max_iter")

    def shifted(self) -> np.ndarray:
        """Warm start for the next step: drop the first control, repeat the last."""
        return np.vstack([self.controls[1:], self.controls[-1:]])


def _as_obstacles(predictions, p: int) -> np.ndarray:
    if predictions is None:
        return np.zeros((p, 0, 2))
    obs = np.asarray(predictions, float)
    if obs.ndim == 2:
        obs = obs[:, None, :] if obs.shape[0] == p else obs[None]
    if obs.shape[0] != p or obs.shape[-1] != 2:
        raise PlannerUsageError(f"predictions must be (p={p}, n, 2), got {obs.shape}")
    return obs


def rollout(x0, controls, cfg: PlannerConfig) -> np.ndarray:
    xs = np.zeros((len(controls) + 1, 6))
    xs[0] = x0
    for k, u in enumerate(controls):
        xs[k + 1] = step(xs[k], u, cfg.vehicle, cfg.dt, cfg.substeps)
    return xs


def _rollout_sensitivities(x0, controls, cfg: PlannerConfig):
    """States and d x_k / d U (p+1, 6, 2p)."""
    p = len(controls)
    xs = np.zeros((p + 1, 6))
    S = np.zeros((p + 1, 6, 2 * p))
    xs[0] = x0
    for k in range(p):
        xn, Jx, Ju = step_jacobians(xs[k], controls[k], cfg.vehicle, cfg.dt, cfg.substeps)
        xs[k + 1] = xn
        S[k + 1] = Jx @ S[k]
        S[k + 1][:, 2 * k:2 * k + 2] += Ju
    return xs, S


def cost(controls, x0, predictions, ref: Optional[Reference], cfg: PlannerConfig = PlannerConfig(),
         env: Optional[Environment] = None, prev_control=None, states=None):
    """Total cost and per-step breakdown for a control sequence (p, 2)."""
    U = np.asarray(controls, float)
    p = cfg.horizon
    if U.shape != (p, 2):
        raise PlannerUsageError(f"controls must be ({p}, 2), got {U.shape}")
    obs = _as_obstacles(predictions, p)
    xs = rollout(x0, U, cfg) if states is None else states
    q1, q2, q3 = map(np.asarray, (cfg.Q1, cfg.Q2, cfg.Q3))
    prev = np.zeros(2) if prev_control is None else np.asarray(prev_control, float)
    rate = np.diff(np.vstack([prev, U]), axis=0) / cfg.dt
    u_ev = (U * U) @ q1 + (rate * rate) @ q2
    pos = xs[1:, [IX, IY]]
    u_env, _ = u_env_batch(pos, obs, env, cfg.potential)
    if ref is not None:
        ey, _ = ref.lateral_error(pos)
        eu = xs[1:, IU] - ref.u_des
        u_ref = q3[0] * ey * ey + q3[1] * eu * eu
    else:
        u_ref = np.zeros(p)
    total = float(u_ev.sum() + u_env.sum() + u_ref.sum())
    return total, {"U_ev": u_ev, "U_env": u_env, "U_ref": u_ref}


def _env_hessians(pos, obs, env, pcfg, h=1e-4):
    """PSD 2x2 Hessians of U_env at each point.

    Obstacle part by central differences of the analytic gradient, static part
    in Gauss-Newton form from the environment.
    """
    H = np.zeros((len(pos), 2, 2))
    for ax in range(2):
        e = np.zeros(2)
        e[ax] = h
        gp = obstacle_field(pos + e, obs, pcfg)[1]
        gm = obstacle_field(pos - e, obs, pcfg)[1]
        H[:, :, ax] = (gp - gm) / (2 * h)
    H = 0.5 * (H + np.swapaxes(H, 1, 2))
    if env is not None:
        H = H + env.static(pos, pcfg, hessian=True)[2]
    w, V = np.linalg.eigh(H)
    return np.einsum("kij,kj,klj->kil", V, np.maximum(w, 0.0), V)


def _quadratic_model(U, x0, obs, ref, cfg, env, prev):
    """Gradient and Gauss-Newton Hessian of the cost w.r.t. the flattened controls."""
    p = len(U)
    n = 2 * p
    xs, S = _rollout_sensitivities(x0, U, cfg)
    q1, q2, q3 = map(np.asarray, (cfg.Q1, cfg.Q2, cfg.Q3))
    # control effort and rate: exactly quadratic
    D = (np.eye(p) - np.eye(p, k=-1)) / cfg.dt
    H = np.kron(np.eye(p), np.diag(2 * q1)) + np.kron(2 * D.T @ D, np.diag(q2))
    prev_term = np.zeros(n)
    prev_term[:2] = -2 * q2 * prev / cfg.dt ** 2
    g = H @ U.ravel() + prev_term
    pos = xs[1:, [IX, IY]]
    P = S[1:, [IX, IY], :]                     # (p, 2, n)
    _, gpos = u_env_batch(pos, obs, env, cfg.potential)
    Hpos = _env_hessians(pos, obs, env, cfg.potential)
    g = g + np.einsum("kin,ki->n", P, gpos)
    H = H + np.einsum("kin,kij,kjm->nm", P, Hpos, P)
    if ref is not None:
        ey, nrm = ref.lateral_error(pos)
        Jy = np.einsum("ki,kin->kn", nrm, P)   # (p, n)
        Ju = S[1:, IU, :]
        eu = xs[1:, IU] - ref.u_des
        g = g + 2 * q3[0] * Jy.T @ ey + 2 * q3[1] * Ju.T @ eu
        H = H + 2 * q3[0] * Jy.T @ Jy + 2 * q3[1] * Ju.T @ Ju
    return g, H, xs


def solve_box_qp(H, g, lo, hi, max_iter: int = 100):
    """min 1/2 d'Hd + g'd  s.t.  lo <= d <= hi, for positive definite H (active set)."""
    n = len(g)
    d = np.clip(np.zeros(n), lo, hi)
    active = np.zeros(n, bool)
    for _ in range(max_iter):
        free = ~active
        d_new = d.copy()
        if free.any():
            rhs = -(g[free] + H[np.ix_(free, active)] @ d[active])
            d_new[free] = np.linalg.solve(H[np.ix_(free, free)], rhs)
        viol = free & ((d_new < lo - 1e-12) | (d_new > hi + 1e-12))
        if viol.any():
            # step towards the new point until the first bound is hit
            with np.errstate(divide="ignore", invalid="ignore"):
                dd = d_new - d
                t_lo = np.where(dd < 0, (lo - d) / dd, np.inf)
                t_hi = np.where(dd > 0, (hi - d) / dd, np.inf)
            t = np.where(free, np.minimum(t_lo, t_hi), np.inf)
            alpha = float(np.clip(t.min(), 0.0, 1.0))
            d = np.clip(d + alpha * (d_new - d), lo, hi)
            hit = free & ((np.abs(d - lo) < 1e-12) | (np.abs(d - hi) < 1e-12))
            active |= hit
            continue
        d = np.clip(d_new, lo, hi)
        grad = H @ d + g
        # release bounds whose multiplier has the wrong sign
        release = active & (((np.abs(d - lo) < 1e-12) & (grad < 0)) |
                            ((np.abs(d - hi) < 1e-12) & (grad > 0)))
        if not release.any():
            return d
        j = np.flatnonzero(release)[np.argmax(np.abs(grad[release]))]
        active[j] = False
    return d


def _projected_gradient(z, gz, lo, hi):
    pg = gz.copy()
    pg[(np.abs(z - lo) < 1e-12) & (gz > 0)] = 0.0
    pg[(np.abs(z - hi) < 1e-12) & (gz < 0)] = 0.0
    return pg


def candidate_starts(cfg: PlannerConfig) -> list[np.ndarray]:
    """Simple control profiles: left/right lane-change steering pulses and braking.

    SQP is a local method; scoring these with a single rollout each lets it
    start in the basin of a lane change instead of squeezing past an obstacle.
    """
    p = cfg.horizon
    out = []
    for amp in (0.01, 0.02):
        for sign in (1.0, -1.0):
            U = np.zeros((p, 2))
            U[0:3, 1] = sign * amp
            U[3:6, 1] = -sign * amp
            out.append(U)
    U = np.zeros((p, 2))
    U[:, 0] = -0.5 * cfg.F_max
    out.append(U)
    return out


def solve_sqp(x0, predictions, ref: Optional[Reference], cfg: PlannerConfig = PlannerConfig(),
              warm_start=None, env: Optional[Environment] = None, prev_control=None) -> EgoPlan:
    p = cfg.horizon
    obs = _as_obstacles(predictions, p)
    x0 = np.asarray(x0, float)
    bound = cfg.bounds
    U = np.zeros((p, 2)) if warm_start is None else np.array(warm_start, float).reshape(p, 2)
    U = np.clip(U, -bound, bound)
    prev = np.zeros(2) if prev_control is None else np.asarray(prev_control, float)
    scale = np.tile(bound, p)                   # work in controls / bound
    lo, hi = -np.ones(2 * p), np.ones(2 * p)

    J, parts = cost(U, x0, obs, ref, cfg, env, prev)
    if cfg.explore:
        for cand in candidate_starts(cfg):
            Jc, pc = cost(np.clip(cand, -bound, bound), x0, obs, ref, cfg, env, prev)
            if Jc < J:
                U, J, parts = np.clip(cand, -bound, bound), Jc, pc
    history = [J]
    status, it = "max_iter", 0
    if not math.isfinite(J):
        return EgoPlan(U, rollout(x0, U, cfg), J, parts, "failed", 0, history)
    for it in range(1, cfg.max_iter + 1):
        g, H, _ = _quadratic_model(U, x0, obs, ref, cfg, env, prev)
        gz = g * scale
        Hz = H * np.outer(scale, scale)
        z = U.ravel() / scale
        if np.linalg.norm(_projected_gradient(z, gz, lo, hi)) <= cfg.tol:
            status, it = "converged", it - 1
            break
        Hz = Hz + 1e-8 * max(1.0, np.abs(np.diag(Hz)).max()) * np.eye(len(z))
        dz = solve_box_qp(Hz, gz, lo - z, hi - z)
        slope = float(gz @ dz)
        if slope >= 0:
            status, it = "converged", it - 1
            break
        alpha, accepted = 1.0, False
        for _ in range(cfg.max_backtracks):
            Un = ((z + alpha * dz) * scale).reshape(p, 2)
            Un = np.clip(Un, -bound, bound)
            Jn, pn = cost(Un, x0, obs, ref, cfg, env, prev)
            if math.isfinite(Jn) and Jn <= J + 1e-4 * alpha * slope:
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            # no decrease along the model direction: treat as a stationary point
            status = "converged"
            break
        rel = (J - Jn) / max(abs(J), 1e-12)
        U, J, parts = Un, Jn, pn
        history.append(J)
        if rel < 1e-10:
            status = "converged"
            break
    return EgoPlan(U, rollout(x0, U, cfg), J, parts, status, it, history)


@dataclass
class MPCState:
    """What the receding-horizon loop carries from one step to the next."""

    x: np.ndarray
    prev_control: np.ndarray = field(default_factory=lambda: np.zeros(2))
    warm_start: Optional[np.ndarray] = None
    last_plan: Optional[EgoPlan] = None


def receding_horizon_step(state: MPCState, predictions, ref: Optional[Reference],
                          cfg: PlannerConfig = PlannerConfig(), env: Optional[Environment] = None):
    """Plan, apply the first control through the nonlinear model, shift the warm start.

    Returns (applied control, plan, next MPCState).
    """
    plan = solve_sqp(state.x, predictions, ref, cfg, state.warm_start, env, state.prev_control)
    if plan.ok:
        applied = plan.controls[0].copy()
        warm = plan.shifted()
    elif state.last_plan is not None:
        # solver failure: fall back on the previous plan's next control
        warm = state.last_plan.shifted()
        applied = warm[0].copy()
    else:
        applied = np.zeros(2)
        warm = None
    applied = np.clip(applied, -cfg.bounds, cfg.bounds)
    x_next = integrate(state.x, applied, cfg.vehicle, cfg.dt)
    nxt = MPCState(x_next, applied, warm, plan if plan.ok else state.last_plan)
    return applied, plan, nxt
