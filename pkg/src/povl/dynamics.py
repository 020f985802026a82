"""Dynamic bicycle model of the ego vehicle with linear tyre forces.

State ``x = [X, u, Y, v, psi, r]``: global position, body-frame longitudinal and
lateral velocity, heading and yaw rate.  Control ``[F_u, delta_f]``: longitudinal
force and front steering angle.  Below ``u_min`` the slip angles are singular,
so a kinematic bicycle takes over, with v and r relaxing to their kinematic
values over ``tau``.
"""
from __future__ import annotations

import configparser
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
from scipy.linalg import expm

N_STATE = 6
N_CONTROL = 2
IX, IU, IY, IV, IPSI, IR = range(6)
IF, IDELTA = 0, 1


@dataclass(frozen=True)
class EgoState:
    X: float
    u: float
    Y: float
    v: float = 0.0
    psi: float = 0.0
    r: float = 0.0

    def __post_init__(self):
        if not np.all(np.isfinite(self.array())):
            raise ValueError("non-finite ego state")
        if self.u < 0:
            raise ValueError(f"negative longitudinal speed {self.u}")

    def array(self) -> np.ndarray:
        return np.array([self.X, self.u, self.Y, self.v, self.psi, self.r], float)

    @classmethod
    def from_array(cls, a) -> "EgoState":
        a = np.asarray(a, float)
        return cls(*map(float, a[:6]))

    @property
    def position(self) -> np.ndarray:
        return np.array([self.X, self.Y])

    def global_velocity(self) -> np.ndarray:
        c, s = np.cos(self.psi), np.sin(self.psi)
        return np.array([self.u * c - self.v * s, self.u * s + self.v * c])


@dataclass(frozen=True)
class ControlInput:
    F_u: float = 0.0
    delta_f: float = 0.0

    def array(self) -> np.ndarray:
        return np.array([self.F_u, self.delta_f], float)

    def within(self, F_max: float, delta_max: float) -> bool:
        return abs(self.F_u) <= F_max and abs(self.delta_f) <= delta_max


@dataclass(frozen=True)
class VehicleParams:
    mass: float = 1500.0         # kg
    I_z: float = 2500.0          # kg m^2
    l_f: float = 1.2             # m, CoG to front axle
    l_r: float = 1.6             # m, CoG to rear axle
    C_f: float = 80000.0         # N/rad, front axle cornering stiffness
    C_r: float = 80000.0         # N/rad
    drag: float = 0.0            # N s/m, linear longitudinal drag
    u_min: float = 1.0           # m/s, below this the kinematic model is used
    tau: float = 0.1             # s, relaxation of v and r in the kinematic model
    length: float = 4.5
    width: float = 1.8

    def __post_init__(self):
        for f in fields(self):
            val = getattr(self, f.name)
            if f.name == "drag":
                if val < 0:
                    raise ValueError("drag must be nonnegative")
            elif not val > 0:
                raise ValueError(f"vehicle parameter {f.name} must be positive, got {val}")

    @property
    def wheelbase(self) -> float:
        return self.l_f + self.l_r

    def understeer_gradient(self) -> float:
        """K in r_ss = u delta / (L + K u^2), s^2/m."""
        return self.mass * (self.l_r * self.C_r - self.l_f * self.C_f) / (
            self.wheelbase * self.C_f * self.C_r)

    @classmethod
    def from_file(cls, path) -> "VehicleParams":
        """``key = value`` lines (an optional ``[vehicle]`` header is accepted)."""
        text = Path(path).read_text()
        if not text.lstrip().startswith("["):
            text = "[vehicle]\n" + text
        cp = configparser.ConfigParser()
        cp.optionxform = str  # keep C_f and I_z as written
        cp.read_string(text)
        sec = cp["vehicle"]
        known = {f.name for f in fields(cls)}
        unknown = set(sec) - known
        if unknown:
            raise ValueError(f"unknown vehicle parameters: {sorted(unknown)}")
        return cls(**{k: float(v) for k, v in sec.items()})

    def to_dict(self):
        return asdict(self)


DEFAULT_PARAMS = VehicleParams()


def _split(x, uc):
    x = np.asarray(x, float)
    uc = np.asarray(uc, float)
    return x, uc


def f_nonlinear(x, uc, p: VehicleParams = DEFAULT_PARAMS) -> np.ndarray:
    """Time derivative of the state for control ``uc = [F_u, delta_f]``."""
    x, uc = _split(x, uc)
    _, u, _, v, psi, r = x
    F, delta = uc
    c, s = np.cos(psi), np.sin(psi)
    out = np.empty(6)
    out[IX] = u * c - v * s
    out[IY] = u * s + v * c
    out[IPSI] = r
    if u >= p.u_min:
        Fyf = p.C_f * (delta - (v + p.l_f * r) / u)
        Fyr = -p.C_r * (v - p.l_r * r) / u
        out[IU] = v * r + (F - p.drag * u) / p.mass
        out[IV] = (Fyf + Fyr) / p.mass - u * r
        out[IR] = (p.l_f * Fyf - p.l_r * Fyr) / p.I_z
    else:
        tk = np.tan(delta)
        rk = u * tk / p.wheelbase
        out[IU] = (F - p.drag * u) / p.mass
        out[IV] = (p.l_r * rk - v) / p.tau
        out[IR] = (rk - r) / p.tau
    return out


def linearize(x0, u0, p: VehicleParams = DEFAULT_PARAMS) -> tuple[np.ndarray, np.ndarray]:
    """Analytic Jacobians A = df/dx (6x6) and B = df/du (6x2)."""
    _, u, _, v, psi, r = (float(a) for a in x0)
    F, delta = float(u0[0]), float(u0[1])
    c, s = math.cos(psi), math.sin(psi)
    A = np.zeros((6, 6))
    B = np.zeros((6, 2))
    A[IX, IU], A[IX, IV], A[IX, IPSI] = c, -s, -u * s - v * c
    A[IY, IU], A[IY, IV], A[IY, IPSI] = s, c, u * c - v * s
    A[IPSI, IR] = 1.0
    m, Iz, lf, lr, Cf, Cr = p.mass, p.I_z, p.l_f, p.l_r, p.C_f, p.C_r
    if u >= p.u_min:
        # partials of the axle forces
        dfu, dfv, dfr, dfd = Cf * (v + lf * r) / u ** 2, -Cf / u, -Cf * lf / u, Cf
        dru, drv, drr = Cr * (v - lr * r) / u ** 2, -Cr / u, Cr * lr / u
        A[IU, IU], A[IU, IV], A[IU, IR] = -p.drag / m, r, v
        B[IU, IF] = 1.0 / m
        A[IV, IU] = (dfu + dru) / m - r
        A[IV, IV] = (dfv + drv) / m
        A[IV, IR] = (dfr + drr) / m - u
        B[IV, IDELTA] = dfd / m
        A[IR, IU] = (lf * dfu - lr * dru) / Iz
        A[IR, IV] = (lf * dfv - lr * drv) / Iz
        A[IR, IR] = (lf * dfr - lr * drr) / Iz
        B[IR, IDELTA] = lf * dfd / Iz
    else:
        L, tau = p.wheelbase, p.tau
        tk = math.tan(delta)
        sec2 = 1.0 + tk * tk
        A[IU, IU] = -p.drag / m
        B[IU, IF] = 1.0 / m
        A[IV, IU], A[IV, IV] = lr * tk / (L * tau), -1.0 / tau
        B[IV, IDELTA] = lr * u * sec2 / (L * tau)
        A[IR, IU], A[IR, IR] = tk / (L * tau), -1.0 / tau
        B[IR, IDELTA] = u * sec2 / (L * tau)
    return A, B


def discretize(A, B, dt: float, method: str = "euler") -> tuple[np.ndarray, np.ndarray]:
    """Zero-order-hold discretisation of x' = A x + B u."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    A, B = np.asarray(A, float), np.asarray(B, float)
    n, m = B.shape
    if method == "euler":
        return np.eye(n) + A * dt, B * dt
    if method == "expm":
        M = np.zeros((n + m, n + m))
        M[:n, :n] = A
        M[:n, n:] = B
        E = expm(M * dt)
        return E[:n, :n], E[:n, n:]
    raise ValueError(f"unknown discretisation {method!r}")


def _clamp_speed(x):
    if x[IU] < 0.0:
        x[IU] = 0.0
    return x


def _f_scalar(x, F, delta, p):
    """f_nonlinear on plain floats; the planner calls this hundreds of thousands of times."""
    _, u, _, v, psi, r = x
    c, s = math.cos(psi), math.sin(psi)
    if u >= p.u_min:
        Fyf = p.C_f * (delta - (v + p.l_f * r) / u)
        Fyr = -p.C_r * (v - p.l_r * r) / u
        du = v * r + (F - p.drag * u) / p.mass
        dv = (Fyf + Fyr) / p.mass - u * r
        dr = (p.l_f * Fyf - p.l_r * Fyr) / p.I_z
    else:
        rk = u * math.tan(delta) / p.wheelbase
        du = (F - p.drag * u) / p.mass
        dv = (p.l_r * rk - v) / p.tau
        dr = (rk - r) / p.tau
    return (u * c - v * s, du, u * s + v * c, dv, r, dr)


def _euler(x, F, delta, p, h):
    d = _f_scalar(x, F, delta, p)
    xn = [a + h * b for a, b in zip(x, d)]
    clamped = xn[IU] < 0.0
    if clamped:
        xn[IU] = 0.0
    return xn, clamped


def step(x, uc, p: VehicleParams = DEFAULT_PARAMS, dt: float = 0.2, substeps: int = 10) -> np.ndarray:
    """Discrete ego model: ``substeps`` forward-Euler steps of f over ``dt``.

    A single Euler step of 0.2 s is unstable for the yaw mode at low speed;
    sub-stepping keeps the planner's model well behaved.
    """
    xs = [float(a) for a in x]
    F, delta = float(uc[0]), float(uc[1])
    h = dt / substeps
    for _ in range(substeps):
        xs, _ = _euler(xs, F, delta, p, h)
    return np.array(xs)


def step_jacobians(x, uc, p: VehicleParams = DEFAULT_PARAMS, dt: float = 0.2,
                   substeps: int = 10) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(x_next, dx_next/dx, dx_next/du) of :func:`step`, by the chain rule."""
    xs = [float(a) for a in x]
    F, delta = float(uc[0]), float(uc[1])
    h = dt / substeps
    Jx = np.eye(6)
    Ju = np.zeros((6, 2))
    for _ in range(substeps):
        A, B = linearize(xs, (F, delta), p)
        Ad = np.eye(6) + A * h
        Bd = B * h
        xs, clamped = _euler(xs, F, delta, p, h)
        if clamped:
            # the clamp holds u at zero, cutting its sensitivity
            Ad[IU] = 0.0
            Bd[IU] = 0.0
        Jx = Ad @ Jx
        Ju = Ad @ Ju + Bd
    return np.array(xs), Jx, Ju


def integrate(x, uc, p: VehicleParams = DEFAULT_PARAMS, dt: float = 0.2, n: int = 40) -> np.ndarray:
    """Classical RK4 over ``dt`` with ``n`` sub-steps and a held control."""
    x = np.array(x, float)
    h = dt / n
    for _ in range(n):
        k1 = f_nonlinear(x, uc, p)
        k2 = f_nonlinear(_clamp_speed(x + 0.5 * h * k1), uc, p)
        k3 = f_nonlinear(_clamp_speed(x + 0.5 * h * k2), uc, p)
        k4 = f_nonlinear(_clamp_speed(x + h * k3), uc, p)
        x = _clamp_speed(x + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4))
    return x


def steady_state_cornering(u: float, delta: float, p: VehicleParams = DEFAULT_PARAMS):
    """(v_ss, r_ss) of the linear-tyre lateral dynamics at fixed speed and steering."""
    r = u * delta / (p.wheelbase + p.understeer_gradient() * u * u)
    v = p.l_r * r - p.mass * u * u * r * p.l_f / (p.C_r * p.wheelbase)
    return v, r
