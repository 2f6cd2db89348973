"""Plant models: unicycle kinematics and a 6-DOF surface-drone model.

Boat state layout (12 entries)::

    [v1, v2, v3, w1, w2, w3, p_x, p_y, p_z, phi, theta, psi]

Body-frame velocities first, then Earth-frame position and ZYX Euler angles.
The Earth frame is north-east-down, so ``p_z`` grows with depth and gravity
enters the heave row with a positive sign.

All derivative functions accept arrays with arbitrary leading batch axes so
the NMPC rollouts can evaluate many input sequences at once.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Callable, Sequence

import numpy as np

UNICYCLE_DIM = 3
BOAT_DIM = 12
UNICYCLE_ANGLES = (2,)
BOAT_ANGLES = (9, 10, 11)

# indices into the boat state
V1, V2, V3, W1, W2, W3, PX, PY, PZ, PHI, THETA, PSI = range(12)


class DynamicsError(ValueError):
    """Base class for plant-model failures."""


class InvalidStateError(DynamicsError):
    pass


class SingularityError(DynamicsError):
    """Pitch reached the Euler-angle singularity guard."""


class IntegrationError(DynamicsError):
    def __init__(self, stage: int, message: str = "non-finite derivative"):
        super().__init__(f"RK4 stage {stage}: {message}")
        self.stage = stage


def wrap_angle(a):
    """Wrap angle(s) to (-pi, pi]."""
    return math.pi - np.mod(math.pi - a, 2.0 * math.pi)


def wrap_scalar(a: float) -> float:
    return math.pi - (math.pi - a) % (2.0 * math.pi)


@dataclass(frozen=True)
class UnicycleState:
    p_x: float
    p_y: float
    theta: float

    def as_array(self) -> np.ndarray:
        return np.array([self.p_x, self.p_y, self.theta], dtype=float)

    @classmethod
    def from_array(cls, x: Sequence[float]) -> "UnicycleState":
        return cls(float(x[0]), float(x[1]), wrap_scalar(float(x[2])))


@dataclass(frozen=True)
class BoatState:
    v1: float = 0.0
    v2: float = 0.0
    v3: float = 0.0
    w1: float = 0.0
    w2: float = 0.0
    w3: float = 0.0
    p_x: float = 0.0
    p_y: float = 0.0
    p_z: float = 0.0
    phi: float = 0.0
    theta: float = 0.0
    psi: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, f.name) for f in fields(self)], dtype=float)

    @classmethod
    def from_array(cls, x: Sequence[float]) -> "BoatState":
        return cls(*(float(v) for v in x))


@dataclass(frozen=True)
class ReferenceCommand:
    v1_ref: float
    w3_ref: float

    def as_array(self) -> np.ndarray:
        return np.array([self.v1_ref, self.w3_ref], dtype=float)


@dataclass(frozen=True)
class ThrustCommand:
    delta_l: float
    delta_r: float

    def as_array(self) -> np.ndarray:
        return np.array([self.delta_l, self.delta_r], dtype=float)


@dataclass(frozen=True)
class BoatParams:
    """Hull, hydrodynamic and actuator parameters of the surface drone.

    Defaults describe a ~20 kg twin-thruster catamaran. The drag and
    inertia-coupling coefficients are not published for any real hull, so
    these are hand-picked values giving ~2 m/s top speed and ~1 rad/s yaw
    rate at full differential thrust.
    """

    m: float = 20.0
    g_grav: float = 9.81
    rho: float = 1000.0
    A_x: float = 0.025
    A_y: float = 0.12
    A_z: float = 0.4
    I_x: float = 0.8
    I_y: float = 1.6
    I_z: float = 2.0
    C_Fx: float = 0.4
    C_Fy: float = 1.0
    C_Fz: float = 1.0
    C_Mx: float = 0.05
    C_My: float = 0.05
    C_Mz: float = 0.005
    C_b: float = 1.0
    k_phi: float = 0.6
    k_theta: float = 1.2
    # Euler-equation coupling terms for a hull with no product of inertia:
    # c1=(Iy-Iz)/Ix, c5=(Iz-Ix)/Iy, c8=(Ix-Iy)/Iz, c2=c6=0.
    c1: float = -0.5
    c2: float = 0.0
    c5: float = 0.75
    c6: float = 0.0
    c8: float = -0.4
    d_motor: float = 0.5
    A_wl: float = 0.45
    draft_max: float = 0.25
    theta_max: float = 1.48

    def __post_init__(self):
        positive = ("m", "rho", "A_x", "A_y", "A_z", "I_x", "I_y", "I_z", "d_motor", "A_wl", "draft_max")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValueError(f"BoatParams.{name} must be > 0")
        for name in ("C_Fx", "C_Fy", "C_Fz", "C_Mx", "C_My", "C_Mz", "C_b"):
            if getattr(self, name) < 0:
                raise ValueError(f"BoatParams.{name} must be >= 0")
        for f in fields(self):
            if not math.isfinite(getattr(self, f.name)):
                raise ValueError(f"BoatParams.{f.name} must be finite")

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def equilibrium_draft(self) -> float:
        """Depth where buoyancy balances weight (closed form for the box hull)."""
        return self.m / (self.rho * self.A_wl * self.C_b)


# ---------------------------------------------------------------------------
# unicycle

def unicycle_derivative(s, r) -> np.ndarray:
    """(p_x', p_y', theta') = (v cos theta, v sin theta, omega)."""
    x = s.as_array() if isinstance(s, UnicycleState) else np.asarray(s, dtype=float)
    rr = r.as_array() if isinstance(r, ReferenceCommand) else np.asarray(r, dtype=float)
    if x.ndim == 1 and rr.ndim == 1:
        v, w, th = float(rr[0]), float(rr[1]), float(x[2])
        if not (math.isfinite(v) and math.isfinite(w) and math.isfinite(th)
                and math.isfinite(x[0]) and math.isfinite(x[1])):
            raise InvalidStateError("non-finite unicycle state or command")
        return np.array([v * math.cos(th), v * math.sin(th), w])
    if not (np.isfinite(x).all() and np.isfinite(rr).all()):
        raise InvalidStateError("non-finite unicycle state or command")
    v, w, th = rr[..., 0], rr[..., 1], x[..., 2]
    return np.stack(np.broadcast_arrays(v * np.cos(th), v * np.sin(th), w), axis=-1)


# ---------------------------------------------------------------------------
# boat

def _as_boat_array(s) -> np.ndarray:
    if isinstance(s, BoatState):
        return s.as_array()
    return np.asarray(s, dtype=float)


def _check_pitch(theta, theta_max: float) -> None:
    if np.any(np.abs(theta) >= theta_max):
        raise SingularityError(f"|theta| reached the Euler singularity guard ({theta_max} rad)")


def rotation_columns(phi, theta, psi):
    """Body-to-Earth rotation matrix entries using the a..f abbreviations.

    Returns the 3x3 matrix rows as a nested tuple so callers can pick the
    entries they need without building arrays for scalar inputs.
    """
    cf, sf = np.cos(phi), np.sin(phi)
    ct, st = np.cos(theta), np.sin(theta)
    cp, sp = np.cos(psi), np.sin(psi)
    a = cp * st * sf - sp * cf
    b = cp * st * cf + sp * sf
    c = sp * st * sf + cp * cf
    d = sp * st * cf - cp * sf
    e = ct * sf
    f = ct * cf
    return ((cp * ct, a, b), (sp * ct, c, d), (-st, e, f))


def boat_kinematic_drift_and_input(s, theta_max: float = 1.48):
    """Split the pose kinematics into the drift part and the (v1, w3) columns.

    Returns ``(f, g)`` with ``f[..., 6]`` and ``g[..., 6, 2]``.
    """
    x = _as_boat_array(s)
    phi, theta, psi = x[..., PHI], x[..., THETA], x[..., PSI]
    _check_pitch(theta, theta_max)
    v2, v3, w1, w2 = x[..., V2], x[..., V3], x[..., W1], x[..., W2]
    R = rotation_columns(phi, theta, psi)
    cf, sf = np.cos(phi), np.sin(phi)
    ct, tt = np.cos(theta), np.tan(theta)
    f = np.stack(
        [
            R[0][1] * v2 + R[0][2] * v3,
            R[1][1] * v2 + R[1][2] * v3,
            R[2][1] * v2 + R[2][2] * v3,
            w1 + w2 * tt * sf,
            w2 * cf,
            w2 * sf / ct,
        ],
        axis=-1,
    )
    zero = np.zeros_like(phi)
    col_v = np.stack([R[0][0], R[1][0], R[2][0], zero, zero, zero], axis=-1)
    col_w = np.stack([zero, zero, zero, tt * cf, -sf, cf / ct], axis=-1)
    g = np.stack([col_v, col_w], axis=-1)
    return f, g


def boat_kinematic_derivative(s, theta_max: float = 1.48) -> np.ndarray:
    """Earth-frame pose rates (p_x', p_y', p_z', phi', theta', psi')."""
    x = _as_boat_array(s)
    f, g = boat_kinematic_drift_and_input(x, theta_max)
    r = np.stack([x[..., V1], x[..., W3]], axis=-1)
    return f + np.einsum("...ij,...j->...i", g, r)


def submerged_volume(p_z, p: BoatParams):
    return p.A_wl * np.clip(p_z, 0.0, p.draft_max)


def buoyancy(p_z, p: BoatParams):
    return p.rho * p.g_grav * submerged_volume(p_z, p) * p.C_b


def boat_forces(s, u, p: BoatParams) -> np.ndarray:
    """Generalised forces and moments (X, Y, Z, K, M, N).

    Quadratic drag uses ``v*|v|`` so it always opposes motion. Buoyancy
    acts upward, which is -z in the north-east-down frame.
    """
    x = _as_boat_array(s)
    uu = u.as_array() if isinstance(u, ThrustCommand) else np.asarray(u, dtype=float)
    dl, dr = uu[..., 0], uu[..., 1]
    half_rho = 0.5 * p.rho
    v1, v2, v3 = x[..., V1], x[..., V2], x[..., V3]
    w1, w2, w3 = x[..., W1], x[..., W2], x[..., W3]
    F_x = half_rho * v1 * np.abs(v1) * p.C_Fx * p.A_x
    F_y = half_rho * v2 * np.abs(v2) * p.C_Fy * p.A_y
    F_z = half_rho * v3 * np.abs(v3) * p.C_Fz * p.A_z
    M_x = half_rho * w1 * np.abs(w1) * p.C_Mx * p.I_x
    M_y = half_rho * w2 * np.abs(w2) * p.C_My * p.I_y
    M_z = half_rho * w3 * np.abs(w3) * p.C_Mz * p.I_z
    F_b = buoyancy(x[..., PZ], p)
    X = (dr + dl) - F_x
    Y = -F_y
    Z = -F_b - F_z
    K = -M_x - p.k_phi * x[..., PHI] * F_b
    M = -M_y - p.k_theta * x[..., THETA] * F_b
    N = 0.5 * (dr - dl) * p.d_motor - M_z
    return np.stack([X, Y, Z, K, M, N], axis=-1)


def boat_dynamic_derivative(s, u, p: BoatParams) -> np.ndarray:
    """Body-frame accelerations (v1', v2', v3', w1', w2', w3')."""
    x = _as_boat_array(s)
    _check_pitch(x[..., THETA], p.theta_max)
    v1, v2, v3 = x[..., V1], x[..., V2], x[..., V3]
    w1, w2, w3 = x[..., W1], x[..., W2], x[..., W3]
    phi, theta = x[..., PHI], x[..., THETA]
    g = p.g_grav
    ct = np.cos(theta)
    F = boat_forces(x, u, p)
    return np.stack(
        [
            -w2 * v3 + w3 * v2 - g * np.sin(theta) + F[..., 0] / p.m,
            -w3 * v1 + w1 * v3 + g * np.sin(phi) * ct + F[..., 1] / p.m,
            -w1 * v2 + w2 * v1 + g * np.cos(phi) * ct + F[..., 2] / p.m,
            (p.c1 * w3 + p.c2 * w1) * w2 + F[..., 3] / p.I_x,
            p.c5 * w1 * w3 - p.c6 * (w1 * w1 - w3 * w3) + F[..., 4] / p.I_y,
            (p.c8 * w1 - p.c2 * w3) * w2 + F[..., 5] / p.I_z,
        ],
        axis=-1,
    )


def boat_derivative(s, u, p: BoatParams, drift=None) -> np.ndarray:
    """Full 12-state derivative; ``drift`` adds an Earth-frame (x, y) velocity."""
    x = _as_boat_array(s)
    dyn = boat_dynamic_derivative(x, u, p)
    kin = boat_kinematic_derivative(x, p.theta_max)
    if drift is not None:
        kin = kin.copy()
        kin[..., 0] += drift[0]
        kin[..., 1] += drift[1]
    return np.concatenate([dyn, kin], axis=-1)


def rest_state(p: BoatParams, p_x: float = 0.0, p_y: float = 0.0, psi: float = 0.0) -> np.ndarray:
    x = np.zeros(BOAT_DIM)
    x[PX], x[PY], x[PZ], x[PSI] = p_x, p_y, p.equilibrium_draft, psi
    return x


# ---------------------------------------------------------------------------
# integration

def rk4_step(
    deriv: Callable[[np.ndarray], np.ndarray],
    x: np.ndarray,
    dt: float,
    angle_idx: Sequence[int] = (),
) -> np.ndarray:
    """One classical Runge-Kutta step of ``x' = deriv(x)``.

    Angles listed in ``angle_idx`` are wrapped to (-pi, pi] afterwards.
    Works on batched states as long as ``deriv`` does.
    """
    if not dt > 0:
        raise ValueError("dt must be > 0")
    x = np.asarray(x, dtype=float)
    k1 = deriv(x)
    if not np.isfinite(k1).all():
        raise IntegrationError(1)
    k2 = deriv(x + 0.5 * dt * k1)
    if not np.isfinite(k2).all():
        raise IntegrationError(2)
    k3 = deriv(x + 0.5 * dt * k2)
    if not np.isfinite(k3).all():
        raise IntegrationError(3)
    k4 = deriv(x + dt * k3)
    if not np.isfinite(k4).all():
        raise IntegrationError(4)
    out = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.isfinite(out).all():
        raise IntegrationError(4, "non-finite updated state")
    if angle_idx:
        idx = list(angle_idx)
        out[..., idx] = wrap_angle(out[..., idx])
    return out


def unicycle_step(x: np.ndarray, r, dt: float) -> np.ndarray:
    rr = np.asarray(r, dtype=float)
    return rk4_step(lambda s: unicycle_derivative(s, rr), x, dt, UNICYCLE_ANGLES)


def boat_step(x: np.ndarray, u, p: BoatParams, dt: float, drift=None) -> np.ndarray:
    uu = np.asarray(u, dtype=float)
    return rk4_step(lambda s: boat_derivative(s, uu, p, drift), x, dt, BOAT_ANGLES)
