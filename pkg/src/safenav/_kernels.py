"""Compiled inner loops for ray casting and batched boat rollouts.

These mirror ``world.cast_rays`` and ``dynamics.boat_derivative`` exactly;
the tests compare both paths. Keep the two in sync when editing either.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

from .dynamics import BoatParams

PARAM_ORDER = (
    "m", "g_grav", "rho", "A_x", "A_y", "A_z", "I_x", "I_y", "I_z",
    "C_Fx", "C_Fy", "C_Fz", "C_Mx", "C_My", "C_Mz", "C_b", "k_phi", "k_theta",
    "c1", "c2", "c5", "c6", "c8", "d_motor", "A_wl", "draft_max", "theta_max",
)


def pack_params(p: BoatParams) -> np.ndarray:
    return np.array([getattr(p, k) for k in PARAM_ORDER], dtype=np.float64)


@njit(cache=True)
def raycast(ox, oy, angles, circles, segments, max_range):
    n = angles.shape[0]
    out = np.empty(n)
    for k in range(n):
        dx = math.cos(angles[k])
        dy = math.sin(angles[k])
        best = max_range
        for i in range(circles.shape[0]):
            ocx = ox - circles[i, 0]
            ocy = oy - circles[i, 1]
            cc = ocx * ocx + ocy * ocy - circles[i, 2] * circles[i, 2]
            if cc < 0.0:
                best = 0.0
                continue
            b = dx * ocx + dy * ocy
            disc = b * b - cc
            if disc < 0.0:
                continue
            t = -b - math.sqrt(disc)
            if t >= 0.0 and t < best:
                best = t
        for i in range(segments.shape[0]):
            ax = segments[i, 0]
            ay = segments[i, 1]
            ex = segments[i, 2] - ax
            ey = segments[i, 3] - ay
            denom = dx * ey - dy * ex
            if abs(denom) <= 1e-12:
                continue
            apx = ax - ox
            apy = ay - oy
            t = (apx * ey - apy * ex) / denom
            s = (apx * dy - apy * dx) / denom
            if t >= 0.0 and s >= 0.0 and s <= 1.0 and t < best:
                best = t
        out[k] = best
    return out


@njit(cache=True)
def clearance(px, py, circles, segments):
    """Distance from (px, py) to the nearest obstacle surface (negative inside circles)."""
    best = np.inf
    for i in range(circles.shape[0]):
        d = math.hypot(px - circles[i, 0], py - circles[i, 1]) - circles[i, 2]
        if d < best:
            best = d
    for i in range(segments.shape[0]):
        ax = segments[i, 0]
        ay = segments[i, 1]
        ex = segments[i, 2] - ax
        ey = segments[i, 3] - ay
        wx = px - ax
        wy = py - ay
        ee = max(ex * ex + ey * ey, 1e-300)
        t = min(max((wx * ex + wy * ey) / ee, 0.0), 1.0)
        d = math.hypot(wx - t * ex, wy - t * ey)
        if d < best:
            best = d
    return best


@njit(cache=True)
def boat_deriv(x, dl, dr, p, out):
    """Full 12-state derivative; returns False when the pitch guard trips."""
    m, g, rho = p[0], p[1], p[2]
    A_x, A_y, A_z, I_x, I_y, I_z = p[3], p[4], p[5], p[6], p[7], p[8]
    C_Fx, C_Fy, C_Fz, C_Mx, C_My, C_Mz, C_b = p[9], p[10], p[11], p[12], p[13], p[14], p[15]
    k_phi, k_theta = p[16], p[17]
    c1, c2, c5, c6, c8 = p[18], p[19], p[20], p[21], p[22]
    d_motor, A_wl, draft_max, theta_max = p[23], p[24], p[25], p[26]
    v1, v2, v3, w1, w2, w3 = x[0], x[1], x[2], x[3], x[4], x[5]
    pz, phi, theta, psi = x[8], x[9], x[10], x[11]
    if abs(theta) >= theta_max:
        return False
    half_rho = 0.5 * rho
    F_x = half_rho * v1 * abs(v1) * C_Fx * A_x
    F_y = half_rho * v2 * abs(v2) * C_Fy * A_y
    F_z = half_rho * v3 * abs(v3) * C_Fz * A_z
    M_x = half_rho * w1 * abs(w1) * C_Mx * I_x
    M_y = half_rho * w2 * abs(w2) * C_My * I_y
    M_z = half_rho * w3 * abs(w3) * C_Mz * I_z
    draft = min(max(pz, 0.0), draft_max)
    F_b = rho * g * A_wl * draft * C_b
    X = (dr + dl) - F_x
    Y = -F_y
    Z = -F_b - F_z
    K = -M_x - k_phi * phi * F_b
    M = -M_y - k_theta * theta * F_b
    N = 0.5 * (dr - dl) * d_motor - M_z
    cf, sf = math.cos(phi), math.sin(phi)
    ct, st = math.cos(theta), math.sin(theta)
    cp, sp = math.cos(psi), math.sin(psi)
    tt = st / ct
    out[0] = -w2 * v3 + w3 * v2 - g * st + X / m
    out[1] = -w3 * v1 + w1 * v3 + g * sf * ct + Y / m
    out[2] = -w1 * v2 + w2 * v1 + g * cf * ct + Z / m
    out[3] = (c1 * w3 + c2 * w1) * w2 + K / I_x
    out[4] = c5 * w1 * w3 - c6 * (w1 * w1 - w3 * w3) + M / I_y
    out[5] = (c8 * w1 - c2 * w3) * w2 + N / I_z
    a = cp * st * sf - sp * cf
    b = cp * st * cf + sp * sf
    c = sp * st * sf + cp * cf
    d = sp * st * cf - cp * sf
    e = ct * sf
    f = ct * cf
    out[6] = cp * ct * v1 + a * v2 + b * v3
    out[7] = sp * ct * v1 + c * v2 + d * v3
    out[8] = -st * v1 + e * v2 + f * v3
    out[9] = w1 + w2 * tt * sf + w3 * tt * cf
    out[10] = w2 * cf - w3 * sf
    out[11] = w2 * sf / ct + w3 * cf / ct
    return True


@njit(cache=True)
def _wrap(a):
    return math.pi - (math.pi - a) % (2.0 * math.pi)


@njit(cache=True)
def boat_rk4(x, dl, dr, dt, p, out):
    k1 = np.empty(12)
    k2 = np.empty(12)
    k3 = np.empty(12)
    k4 = np.empty(12)
    tmp = np.empty(12)
    if not boat_deriv(x, dl, dr, p, k1):
        return False
    for i in range(12):
        tmp[i] = x[i] + 0.5 * dt * k1[i]
    if not boat_deriv(tmp, dl, dr, p, k2):
        return False
    for i in range(12):
        tmp[i] = x[i] + 0.5 * dt * k2[i]
    if not boat_deriv(tmp, dl, dr, p, k3):
        return False
    for i in range(12):
        tmp[i] = x[i] + dt * k3[i]
    if not boat_deriv(tmp, dl, dr, p, k4):
        return False
    for i in range(12):
        out[i] = x[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
    for i in range(9, 12):
        out[i] = _wrap(out[i])
    for i in range(12):
        if not math.isfinite(out[i]):
            return False
    return True


@njit(cache=True)
def rollout_costs(x0, U, r_v, r_w, q_v, q_w, r_l, r_r, dt, p):
    """Tracking cost for each plan in U (B, H, 2); NaN marks a failed rollout."""
    B = U.shape[0]
    H = U.shape[1]
    costs = np.empty(B)
    x = np.empty(12)
    nxt = np.empty(12)
    for b in range(B):
        for i in range(12):
            x[i] = x0[i]
        J = 0.0
        ok = True
        for k in range(H):
            dl = U[b, k, 0]
            dr = U[b, k, 1]
            if not boat_rk4(x, dl, dr, dt, p, nxt):
                ok = False
                break
            for i in range(12):
                x[i] = nxt[i]
            ev = x[0] - r_v
            ew = x[5] - r_w
            J += q_v * ev * ev + q_w * ew * ew + r_l * dl * dl + r_r * dr * dr
        costs[b] = J if ok else np.nan
    return costs


@njit(cache=True)
def rollout_outputs(x0, U, dt, p):
    B = U.shape[0]
    H = U.shape[1]
    Y = np.full((B, H, 2), np.nan)
    x = np.empty(12)
    nxt = np.empty(12)
    for b in range(B):
        for i in range(12):
            x[i] = x0[i]
        for k in range(H):
            if not boat_rk4(x, U[b, k, 0], U[b, k, 1], dt, p, nxt):
                break
            for i in range(12):
                x[i] = nxt[i]
            Y[b, k, 0] = x[0]
            Y[b, k, 1] = x[5]
    return Y
