"""Distance-based control barrier function and the QP action filter.

The barrier is ``h = |p - p_obs|^2 - d_safe^2``. The filter adds the
minimum-norm correction ``r_cbf`` to the policy action ``r_dnn`` so that

    a . (r_dnn + r_cbf) + grad_h . f + gamma * h >= 0

where ``a`` collects the barrier gradient projected on the (v1, w3) input
columns. Position-only barriers have no direct dependence on the turn rate,
so the w3 coefficient is evaluated on a look-ahead point at distance
``lookahead_ell`` along the heading; ``lookahead_ell = 1`` gives the
classic closed-form filter for a unicycle.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .dynamics import PHI, PSI, PX, PY, PZ, THETA, V2, V3, SingularityError, rotation_columns, wrap_scalar
from .verification import SafeSet, match_unsafe_regions

D_SAFE_MODES = ("literal", "consistent_units", "inflated")
DEGENERATE_NORM = 1e-9


class QPInfeasible(RuntimeError):
    pass


@dataclass(frozen=True)
class BarrierContext:
    """Filter configuration block.

    ``v_bounds``/``w_bounds`` are optional actuator limits on the filtered
    reference; when set they enter the QP as extra halfplanes.
    """

    enabled: bool = True
    sigma: float = 0.18
    gamma: float = 1.0
    # The omega coefficient credits turning, which the position barrier does not
    # see; a small value keeps the closed loop forward invariant. 1.0 gives the
    # literal textbook-style coefficient.
    lookahead_ell: float = 0.01
    d_safe_mode: str = "inflated"
    kappa: float = 1.5
    kappa_cap: float = 2.0
    R_look: float = 1.0
    R_sense: float = 2.0
    multi_constraint: bool = False
    w_escape: float = 1.0
    v_bounds: tuple[float, float] | None = None
    w_bounds: tuple[float, float] | None = None

    def __post_init__(self):
        if not (self.sigma > 0 and self.gamma > 0 and self.lookahead_ell > 0):
            raise ValueError("sigma, gamma and lookahead_ell must be > 0")
        if self.d_safe_mode not in D_SAFE_MODES:
            raise ValueError(f"d_safe_mode must be one of {D_SAFE_MODES}")
        for name in ("v_bounds", "w_bounds"):
            v = getattr(self, name)
            if v is not None:
                object.__setattr__(self, name, (float(v[0]), float(v[1])))

    @classmethod
    def for_robot(cls, robot_radius: float, **kw) -> "BarrierContext":
        return cls(sigma=1.2 * robot_radius, **kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        for name in ("v_bounds", "w_bounds"):
            if d[name] is not None:
                d[name] = list(d[name])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BarrierContext":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown filter keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class LinearConstraint:
    """``a . r_cbf + b >= 0`` over the correction r_cbf = (v1_cbf, w3_cbf)."""

    a: np.ndarray
    b: float
    h: float = float("nan")

    @property
    def degenerate(self) -> bool:
        return float(np.hypot(self.a[0], self.a[1])) < DEGENERATE_NORM


def barrier_value(p, p_obs, d_safe: float) -> float:
    p = np.asarray(p, dtype=float)
    q = np.asarray(p_obs, dtype=float)
    diff = p - q
    return float(diff @ diff) - d_safe * d_safe


def _pad3(p) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    return p if p.size == 3 else np.array([p[0], p[1], 0.0])


def barrier_gradient(p, p_obs) -> np.ndarray:
    """Gradient over the pose block (p_x, p_y, p_z, phi, theta, psi)."""
    d = _pad3(p) - _pad3(p_obs)
    return np.array([2 * d[0], 2 * d[1], 2 * d[2], 0.0, 0.0, 0.0])


def compute_d_safe(ctx: BarrierContext, p, p_area=None) -> float:
    """Safety distance, enlarged when an enumerated unsafe area is nearby."""
    if p_area is None:
        return ctx.sigma
    dist = float(np.linalg.norm(np.asarray(p, dtype=float)[:2] - np.asarray(p_area, dtype=float)[:2]))
    if ctx.d_safe_mode == "literal":
        return max(ctx.sigma, dist * dist)
    if ctx.d_safe_mode == "consistent_units":
        return max(ctx.sigma, min(dist, ctx.sigma * ctx.kappa_cap))
    return ctx.sigma * ctx.kappa


def constraint_coeffs_unicycle(s, r_dnn, p_obs, ctx: BarrierContext, d_safe: float | None = None) -> LinearConstraint:
    x = np.asarray(s.as_array() if hasattr(s, "as_array") else s, dtype=float)
    r = np.asarray(r_dnn.as_array() if hasattr(r_dnn, "as_array") else r_dnn, dtype=float)
    d_safe = ctx.sigma if d_safe is None else d_safe
    dx = x[0] - float(p_obs[0])
    dy = x[1] - float(p_obs[1])
    c, s_ = math.cos(x[2]), math.sin(x[2])
    a_v = 2.0 * (dx * c + dy * s_)
    a_w = ctx.lookahead_ell * 2.0 * (-dx * s_ + dy * c)
    h = dx * dx + dy * dy - d_safe * d_safe
    b = a_v * r[0] + a_w * r[1] + ctx.gamma * h
    return LinearConstraint(np.array([a_v, a_w]), float(b), float(h))


def constraint_coeffs_boat(s, r_dnn, p_obs, ctx: BarrierContext, d_safe: float | None = None,
                           theta_max: float = 1.48) -> LinearConstraint:
    x = np.asarray(s.as_array() if hasattr(s, "as_array") else s, dtype=float)
    r = np.asarray(r_dnn.as_array() if hasattr(r_dnn, "as_array") else r_dnn, dtype=float)
    if abs(x[THETA]) >= theta_max:
        raise SingularityError("pitch at the Euler singularity guard")
    d_safe = ctx.sigma if d_safe is None else d_safe
    q = np.asarray(p_obs, dtype=float)
    qz = q[2] if q.size == 3 else x[PZ]
    d = np.array([x[PX] - q[0], x[PY] - q[1], x[PZ] - qz])
    R = rotation_columns(x[PHI], x[THETA], x[PSI])
    col_v = np.array([R[0][0], R[1][0], R[2][0]])
    col_n = np.array([R[0][1], R[1][1], R[2][1]])
    drift_vel = np.array([R[i][1] * x[V2] + R[i][2] * x[V3] for i in range(3)])
    a_v = 2.0 * float(d @ col_v)
    a_w = ctx.lookahead_ell * 2.0 * float(d @ col_n)
    drift = 2.0 * float(d @ drift_vel)
    h = float(d @ d) - d_safe * d_safe
    b = drift + a_v * r[0] + a_w * r[1] + ctx.gamma * h
    return LinearConstraint(np.array([a_v, a_w]), float(b), h)


def solve_qp(c: LinearConstraint) -> np.ndarray:
    """Closed-form min |r|^2 s.t. a.r + b >= 0."""
    if not (np.all(np.isfinite(c.a)) and math.isfinite(c.b)):
        raise ValueError("non-finite constraint")
    if c.b >= 0.0:
        return np.zeros(2)
    if c.degenerate:
        raise QPInfeasible("degenerate constraint: zero gradient with b < 0")
    return (-c.b / float(c.a @ c.a)) * c.a


def solve_qp_multi(constraints, tol: float = 1e-9) -> np.ndarray:
    """Minimum-norm point of an intersection of halfplanes ``a_i . r + b_i >= 0``.

    With two unknowns the optimum has at most two active constraints, so all
    empty, single and pairwise active sets are tried and the smallest
    feasible candidate is returned.
    """
    cons = list(constraints)
    if not cons:
        raise ValueError("need at least one constraint")
    A = np.array([c.a for c in cons], dtype=float)
    b = np.array([c.b for c in cons], dtype=float)
    norms2 = np.sum(A * A, axis=1)
    deg = norms2 < DEGENERATE_NORM ** 2
    if np.any(deg & (b < 0)):
        raise QPInfeasible("degenerate constraint with b < 0")
    A, b, norms2 = A[~deg], b[~deg], norms2[~deg]
    if len(b) == 0 or np.all(b >= 0):
        return np.zeros(2)
    slack_tol = tol * (1.0 + np.abs(b))

    cands = [np.zeros((1, 2)), (-b / norms2)[:, None] * A]
    k = len(b)
    if k >= 2:
        i, j = np.triu_indices(k, 1)
        det = A[i, 0] * A[j, 1] - A[i, 1] * A[j, 0]
        ok = np.abs(det) > 1e-12 * np.sqrt(norms2[i] * norms2[j])
        i, j, det = i[ok], j[ok], det[ok]
        # solve [A_i; A_j] x = [-b_i; -b_j]
        x0 = (-b[i] * A[j, 1] + b[j] * A[i, 1]) / det
        x1 = (-A[i, 0] * b[j] + A[j, 0] * b[i]) / det
        cands.append(np.column_stack([x0, x1]))
    P = np.vstack(cands)
    feas = np.all(P @ A.T + b >= -slack_tol, axis=1)
    if not np.any(feas):
        raise QPInfeasible("halfplane intersection is empty")
    P = P[feas]
    n = np.sum(P * P, axis=1)
    return P[int(np.argmin(n))].copy()


def bound_constraints(r_dnn: np.ndarray, ctx: BarrierContext) -> list[LinearConstraint]:
    """Actuator limits on r = r_dnn + r_cbf written as halfplanes in r_cbf."""
    out = []
    if ctx.v_bounds is not None:
        lo, hi = ctx.v_bounds
        out.append(LinearConstraint(np.array([1.0, 0.0]), float(r_dnn[0] - lo)))
        out.append(LinearConstraint(np.array([-1.0, 0.0]), float(hi - r_dnn[0])))
    if ctx.w_bounds is not None:
        lo, hi = ctx.w_bounds
        out.append(LinearConstraint(np.array([0.0, 1.0]), float(r_dnn[1] - lo)))
        out.append(LinearConstraint(np.array([0.0, -1.0]), float(hi - r_dnn[1])))
    return out


def _within_bounds(r: np.ndarray, ctx: BarrierContext, tol: float = 1e-12) -> bool:
    if ctx.v_bounds is not None and not (ctx.v_bounds[0] - tol <= r[0] <= ctx.v_bounds[1] + tol):
        return False
    if ctx.w_bounds is not None and not (ctx.w_bounds[0] - tol <= r[1] <= ctx.w_bounds[1] + tol):
        return False
    return True


@dataclass
class FilterDiagnostics:
    h: float | None = None
    d_safe: float | None = None
    active: bool = False
    fallback: bool = False
    r_cbf: np.ndarray = field(default_factory=lambda: np.zeros(2))
    n_constraints: int = 0
    p_obs: np.ndarray | None = None
    p_area: np.ndarray | None = None
    nearest_distance: float = math.inf


def filter_action(state, r_dnn, obstacles, safe_set: SafeSet | None, ctx: BarrierContext,
                  obs=None, model: str = "unicycle", theta_max: float = 1.48):
    """Return ``(r, diagnostics)`` with ``r = r_dnn + r_cbf``.

    ``obstacles`` are Earth-frame obstacle points detected by the sensor
    (e.g. nearest ray endpoint per cone). In single mode only the nearest
    one is constrained; ``multi_constraint`` constrains all within R_sense.
    An infeasible QP falls back to stopping and rotating away from the
    nearest obstacle.
    """
    x = np.asarray(state.as_array() if hasattr(state, "as_array") else state, dtype=float)
    r0 = np.asarray(r_dnn.as_array() if hasattr(r_dnn, "as_array") else r_dnn, dtype=float)
    diag = FilterDiagnostics()
    if model == "unicycle":
        pos, heading = x[:2], x[2]
        coeffs = constraint_coeffs_unicycle
        extra = {}
    else:
        pos, heading = x[PX:PY + 1], x[PSI]
        coeffs = constraint_coeffs_boat
        extra = {"theta_max": theta_max}

    pts = np.asarray(obstacles, dtype=float)
    pts = pts.reshape(-1, pts.shape[-1]) if pts.size else np.zeros((0, 2))
    if len(pts):
        dist = np.hypot(pts[:, 0] - pos[0], pts[:, 1] - pos[1])
        near = dist <= ctx.R_sense
        pts, dist = pts[near], dist[near]
    if not ctx.enabled or len(pts) == 0:
        return r0.copy(), diag

    order = np.argsort(dist, kind="stable")
    nearest = pts[order[0]]
    diag.p_obs = nearest.copy()
    diag.nearest_distance = float(dist[order[0]])

    p_area = None
    if obs is not None and safe_set is not None:
        matches = match_unsafe_regions(obs, safe_set, ctx.R_look)
        if matches:
            p_area = matches[0].p_area
    diag.p_area = p_area
    d_safe = compute_d_safe(ctx, pos, p_area)
    diag.d_safe = d_safe

    targets = pts[order] if ctx.multi_constraint else nearest[None, :]
    cons = [coeffs(x, r0, q, ctx, d_safe, **extra) for q in targets]
    diag.h = cons[0].h
    diag.n_constraints = len(cons)

    try:
        if len(cons) == 1:
            r_cbf = solve_qp(cons[0])
            if not _within_bounds(r0 + r_cbf, ctx):
                r_cbf = solve_qp_multi(cons + bound_constraints(r0, ctx))
        else:
            r_cbf = solve_qp_multi(cons)
            if not _within_bounds(r0 + r_cbf, ctx):
                r_cbf = solve_qp_multi(cons + bound_constraints(r0, ctx))
    except QPInfeasible:
        bearing = wrap_scalar(math.atan2(nearest[1] - pos[1], nearest[0] - pos[0]) - heading)
        w = -ctx.w_escape if bearing > 0 else ctx.w_escape
        r = np.array([0.0, w])
        diag.fallback = True
        diag.active = True
        diag.r_cbf = r - r0
        return r, diag

    diag.r_cbf = r_cbf
    diag.active = bool(np.any(r_cbf != 0.0))
    return r0 + r_cbf, diag
