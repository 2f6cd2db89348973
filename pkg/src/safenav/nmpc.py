"""Single-shooting NMPC tracking (v1, w3) references with boat thrusts.

Decision variables are the H thrust pairs. Rollouts integrate the full
12-state model with one RK4 step per prediction interval, batched over all
finite-difference perturbations at once. The optimiser is a diagonally
scaled projected gradient method with a batched backtracking line search,
so the cost never increases between iterations and inputs stay inside the
box bounds exactly.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import _kernels
from .dynamics import BOAT_ANGLES, V1, W3, BoatParams, DynamicsError, boat_derivative, boat_step, rk4_step

log = logging.getLogger(__name__)


class SolverError(RuntimeError):
    def __init__(self, stage: int, message: str):
        super().__init__(f"NMPC rollout failed at prediction stage {stage}: {message}")
        self.stage = stage


@dataclass(frozen=True)
class NMPCConfig:
    H: int = 10
    dt: float = 0.05
    Q: tuple[float, float] = (10.0, 10.0)
    R: tuple[float, float] = (1e-3, 1e-3)
    u_min: float = -10.0
    u_max: float = 10.0
    max_iters: int = 50
    tol: float = 1e-6
    warm_start: bool = True
    fd_step: float = 1e-4
    plant_dt: float = 0.01

    def __post_init__(self):
        if self.H < 1 or not self.dt > 0:
            raise ValueError("NMPC needs H >= 1 and dt > 0")
        if min(self.Q) < 0 or min(self.R) < 0:
            raise ValueError("Q and R diagonals must be >= 0")
        if self.u_min > self.u_max:
            raise ValueError("u_min must be <= u_max")
        object.__setattr__(self, "Q", tuple(float(q) for q in self.Q))
        object.__setattr__(self, "R", tuple(float(r) for r in self.R))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["Q"], d["R"] = list(self.Q), list(self.R)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NMPCConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown nmpc keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class NMPCSolution:
    u_star: np.ndarray
    plan: np.ndarray
    cost: float
    iterations: int
    converged: bool
    cost_history: list[float] = field(default_factory=list)


def rollout_outputs_reference(x0: np.ndarray, U: np.ndarray, cfg: NMPCConfig, params: BoatParams) -> np.ndarray:
    """Tracked outputs (v1, w3) after each input, for a batch of plans.

    ``U`` has shape (B, H, 2); returns (B, H, 2). Plain numpy version used to
    check the compiled rollout.
    """
    B = U.shape[0]
    x = np.broadcast_to(x0, (B, x0.size)).copy()
    Y = np.empty((B, cfg.H, 2))
    for i in range(cfg.H):
        u = U[:, i, :]
        try:
            x = rk4_step(lambda s: boat_derivative(s, u, params), x, cfg.dt, BOAT_ANGLES)
        except DynamicsError as exc:
            raise SolverError(i, str(exc)) from None
        Y[:, i, 0] = x[:, V1]
        Y[:, i, 1] = x[:, W3]
    return Y


def rollout_outputs(x0: np.ndarray, U: np.ndarray, cfg: NMPCConfig, params: BoatParams) -> np.ndarray:
    """Compiled equivalent of :func:`rollout_outputs_reference`."""
    U = np.ascontiguousarray(U, dtype=float).reshape(-1, cfg.H, 2)
    Y = _kernels.rollout_outputs(np.asarray(x0, dtype=float), U, cfg.dt, _kernels.pack_params(params))
    bad = np.isnan(Y[:, :, 0])
    if bad.any():
        raise SolverError(int(np.argmax(bad.any(axis=0))), "pitch guard or non-finite state")
    return Y


def plan_cost_reference(x0, U, r, cfg: NMPCConfig, params: BoatParams) -> np.ndarray:
    Y = rollout_outputs_reference(x0, U, cfg, params)
    e = Y - np.asarray(r, dtype=float)
    return np.sum(e * e * np.asarray(cfg.Q), axis=(1, 2)) + np.sum(U * U * np.asarray(cfg.R), axis=(1, 2))


def plan_cost(x0, U, r, cfg: NMPCConfig, params: BoatParams, packed=None) -> np.ndarray:
    """Sum over the horizon of e'Qe + u'Ru for each plan in the batch.

    Failed rollouts raise :class:`SolverError` with the first failing stage.
    """
    U = np.ascontiguousarray(U, dtype=float).reshape(-1, cfg.H, 2)
    packed = _kernels.pack_params(params) if packed is None else packed
    J = _kernels.rollout_costs(np.asarray(x0, dtype=float), U, float(r[0]), float(r[1]),
                               cfg.Q[0], cfg.Q[1], cfg.R[0], cfg.R[1], cfg.dt, packed)
    if np.isnan(J).any():
        rollout_outputs(x0, U[np.isnan(J)][:1], cfg, params)  # raises with the stage
    return J


def steady_thrust(v1: float, params: BoatParams) -> float:
    """Per-motor thrust balancing surge drag at speed ``v1``."""
    return 0.25 * params.rho * v1 * abs(v1) * params.C_Fx * params.A_x


def _fd_gradient(x0, U, r, cfg, params, packed):
    H = cfg.H
    n = 2 * H
    h = cfg.fd_step * max(cfg.u_max - cfg.u_min, 1e-9)
    flat = U.reshape(n)
    P = np.repeat(flat[None, :], 2 * n, axis=0)
    idx = np.arange(n)
    P[idx, idx] += h
    P[n + idx, idx] -= h
    J = plan_cost(x0, P.reshape(2 * n, H, 2), r, cfg, params, packed)
    return ((J[:n] - J[n:]) / (2 * h)).reshape(H, 2)


def nmpc_solve(x_k, r, cfg: NMPCConfig, params: BoatParams, warm_plan: np.ndarray | None = None) -> NMPCSolution:
    """Optimise the thrust plan for reference ``r = (v1_ref, w3_ref)``."""
    x0 = np.asarray(x_k.as_array() if hasattr(x_k, "as_array") else x_k, dtype=float)
    rr = np.asarray(r.as_array() if hasattr(r, "as_array") else r, dtype=float)
    if abs(x0[10]) >= params.theta_max:
        raise SolverError(0, "initial pitch at the Euler singularity guard")
    H = cfg.H
    if warm_plan is None:
        U = np.full((H, 2), steady_thrust(x0[V1], params))
    else:
        U = np.asarray(warm_plan, dtype=float).reshape(H, 2).copy()
    U = np.clip(U, cfg.u_min, cfg.u_max)

    packed = _kernels.pack_params(params)
    J = float(plan_cost(x0, U[None], rr, cfg, params, packed)[0])
    if not math.isfinite(J):
        raise SolverError(0, "non-finite cost")
    history = [J]
    # later inputs influence fewer stages; scale their steps up accordingly
    precond = (1.0 / (H - np.arange(H)))[:, None] * np.ones((1, 2))
    alphas = 2.0 ** np.arange(4, -16, -1.0)
    span = cfg.u_max - cfg.u_min
    converged = False
    it = 0
    for it in range(1, cfg.max_iters + 1):
        g = _fd_gradient(x0, U, rr, cfg, params, packed)
        d = precond * g
        gnorm = float(np.max(np.abs(d)))
        if gnorm == 0.0:
            converged = True
            it -= 1
            break
        base = span / gnorm
        C = np.clip(U[None] - (base * alphas)[:, None, None] * d[None], cfg.u_min, cfg.u_max)
        try:
            Jc = plan_cost(x0, C, rr, cfg, params, packed)
        except SolverError:
            # aggressive trial steps may hit the pitch guard; score them as rejected
            Jc = _kernels.rollout_costs(x0, np.ascontiguousarray(C), rr[0], rr[1], cfg.Q[0], cfg.Q[1],
                                        cfg.R[0], cfg.R[1], cfg.dt, packed)
        armijo = Jc <= J + 1e-4 * np.sum((C - U[None]) * g[None], axis=(1, 2))
        ok = armijo & (Jc < J) & np.isfinite(Jc)
        if not np.any(ok):
            converged = True
            break
        k = int(np.argmin(np.where(ok, Jc, np.inf)))
        decrease = J - float(Jc[k])
        U, J = C[k], float(Jc[k])
        history.append(J)
        if decrease <= cfg.tol * max(1.0, J):
            converged = True
            break
    return NMPCSolution(U[0].copy(), U, J, it, converged, history)


class NMPCController:
    """Stateful wrapper owning the warm-start buffer for one agent."""

    def __init__(self, cfg: NMPCConfig, params: BoatParams):
        self.cfg = cfg
        self.params = params
        self.plan: np.ndarray | None = None
        self.last: NMPCSolution | None = None

    def reset(self) -> None:
        self.plan = None
        self.last = None

    def __call__(self, x, r) -> np.ndarray:
        warm = None
        if self.cfg.warm_start and self.plan is not None:
            warm = np.vstack([self.plan[1:], self.plan[-1:]])
        sol = nmpc_solve(x, r, self.cfg, self.params, warm)
        self.plan = sol.plan
        self.last = sol
        return sol.u_star


class PassThrough:
    """Velocity-controlled plants take the reference directly as input."""

    def __call__(self, x, r) -> np.ndarray:
        return np.asarray(r.as_array() if hasattr(r, "as_array") else r, dtype=float)

    def reset(self) -> None:
        pass


# ---------------------------------------------------------------------------
# closed-loop reference tracking

@dataclass
class TrackingLog:
    t: np.ndarray
    v1: np.ndarray
    w3: np.ndarray
    v_ref: np.ndarray
    w_ref: np.ndarray
    u: np.ndarray
    cost: np.ndarray
    iterations: np.ndarray
    monotone: bool
    wall_time: float
    error: str | None = None

    @property
    def real_time_factor(self) -> float:
        sim = float(self.t[-1] - self.t[0]) if len(self.t) > 1 else 0.0
        return sim / self.wall_time if self.wall_time > 0 else math.inf

    def rows(self):
        for i in range(len(self.t)):
            yield {
                "t": self.t[i], "v1": self.v1[i], "w3": self.w3[i], "v_ref": self.v_ref[i],
                "w_ref": self.w_ref[i], "u_l": self.u[i, 0], "u_r": self.u[i, 1],
                "cost": self.cost[i], "iterations": int(self.iterations[i]),
            }


def reference_at(schedule, t: float) -> np.ndarray:
    """Piecewise-constant schedule given as [(t_start, v1_ref, w3_ref), ...]."""
    ref = schedule[0]
    for entry in schedule:
        if entry[0] <= t + 1e-12:
            ref = entry
        else:
            break
    return np.array([ref[1], ref[2]], dtype=float)


def track_episode(x0, schedule, cfg: NMPCConfig, params: BoatParams, duration: float,
                  drift=None) -> TrackingLog:
    """Closed-loop run applying u* every control period ``cfg.dt``."""
    x = np.asarray(x0, dtype=float).copy()
    ctrl = NMPCController(cfg, params)
    n_ctrl = int(round(duration / cfg.dt))
    n_sub = max(1, int(round(cfg.dt / cfg.plant_dt)))
    sub_dt = cfg.dt / n_sub
    rows = {k: [] for k in ("t", "v1", "w3", "v_ref", "w_ref", "u", "cost", "it")}
    monotone = True
    error = None
    start = time.perf_counter()
    for k in range(n_ctrl):
        t = k * cfg.dt
        r = reference_at(schedule, t)
        try:
            u = ctrl(x, r)
        except (SolverError, DynamicsError) as exc:
            error = str(exc)
            break
        hist = ctrl.last.cost_history
        if any(b > a for a, b in zip(hist, hist[1:])):
            monotone = False
        rows["t"].append(t)
        rows["v1"].append(x[V1])
        rows["w3"].append(x[W3])
        rows["v_ref"].append(r[0])
        rows["w_ref"].append(r[1])
        rows["u"].append(u)
        rows["cost"].append(ctrl.last.cost)
        rows["it"].append(ctrl.last.iterations)
        try:
            for _ in range(n_sub):
                x = boat_step(x, u, params, sub_dt, drift)
        except DynamicsError as exc:
            error = str(exc)
            break
    wall = time.perf_counter() - start
    return TrackingLog(
        np.array(rows["t"]), np.array(rows["v1"]), np.array(rows["w3"]), np.array(rows["v_ref"]),
        np.array(rows["w_ref"]), np.array(rows["u"]).reshape(-1, 2), np.array(rows["cost"]),
        np.array(rows["it"]), monotone, wall, error,
    )
