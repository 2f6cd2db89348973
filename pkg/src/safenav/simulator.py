"""Episode execution through the full stack and aggregate metrics.

One control step runs: observation -> policy -> optional safety filter ->
NMPC (boat) or direct application (unicycle) -> plant integration with the
disturbance added to the Earth-frame velocity -> collision check.
"""

from __future__ import annotations

import csv
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .cbf import BarrierContext, filter_action
from .dynamics import (BOAT_ANGLES, PX, PY, UNICYCLE_ANGLES, BoatParams, DynamicsError, boat_derivative,
                       rest_state, rk4_step, unicycle_derivative)
from .nmpc import NMPCConfig, NMPCController, SolverError
from .policy import (NetworkPolicy, PolicyNetwork, ScriptedPolicy, SensorConfig, observation_from_scan,
                     scan_world)
from .verification import SafeSet
from .world import World, generate_world

log = logging.getLogger(__name__)

OUTCOMES = ("Success", "Collision", "Timeout")


@dataclass(frozen=True)
class DisturbanceConfig:
    """Constant drift plus a Gaussian gust (both Earth-frame m/s), and range noise (m)."""

    drift: tuple[float, float] = (0.0, 0.0)
    gust_sigma: float = 0.0
    sensor_sigma: float = 0.0

    def __post_init__(self):
        if self.gust_sigma < 0 or self.sensor_sigma < 0:
            raise ValueError("disturbance standard deviations must be >= 0")
        object.__setattr__(self, "drift", tuple(float(v) for v in self.drift))

    def to_dict(self) -> dict:
        return {"drift": list(self.drift), "gust_sigma": self.gust_sigma, "sensor_sigma": self.sensor_sigma}


@dataclass
class StackConfig:
    """Everything needed to run one agent; the policy is rebuilt per episode.

    ``policy`` is either a scripted kind name or a loaded network.
    """

    model: str = "unicycle"
    policy: str | PolicyNetwork = "goal_seeker"
    policy_params: dict = field(default_factory=dict)
    filter: BarrierContext | None = None
    safe_set: SafeSet | None = None
    nmpc: NMPCConfig | None = None
    boat: BoatParams = field(default_factory=BoatParams)
    sensor: SensorConfig = field(default_factory=SensorConfig)
    disturbance: DisturbanceConfig = field(default_factory=DisturbanceConfig)
    robot_radius: float | None = None
    control_dt: float = 0.02
    plant_dt: float = 0.01
    max_steps: int = 2000
    acceptance_radius: float | None = None

    def __post_init__(self):
        if self.model not in ("unicycle", "boat"):
            raise ValueError(f"unknown agent model {self.model!r}")
        if self.model == "boat" and self.nmpc is None:
            raise ValueError("the boat model needs an nmpc block")
        if self.robot_radius is None:
            self.robot_radius = 0.15 if self.model == "unicycle" else 0.5
        if self.model == "boat":
            self.control_dt = self.nmpc.dt
        if not (self.control_dt > 0 and self.plant_dt > 0 and self.max_steps >= 0):
            raise ValueError("control_dt, plant_dt must be > 0 and max_steps >= 0")

    @property
    def filtered(self) -> bool:
        return self.filter is not None and self.filter.enabled

    def make_policy(self, seed):
        if isinstance(self.policy, PolicyNetwork):
            return NetworkPolicy(self.policy)
        return ScriptedPolicy(self.policy, seed=seed, **self.policy_params)

    def initial_state(self, world: World) -> np.ndarray:
        x, y, heading = (float(v) for v in world.spawn[:3])
        if self.model == "unicycle":
            return np.array([x, y, heading])
        return rest_state(self.boat, x, y, heading)


@dataclass
class StepDiagnostics:
    r_dnn: np.ndarray
    r: np.ndarray
    u: np.ndarray
    h: float | None
    d_safe: float | None
    active: bool
    fallback: bool
    clearance: float
    obs: np.ndarray
    collision: bool = False


@dataclass
class EpisodeResult:
    outcome: str
    steps: int
    min_h: float | None
    corrections: int
    min_clearance: float
    seed: tuple = ()
    error: str | None = None
    trajectory: list | None = None

    def summary(self) -> dict:
        d = {k: getattr(self, k) for k in ("outcome", "steps", "min_h", "corrections", "min_clearance", "error")}
        d["seed"] = list(self.seed)
        return d


class Agent:
    """Mutable per-episode agent: plant state, policy and controller."""

    def __init__(self, stack: StackConfig, world: World, seed):
        self.stack = stack
        self.x = stack.initial_state(world)
        self.policy = stack.make_policy(seed)
        self.controller = NMPCController(stack.nmpc, stack.boat) if stack.model == "boat" else None

    @property
    def pose(self) -> np.ndarray:
        return self.x[:3] if self.stack.model == "unicycle" else self.x[PX:]

    @property
    def position(self) -> np.ndarray:
        return self.x[:2] if self.stack.model == "unicycle" else self.x[PX:PY + 1]


def _integrate(stack: StackConfig, x, u, drift, dt):
    if stack.model == "unicycle":
        def deriv(s):
            d = unicycle_derivative(s, u)
            d[0] += drift[0]
            d[1] += drift[1]
            return d
        return rk4_step(deriv, x, dt, UNICYCLE_ANGLES)
    return rk4_step(lambda s: boat_derivative(s, u, stack.boat, drift), x, dt, BOAT_ANGLES)


def step(world: World, agent: Agent, rng: np.random.Generator):
    """Advance one control period; returns the diagnostics of this step."""
    stack = agent.stack
    sensor = stack.sensor
    if stack.disturbance.sensor_sigma > 0:
        sensor = SensorConfig(sensor.max_range, sensor.rays_per_cone, stack.disturbance.sensor_sigma)
    pose = agent.pose
    scan = scan_world(world, pose, sensor, rng)
    obs = observation_from_scan(scan, pose, world.target)
    r_dnn = agent.policy(obs).as_array()

    h = d_safe = None
    active = fallback = False
    r = r_dnn
    if stack.filtered:
        r, diag = filter_action(agent.x, r_dnn, scan.cone_min_points(), stack.safe_set, stack.filter,
                                obs=obs, model=stack.model, theta_max=stack.boat.theta_max)
        h, d_safe, active, fallback = diag.h, diag.d_safe, diag.active, diag.fallback

    u = r if agent.controller is None else agent.controller(agent.x, r)

    dist = stack.disturbance
    drift = np.array(dist.drift, dtype=float)
    if dist.gust_sigma > 0:
        drift = drift + rng.normal(0.0, dist.gust_sigma, size=2)
    n_sub = max(1, int(round(stack.control_dt / stack.plant_dt)))
    sub_dt = stack.control_dt / n_sub
    clearance = math.inf
    collision = False
    for _ in range(n_sub):
        agent.x = _integrate(stack, agent.x, u, drift, sub_dt)
        clearance = min(clearance, world.signed_distance(agent.position))
        if clearance < stack.robot_radius:
            collision = True
            break
    return StepDiagnostics(r_dnn, np.asarray(r, dtype=float), np.asarray(u, dtype=float), h, d_safe,
                           active, fallback, clearance, obs.as_array(), collision)


def _row(t, x, d: StepDiagnostics | None, n_state: int, n_obs: int) -> dict:
    row = {"t": t}
    row.update({f"x{i}": float(x[i]) for i in range(n_state)})
    if d is None:
        return row
    row.update({
        "r_dnn_v": d.r_dnn[0], "r_dnn_w": d.r_dnn[1],
        "r_cbf_v": d.r[0] - d.r_dnn[0], "r_cbf_w": d.r[1] - d.r_dnn[1],
        "r_v": d.r[0], "r_w": d.r[1], "u_0": d.u[0], "u_1": d.u[1],
        "h": "" if d.h is None else d.h, "d_safe": "" if d.d_safe is None else d.d_safe,
        "nearest_obstacle_distance": d.clearance,
        "filter_active": int(d.active), "fallback": int(d.fallback), "collision": int(d.collision),
    })
    row.update({f"obs_{i}": float(v) for i, v in enumerate(d.obs[:n_obs])})
    return row


def run_episode(world: World, stack: StackConfig, seed=0, max_steps: int | None = None,
                record: bool = False) -> EpisodeResult:
    """Run until success, collision or timeout; deterministic given ``seed``."""
    seed_key = tuple(seed) if isinstance(seed, (tuple, list)) else (int(seed),)
    ss = np.random.SeedSequence(list(seed_key))
    env_seq, pol_seq = ss.spawn(2)
    rng = np.random.default_rng(env_seq)
    agent = Agent(stack, world, pol_seq)
    max_steps = stack.max_steps if max_steps is None else max_steps
    accept = world.target_radius if stack.acceptance_radius is None else stack.acceptance_radius
    n_state = agent.x.size
    rows = [] if record else None
    min_h = None
    corrections = 0
    min_clear = world.signed_distance(agent.position)
    outcome, error, k = "Timeout", None, 0
    for k in range(max_steps + 1):
        if float(np.hypot(*(agent.position - world.target))) <= accept:
            outcome = "Success"
            break
        if k == max_steps:
            break
        t = k * stack.control_dt
        x_before = agent.x.copy()
        try:
            d = step(world, agent, rng)
        except (DynamicsError, SolverError, ValueError) as exc:
            error = f"{type(exc).__name__}: {exc}"
            log.warning("episode %s stopped at step %d: %s", seed_key, k, error)
            break
        if rows is not None:
            rows.append(_row(t, x_before, d, n_state, d.obs.size))
        if d.h is not None:
            min_h = d.h if min_h is None else min(min_h, d.h)
        corrections += int(d.active)
        min_clear = min(min_clear, d.clearance)
        if d.collision:
            outcome = "Collision"
            k += 1
            break
    if rows is not None:
        rows.append(_row(k * stack.control_dt, agent.x, None, n_state, 0))
    if stack.filtered and min_h is None:
        min_h = math.inf
    return EpisodeResult(outcome, k, min_h, corrections, float(min_clear), seed_key, error, rows)


def write_trajectory_csv(result: EpisodeResult, path) -> None:
    """Write the recorded rows; the final row carries only t and the state."""
    rows = result.trajectory or []
    cols = []
    for r in rows:
        for c in r:
            if c not in cols:
                cols.append(c)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, restval="", lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({c: (repr(float(v)) if isinstance(v, (float, np.floating)) else v) for c, v in r.items()})


# ---------------------------------------------------------------------------
# evaluation

def episode_world(world_kind: str | World, seed: int, index: int, world_overrides: dict | None = None) -> World:
    if isinstance(world_kind, World):
        return world_kind
    wseed = int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1)[0])
    return generate_world(world_kind, wseed, **(world_overrides or {}))


def _run_one(args):
    world_kind, stack, seed, index, overrides, record = args
    world = episode_world(world_kind, seed, index, overrides)
    return run_episode(world, stack, (int(seed), int(index)), record=record)


def run_batch(world_kind, stack: StackConfig, episodes: int, seeds, world_overrides=None,
              jobs: int | None = 1, record: bool = False) -> list[EpisodeResult]:
    """All (seed, episode) pairs, returned sorted by (seed, index)."""
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    tasks = [(world_kind, stack, s, i, world_overrides, record) for s in seeds for i in range(episodes)]
    if jobs is None:
        jobs = os.cpu_count() or 1
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_run_one, tasks, chunksize=max(1, len(tasks) // (4 * jobs))))
    else:
        results = [_run_one(t) for t in tasks]
    return sorted(results, key=lambda r: r.seed)


@dataclass
class Metrics:
    name: str
    episodes: int
    seeds: list
    success_mean: float
    success_std: float
    collision_mean: float
    collision_std: float
    timeout_mean: float
    timeout_std: float
    errors: int
    min_h: float | None
    corrections: int

    def to_dict(self) -> dict:
        return asdict(self)

    def row(self) -> str:
        mh = "-" if self.min_h is None else f"{self.min_h:.6g}"
        return (f"{self.name:<24} {self.success_mean:6.2f} ± {self.success_std:5.2f}   "
                f"{self.collision_mean:6.2f} ± {self.collision_std:5.2f}   "
                f"{self.timeout_mean:6.2f} ± {self.timeout_std:5.2f}   {mh:>10}")


def aggregate(name: str, results: list[EpisodeResult]) -> Metrics:
    """Percentages per seed, then mean and population std across seeds."""
    results = sorted(results, key=lambda r: r.seed)
    by_seed: dict = {}
    for r in results:
        by_seed.setdefault(r.seed[0], []).append(r)
    rates = {o: [] for o in OUTCOMES}
    for group in by_seed.values():
        for o in OUTCOMES:
            rates[o].append(100.0 * sum(r.outcome == o for r in group) / len(group))
    stats = {o: (float(np.mean(v)), float(np.std(v))) for o, v in rates.items()}
    hs = [r.min_h for r in results if r.min_h is not None]
    return Metrics(
        name, len(results) // max(1, len(by_seed)), sorted(by_seed),
        *stats["Success"], *stats["Collision"], *stats["Timeout"],
        sum(r.error is not None for r in results), min(hs) if hs else None,
        sum(r.corrections for r in results),
    )


def evaluate(world_kind, stacks: dict, episodes: int, seeds, world_overrides=None, jobs: int | None = 1):
    """Metrics table {name: Metrics} plus the raw per-episode results."""
    table, raw = {}, {}
    for name in stacks:
        res = run_batch(world_kind, stacks[name], episodes, seeds, world_overrides, jobs)
        raw[name] = res
        table[name] = aggregate(name, res)
    return table, raw


def format_metrics(table: dict) -> str:
    head = f"{'config':<24} {'success %':>15}   {'collision %':>15}   {'timeout %':>15}   {'min h':>10}"
    return "\n".join([head] + [m.row() for m in table.values()]) + "\n"


__all__ = [
    "DisturbanceConfig", "StackConfig", "StepDiagnostics", "EpisodeResult", "Agent", "Metrics", "step",
    "run_episode", "run_batch", "evaluate", "aggregate", "format_metrics", "write_trajectory_csv",
    "generate_world", "episode_world", "OUTCOMES",
]
