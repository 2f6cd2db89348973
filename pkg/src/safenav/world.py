"""2D worlds: circular obstacles, wall segments, ray casting and generation."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class WorldGenerationError(RuntimeError):
    pass


@dataclass
class World:
    """Planar world.

    ``circles`` rows are (cx, cy, radius); ``segments`` rows are
    (x0, y0, x1, y1). ``spawn`` is (x, y, heading).
    """

    bounds: tuple[float, float, float, float]
    circles: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    segments: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))
    target: np.ndarray = field(default_factory=lambda: np.zeros(2))
    target_radius: float = 0.3
    spawn: np.ndarray = field(default_factory=lambda: np.zeros(3))
    spawn_region: tuple[float, float, float, float] | None = None
    label: str = "custom"

    def __post_init__(self):
        self.circles = np.ascontiguousarray(np.asarray(self.circles, dtype=float).reshape(-1, 3))
        self.segments = np.ascontiguousarray(np.asarray(self.segments, dtype=float).reshape(-1, 4))
        self.target = np.asarray(self.target, dtype=float)
        self.spawn = np.asarray(self.spawn, dtype=float)
        self.bounds = tuple(float(b) for b in self.bounds)
        if np.any(self.circles[:, 2] <= 0):
            raise ValueError("circle radii must be > 0")
        if not (self.contains(self.target) and self.contains(self.spawn[:2])):
            raise ValueError("target and spawn must lie inside the world bounds")

    def contains(self, p) -> bool:
        x0, y0, x1, y1 = self.bounds
        return x0 <= p[0] <= x1 and y0 <= p[1] <= y1

    def signed_distance(self, p) -> float:
        """Distance from point ``p`` to the nearest obstacle surface.

        Negative inside a circle; segments only give non-negative values.
        """
        from . import _kernels

        return float(_kernels.clearance(float(p[0]), float(p[1]), self.circles, self.segments))

    def distances(self, pts: np.ndarray) -> np.ndarray:
        """Per-point minimum distance to any obstacle, shape (P,)."""
        pts = np.asarray(pts, dtype=float).reshape(-1, 2)
        best = np.full(len(pts), np.inf)
        if len(self.circles):
            d = np.linalg.norm(pts[:, None, :] - self.circles[None, :, :2], axis=-1) - self.circles[None, :, 2]
            best = np.minimum(best, d.min(axis=1))
        if len(self.segments):
            best = np.minimum(best, _point_segment_distance(pts, self.segments).min(axis=1))
        return best

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "bounds": list(self.bounds),
            "circles": self.circles.tolist(),
            "segments": self.segments.tolist(),
            "target": self.target.tolist(),
            "target_radius": self.target_radius,
            "spawn": self.spawn.tolist(),
            "spawn_region": list(self.spawn_region) if self.spawn_region else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "World":
        return cls(
            bounds=tuple(d["bounds"]),
            circles=np.array(d.get("circles", []), dtype=float).reshape(-1, 3),
            segments=np.array(d.get("segments", []), dtype=float).reshape(-1, 4),
            target=np.array(d["target"], dtype=float),
            target_radius=float(d.get("target_radius", 0.3)),
            spawn=np.array(d["spawn"], dtype=float),
            spawn_region=tuple(d["spawn_region"]) if d.get("spawn_region") else None,
            label=d.get("label", "custom"),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "World":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _point_segment_distance(pts: np.ndarray, segs: np.ndarray) -> np.ndarray:
    a = segs[None, :, :2]
    e = segs[None, :, 2:] - segs[None, :, :2]
    w = pts[:, None, :] - a
    ee = np.maximum(np.sum(e * e, axis=-1), 1e-300)
    t = np.clip(np.sum(w * e, axis=-1) / ee, 0.0, 1.0)
    return np.linalg.norm(w - t[..., None] * e, axis=-1)


def polyline_segments(points) -> np.ndarray:
    pts = np.asarray(points, dtype=float)
    return np.hstack([pts[:-1], pts[1:]])


def cast_rays(world: World, origin, angles: np.ndarray, max_range: float) -> np.ndarray:
    """Range to the first obstacle along each ray, clipped to ``max_range``."""
    from . import _kernels

    return _kernels.raycast(
        float(origin[0]), float(origin[1]), np.ascontiguousarray(angles, dtype=float),
        np.ascontiguousarray(world.circles, dtype=float).reshape(-1, 3),
        np.ascontiguousarray(world.segments, dtype=float).reshape(-1, 4), float(max_range),
    )


def cast_rays_reference(world: World, origin, angles: np.ndarray, max_range: float) -> np.ndarray:
    """Vectorised numpy version of :func:`cast_rays`, kept as a cross-check."""
    origin = np.asarray(origin, dtype=float)[:2]
    D = np.stack([np.cos(angles), np.sin(angles)], axis=-1)
    best = np.full(len(angles), float(max_range))
    circles = world.circles
    if len(circles):
        oc = origin[None, :] - circles[:, :2]
        cc = np.sum(oc * oc, axis=1) - circles[:, 2] ** 2
        b = D @ oc.T
        disc = b * b - cc[None, :]
        hit = disc >= 0.0
        sq = np.sqrt(np.where(hit, disc, 0.0))
        t = -b - sq
        inside = cc < 0.0
        t = np.where(inside[None, :], 0.0, t)
        valid = hit & (t >= 0.0)
        t = np.where(valid, t, np.inf)
        best = np.minimum(best, t.min(axis=1))
    segs = world.segments
    if len(segs):
        A = segs[:, :2]
        E = segs[:, 2:] - A
        AP = A - origin[None, :]
        denom = D[:, 0:1] * E[None, :, 1] - D[:, 1:2] * E[None, :, 0]
        num_t = AP[None, :, 0] * E[None, :, 1] - AP[None, :, 1] * E[None, :, 0]
        num_s = AP[None, :, 0] * D[:, 1:2] - AP[None, :, 1] * D[:, 0:1]
        ok = np.abs(denom) > 1e-12
        safe = np.where(ok, denom, 1.0)
        t = num_t / safe
        s = num_s / safe
        valid = ok & (t >= 0.0) & (s >= 0.0) & (s <= 1.0)
        t = np.where(valid, t, np.inf)
        best = np.minimum(best, t.min(axis=1))
    return best


# ---------------------------------------------------------------------------
# procedural worlds

INDOOR_DEFAULTS = dict(
    size=10.0,
    n_min=8,
    n_max=12,
    r_min=0.15,
    r_max=0.3,
    gap=0.6,
    robot_radius=0.15,
    sigma=0.25,
    min_start_goal=3.0,
    target_radius=0.3,
)

AQUATIC_DEFAULTS = dict(
    width=40.0,
    height=30.0,
    n_islands=(3, 6),
    r_min=1.0,
    r_max=2.5,
    gap=3.0,
    robot_radius=0.5,
    sigma=1.0,
    min_start_goal=15.0,
    target_radius=1.0,
)


def _free_point(rng, world_like, lo, hi, clearance, tries=500):
    for _ in range(tries):
        p = rng.uniform(lo, hi)
        if world_like.distances(p[None, :])[0] >= clearance:
            return p
    return None


def generate_world(kind: str, seed: int, **overrides) -> World:
    """Seeded procedural world of type ``indoor_cluttered`` or ``aquatic_coastline``."""
    rng = np.random.default_rng(seed)
    if kind == "indoor_cluttered":
        return _indoor(rng, {**INDOOR_DEFAULTS, **overrides})
    if kind == "aquatic_coastline":
        return _aquatic(rng, {**AQUATIC_DEFAULTS, **overrides})
    raise ValueError(f"unknown world kind {kind!r}")


def _place_circles(rng, n, lo, hi, r_min, r_max, gap, walls, existing=None, tries=4000):
    circles = [] if existing is None else list(existing)
    attempts = 0
    while len(circles) < n and attempts < tries:
        attempts += 1
        r = rng.uniform(r_min, r_max)
        c = rng.uniform(lo, hi)
        if len(walls) and _point_segment_distance(c[None, :], walls).min() < r + gap:
            continue
        if any(math.hypot(c[0] - o[0], c[1] - o[1]) < r + o[2] + gap for o in circles):
            continue
        circles.append((c[0], c[1], r))
    return circles


def _pick_spawn_target(rng, world_fn, lo, hi, clearance, min_dist, tries=200):
    for _ in range(tries):
        w = world_fn(np.array([lo[0], lo[1]]), np.array([lo[0], lo[1], 0.0]))
        s = _free_point(rng, w, lo, hi, clearance)
        if s is None:
            continue
        t = None
        for _ in range(200):
            cand = _free_point(rng, w, lo, hi, clearance)
            if cand is not None and np.linalg.norm(cand - s) >= min_dist:
                t = cand
                break
        if t is None:
            continue
        return s, t
    raise WorldGenerationError("could not place spawn and target with the required clearance")


def _indoor(rng, cfg) -> World:
    L = cfg["size"]
    corners = [(0, 0), (L, 0), (L, L), (0, L), (0, 0)]
    walls = polyline_segments(corners)
    n = int(rng.integers(cfg["n_min"], cfg["n_max"] + 1))
    for _ in range(20):
        circles = _place_circles(rng, n, np.array([0.0, 0.0]), np.array([L, L]),
                                 cfg["r_min"], cfg["r_max"], cfg["gap"], walls)
        if len(circles) == n:
            break
    else:
        raise WorldGenerationError(f"could not place {n} obstacles")
    circles = np.array(circles)
    clearance = cfg["robot_radius"] + cfg["sigma"]

    def mk(target, spawn):
        return World(bounds=(0, 0, L, L), circles=circles, segments=walls, target=target, spawn=spawn)

    s, t = _pick_spawn_target(rng, mk, np.array([0.0, 0.0]), np.array([L, L]), clearance, cfg["min_start_goal"])
    heading = float(rng.uniform(-math.pi, math.pi))
    return World(
        bounds=(0.0, 0.0, L, L),
        circles=circles,
        segments=walls,
        target=t,
        target_radius=cfg["target_radius"],
        spawn=np.array([s[0], s[1], heading]),
        spawn_region=(0.0, 0.0, L, L),
        label="indoor_cluttered",
    )


def _aquatic(rng, cfg) -> World:
    W, H = cfg["width"], cfg["height"]
    # jagged coastline along the northern edge, open water elsewhere
    xs = np.linspace(0.0, W, 11)
    ys = H - rng.uniform(2.0, 6.0, size=len(xs))
    coast = polyline_segments(np.column_stack([xs, ys]))
    border = polyline_segments([(0, 0), (W, 0), (W, H), (0, H), (0, 0)])
    walls = np.vstack([coast, border])
    lo_i, hi_i = cfg["n_islands"]
    n = int(rng.integers(lo_i, hi_i + 1))
    circles = np.array(
        _place_circles(rng, n, np.array([0.0, 0.0]), np.array([W, H - 6.0]),
                       cfg["r_min"], cfg["r_max"], cfg["gap"], walls)
    ).reshape(-1, 3)
    clearance = cfg["robot_radius"] + cfg["sigma"]
    lo, hi = np.array([0.0, 0.0]), np.array([W, H - 6.0])

    def mk(target, spawn):
        return World(bounds=(0, 0, W, H), circles=circles, segments=walls, target=target, spawn=spawn)

    s, t = _pick_spawn_target(rng, mk, lo, hi, clearance + 1.0, cfg["min_start_goal"])
    heading = float(rng.uniform(-math.pi, math.pi))
    return World(
        bounds=(0.0, 0.0, W, H),
        circles=circles,
        segments=walls,
        target=t,
        target_radius=cfg["target_radius"],
        spawn=np.array([s[0], s[1], heading]),
        spawn_region=(0.0, 0.0, W, H - 6.0),
        label="aquatic_coastline",
    )
