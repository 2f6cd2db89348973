"""Interval reachability, branch-and-bound enumeration of unsafe input boxes
and the safe set built from them.

A box is split until it is either certified safe by interval bound
propagation or shrinks below ``min_width`` (relative to the root box). Small
boxes that are not certified are kept as unsafe even when no counterexample
was sampled, so an error can only ever shrink the safe set.
"""

from __future__ import annotations

import enum
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .policy import N_BEAMS, PolicyNetwork

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class IntervalBox:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=float)
        hi = np.asarray(self.hi, dtype=float)
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ValueError("lo and hi must be 1-D arrays of equal length")
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise ValueError("box bounds must be finite")
        if np.any(lo > hi):
            raise ValueError("box has lo > hi")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def dim(self) -> int:
        return self.lo.size

    @property
    def width(self) -> np.ndarray:
        return self.hi - self.lo

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    def volume(self) -> float:
        return float(np.prod(self.width))

    def contains(self, x) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(np.all(x >= self.lo) and np.all(x <= self.hi))

    def contains_box(self, other: "IntervalBox") -> bool:
        return bool(np.all(other.lo >= self.lo) and np.all(other.hi <= self.hi))

    def sample(self, rng, n: int) -> np.ndarray:
        return self.lo + rng.random((n, self.dim)) * self.width

    def to_dict(self) -> dict:
        return {"lo": self.lo.tolist(), "hi": self.hi.tolist()}


@dataclass(frozen=True)
class OutputProperty:
    """Safe iff ``C @ a + b >= 0`` row-wise for the action ``a = (v1, w3)``."""

    C: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        C = np.atleast_2d(np.asarray(self.C, dtype=float))
        b = np.atleast_1d(np.asarray(self.b, dtype=float))
        if C.shape[0] < 1 or C.shape[0] != b.shape[0]:
            raise ValueError("property needs at least one halfplane with matching offsets")
        if not (np.all(np.isfinite(C)) and np.all(np.isfinite(b))):
            raise ValueError("property coefficients must be finite")
        object.__setattr__(self, "C", C)
        object.__setattr__(self, "b", b)

    @classmethod
    def from_halfplanes(cls, halfplanes: Iterable[tuple[Sequence[float], float]]) -> "OutputProperty":
        hp = list(halfplanes)
        return cls(np.array([c for c, _ in hp], dtype=float), np.array([b for _, b in hp], dtype=float))

    def satisfied(self, actions: np.ndarray) -> np.ndarray:
        """Boolean mask over a batch of actions (B, 2)."""
        a = np.atleast_2d(actions)
        return np.all(a @ self.C.T + self.b >= 0.0, axis=1)

    def certified_by(self, out: IntervalBox) -> bool:
        worst = np.minimum(self.C * out.lo, self.C * out.hi).sum(axis=1) + self.b
        return bool(np.all(worst >= 0.0))

    def to_list(self) -> list:
        return [{"c": c.tolist(), "b": float(b)} for c, b in zip(self.C, self.b)]


# ---------------------------------------------------------------------------
# reachability

def _widen(lo, hi, mag):
    # outward rounding guard so float evaluation of the network stays enclosed
    tol = 1e-12 * (1.0 + mag)
    return lo - tol, hi + tol


def interval_layers(net: PolicyNetwork, lo: np.ndarray, hi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Propagate bounds through normalisation and hidden/output layers (no head)."""
    if net.norm_offset is not None:
        lo = (lo - net.norm_offset) / net.norm_scale
        hi = (hi - net.norm_offset) / net.norm_scale
    for layer in net.layers:
        W = layer.weights
        Wp = np.maximum(W, 0.0)
        Wn = np.minimum(W, 0.0)
        new_lo = Wp @ lo + Wn @ hi + layer.bias
        new_hi = Wp @ hi + Wn @ lo + layer.bias
        mag = np.abs(W) @ np.maximum(np.abs(lo), np.abs(hi)) + np.abs(layer.bias)
        lo, hi = _widen(new_lo, new_hi, mag)
        if layer.activation == "relu":
            lo, hi = np.maximum(lo, 0.0), np.maximum(hi, 0.0)
        elif layer.activation == "tanh":
            lo, hi = np.tanh(lo), np.tanh(hi)
    return lo, hi


def interval_forward(net: PolicyNetwork, box: IntervalBox) -> IntervalBox:
    """Sound enclosure of the network's (scaled) outputs over ``box``."""
    if box.dim != net.input_dim:
        raise ValueError(f"box has dimension {box.dim}, network expects {net.input_dim}")
    lo, hi = interval_layers(net, box.lo, box.hi)
    if net.ranges is not None:
        lo, hi = net.head(lo), net.head(hi)
        lo, hi = _widen(lo, hi, np.abs(net.ranges).max(axis=1))
    return IntervalBox(lo, hi)


class Verdict(enum.Enum):
    CERTIFIED_SAFE = "safe"
    COUNTEREXAMPLE = "counterexample"
    UNKNOWN = "unknown"


@dataclass(frozen=True)
class BoxCheck:
    verdict: Verdict
    counterexample: np.ndarray | None = None
    samples: int = 0


def check_box(net: PolicyNetwork, box: IntervalBox, prop: OutputProperty, m: int = 16, rng=None) -> BoxCheck:
    """Certify with intervals, else look for a counterexample among ``m`` points.

    The sampled points are the midpoint plus ``m - 1`` uniform draws.
    """
    if prop.certified_by(interval_forward(net, box)):
        return BoxCheck(Verdict.CERTIFIED_SAFE)
    rng = np.random.default_rng(0) if rng is None else rng
    pts = box.center[None, :]
    if m > 1:
        pts = np.vstack([pts, box.sample(rng, m - 1)])
    ok = prop.satisfied(net(pts))
    if not np.all(ok):
        return BoxCheck(Verdict.COUNTEREXAMPLE, pts[int(np.argmin(ok))].copy(), len(pts))
    return BoxCheck(Verdict.UNKNOWN, None, len(pts))


# ---------------------------------------------------------------------------
# enumeration

@dataclass(frozen=True)
class EnumerationConfig:
    min_width: float = 1.0 / 64.0
    max_leaves: int = 20000
    mc_samples: int = 1000
    check_samples: int = 16
    seed: int = 0

    def to_dict(self) -> dict:
        return dict(min_width=self.min_width, max_leaves=self.max_leaves, mc_samples=self.mc_samples,
                    check_samples=self.check_samples, seed=self.seed)


@dataclass
class UnsafeLeaf:
    box: IntervalBox
    violation_rate: float
    counterexample: np.ndarray | None
    resolved: bool = True


@dataclass
class EnumerationResult:
    root: IntervalBox
    safe_leaves: list[IntervalBox]
    unsafe_leaves: list[UnsafeLeaf]
    stats: dict = field(default_factory=dict)
    incomplete: bool = False

    def to_dict(self) -> dict:
        leaves = [{"lo": b.lo.tolist(), "hi": b.hi.tolist(), "verdict": "safe",
                   "violation_rate": 0.0, "counterexample": None} for b in self.safe_leaves]
        for u in self.unsafe_leaves:
            leaves.append({
                "lo": u.box.lo.tolist(),
                "hi": u.box.hi.tolist(),
                "verdict": "unsafe" if u.resolved else "unresolved",
                "violation_rate": u.violation_rate,
                "counterexample": None if u.counterexample is None else u.counterexample.tolist(),
            })
        leaves.sort(key=lambda d: (d["lo"], d["hi"]))
        return {"root": self.root.to_dict(), "incomplete": self.incomplete, "stats": self.stats, "leaves": leaves}

    @classmethod
    def from_dict(cls, d: dict) -> "EnumerationResult":
        safe, unsafe = [], []
        for leaf in d["leaves"]:
            box = IntervalBox(np.array(leaf["lo"]), np.array(leaf["hi"]))
            if leaf["verdict"] == "safe":
                safe.append(box)
            else:
                cx = leaf.get("counterexample")
                unsafe.append(UnsafeLeaf(box, float(leaf["violation_rate"]),
                                         None if cx is None else np.array(cx), leaf["verdict"] == "unsafe"))
        root = IntervalBox(np.array(d["root"]["lo"]), np.array(d["root"]["hi"]))
        return cls(root, safe, unsafe, dict(d.get("stats", {})), bool(d.get("incomplete", False)))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "EnumerationResult":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _box_rng(seed: int, tag: int, path: tuple[int, ...]):
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(tag,) + path))


def enumerate_unsafe(net: PolicyNetwork, root: IntervalBox, prop: OutputProperty,
                     cfg: EnumerationConfig = EnumerationConfig()) -> EnumerationResult:
    """Partition ``root`` into certified-safe and (conservatively) unsafe leaves."""
    if root.dim != net.input_dim:
        raise ValueError(f"root box has dimension {root.dim}, network expects {net.input_dim}")
    w0 = root.width
    active = w0 > 0
    if not np.any(active):
        raise ValueError("root box is a single point; give it a non-zero width")
    scale = np.where(active, w0, 1.0)

    safe: list[IntervalBox] = []
    unsafe: list[tuple[IntervalBox, np.ndarray | None, bool, tuple]] = []
    stack: list[tuple[IntervalBox, tuple[int, ...]]] = [(root, ())]
    splits = samples = 0
    incomplete = False

    while stack:
        box, path = stack.pop()
        chk = check_box(net, box, prop, cfg.check_samples, _box_rng(cfg.seed, 0, path))
        samples += chk.samples
        if chk.verdict is Verdict.CERTIFIED_SAFE:
            safe.append(box)
            continue
        rel = np.where(active, box.width / scale, 0.0)
        if rel.max() <= cfg.min_width * (1.0 + 1e-9):
            unsafe.append((box, chk.counterexample, True, path))
            continue
        if len(safe) + len(unsafe) + len(stack) + 2 > cfg.max_leaves:
            incomplete = True
            unsafe.append((box, chk.counterexample, False, path))
            continue
        k = int(np.argmax(rel))
        mid = box.lo[k] + 0.5 * box.width[k]
        hi_left = box.hi.copy()
        hi_left[k] = mid
        lo_right = box.lo.copy()
        lo_right[k] = mid
        splits += 1
        stack.append((IntervalBox(lo_right, box.hi), path + (1,)))
        stack.append((IntervalBox(box.lo, hi_left), path + (0,)))

    leaves: list[UnsafeLeaf] = []
    for box, cx, resolved, path in unsafe:
        rate = 0.0
        if cfg.mc_samples > 0:
            pts = box.sample(_box_rng(cfg.seed, 1, path), cfg.mc_samples)
            ok = prop.satisfied(net(pts))
            samples += cfg.mc_samples
            rate = float(1.0 - ok.mean())
            if cx is None and not np.all(ok):
                cx = pts[int(np.argmin(ok))].copy()
        leaves.append(UnsafeLeaf(box, rate, cx, resolved))

    safe.sort(key=lambda b: (b.lo.tolist(), b.hi.tolist()))
    leaves.sort(key=lambda u: (u.box.lo.tolist(), u.box.hi.tolist()))
    stats = {"splits": splits, "certificates": len(safe), "samples": samples,
             "safe_leaves": len(safe), "unsafe_leaves": len(leaves)}
    if incomplete:
        log.warning("enumeration stopped at max_leaves=%d; unresolved boxes kept as unsafe", cfg.max_leaves)
    return EnumerationResult(root, safe, leaves, stats, incomplete)


# ---------------------------------------------------------------------------
# safe set

@dataclass
class SafeRegion:
    root: IntervalBox
    unsafe: list[IntervalBox]
    p_area: np.ndarray  # (K, 2) footprint centroids


@dataclass
class UnsafeMatch:
    box: IntervalBox
    p_area: np.ndarray
    distance: float


@dataclass
class SafeSet:
    regions: list[SafeRegion]
    position_indices: tuple[int, int] = (N_BEAMS, N_BEAMS + 1)

    def __post_init__(self):
        boxes = [b for r in self.regions for b in r.unsafe]
        i, j = self.position_indices
        self._boxes = boxes
        if boxes:
            self._lo = np.array([b.lo for b in boxes])
            self._hi = np.array([b.hi for b in boxes])
            self._fp_lo = self._lo[:, [i, j]]
            self._fp_hi = self._hi[:, [i, j]]
            self._centroids = 0.5 * (self._fp_lo + self._fp_hi)
        else:
            self._fp_lo = self._fp_hi = self._centroids = np.zeros((0, 2))

    @property
    def unsafe_boxes(self) -> list[IntervalBox]:
        return self._boxes

    @property
    def footprints(self) -> tuple[np.ndarray, np.ndarray]:
        return self._fp_lo, self._fp_hi

    @property
    def centroids(self) -> np.ndarray:
        return self._centroids

    def contains(self, obs) -> bool:
        """Inside some root region and outside every unsafe box (boxes are closed)."""
        x = np.asarray(obs, dtype=float)
        if not any(r.root.contains(x) for r in self.regions):
            return False
        if self._boxes:
            inside = np.all((x >= self._lo) & (x <= self._hi), axis=1)
            return not bool(np.any(inside))
        return True

    def to_dict(self) -> dict:
        return {
            "position_indices": list(self.position_indices),
            "regions": [
                {"root": r.root.to_dict(), "unsafe": [b.to_dict() for b in r.unsafe], "p_area": r.p_area.tolist()}
                for r in self.regions
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SafeSet":
        regions = []
        for r in d["regions"]:
            boxes = [IntervalBox(np.array(b["lo"]), np.array(b["hi"])) for b in r["unsafe"]]
            regions.append(SafeRegion(IntervalBox(np.array(r["root"]["lo"]), np.array(r["root"]["hi"])),
                                      boxes, np.array(r["p_area"], dtype=float).reshape(-1, 2)))
        return cls(regions, tuple(d.get("position_indices", (N_BEAMS, N_BEAMS + 1))))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()) + "\n")

    @classmethod
    def load(cls, path) -> "SafeSet":
        return cls.from_dict(json.loads(Path(path).read_text()))


def build_safe_set(regions: Sequence[tuple[IntervalBox, EnumerationResult]],
                   position_indices: tuple[int, int] = (N_BEAMS, N_BEAMS + 1),
                   allow_incomplete: bool = False) -> SafeSet:
    """Collect unsafe leaves per root region and their footprint centroids."""
    out = []
    i, j = position_indices
    for root, res in regions:
        if res.incomplete and not allow_incomplete:
            raise ValueError("enumeration result is incomplete; pass allow_incomplete=True to keep "
                             "its unresolved boxes as unsafe")
        boxes = [u.box for u in res.unsafe_leaves]
        p_area = np.array([[b.center[i], b.center[j]] for b in boxes]).reshape(-1, 2)
        out.append(SafeRegion(root, boxes, p_area))
    for a in range(len(out)):
        for b in range(a + 1, len(out)):
            ra, rb = out[a].root, out[b].root
            if np.all(ra.lo <= rb.hi) and np.all(rb.lo <= ra.hi):
                log.info("regions %d and %d overlap; unsafe boxes take precedence", a, b)
    return SafeSet(out, tuple(position_indices))


def match_unsafe_regions(obs, safe_set: SafeSet | None, r_look: float = 1.0) -> list[UnsafeMatch]:
    """Unsafe boxes whose position footprint lies within ``r_look`` of the agent, nearest first."""
    if safe_set is None or not safe_set.unsafe_boxes:
        return []
    x = np.asarray(obs.as_array() if hasattr(obs, "as_array") else obs, dtype=float)
    i, j = safe_set.position_indices
    p = np.array([x[i], x[j]])
    lo, hi = safe_set.footprints
    gap = np.maximum(np.maximum(lo - p, p - hi), 0.0)
    dist = np.hypot(gap[:, 0], gap[:, 1])
    idx = np.flatnonzero(dist <= r_look)
    idx = idx[np.argsort(dist[idx], kind="stable")]
    boxes = safe_set.unsafe_boxes
    return [UnsafeMatch(boxes[k], safe_set.centroids[k].copy(), float(dist[k])) for k in idx]


# ---------------------------------------------------------------------------
# density map

def _union_area(rects: list[tuple[float, float, float, float]]) -> float:
    if not rects:
        return 0.0
    if len(rects) == 1:
        x0, y0, x1, y1 = rects[0]
        return (x1 - x0) * (y1 - y0)
    xs = sorted({r[0] for r in rects} | {r[2] for r in rects})
    area = 0.0
    for a, b in zip(xs[:-1], xs[1:]):
        if b <= a:
            continue
        spans = sorted((r[1], r[3]) for r in rects if r[0] <= a and r[2] >= b)
        covered = 0.0
        cur_lo = cur_hi = None
        for lo, hi in spans:
            if cur_hi is None or lo > cur_hi:
                if cur_hi is not None:
                    covered += cur_hi - cur_lo
                cur_lo, cur_hi = lo, hi
            else:
                cur_hi = max(cur_hi, hi)
        if cur_hi is not None:
            covered += cur_hi - cur_lo
        area += (b - a) * covered
    return area


def density_map(safe_set: SafeSet, bounds: Sequence[float], resolution: float) -> np.ndarray:
    """Fraction of each grid cell covered by unsafe footprints.

    ``resolution`` is cells per metre; row 0 is the cell row at ``y_min``.
    """
    if not resolution > 0:
        raise ValueError("resolution must be > 0")
    x0, y0, x1, y1 = (float(b) for b in bounds)
    cell = 1.0 / resolution
    nx = max(1, int(math.ceil((x1 - x0) * resolution - 1e-9)))
    ny = max(1, int(math.ceil((y1 - y0) * resolution - 1e-9)))
    grid = np.zeros((ny, nx))
    lo, hi = safe_set.footprints
    per_cell: dict[tuple[int, int], list] = {}
    for (ax, ay), (bx, by) in zip(lo, hi):
        if bx <= ax or by <= ay:
            continue
        i0 = max(0, int(math.floor((ax - x0) / cell)))
        i1 = min(nx - 1, int(math.ceil((bx - x0) / cell)) - 1)
        j0 = max(0, int(math.floor((ay - y0) / cell)))
        j1 = min(ny - 1, int(math.ceil((by - y0) / cell)) - 1)
        for j in range(j0, j1 + 1):
            cy0, cy1 = y0 + j * cell, y0 + (j + 1) * cell
            for i in range(i0, i1 + 1):
                cx0, cx1 = x0 + i * cell, x0 + (i + 1) * cell
                r = (max(ax, cx0), max(ay, cy0), min(bx, cx1), min(by, cy1))
                if r[2] > r[0] and r[3] > r[1]:
                    per_cell.setdefault((j, i), []).append(r)
    for (j, i), rects in per_cell.items():
        grid[j, i] = min(1.0, _union_area(rects) / (cell * cell))
    return grid


def write_density_map(path, grid: np.ndarray, bounds: Sequence[float], resolution: float) -> None:
    ny, nx = grid.shape
    lines = [
        "# unsafe-coverage density map",
        f"# bounds {' '.join(repr(float(b)) for b in bounds)}",
        f"# resolution {float(resolution)!r} cells/m",
        f"# rows {ny} cols {nx} (row 0 = y_min, col 0 = x_min)",
    ]
    lines += [" ".join(f"{v:.6f}" for v in row) for row in grid]
    Path(path).write_text("\n".join(lines) + "\n")


def read_density_map(path) -> tuple[np.ndarray, dict]:
    meta: dict = {}
    rows = []
    for line in Path(path).read_text().splitlines():
        if line.startswith("#"):
            parts = line[1:].split()
            if parts and parts[0] == "bounds":
                meta["bounds"] = [float(v) for v in parts[1:5]]
            elif parts and parts[0] == "resolution":
                meta["resolution"] = float(parts[1])
            continue
        if line.strip():
            rows.append([float(v) for v in line.split()])
    return np.array(rows), meta


# ---------------------------------------------------------------------------
# harvesting unsafe (state, action) pairs

LEFT_CONES = range(1, 8)
RIGHT_CONES = range(8, N_BEAMS)


def property_for_observation(obs: np.ndarray, v_slow: float = 0.1) -> OutputProperty:
    """Cone heuristic: obstacle left -> no left turn, right -> no right turn, ahead -> slow down."""
    k = int(np.argmin(np.asarray(obs)[:N_BEAMS]))
    if k in LEFT_CONES:
        return OutputProperty.from_halfplanes([((0.0, -1.0), 0.0)])
    if k in RIGHT_CONES:
        return OutputProperty.from_halfplanes([((0.0, 1.0), 0.0)])
    return OutputProperty.from_halfplanes([((-1.0, 0.0), v_slow)])


def neighbourhood_box(obs: np.ndarray, epsilon, feature_ranges: np.ndarray) -> IntervalBox:
    obs = np.asarray(obs, dtype=float)
    fr = np.asarray(feature_ranges, dtype=float)
    eps = np.broadcast_to(np.asarray(epsilon, dtype=float), obs.shape)
    if np.any(eps < 0):
        raise ValueError("epsilon must be non-negative")
    half = eps * (fr[:, 1] - fr[:, 0])
    lo = np.maximum(obs - half, fr[:, 0])
    hi = np.minimum(obs + half, fr[:, 1])
    lo = np.minimum(lo, obs)
    hi = np.maximum(hi, obs)
    if not np.any(hi > lo):
        raise ValueError("epsilon gives a degenerate point box")
    return IntervalBox(lo, hi)


def harvest_unsafe_pairs(episode_logs, epsilon, feature_ranges, v_slow: float = 0.1) -> list[tuple[IntervalBox, OutputProperty]]:
    """Neighbourhood boxes and properties around each pre-collision observation.

    ``episode_logs`` is an iterable of episodes, each a sequence of step
    records with keys ``obs`` and ``collision``; the record flagged as the
    collision holds the observation the colliding action was chosen from.
    """
    if not np.any(np.asarray(epsilon, dtype=float) > 0):
        raise ValueError("epsilon gives a degenerate point box")
    pairs = []
    for episode in episode_logs:
        for rec in episode:
            if rec.get("collision"):
                obs = np.asarray(rec["obs"], dtype=float)
                pairs.append((neighbourhood_box(obs, epsilon, feature_ranges), property_for_observation(obs, v_slow)))
                break
    return pairs


def property_file_dict(box: IntervalBox, prop: OutputProperty) -> dict:
    return {"box": box.to_dict(), "halfplanes": prop.to_list()}


def load_property_file(path) -> tuple[IntervalBox, OutputProperty]:
    d = json.loads(Path(path).read_text())
    box = IntervalBox(np.array(d["box"]["lo"], dtype=float), np.array(d["box"]["hi"], dtype=float))
    prop = OutputProperty.from_halfplanes((hp["c"], hp["b"]) for hp in d["halfplanes"])
    return box, prop
