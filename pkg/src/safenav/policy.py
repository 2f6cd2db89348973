"""Policy networks, observation construction and scripted stand-in policies.

Observation layout (fixed)::

    [beam_0 .. beam_14, pose block, target_distance, target_heading]

The pose block is (p_x, p_y, theta) for the unicycle (input_dim 20) and
(p_x, p_y, p_z, phi, theta, psi) for the boat (input_dim 23). Beam ``k``
is the mean range over a 24 degree cone centred on ``heading + k*24deg``,
so beam 0 looks straight ahead and beams 1..7 sweep the left side.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .dynamics import ReferenceCommand, wrap_scalar
from .world import World, cast_rays

N_BEAMS = 15
CONE_WIDTH = 2.0 * math.pi / N_BEAMS
ACTIVATIONS = ("relu", "tanh", "linear")


class NetworkFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Layer:
    weights: np.ndarray  # (rows=out, cols=in)
    bias: np.ndarray
    activation: str = "linear"


@dataclass(frozen=True)
class PolicyNetwork:
    """Feed-forward network with an optional tanh head scaled to ``ranges``.

    ``ranges`` is ((v_lo, v_hi), (w_lo, w_hi)); when it is ``None`` the raw
    last-layer output is returned unchanged.
    """

    layers: tuple[Layer, ...]
    ranges: np.ndarray | None = None
    norm_offset: np.ndarray | None = None
    norm_scale: np.ndarray | None = None

    @property
    def input_dim(self) -> int:
        return self.layers[0].weights.shape[1]

    @property
    def output_dim(self) -> int:
        return self.layers[-1].weights.shape[0]

    def normalize(self, x: np.ndarray) -> np.ndarray:
        if self.norm_offset is not None:
            x = (x - self.norm_offset) / self.norm_scale
        return x

    def raw(self, x: np.ndarray) -> np.ndarray:
        """Network output before the tanh head; ``x`` may be batched (B, n)."""
        z = self.normalize(np.asarray(x, dtype=float))
        for layer in self.layers:
            z = z @ layer.weights.T + layer.bias
            z = _activate(z, layer.activation)
        return z

    def head(self, z: np.ndarray) -> np.ndarray:
        if self.ranges is None:
            return z
        lo, hi = self.ranges[:, 0], self.ranges[:, 1]
        return lo + (hi - lo) * 0.5 * (np.tanh(z) + 1.0)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.head(self.raw(x))

    def to_dict(self) -> dict:
        d: dict = {"input_dim": self.input_dim}
        d["ranges"] = None if self.ranges is None else self.ranges.tolist()
        if self.norm_offset is not None:
            d["normalization"] = {"offset": self.norm_offset.tolist(), "scale": self.norm_scale.tolist()}
        d["layers"] = [
            {
                "rows": int(l.weights.shape[0]),
                "cols": int(l.weights.shape[1]),
                "weights": l.weights.ravel().tolist(),
                "bias": l.bias.tolist(),
                "activation": l.activation,
            }
            for l in self.layers
        ]
        return d


def _activate(z, kind: str):
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "tanh":
        return np.tanh(z)
    return z


def network_from_dict(doc: dict) -> PolicyNetwork:
    try:
        raw_layers = doc["layers"]
        input_dim = int(doc["input_dim"])
    except (KeyError, TypeError, ValueError) as exc:
        raise NetworkFormatError(f"missing or malformed header field: {exc}") from None
    if not raw_layers:
        raise NetworkFormatError("network has no layers")
    layers = []
    prev = input_dim
    for i, spec in enumerate(raw_layers):
        try:
            rows, cols = int(spec["rows"]), int(spec["cols"])
            w = np.asarray(spec["weights"], dtype=float)
            b = np.asarray(spec["bias"], dtype=float)
            act = spec.get("activation", "linear")
        except (KeyError, TypeError, ValueError) as exc:
            raise NetworkFormatError(f"layer {i}: malformed entry ({exc})") from None
        if act not in ACTIVATIONS:
            raise NetworkFormatError(f"layer {i}: unknown activation {act!r}")
        if cols != prev:
            raise NetworkFormatError(f"layer {i}: expects {cols} inputs but previous layer gives {prev}")
        if w.size != rows * cols:
            raise NetworkFormatError(f"layer {i}: {w.size} weights for a {rows}x{cols} matrix")
        if b.shape != (rows,):
            raise NetworkFormatError(f"layer {i}: bias length {b.size} != rows {rows}")
        bad = np.argwhere(~np.isfinite(w.reshape(rows, cols)))
        if len(bad):
            r, c = bad[0]
            raise NetworkFormatError(f"layer {i}: non-finite weight at row {r}, col {c}")
        if not np.all(np.isfinite(b)):
            raise NetworkFormatError(f"layer {i}: non-finite bias at index {int(np.argmax(~np.isfinite(b)))}")
        layers.append(Layer(w.reshape(rows, cols), b, act))
        prev = rows
    if prev != 2:
        raise NetworkFormatError(f"output dimension must be 2, got {prev}")
    ranges = doc.get("ranges")
    if ranges is not None:
        ranges = np.asarray(ranges, dtype=float)
        if ranges.shape != (2, 2) or not np.all(np.isfinite(ranges)) or np.any(ranges[:, 0] > ranges[:, 1]):
            raise NetworkFormatError("ranges must be [[v_lo, v_hi], [w_lo, w_hi]] with lo <= hi")
    off = scale = None
    norm = doc.get("normalization")
    if norm:
        off = np.asarray(norm["offset"], dtype=float)
        scale = np.asarray(norm["scale"], dtype=float)
        if off.shape != (input_dim,) or scale.shape != (input_dim,) or np.any(scale <= 0):
            raise NetworkFormatError("normalization needs input_dim offsets and positive scales")
    return PolicyNetwork(tuple(layers), ranges, off, scale)


def load_network(path) -> PolicyNetwork:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise NetworkFormatError(f"{path}: not valid JSON ({exc})") from None
    return network_from_dict(doc)


def save_network(net: PolicyNetwork, path) -> None:
    Path(path).write_text(json.dumps(net.to_dict()) + "\n")


def random_network(dims: Sequence[int], rng, activation="relu", ranges=None, scale=1.0) -> PolicyNetwork:
    layers = []
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        act = activation if i < len(dims) - 2 else "linear"
        w = rng.normal(0.0, scale / math.sqrt(a), size=(b, a))
        layers.append(Layer(w, rng.normal(0.0, 0.1, size=b), act))
    return PolicyNetwork(tuple(layers), None if ranges is None else np.asarray(ranges, dtype=float))


def forward(net: PolicyNetwork, obs) -> ReferenceCommand:
    x = obs.as_array() if isinstance(obs, ObservationVector) else np.asarray(obs, dtype=float)
    if x.shape != (net.input_dim,):
        raise ValueError(f"observation has length {x.size}, network expects {net.input_dim}")
    out = net(x)
    return ReferenceCommand(float(out[0]), float(out[1]))


# ---------------------------------------------------------------------------
# observations

@dataclass(frozen=True)
class SensorConfig:
    max_range: float = 3.5
    rays_per_cone: int = 5
    noise_std: float = 0.0


@dataclass(frozen=True)
class ObservationVector:
    beams: np.ndarray
    pose: np.ndarray
    target_distance: float
    target_heading: float

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.beams, self.pose, [self.target_distance, self.target_heading]])

    @property
    def position(self) -> np.ndarray:
        return self.pose[:2]


@dataclass
class Scan:
    """Raw per-ray returns; ``ranges`` is (15, rays_per_cone)."""

    ranges: np.ndarray
    angles: np.ndarray
    origin: np.ndarray
    max_range: float
    extra: dict = field(default_factory=dict)

    def hit_points(self) -> np.ndarray:
        """Earth-frame endpoints of rays that hit something, shape (H, 2)."""
        r = self.ranges.ravel()
        a = self.angles.ravel()
        hit = r < self.max_range
        return self.origin[None, :] + r[hit, None] * np.stack([np.cos(a[hit]), np.sin(a[hit])], axis=-1)

    def cone_min_points(self) -> np.ndarray:
        """Nearest hit point inside each cone (at most 15 points)."""
        idx = np.argmin(self.ranges, axis=1)
        rows = np.arange(self.ranges.shape[0])
        r = self.ranges[rows, idx]
        a = self.angles[rows, idx]
        hit = r < self.max_range
        return self.origin[None, :] + r[hit, None] * np.stack([np.cos(a[hit]), np.sin(a[hit])], axis=-1)


def ray_angles(heading: float, rays_per_cone: int) -> np.ndarray:
    offsets = ((np.arange(rays_per_cone) + 0.5) / rays_per_cone - 0.5) * CONE_WIDTH
    centres = heading + np.arange(N_BEAMS) * CONE_WIDTH
    return centres[:, None] + offsets[None, :]


def pose_heading(pose: np.ndarray) -> float:
    return float(pose[2] if len(pose) == 3 else pose[5])


def scan_world(world: World, pose, sensor: SensorConfig = SensorConfig(), rng=None) -> Scan:
    pose = np.asarray(pose, dtype=float)
    angles = ray_angles(pose_heading(pose), sensor.rays_per_cone)
    r = cast_rays(world, pose[:2], angles.ravel(), sensor.max_range)
    if sensor.noise_std > 0 and rng is not None:
        r = np.clip(r + rng.normal(0.0, sensor.noise_std, size=r.shape), 0.0, sensor.max_range)
    return Scan(r.reshape(angles.shape), angles, pose[:2].copy(), sensor.max_range)


def observation_from_scan(scan: Scan, pose, target) -> ObservationVector:
    pose = np.asarray(pose, dtype=float)
    beams = np.clip(scan.ranges.mean(axis=1), 0.0, scan.max_range)
    dx = float(target[0]) - pose[0]
    dy = float(target[1]) - pose[1]
    dist = math.hypot(dx, dy)
    heading = 0.0 if dist == 0.0 else wrap_scalar(math.atan2(dy, dx) - pose_heading(pose))
    return ObservationVector(beams, pose.copy(), dist, heading)


def build_observation(world: World, agent_pose, target, sensor: SensorConfig = SensorConfig(), rng=None) -> ObservationVector:
    """Cone-averaged beams, pose block and target distance/heading."""
    scan = scan_world(world, agent_pose, sensor, rng)
    return observation_from_scan(scan, agent_pose, target)


def pose_dim(obs_dim: int) -> int:
    return obs_dim - N_BEAMS - 2


def position_indices(obs_dim: int) -> tuple[int, int]:
    return (N_BEAMS, N_BEAMS + 1)


def feature_ranges(obs_dim: int, bounds, max_range: float, draft_max: float = 0.25) -> np.ndarray:
    """Plausible (lo, hi) per observation entry, used to scale neighbourhood boxes."""
    x0, y0, x1, y1 = (float(b) for b in bounds)
    pi = math.pi
    beams = [(0.0, max_range)] * N_BEAMS
    if pose_dim(obs_dim) == 3:
        pose = [(x0, x1), (y0, y1), (-pi, pi)]
    elif pose_dim(obs_dim) == 6:
        pose = [(x0, x1), (y0, y1), (0.0, draft_max), (-pi, pi), (-pi, pi), (-pi, pi)]
    else:
        raise ValueError(f"observation length {obs_dim} matches neither agent model")
    target = [(0.0, math.hypot(x1 - x0, y1 - y0)), (-pi, pi)]
    return np.array(beams + pose + target, dtype=float)


# ---------------------------------------------------------------------------
# scripted policies

class ScriptedPolicy:
    """Proportional heading controller toward the target.

    ``noisy_goal_seeker`` adds seeded Gaussian noise to (v, w) before
    saturation. The policy keeps its own generator, so a fixed seed gives
    the same command sequence for the same observations.
    """

    KINDS = ("goal_seeker", "noisy_goal_seeker")

    def __init__(self, kind="goal_seeker", v_max=0.5, w_max=1.5, k_heading=2.0,
                 noise_v=0.05, noise_w=0.3, seed=0):
        if kind not in self.KINDS:
            raise ValueError(f"unknown scripted policy {kind!r}")
        self.kind = kind
        self.v_max = v_max
        self.w_max = w_max
        self.k_heading = k_heading
        self.noise_v = noise_v
        self.noise_w = noise_w
        self.rng = np.random.default_rng(seed)

    def __call__(self, obs) -> ReferenceCommand:
        x = obs.as_array() if isinstance(obs, ObservationVector) else np.asarray(obs, dtype=float)
        heading = float(x[-1])
        w = self.k_heading * heading
        v = self.v_max * max(math.cos(heading), 0.0)
        if self.kind == "noisy_goal_seeker":
            v += self.noise_v * self.rng.standard_normal()
            w += self.noise_w * self.rng.standard_normal()
        v = min(max(v, 0.0), self.v_max)
        w = min(max(w, -self.w_max), self.w_max)
        return ReferenceCommand(v, w)


def scripted_policy(obs, kind="goal_seeker", **kwargs) -> ReferenceCommand:
    """One-shot evaluation; pass ``seed`` for the noisy variant."""
    return ScriptedPolicy(kind, **kwargs)(obs)


class NetworkPolicy:
    def __init__(self, net: PolicyNetwork):
        self.net = net

    def __call__(self, obs) -> ReferenceCommand:
        return forward(self.net, obs)
