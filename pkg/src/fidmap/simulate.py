"""Synthetic sessions with known ground truth.

A walker follows a polyline at constant step length, facing the direction of
travel. VIO is produced by perturbing each true relative step and chaining
the noisy steps, so drift accumulates the way it does on a phone. Tags are
detected inside a range-limited view cone around the walker's heading.

Randomness comes from numpy's PCG64 bit generator, seeded through
``SeedSequence([seed, stream])`` with a fixed stream id per noise source.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from fidmap import se3
from fidmap.dataset import (
    GravityObservation,
    GroundTruthTags,
    RecordedSession,
    TagObservation,
    Waypoint,
)
from fidmap.se3 import Pose

_STREAM_ODOMETRY = 1
_STREAM_TAGS = 2
_STREAM_GRAVITY = 3


@dataclass(frozen=True)
class NoiseSpec:
    odom_linear_sigma: float = 0.01
    odom_angular_sigma: float = math.radians(0.2)
    tag_position_sigma: float = 0.02
    tag_orientation_sigma: float = math.radians(1.0)
    gravity_sigma: float = math.radians(0.5)

    def __post_init__(self):
        for name, value in self.__dict__.items():
            if not (math.isfinite(value) and value >= 0):
                raise ValueError(f"{name} must be non-negative, got {value}")

    @classmethod
    def zero(cls) -> NoiseSpec:
        return cls(0.0, 0.0, 0.0, 0.0, 0.0)


@dataclass(frozen=True)
class ScenarioSpec:
    waypoints: tuple[tuple[float, float, float], ...]
    speed: float
    tags: tuple[tuple[int, Pose], ...]
    detection_range: float = 3.0
    fov_half_angle_deg: float = 35.0
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    seed: int = 0
    waypoint_names: tuple[str, ...] | None = None
    g_world: tuple[float, float, float] = (0.0, 0.0, -1.0)

    def __post_init__(self):
        object.__setattr__(self, "waypoints", tuple(tuple(float(c) for c in w) for w in self.waypoints))
        object.__setattr__(self, "tags", tuple(self.tags))
        if len(self.waypoints) < 2 or any(len(w) != 3 for w in self.waypoints):
            raise ValueError("scenario needs at least 2 three-dimensional waypoints")
        if not self.speed > 0:
            raise ValueError("speed must be positive")
        if not self.detection_range > 0:
            raise ValueError("detection range must be positive")
        if self.waypoint_names is not None and len(self.waypoint_names) != len(self.waypoints):
            raise ValueError("waypoint_names must name every waypoint")
        ids = [t for t, _ in self.tags]
        if len(set(ids)) != len(ids):
            raise ValueError("tag ids must be unique")

    @classmethod
    def from_dict(cls, doc: dict) -> ScenarioSpec:
        from fidmap.dataset import decode_pose

        noise = NoiseSpec(**doc.get("noise", {}))
        tags = tuple((int(t["tag_id"]), decode_pose(t, f"$.tags[{k}]")) for k, t in enumerate(doc["tags"]))
        names = doc.get("waypoint_names")
        return cls(
            waypoints=tuple(tuple(w) for w in doc["waypoints"]),
            speed=float(doc["speed"]),
            tags=tags,
            detection_range=float(doc.get("detection_range", 3.0)),
            fov_half_angle_deg=float(doc.get("fov_half_angle_deg", 35.0)),
            noise=noise,
            seed=int(doc.get("seed", 0)),
            waypoint_names=tuple(names) if names is not None else None,
            g_world=tuple(doc.get("g_world", (0.0, 0.0, -1.0))),
        )

    def to_dict(self) -> dict:
        from fidmap.dataset import encode_pose

        doc = {
            "waypoints": [list(w) for w in self.waypoints],
            "speed": self.speed,
            "tags": [{"tag_id": t, **encode_pose(p)} for t, p in self.tags],
            "detection_range": self.detection_range,
            "fov_half_angle_deg": self.fov_half_angle_deg,
            "noise": dict(self.noise.__dict__),
            "seed": self.seed,
            "g_world": list(self.g_world),
        }
        if self.waypoint_names is not None:
            doc["waypoint_names"] = list(self.waypoint_names)
        return doc


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed) & (2**64 - 1), stream])))


def _random_rotation(rng: np.random.Generator, sigma: float) -> np.ndarray:
    """Quaternion of a rotation about a uniform random axis, angle ~ N(0, sigma)."""
    axis = rng.standard_normal(3)
    axis /= np.linalg.norm(axis)
    angle = rng.normal(0.0, sigma) if sigma > 0 else 0.0
    return se3.rotvec_to_quat(axis * angle)


def _yaw_pose(position, direction) -> Pose:
    yaw = math.atan2(direction[1], direction[0])
    return se3.rot_z(yaw, position)


def _arc_samples(points: np.ndarray, speed: float) -> list[float]:
    lengths = np.linalg.norm(np.diff(points, axis=0), axis=1)
    total = float(lengths.sum())
    n = int(math.floor(total / speed + 1e-9))
    s = [k * speed for k in range(n + 1)]
    if total - s[-1] > 1e-9:
        s.append(total)
    return s


def generate_true_trajectory(spec: ScenarioSpec) -> list[Pose]:
    """Sample the polyline every ``speed`` meters, facing the direction of travel.

    A sample exactly on a corner takes the heading of the outgoing segment.
    Vertical segments keep the previous heading.
    """
    pts = np.array(spec.waypoints, dtype=float)
    seg = np.diff(pts, axis=0)
    lengths = np.linalg.norm(seg, axis=1)
    starts = np.concatenate([[0.0], np.cumsum(lengths)])
    headings = []
    last = np.array([1.0, 0.0])
    for d in seg:
        if np.hypot(d[0], d[1]) > 1e-12:
            last = d[:2] / np.hypot(d[0], d[1])
        headings.append(last)

    poses = []
    for s in _arc_samples(pts, spec.speed):
        k = int(np.searchsorted(starts, s + 1e-9, side="right") - 1)
        k = min(max(k, 0), len(seg) - 1)
        while lengths[k] == 0 and k > 0:
            k -= 1
        u = 0.0 if lengths[k] == 0 else (s - starts[k]) / lengths[k]
        position = pts[k] + min(u, 1.0) * seg[k]
        poses.append(_yaw_pose(position, headings[k]))
    return poses


def corrupt_odometry(true_poses: list[Pose], noise: NoiseSpec, seed: int) -> list[Pose]:
    """Chain noisy copies of the true relative steps from the true initial pose."""
    rng = _rng(seed, _STREAM_ODOMETRY)
    out = [true_poses[0]]
    for a, b in zip(true_poses[:-1], true_poses[1:]):
        step = se3.relative_pose(a, b)
        dp = rng.normal(0.0, noise.odom_linear_sigma, 3) if noise.odom_linear_sigma > 0 else np.zeros(3)
        dq = _random_rotation(rng, noise.odom_angular_sigma)
        noisy = Pose(step.p + dp, se3.compact(se3.quat_mul(step.quat, dq)))
        out.append(se3.compose(out[-1], noisy))
    return out


def is_visible(pose: Pose, tag_position, detection_range: float, fov_half_angle_deg: float) -> bool:
    offset = np.asarray(tag_position, dtype=float) - pose.p
    dist = float(np.linalg.norm(offset))
    if dist > detection_range or dist < 1e-12:
        return False
    forward = pose.rotation[:, 0]
    cos_angle = float(np.dot(forward, offset) / dist)
    return cos_angle >= math.cos(math.radians(fov_half_angle_deg))


def generate_tag_observations(true_poses: list[Pose], spec: ScenarioSpec, seed: int | None = None):
    """Noisy tag detections (indexed by pose) and the ground-truth tag map."""
    rng = _rng(spec.seed if seed is None else seed, _STREAM_TAGS)
    noise = spec.noise
    observations = []
    for t, pose in enumerate(true_poses):
        for tag_id, tag_pose in spec.tags:
            if not is_visible(pose, tag_pose.p, spec.detection_range, spec.fov_half_angle_deg):
                continue
            m = se3.relative_pose(pose, tag_pose)
            dp = rng.normal(0.0, noise.tag_position_sigma, 3) if noise.tag_position_sigma > 0 else np.zeros(3)
            dq = _random_rotation(rng, noise.tag_orientation_sigma)
            m = Pose(m.p + dp, se3.compact(se3.quat_mul(m.quat, dq)))
            observations.append(TagObservation(t, tag_id, m))
    gt = GroundTruthTags({tag_id: pose for tag_id, pose in spec.tags})
    return observations, gt


def nearest_pose_indices(poses: list[Pose], points) -> list[int]:
    positions = np.array([x.p for x in poses])
    return [int(np.argmin(np.linalg.norm(positions - np.asarray(pt), axis=1))) for pt in points]


def assemble_session(
    vio_poses: list[Pose],
    observations: list[TagObservation],
    true_poses: list[Pose],
    gravity_sigma: float,
    seed: int,
    g_world=(0.0, 0.0, -1.0),
    waypoints: list[Waypoint] = (),
) -> RecordedSession:
    """Attach gravity readings (from the true attitude) and 1 s timestamps."""
    rng = _rng(seed, _STREAM_GRAVITY)
    g_world = se3.unit_vector(g_world)
    gravity = []
    for t, pose in enumerate(true_poses):
        g = se3.predict_gravity(pose, g_world)
        g = se3.quat_rotate(_random_rotation(rng, gravity_sigma), g)
        gravity.append(GravityObservation(t, se3.unit_vector(g)))
    stamps = [float(t) for t in range(len(vio_poses))]
    return RecordedSession(stamps, vio_poses, observations, gravity, list(waypoints), g_world)


@dataclass(frozen=True)
class Simulation:
    session: RecordedSession
    ground_truth: GroundTruthTags
    true_poses: list[Pose]


def simulate(spec: ScenarioSpec, seed: int | None = None) -> Simulation:
    seed = spec.seed if seed is None else seed
    true_poses = generate_true_trajectory(spec)
    vio = corrupt_odometry(true_poses, spec.noise, seed)
    observations, gt = generate_tag_observations(true_poses, spec, seed)
    names = spec.waypoint_names or tuple(f"wp{k}" for k in range(len(spec.waypoints)))
    indices = nearest_pose_indices(true_poses, spec.waypoints)
    waypoints, used = [], set()
    for name, idx in zip(names, indices):
        if name not in used:
            used.add(name)
            waypoints.append(Waypoint(name, idx))
    session = assemble_session(
        vio, observations, true_poses, spec.noise.gravity_sigma, seed, spec.g_world, waypoints
    )
    return Simulation(session, gt, true_poses)


# -- built-in scenarios --------------------------------------------------------


def _wall_tag(tag_id: int, x: float, y: float, z: float, facing_yaw: float) -> tuple[int, Pose]:
    # tag z-axis (its normal) points along facing_yaw, into the corridor
    r = se3.rot_z(facing_yaw).rotation @ se3.rot_y(math.pi / 2).rotation
    return tag_id, Pose.from_matrix(np.block([[r, np.array([[x], [y], [z]])], [np.zeros((1, 3)), np.ones((1, 1))]]))


def corridor_scenario(noise: NoiseSpec | None = None, seed: int = 0) -> ScenarioSpec:
    """Two laps of a 20 m x 5 m corridor loop: 200 poses, 10 wall tags."""
    h = 1.2
    waypoints = [
        (0, 0, h), (20, 0, h), (20, 5, h), (0, 5, h), (0, 0, h),
        (20, 0, h), (20, 5, h), (0, 5, h), (0, 0.5, h),
    ]
    names = ["start", "east", "northeast", "northwest", "lap", "east2", "northeast2", "northwest2", "end"]
    tags = [
        _wall_tag(0, 3.0, -1.0, 1.4, math.pi / 2),
        _wall_tag(1, 8.0, -1.0, 1.3, math.pi / 2),
        _wall_tag(2, 13.0, -1.0, 1.5, math.pi / 2),
        _wall_tag(3, 18.0, -1.0, 1.4, math.pi / 2),
        _wall_tag(4, 21.0, 2.5, 1.3, math.pi),
        _wall_tag(5, 17.0, 6.0, 1.4, -math.pi / 2),
        _wall_tag(6, 12.0, 6.0, 1.5, -math.pi / 2),
        _wall_tag(7, 7.0, 6.0, 1.3, -math.pi / 2),
        _wall_tag(8, 2.0, 6.0, 1.4, -math.pi / 2),
        _wall_tag(9, -1.0, 2.5, 1.5, 0.0),
    ]
    return ScenarioSpec(
        waypoints=tuple(waypoints),
        speed=0.5,
        tags=tuple(tags),
        noise=NoiseSpec() if noise is None else noise,
        seed=seed,
        waypoint_names=tuple(names),
    )


BUILTIN_SCENARIOS = {
    "corridor": corridor_scenario,
    "corridor-clean": lambda: corridor_scenario(noise=NoiseSpec.zero()),
}
