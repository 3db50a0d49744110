"""Recorded sessions, ground-truth tags, map artifacts and their JSON files.

On disk every pose is ``{"p": [x, y, z], "q": [qx, qy, qz, qw]}``; in memory
orientations are compact quaternions (see :mod:`fidmap.se3`).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from fidmap.se3 import Pose, quat_conj, quat_mul, quat_normalize, quat_rotate, unit_vector

FORMAT_VERSION = 1
DEFAULT_G_WORLD = (0.0, 0.0, -1.0)


class SessionError(ValueError):
    """Malformed or inconsistent input file."""


@dataclass(frozen=True)
class TagObservation:
    pose_index: int
    tag_id: int
    pose_in_phone: Pose

    def __post_init__(self):
        if self.tag_id < 0:
            raise SessionError(f"tag_id must be non-negative, got {self.tag_id}")


@dataclass(frozen=True)
class GravityObservation:
    pose_index: int
    g_phone: np.ndarray


@dataclass(frozen=True)
class Waypoint:
    name: str
    pose_index: int


@dataclass(frozen=True)
class RecordedSession:
    timestamps: tuple[float, ...]
    vio_poses: tuple[Pose, ...]
    tag_observations: tuple[TagObservation, ...] = ()
    gravity_observations: tuple[GravityObservation, ...] = ()
    waypoints: tuple[Waypoint, ...] = ()
    g_world: np.ndarray = field(default_factory=lambda: np.array(DEFAULT_G_WORLD))

    def __post_init__(self):
        object.__setattr__(self, "timestamps", tuple(float(t) for t in self.timestamps))
        object.__setattr__(self, "vio_poses", tuple(self.vio_poses))
        object.__setattr__(self, "tag_observations", tuple(self.tag_observations))
        object.__setattr__(self, "gravity_observations", tuple(self.gravity_observations))
        object.__setattr__(self, "waypoints", tuple(self.waypoints))
        object.__setattr__(self, "g_world", unit_vector(self.g_world))
        self.validate()

    @property
    def num_poses(self) -> int:
        return len(self.vio_poses)

    def validate(self) -> None:
        n = len(self.vio_poses)
        if len(self.timestamps) != n:
            raise SessionError("odometry: timestamp count does not match pose count")
        if n < 2:
            raise SessionError(f"odometry: need at least 2 poses, got {n}")
        for k in range(1, n):
            if not self.timestamps[k] > self.timestamps[k - 1]:
                raise SessionError(f"odometry[{k}].t: timestamps must be strictly increasing")
        for k, obs in enumerate(self.tag_observations):
            if not 0 <= obs.pose_index < n:
                raise SessionError(f"tag_observations[{k}].pose_index {obs.pose_index} out of range [0, {n - 1}]")
        for k, obs in enumerate(self.gravity_observations):
            if not 0 <= obs.pose_index < n:
                raise SessionError(f"gravity[{k}].pose_index {obs.pose_index} out of range [0, {n - 1}]")
        seen = set()
        for k, wp in enumerate(self.waypoints):
            if not 0 <= wp.pose_index < n:
                raise SessionError(f"waypoints[{k}].pose_index {wp.pose_index} out of range [0, {n - 1}]")
            if wp.name in seen:
                raise SessionError(f"waypoints[{k}].name {wp.name!r} is not unique")
            seen.add(wp.name)

    def tag_ids(self) -> list[int]:
        """Unique tag ids in first-observation order."""
        order: dict[int, None] = {}
        for obs in self.time_ordered_tag_observations():
            order.setdefault(obs.tag_id, None)
        return list(order)

    def time_ordered_tag_observations(self) -> list[TagObservation]:
        # stable: ties keep file order
        return sorted(self.tag_observations, key=lambda o: o.pose_index)


@dataclass(frozen=True)
class GroundTruthTags:
    tags: dict[int, Pose]


def derive_odometry_measurements(session: RecordedSession) -> list[Pose]:
    """Relative VIO steps ``m(t, t+1)`` for ``t = 0 .. T-2``."""
    p = np.array([x.p for x in session.vio_poses])
    q = np.array([x.quat for x in session.vio_poses])
    q_inv = quat_conj(q[:-1])
    rel_p = quat_rotate(q_inv, p[1:] - p[:-1])
    rel_q = quat_normalize(quat_mul(q_inv, q[1:]))
    return [Pose(a, b[:3]) for a, b in zip(rel_p, rel_q)]


# -- JSON encoding -------------------------------------------------------------


def _finite(x: float, path: str) -> float:
    if isinstance(x, bool) or not isinstance(x, (int, float)):
        raise SessionError(f"{path}: expected a number, got {type(x).__name__}")
    x = float(x)
    if not math.isfinite(x):
        raise SessionError(f"{path}: non-finite value")
    return x


def _vec(obj: Any, n: int, path: str) -> np.ndarray:
    if not isinstance(obj, list) or len(obj) != n:
        raise SessionError(f"{path}: expected a list of {n} numbers")
    return np.array([_finite(v, f"{path}[{k}]") for k, v in enumerate(obj)])


def _int(obj: Any, path: str) -> int:
    if isinstance(obj, bool) or not isinstance(obj, int):
        raise SessionError(f"{path}: expected an integer")
    return obj


def _get(obj: dict, key: str, path: str) -> Any:
    if not isinstance(obj, dict):
        raise SessionError(f"{path}: expected an object")
    if key not in obj:
        raise SessionError(f"{path}.{key}: missing")
    return obj[key]


def _list(obj: Any, path: str) -> list:
    if not isinstance(obj, list):
        raise SessionError(f"{path}: expected a list")
    return obj


def decode_pose(obj: Any, path: str) -> Pose:
    p = _vec(_get(obj, "p", path), 3, f"{path}.p")
    q = _vec(_get(obj, "q", path), 4, f"{path}.q")
    n = np.linalg.norm(q)
    if n < 1e-12:
        raise SessionError(f"{path}.q: zero quaternion")
    if abs(n - 1.0) < 1e-12 and q[3] >= 0:
        # already canonical: keep the stored vector part bit for bit
        return Pose(p, q[:3])
    return Pose.from_quat(p, q)


def encode_pose(pose: Pose) -> dict[str, list[float]]:
    return {"p": [float(v) for v in pose.p], "q": [float(v) for v in pose.quat]}


def _parse_json(data: bytes | str) -> Any:
    try:
        return json.loads(data, parse_constant=_reject_constant)
    except json.JSONDecodeError as exc:
        raise SessionError(f"invalid JSON: {exc}") from exc


def _reject_constant(name: str):
    raise SessionError(f"non-finite constant {name} not permitted")


def _check_version(doc: Any) -> None:
    version = _get(doc, "version", "$")
    if version != FORMAT_VERSION:
        raise SessionError(f"$.version: unsupported version {version!r}")


def session_from_dict(doc: Any) -> RecordedSession:
    _check_version(doc)
    g_world = _vec(doc.get("g_world", list(DEFAULT_G_WORLD)), 3, "$.g_world")
    stamps, poses = [], []
    for k, row in enumerate(_list(_get(doc, "odometry", "$"), "$.odometry")):
        path = f"$.odometry[{k}]"
        stamps.append(_finite(_get(row, "t", path), f"{path}.t"))
        poses.append(decode_pose(row, path))
    tags = []
    for k, row in enumerate(_list(doc.get("tag_observations", []), "$.tag_observations")):
        path = f"$.tag_observations[{k}]"
        tags.append(
            TagObservation(
                _int(_get(row, "pose_index", path), f"{path}.pose_index"),
                _int(_get(row, "tag_id", path), f"{path}.tag_id"),
                decode_pose(row, path),
            )
        )
    gravity = []
    for k, row in enumerate(_list(doc.get("gravity", []), "$.gravity")):
        path = f"$.gravity[{k}]"
        g = _vec(_get(row, "g", path), 3, f"{path}.g")
        try:
            g = unit_vector(g)
        except ValueError as exc:
            raise SessionError(f"{path}.g: {exc}") from None
        gravity.append(GravityObservation(_int(_get(row, "pose_index", path), f"{path}.pose_index"), g))
    waypoints = []
    for k, row in enumerate(_list(doc.get("waypoints", []), "$.waypoints")):
        path = f"$.waypoints[{k}]"
        name = _get(row, "name", path)
        if not isinstance(name, str):
            raise SessionError(f"{path}.name: expected a string")
        waypoints.append(Waypoint(name, _int(_get(row, "pose_index", path), f"{path}.pose_index")))
    try:
        g_world = unit_vector(g_world)
    except ValueError as exc:
        raise SessionError(f"$.g_world: {exc}") from None
    return RecordedSession(stamps, poses, tags, gravity, waypoints, g_world)


def session_to_dict(session: RecordedSession) -> dict:
    return {
        "version": FORMAT_VERSION,
        "g_world": [float(v) for v in session.g_world],
        "odometry": [{"t": t, **encode_pose(p)} for t, p in zip(session.timestamps, session.vio_poses)],
        "tag_observations": [
            {"pose_index": o.pose_index, "tag_id": o.tag_id, **encode_pose(o.pose_in_phone)}
            for o in session.tag_observations
        ],
        "gravity": [{"pose_index": o.pose_index, "g": [float(v) for v in o.g_phone]} for o in session.gravity_observations],
        "waypoints": [{"name": w.name, "pose_index": w.pose_index} for w in session.waypoints],
    }


def load_session(data: bytes | str) -> RecordedSession:
    return session_from_dict(_parse_json(data))


def save_session(session: RecordedSession) -> str:
    return dumps(session_to_dict(session))


def load_gt_tags(data: bytes | str) -> GroundTruthTags:
    doc = _parse_json(data)
    _check_version(doc)
    tags: dict[int, Pose] = {}
    for k, row in enumerate(_list(_get(doc, "tags", "$"), "$.tags")):
        path = f"$.tags[{k}]"
        tag_id = _int(_get(row, "tag_id", path), f"{path}.tag_id")
        if tag_id in tags:
            raise SessionError(f"{path}.tag_id: duplicate tag id {tag_id}")
        tags[tag_id] = decode_pose(row, path)
    return GroundTruthTags(tags)


def save_gt_tags(gt: GroundTruthTags) -> str:
    rows = [{"tag_id": k, **encode_pose(p)} for k, p in sorted(gt.tags.items())]
    return dumps({"version": FORMAT_VERSION, "tags": rows})


def dumps(doc: Any) -> str:
    """Canonical JSON text used for every file this package writes."""
    return json.dumps(doc, indent=1, allow_nan=False) + "\n"
