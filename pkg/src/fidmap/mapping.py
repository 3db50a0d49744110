"""Map artifacts: optimized (or first-observation) tags, trajectory and path graph."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from fidmap.dataset import (
    DEFAULT_G_WORLD,
    FORMAT_VERSION,
    SessionError,
    Waypoint,
    _check_version,
    _get,
    _int,
    _list,
    _parse_json,
    _vec,
    decode_pose,
    dumps,
    encode_pose,
    RecordedSession,
    save_session,
)
from fidmap.graph import GRAVITY_SIGMA, Hyperparams, build_graph, first_observation_tags
from fidmap.optimizer import LmConfig, OptimizationReport, optimize
from fidmap.planner import FLOOR_GAP, JUNCTION_RADIUS, PathGraph, PlanningError, build_path_graph
from fidmap.se3 import Pose, unit_vector


@dataclass
class MapArtifact:
    tags: dict[int, Pose]
    trajectory: list[Pose]
    waypoints: list[Waypoint]
    path_graph: PathGraph
    hyperparams: Hyperparams
    provenance: dict[str, Any] = field(default_factory=dict)
    g_world: np.ndarray = field(default_factory=lambda: np.array(DEFAULT_G_WORLD))

    def __post_init__(self):
        n = len(self.trajectory)
        for wp in self.waypoints:
            if not 0 <= wp.pose_index < n:
                raise SessionError(f"waypoint {wp.name!r} index {wp.pose_index} out of range [0, {n - 1}]")

    def waypoint_position(self, name: str) -> np.ndarray:
        for wp in self.waypoints:
            if wp.name == name:
                return self.trajectory[wp.pose_index].p.copy()
        known = ", ".join(w.name for w in self.waypoints) or "none"
        raise SessionError(f"unknown waypoint {name!r} (known: {known})")


def session_digest(session: RecordedSession) -> str:
    return hashlib.sha256(save_session(session).encode()).hexdigest()


def _finite_or_none(x: float) -> float | None:
    return float(x) if math.isfinite(x) else None


def _assemble(session, tags, trajectory, theta, stats, junction_radius, floor_gap) -> MapArtifact:
    graph = build_path_graph(trajectory, junction_radius, floor_gap)
    provenance = {
        "session_sha256": session_digest(session),
        "num_poses": session.num_poses,
        "num_tags": len(tags),
        "num_tag_observations": len(session.tag_observations),
        "num_junctions": len(graph.junctions),
        "junction_radius": float(junction_radius),
        "floor_gap": float(floor_gap),
        **stats,
    }
    return MapArtifact(tags, trajectory, list(session.waypoints), graph, theta, provenance, session.g_world.copy())


def build_map(
    session: RecordedSession,
    theta: Hyperparams,
    cfg: LmConfig = LmConfig(),
    junction_radius: float = JUNCTION_RADIUS,
    floor_gap: float = FLOOR_GAP,
    gravity_sigma: float = GRAVITY_SIGMA,
) -> tuple[MapArtifact, OptimizationReport]:
    """Optimize the session's factor graph and package the result."""
    graph = build_graph(session, theta, gravity_sigma)
    state, report = optimize(graph, cfg=cfg)
    tags = {t: state.pose(graph.tag_variable(t)) for t in graph.tag_ids}
    trajectory = [state.pose(k) for k in range(graph.num_poses)]
    stats = {
        "optimized": True,
        "iterations": report.iterations,
        "convergence_reason": report.convergence_reason,
        "initial_loss": _finite_or_none(report.initial_loss),
        "final_loss": _finite_or_none(report.final_loss),
    }
    return _assemble(session, tags, trajectory, theta, stats, junction_radius, floor_gap), report


def pre_optimized_map(
    session: RecordedSession,
    theta: Hyperparams,
    junction_radius: float = JUNCTION_RADIUS,
    floor_gap: float = FLOOR_GAP,
) -> MapArtifact:
    """Baseline map: raw VIO trajectory, each tag at its first observation."""
    if not session.tag_observations:
        raise SessionError("session has no tag observations")
    ids = session.tag_ids()
    tags = dict(zip(ids, first_observation_tags(session, ids)))
    return _assemble(session, tags, list(session.vio_poses), theta, {"optimized": False}, junction_radius, floor_gap)


def map_to_dict(artifact: MapArtifact) -> dict:
    return {
        "version": FORMAT_VERSION,
        "g_world": [float(v) for v in artifact.g_world],
        "hyperparams": artifact.hyperparams.to_dict(),
        "tags": [{"tag_id": k, **encode_pose(p)} for k, p in sorted(artifact.tags.items())],
        "trajectory": [encode_pose(p) for p in artifact.trajectory],
        "waypoints": [{"name": w.name, "pose_index": w.pose_index} for w in artifact.waypoints],
        "path_graph": artifact.path_graph.to_dict(),
        "provenance": artifact.provenance,
    }


def save_map(artifact: MapArtifact) -> str:
    return dumps(map_to_dict(artifact))


def load_map(data: bytes | str) -> MapArtifact:
    doc = _parse_json(data)
    _check_version(doc)
    try:
        g_world = unit_vector(_vec(doc.get("g_world", list(DEFAULT_G_WORLD)), 3, "$.g_world"))
    except ValueError as exc:
        raise SessionError(f"$.g_world: {exc}") from None
    tags: dict[int, Pose] = {}
    for k, row in enumerate(_list(_get(doc, "tags", "$"), "$.tags")):
        path = f"$.tags[{k}]"
        tag_id = _int(_get(row, "tag_id", path), f"{path}.tag_id")
        if tag_id in tags:
            raise SessionError(f"{path}.tag_id: duplicate tag id {tag_id}")
        tags[tag_id] = decode_pose(row, path)
    trajectory = [decode_pose(row, f"$.trajectory[{k}]") for k, row in enumerate(_list(_get(doc, "trajectory", "$"), "$.trajectory"))]
    waypoints = []
    for k, row in enumerate(_list(doc.get("waypoints", []), "$.waypoints")):
        path = f"$.waypoints[{k}]"
        name = _get(row, "name", path)
        if not isinstance(name, str):
            raise SessionError(f"{path}.name: expected a string")
        waypoints.append(Waypoint(name, _int(_get(row, "pose_index", path), f"{path}.pose_index")))
    pg = _get(doc, "path_graph", "$")
    nodes = [_vec(n, 3, f"$.path_graph.nodes[{k}]") for k, n in enumerate(_list(_get(pg, "nodes", "$.path_graph"), "$.path_graph.nodes"))]
    edges = []
    for k, e in enumerate(_list(_get(pg, "edges", "$.path_graph"), "$.path_graph.edges")):
        path = f"$.path_graph.edges[{k}]"
        if not isinstance(e, list) or len(e) != 3:
            raise SessionError(f"{path}: expected [i, j, weight]")
        edges.append([_int(e[0], f"{path}[0]"), _int(e[1], f"{path}[1]"), _vec([e[2]], 1, f"{path}[2]")[0]])
    try:
        graph = PathGraph.from_dict({"nodes": nodes, "edges": edges})
        theta = Hyperparams.from_dict(_get(doc, "hyperparams", "$"))
    except (PlanningError, ValueError) as exc:
        raise SessionError(str(exc)) from None
    provenance = doc.get("provenance", {})
    return MapArtifact(tags, trajectory, waypoints, graph, theta, provenance, g_world)
