"""Incremental localization against a frozen map.

The localizer keeps a sliding window of recent phone poses joined by odometry
edges. Each step dead-reckons a new pose; a step that sees at least one
mapped tag re-optimizes the window with the map's tag poses held fixed,
seeded from the previous estimates. Before the first such solve the
estimates live in the session's own VIO frame and are flagged unaligned.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Iterator, Sequence

import numpy as np

from fidmap.dataset import RecordedSession
from fidmap.graph import (
    GRAVITY_SIGMA,
    FactorGraph,
    GraphState,
    GravityEdge,
    Hyperparams,
    RelativeEdge,
    importance_from_hyperparams,
)
from fidmap.optimizer import LmConfig, OptimizationReport, optimize_with_fixed_tags
from fidmap.se3 import Pose, compose, inverse, relative_pose

DEFAULT_WINDOW = 50


@dataclass(frozen=True)
class WindowObservation:
    step: int
    tag_id: int
    pose_in_phone: Pose


@dataclass(frozen=True)
class WindowGravity:
    step: int
    g_phone: np.ndarray


@dataclass(frozen=True)
class LocalizationState:
    step: int = -1
    window_start: int = 0
    poses: tuple[Pose, ...] = ()
    increments: tuple[Pose, ...] = ()  # increments[k] joins poses[k] and poses[k + 1]
    observations: tuple[WindowObservation, ...] = ()
    gravity: tuple[WindowGravity, ...] = ()
    aligned: bool = False
    report: OptimizationReport | None = None
    solved: bool = False
    cold_iterations: int | None = None
    unknown_tags: int = 0

    @property
    def pose(self) -> Pose:
        if not self.poses:
            raise ValueError("no steps taken yet")
        return self.poses[-1]

    def record(self) -> dict:
        pose = self.pose
        return {
            "step": self.step,
            "aligned": self.aligned,
            "p": [float(v) for v in pose.p],
            "q": [float(v) for v in pose.quat],
            "solve_iterations": self.report.iterations if self.solved else None,
        }


@dataclass
class Localizer:
    """Per-step localization against ``map_tags`` (tag id -> world pose)."""

    map_tags: dict[int, Pose]
    theta: Hyperparams
    g_world: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, -1.0]))
    window: int = DEFAULT_WINDOW
    cfg: LmConfig = LmConfig()
    gravity_sigma: float = GRAVITY_SIGMA
    compare_cold: bool = False

    def __post_init__(self):
        if self.window < 2:
            raise ValueError(f"window must hold at least 2 poses, got {self.window}")
        self._lam = importance_from_hyperparams(self.theta, self.gravity_sigma)

    def step(
        self,
        state: LocalizationState,
        increment: Pose,
        observations: Sequence[tuple[int, Pose]] = (),
        gravity: Sequence[np.ndarray] = (),
    ) -> LocalizationState:
        """Advance by one VIO increment; ``observations`` are ``(tag_id, pose_in_phone)``."""
        t = state.step + 1
        prev = state.poses[-1] if state.poses else Pose.identity()
        poses = state.poses + (compose(prev, increment),)
        increments = state.increments + ((increment,) if state.poses else ())
        known = [WindowObservation(t, tag, m) for tag, m in observations if tag in self.map_tags]
        obs = state.observations + tuple(known)
        grav = state.gravity + tuple(WindowGravity(t, np.asarray(g, dtype=float)) for g in gravity)
        start = state.window_start
        if len(poses) > self.window:
            # the evicted pose keeps its estimate; the next one becomes the anchor
            drop = len(poses) - self.window
            start += drop
            poses, increments = poses[drop:], increments[drop:]
            obs = tuple(o for o in obs if o.step >= start)
            grav = tuple(g for g in grav if g.step >= start)
        new = replace(
            state,
            step=t,
            window_start=start,
            poses=poses,
            increments=increments,
            observations=obs,
            gravity=grav,
            solved=False,
            cold_iterations=None,
            unknown_tags=state.unknown_tags + len(observations) - len(known),
        )
        if not known:
            return new
        return self._solve(new, known[0], first=not state.aligned)

    def _graph(self, state: LocalizationState, init: Sequence[Pose]) -> FactorGraph:
        lam_odom, lam_tag, lam_grav = self._lam
        n = len(state.poses)
        tag_ids = list(dict.fromkeys(o.tag_id for o in state.observations))
        index = {tag: n + k for k, tag in enumerate(tag_ids)}
        s0 = state.window_start
        odom = [RelativeEdge("odometry", k, k + 1, m, lam_odom) for k, m in enumerate(state.increments)]
        tags = [RelativeEdge("tag", o.step - s0, index[o.tag_id], o.pose_in_phone, lam_tag) for o in state.observations]
        grav = [GravityEdge(g.step - s0, g.g_phone, self.g_world, lam_grav) for g in state.gravity]
        full = list(init) + [self.map_tags[tag] for tag in tag_ids]
        return FactorGraph(n, tag_ids, odom, tags, grav, GraphState.from_poses(full), 0, self.g_world)

    def _aligned_chain(self, state: LocalizationState, obs: WindowObservation) -> list[Pose]:
        """Window shape from raw increments, moved rigidly so the current pose matches ``obs``."""
        chain = [Pose.identity()]
        for m in state.increments:
            chain.append(compose(chain[-1], m))
        current = compose(self.map_tags[obs.tag_id], inverse(obs.pose_in_phone))
        move = compose(current, inverse(chain[-1]))
        return [compose(move, x) for x in chain]

    def _solve(self, state: LocalizationState, obs: WindowObservation, first: bool) -> LocalizationState:
        if first:
            init = self._aligned_chain(state, obs)
            anchor = None
        else:
            init = list(state.poses)
            anchor = 0
        graph = self._graph(state, init)
        solution, report = optimize_with_fixed_tags(graph, self.map_tags, cfg=self.cfg, anchor=anchor)
        cold = None
        if self.compare_cold and not first:
            cold_init = self._aligned_chain(state, obs)
            cold_init[0] = state.poses[0]
            _, cold_report = optimize_with_fixed_tags(
                self._graph(state, cold_init), self.map_tags, cfg=self.cfg, anchor=anchor
            )
            cold = cold_report.iterations
        poses = tuple(solution.pose(k) for k in range(graph.num_poses))
        return replace(state, poses=poses, aligned=True, report=report, solved=True, cold_iterations=cold)


def session_increments(session: RecordedSession) -> list[Pose]:
    """VIO increments for replay; the first one is ``vio[0]`` itself."""
    vio = session.vio_poses
    return [relative_pose(Pose.identity(), vio[0])] + [relative_pose(a, b) for a, b in zip(vio[:-1], vio[1:])]


def replay(session: RecordedSession, localizer: Localizer) -> Iterator[LocalizationState]:
    """Stream a recorded session through ``localizer`` one step at a time."""
    tags: dict[int, list[tuple[int, Pose]]] = {}
    for o in session.tag_observations:
        tags.setdefault(o.pose_index, []).append((o.tag_id, o.pose_in_phone))
    grav: dict[int, list[np.ndarray]] = {}
    for g in session.gravity_observations:
        grav.setdefault(g.pose_index, []).append(g.g_phone)
    state = LocalizationState()
    for t, inc in enumerate(session_increments(session)):
        state = localizer.step(state, inc, tags.get(t, ()), grav.get(t, ()))
        yield state


def records_to_jsonl(states: Sequence[LocalizationState]) -> str:
    return "".join(json.dumps(s.record()) + "\n" for s in states)
