"""Factor graph frontend: variables, residual edges and importance weights.

Variables are indexed ``0 .. T-1`` for phone poses followed by one variable per
unique tag. Odometry and tag edges share the same residual,
``box_minus(measurement, relative_pose(x_i, x_j))``; gravity edges compare the
measured phone-frame gravity direction with the one predicted from ``x_i``.

Jacobians are taken with respect to a right perturbation of each incident
variable, ``x <- x * (dp, Exp(dtheta))``, i.e. ``p <- p + R dp`` and
``R <- R Exp(dtheta)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import NamedTuple, Sequence

import numpy as np

from fidmap import se3
from fidmap.dataset import RecordedSession, derive_odometry_measurements
from fidmap.se3 import Pose

GRAVITY_SIGMA = 0.1

HYPERPARAM_KEYS = (
    "tag_position_variance",
    "tag_orientation_variance",
    "linear_odometry_variance",
    "angular_odometry_variance",
)


class GraphError(ValueError):
    pass


@dataclass(frozen=True)
class Hyperparams:
    tag_position_variance: float
    tag_orientation_variance: float
    linear_odometry_variance: float
    angular_odometry_variance: float

    def __post_init__(self):
        for key in HYPERPARAM_KEYS:
            value = getattr(self, key)
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise GraphError(f"{key} must be a number")
            if not (math.isfinite(value) and value > 0):
                raise GraphError(f"{key} must be positive and finite, got {value}")
            object.__setattr__(self, key, float(value))

    @classmethod
    def from_dict(cls, doc: dict) -> Hyperparams:
        if not isinstance(doc, dict):
            raise GraphError("hyperparameters must be a JSON object")
        missing = [k for k in HYPERPARAM_KEYS if k not in doc]
        if missing:
            raise GraphError(f"missing hyperparameters: {', '.join(missing)}")
        return cls(**{k: doc[k] for k in HYPERPARAM_KEYS})

    def to_dict(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in HYPERPARAM_KEYS}

    def as_tuple(self) -> tuple[float, float, float, float]:
        return tuple(getattr(self, k) for k in HYPERPARAM_KEYS)


def importance_from_hyperparams(theta: Hyperparams, gravity_sigma: float = GRAVITY_SIGMA):
    """Diagonal importance matrices ``(odometry, tag, gravity)``."""
    if not gravity_sigma > 0:
        raise GraphError("gravity_sigma must be positive")
    lin = 1.0 / theta.linear_odometry_variance
    ang = 1.0 / theta.angular_odometry_variance
    tpos = 1.0 / theta.tag_position_variance
    tori = 1.0 / theta.tag_orientation_variance
    odom = np.diag([lin, lin, lin, ang, ang, ang])
    tag = np.diag([tpos, tpos, tpos, tori, tori, tori])
    grav = np.eye(3) / gravity_sigma**2
    return odom, tag, grav


@dataclass(frozen=True, eq=False)
class RelativeEdge:
    """Soft constraint on ``x_j`` expressed in the frame of ``x_i``."""

    kind: str  # "odometry" or "tag"
    i: int
    j: int
    measurement: Pose
    information: np.ndarray


@dataclass(frozen=True, eq=False)
class GravityEdge:
    i: int
    g_phone: np.ndarray
    g_world: np.ndarray
    information: np.ndarray


class GraphState:
    """Mutable buffer of variable poses: positions ``(n, 3)``, quaternions ``(n, 4)``."""

    def __init__(self, p: np.ndarray, q: np.ndarray):
        self.p = np.array(p, dtype=float).reshape(-1, 3)
        self.q = se3.quat_normalize(np.array(q, dtype=float).reshape(-1, 4))
        if len(self.p) != len(self.q):
            raise GraphError("position and orientation counts differ")

    @classmethod
    def from_poses(cls, poses: Sequence[Pose]) -> GraphState:
        if not poses:
            return cls(np.zeros((0, 3)), np.zeros((0, 4)))
        return cls(np.array([x.p for x in poses]), np.array([x.quat for x in poses]))

    def __len__(self) -> int:
        return len(self.p)

    def copy(self) -> GraphState:
        return GraphState(self.p.copy(), self.q.copy())

    def pose(self, k: int) -> Pose:
        return Pose(self.p[k], self.q[k, :3])

    def poses(self) -> list[Pose]:
        return [self.pose(k) for k in range(len(self))]

    def set_pose(self, k: int, pose: Pose) -> None:
        self.p[k] = pose.p
        self.q[k] = pose.quat

    def retract(self, indices: np.ndarray, delta: np.ndarray) -> GraphState:
        """New state with right perturbations ``delta`` (m, 6) applied to ``indices``."""
        out = self.copy()
        delta = np.asarray(delta, dtype=float).reshape(-1, 6)
        q = self.q[indices]
        out.p[indices] = self.p[indices] + se3.quat_rotate(q, delta[:, :3])
        out.q[indices] = se3.quat_normalize(se3.quat_mul(q, se3.rotvec_to_quat(delta[:, 3:])))
        return out


class LossBreakdown(NamedTuple):
    total: float
    odometry: float
    tag: float
    gravity: float


@dataclass(eq=False)
class FactorGraph:
    num_poses: int
    tag_ids: list[int]
    odometry_edges: list[RelativeEdge]
    tag_edges: list[RelativeEdge]
    gravity_edges: list[GravityEdge]
    initial_state: GraphState
    anchored: int = 0
    g_world: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, -1.0]))

    def __post_init__(self):
        n = self.num_variables
        if len(self.initial_state) != n:
            raise GraphError(f"initial state has {len(self.initial_state)} variables, expected {n}")
        if not 0 <= self.anchored < self.num_poses:
            raise GraphError("anchored variable must be a pose variable")
        for e in self.odometry_edges:
            if not (0 <= e.i < self.num_poses and e.j == e.i + 1):
                raise GraphError(f"odometry edge ({e.i}, {e.j}) must join consecutive poses")
        for e in self.tag_edges:
            if not (0 <= e.i < self.num_poses and self.num_poses <= e.j < n):
                raise GraphError(f"tag edge ({e.i}, {e.j}) has invalid endpoints")
        for e in self.gravity_edges:
            if not 0 <= e.i < self.num_poses:
                raise GraphError(f"gravity edge at {e.i} has invalid pose index")

    @property
    def num_variables(self) -> int:
        return self.num_poses + len(self.tag_ids)

    def tag_variable(self, tag_id: int) -> int:
        return self.num_poses + self.tag_ids.index(tag_id)

    @cached_property
    def relative_edges(self) -> list[RelativeEdge]:
        return list(self.odometry_edges) + list(self.tag_edges)

    @cached_property
    def _relative_arrays(self):
        edges = self.relative_edges
        if not edges:
            return None
        i = np.array([e.i for e in edges], dtype=np.intp)
        j = np.array([e.j for e in edges], dtype=np.intp)
        mp = np.array([e.measurement.p for e in edges])
        mq = np.array([e.measurement.quat for e in edges])
        info = np.array([np.diag(e.information) for e in edges])
        is_tag = np.array([e.kind == "tag" for e in edges])
        return i, j, mp, mq, info, is_tag

    @cached_property
    def _gravity_arrays(self):
        edges = self.gravity_edges
        if not edges:
            return None
        i = np.array([e.i for e in edges], dtype=np.intp)
        m = np.array([e.g_phone for e in edges])
        g = np.array([e.g_world for e in edges])
        info = np.array([np.diag(e.information) for e in edges])
        return i, m, g, info

    def evaluate(self, state: GraphState, jacobians: bool = False):
        """Weighted residual blocks for every edge.

        Returns ``(rel, grav)``; each is ``None`` or a tuple of arrays
        ``(i, j, e, J_i, J_j, info, is_tag)`` / ``(i, e, J, info)``.
        Jacobians are ``None`` unless requested.
        """
        if len(state) != self.num_variables:
            raise GraphError(f"state has {len(state)} variables, graph has {self.num_variables}")
        rel = grav = None
        if self._relative_arrays is not None:
            i, j, mp, mq, info, is_tag = self._relative_arrays
            e, ji, jj = relative_residuals(state.p[i], state.q[i], state.p[j], state.q[j], mp, mq, jacobians)
            rel = (i, j, e, ji, jj, info, is_tag)
        if self._gravity_arrays is not None:
            i, m, g, info = self._gravity_arrays
            e, jg = gravity_residuals(state.q[i], m, g, jacobians)
            grav = (i, e, jg, info)
        return rel, grav

    def loss(self, state: GraphState) -> LossBreakdown:
        return LossBreakdown(*(float(v) for v in self.precise_loss(state)))

    def precise_loss(self, state: GraphState) -> LossBreakdown:
        """Loss terms accumulated in extended precision.

        Near a minimum with non-zero residuals, loss changes fall below the
        float64 resolution long before the state stops moving; the optimizer
        compares these values when accepting steps.
        """
        rel, grav = self.evaluate(state)
        odom = tag = gravity = np.longdouble(0)
        if rel is not None:
            _, _, e, _, _, info, is_tag = rel
            e = e.astype(np.longdouble)
            terms = np.sum(e * e * info, axis=1)
            tag = np.sum(terms[is_tag])
            odom = np.sum(terms[~is_tag])
        if grav is not None:
            _, e, _, info = grav
            e = e.astype(np.longdouble)
            gravity = np.sum(e * e * info)
        return LossBreakdown(odom + tag + gravity, odom, tag, gravity)


def relative_residuals(pi, qi, pj, qj, mp, mq, jacobians: bool = False):
    """Batched ``box_minus(m, relative_pose(x_i, x_j))`` and its Jacobians."""
    qi_inv = se3.quat_conj(qi)
    t = se3.quat_rotate(qi_inv, pj - pi)
    q_pred = se3.quat_mul(qi_inv, qj)
    dq = se3.quat_positive(se3.quat_mul(se3.quat_conj(q_pred), mq))
    e = np.concatenate([mp - t, dq[:, :3]], axis=1)
    if not jacobians:
        return e, None, None
    k = len(e)
    r_pred = se3.quat_to_rot(q_pred)
    v, w = dq[:, :3], dq[:, 3]
    # d vec(exp(b) * dq) / db at b = 0
    lift = w[:, None, None] * np.eye(3) - se3.skew(v)
    ji = np.zeros((k, 6, 6))
    jj = np.zeros((k, 6, 6))
    ji[:, :3, :3] = np.eye(3)
    ji[:, :3, 3:] = -se3.skew(t)
    ji[:, 3:, 3:] = 0.5 * lift @ np.swapaxes(r_pred, 1, 2)
    jj[:, :3, :3] = -r_pred
    jj[:, 3:, 3:] = -0.5 * lift
    return e, ji, jj


def gravity_residuals(q, m, g_world, jacobians: bool = False):
    f = se3.quat_rotate(se3.quat_conj(q), g_world)
    e = m - f
    if not jacobians:
        return e, None
    jac = np.zeros((len(e), 3, 6))
    jac[:, :, 3:] = -se3.skew(f)
    return e, jac


def build_graph(
    session: RecordedSession,
    theta: Hyperparams,
    gravity_sigma: float = GRAVITY_SIGMA,
) -> FactorGraph:
    """Translate a session into a factor graph with pose 0 anchored."""
    if not session.tag_observations:
        raise GraphError("session has no tag observations; the map would be pure dead reckoning")
    lam_odom, lam_tag, lam_grav = importance_from_hyperparams(theta, gravity_sigma)
    n = session.num_poses
    tag_ids = session.tag_ids()
    index = {tag_id: n + k for k, tag_id in enumerate(tag_ids)}

    odom = [
        RelativeEdge("odometry", t, t + 1, m, lam_odom)
        for t, m in enumerate(derive_odometry_measurements(session))
    ]
    tags = [
        RelativeEdge("tag", o.pose_index, index[o.tag_id], o.pose_in_phone, lam_tag)
        for o in session.tag_observations
    ]
    gravity = [
        GravityEdge(o.pose_index, o.g_phone, session.g_world, lam_grav)
        for o in session.gravity_observations
    ]
    init = GraphState.from_poses(list(session.vio_poses) + first_observation_tags(session, tag_ids))
    return FactorGraph(n, tag_ids, odom, tags, gravity, init, anchored=0, g_world=session.g_world)


def first_observation_tags(session: RecordedSession, tag_ids: list[int] | None = None) -> list[Pose]:
    """Each tag placed by its first observation composed with the raw VIO pose."""
    first: dict[int, Pose] = {}
    for o in session.time_ordered_tag_observations():
        if o.tag_id not in first:
            first[o.tag_id] = se3.compose(session.vio_poses[o.pose_index], o.pose_in_phone)
    ids = session.tag_ids() if tag_ids is None else tag_ids
    return [first[k] for k in ids]


def total_loss(graph: FactorGraph, state: GraphState) -> LossBreakdown:
    return graph.loss(state)


def residual_and_jacobian(edge: RelativeEdge | GravityEdge, state: GraphState):
    """Residual of one edge and Jacobian blocks w.r.t. its incident variables.

    Returns ``(e, [J_i, J_j])`` for relative edges, ``(e, [J_i])`` for gravity.
    """
    if isinstance(edge, GravityEdge):
        e, jac = gravity_residuals(state.q[[edge.i]], edge.g_phone[None], edge.g_world[None], True)
        return e[0], [jac[0]]
    m = edge.measurement
    e, ji, jj = relative_residuals(
        state.p[[edge.i]], state.q[[edge.i]], state.p[[edge.j]], state.q[[edge.j]],
        m.p[None], m.quat[None], True,
    )
    return e[0], [ji[0], jj[0]]
