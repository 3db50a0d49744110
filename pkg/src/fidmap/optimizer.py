"""Sparse Levenberg-Marquardt backend for :class:`fidmap.graph.FactorGraph`.

Each edge touches at most two variables, so the normal equations are kept as
6x6 blocks: a block-tridiagonal pose part (banded Cholesky), a block-diagonal
tag part, and the pose-tag coupling, which is eliminated through a Schur
complement on the tags. Damping scales the diagonal of ``J^T L J``.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.linalg

from fidmap.graph import FactorGraph, GraphState, LossBreakdown
from fidmap.se3 import Pose

LOSS_TOLERANCE = "loss-tolerance"
STEP_TOLERANCE = "step-tolerance"
MAX_ITERATIONS = "max-iterations"
NUMERICAL_FAILURE = "numerical-failure"
CONVERGED = (LOSS_TOLERANCE, STEP_TOLERANCE)


class StructuralError(ValueError):
    """The graph cannot be optimized as posed (orphan variable, missing fixed tag)."""


class NumericalError(ArithmeticError):
    """Non-finite values appeared during iteration."""

    def __init__(self, message: str, iteration: int, state: GraphState, report: OptimizationReport):
        super().__init__(f"{message} at iteration {iteration}")
        self.iteration = iteration
        self.state = state
        self.report = report


@dataclass(frozen=True)
class LmConfig:
    max_iterations: int = 100
    initial_damping: float = 1e-4
    damping_decrease: float = 1.0 / 3.0
    damping_increase: float = 2.0
    relative_loss_tolerance: float = 1e-8
    absolute_step_tolerance: float = 1e-10

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be positive")
        for name in ("initial_damping", "relative_loss_tolerance", "absolute_step_tolerance"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.damping_decrease < 1 < self.damping_increase:
            raise ValueError("need 0 < damping_decrease < 1 < damping_increase")

    @classmethod
    def from_dict(cls, doc: dict) -> LmConfig:
        known = set(cls.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown LM config keys: {sorted(unknown)}")
        return cls(**doc)


@dataclass
class OptimizationReport:
    iterations: int = 0
    accepted_steps: int = 0
    rejected_steps: int = 0
    initial_loss: float = math.nan
    final_loss: float = math.nan
    final_breakdown: LossBreakdown | None = None
    convergence_reason: str = MAX_ITERATIONS
    accepted_losses: list[float] = field(default_factory=list)

    @property
    def converged(self) -> bool:
        return self.convergence_reason in CONVERGED

    def summary(self) -> dict:
        out = asdict(self)
        out.pop("accepted_losses")
        out["final_breakdown"] = self.final_breakdown._asdict() if self.final_breakdown else None
        return out


def optimize(graph: FactorGraph, init_state: GraphState | None = None, cfg: LmConfig = LmConfig()):
    """Minimize the graph loss over all variables except the anchored pose."""
    free = np.ones(graph.num_variables, dtype=bool)
    free[graph.anchored] = False
    state = (init_state if init_state is not None else graph.initial_state).copy()
    return _levenberg_marquardt(graph, state, free, cfg)


def optimize_with_fixed_tags(
    graph: FactorGraph,
    fixed_tags: dict[int, Pose],
    init_state: GraphState | None = None,
    cfg: LmConfig = LmConfig(),
    anchor: int | None = None,
):
    """Optimize pose variables only; tag variables are held at ``fixed_tags``.

    With at least one tag edge the fixed tags pin the gauge, so no pose is
    anchored unless ``anchor`` names one. Without tag edges the graph's own
    anchored pose is held instead.
    """
    missing = [t for t in graph.tag_ids if t not in fixed_tags]
    if missing:
        raise StructuralError(f"no fixed pose supplied for observed tags {missing}")
    state = (init_state if init_state is not None else graph.initial_state).copy()
    for tag_id in graph.tag_ids:
        state.set_pose(graph.tag_variable(tag_id), fixed_tags[tag_id])
    free = np.zeros(graph.num_variables, dtype=bool)
    free[: graph.num_poses] = True
    if anchor is not None:
        free[anchor] = False
    elif not graph.tag_edges:
        free[graph.anchored] = False
    state, report = _levenberg_marquardt(graph, state, free, cfg)
    return state, report


def check_connected(graph: FactorGraph, free: np.ndarray) -> None:
    """Every free variable must reach a held variable through relative edges."""
    n = graph.num_variables
    adjacency: list[list[int]] = [[] for _ in range(n)]
    for e in graph.relative_edges:
        adjacency[e.i].append(e.j)
        adjacency[e.j].append(e.i)
    held = [k for k in range(n) if not free[k]]
    if not held:
        raise StructuralError("no variable is held fixed; the problem has a free gauge")
    seen = np.zeros(n, dtype=bool)
    seen[held] = True
    queue = deque(held)
    while queue:
        k = queue.popleft()
        for nb in adjacency[k]:
            if not seen[nb]:
                seen[nb] = True
                queue.append(nb)
    orphans = np.flatnonzero(~seen)
    if len(orphans):
        raise StructuralError(f"variables {orphans.tolist()} are not connected to a held variable")


@dataclass
class _NormalEquations:
    """Blocks of ``H = J^T L J`` and ``g = J^T L e`` for the free variables.

    Free poses come first, then free tags. Odometry edges only join
    consecutive poses, so the pose part is block tridiagonal; tags only touch
    poses, so the tag part is block diagonal.
    """

    pose_diag: np.ndarray  # (P, 6, 6)
    pose_next: np.ndarray  # (P-1, 6, 6) coupling of free pose k with k+1
    tag_diag: np.ndarray  # (K, 6, 6)
    pose_tag: np.ndarray  # (6P, 6K) dense
    grad_pose: np.ndarray  # (6P,)
    grad_tag: np.ndarray  # (6K,)

    def diagonal(self) -> np.ndarray:
        return np.concatenate(
            [np.diagonal(self.pose_diag, axis1=1, axis2=2).ravel(), np.diagonal(self.tag_diag, axis1=1, axis2=2).ravel()]
        )

    def gradient(self) -> np.ndarray:
        return np.concatenate([self.grad_pose, self.grad_tag])

    def solve(self, damping: np.ndarray) -> np.ndarray:
        """Solve ``(H + diag(damping)) x = -g`` by banded Cholesky plus a tag Schur complement."""
        n_pose = 6 * len(self.pose_diag)
        d_pose, d_tag = damping[:n_pose], damping[n_pose:]
        b_pose, b_tag = -self.grad_pose, -self.grad_tag
        tag_block = _block_diag_dense(self.tag_diag) + np.diag(d_tag)
        if n_pose == 0:
            return scipy.linalg.solve(tag_block, b_tag, assume_a="pos")
        band = _upper_band(self.pose_diag, self.pose_next, d_pose)
        if len(b_tag) == 0:
            return scipy.linalg.solveh_banded(band, b_pose)
        rhs = np.column_stack([b_pose, self.pose_tag])
        sol = scipy.linalg.solveh_banded(band, rhs)
        inv_b, inv_c = sol[:, 0], sol[:, 1:]
        schur = tag_block - self.pose_tag.T @ inv_c
        x_tag = scipy.linalg.solve(schur, b_tag - self.pose_tag.T @ inv_b, assume_a="pos")
        x_pose = inv_b - inv_c @ x_tag
        return np.concatenate([x_pose, x_tag])


_BAND = 11  # 6x6 blocks on and next to the diagonal


def _upper_band(diag: np.ndarray, nxt: np.ndarray, damping: np.ndarray) -> np.ndarray:
    """Upper banded storage ``ab[u + i - j, j] = A[i, j]`` of the pose block."""
    n_blocks = len(diag)
    ab = np.zeros((_BAND + 1, 6 * n_blocks))
    a, b = np.triu_indices(6)
    base = 6 * np.arange(n_blocks)
    ab[(_BAND + a - b)[None, :], (base[:, None] + b[None, :])] = diag[:, a, b]
    ab[_BAND] += damping
    if n_blocks > 1:
        a, b = np.indices((6, 6)).reshape(2, -1)
        ab[(_BAND + a - b - 6)[None, :], (base[:-1, None] + 6 + b[None, :])] = nxt[:, a, b]
    return ab


def _block_diag_dense(blocks: np.ndarray) -> np.ndarray:
    k = len(blocks)
    out = np.zeros((6 * k, 6 * k))
    for t in range(k):
        out[6 * t : 6 * t + 6, 6 * t : 6 * t + 6] = blocks[t]
    return out


def _normal_equations(graph: FactorGraph, state: GraphState, block: np.ndarray, n_pose: int, n_tag: int):
    rel, grav = graph.evaluate(state, jacobians=True)
    pose_diag = np.zeros((n_pose, 6, 6))
    pose_next = np.zeros((max(n_pose - 1, 0), 6, 6))
    tag_diag = np.zeros((n_tag, 6, 6))
    pose_tag = np.zeros((6 * n_pose, 6 * n_tag))
    grad = np.zeros((n_pose + n_tag, 6))
    jt = np.swapaxes

    if rel is not None:
        i, j, e, ji, jj, info, is_tag = rel
        bi, bj = block[i], block[j]
        hii = jt(ji, 1, 2) @ (ji * info[:, :, None])
        hjj = jt(jj, 1, 2) @ (jj * info[:, :, None])
        hij = jt(ji, 1, 2) @ (jj * info[:, :, None])
        we = (e * info)[:, :, None]
        gi = (jt(ji, 1, 2) @ we)[:, :, 0]
        gj = (jt(jj, 1, 2) @ we)[:, :, 0]
        fi, fj = bi >= 0, bj >= 0
        np.add.at(grad, bi[fi], gi[fi])
        np.add.at(grad, bj[fj], gj[fj])
        np.add.at(pose_diag, bi[fi], hii[fi])
        odo_j = fj & ~is_tag
        np.add.at(pose_diag, bj[odo_j], hjj[odo_j])
        tag_j = fj & is_tag
        np.add.at(tag_diag, bj[tag_j] - n_pose, hjj[tag_j])
        both = fi & fj & ~is_tag
        if np.any(bj[both] != bi[both] + 1):
            raise StructuralError("odometry edges must join consecutive free poses")
        np.add.at(pose_next, bi[both], hij[both])
        for k in np.flatnonzero(fi & fj & is_tag):
            r, c = 6 * bi[k], 6 * (bj[k] - n_pose)
            pose_tag[r : r + 6, c : c + 6] += hij[k]
    if grav is not None:
        i, e, jg, info = grav
        bi = block[i]
        ok = bi >= 0
        np.add.at(pose_diag, bi[ok], (jt(jg, 1, 2) @ (jg * info[:, :, None]))[ok])
        np.add.at(grad, bi[ok], (jt(jg, 1, 2) @ (e * info)[:, :, None])[ok, :, 0])
    return _NormalEquations(
        pose_diag, pose_next, tag_diag, pose_tag, grad[:n_pose].ravel(), grad[n_pose:].ravel()
    )


def _as_float(loss: LossBreakdown) -> LossBreakdown:
    return LossBreakdown(*(float(v) for v in loss))


def _levenberg_marquardt(graph: FactorGraph, state: GraphState, free: np.ndarray, cfg: LmConfig):
    check_connected(graph, free)
    free_idx = np.flatnonzero(free)
    block = -np.ones(graph.num_variables, dtype=np.intp)
    block[free_idx] = np.arange(len(free_idx))
    n_pose = int(np.count_nonzero(free[: graph.num_poses]))
    n_tag = len(free_idx) - n_pose
    dim = 6 * len(free_idx)

    loss = graph.precise_loss(state)
    report = OptimizationReport(
        initial_loss=float(loss.total), final_loss=float(loss.total), final_breakdown=_as_float(loss)
    )
    if not math.isfinite(loss.total):
        raise NumericalError("non-finite initial loss", 0, state, report)
    if dim == 0 or loss.total == 0.0:
        report.convergence_reason = LOSS_TOLERANCE
        return state, report

    lam = cfg.initial_damping
    reason = MAX_ITERATIONS
    for it in range(1, cfg.max_iterations + 1):
        report.iterations = it
        normal = _normal_equations(graph, state, block, n_pose, n_tag)
        diag = normal.diagonal()
        # Marquardt scaling; the floor keeps unconstrained directions solvable.
        damp = lam * np.maximum(diag, 1e-12 * max(1.0, float(diag.max())))
        try:
            delta = normal.solve(damp)
        except np.linalg.LinAlgError:
            delta = np.full(dim, np.nan)
        if not np.all(np.isfinite(delta)):
            report.convergence_reason = NUMERICAL_FAILURE
            raise NumericalError("non-finite step", it, state, report)
        if float(np.linalg.norm(delta)) < cfg.absolute_step_tolerance:
            reason = STEP_TOLERANCE
            break
        candidate = state.retract(free_idx, delta.reshape(-1, 6))
        new_loss = graph.precise_loss(candidate)
        if not math.isfinite(new_loss.total):
            report.convergence_reason = NUMERICAL_FAILURE
            raise NumericalError("non-finite residual", it, state, report)
        decrease = loss.total - new_loss.total
        if decrease > 0:
            state, loss = candidate, new_loss
            report.accepted_steps += 1
            report.accepted_losses.append(loss.total)
            lam *= cfg.damping_decrease
            if loss.total == 0.0 or decrease <= cfg.relative_loss_tolerance * (loss.total + decrease):
                reason = LOSS_TOLERANCE
                break
        else:
            report.rejected_steps += 1
            lam *= cfg.damping_increase
            if -decrease <= cfg.relative_loss_tolerance * loss.total:
                reason = LOSS_TOLERANCE
                break
    report.final_loss = float(loss.total)
    report.final_breakdown = _as_float(loss)
    report.convergence_reason = reason
    return state, report
