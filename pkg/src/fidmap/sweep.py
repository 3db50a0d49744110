"""Hyperparameter grid sweeps scored by the shift and ground-truth metrics."""

from __future__ import annotations

import csv
import io
import itertools
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.stats import spearmanr

from fidmap.dataset import GroundTruthTags, RecordedSession
from fidmap.graph import HYPERPARAM_KEYS, Hyperparams, build_graph
from fidmap.metrics import ground_truth_metric, shift_pairs, shift_metric, tag_path_distances
from fidmap.optimizer import LmConfig, NumericalError, NUMERICAL_FAILURE, optimize

CSV_HEADER = (
    "theta_tagpos",
    "theta_tagori",
    "theta_lin",
    "theta_ang",
    "shift_metric",
    "gt_metric",
    "converged",
    "iterations",
)


class SweepError(ValueError):
    pass


@dataclass(frozen=True)
class SweepGrid:
    tag_position_variance: tuple[float, ...]
    tag_orientation_variance: tuple[float, ...]
    linear_odometry_variance: tuple[float, ...]
    angular_odometry_variance: tuple[float, ...]

    def __post_init__(self):
        for key in HYPERPARAM_KEYS:
            values = tuple(float(v) for v in getattr(self, key))
            if not values:
                raise SweepError(f"grid for {key} is empty")
            if not all(math.isfinite(v) and v > 0 for v in values):
                raise SweepError(f"grid for {key} must hold positive values")
            object.__setattr__(self, key, values)

    @classmethod
    def geometric(cls, low: float = 1e-4, high: float = 1e-1, count: int = 4) -> SweepGrid:
        values = tuple(float(v) for v in np.geomspace(low, high, count))
        return cls(values, values, values, values)

    @classmethod
    def from_dict(cls, doc: dict) -> SweepGrid:
        missing = [k for k in HYPERPARAM_KEYS if k not in doc]
        if missing:
            raise SweepError(f"grid is missing {', '.join(missing)}")
        return cls(*(tuple(doc[k]) for k in HYPERPARAM_KEYS))

    def to_dict(self) -> dict:
        return {k: list(getattr(self, k)) for k in HYPERPARAM_KEYS}

    def points(self) -> list[Hyperparams]:
        axes = [getattr(self, k) for k in HYPERPARAM_KEYS]
        return [Hyperparams(*combo) for combo in itertools.product(*axes)]

    def __len__(self) -> int:
        return math.prod(len(getattr(self, k)) for k in HYPERPARAM_KEYS)


@dataclass(frozen=True)
class SweepRow:
    theta: Hyperparams
    shift_metric: float
    gt_metric: float | None
    converged: bool
    iterations: int
    convergence_reason: str
    final_loss: float


@dataclass(frozen=True)
class SweepResult:
    rows: tuple[SweepRow, ...]

    @property
    def has_gt(self) -> bool:
        return bool(self.rows) and all(r.gt_metric is not None for r in self.rows)


def evaluate_point(
    session: RecordedSession,
    theta: Hyperparams,
    gt: GroundTruthTags | None = None,
    cfg: LmConfig = LmConfig(),
) -> SweepRow:
    """Build, optimize and score one hyperparameter point."""
    graph = build_graph(session, theta)
    try:
        state, report = optimize(graph, cfg=cfg)
    except NumericalError as exc:
        state, report = exc.state, exc.report
        report.convergence_reason = NUMERICAL_FAILURE
    tags = {t: state.pose(graph.tag_variable(t)) for t in graph.tag_ids}
    shift = shift_metric(session, tags)
    gt_value = None
    if gt is not None:
        gt_value = ground_truth_metric(tags, gt, tag_path_distances(session))
    return SweepRow(
        theta, shift, gt_value, report.converged, report.iterations, report.convergence_reason, report.final_loss
    )


def _evaluate_star(args) -> SweepRow:
    return evaluate_point(*args)


def run_sweep(
    session: RecordedSession,
    grid: SweepGrid,
    gt: GroundTruthTags | None = None,
    jobs: int = 1,
    cfg: LmConfig = LmConfig(),
) -> SweepResult:
    points = grid.points()
    if not points:
        raise SweepError("empty grid")
    pairs = shift_pairs(session, set(session.tag_ids()))
    if len({o.tag_id for pair in pairs for o in pair}) < 2:
        raise SweepError("session needs detections of at least 2 distinct tags")
    tasks = [(session, theta, gt, cfg) for theta in points]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_evaluate_star, tasks, chunksize=max(1, len(tasks) // (4 * jobs))))
    else:
        rows = [_evaluate_star(t) for t in tasks]
    return SweepResult(tuple(rows))


def select_best(result: SweepResult, criterion: str = "shift") -> Hyperparams:
    """Hyperparameters of the row minimizing ``criterion``; ties go to the lowest index."""
    if not result.rows:
        raise SweepError("empty sweep result")
    if criterion == "shift":
        scores = [r.shift_metric for r in result.rows]
    elif criterion == "gt":
        if not result.has_gt:
            raise SweepError("sweep result has no ground-truth metric column")
        scores = [r.gt_metric for r in result.rows]
    else:
        raise SweepError(f"unknown criterion {criterion!r}")
    best = min(range(len(scores)), key=lambda k: (scores[k], k))
    return result.rows[best].theta


def rank_correlation(result: SweepResult) -> float:
    if not result.has_gt:
        raise SweepError("sweep result has no ground-truth metric column")
    if len(result.rows) < 3:
        raise SweepError("rank correlation needs at least 3 rows")
    return spearman([r.shift_metric for r in result.rows], [r.gt_metric for r in result.rows])


def spearman(x: Sequence[float], y: Sequence[float]) -> float:
    rho = spearmanr(x, y).statistic
    return float(rho)


def _fmt(v: float) -> str:
    return repr(float(v))


def result_to_csv(result: SweepResult) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for r in result.rows:
        writer.writerow(
            [
                *(_fmt(v) for v in r.theta.as_tuple()),
                _fmt(r.shift_metric),
                "" if r.gt_metric is None else _fmt(r.gt_metric),
                "true" if r.converged else "false",
                r.iterations,
            ]
        )
    return out.getvalue()


def read_csv_metrics(text: str) -> tuple[list[float], list[float | None]]:
    """``(shift, gt)`` columns of a sweep CSV; missing gt cells are ``None``."""
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames is None:
        raise SweepError("sweep CSV is empty")
    for key in ("shift_metric", "gt_metric"):
        if key not in reader.fieldnames:
            raise SweepError(f"sweep CSV lacks a {key} column")
    shift, gt = [], []
    for row in reader:
        shift.append(float(row["shift_metric"]))
        gt.append(float(row["gt_metric"]) if row["gt_metric"] not in ("", None) else None)
    return shift, gt
