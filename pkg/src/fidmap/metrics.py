"""Map quality metrics: the ground-truth (anchor-tag) metric and the shift metric.

Both report translational error per meter and are invariant to a global rigid
transform of the map, since every comparison is made after anchoring one tag.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, NamedTuple

import numpy as np

from fidmap.dataset import GroundTruthTags, RecordedSession
from fidmap.se3 import Pose, compose, inverse


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class TagPathDistances:
    """Cumulative VIO path length (m) at each tag's first observation."""

    cumulative: dict[int, float]

    def walked(self, a: int, b: int) -> float:
        return abs(self.cumulative[b] - self.cumulative[a])


def tag_path_distances(session: RecordedSession) -> TagPathDistances:
    positions = np.array([x.p for x in session.vio_poses])
    steps = np.linalg.norm(np.diff(positions, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(steps)])
    first: dict[int, float] = {}
    for obs in session.time_ordered_tag_observations():
        first.setdefault(obs.tag_id, float(cum[obs.pose_index]))
    return TagPathDistances(first)


class MetricValue(NamedTuple):
    value: float
    count: int


def ground_truth_metric_details(
    est: Mapping[int, Pose], gt: GroundTruthTags | Mapping[int, Pose], dist: TagPathDistances
) -> MetricValue:
    """Mean over ordered tag pairs of anchored position error per meter walked.

    ``count`` is the number of anchor tags used.
    """
    gt_tags = gt.tags if isinstance(gt, GroundTruthTags) else gt
    common = sorted(set(est) & set(gt_tags))
    if len(common) < 2:
        raise MetricError(f"ground-truth metric needs at least 2 common tags, got {len(common)}")
    missing = [k for k in common if k not in dist.cumulative]
    if missing:
        raise MetricError(f"no walked distance for tags {missing}")
    errors = []
    for a in common:
        align = compose(gt_tags[a], inverse(est[a]))
        for k in common:
            if k == a:
                continue
            walked = dist.walked(a, k)
            if not walked > 0:
                raise MetricError(f"zero walked distance between tags {a} and {k}")
            moved = align.transform_point(est[k].p)
            errors.append(float(np.linalg.norm(moved - gt_tags[k].p)) / walked)
    return MetricValue(float(np.mean(errors)), len(common))


def ground_truth_metric(est, gt, dist: TagPathDistances) -> float:
    return ground_truth_metric_details(est, gt, dist).value


def shift_pairs(session: RecordedSession, tag_ids) -> list[tuple]:
    """Consecutive detection pairs ``(obs_u, obs_v)`` with ``u != v``.

    Detections of tags outside ``tag_ids`` are dropped. Runs of repeated
    detections of one tag collapse to the run's first detection.
    """
    starts = []
    for obs in session.time_ordered_tag_observations():
        if obs.tag_id not in tag_ids:
            continue
        if not starts or starts[-1].tag_id != obs.tag_id:
            starts.append(obs)
    return list(zip(starts[:-1], starts[1:]))


def shift_metric_details(session: RecordedSession, map_tags: Mapping[int, Pose]) -> MetricValue:
    """Mean re-anchored position error of the next detected tag per meter of separation.

    ``count`` is the number of detection pairs used.
    """
    pairs = shift_pairs(session, map_tags)
    if len({o.tag_id for pair in pairs for o in pair}) < 2:
        raise MetricError("shift metric needs detections of at least 2 distinct mapped tags")
    vio = session.vio_poses
    errors = []
    for u, v in pairs:
        seen_u = compose(vio[u.pose_index], u.pose_in_phone)
        seen_v = compose(vio[v.pose_index], v.pose_in_phone)
        anchor = compose(map_tags[u.tag_id], inverse(seen_u))
        predicted = anchor.transform_point(seen_v.p)
        separation = float(np.linalg.norm(map_tags[u.tag_id].p - map_tags[v.tag_id].p))
        if not separation > 0:
            raise MetricError(f"tags {u.tag_id} and {v.tag_id} coincide in the map")
        errors.append(float(np.linalg.norm(predicted - map_tags[v.tag_id].p)) / separation)
    return MetricValue(float(np.mean(errors)), len(errors))


def shift_metric(session: RecordedSession, map_tags: Mapping[int, Pose]) -> float:
    return shift_metric_details(session, map_tags).value
