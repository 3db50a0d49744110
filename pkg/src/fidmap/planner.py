"""Navigable path graph built from a mapped trajectory, and shortest-path queries.

Consecutive trajectory positions are joined by straight edges weighted by
length. Where the walk comes back near an earlier part of itself, a junction
node is inserted midway between the two closest points and both segments are
routed through it, so later routes can cut across.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.spatial import cKDTree

from fidmap.se3 import Pose

JUNCTION_RADIUS = 0.5
FLOOR_GAP = 1.0
_EPS = 1e-9


class PlanningError(ValueError):
    pass


class NoPathError(PlanningError):
    pass


@dataclass
class PathGraph:
    nodes: np.ndarray  # (n, 3)
    edges: list[tuple[int, int, float]]
    junctions: list[int] = field(default_factory=list)

    def __post_init__(self):
        self.nodes = np.array(self.nodes, dtype=float).reshape(-1, 3)
        self.edges = [(int(i), int(j), float(w)) for i, j, w in self.edges]

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)

    def adjacency(self) -> list[list[tuple[int, float]]]:
        adj: list[list[tuple[int, float]]] = [[] for _ in range(self.num_nodes)]
        for i, j, w in self.edges:
            adj[i].append((j, w))
            adj[j].append((i, w))
        return adj

    def degree(self, node: int) -> int:
        return sum((i == node) + (j == node) for i, j, _ in self.edges)

    def node_at(self, position, tol: float = 1e-6) -> int:
        d = np.linalg.norm(self.nodes - np.asarray(position, dtype=float), axis=1)
        k = int(np.argmin(d))
        if d[k] > tol:
            raise PlanningError(f"no graph node at {list(position)}")
        return k

    def to_dict(self) -> dict:
        return {
            "nodes": [[float(c) for c in p] for p in self.nodes],
            "edges": [[i, j, w] for i, j, w in self.edges],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> PathGraph:
        nodes = np.array(doc["nodes"], dtype=float).reshape(-1, 3)
        edges = [(int(e[0]), int(e[1]), float(e[2])) for e in doc["edges"]]
        for i, j, _ in edges:
            if not (0 <= i < len(nodes) and 0 <= j < len(nodes)):
                raise PlanningError(f"edge ({i}, {j}) references a missing node")
        return cls(nodes, edges)


def _length(a, b) -> float:
    return float(np.linalg.norm(np.asarray(a) - np.asarray(b)))


def closest_points(p1, q1, p2, q2) -> tuple[float, float, np.ndarray, np.ndarray]:
    """Closest points between segments ``p1q1`` and ``p2q2``.

    Returns ``(s, t, c1, c2)`` with ``c1 = p1 + s (q1 - p1)``. Parallel
    segments resolve to the smallest ``s`` attaining the minimum.
    """
    p1, q1, p2, q2 = (np.asarray(v, dtype=float) for v in (p1, q1, p2, q2))
    d1, d2, r = q1 - p1, q2 - p2, p1 - p2
    a, e, f = d1 @ d1, d2 @ d2, d2 @ r
    if a <= _EPS**2 and e <= _EPS**2:
        return 0.0, 0.0, p1, p2
    if a <= _EPS**2:
        s, t = 0.0, float(np.clip(f / e, 0.0, 1.0))
    else:
        c = d1 @ r
        if e <= _EPS**2:
            s, t = float(np.clip(-c / a, 0.0, 1.0)), 0.0
        else:
            b = d1 @ d2
            denom = a * e - b * b
            if denom > 1e-12 * a * e:
                s = float(np.clip((b * f - c * e) / denom, 0.0, 1.0))
            else:
                # parallel: slide along the overlap from the start of segment 1
                s = 0.0
                t0 = f / e
                if t0 < 0.0 or t0 > 1.0:
                    tc = float(np.clip(t0, 0.0, 1.0))
                    s = float(np.clip((b * tc - c) / a, 0.0, 1.0))
            t = (b * s + f) / e
            if t < 0.0:
                t, s = 0.0, float(np.clip(-c / a, 0.0, 1.0))
            elif t > 1.0:
                t, s = 1.0, float(np.clip((b - c) / a, 0.0, 1.0))
    return s, float(t), p1 + s * d1, p2 + t * d2


def _bounded_distances(adj, sources: dict[int, float], cutoff: float) -> dict[int, float]:
    dist = dict(sources)
    heap = [(d, n) for n, d in sorted(sources.items())]
    heapq.heapify(heap)
    while heap:
        d, n = heapq.heappop(heap)
        if d > dist.get(n, math.inf) or d > cutoff:
            continue
        for m, w in adj[n]:
            nd = d + w
            if nd < dist.get(m, math.inf) and nd <= cutoff:
                dist[m] = nd
                heapq.heappush(heap, (nd, m))
    return dist


def _graph_gap(graph: PathGraph, adj, e1, s1, e2, s2, cutoff: float) -> float:
    """Graph distance between a point on edge ``e1`` and one on edge ``e2``."""
    a, b, w1 = graph.edges[e1]
    c, d, w2 = graph.edges[e2]
    sources = {}
    for node, off in ((a, s1 * w1), (b, (1 - s1) * w1)):
        sources[node] = min(off, sources.get(node, math.inf))
    dist = _bounded_distances(adj, sources, cutoff)
    best = math.inf
    for node, off in ((c, s2 * w2), (d, (1 - s2) * w2)):
        if node in dist:
            best = min(best, dist[node] + off)
    return best


def _candidates(graph: PathGraph, radius: float, floor_gap: float):
    nodes, edges = graph.nodes, graph.edges
    if len(edges) < 2:
        return []
    ij = np.array([(i, j) for i, j, _ in edges])
    lo = np.minimum(nodes[ij[:, 0]], nodes[ij[:, 1]])
    hi = np.maximum(nodes[ij[:, 0]], nodes[ij[:, 1]])
    out = []
    for k in range(len(edges) - 1):
        gap = np.maximum(lo[k + 1 :] - hi[k], lo[k] - hi[k + 1 :]).clip(min=0.0)
        near = np.flatnonzero(np.linalg.norm(gap, axis=1) <= radius) + k + 1
        a, b = ij[k]
        for m in near:
            c, d = ij[m]
            if len({a, b, c, d}) < 4:
                continue
            s, t, c1, c2 = closest_points(nodes[a], nodes[b], nodes[c], nodes[d])
            dist = _length(c1, c2)
            if dist <= radius and abs(c1[2] - c2[2]) <= floor_gap:
                out.append((dist, k, int(m), s, t, c1, c2))
    out.sort(key=lambda x: (x[0], x[1], x[2]))
    return out


def _split(graph: PathGraph, e: int, node: int) -> list[tuple[int, int, float]]:
    i, j, _ = graph.edges[e]
    if node in (i, j):
        return [graph.edges[e]]
    p = graph.nodes
    return [(i, node, _length(p[i], p[node])), (node, j, _length(p[node], p[j]))]


def _rewire(adj, old: tuple[int, int, float], new: list[tuple[int, int, float]]) -> None:
    """Keep ``adj`` in step with an edge split so later checks in a pass see it."""
    if new == [old]:
        return
    i, j, _ = old
    adj[i] = [(m, w) for m, w in adj[i] if m != j]
    adj[j] = [(m, w) for m, w in adj[j] if m != i]
    for a, b, w in new:
        while len(adj) <= max(a, b):
            adj.append([])
        adj[a].append((b, w))
        adj[b].append((a, w))


def insert_junctions(graph: PathGraph, radius: float = JUNCTION_RADIUS, floor_gap: float = FLOOR_GAP) -> int:
    """Insert junction nodes in place; returns how many nodes were added.

    A pair of edges without a shared node qualifies when their closest
    approach is within ``radius`` (and within ``floor_gap`` vertically) and
    the graph does not already connect the two closest points within
    ``distance + 2 * radius``. Passes repeat until nothing qualifies, so a
    second call on the result adds nothing.
    """
    if not radius > 0:
        raise PlanningError("junction radius must be positive")
    added = 0
    for _ in range(10_000):
        adj = graph.adjacency()
        touched: set[int] = set()
        new_edges: dict[int, list[tuple[int, int, float]]] = {}
        inserted = False
        for dist, e1, e2, s, t, c1, c2 in _candidates(graph, radius, floor_gap):
            if e1 in touched or e2 in touched:
                continue
            slack = dist + 2.0 * radius
            if _graph_gap(graph, adj, e1, s, e2, t, slack) <= slack:
                continue
            mid = 0.5 * (c1 + c2)
            ends = [graph.edges[e1][0], graph.edges[e1][1], graph.edges[e2][0], graph.edges[e2][1]]
            reuse = [n for n in ends if _length(graph.nodes[n], mid) <= _EPS]
            if reuse:
                node = reuse[0]
            else:
                node = graph.num_nodes
                graph.nodes = np.vstack([graph.nodes, mid])
                graph.junctions.append(node)
                added += 1
            for e in (e1, e2):
                new_edges[e] = _split(graph, e, node)
                _rewire(adj, graph.edges[e], new_edges[e])
            touched.update((e1, e2))
            inserted = True
        if not inserted:
            return added
        edges = []
        for k, edge in enumerate(graph.edges):
            edges.extend(new_edges.get(k, [edge]))
        graph.edges = edges
    raise PlanningError("junction insertion did not settle")


def build_path_graph(
    trajectory: Sequence[Pose] | np.ndarray,
    junction_radius: float = JUNCTION_RADIUS,
    floor_gap: float = FLOOR_GAP,
) -> PathGraph:
    """Path graph over trajectory positions with junctions at self-crossings.

    Trajectory positions closer than 1e-9 m share a node.
    """
    positions = np.array([x.p for x in trajectory] if len(trajectory) and isinstance(trajectory[0], Pose) else trajectory, dtype=float).reshape(-1, 3)
    if len(positions) < 2:
        raise PlanningError("need at least 2 poses to build a path graph")
    if not junction_radius > 0:
        raise PlanningError("junction radius must be positive")
    node_of = _dedupe(positions)
    n_nodes = int(node_of.max()) + 1
    nodes = np.zeros((n_nodes, 3))
    nodes[node_of] = positions
    for k in range(len(positions) - 1, -1, -1):
        nodes[node_of[k]] = positions[k]  # first occurrence wins
    edges, seen = [], set()
    for k in range(len(positions) - 1):
        i, j = int(node_of[k]), int(node_of[k + 1])
        key = (min(i, j), max(i, j))
        if i == j or key in seen:
            continue
        seen.add(key)
        edges.append((i, j, _length(nodes[i], nodes[j])))
    graph = PathGraph(nodes, edges)
    insert_junctions(graph, junction_radius, floor_gap)
    return graph


def _dedupe(positions: np.ndarray) -> np.ndarray:
    tree = cKDTree(positions)
    node_of = -np.ones(len(positions), dtype=int)
    count = 0
    for k in range(len(positions)):
        if node_of[k] >= 0:
            continue
        for m in tree.query_ball_point(positions[k], _EPS):
            if node_of[m] < 0:
                node_of[m] = count
        count += 1
    return node_of


@dataclass(frozen=True)
class NearestPoint:
    edge: int | None
    fraction: float
    node: int | None
    position: np.ndarray
    distance: float


def nearest_graph_point(graph: PathGraph, position) -> NearestPoint:
    """Closest point on any edge; ties resolve to the lowest edge index."""
    x = np.asarray(position, dtype=float)
    if graph.num_nodes == 0:
        raise PlanningError("empty path graph")
    if not graph.edges:
        d = np.linalg.norm(graph.nodes - x, axis=1)
        k = int(np.argmin(d))
        return NearestPoint(None, 0.0, k, graph.nodes[k].copy(), float(d[k]))
    ij = np.array([(i, j) for i, j, _ in graph.edges])
    a, b = graph.nodes[ij[:, 0]], graph.nodes[ij[:, 1]]
    ab = b - a
    den = np.einsum("ij,ij->i", ab, ab)
    t = np.clip(np.einsum("ij,ij->i", x - a, ab) / np.where(den > 0, den, 1.0), 0.0, 1.0)
    proj = a + t[:, None] * ab
    dist = np.linalg.norm(proj - x, axis=1)
    k = int(np.flatnonzero(dist <= dist.min() + 1e-12)[0])
    node = None
    if _length(proj[k], a[k]) <= _EPS:
        node = int(ij[k, 0])
    elif _length(proj[k], b[k]) <= _EPS:
        node = int(ij[k, 1])
    return NearestPoint(k, float(t[k]), node, proj[k], float(dist[k]))


def dijkstra(adj, source: int, target: int) -> tuple[list[int], float]:
    """Shortest node sequence from ``source`` to ``target``."""
    dist = {source: 0.0}
    prev: dict[int, int] = {}
    heap = [(0.0, source)]
    done = set()
    while heap:
        d, n = heapq.heappop(heap)
        if n in done:
            continue
        done.add(n)
        if n == target:
            break
        for m, w in adj[n]:
            nd = d + w
            if nd < dist.get(m, math.inf):
                dist[m] = nd
                prev[m] = n
                heapq.heappush(heap, (nd, m))
    if target not in done:
        raise NoPathError(f"no path from node {source} to node {target}")
    path = [target]
    while path[-1] != source:
        path.append(prev[path[-1]])
    return path[::-1], dist[target]


@dataclass(frozen=True)
class Route:
    path: list[np.ndarray]
    length: float


def _attach(adj, graph: PathGraph, near: NearestPoint, new_node: int) -> int:
    """Hook a query projection into ``adj``; returns the node that represents it."""
    if near.node is not None:
        return near.node
    i, j, _ = graph.edges[near.edge]
    adj.append([])
    for m in (i, j):
        w = _length(near.position, graph.nodes[m])
        adj[new_node].append((m, w))
        adj[m].append((new_node, w))
    return new_node


def shortest_path(graph: PathGraph, start, goal) -> Route:
    """Shortest route from a position to a position along the path graph.

    Both query points are projected onto the graph; the returned polyline
    begins at ``start`` and ends at ``goal`` themselves whenever they lie off
    the graph.
    """
    start = np.asarray(start, dtype=float)
    goal = np.asarray(goal, dtype=float)
    s = nearest_graph_point(graph, start)
    g = nearest_graph_point(graph, goal)
    if s.edge is not None and s.edge == g.edge:
        middle = [s.position, g.position]
    else:
        adj = [list(x) for x in graph.adjacency()]
        positions = list(graph.nodes)
        s_node = _attach(adj, graph, s, len(adj))
        if s_node == len(positions):
            positions.append(s.position)
        g_node = _attach(adj, graph, g, len(adj))
        if g_node == len(positions):
            positions.append(g.position)
        nodes, _ = dijkstra(adj, s_node, g_node)
        middle = [np.asarray(positions[n]) for n in nodes]
    path = []
    if s.distance > _EPS:
        path.append(start)
    path.extend(middle)
    if g.distance > _EPS:
        path.append(goal)
    path = _drop_repeats(path)
    return Route(path, polyline_length(path))


def _drop_repeats(points: Iterable[np.ndarray]) -> list[np.ndarray]:
    out: list[np.ndarray] = []
    for p in points:
        if not out or _length(out[-1], p) > _EPS:
            out.append(np.asarray(p, dtype=float))
    if not out:
        return out
    if len(out) == 1:
        out.append(out[0].copy())
    return out


def polyline_length(points: Sequence[np.ndarray]) -> float:
    return float(sum(_length(a, b) for a, b in zip(points[:-1], points[1:])))
