"""Road layouts: nodes, edges, directed lanes, routes, and layout files.

A layout is a planar graph. Every undirected edge carries two directed lanes,
each offset to the right of its travel direction. Intersections (graph nodes)
with four incident edges hold a traffic light. Layouts round-trip through a
versioned JSON schema.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

LAYOUT_SCHEMA_VERSION = 1

LANE_OFFSET = 2.0          # m, lane centerline right of road axis
INTERSECTION_TRIM = 7.0    # m, lanes stop this far from the node center
WAYPOINT_SPACING = 1.0     # m


class LayoutError(ValueError):
    pass


@dataclass(frozen=True)
class Node:
    id: str
    x: float
    y: float

    @property
    def pos(self) -> np.ndarray:
        return np.array([self.x, self.y])


@dataclass
class Lane:
    """Directed lane between two nodes, trimmed clear of both intersections."""

    id: str
    start_node: str
    end_node: str
    points: np.ndarray        # (N, 2) polyline at WAYPOINT_SPACING
    direction: np.ndarray     # unit vector

    @property
    def length(self) -> float:
        return float(np.linalg.norm(self.points[-1] - self.points[0]))

    @property
    def axis(self) -> str:
        return "ew" if abs(self.direction[0]) > abs(self.direction[1]) else "ns"


def _right_normal(u: np.ndarray) -> np.ndarray:
    return np.array([u[1], -u[0]])


def _polyline(a: np.ndarray, b: np.ndarray, spacing: float = WAYPOINT_SPACING) -> np.ndarray:
    n = max(int(math.ceil(np.linalg.norm(b - a) / spacing)), 1)
    t = np.linspace(0.0, 1.0, n + 1)[:, None]
    return a[None, :] * (1 - t) + b[None, :] * t


class Layout:
    def __init__(self, layout_id: str, nodes: list[Node], edges: list[tuple[str, str]]):
        self.id = layout_id
        self.nodes = {n.id: n for n in nodes}
        if len(self.nodes) != len(nodes):
            raise LayoutError("duplicate node ids")
        self.edges = []
        for a, b in edges:
            if a not in self.nodes or b not in self.nodes:
                raise LayoutError(f"edge ({a}, {b}) references unknown node")
            self.edges.append((a, b))
        self.lanes: dict[tuple[str, str], Lane] = {}
        self._adjacency: dict[str, list[str]] = {n: [] for n in self.nodes}
        for a, b in self.edges:
            self._adjacency[a].append(b)
            self._adjacency[b].append(a)
            for s, e in ((a, b), (b, a)):
                self.lanes[(s, e)] = self._build_lane(s, e)
        # Traffic lights sit at nodes where 3+ roads meet.
        self.lights = {n for n, adj in self._adjacency.items() if len(adj) >= 3}

    def _build_lane(self, start: str, end: str) -> Lane:
        p0, p1 = self.nodes[start].pos, self.nodes[end].pos
        u = p1 - p0
        dist = np.linalg.norm(u)
        if dist <= 2 * INTERSECTION_TRIM:
            raise LayoutError(f"edge ({start}, {end}) too short: {dist:.1f} m")
        u = u / dist
        r = _right_normal(u)
        a = p0 + u * INTERSECTION_TRIM + r * LANE_OFFSET
        b = p1 - u * INTERSECTION_TRIM + r * LANE_OFFSET
        return Lane(f"{start}->{end}", start, end, _polyline(a, b), u)

    def neighbors(self, node_id: str) -> list[str]:
        return sorted(self._adjacency[node_id])

    def lane(self, start: str, end: str) -> Lane:
        try:
            return self.lanes[(start, end)]
        except KeyError:
            raise LayoutError(f"no lane from {start} to {end}") from None

    def connector(self, lane_in: Lane, lane_out: Lane) -> np.ndarray:
        """Curve through the intersection from lane_in's end to lane_out's start."""
        a = lane_in.points[-1]
        b = lane_out.points[0]
        u, v = lane_in.direction, lane_out.direction
        cross = u[0] * v[1] - u[1] * v[0]
        if abs(cross) < 1e-6:
            return _polyline(a, b)
        # Control point: intersection of the two lane lines.
        # a + t*u  ==  b - s*v  ->  solve for t.
        denom = u[0] * v[1] - u[1] * v[0]
        t = ((b[0] - a[0]) * v[1] - (b[1] - a[1]) * v[0]) / denom
        ctrl = a + t * u
        ts = np.linspace(0.0, 1.0, 24)[:, None]
        bez = (1 - ts) ** 2 * a + 2 * (1 - ts) * ts * ctrl + ts**2 * b
        return bez

    def bounds(self, margin: float = 20.0) -> tuple[float, float, float, float]:
        xs = [n.x for n in self.nodes.values()]
        ys = [n.y for n in self.nodes.values()]
        return min(xs) - margin, min(ys) - margin, max(xs) + margin, max(ys) + margin

    # -- serialization ------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "schema_version": LAYOUT_SCHEMA_VERSION,
            "id": self.id,
            "nodes": [{"id": n.id, "x": n.x, "y": n.y} for n in self.nodes.values()],
            "edges": [list(e) for e in self.edges],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Layout":
        version = data.get("schema_version")
        if version != LAYOUT_SCHEMA_VERSION:
            raise LayoutError(f"unsupported layout schema version {version!r}")
        nodes = [Node(str(n["id"]), float(n["x"]), float(n["y"])) for n in data["nodes"]]
        edges = [(str(a), str(b)) for a, b in data["edges"]]
        return cls(str(data["id"]), nodes, edges)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)

    @classmethod
    def load(cls, path) -> "Layout":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _grid_layout(layout_id: str, rows: int, cols: int, spacing: float) -> Layout:
    nodes = [
        Node(f"n{i}{j}", j * spacing, i * spacing)
        for i in range(rows)
        for j in range(cols)
    ]
    edges = []
    for i in range(rows):
        for j in range(cols):
            if j + 1 < cols:
                edges.append((f"n{i}{j}", f"n{i}{j + 1}"))
            if i + 1 < rows:
                edges.append((f"n{i}{j}", f"n{i + 1}{j}"))
    return Layout(layout_id, nodes, edges)


_BUILTIN = {
    "town_a": lambda: _grid_layout("town_a", 3, 3, 60.0),
    "town_b": lambda: _grid_layout("town_b", 3, 4, 70.0),
}


def builtin_layout(layout_id: str) -> Layout:
    try:
        return _BUILTIN[layout_id]()
    except KeyError:
        raise LayoutError(
            f"unknown layout {layout_id!r}; builtins: {sorted(_BUILTIN)}"
        ) from None


# ---------------------------------------------------------------------------
# Routes
# ---------------------------------------------------------------------------


def classify_turn(u_in: np.ndarray, u_out: np.ndarray) -> str:
    cross = u_in[0] * u_out[1] - u_in[1] * u_out[0]
    if cross > 0.5:
        return "LEFT"
    if cross < -0.5:
        return "RIGHT"
    return "STRAIGHT"


@dataclass
class RouteIntersection:
    node: str
    s_entry: float        # arclength at the stop line (lane end)
    s_exit: float         # arclength where the connector rejoins a lane
    axis: str             # approach axis, "ns" or "ew"
    turn: str             # LEFT / RIGHT / STRAIGHT
    has_light: bool
    stop_point: np.ndarray


@dataclass
class Route:
    layout: Layout
    node_ids: list[str]
    waypoints: np.ndarray = field(init=False)
    arclength: np.ndarray = field(init=False)
    intersections: list[RouteIntersection] = field(init=False)

    def __post_init__(self):
        if len(self.node_ids) < 2:
            raise LayoutError("route needs at least two nodes")
        lanes = [
            self.layout.lane(a, b)
            for a, b in zip(self.node_ids[:-1], self.node_ids[1:])
        ]
        pieces = [lanes[0].points]
        self.intersections = []
        entry_marks = []  # (piece index, node, lane_in, lane_out)
        for lane_in, lane_out in zip(lanes[:-1], lanes[1:]):
            conn = self.layout.connector(lane_in, lane_out)
            entry_marks.append((len(pieces), lane_in, lane_out))
            pieces.append(conn[1:])
            pieces.append(lane_out.points[1:])
        pts = np.vstack(pieces)
        seglen = np.linalg.norm(np.diff(pts, axis=0), axis=1)
        s = np.concatenate([[0.0], np.cumsum(seglen)])
        self.waypoints = pts
        self.arclength = s
        # Arclength bookkeeping for each traversed intersection.
        offset = 0
        piece_starts = []
        for piece in pieces:
            piece_starts.append(offset)
            offset += len(piece)
        for piece_idx, lane_in, lane_out in entry_marks:
            i_entry = piece_starts[piece_idx] - 1          # last point of lane_in
            i_exit = piece_starts[piece_idx + 1]           # first point of lane_out
            node = lane_in.end_node
            self.intersections.append(
                RouteIntersection(
                    node=node,
                    s_entry=float(s[i_entry]),
                    s_exit=float(s[min(i_exit, len(s) - 1)]),
                    axis=lane_in.axis,
                    turn=classify_turn(lane_in.direction, lane_out.direction),
                    has_light=node in self.layout.lights,
                    stop_point=pts[i_entry].copy(),
                )
            )

    @property
    def total_length(self) -> float:
        return float(self.arclength[-1])

    @property
    def start_pose(self) -> tuple[np.ndarray, float]:
        p0, p1 = self.waypoints[0], self.waypoints[1]
        heading = math.atan2(p1[1] - p0[1], p1[0] - p0[0])
        return p0.copy(), heading

    def point_at(self, s: float) -> np.ndarray:
        idx = int(np.searchsorted(self.arclength, s, side="right")) - 1
        idx = max(0, min(idx, len(self.waypoints) - 2))
        s0, s1 = self.arclength[idx], self.arclength[idx + 1]
        t = 0.0 if s1 <= s0 else (s - s0) / (s1 - s0)
        t = min(max(t, 0.0), 1.0)
        return self.waypoints[idx] * (1 - t) + self.waypoints[idx + 1] * t


def sample_route(layout: Layout, rng: np.random.Generator, n_segments: int = 4,
                 start: str | None = None) -> Route:
    """Random walk over the road graph without immediate backtracking."""
    nodes = sorted(layout.nodes)
    current = start or nodes[int(rng.integers(len(nodes)))]
    path = [current]
    prev = None
    for _ in range(n_segments):
        options = [n for n in layout.neighbors(current) if n != prev]
        if not options:
            options = layout.neighbors(current)
        nxt = options[int(rng.integers(len(options)))]
        path.append(nxt)
        prev, current = current, nxt
    return Route(layout, path)


def route_from_id(layout: Layout, route_id: int, n_segments: int = 4) -> Route:
    """Deterministic route per (layout, route_id)."""
    import hashlib

    digest = hashlib.sha256(f"{layout.id}:{int(route_id)}".encode()).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    return sample_route(layout, rng, n_segments)
