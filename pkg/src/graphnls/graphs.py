"""Metric-graph topology and geometry.

A metric graph is a set of vertices joined by edges that carry lengths; each
edge is identified with an interval [0, L] whose x = 0 endpoint sits at the
edge's origin vertex.  Half-lines are edges attached to a single vertex and
are truncated to a finite computational length (Dirichlet condition at the
free end is applied by the discretization layer).

Everything in this module is immutable plain data after construction and can
be shared freely between workers.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import dijkstra


class GraphValidationError(ValueError):
    """Raised when a graph, trail or point violates a structural invariant."""


@dataclass(frozen=True)
class Edge:
    """One edge of a metric graph.

    ``src`` is the vertex at coordinate x = 0.  Bounded edges have ``dst`` at
    x = length; half-lines have ``dst = None`` and a finite ``truncation``
    standing in for the infinite extent.
    """

    id: str
    src: str
    dst: str | None
    length: float | None
    truncation: float | None = None

    @property
    def is_halfline(self) -> bool:
        return self.length is None

    @property
    def span(self) -> float:
        """Length of the computational interval [0, span]."""
        return float(self.truncation if self.is_halfline else self.length)

    def endpoints(self) -> tuple[str, ...]:
        return (self.src,) if self.is_halfline else (self.src, self.dst)


@dataclass(frozen=True)
class DeltaPotential:
    """Point interaction of strength ``strength`` located at a vertex.

    Assembly accepts strength >= 0 (zero reduces to the plain Kirchhoff
    operator); the line builder requires strictly positive strength.
    """

    vertex: str
    strength: float

    def __post_init__(self):
        if not math.isfinite(self.strength) or self.strength < 0:
            raise GraphValidationError(
                f"delta potential strength must be finite and >= 0, got {self.strength}"
            )


@dataclass(frozen=True)
class SampledPotential:
    """Non-negative smooth potential stored as per-edge sample tables.

    ``tables`` maps edge id -> (x samples, values); values are linearly
    interpolated onto any grid.  Tuples keep the dataclass hashable and make
    JSON round-trips lossless.
    """

    tables: tuple[tuple[str, tuple[float, ...], tuple[float, ...]], ...]

    def __post_init__(self):
        for eid, xs, vs in self.tables:
            if len(xs) != len(vs) or len(xs) < 2:
                raise GraphValidationError(f"potential table for {eid!r} malformed")
            if any(b <= a for a, b in zip(xs, xs[1:])):
                raise GraphValidationError(f"potential samples for {eid!r} not increasing")
            if any((not math.isfinite(v)) or v < 0 for v in vs):
                raise GraphValidationError(f"potential on {eid!r} must be finite and >= 0")

    def values(self, edge_id: str, x: np.ndarray) -> np.ndarray:
        for eid, xs, vs in self.tables:
            if eid == edge_id:
                return np.interp(x, xs, vs)
        return np.zeros_like(np.asarray(x, dtype=float))


Potential = DeltaPotential | SampledPotential


@dataclass(frozen=True)
class GraphPoint:
    """A point on the graph: edge id plus coordinate within [0, span]."""

    edge: str
    x: float


@dataclass(frozen=True)
class TrailStep:
    """One edge of a trail with its traversal direction.

    ``forward`` means the edge is walked from src (x = 0) towards dst.
    """

    edge: str
    forward: bool = True


@dataclass(frozen=True)
class Trail:
    steps: tuple[TrailStep, ...]

    def edge_ids(self) -> tuple[str, ...]:
        return tuple(s.edge for s in self.steps)


@dataclass(frozen=True)
class MetricGraph:
    """Connected metric graph with optional potential data attached.

    Validation runs at construction: positive lengths, consistent endpoints,
    connectivity, unique ids.  Bubbles must be realized as pairs of bounded
    edges, so loops (src == dst) are rejected.
    """

    vertices: tuple[str, ...]
    edges: tuple[Edge, ...]
    potential: Potential | None = None

    def __post_init__(self):
        validate(self)

    # -- lookup helpers -------------------------------------------------

    def edge(self, edge_id: str) -> Edge:
        for e in self.edges:
            if e.id == edge_id:
                return e
        raise KeyError(f"no edge {edge_id!r} in graph")

    def incident(self, vertex: str) -> tuple[Edge, ...]:
        return tuple(e for e in self.edges if vertex in e.endpoints())

    def degree(self, vertex: str) -> int:
        # a vertex joining both ends of parallel edges counts each incidence
        return sum(e.endpoints().count(vertex) for e in self.edges)

    @property
    def halflines(self) -> tuple[Edge, ...]:
        return tuple(e for e in self.edges if e.is_halfline)

    @property
    def bounded_edges(self) -> tuple[Edge, ...]:
        return tuple(e for e in self.edges if not e.is_halfline)

    def total_span(self) -> float:
        return sum(e.span for e in self.edges)


def validate(graph: MetricGraph) -> None:
    """Check structural invariants; raise GraphValidationError on failure."""
    if not graph.vertices:
        raise GraphValidationError("graph needs at least one vertex")
    if len(set(graph.vertices)) != len(graph.vertices):
        raise GraphValidationError("duplicate vertex ids")
    ids = [e.id for e in graph.edges]
    if len(set(ids)) != len(ids):
        raise GraphValidationError("duplicate edge ids")
    vset = set(graph.vertices)
    for e in graph.edges:
        if e.is_halfline:
            if e.dst is not None:
                raise GraphValidationError(f"half-line {e.id!r} must not have a dst vertex")
            if e.truncation is None or not math.isfinite(e.truncation) or e.truncation <= 0:
                raise GraphValidationError(f"half-line {e.id!r} needs a positive truncation")
        else:
            if e.length is None or not math.isfinite(e.length) or e.length <= 0:
                raise GraphValidationError(f"edge {e.id!r} needs a finite positive length")
            if e.dst is None:
                raise GraphValidationError(f"bounded edge {e.id!r} needs two endpoints")
            if e.src == e.dst:
                raise GraphValidationError(f"loop edge {e.id!r}: realize loops as two edges")
            if e.dst not in vset:
                raise GraphValidationError(f"edge {e.id!r} references unknown vertex {e.dst!r}")
        if e.src not in vset:
            raise GraphValidationError(f"edge {e.id!r} references unknown vertex {e.src!r}")
    # connectivity over bounded edges (half-lines attach to a single vertex)
    if len(graph.vertices) > 1:
        parent = {v: v for v in graph.vertices}

        def find(v):
            while parent[v] != v:
                parent[v] = parent[parent[v]]
                v = parent[v]
            return v

        for e in graph.bounded_edges:
            parent[find(e.src)] = find(e.dst)
        roots = {find(v) for v in graph.vertices}
        if len(roots) > 1:
            raise GraphValidationError("graph is not connected")
    if graph.potential is not None:
        _validate_potential(graph, graph.potential)


def _validate_potential(graph: MetricGraph, potential: Potential) -> None:
    if isinstance(potential, DeltaPotential):
        if potential.vertex not in graph.vertices:
            raise GraphValidationError(f"delta potential vertex {potential.vertex!r} not in graph")
    elif isinstance(potential, SampledPotential):
        eids = {e.id for e in graph.edges}
        for eid, xs, _ in potential.tables:
            if eid not in eids:
                raise GraphValidationError(f"potential table references unknown edge {eid!r}")
            span = graph.edge(eid).span
            if xs[0] < -1e-12 or xs[-1] > span + 1e-12:
                raise GraphValidationError(f"potential samples on {eid!r} leave [0, {span}]")
    else:
        raise GraphValidationError(f"unsupported potential type {type(potential)!r}")


# ----------------------------------------------------------------------
# builders
# ----------------------------------------------------------------------


def build_star(n_halflines: int, truncation: float) -> MetricGraph:
    """Star graph: one vertex with ``n_halflines`` >= 2 half-lines.

    With n = 2 this is the real line seen as two half-lines joined at a
    vertex where the Kirchhoff condition reduces to C^1 matching.
    """
    if n_halflines < 2:
        raise GraphValidationError(f"star graph needs >= 2 half-lines, got {n_halflines}")
    if truncation <= 0:
        raise GraphValidationError("truncation must be positive")
    edges = tuple(
        Edge(id=f"h{i}", src="v0", dst=None, length=None, truncation=float(truncation))
        for i in range(n_halflines)
    )
    return MetricGraph(vertices=("v0",), edges=edges)


def build_line(truncation: float) -> MetricGraph:
    return build_star(2, truncation)


def build_bubble_tower(perimeters: Sequence[float], truncation: float) -> MetricGraph:
    """Chain of bubbles with two half-lines at the bottom vertex.

    ``perimeters`` are listed from the top bubble down.  Each bubble is
    realized as two bounded edges of length perimeter/2 so that every edge
    has two distinct endpoints; vertex ``v0`` is the apex of the top bubble
    and ``v{len(perimeters)}`` is the bottom vertex carrying the half-lines.
    """
    if len(perimeters) == 0:
        raise GraphValidationError("bubble tower needs at least one bubble")
    if any((not math.isfinite(p)) or p <= 0 for p in perimeters):
        raise GraphValidationError("bubble perimeters must be positive")
    if truncation <= 0:
        raise GraphValidationError("truncation must be positive")
    m = len(perimeters)
    vertices = tuple(f"v{i}" for i in range(m + 1))
    edges: list[Edge] = []
    for i, per in enumerate(perimeters):
        half = float(per) / 2.0
        edges.append(Edge(id=f"b{i}a", src=f"v{i}", dst=f"v{i + 1}", length=half))
        edges.append(Edge(id=f"b{i}b", src=f"v{i}", dst=f"v{i + 1}", length=half))
    bottom = f"v{m}"
    for k in range(2):
        edges.append(Edge(id=f"h{k}", src=bottom, dst=None, length=None, truncation=float(truncation)))
    return MetricGraph(vertices=vertices, edges=tuple(edges))


def build_pendant_star(n_halflines: int, pendant_length: float, truncation: float) -> MetricGraph:
    """N >= 3 half-lines and one pendant edge, all attached to a single vertex.

    The pendant's free end is a genuine degree-1 vertex (Kirchhoff there
    reduces to a Neumann condition), not a truncation artifact.
    """
    if n_halflines < 3:
        raise GraphValidationError(f"pendant star needs >= 3 half-lines, got {n_halflines}")
    if pendant_length <= 0 or truncation <= 0:
        raise GraphValidationError("pendant length and truncation must be positive")
    edges: list[Edge] = [Edge(id="p0", src="v0", dst="v1", length=float(pendant_length))]
    for i in range(n_halflines):
        edges.append(Edge(id=f"h{i}", src="v0", dst=None, length=None, truncation=float(truncation)))
    return MetricGraph(vertices=("v0", "v1"), edges=tuple(edges))


def build_line_with_potential(
    potential: Potential | Callable[[float], float],
    truncation: float,
    sample_h: float = 0.05,
) -> MetricGraph:
    """The real line (two half-lines at ``v0``) with a repulsive potential.

    ``potential`` is either a ``DeltaPotential`` with strength g > 0 at the
    junction, a ``SampledPotential``, or a callable V(x) on the line which is
    sampled at spacing ``sample_h``.  Line coordinates: edge h0 carries
    x >= 0 and edge h1 carries x <= 0 (graph coordinate = |x|).
    """
    if truncation <= 0:
        raise GraphValidationError("truncation must be positive")
    if isinstance(potential, DeltaPotential):
        if potential.strength <= 0:
            raise GraphValidationError("delta potential on the line requires g > 0")
        pot: Potential = DeltaPotential(vertex="v0", strength=potential.strength)
    elif isinstance(potential, SampledPotential):
        pot = potential
    elif callable(potential):
        xs = np.arange(0.0, truncation + sample_h / 2, sample_h)
        xs[-1] = min(xs[-1], truncation)
        vplus = np.array([float(potential(x)) for x in xs])
        vminus = np.array([float(potential(-x)) for x in xs])
        if np.any(vplus < 0) or np.any(vminus < 0):
            raise GraphValidationError("smooth potential must be non-negative")
        pot = SampledPotential(
            tables=(
                ("h0", tuple(xs.tolist()), tuple(vplus.tolist())),
                ("h1", tuple(xs.tolist()), tuple(vminus.tolist())),
            )
        )
    else:
        raise GraphValidationError(f"unsupported potential spec {potential!r}")
    base = build_line(truncation)
    return MetricGraph(vertices=base.vertices, edges=base.edges, potential=pot)


# ----------------------------------------------------------------------
# trails and unfolding
# ----------------------------------------------------------------------


def trail_vertices(graph: MetricGraph, trail: Trail) -> list[str | None]:
    """Vertex sequence visited by the trail (None marks half-line free ends).

    Also validates the trail: consecutive edges must share the junction
    vertex and no edge may repeat.
    """
    if not trail.steps:
        raise GraphValidationError("empty trail")
    ids = trail.edge_ids()
    if len(set(ids)) != len(ids):
        raise GraphValidationError("trail repeats an edge")
    seq: list[str | None] = []
    for k, step in enumerate(trail.steps):
        e = graph.edge(step.edge)
        if e.is_halfline:
            enter, leave = (None, e.src) if not step.forward else (e.src, None)
        else:
            enter, leave = (e.src, e.dst) if step.forward else (e.dst, e.src)
        if k == 0:
            seq.extend([enter, leave])
        else:
            if enter is None or seq[-1] != enter:
                raise GraphValidationError(
                    f"trail discontinuous at step {k}: expected to enter at {seq[-1]!r}"
                )
            seq.append(leave)
    return seq


def make_trail(graph: MetricGraph, edge_ids: Sequence[str]) -> Trail:
    """Infer traversal directions for an ordered edge-id sequence.

    The inference walks the sequence keeping track of the exit vertex; a
    leading half-line is entered from its free end, a trailing one leaves
    towards its free end.  Handles parallel edges (bubbles) correctly because
    the entry vertex is always pinned by the previous step.
    """
    if not edge_ids:
        raise GraphValidationError("empty trail")
    steps: list[TrailStep] = []
    first = graph.edge(edge_ids[0])
    if first.is_halfline:
        steps.append(TrailStep(first.id, forward=False))
        at: str | None = first.src
    else:
        if len(edge_ids) == 1:
            steps.append(TrailStep(first.id, forward=True))
            at = first.dst
        else:
            nxt = graph.edge(edge_ids[1])
            nxt_ends = set(nxt.endpoints())
            if first.dst in nxt_ends:
                steps.append(TrailStep(first.id, forward=True))
                at = first.dst
            elif first.src in nxt_ends:
                steps.append(TrailStep(first.id, forward=False))
                at = first.src
            else:
                raise GraphValidationError("first two trail edges do not touch")
    for eid in edge_ids[1:]:
        e = graph.edge(eid)
        if e.is_halfline:
            if at != e.src:
                raise GraphValidationError(f"trail discontinuous before half-line {eid!r}")
            steps.append(TrailStep(eid, forward=True))
            at = None
        elif at == e.src:
            steps.append(TrailStep(eid, forward=True))
            at = e.dst
        elif at == e.dst:
            steps.append(TrailStep(eid, forward=False))
            at = e.src
        else:
            raise GraphValidationError(f"trail discontinuous before edge {eid!r}")
    trail = Trail(steps=tuple(steps))
    trail_vertices(graph, trail)
    return trail


@dataclass
class LineFunction:
    """Samples of a function on an interval of the real line."""

    x: np.ndarray
    values: np.ndarray

    def norm_lq(self, q: float) -> float:
        if q == math.inf:
            return float(np.max(np.abs(self.values)))
        return float(np.trapezoid(np.abs(self.values) ** q, self.x) ** (1.0 / q))


def unfold_trail(graph: MetricGraph, trail: Trail, u) -> LineFunction:
    """Restrict a graph function to a trail and lay it out on the line.

    The trail must start and end with half-lines.  The first half-line maps
    to the negative axis (u_line(x) = u_e(-x)); bounded edges follow with
    orientation flips where the trail runs against the stored coordinate, and
    the final half-line continues to the right.  Squared Lq norms along the
    trail are preserved by construction.

    ``u`` must expose ``grid.edge_coords(edge_id)`` and
    ``edge_values(edge_id)`` (see discretization.GraphFunction).
    """
    seq = trail_vertices(graph, trail)
    first, last = graph.edge(trail.steps[0].edge), graph.edge(trail.steps[-1].edge)
    if not (first.is_halfline and last.is_halfline):
        raise GraphValidationError("unfold requires a trail starting and ending with half-lines")
    if trail.steps[0].forward or (len(trail.steps) > 1 and not trail.steps[-1].forward):
        raise GraphValidationError("trail must enter from and leave towards the free ends")
    xs: list[np.ndarray] = []
    vals: list[np.ndarray] = []
    # leading half-line onto the negative axis, reversed
    x0 = np.asarray(u.grid.edge_coords(first.id))
    v0 = np.asarray(u.edge_values(first.id))
    xs.append(-x0[::-1])
    vals.append(v0[::-1])
    offset = 0.0
    for step in trail.steps[1:-1]:
        e = graph.edge(step.edge)
        xe = np.asarray(u.grid.edge_coords(e.id))
        ve = np.asarray(u.edge_values(e.id))
        if not step.forward:
            xe, ve = (e.span - xe)[::-1], ve[::-1]
        xs.append(offset + xe[1:])
        vals.append(ve[1:])
        offset += e.span
    if len(trail.steps) > 1:
        xl = np.asarray(u.grid.edge_coords(last.id))
        vl = np.asarray(u.edge_values(last.id))
        xs.append(offset + xl[1:])
        vals.append(vl[1:])
    return LineFunction(x=np.concatenate(xs), values=np.concatenate(vals))


# ----------------------------------------------------------------------
# metric
# ----------------------------------------------------------------------


def vertex_distance_matrix(graph: MetricGraph) -> tuple[dict[str, int], np.ndarray]:
    """All-pairs shortest-path distances between vertices (Dijkstra).

    Distances are exact on the truncated graph; half-lines are dead ends and
    never shorten a route between vertices.
    """
    index = {v: i for i, v in enumerate(graph.vertices)}
    n = len(graph.vertices)
    best: dict[tuple[int, int], float] = {}
    for e in graph.bounded_edges:
        i, j = index[e.src], index[e.dst]
        key = (min(i, j), max(i, j))
        w = float(e.length)
        if key not in best or w < best[key]:
            best[key] = w
    if best:
        rows = [k[0] for k in best]
        cols = [k[1] for k in best]
        data = [best[k] for k in best]
        adj = coo_matrix((data, (rows, cols)), shape=(n, n))
        dist = dijkstra(adj.tocsr(), directed=False)
    else:
        dist = np.full((n, n), np.inf)
        np.fill_diagonal(dist, 0.0)
    return index, dist


def _check_point(graph: MetricGraph, p: GraphPoint) -> Edge:
    e = graph.edge(p.edge)
    if p.x < -1e-12 or p.x > e.span + 1e-12:
        raise GraphValidationError(f"point coordinate {p.x} outside [0, {e.span}] on {p.edge!r}")
    return e


def graph_distance(
    graph: MetricGraph,
    a: GraphPoint,
    b: GraphPoint,
    vdist: tuple[dict[str, int], np.ndarray] | None = None,
) -> float:
    """Shortest-path metric between two points of the (truncated) graph."""
    ea, eb = _check_point(graph, a), _check_point(graph, b)
    index, dist = vdist if vdist is not None else vertex_distance_matrix(graph)

    def anchors(e: Edge, x: float) -> list[tuple[int, float]]:
        out = [(index[e.src], x)]
        if not e.is_halfline:
            out.append((index[e.dst], e.span - x))
        return out

    cands: list[float] = []
    if ea.id == eb.id:
        cands.append(abs(a.x - b.x))
    for ia, offa in anchors(ea, a.x):
        for ib, offb in anchors(eb, b.x):
            cands.append(offa + dist[ia, ib] + offb)
    return float(min(cands))


# ----------------------------------------------------------------------
# serialization (lossless round-trip)
# ----------------------------------------------------------------------


def graph_to_dict(graph: MetricGraph) -> dict:
    d: dict = {
        "vertices": list(graph.vertices),
        "edges": [
            {
                "id": e.id,
                "src": e.src,
                "dst": e.dst,
                "halfline": e.is_halfline,
                "length": e.length,
                "truncation": e.truncation,
            }
            for e in graph.edges
        ],
    }
    if isinstance(graph.potential, DeltaPotential):
        d["potential"] = {
            "kind": "delta",
            "vertex": graph.potential.vertex,
            "strength": graph.potential.strength,
        }
    elif isinstance(graph.potential, SampledPotential):
        d["potential"] = {
            "kind": "sampled",
            "tables": [
                {"edge": eid, "x": list(xs), "v": list(vs)}
                for eid, xs, vs in graph.potential.tables
            ],
        }
    return d


def graph_from_dict(d: dict) -> MetricGraph:
    edges = tuple(
        Edge(
            id=ed["id"],
            src=ed["src"],
            dst=ed["dst"],
            length=ed["length"],
            truncation=ed["truncation"],
        )
        for ed in d["edges"]
    )
    potential: Potential | None = None
    if "potential" in d and d["potential"] is not None:
        pd = d["potential"]
        if pd["kind"] == "delta":
            potential = DeltaPotential(vertex=pd["vertex"], strength=pd["strength"])
        elif pd["kind"] == "sampled":
            potential = SampledPotential(
                tables=tuple(
                    (t["edge"], tuple(t["x"]), tuple(t["v"])) for t in pd["tables"]
                )
            )
        else:
            raise GraphValidationError(f"unknown potential kind {pd['kind']!r}")
    return MetricGraph(vertices=tuple(d["vertices"]), edges=edges, potential=potential)


def save_graph(graph: MetricGraph, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(graph_to_dict(graph), fh, indent=2)
        fh.write("\n")


def load_graph(path) -> MetricGraph:
    with open(path, "r", encoding="utf-8") as fh:
        return graph_from_dict(json.load(fh))
