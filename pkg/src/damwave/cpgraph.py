"""Composition-graph (CP-graph) model of a triangular mesh.

Triangles are graph nodes; each triangle holds three bonds pointing at edge
nodes.  Refinement is expressed by four productions:

``GT1`` (:func:`mark_element`)
    mark the longest edge of an element flagged for refinement.
``GT2`` (:func:`propagate_mark`)
    push the marker to the longest edge of a neighbour that does not share it
    as its own longest edge.
``GT3`` (:func:`split_interior`)
    bisect a marked edge that is the longest edge of both triangles sharing it.
``GT4`` (:func:`split_boundary`)
    bisect a marked boundary edge.

:func:`rivara_refine` drives the productions until no marker is left, which
yields Rivara's longest-edge refinement without hanging nodes.

Coordinates are ``(lon, lat, elev)`` triples in degrees/degrees/metres.
Edge lengths are 3D chords on a sphere of radius ``R`` (elevation ignored).
Meshes must not straddle the +-180 degree seam.
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

import numpy as np
from scipy.spatial import cKDTree

EARTH_RADIUS = 6371000.0
TIE_RTOL = 1e-12

Coord = tuple[float, float, float]
ElevationFn = Callable[[float, float], float]


class ProductionError(ValueError):
    """A production was applied where its left-hand side does not match."""


class MeshFormatError(ValueError):
    pass


def chord_length(p, q, radius: float = EARTH_RADIUS) -> float:
    """Straight-line distance between two lon/lat points on a sphere."""
    lam1, phi1 = math.radians(p[0]), math.radians(p[1])
    lam2, phi2 = math.radians(q[0]), math.radians(q[1])
    c1, c2 = math.cos(phi1), math.cos(phi2)
    dx = c1 * math.cos(lam1) - c2 * math.cos(lam2)
    dy = c1 * math.sin(lam1) - c2 * math.sin(lam2)
    dz = math.sin(phi1) - math.sin(phi2)
    return radius * math.sqrt(dx * dx + dy * dy + dz * dz)


def _vkey(c) -> tuple[float, float]:
    return (c[0], c[1])


def _ekey(p, q) -> tuple:
    a, b = _vkey(p), _vkey(q)
    return (a, b) if a <= b else (b, a)


def signed_area(c1, c2, c3) -> float:
    """Signed area in the lon-lat plane (deg^2), positive when counter-clockwise."""
    return 0.5 * ((c2[0] - c1[0]) * (c3[1] - c1[1]) - (c3[0] - c1[0]) * (c2[1] - c1[1]))


@dataclass(slots=True)
class TriangleNode:
    id: int
    c1: Coord
    c2: Coord
    c3: Coord
    bonds: list[int]
    rc: bool = False

    @property
    def vertices(self) -> tuple[Coord, Coord, Coord]:
        return (self.c1, self.c2, self.c3)

    def side(self, i: int) -> tuple[Coord, Coord]:
        """Endpoints of bond ``i``: (c1,c2), (c2,c3), (c3,c1)."""
        v = self.vertices
        return v[i], v[(i + 1) % 3]


@dataclass(slots=True)
class EdgeNode:
    id: int
    l: float
    b: bool
    br: bool
    incident: list[int]
    endpoints: tuple[Coord, Coord]


class MeshGraph:
    """Live CP-graph rewritten in place by the productions."""

    def __init__(self, radius: float = EARTH_RADIUS):
        self.radius = radius
        self.triangles: dict[int, TriangleNode] = {}
        self.edges: dict[int, EdgeNode] = {}
        self.next_id = 0
        self._edge_by_key: dict[tuple, int] = {}

    def _take_id(self) -> int:
        i = self.next_id
        self.next_id += 1
        return i

    @classmethod
    def from_triangles(cls, triangles: Iterable, radius: float = EARTH_RADIUS) -> "MeshGraph":
        """Build a mesh from vertex triples; orientation is normalised to CCW."""
        mesh = cls(radius)
        for tri in triangles:
            c1, c2, c3 = (tuple(float(x) for x in c) for c in tri)
            mesh.add_triangle(c1, c2, c3)
        mesh._refresh_boundary(mesh.edges.values())
        return mesh

    def add_triangle(self, c1: Coord, c2: Coord, c3: Coord, tid: Optional[int] = None) -> int:
        a = signed_area(c1, c2, c3)
        if a == 0.0:
            raise ProductionError(f"degenerate triangle {c1} {c2} {c3}")
        if a < 0:
            c2, c3 = c3, c2
        if tid is None:
            tid = self._take_id()
        elif tid >= self.next_id:
            self.next_id = tid + 1
        bonds = [self._edge_for(p, q, tid) for p, q in ((c1, c2), (c2, c3), (c3, c1))]
        self.triangles[tid] = TriangleNode(tid, c1, c2, c3, bonds)
        return tid

    def _edge_for(self, p: Coord, q: Coord, tid: int) -> int:
        key = _ekey(p, q)
        eid = self._edge_by_key.get(key)
        if eid is None:
            eid = self._take_id()
            self.edges[eid] = EdgeNode(eid, chord_length(p, q, self.radius), True, False, [tid], (p, q))
            self._edge_by_key[key] = eid
        else:
            self.edges[eid].incident.append(tid)
        return eid

    def _detach(self, tid: int) -> TriangleNode:
        tri = self.triangles.pop(tid)
        for eid in tri.bonds:
            edge = self.edges.get(eid)
            if edge is not None:
                edge.incident.remove(tid)
        return tri

    def _drop_edge(self, eid: int) -> EdgeNode:
        edge = self.edges.pop(eid)
        del self._edge_by_key[_ekey(*edge.endpoints)]
        return edge

    def _refresh_boundary(self, edges: Iterable[EdgeNode]) -> None:
        for e in edges:
            e.b = len(e.incident) == 1

    def edge_between(self, p, q) -> Optional[int]:
        return self._edge_by_key.get(_ekey(p, q))

    def vertices(self) -> list[Coord]:
        """Distinct vertices sorted by (lon, lat)."""
        seen: dict[tuple, Coord] = {}
        for t in self.triangles.values():
            for c in t.vertices:
                seen.setdefault(_vkey(c), c)
        return [seen[k] for k in sorted(seen)]

    def boundary_edge_count(self) -> int:
        return sum(1 for e in self.edges.values() if e.b)

    def __repr__(self) -> str:
        return f"MeshGraph(triangles={len(self.triangles)}, edges={len(self.edges)})"


# -- longest-edge selection -------------------------------------------------

def longest_edge(mesh: MeshGraph, tid: int) -> int:
    """Designated longest edge of a triangle.

    Ties within a relative tolerance prefer boundary edges, then the
    smallest edge id.
    """
    tri = mesh.triangles[tid]
    edges = [mesh.edges[e] for e in tri.bonds]
    lmax = max(e.l for e in edges)
    cands = [e for e in edges if e.l >= lmax * (1.0 - TIE_RTOL)]
    cands.sort(key=lambda e: (not e.b, e.id))
    return cands[0].id


def mark_element(mesh: MeshGraph, tid: int) -> int:
    """GT1: set ``br`` on the longest edge of a triangle with ``rc`` set."""
    tri = mesh.triangles.get(tid)
    if tri is None:
        raise KeyError(f"unknown triangle {tid}")
    if not tri.rc:
        raise ProductionError(f"GT1 does not match: triangle {tid} has rc = 0")
    eid = longest_edge(mesh, tid)
    mesh.edges[eid].br = True
    return eid


def _propagation_target(mesh: MeshGraph, eid: int) -> Optional[int]:
    edge = mesh.edges[eid]
    if len(edge.incident) != 2:
        return None
    for tid in edge.incident:
        le = longest_edge(mesh, tid)
        if le != eid:
            return le
    return None


def propagate_mark(mesh: MeshGraph, eid: int) -> Optional[int]:
    """GT2: mark the longest edge of the neighbour that defers the split.

    Returns the newly marked edge id, or ``None`` when GT2 does not apply
    (the edge is on the boundary, or is the longest edge of both sharers).
    """
    edge = mesh.edges.get(eid)
    if edge is None:
        raise KeyError(f"unknown edge {eid}")
    if not edge.br:
        raise ProductionError(f"GT2 does not match: edge {eid} has br = 0")
    target = _propagation_target(mesh, eid)
    if target is not None:
        mesh.edges[target].br = True
    return target


def _midpoint(p: Coord, q: Coord, terrain: Optional[ElevationFn]) -> Coord:
    lon = 0.5 * (p[0] + q[0])
    lat = 0.5 * (p[1] + q[1])
    elev = float(terrain(lon, lat)) if terrain is not None else 0.5 * (p[2] + q[2])
    return (lon, lat, elev)


def _bisect(mesh: MeshGraph, tri: TriangleNode, eid: int, mid: Coord) -> list[int]:
    i = tri.bonds.index(eid)
    v = tri.vertices
    a, b, opp = v[i], v[(i + 1) % 3], v[(i + 2) % 3]
    return [mesh.add_triangle(a, mid, opp), mesh.add_triangle(mid, b, opp)]


def _touched(mesh: MeshGraph, tids: list[int]) -> list[EdgeNode]:
    return [mesh.edges[e] for t in tids for e in mesh.triangles[t].bonds]


def split_interior(mesh: MeshGraph, eid: int, terrain: Optional[ElevationFn] = None) -> list[int]:
    """GT3: bisect a marked edge that is the longest edge of both sharers."""
    edge = mesh.edges.get(eid)
    if edge is None:
        raise KeyError(f"unknown edge {eid}")
    if not edge.br:
        raise ProductionError(f"GT3 does not match: edge {eid} has br = 0")
    if len(edge.incident) != 2:
        raise ProductionError(f"GT3 does not match: edge {eid} has {len(edge.incident)} incident triangles")
    for tid in edge.incident:
        if longest_edge(mesh, tid) != eid:
            raise ProductionError(f"GT3 does not match: edge {eid} is not the longest edge of triangle {tid}")
    mid = _midpoint(*edge.endpoints, terrain)
    parents = [mesh.triangles[t] for t in sorted(edge.incident)]
    for t in parents:
        mesh._detach(t.id)
    mesh._drop_edge(eid)
    children = []
    for t in parents:
        children += _bisect(mesh, t, eid, mid)
    mesh._refresh_boundary(_touched(mesh, children))
    return children


def split_boundary(mesh: MeshGraph, eid: int, terrain: Optional[ElevationFn] = None) -> list[int]:
    """GT4: bisect a marked boundary edge; the halves stay on the boundary."""
    edge = mesh.edges.get(eid)
    if edge is None:
        raise KeyError(f"unknown edge {eid}")
    if not edge.br:
        raise ProductionError(f"GT4 does not match: edge {eid} has br = 0")
    if len(edge.incident) != 1:
        raise ProductionError(f"GT4 does not match: edge {eid} is not a boundary edge")
    (tid,) = edge.incident
    if longest_edge(mesh, tid) != eid:
        raise ProductionError(f"GT4 does not match: edge {eid} is not the longest edge of triangle {tid}")
    mid = _midpoint(*edge.endpoints, terrain)
    parent = mesh._detach(tid)
    mesh._drop_edge(eid)
    children = _bisect(mesh, parent, eid, mid)
    mesh._refresh_boundary(_touched(mesh, children))
    return children


def rivara_refine(
    mesh: MeshGraph,
    marked: Iterable[int],
    terrain: Optional[ElevationFn] = None,
    trace: Optional[list] = None,
) -> MeshGraph:
    """Refine ``marked`` triangles (and whatever conformity requires).

    Marked edges are kept on a FIFO work-list; GT3/GT4 are applied as soon as
    they match, otherwise GT2 pushes the marker and the edge is revisited.
    If ``trace`` is a list, ``(production, id)`` tuples are appended to it.
    """
    marked = sorted(set(marked))
    for tid in marked:
        if tid not in mesh.triangles:
            raise KeyError(f"unknown triangle {tid}")
        mesh.triangles[tid].rc = True

    queue: deque[int] = deque()
    queued: set[int] = set()

    def push(e: int) -> None:
        if e not in queued:
            queued.add(e)
            queue.append(e)

    for tid in marked:
        eid = mark_element(mesh, tid)
        if trace is not None:
            trace.append(("GT1", tid))
        push(eid)

    idle = 0
    while queue:
        eid = queue.popleft()
        queued.discard(eid)
        edge = mesh.edges.get(eid)
        if edge is None or not edge.br:
            continue
        if len(edge.incident) == 1:
            split_boundary(mesh, eid, terrain)
            if trace is not None:
                trace.append(("GT4", eid))
            idle = 0
            continue
        target = _propagation_target(mesh, eid)
        if target is None:
            split_interior(mesh, eid, terrain)
            if trace is not None:
                trace.append(("GT3", eid))
            idle = 0
            continue
        if not mesh.edges[target].br:
            mesh.edges[target].br = True
            if trace is not None:
                trace.append(("GT2", eid))
            idle = 0
        else:
            idle += 1
            if idle > 2 * len(queue) + 2:
                raise RuntimeError("refinement made no progress over a full work-list pass")
        push(target)
        push(eid)
    return mesh


# -- checks -----------------------------------------------------------------

@dataclass(frozen=True)
class Violation:
    kind: str  # "incidence" | "hanging-node" | "endpoints" | "degenerate"
    detail: str


@dataclass
class ConformityReport:
    violations: list[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def count(self, kind: str) -> int:
        return sum(1 for v in self.violations if v.kind == kind)

    def __len__(self) -> int:
        return len(self.violations)

    def __str__(self) -> str:
        lines = [f"{len(self.violations)} violations"]
        lines += [f"  {v.kind}: {v.detail}" for v in self.violations]
        return "\n".join(lines)


def validate_conformity(mesh: MeshGraph, tol_m: float = 1e-9) -> ConformityReport:
    """Scan a mesh for conformity violations.

    Checks are recomputed from triangle coordinates and bonds, not from the
    cached ``incident`` lists, so a corrupted graph is still caught.
    """
    report = ConformityReport()
    add = report.violations.append

    bond_count: dict[int, int] = {}
    side_count: dict[tuple, int] = {}
    for tri in mesh.triangles.values():
        if len(tri.bonds) != 3:
            add(Violation("incidence", f"triangle {tri.id} has {len(tri.bonds)} bonds"))
        if signed_area(*tri.vertices) <= 0.0:
            add(Violation("degenerate", f"triangle {tri.id} has non-positive area"))
        for i, eid in enumerate(tri.bonds):
            bond_count[eid] = bond_count.get(eid, 0) + 1
            p, q = tri.side(i)
            side_count[_ekey(p, q)] = side_count.get(_ekey(p, q), 0) + 1
            edge = mesh.edges.get(eid)
            if edge is None:
                add(Violation("incidence", f"triangle {tri.id} bonds missing edge {eid}"))
            elif _ekey(*edge.endpoints) != _ekey(p, q):
                add(Violation("endpoints", f"triangle {tri.id} side {i} disagrees with edge {eid}"))
    for eid in mesh.edges:
        n = bond_count.get(eid, 0)
        if n == 0 or n > 2:
            add(Violation("incidence", f"edge {eid} has {n} incident triangles"))
    for key, n in side_count.items():
        if n > 2:
            add(Violation("incidence", f"side {key} shared by {n} triangles"))

    if not side_count:
        return report
    verts = np.array(sorted({k for s in side_count for k in s}), dtype=float)
    sides = list(side_count)
    p = np.array([s[0] for s in sides])
    q = np.array([s[1] for s in sides])
    for si, vi in _hanging_nodes(verts, p, q, mesh.radius, tol_m):
        add(Violation("hanging-node", f"vertex {tuple(verts[vi])} lies inside side {sides[si]}"))
    return report


def _hanging_nodes(verts, p, q, radius, tol_m):
    """(side, vertex) index pairs with the vertex strictly inside the side."""
    deg = math.pi / 180.0 * radius
    # rounding of midpoints is ~1 ulp of the coordinate; never test below that
    floor = 16 * np.finfo(float).eps * float(np.abs(verts).max(initial=1.0)) * deg
    tol = max(tol_m, floor)
    tree = cKDTree(verts)
    mid = 0.5 * (p + q)
    half = 0.5 * np.hypot(*(q - p).T)
    cands = tree.query_ball_point(mid, half * (1 + 1e-9) + 1e-12, return_sorted=False)
    counts = np.fromiter((len(c) for c in cands), dtype=np.intp, count=len(cands))
    si = np.repeat(np.arange(len(cands)), counts)
    if si.size == 0:
        return []
    vi = np.fromiter((v for c in cands for v in c), dtype=np.intp, count=si.size)
    coslat = np.cos(np.radians(mid[si, 1]))
    d = (q[si] - p[si]) * deg
    d[:, 0] *= coslat
    w = (verts[vi] - p[si]) * deg
    w[:, 0] *= coslat
    length = np.hypot(d[:, 0], d[:, 1])
    along = np.einsum("ij,ij->i", w, d) / length
    perp = np.abs(w[:, 0] * d[:, 1] - w[:, 1] * d[:, 0]) / length
    inside = (perp <= tol) & (along > tol) & (along < length - tol)
    return list(zip(si[inside].tolist(), vi[inside].tolist()))


def triangle_angles(c1, c2, c3) -> tuple[float, float, float]:
    """Interior angles (degrees) in the lon-lat plane."""
    return tuple(float(a) for a in _angles(np.array([[c1[:2], c2[:2], c3[:2]]], dtype=float))[0])


def _angles(xy: np.ndarray) -> np.ndarray:
    out = np.empty(xy.shape[:2])
    for i in range(3):
        u = xy[:, (i + 1) % 3] - xy[:, i]
        v = xy[:, (i + 2) % 3] - xy[:, i]
        cosang = np.einsum("ij,ij->i", u, v) / (np.hypot(u[:, 0], u[:, 1]) * np.hypot(v[:, 0], v[:, 1]))
        out[:, i] = np.degrees(np.arccos(np.clip(cosang, -1.0, 1.0)))
    return out


def min_angle(mesh: MeshGraph) -> float:
    """Smallest interior angle of the mesh, degrees, lon-lat plane."""
    xy = np.array([[c[:2] for c in t.vertices] for t in mesh.triangles.values()], dtype=float)
    return float(_angles(xy).min())


# -- construction helpers ---------------------------------------------------

def structured_mesh(
    lon0: float,
    lon1: float,
    lat0: float,
    lat1: float,
    nx: int,
    ny: int,
    elevation: Optional[ElevationFn] = None,
    radius: float = EARTH_RADIUS,
) -> MeshGraph:
    """``nx`` x ``ny`` rectangles, each cut into two triangles."""
    if nx < 1 or ny < 1:
        raise ValueError("nx and ny must be positive")
    if not (-180.0 <= lon0 < lon1 <= 180.0 and -90.0 <= lat0 < lat1 <= 90.0):
        raise ValueError("invalid lon/lat box")
    lons = np.linspace(lon0, lon1, nx + 1)
    lats = np.linspace(lat0, lat1, ny + 1)
    z = np.zeros((ny + 1, nx + 1))
    if elevation is not None:
        for j in range(ny + 1):
            for i in range(nx + 1):
                z[j, i] = elevation(float(lons[i]), float(lats[j]))

    def c(i, j):
        return (float(lons[i]), float(lats[j]), float(z[j, i]))

    tris = []
    for j in range(ny):
        for i in range(nx):
            tris.append((c(i, j), c(i + 1, j), c(i + 1, j + 1)))
            tris.append((c(i, j), c(i + 1, j + 1), c(i, j + 1)))
    return MeshGraph.from_triangles(tris, radius)


def extract_submesh(mesh: MeshGraph, keep: Iterable[int]) -> MeshGraph:
    """New mesh made of the kept triangles, with boundary flags recomputed."""
    keep = sorted(set(keep))
    return MeshGraph.from_triangles([mesh.triangles[t].vertices for t in keep], mesh.radius)


# -- damwave-mesh v1 text format -------------------------------------------

MESH_HEADER = "damwave-mesh v1"


def write_mesh(mesh: MeshGraph, path) -> None:
    verts = mesh.vertices()
    vid = {_vkey(c): i for i, c in enumerate(verts)}
    lines = [MESH_HEADER, f"V {len(verts)}"]
    lines += [f"{i} {c[0]!r} {c[1]!r} {c[2]!r}" for i, c in enumerate(verts)]
    tids = sorted(mesh.triangles)
    lines.append(f"T {len(tids)}")
    for t in tids:
        tri = mesh.triangles[t]
        lines.append(f"{t} " + " ".join(str(vid[_vkey(c)]) for c in tri.vertices))
    eids = sorted(mesh.edges)
    lines.append(f"E {len(eids)}")
    for e in eids:
        edge = mesh.edges[e]
        a, b = sorted(vid[_vkey(c)] for c in edge.endpoints)
        lines.append(f"{e} {a} {b} {int(edge.b)}")
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def read_mesh(path, radius: float = EARTH_RADIUS) -> MeshGraph:
    with open(path) as fh:
        lines = [ln.strip() for ln in fh]
    pos = 0

    def next_line():
        nonlocal pos
        while pos < len(lines) and not lines[pos]:
            pos += 1
        if pos >= len(lines):
            raise MeshFormatError("unexpected end of file")
        pos += 1
        return pos, lines[pos - 1]

    def section(tag):
        ln, text = next_line()
        parts = text.split()
        if len(parts) != 2 or parts[0] != tag:
            raise MeshFormatError(f"line {ln}: expected '{tag} <count>'")
        return int(parts[1])

    ln, head = next_line()
    if head != MESH_HEADER:
        raise MeshFormatError(f"line {ln}: bad header {head!r}")
    verts = {}
    for _ in range(section("V")):
        ln, text = next_line()
        try:
            i, lon, lat, z = text.split()
            verts[int(i)] = (float(lon), float(lat), float(z))
        except ValueError:
            raise MeshFormatError(f"line {ln}: bad vertex record") from None
    mesh = MeshGraph(radius)
    for _ in range(section("T")):
        ln, text = next_line()
        try:
            t, a, b, c = (int(x) for x in text.split())
            mesh.add_triangle(verts[a], verts[b], verts[c], tid=t)
        except (ValueError, KeyError):
            raise MeshFormatError(f"line {ln}: bad triangle record") from None
    # edges were created implicitly; rename them to the ids stored in the file
    renamed: dict[int, int] = {}
    for _ in range(section("E")):
        ln, text = next_line()
        try:
            e, a, b, _flag = (int(x) for x in text.split())
            old = mesh._edge_by_key[_ekey(verts[a], verts[b])]
        except (ValueError, KeyError):
            raise MeshFormatError(f"line {ln}: bad edge record") from None
        renamed[old] = e
    if len(renamed) != len(mesh.edges):
        raise MeshFormatError("edge section does not cover every triangle side")
    _rename_edges(mesh, renamed)
    mesh._refresh_boundary(mesh.edges.values())
    return mesh


def _rename_edges(mesh: MeshGraph, renamed: dict[int, int]) -> None:
    edges = {}
    for old, e in mesh.edges.items():
        e.id = renamed[old]
        edges[e.id] = e
    mesh.edges = edges
    mesh._edge_by_key = {_ekey(*e.endpoints): e.id for e in edges.values()}
    for tri in mesh.triangles.values():
        tri.bonds = [renamed[b] for b in tri.bonds]
    ids = list(mesh.triangles) + list(mesh.edges)
    mesh.next_id = max(ids, default=-1) + 1
