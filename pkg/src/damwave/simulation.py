"""Dam-break scenarios: input file, initial levels, gauges and outputs.

Scenario file grammar (``#`` starts a comment, keys are case-insensitive)::

    [scenario]            # once
    mesh = basin.mesh     # damwave-mesh v1 file, or
    raster = basin.asc    # ESRI grid meshed on load (tolerance, max_triangles,
                          # max_iterations, coarse = "nx ny")
    wet_only = false      # drop triangles touching land (h_b > 0)
    tau = 60              # seconds
    n_steps = 200
    output_every = 0      # VTU snapshot cadence, 0 disables
    default_level = 0.0
    z_scale = 1.0         # vertical scale of u in the VTU points

    [physics]             # g, R, c0, h0, eps_dry
    [integrator]          # rho, convention, tol, picard, lumped_mass

    [region]              # repeatable, first match wins
    name = outside
    level = 6.0
    polygon = lon lat, lon lat, lon lat, ...

    [gauge]               # repeatable
    name = g1
    lon = 3.1
    lat = 54.2

    [front]               # optional front-speed estimate between two gauges
    from = g1
    to = g2
    threshold = 0.5

Relative paths resolve against the scenario file's directory.
"""
from __future__ import annotations

import io
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import cpgraph
from .cpgraph import MeshGraph, extract_submesh, read_mesh
from .femcore import DofMap, PhysicsConstants, WaveSystem, build_dof_map
from .terrain import RefinementConfig, generate_mesh, load_raster
from .timestepper import (
    TIMING_CATEGORIES, Convention, Hook, SimulationState, StepRecord, derive_params,
    initial_acceleration, run_transient,
)


class ScenarioError(ValueError):
    pass


class FrontNotArrivedError(RuntimeError):
    pass


@dataclass
class Region:
    name: str
    polygon: list[tuple[float, float]]
    level: float


@dataclass
class Gauge:
    name: str
    lon: float
    lat: float


@dataclass
class Scenario:
    mesh_path: Optional[Path] = None
    raster_path: Optional[Path] = None
    tolerance: float = 10.0
    max_triangles: int = 200_000
    max_iterations: int = 30
    coarse: tuple[int, int] = (8, 4)
    wet_only: bool = False
    regions: list[Region] = field(default_factory=list)
    default_level: float = 0.0
    gauges: list[Gauge] = field(default_factory=list)
    tau: float = 60.0
    n_steps: int = 100
    output_every: int = 0
    z_scale: float = 1.0
    constants: PhysicsConstants = field(default_factory=PhysicsConstants)
    rho: float = 0.2
    convention: Convention = Convention.STANDARD
    tol: float = 1e-10
    picard: int = 0
    lumped_mass: bool = False
    front: Optional[tuple[str, str, float]] = None

    def __post_init__(self):
        if not self.tau > 0:
            raise ScenarioError("tau must be positive")
        if self.n_steps < 0:
            raise ScenarioError("n_steps must be >= 0")
        for r in self.regions:
            if len(r.polygon) < 3:
                raise ScenarioError(f"region {r.name!r}: polygon needs at least 3 vertices")
            if not polygon_is_simple(r.polygon):
                raise ScenarioError(f"region {r.name!r}: polygon is self-intersecting")
        seen = {}
        for g in self.gauges:
            if g.name in seen:
                raise ScenarioError(f"duplicate gauge name {g.name!r}")
            for other in self.gauges:
                if other is not g and (other.lon, other.lat) == (g.lon, g.lat):
                    raise ScenarioError(f"gauges {g.name!r} and {other.name!r} share a position")
            seen[g.name] = g
        if self.front is not None:
            a, b, _ = self.front
            for n in (a, b):
                if n not in seen:
                    raise ScenarioError(f"front gauge {n!r} is not defined")


# -- scenario file ----------------------------------------------------------

def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _polygon(text: str) -> list[tuple[float, float]]:
    pts = []
    for chunk in text.split(","):
        lon, lat = chunk.split()
        pts.append((float(lon), float(lat)))
    return pts


def parse_scenario(text: str, base_dir: Path | str = ".") -> Scenario:
    base = Path(base_dir)
    sections: list[tuple[str, dict, int]] = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            sections.append((line[1:-1].strip().lower(), {}, lineno))
            continue
        if "=" not in line or not sections:
            raise ScenarioError(f"line {lineno}: expected 'key = value' inside a section")
        key, value = (s.strip() for s in line.split("=", 1))
        sections[-1][1][key.lower()] = (value, lineno)

    kw: dict = {"regions": [], "gauges": []}
    phys: dict = {}
    singles = set()
    for name, entries, lineno in sections:
        if name in ("scenario", "physics", "integrator", "front"):
            if name in singles:
                raise ScenarioError(f"line {lineno}: section [{name}] given twice")
            singles.add(name)
        try:
            _apply_section(name, {k: v for k, (v, _) in entries.items()}, kw, phys, base)
        except ScenarioError:
            raise
        except (KeyError, ValueError) as exc:
            raise ScenarioError(f"section [{name}] at line {lineno}: {exc}") from None
    if phys:
        kw["constants"] = PhysicsConstants(**phys)
    return Scenario(**kw)


def _apply_section(name, e, kw, phys, base):
    if name == "scenario":
        for key, value in e.items():
            if key in ("mesh", "raster"):
                kw[f"{key}_path"] = base / value
            elif key in ("tolerance", "tau", "default_level", "z_scale"):
                kw[key] = float(value)
            elif key in ("max_triangles", "max_iterations", "n_steps", "output_every"):
                kw[key] = int(value)
            elif key == "coarse":
                nx, ny = value.split()
                kw["coarse"] = (int(nx), int(ny))
            elif key == "wet_only":
                kw["wet_only"] = _bool(value)
            else:
                raise KeyError(f"unknown key {key!r}")
    elif name == "physics":
        for key, value in e.items():
            if key not in ("g", "r", "c0", "h0", "eps_dry"):
                raise KeyError(f"unknown key {key!r}")
            phys["R" if key == "r" else key] = float(value)
    elif name == "integrator":
        for key, value in e.items():
            if key in ("rho", "tol"):
                kw[key] = float(value)
            elif key == "picard":
                kw["picard"] = int(value)
            elif key == "convention":
                kw["convention"] = Convention(value)
            elif key == "lumped_mass":
                kw["lumped_mass"] = _bool(value)
            else:
                raise KeyError(f"unknown key {key!r}")
    elif name == "region":
        kw["regions"].append(Region(e.get("name", f"region{len(kw['regions'])}"),
                                    _polygon(e["polygon"]), float(e["level"])))
    elif name == "gauge":
        kw["gauges"].append(Gauge(e["name"], float(e["lon"]), float(e["lat"])))
    elif name == "front":
        kw["front"] = (e["from"], e["to"], float(e["threshold"]))
    else:
        raise KeyError(f"unknown section [{name}]")


def load_scenario(path) -> Scenario:
    path = Path(path)
    return parse_scenario(path.read_text(), path.parent)


# -- geometry helpers -------------------------------------------------------

def points_in_polygon(lon, lat, polygon) -> np.ndarray:
    """Even-odd rule with half-open edges, vectorized over points.

    An edge counts when exactly one endpoint lies strictly above the point,
    and the crossing is taken when the point is strictly left of the edge.
    Points on a polygon vertex or edge therefore get a fixed answer that
    depends only on the coordinates, never on evaluation order.
    """
    lon = np.asarray(lon, dtype=float)
    lat = np.asarray(lat, dtype=float)
    inside = np.zeros(np.broadcast(lon, lat).shape, dtype=bool)
    n = len(polygon)
    for i in range(n):
        x1, y1 = polygon[i]
        x2, y2 = polygon[(i + 1) % n]
        if y1 == y2:
            continue
        straddle = (y1 > lat) != (y2 > lat)
        # orientation sign instead of an interpolated crossing: it is exactly
        # zero when the point sits on either endpoint
        d = (x2 - x1) * (lat - y1) - (y2 - y1) * (lon - x1)
        left = d > 0 if y2 > y1 else d < 0
        inside ^= straddle & left
    return inside


def point_in_polygon(lon: float, lat: float, polygon) -> bool:
    return bool(points_in_polygon(lon, lat, polygon))


def _segments_cross(p1, p2, q1, q2) -> bool:
    def orient(a, b, c):
        v = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
        return (v > 0) - (v < 0)

    def on_seg(a, b, c):
        return min(a[0], b[0]) <= c[0] <= max(a[0], b[0]) and min(a[1], b[1]) <= c[1] <= max(a[1], b[1])

    o1, o2, o3, o4 = orient(p1, p2, q1), orient(p1, p2, q2), orient(q1, q2, p1), orient(q1, q2, p2)
    if o1 != o2 and o3 != o4:
        return True
    return any(o == 0 and on_seg(a, b, c) for o, a, b, c in
               ((o1, p1, p2, q1), (o2, p1, p2, q2), (o3, q1, q2, p1), (o4, q1, q2, p2)))


def polygon_is_simple(polygon) -> bool:
    n = len(polygon)
    for i in range(n):
        for j in range(i + 1, n):
            if j == i + 1 or (i == 0 and j == n - 1):
                continue
            if _segments_cross(polygon[i], polygon[(i + 1) % n], polygon[j], polygon[(j + 1) % n]):
                return False
    return True


def great_circle_distance(lon1, lat1, lon2, lat2, radius: float = cpgraph.EARTH_RADIUS) -> float:
    l1, p1, l2, p2 = map(math.radians, (lon1, lat1, lon2, lat2))
    h = math.sin((p2 - p1) / 2) ** 2 + math.cos(p1) * math.cos(p2) * math.sin((l2 - l1) / 2) ** 2
    return 2 * radius * math.asin(min(1.0, math.sqrt(h)))


def _mesh_box(dofmap: DofMap):
    lo = dofmap.lonlat.min(axis=0)
    hi = dofmap.lonlat.max(axis=0)
    return lo[0], hi[0], lo[1], hi[1]


# -- initial condition ------------------------------------------------------

def apply_initial_condition(dofmap: DofMap, scenario: Scenario) -> tuple[np.ndarray, np.ndarray]:
    """Nodal levels from the first matching region; land never starts under water level."""
    lon0, lon1, lat0, lat1 = _mesh_box(dofmap)
    for r in scenario.regions:
        xs = [p[0] for p in r.polygon]
        ys = [p[1] for p in r.polygon]
        if max(xs) < lon0 or min(xs) > lon1 or max(ys) < lat0 or min(ys) > lat1:
            raise ScenarioError(f"region {r.name!r} lies outside the mesh box")
    u0 = np.full(dofmap.n_dofs, float(scenario.default_level))
    assigned = np.zeros(dofmap.n_dofs, dtype=bool)
    for r in scenario.regions:
        hit = ~assigned & points_in_polygon(dofmap.lonlat[:, 0], dofmap.lonlat[:, 1], r.polygon)
        u0[hit] = r.level
        assigned |= hit
    land = dofmap.hb > 0
    u0[land] = np.maximum(u0[land], dofmap.hb[land])
    return u0, np.zeros(dofmap.n_dofs)


def region_mask(dofmap: DofMap, polygon) -> np.ndarray:
    return points_in_polygon(dofmap.lonlat[:, 0], dofmap.lonlat[:, 1], polygon)


# -- gauges -----------------------------------------------------------------

@dataclass
class GaugeSeries:
    name: str
    samples: list[tuple[float, float]] = field(default_factory=list)

    def append(self, t: float, u: float) -> None:
        if self.samples and t <= self.samples[-1][0]:
            raise ValueError(f"gauge {self.name}: time {t} does not increase")
        self.samples.append((float(t), float(u)))

    @property
    def times(self) -> np.ndarray:
        return np.array([s[0] for s in self.samples])

    @property
    def values(self) -> np.ndarray:
        return np.array([s[1] for s in self.samples])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="\n") as fh:
            fh.write("t_seconds,u_meters\n")
            for t, u in self.samples:
                fh.write(f"{t!r},{u!r}\n")


@dataclass
class GaugeLocation:
    gauge: Gauge
    dofs: np.ndarray
    weights: np.ndarray


def locate_gauges(dofmap: DofMap, gauges) -> list[GaugeLocation]:
    """Containing triangle and barycentric weights of each gauge."""
    xy = dofmap.lonlat[dofmap.tri]
    x1, y1 = xy[:, 0, 0], xy[:, 0, 1]
    det = (xy[:, 1, 0] - x1) * (xy[:, 2, 1] - y1) - (xy[:, 2, 0] - x1) * (xy[:, 1, 1] - y1)
    out = []
    for g in gauges:
        l2 = ((g.lon - x1) * (xy[:, 2, 1] - y1) - (xy[:, 2, 0] - x1) * (g.lat - y1)) / det
        l3 = ((xy[:, 1, 0] - x1) * (g.lat - y1) - (g.lon - x1) * (xy[:, 1, 1] - y1)) / det
        l1 = 1.0 - l2 - l3
        hit = np.flatnonzero((l1 >= -1e-12) & (l2 >= -1e-12) & (l3 >= -1e-12))
        if hit.size == 0:
            raise ScenarioError(f"gauge {g.name!r} at ({g.lon}, {g.lat}) lies outside the mesh")
        e = hit[0]
        out.append(GaugeLocation(g, dofmap.tri[e].copy(), np.array([l1[e], l2[e], l3[e]])))
    return out


def record_gauges(state: SimulationState, locations, series: dict[str, GaugeSeries]) -> None:
    for loc in locations:
        s = series.setdefault(loc.gauge.name, GaugeSeries(loc.gauge.name))
        s.append(state.t, float(state.u[loc.dofs] @ loc.weights))


def first_crossing(series: GaugeSeries, threshold: float) -> float:
    t, u = series.times, series.values
    above = np.flatnonzero(u >= threshold)
    if above.size == 0:
        raise FrontNotArrivedError(f"front did not arrive at gauge {series.name!r}")
    k = above[0]
    if k == 0:
        return float(t[0])
    return float(t[k - 1] + (threshold - u[k - 1]) * (t[k] - t[k - 1]) / (u[k] - u[k - 1]))


def estimate_front_speed(a: GaugeSeries, b: GaugeSeries, threshold: float, distance: float) -> float:
    """distance / (arrival at b - arrival at a), arrivals by linear interpolation."""
    if not distance > 0:
        raise ValueError("gauge separation must be positive")
    ta, tb = first_crossing(a, threshold), first_crossing(b, threshold)
    if tb == ta:
        raise ValueError("front reached both gauges at the same time")
    return distance / (tb - ta)


# -- VTU output -------------------------------------------------------------

def _ascii(arr, fmt) -> str:
    buf = io.StringIO()
    np.savetxt(buf, np.atleast_2d(arr), fmt=fmt)
    return buf.getvalue()


def write_vtu(dofmap: DofMap, u, path, z_scale: float = 1.0) -> None:
    """ASCII VTK unstructured grid; points are (lon, lat, z_scale * u)."""
    u = np.asarray(u, dtype=float)
    if u.shape != (dofmap.n_dofs,):
        raise ValueError(f"u has shape {u.shape}, expected ({dofmap.n_dofs},)")
    n, m = dofmap.n_dofs, len(dofmap.tri)
    pts = np.column_stack([dofmap.lonlat, z_scale * u])
    parts = [
        '<?xml version="1.0"?>\n',
        '<VTKFile type="UnstructuredGrid" version="0.1" byte_order="LittleEndian">\n',
        "<UnstructuredGrid>\n",
        f'<Piece NumberOfPoints="{n}" NumberOfCells="{m}">\n',
        '<PointData Scalars="u">\n',
        '<DataArray type="Float64" Name="u" format="ascii">\n', _ascii(u, "%.17g"), "</DataArray>\n",
        '<DataArray type="Float64" Name="h_b" format="ascii">\n', _ascii(dofmap.hb, "%.17g"), "</DataArray>\n",
        "</PointData>\n",
        "<Points>\n",
        '<DataArray type="Float64" NumberOfComponents="3" format="ascii">\n', _ascii(pts, "%.17g"), "</DataArray>\n",
        "</Points>\n",
        "<Cells>\n",
        '<DataArray type="Int64" Name="connectivity" format="ascii">\n', _ascii(dofmap.tri, "%d"), "</DataArray>\n",
        '<DataArray type="Int64" Name="offsets" format="ascii">\n', _ascii(3 * np.arange(1, m + 1), "%d"),
        "</DataArray>\n",
        '<DataArray type="UInt8" Name="types" format="ascii">\n', _ascii(np.full(m, 5), "%d"), "</DataArray>\n",
        "</Cells>\n",
        "</Piece>\n",
        "</UnstructuredGrid>\n",
        "</VTKFile>\n",
    ]
    with open(path, "w", newline="\n") as fh:
        fh.write("".join(parts))


# -- scenario driver --------------------------------------------------------

@dataclass
class Prepared:
    mesh: MeshGraph
    dofmap: DofMap
    system: WaveSystem
    state0: SimulationState
    gauges: list[GaugeLocation]
    region_masks: dict[str, np.ndarray]


@dataclass
class ScenarioResult:
    state: SimulationState
    prepared: Prepared
    gauges: dict[str, GaugeSeries]
    region_means: dict[str, float]
    region_series: dict[str, list[tuple[float, float]]]
    volume: list[tuple[float, float]]
    timing: dict[str, float]
    records: list[StepRecord]
    vtu_paths: list[Path]
    front_speed: Optional[float] = None
    celerity: Optional[float] = None


def _stage(name):
    class _Ctx:
        def __enter__(self):
            return self

        def __exit__(self, tp, exc, tb):
            if exc is not None and not isinstance(exc, ScenarioError):
                raise ScenarioError(f"stage {name!r} failed: {exc}") from exc
            return False

    return _Ctx()


def load_scenario_mesh(scenario: Scenario) -> MeshGraph:
    if scenario.mesh_path is not None:
        mesh = read_mesh(scenario.mesh_path, scenario.constants.R)
    elif scenario.raster_path is not None:
        raster = load_raster(scenario.raster_path)
        cfg = RefinementConfig(scenario.tolerance, scenario.max_iterations, scenario.max_triangles, scenario.coarse)
        mesh = generate_mesh(raster, cfg, radius=scenario.constants.R)
    else:
        raise ScenarioError("scenario needs a mesh or a raster")
    if scenario.wet_only:
        keep = [t for t, tri in mesh.triangles.items() if all(c[2] <= 0 for c in tri.vertices)]
        mesh = extract_submesh(mesh, keep)
    return mesh


def prepare(scenario: Scenario, mesh: Optional[MeshGraph] = None, timing: Optional[dict] = None) -> Prepared:
    t0 = time.perf_counter()
    loaded = mesh is None
    with _stage("mesh"):
        if loaded:
            mesh = load_scenario_mesh(scenario)
    t1 = time.perf_counter()
    with _stage("setup"):
        dofmap = build_dof_map(mesh)
        gauges = locate_gauges(dofmap, scenario.gauges)
        system = WaveSystem(dofmap, scenario.constants, scenario.lumped_mass)
        u0, v0 = apply_initial_condition(dofmap, scenario)
        a0 = initial_acceleration(u0, v0, system, tol=scenario.tol)
        masks = {r.name: region_mask(dofmap, r.polygon) for r in scenario.regions}
    t2 = time.perf_counter()
    if timing is not None:
        if loaded:
            timing["mesh_loading"] = timing.get("mesh_loading", 0.0) + t1 - t0
        timing["setup"] = timing.get("setup", 0.0) + t2 - t1
    return Prepared(mesh, dofmap, system, SimulationState(u0, v0, a0), gauges, masks)


def run_scenario(scenario: Scenario, out_dir=None, prepared: Optional[Prepared] = None,
                 n_steps: Optional[int] = None) -> ScenarioResult:
    """Mesh, assemble, integrate, and write gauges / snapshots / summary."""
    timing = dict.fromkeys(TIMING_CATEGORIES, 0.0)
    if prepared is None:
        prepared = prepare(scenario, timing=timing)
    n_steps = scenario.n_steps if n_steps is None else n_steps
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    dm, system = prepared.dofmap, prepared.system
    w = system.nodal_weights
    series: dict[str, GaugeSeries] = {}
    region_series: dict[str, list] = {name: [] for name in prepared.region_masks}
    volume: list[tuple[float, float]] = []
    vtu_paths: list[Path] = []

    def observe(state):
        record_gauges(state, prepared.gauges, series)
        for name, mask in prepared.region_masks.items():
            region_series[name].append((state.t, float(w[mask] @ state.u[mask] / w[mask].sum())))
        volume.append((state.t, system.total(state.u)))

    def snapshot(state):
        p = out / f"snapshot_{state.step}.vtu"
        write_vtu(dm, state.u, p, scenario.z_scale)
        vtu_paths.append(p)

    hooks = [Hook(observe, 1)]
    if out is not None and scenario.output_every > 0:
        hooks.append(Hook(snapshot, scenario.output_every))

    params = derive_params(scenario.rho, scenario.convention)
    records: list[StepRecord] = []
    with _stage("transient"):
        state = run_transient(prepared.state0, system, params, scenario.tau, n_steps, hooks,
                              tol=scenario.tol, picard=scenario.picard, records=records)
    for r in records:
        for k, v in r.timings.items():
            timing[k] += v

    region_means = {name: s[-1][1] for name, s in region_series.items()}
    wet = dm.hb < prepared.state0.u
    depth = float(np.mean((prepared.state0.u - dm.hb)[wet])) if wet.any() else 0.0
    result = ScenarioResult(state, prepared, series, region_means, region_series, volume, timing, records,
                            vtu_paths, celerity=math.sqrt(scenario.constants.g * depth))
    if scenario.front is not None:
        a, b, thr = scenario.front
        ga = next(g for g in scenario.gauges if g.name == a)
        gb = next(g for g in scenario.gauges if g.name == b)
        dist = great_circle_distance(ga.lon, ga.lat, gb.lon, gb.lat, scenario.constants.R)
        try:
            result.front_speed = estimate_front_speed(series[a], series[b], thr, dist)
        except FrontNotArrivedError:
            result.front_speed = None

    if out is not None:
        t0 = time.perf_counter()
        with _stage("output"):
            for s in series.values():
                s.write_csv(out / f"gauge_{s.name}.csv")
            (out / "summary.txt").write_text(format_summary(result))
        timing["file_output"] += time.perf_counter() - t0
    return result


def format_summary(result: ScenarioResult) -> str:
    s = result.state
    v0, v1 = result.volume[0][1], result.volume[-1][1]
    lines = [
        f"dofs {result.prepared.dofmap.n_dofs}",
        f"triangles {len(result.prepared.dofmap.tri)}",
        f"steps {s.step}",
        f"simulated_seconds {s.t!r}",
        f"volume_initial {v0!r}",
        f"volume_final {v1!r}",
        f"volume_relative_drift {abs(v1 - v0) / max(abs(v0), 1e-300)!r}",
        f"celerity_m_per_s {result.celerity!r}",
    ]
    if result.front_speed is not None:
        lines.append(f"front_speed_m_per_s {result.front_speed!r}")
        lines.append(f"front_speed_km_per_h {result.front_speed * 3.6!r}")
    for name, m in result.region_means.items():
        lines.append(f"region_mean {name} {m!r}")
    for name, g in result.gauges.items():
        lines.append(f"gauge_final {name} {g.samples[-1][1]!r}")
    for k in TIMING_CATEGORIES:
        lines.append(f"time_{k} {result.timing.get(k, 0.0):.6f}")
    return "\n".join(lines) + "\n"
