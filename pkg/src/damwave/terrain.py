"""Raster elevation input and terrain-driven mesh generation."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .cpgraph import MeshGraph, TriangleNode, rivara_refine, signed_area, structured_mesh, EARTH_RADIUS

_KEYWORDS = ("ncols", "nrows", "xllcorner", "yllcorner", "cellsize", "nodata_value")


class RasterFormatError(ValueError):
    def __init__(self, msg: str, line: Optional[int] = None):
        self.line = line
        super().__init__(f"line {line}: {msg}" if line is not None else msg)


class OutOfDomainError(ValueError):
    pass


@dataclass
class TerrainRaster:
    """Regular lon-lat elevation grid; ``values[0]`` is the northernmost row."""

    ncols: int
    nrows: int
    xllcorner: float
    yllcorner: float
    cellsize: float
    nodata: float
    values: np.ndarray
    nodata_hits: int = field(default=0, compare=False)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float).reshape(self.nrows, self.ncols)
        if self.ncols < 1 or self.nrows < 1:
            raise ValueError("raster must have at least one row and column")
        if not self.cellsize > 0:
            raise ValueError("cellsize must be positive")
        lon0, lon1, lat0, lat1 = self.bounds
        if lon0 < -180 or lon1 > 180 or lat0 < -90 or lat1 > 90:
            raise ValueError(f"raster box {self.bounds} leaves [-180,180]x[-90,90]")
        self._mask = self.values == self.nodata
        self._filled = np.where(self._mask, 0.0, self.values)

    @property
    def bounds(self) -> tuple[float, float, float, float]:
        return (
            self.xllcorner,
            self.xllcorner + self.ncols * self.cellsize,
            self.yllcorner,
            self.yllcorner + self.nrows * self.cellsize,
        )

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Center longitudes (west to east) and latitudes (south to north)."""
        lon = self.xllcorner + (np.arange(self.ncols) + 0.5) * self.cellsize
        lat = self.yllcorner + (np.arange(self.nrows) + 0.5) * self.cellsize
        return lon, lat

    def south_up(self) -> np.ndarray:
        """Elevations with nodata replaced by 0, row 0 = southernmost."""
        return self._filled[::-1]

    def contains(self, lon, lat) -> np.ndarray:
        lon0, lon1, lat0, lat1 = self.bounds
        return (lon >= lon0) & (lon <= lon1) & (lat >= lat0) & (lat <= lat1)

    def sample(self, lon, lat):
        """Vectorised bilinear interpolation between cell centers.

        Points in the outer half-cell band are clamped to the nearest
        center row/column.  Nodata cells read as 0 and bump ``nodata_hits``.
        """
        lon = np.asarray(lon, dtype=float)
        lat = np.asarray(lat, dtype=float)
        if not np.all(self.contains(lon, lat)):
            raise OutOfDomainError(f"point outside raster box {self.bounds}")
        fx = np.clip((lon - self.xllcorner) / self.cellsize - 0.5, 0.0, self.ncols - 1)
        fy = np.clip((lat - self.yllcorner) / self.cellsize - 0.5, 0.0, self.nrows - 1)
        i0 = np.minimum(np.floor(fx).astype(np.intp), max(self.ncols - 2, 0))
        j0 = np.minimum(np.floor(fy).astype(np.intp), max(self.nrows - 2, 0))
        i1 = np.minimum(i0 + 1, self.ncols - 1)
        j1 = np.minimum(j0 + 1, self.nrows - 1)
        tx = fx - i0
        ty = fy - j0
        z = self.south_up()
        mask = self._mask[::-1]
        hits = mask[j0, i0] | mask[j0, i1] | mask[j1, i0] | mask[j1, i1]
        self.nodata_hits += int(np.count_nonzero(hits))
        out = (
            (1 - tx) * (1 - ty) * z[j0, i0]
            + tx * (1 - ty) * z[j0, i1]
            + (1 - tx) * ty * z[j1, i0]
            + tx * ty * z[j1, i1]
        )
        return out if out.ndim else float(out)


def sample_elevation(raster: TerrainRaster, lon: float, lat: float) -> float:
    return raster.sample(lon, lat)


def load_raster(path) -> TerrainRaster:
    """Parse an ESRI ASCII grid (``.asc``)."""
    header: dict[str, float] = {}
    values: list[float] = []
    with open(path) as fh:
        lineno = 0
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            key = parts[0].lower()
            if len(header) < len(_KEYWORDS) and key[0].isalpha():
                if key not in _KEYWORDS:
                    raise RasterFormatError(f"unknown header keyword {parts[0]!r}", lineno)
                if len(parts) != 2:
                    raise RasterFormatError(f"header keyword {parts[0]!r} needs one value", lineno)
                try:
                    header[key] = float(parts[1])
                except ValueError:
                    raise RasterFormatError(f"non-numeric value for {parts[0]!r}", lineno) from None
                continue
            missing = [k for k in _KEYWORDS if k not in header]
            if missing:
                raise RasterFormatError(f"missing header keyword {missing[0]!r}", lineno)
            for tok in parts:
                try:
                    values.append(float(tok))
                except ValueError:
                    raise RasterFormatError(f"non-numeric cell value {tok!r}", lineno) from None
    missing = [k for k in _KEYWORDS if k not in header]
    if missing:
        raise RasterFormatError(f"missing header keyword {missing[0]!r}", lineno)
    ncols, nrows = int(header["ncols"]), int(header["nrows"])
    if ncols != header["ncols"] or nrows != header["nrows"] or ncols < 1 or nrows < 1:
        raise RasterFormatError("ncols/nrows must be positive integers")
    if len(values) != ncols * nrows:
        raise RasterFormatError(f"expected {ncols * nrows} cell values, found {len(values)}", lineno)
    try:
        return TerrainRaster(
            ncols, nrows, header["xllcorner"], header["yllcorner"], header["cellsize"],
            header["nodata_value"], np.array(values),
        )
    except ValueError as exc:
        raise RasterFormatError(str(exc)) from None


def save_raster(raster: TerrainRaster, path) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(f"ncols {raster.ncols}\nnrows {raster.nrows}\n")
        fh.write(f"xllcorner {raster.xllcorner!r}\nyllcorner {raster.yllcorner!r}\n")
        fh.write(f"cellsize {raster.cellsize!r}\nNODATA_value {raster.nodata!r}\n")
        for row in raster.values.tolist():
            fh.write(" ".join(repr(v) for v in row) + "\n")


# -- refinement criterion ---------------------------------------------------

@dataclass
class RefinementConfig:
    tolerance: float
    max_iterations: int = 30
    max_triangles: int = 200_000
    coarse: tuple[int, int] = (8, 4)

    def __post_init__(self):
        if not self.tolerance > 0:
            raise ValueError("tolerance must be positive")
        if self.max_iterations < 0:
            raise ValueError("max_iterations must be >= 0")


def elevation_error(tri: TriangleNode, raster: TerrainRaster) -> float:
    """Max |planar interpolant - raster| over the triangle's sample set.

    Samples are the cell centers inside the (closed) triangle plus the three
    edge midpoints.
    """
    c1, c2, c3 = tri.vertices
    det = signed_area(c1, c2, c3) * 2.0
    if det == 0.0:
        raise ValueError(f"degenerate triangle {tri.id}")
    x = np.array([c1[0], c2[0], c3[0]])
    y = np.array([c1[1], c2[1], c3[1]])
    z = np.array([c1[2], c2[2], c3[2]])

    mx = 0.5 * (x + np.roll(x, -1))
    my = 0.5 * (y + np.roll(y, -1))
    mz = 0.5 * (z + np.roll(z, -1))
    err = float(np.max(np.abs(mz - raster.sample(mx, my))))

    cs = raster.cellsize
    i_lo = max(int(math.ceil((x.min() - raster.xllcorner) / cs - 0.5)), 0)
    i_hi = min(int(math.floor((x.max() - raster.xllcorner) / cs - 0.5)), raster.ncols - 1)
    j_lo = max(int(math.ceil((y.min() - raster.yllcorner) / cs - 0.5)), 0)
    j_hi = min(int(math.floor((y.max() - raster.yllcorner) / cs - 0.5)), raster.nrows - 1)
    if i_lo > i_hi or j_lo > j_hi:
        return err
    px = raster.xllcorner + (np.arange(i_lo, i_hi + 1) + 0.5) * cs
    py = raster.yllcorner + (np.arange(j_lo, j_hi + 1) + 0.5) * cs
    PX, PY = np.meshgrid(px, py)
    # barycentric coordinates of the centers
    l2 = ((PX - x[0]) * (y[2] - y[0]) - (x[2] - x[0]) * (PY - y[0])) / det
    l3 = ((x[1] - x[0]) * (PY - y[0]) - (PX - x[0]) * (y[1] - y[0])) / det
    l1 = 1.0 - l2 - l3
    eps = 1e-12
    inside = (l1 >= -eps) & (l2 >= -eps) & (l3 >= -eps)
    if not inside.any():
        return err
    plane = l1 * z[0] + l2 * z[1] + l3 * z[2]
    zr = raster.south_up()[j_lo:j_hi + 1, i_lo:i_hi + 1]
    return max(err, float(np.abs(plane - zr)[inside].max()))


def refinement_criterion(tri: TriangleNode, raster: TerrainRaster, tolerance: float) -> bool:
    """True when the triangle misrepresents the terrain by more than ``tolerance``."""
    return elevation_error(tri, raster) > tolerance


def coarse_mesh(raster: TerrainRaster, nx: int = 8, ny: int = 4, radius: float = EARTH_RADIUS) -> MeshGraph:
    lon0, lon1, lat0, lat1 = raster.bounds
    return structured_mesh(lon0, lon1, lat0, lat1, nx, ny, elevation=raster.sample, radius=radius)


def generate_mesh(raster: TerrainRaster, config: RefinementConfig, radius: float = EARTH_RADIUS) -> MeshGraph:
    """Refine a structured coarse mesh until it follows the terrain.

    Stops when no triangle exceeds the tolerance, after ``max_iterations``
    sweeps, or once the mesh holds ``max_triangles`` triangles.
    """
    if raster.ncols < 2 or raster.nrows < 2:
        raise ValueError("raster needs at least 2 rows and 2 columns")
    mesh = coarse_mesh(raster, *config.coarse, radius=radius)
    for _ in range(config.max_iterations):
        if len(mesh.triangles) >= config.max_triangles:
            break
        failing = [
            tid for tid in sorted(mesh.triangles)
            if refinement_criterion(mesh.triangles[tid], raster, config.tolerance)
        ]
        if not failing:
            break
        rivara_refine(mesh, failing, terrain=raster.sample)
    return mesh
