"""P1 finite elements for the long-wave equation in lon-lat coordinates.

Each element is mapped to its local tangent plane, ``x = R cos(phi_c) lam``
and ``y = R phi`` (radians, ``phi_c`` the centroid latitude).  With that
metric the stiffness form ``g (u - h_b) grad u . grad v`` picks up the
``1 / cos^2`` factor on the longitude derivative, and areas carry ``R^2 cos``.

M, C and B(u) share one sparsity pattern, so the effective matrix of a time
step is a linear combination of their value arrays.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp

from . import kernels
from .cpgraph import MeshGraph, EARTH_RADIUS

KEY_SCALE = 1e9  # vertex keys quantised at 1e-9 degrees

_MASS_LOCAL = np.array([2, 1, 1, 1, 2, 1, 1, 1, 2], dtype=float) / 12.0
_LUMPED_LOCAL = np.array([1, 0, 0, 0, 1, 0, 0, 0, 1], dtype=float) / 3.0


class ConvergenceError(RuntimeError):
    def __init__(self, msg, residual):
        super().__init__(f"{msg} (relative residual {residual:.3e})")
        self.residual = residual


@dataclass(frozen=True)
class PhysicsConstants:
    g: float = 9.81
    R: float = EARTH_RADIUS
    c0: float = 5e-4
    h0: float = -5.0
    eps_dry: float = 0.01

    def __post_init__(self):
        if not (self.g > 0 and self.R > 0 and self.h0 < 0):
            raise ValueError("need g > 0, R > 0 and h0 < 0")


def damping_coefficient(h_b, constants: PhysicsConstants = PhysicsConstants()):
    """c = c0 * h0 / min(h0, h_b); saturates at c0 in shallow water and on land."""
    return constants.c0 * constants.h0 / np.minimum(constants.h0, h_b)


# -- degrees of freedom -----------------------------------------------------

@dataclass
class DofMap:
    lonlat: np.ndarray        # (n, 2) degrees
    hb: np.ndarray            # (n,) seabed / terrain elevation, metres
    tri: np.ndarray           # (m, 3) dof indices, CCW
    tri_ids: np.ndarray       # (m,) MeshGraph triangle ids, ascending
    keys: np.ndarray          # (n, 2) int64 quantised coordinates, sorted
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def n_dofs(self) -> int:
        return len(self.hb)

    def index(self, lon: float, lat: float) -> int:
        lookup = self._cache.get("index")
        if lookup is None:
            lookup = self._cache["index"] = {tuple(k): i for i, k in enumerate(self.keys.tolist())}
        try:
            return lookup[(round(lon * KEY_SCALE), round(lat * KEY_SCALE))]
        except KeyError:
            raise KeyError(f"no dof at ({lon}, {lat})") from None


def build_dof_map(mesh: MeshGraph) -> DofMap:
    tids = sorted(mesh.triangles)
    registry: dict[tuple[int, int], float] = {}
    tri_keys = []
    for t in tids:
        ks = []
        for c in mesh.triangles[t].vertices:
            k = (round(c[0] * KEY_SCALE), round(c[1] * KEY_SCALE))
            z = registry.setdefault(k, c[2])
            if z != c[2]:
                raise ValueError(f"vertex {c[:2]} carries two elevations ({z} and {c[2]})")
            ks.append(k)
        tri_keys.append(ks)
    keys = sorted(registry)
    index = {k: i for i, k in enumerate(keys)}
    tri = np.array([[index[k] for k in ks] for ks in tri_keys], dtype=np.int64).reshape(-1, 3)
    for row, ks in zip(tri, tri_keys):
        if len(set(row.tolist())) != 3:
            raise ValueError(f"triangle with vertices {ks} collapses under quantisation")
    karr = np.array(keys, dtype=np.int64).reshape(-1, 2)
    return DofMap(
        lonlat=karr / KEY_SCALE,
        hb=np.array([registry[k] for k in keys], dtype=float),
        tri=tri,
        tri_ids=np.array(tids, dtype=np.int64),
        keys=karr,
    )


# -- sparse storage ---------------------------------------------------------

class SparseSym:
    """CSR matrix with symmetric pattern; mat-vec goes through the kernels."""

    def __init__(self, indptr, indices, data, n: Optional[int] = None):
        self.indptr = np.ascontiguousarray(indptr, dtype=np.int64)
        self.indices = np.ascontiguousarray(indices, dtype=np.int64)
        self.data = np.ascontiguousarray(data, dtype=float)
        self.n = len(self.indptr) - 1 if n is None else n

    @classmethod
    def from_scipy(cls, A) -> "SparseSym":
        A = sp.csr_matrix(A)
        A.sort_indices()
        return cls(A.indptr, A.indices, A.data, A.shape[0])

    @classmethod
    def from_dense(cls, A) -> "SparseSym":
        return cls.from_scipy(sp.csr_matrix(np.atleast_2d(np.asarray(A, dtype=float))))

    def with_data(self, data) -> "SparseSym":
        return SparseSym(self.indptr, self.indices, data, self.n)

    def same_pattern(self, other: "SparseSym") -> bool:
        return (self.indptr is other.indptr and self.indices is other.indices) or (
            np.array_equal(self.indptr, other.indptr) and np.array_equal(self.indices, other.indices)
        )

    def matvec(self, x, out=None):
        x = np.ascontiguousarray(x, dtype=float)
        if out is None:
            out = np.empty(self.n)
        kernels.csr_matvec(self.indptr, self.indices, self.data, x, out, kernels.get_num_threads())
        return out

    __matmul__ = matvec

    def diagonal(self) -> np.ndarray:
        return self.to_scipy().diagonal()

    def to_scipy(self) -> sp.csr_matrix:
        return sp.csr_matrix((self.data, self.indices, self.indptr), shape=(self.n, self.n))

    def toarray(self) -> np.ndarray:
        return self.to_scipy().toarray()

    def dump_triplets(self, path) -> None:
        coo = self.to_scipy().tocoo()
        with open(path, "w") as fh:
            for i, j, v in zip(coo.row, coo.col, coo.data):
                fh.write(f"{int(i)} {int(j)} {float(v)!r}\n")


def combine(terms) -> SparseSym:
    """Sum of ``(coef, SparseSym)`` pairs; cheap when the patterns agree."""
    terms = [(float(a), A) for a, A in terms]
    base = terms[0][1]
    if all(A.same_pattern(base) for _, A in terms[1:]):
        data = np.zeros_like(base.data)
        for a, A in terms:
            if a != 0.0:
                data += a * A.data
        return base.with_data(data)
    total = sum(a * A.to_scipy() for a, A in terms)
    return SparseSym.from_scipy(total)


# -- assembly ---------------------------------------------------------------

@dataclass
class Pattern:
    indptr: np.ndarray
    indices: np.ndarray
    contrib_ptr: np.ndarray   # (nnz + 1,) offsets into contrib_src
    contrib_src: np.ndarray   # flat element-entry index 9*e + 3*i + j, ascending per slot

    @property
    def nnz(self) -> int:
        return len(self.indices)


def build_pattern(tri: np.ndarray, n: int) -> Pattern:
    rows = np.repeat(tri, 3, axis=1).ravel()
    cols = np.tile(tri, (1, 3)).ravel()
    key = rows * n + cols
    uniq, slot = np.unique(key, return_inverse=True)
    order = np.argsort(slot, kind="stable")
    counts = np.bincount(slot, minlength=len(uniq))
    contrib_ptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    indptr = np.concatenate([[0], np.cumsum(np.bincount(uniq // n, minlength=n))]).astype(np.int64)
    return Pattern(indptr, (uniq % n).astype(np.int64), contrib_ptr, order.astype(np.int64))


@dataclass
class ElementGeometry:
    area: np.ndarray        # (m,) m^2 in the local tangent metric
    grads: np.ndarray       # (m, 3, 2) basis gradients, 1/m
    mass0: np.ndarray       # (9m,) unit-coefficient consistent mass entries
    lumped0: np.ndarray     # (9m,) row-sum lumped mass entries
    stiff0: np.ndarray      # (9m,) unit-coefficient stiffness entries
    centroid_lat: np.ndarray


def element_geometry(dofmap: DofMap, radius: float) -> ElementGeometry:
    ll = np.radians(dofmap.lonlat)[dofmap.tri]          # (m, 3, 2)
    phi_c = ll[:, :, 1].mean(axis=1)
    xy = np.empty_like(ll)
    xy[:, :, 0] = radius * np.cos(phi_c)[:, None] * ll[:, :, 0]
    xy[:, :, 1] = radius * ll[:, :, 1]
    x, y = xy[:, :, 0], xy[:, :, 1]
    det = (x[:, 1] - x[:, 0]) * (y[:, 2] - y[:, 0]) - (x[:, 2] - x[:, 0]) * (y[:, 1] - y[:, 0])
    bad = np.flatnonzero(np.abs(det) <= 0.0)
    if bad.size:
        raise ValueError(f"zero-area element {int(dofmap.tri_ids[bad[0]])}")
    area = 0.5 * np.abs(det)
    grads = np.empty((len(det), 3, 2))
    for i in range(3):
        j, k = (i + 1) % 3, (i + 2) % 3
        grads[:, i, 0] = (y[:, j] - y[:, k]) / det
        grads[:, i, 1] = (x[:, k] - x[:, j]) / det
    stiff = np.einsum("eid,ejd->eij", grads, grads) * area[:, None, None]
    return ElementGeometry(
        area=area,
        grads=grads,
        mass0=(area[:, None] * _MASS_LOCAL).ravel(),
        lumped0=(area[:, None] * _LUMPED_LOCAL).ravel(),
        stiff0=stiff.reshape(-1),
        centroid_lat=np.degrees(phi_c),
    )


class Assembler:
    """Caches pattern and element geometry of one DofMap."""

    def __init__(self, dofmap: DofMap, constants: PhysicsConstants = PhysicsConstants()):
        self.dofmap = dofmap
        self.constants = constants
        self.pattern = build_pattern(dofmap.tri, dofmap.n_dofs)
        self.geometry = element_geometry(dofmap, constants.R)
        self.hb_mean = dofmap.hb[dofmap.tri].mean(axis=1)
        self._coef = np.empty(len(dofmap.tri))

    @classmethod
    def of(cls, dofmap: DofMap, constants: PhysicsConstants = PhysicsConstants()) -> "Assembler":
        key = ("assembler", constants)
        if key not in dofmap._cache:
            dofmap._cache[key] = cls(dofmap, constants)
        return dofmap._cache[key]

    def _gather(self, elem_vals, coef, out=None) -> SparseSym:
        p = self.pattern
        if out is None:
            out = np.empty(p.nnz)
        kernels.gather_assemble(p.contrib_ptr, p.contrib_src, elem_vals, np.ascontiguousarray(coef, dtype=float),
                                out, kernels.get_num_threads())
        return SparseSym(p.indptr, p.indices, out, self.dofmap.n_dofs)

    def mass(self, lumped: bool = False) -> SparseSym:
        g = self.geometry
        return self._gather(g.lumped0 if lumped else g.mass0, np.ones(len(g.area)))

    def damping(self, lumped: bool = False) -> SparseSym:
        g = self.geometry
        coef = damping_coefficient(self.hb_mean, self.constants)
        return self._gather(g.lumped0 if lumped else g.mass0, coef)

    def stiffness_coefficients(self, u) -> np.ndarray:
        c = self.constants
        kernels.depth_coefficients(self.dofmap.tri, np.ascontiguousarray(u, dtype=float), self.hb_mean,
                                   c.g, c.eps_dry, self._coef, kernels.get_num_threads())
        return self._coef

    def stiffness(self, u, out=None) -> SparseSym:
        u = np.asarray(u, dtype=float)
        if u.shape != (self.dofmap.n_dofs,):
            raise ValueError(f"state has shape {u.shape}, expected ({self.dofmap.n_dofs},)")
        return self._gather(self.geometry.stiff0, self.stiffness_coefficients(u), out)


def assemble_mass(dofmap: DofMap, constants: PhysicsConstants = PhysicsConstants(), lumped: bool = False) -> SparseSym:
    return Assembler.of(dofmap, constants).mass(lumped)


def assemble_damping(dofmap: DofMap, constants: PhysicsConstants = PhysicsConstants(), lumped: bool = False) -> SparseSym:
    return Assembler.of(dofmap, constants).damping(lumped)


def assemble_stiffness(dofmap: DofMap, u, constants: PhysicsConstants = PhysicsConstants()) -> SparseSym:
    return Assembler.of(dofmap, constants).stiffness(u)


# -- linear solver ----------------------------------------------------------

def solve_spd(A: SparseSym, rhs, tol: float = 1e-10, max_iter: Optional[int] = None, x0=None,
              stats: Optional[dict] = None) -> np.ndarray:
    """Jacobi-preconditioned conjugate gradients.

    Stops when ``|A x - rhs| / |rhs| <= tol``; raises :class:`ConvergenceError`
    otherwise.
    """
    b = np.ascontiguousarray(rhs, dtype=float)
    n = A.n
    if b.shape != (n,):
        raise ValueError(f"rhs has shape {b.shape}, expected ({n},)")
    if max_iter is None:
        max_iter = max(10 * n, 100)
    nt = kernels.get_num_threads()
    dot = kernels.dot
    bnorm = math.sqrt(dot(b, b, nt))
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    if bnorm == 0.0:
        if stats is not None:
            stats["iterations"] = 0
        return np.zeros(n)
    diag = A.diagonal()
    if np.any(diag <= 0):
        raise ValueError("matrix has a non-positive diagonal entry; not SPD")
    inv_d = 1.0 / diag
    r = b - A.matvec(x)
    z = inv_d * r
    p = z.copy()
    rz = dot(r, z, nt)
    Ap = np.empty(n)
    res = math.sqrt(dot(r, r, nt)) / bnorm
    it = 0
    while res > tol:
        if it >= max_iter:
            raise ConvergenceError(f"CG did not converge in {max_iter} iterations", res)
        A.matvec(p, Ap)
        pAp = dot(p, Ap, nt)
        if pAp <= 0.0:
            raise ConvergenceError("matrix is not positive definite", res)
        alpha = rz / pAp
        x += alpha * p
        r -= alpha * Ap
        res = math.sqrt(dot(r, r, nt)) / bnorm
        it += 1
        np.multiply(inv_d, r, out=z)
        rz_new = dot(r, z, nt)
        p *= rz_new / rz
        p += z
        rz = rz_new
    if stats is not None:
        stats["iterations"] = it
        stats["residual"] = res
    return x


class WaveSystem:
    """M and C assembled once, B(u) on demand; the object the integrator drives."""

    def __init__(self, dofmap: DofMap, constants: PhysicsConstants = PhysicsConstants(), lumped: bool = False):
        self.dofmap = dofmap
        self.constants = constants
        self.assembler = Assembler.of(dofmap, constants)
        self.mass = self.assembler.mass(lumped)
        self.damping = self.assembler.damping(lumped) if constants.c0 != 0.0 else None
        self.nodal_weights = np.bincount(dofmap.tri.ravel(), weights=np.repeat(self.assembler.geometry.area / 3.0, 3),
                                         minlength=dofmap.n_dofs)

    def stiffness(self, u) -> SparseSym:
        return self.assembler.stiffness(u)

    def total(self, u) -> float:
        """M-weighted sum of a nodal field (its integral over the domain)."""
        return float(self.nodal_weights @ u)
