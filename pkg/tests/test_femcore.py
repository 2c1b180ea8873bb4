import math

import numpy as np
import pytest
import scipy.sparse as sp

from damwave import kernels
from damwave.cpgraph import EARTH_RADIUS, MeshGraph, rivara_refine, structured_mesh
from damwave.femcore import (
    Assembler, ConvergenceError, PhysicsConstants, SparseSym, WaveSystem, assemble_damping, assemble_mass,
    assemble_stiffness, build_dof_map, combine, damping_coefficient, solve_spd,
)
from damwave.terrain import RefinementConfig, TerrainRaster, generate_mesh

from meshes import square_mesh

R = EARTH_RADIUS


def bathymetry_mesh(nx=12, ny=8, lat0=50.0):
    return structured_mesh(0.0, 1.2, lat0, lat0 + 0.8, nx, ny,
                           elevation=lambda lon, lat: -20.0 - 30.0 * lon + 10.0 * math.sin(5 * lat))


class TestDofMap:
    def test_square(self):
        dm = build_dof_map(square_mesh())
        assert dm.n_dofs == 4 and dm.tri.shape == (2, 3)

    def test_refined_square_shares_midpoint(self):
        mesh = square_mesh()
        rivara_refine(mesh, [0])
        dm = build_dof_map(mesh)
        assert dm.n_dofs == 5
        assert dm.index(0.5, 0.5) == dm.index(0.5 + 1e-11, 0.5)

    def test_elevations_and_order(self):
        mesh = structured_mesh(0, 2, 0, 1, 2, 1, elevation=lambda lon, lat: 10 * lon + lat)
        dm = build_dof_map(mesh)
        assert np.all(np.diff(dm.keys[:, 0]) >= 0)
        assert np.allclose(dm.hb, 10 * dm.lonlat[:, 0] + dm.lonlat[:, 1])

    def test_euler_on_generated_mesh(self):
        lon = (np.arange(40) + 0.5) * 0.05
        lat = (np.arange(20)[::-1] + 0.5) * 0.05
        LON, LAT = np.meshgrid(lon, lat)
        raster = TerrainRaster(40, 20, 0.0, 0.0, 0.05, -9999.0, -100 + 80 * np.exp(-((LON - 1) ** 2 + (LAT - 0.5) ** 2) / 0.05))
        mesh = generate_mesh(raster, RefinementConfig(2.0))
        dm = build_dof_map(mesh)
        assert dm.n_dofs == len(mesh.triangles) / 2 + mesh.boundary_edge_count() / 2 + 1

    def test_conflicting_elevations(self):
        a, b, c, d = (0, 0, 0.0), (1, 0, 0.0), (1, 1, 0.0), (0, 1, 0.0)
        mesh = MeshGraph.from_triangles([(a, b, c), ((0, 0, 5.0), c, d)])
        with pytest.raises(ValueError, match="two elevations"):
            build_dof_map(mesh)


class TestDamping:
    def test_coefficient_examples(self):
        assert damping_coefficient(-5000.0) == 5e-7
        assert damping_coefficient(-5.0) == 5e-4
        assert damping_coefficient(-2.0) == 5e-4

    def test_vectorized_and_land(self):
        c = damping_coefficient(np.array([-50.0, 3.0]))
        assert c.tolist() == [5e-5, 5e-4]

    def test_deep(self):
        dm = build_dof_map(structured_mesh(0, 1, 0, 1, 4, 4, elevation=lambda lo, la: -5000.0))
        M, C = assemble_mass(dm), assemble_damping(dm)
        assert sp.linalg.norm(C.to_scipy()) <= 1e-3 * sp.linalg.norm(M.to_scipy()) * 5e-4

    def test_shallow_is_scaled_mass(self):
        dm = build_dof_map(structured_mesh(0, 1, 0, 1, 4, 4, elevation=lambda lo, la: -5.0))
        M, C = assemble_mass(dm), assemble_damping(dm)
        # equal up to the rounding of c0 * (sum of element entries)
        assert np.allclose(C.data, 5e-4 * M.data, rtol=1e-14, atol=0)

    def test_mixed_rows(self):
        # c is never exactly zero, so "nonzero" means significant: an element
        # counts as shallow when its coefficient is at least 1% of c0
        mesh = structured_mesh(0, 2, 0, 1, 8, 4, elevation=lambda lo, la: -2.0 if lo < 0.9 else -5000.0)
        dm = build_dof_map(mesh)
        M, C = assemble_mass(dm).toarray(), assemble_damping(dm).toarray()
        coef = damping_coefficient(dm.hb[dm.tri].mean(axis=1))
        shallow = coef >= 1e-2 * 5e-4
        touching = np.zeros(dm.n_dofs, dtype=bool)
        touching[dm.tri[shallow].ravel()] = True
        assert 0 < touching.sum() < dm.n_dofs
        ratio = np.divide(C, M, out=np.zeros_like(C), where=M != 0)
        assert np.all(ratio[~touching] < 1e-2 * 5e-4)
        assert np.all(ratio[touching].max(axis=1) >= 0.3 * 5e-4)


class TestMass:
    def test_single_triangle(self):
        mesh = MeshGraph.from_triangles([((0, 0, 0.0), (0.01, 0, 0.0), (0, 0.01, 0.0))])
        dm = build_dof_map(mesh)
        M = assemble_mass(dm).toarray()
        lat_c = math.radians(0.01 / 3)
        area = 0.5 * (math.radians(0.01) * R) ** 2 * math.cos(lat_c)
        assert np.allclose(M, area / 12 * np.array([[2, 1, 1], [1, 2, 1], [1, 1, 2]]), rtol=1e-13)

    def test_total_is_spherical_area(self):
        lat0, lat1 = 40.0, 41.0
        dm = build_dof_map(structured_mesh(10, 11, lat0, lat1, 20, 20))
        M = assemble_mass(dm)
        exact = R ** 2 * math.radians(1.0) * (math.sin(math.radians(lat1)) - math.sin(math.radians(lat0)))
        assert M.data.sum() == pytest.approx(exact, rel=1e-5)

    def test_spd(self):
        dm = build_dof_map(bathymetry_mesh(9, 9))
        assert dm.n_dofs == 100
        M = assemble_mass(dm).toarray()
        assert np.allclose(M, M.T)
        assert np.linalg.eigvalsh(M).min() > 0

    def test_lumped_diagonal(self):
        dm = build_dof_map(bathymetry_mesh())
        ML = assemble_mass(dm, lumped=True).toarray()
        M = assemble_mass(dm).toarray()
        assert np.allclose(np.diag(ML), M.sum(axis=1), rtol=1e-13)
        assert np.count_nonzero(ML - np.diag(np.diag(ML))) == 0
        assert np.allclose(WaveSystem(build_dof_map(bathymetry_mesh())).nodal_weights, M.sum(axis=1), rtol=1e-13)

    def test_zero_area_element(self):
        mesh = MeshGraph.from_triangles([((0, 0, 0.0), (1, 0, 0.0), (0, 1, 0.0))])
        mesh.triangles[0].c3 = (0.5, 1e-13, 0.0)
        mesh.triangles[0].c2 = (1.0, 2e-13, 0.0)
        with pytest.raises(ValueError):
            assemble_mass(build_dof_map(mesh))


def p1_laplacian(points, tri):
    """Textbook planar P1 stiffness with unit coefficient."""
    n = len(points)
    K = np.zeros((n, n))
    for t in tri:
        P = points[t]
        G = np.linalg.inv(np.column_stack([np.ones(3), P]))[1:]  # 2x3 gradients
        area = 0.5 * abs(np.linalg.det(np.column_stack([np.ones(3), P])))
        K[np.ix_(t, t)] += area * G.T @ G
    return K


class TestStiffness:
    def test_constants_in_null_space(self):
        dm = build_dof_map(bathymetry_mesh())
        rng = np.random.default_rng(0)
        B = assemble_stiffness(dm, rng.uniform(0, 2, dm.n_dofs))
        assert np.max(np.abs(B @ np.ones(dm.n_dofs))) <= 1e-9

    def test_equatorial_laplacian(self):
        H = 100.0
        mesh = structured_mesh(0, 0.5, -0.01, 0.01, 25, 2, elevation=lambda lo, la: -H)
        dm = build_dof_map(mesh)
        B = assemble_stiffness(dm, np.zeros(dm.n_dofs)).toarray()
        pts = np.radians(dm.lonlat) * R
        K = 9.81 * H * p1_laplacian(pts, dm.tri)
        assert np.max(np.abs(B - K)) <= 1e-6 * np.max(np.abs(K))

    def test_linear_in_depth(self):
        dm = build_dof_map(bathymetry_mesh())
        u = np.zeros(dm.n_dofs)
        B1 = assemble_stiffness(dm, u).data
        dm2 = build_dof_map(bathymetry_mesh())
        dm2.hb *= 2.0
        B2 = assemble_stiffness(dm2, u).data
        assert np.allclose(B2, 2 * B1, rtol=1e-14, atol=0)

    def test_psd(self):
        dm = build_dof_map(bathymetry_mesh())
        u = dm.hb + 0.01 + np.random.default_rng(2).uniform(0, 3, dm.n_dofs)
        B = assemble_stiffness(dm, u).toarray()
        assert np.allclose(B, B.T, rtol=0, atol=1e-9 * np.abs(B).max())
        ev = np.linalg.eigvalsh(B)
        assert ev.min() >= -1e-10 * ev.max()
        assert np.sum(ev < 1e-9 * ev.max()) == 1

    def test_dry_clamp(self):
        dm = build_dof_map(structured_mesh(0, 1, 0, 1, 2, 2, elevation=lambda lo, la: 50.0))
        asm = Assembler(dm)
        coef = asm.stiffness_coefficients(np.zeros(dm.n_dofs))
        assert np.all(coef == 9.81 * 0.01)

    def test_dimension_mismatch(self):
        dm = build_dof_map(square_mesh())
        with pytest.raises(ValueError):
            assemble_stiffness(dm, np.zeros(3))

    def test_shared_pattern(self):
        dm = build_dof_map(bathymetry_mesh())
        M, C, B = assemble_mass(dm), assemble_damping(dm), assemble_stiffness(dm, np.zeros(dm.n_dofs))
        assert M.same_pattern(C) and M.same_pattern(B)
        A = combine([(2.0, M), (3.0, C), (0.5, B)]).toarray()
        assert np.allclose(A, 2 * M.toarray() + 3 * C.toarray() + 0.5 * B.toarray(), rtol=1e-14)

    def test_matches_scipy_reference(self):
        dm = build_dof_map(bathymetry_mesh())
        u = np.random.default_rng(3).uniform(0, 1, dm.n_dofs)
        B = assemble_stiffness(dm, u)
        asm = Assembler.of(dm)
        vals = asm.geometry.stiff0.reshape(-1, 3, 3) * asm.stiffness_coefficients(u)[:, None, None]
        rows = np.repeat(dm.tri, 3, axis=1).ravel()
        cols = np.tile(dm.tri, (1, 3)).ravel()
        ref = sp.coo_matrix((vals.ravel(), (rows, cols)), shape=(dm.n_dofs,) * 2).toarray()
        assert np.allclose(B.toarray(), ref, rtol=1e-13, atol=1e-13 * np.abs(ref).max())


@pytest.mark.parametrize("backend", kernels.available_backends())
def test_assembly_bitwise_independent_of_threads(backend):
    saved = kernels.BACKEND
    kernels.use_backend(backend)
    try:
        dm = build_dof_map(bathymetry_mesh(40, 30))
        u = np.random.default_rng(4).uniform(0, 1, dm.n_dofs)
        out = []
        for p in (1, 2, 4):
            kernels.set_num_threads(p)
            B = assemble_stiffness(dm, u)
            x = solve_spd(assemble_mass(dm), u)
            out.append((B.data.copy(), x))
        for B, x in out[1:]:
            assert np.array_equal(B, out[0][0])
            assert np.array_equal(x, out[0][1])
    finally:
        kernels.set_num_threads(1)
        kernels.use_backend(saved)


class TestSolver:
    def test_identity(self):
        b = np.arange(1.0, 6.0)
        assert np.array_equal(solve_spd(SparseSym.from_scipy(sp.eye(5)), b), b)

    def test_two_by_two(self):
        x = solve_spd(SparseSym.from_dense([[4, 1], [1, 3]]), np.array([1.0, 2.0]))
        assert np.allclose(x, [1 / 11, 7 / 11], rtol=1e-10)

    def test_random_spd(self):
        rng = np.random.default_rng(5)
        Q = rng.standard_normal((200, 200))
        A = Q @ Q.T + 200 * np.eye(200)
        b = rng.standard_normal(200)
        x = solve_spd(SparseSym.from_dense(A), b)
        assert np.allclose(x, np.linalg.solve(A, b), rtol=0, atol=1e-8 * np.abs(x).max())

    def test_residual_tolerance(self):
        dm = build_dof_map(bathymetry_mesh())
        A = combine([(1.0, assemble_mass(dm)), (1e4, assemble_stiffness(dm, np.zeros(dm.n_dofs)))])
        b = np.random.default_rng(6).standard_normal(dm.n_dofs)
        stats = {}
        x = solve_spd(A, b, tol=1e-10, stats=stats)
        assert np.linalg.norm(A @ x - b) / np.linalg.norm(b) <= 1e-10
        assert stats["iterations"] > 0

    def test_zero_rhs(self):
        assert not solve_spd(SparseSym.from_dense([[2.0]]), np.zeros(1)).any()

    def test_non_convergence_carries_residual(self):
        rng = np.random.default_rng(7)
        Q = rng.standard_normal((50, 50))
        A = SparseSym.from_dense(Q @ Q.T + 1e-3 * np.eye(50))
        with pytest.raises(ConvergenceError) as info:
            solve_spd(A, rng.standard_normal(50), max_iter=3)
        assert info.value.residual > 1e-10

    def test_indefinite_diagonal(self):
        with pytest.raises(ValueError):
            solve_spd(SparseSym.from_dense([[1, 0], [0, -1]]), np.ones(2))


def test_triplet_dump(tmp_path):
    A = SparseSym.from_dense([[4, 1], [1, 3]])
    A.dump_triplets(tmp_path / "a.txt")
    rows = [line.split() for line in (tmp_path / "a.txt").read_text().splitlines()]
    assert rows == [["0", "0", "4.0"], ["0", "1", "1.0"], ["1", "0", "1.0"], ["1", "1", "3.0"]]


def test_constants_validation():
    with pytest.raises(ValueError):
        PhysicsConstants(h0=1.0)
