#!/usr/bin/env python3
#
# Unit tests for the geometry, spectral, functional map, deformation graph
# and energy layers.  Registration, batch and command line tests are in
# regtests.py and run from here too.
#
# Run with ``python3 -m dfr.tests``

from __future__ import annotations

import io
import logging
import math
import os
import shutil
import tempfile
import unittest
import unittest.mock

import numpy as np
import scipy.linalg
from scipy.spatial import ConvexHull
from scipy.spatial.transform import Rotation

import dfr
import dfr.ext
from dfr import knn, spectral
from dfr.config import (RegistrationConfig, THREADS_ENV, apply_overrides, config_keys, load_config, to_text,
                        worker_count)
from dfr.defgraph import (DeformGraph, GraphState, apply, axis_angle_from_matrix, build_graph, qslim_decimate,
                          rodrigues, rodrigues_derivative, skin, wrap_axis_angle)
from dfr.energies import EnergyWeights, e_arap, e_cd, e_corr, e_total
from dfr.fmaps import (FeatureMatrix, diagnose, e_bij, e_ortho, fmap_losses, fmap_to_pointmap, load_features, nce_loss,
                       save_features, soft_map, solve_fmap)
from dfr.geometry import (GeodesicMatrix, PointCloud, TriMesh, geodesic_matrix, grid_mesh, load_shape, normalize_shape,
                          save_shape, surface_area)
from dfr.spectral import SpectralBasis, cotan_laplacian, eigenbasis, mesh_basis, project, reconstruct
from dfr.trace import EnergyTrace, RuntimeAccount, TraceRow


def octahedron(name: str = "octahedron") -> TriMesh:
    vertices = [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]]
    faces = [[0, 2, 4], [2, 1, 4], [1, 3, 4], [3, 0, 4], [2, 0, 5], [1, 2, 5], [3, 1, 5], [0, 3, 5]]
    return TriMesh(vertices, faces, name)


def cube(name: str = "cube") -> TriMesh:
    vertices = [[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0], [0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1]]
    faces = [[0, 2, 1], [0, 3, 2], [4, 5, 6], [4, 6, 7], [0, 1, 5], [0, 5, 4], [1, 2, 6], [1, 6, 5], [2, 3, 7],
             [2, 7, 6], [3, 0, 4], [3, 4, 7]]
    return TriMesh(vertices, faces, name)


def icosphere(level: int) -> TriMesh:
    t = (1 + 5**0.5) / 2
    vertices = [[-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0], [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
                [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1]]
    faces = [[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11], [1, 5, 9], [5, 11, 4], [11, 10, 2],
             [10, 7, 6], [7, 1, 8], [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9], [4, 9, 5], [2, 4, 11],
             [6, 2, 10], [8, 6, 7], [9, 8, 1]]
    vertices = [list(np.array(v) / np.linalg.norm(v)) for v in vertices]
    for _ in range(level):
        midpoints: dict[tuple[int, int], int] = {}

        def midpoint(a: int, b: int) -> int:
            key = (min(a, b), max(a, b))
            if key not in midpoints:
                m = (np.array(vertices[a]) + np.array(vertices[b])) / 2
                vertices.append(list(m / np.linalg.norm(m)))
                midpoints[key] = len(vertices) - 1
            return midpoints[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        faces = new_faces
    return TriMesh(vertices, faces, f"icosphere{ level }")


def fibonacci_sphere(n: int) -> TriMesh:
    i = np.arange(n) + 0.5
    polar = np.arccos(1 - 2 * i / n)
    azimuth = np.pi * (1 + 5**0.5) * i
    points = np.stack([np.cos(azimuth) * np.sin(polar), np.sin(azimuth) * np.sin(polar), np.cos(polar)], axis=1)
    return TriMesh(points, ConvexHull(points).simplices, "sphere")


def full_graph(vertices: np.ndarray, nodes: np.ndarray, K: int) -> DeformGraph:
    "Graph with every pair of nodes adjacent"
    H = len(nodes)
    offsets = np.arange(H + 1) * (H - 1)
    indices = np.concatenate([[l for l in range(H) if l != h] for h in range(H)])
    idx, w = skin(vertices, nodes, K)
    return DeformGraph(nodes, offsets, indices, idx, w)


TETRA_NODES = np.array([[0.5, 0.5, 0.5], [-0.5, -0.5, 0.5], [-0.5, 0.5, -0.5], [0.5, -0.5, -0.5]])


def numeric_gradient(func, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    "Central differences of a scalar function of a flat vector"
    grad = np.zeros_like(x)
    for i in range(len(x)):
        up, down = x.copy(), x.copy()
        up[i] += h
        down[i] -= h
        grad[i] = (func(up) - func(down)) / (2 * h)
    return grad


def skin_oracle(vertices: np.ndarray, nodes: np.ndarray, K: int) -> tuple[np.ndarray, np.ndarray]:
    "Straightforward per vertex skinning ordered by (distance, index)"
    all_idx, all_w = [], []
    for v in vertices:
        d = np.sqrt(np.sum((nodes - v)**2, axis=1))
        order = np.lexsort((np.arange(len(nodes)), d))
        reference = d[order[K]]
        if reference == 0:
            w = np.zeros(K)
            w[0] = 1
        else:
            w = (1 - d[order[:K]] / reference)**2
            if w.sum() == 0:
                w = np.ones(K)
        all_idx.append(order[:K])
        all_w.append(w / w.sum())
    return np.array(all_idx), np.array(all_w)


class DFR(unittest.TestCase):

    def setUp(self):
        self.tmpdir = tempfile.mkdtemp(prefix="dfr-tests-")

    def tearDown(self):
        shutil.rmtree(self.tmpdir, ignore_errors=True)

    def path(self, name: str) -> str:
        return os.path.join(self.tmpdir, name)

    def write_text(self, name: str, text: str) -> str:
        with open(self.path(name), "wt", encoding="utf8") as f:
            f.write(text)
        return self.path(name)

    def assertClose(self, a, b, tol: float = 1e-10, msg=None):
        a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
        self.assertEqual(a.shape, b.shape, msg)
        self.assertLessEqual(float(np.max(np.abs(a - b), initial=0.0)), tol, msg)

    def assertGradient(self, analytic, numeric, rel: float = 1e-5):
        error = np.linalg.norm(analytic - numeric)
        self.assertLessEqual(error, rel * max(np.linalg.norm(analytic), 1e-8), f"gradient error { error }")

    ###
    ### Geometry
    ###

    def testSanity(self):
        "Check the package exports"
        self.assertTrue(dfr.__version__)
        for name in ("Error", "InputError", "ParseError", "ArgumentError", "DimensionError", "UnsupportedModeError",
                     "ConfigError", "NumericalError", "SingularityError", "ConvergenceError", "NonFiniteEnergyError"):
            self.assertTrue(issubclass(getattr(dfr, name), dfr.Error))
        self.assertTrue(issubclass(dfr.ParseError, dfr.InputError))
        self.assertTrue(issubclass(dfr.SingularityError, dfr.NumericalError))

    def testLoadOff(self):
        "A minimal OFF file loads with file order preserved"
        name = self.write_text("tri.off", "OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n")
        mesh = load_shape(name)
        self.assertIsInstance(mesh, TriMesh)
        self.assertEqual(mesh.n_vertices, 3)
        self.assertEqual(len(mesh.faces), 1)
        self.assertEqual(mesh.name, "tri")
        self.assertClose(mesh.vertices, [[0, 0, 0], [1, 0, 0], [0, 1, 0]], 0)
        cloud = load_shape(name, "pointcloud")
        self.assertIsInstance(cloud, PointCloud)
        self.assertEqual(len(cloud), 3)

    def testOffMissingRecord(self):
        "A vertex count larger than the records supplied is reported at the missing record"
        name = self.write_text("short.off", "OFF\n4 0 0\n0 0 0\n1 0 0\n0 1 0\n")
        with self.assertRaises(dfr.ParseError) as cm:
            load_shape(name)
        self.assertEqual(cm.exception.line, 6)
        self.assertIn("vertex record 4 of 4", str(cm.exception))

    def testParseErrors(self):
        "Malformed shape files"
        cases = (
            ("a.off", "OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 7\n", 6),
            ("b.off", "OFF\n3 1 0\n0 0 0\n1 x 0\n0 1 0\n3 0 1 2\n", 4),
            ("c.off", "OFF\n4 1 0\n0 0 0\n1 0 0\n0 1 0\n1 1 0\n4 0 1 2 3\n", 7),
            ("d.obj", "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 2\n", 4),
        )
        for fname, text, line in cases:
            with self.assertRaises(dfr.ParseError) as cm:
                load_shape(self.write_text(fname, text))
            self.assertEqual(cm.exception.line, line, fname)
        with self.assertRaises(dfr.ParseError):
            load_shape(self.write_text("e.stl", "solid"))
        with self.assertRaises(dfr.ParseError):
            load_shape(self.write_text("f.off", "OFF\n3 0 0\n0 0 0\n1 0 0\n0 1 0\n"))

    def testFormatsRoundTrip(self):
        "Shapes written then read back are bit identical in every format"
        rng = np.random.default_rng(1)
        mesh = icosphere(1).with_vertices(icosphere(1).vertices + rng.normal(scale=1e-3, size=(42, 3)))
        for fname, binary in (("m.off", False), ("m.obj", False), ("m.ply", False), ("b.ply", True)):
            save_shape(mesh, self.path(fname), binary=binary)
            back = load_shape(self.path(fname))
            self.assertTrue(np.array_equal(back.vertices, mesh.vertices), fname)
            self.assertTrue(np.array_equal(back.faces, mesh.faces), fname)
        cloud = PointCloud(mesh.vertices, "cloud")
        save_shape(cloud, self.path("c.ply"), binary=True)
        back = load_shape(self.path("c.ply"), "auto")
        self.assertIsInstance(back, PointCloud)
        self.assertTrue(np.array_equal(back.points, cloud.points))

    def testIsolatedVertices(self):
        "Vertices used by no face are dropped with a warning"
        with self.assertLogs("dfr.geometry", logging.WARNING):
            mesh = TriMesh([[0, 0, 0], [1, 0, 0], [5, 5, 5], [0, 1, 0]], [[0, 1, 3]])
        self.assertEqual(mesh.n_vertices, 3)
        self.assertEqual(list(mesh.dropped_vertices), [2])
        self.assertEqual(mesh.faces.tolist(), [[0, 1, 2]])
        with self.assertRaises(dfr.ArgumentError):
            TriMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 1]])
        with self.assertRaises(dfr.DimensionError):
            TriMesh([[0, 0], [1, 0], [0, 1]], [[0, 1, 2]])

    def testSurfaceArea(self):
        "Area of simple meshes and a sphere against Heron's formula"
        triangle = TriMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]])
        self.assertAlmostEqual(surface_area(triangle), 0.5, places=14)
        self.assertAlmostEqual(surface_area(cube()), 6.0, places=14)
        sphere = icosphere(2)
        self.assertEqual(sphere.n_vertices, 162)
        heron = 0.0
        for face in sphere.faces:
            p = sphere.vertices[face]
            a, b, c = (math.dist(p[0], p[1]), math.dist(p[1], p[2]), math.dist(p[2], p[0]))
            s = (a + b + c) / 2
            heron += math.sqrt(s * (s - a) * (s - b) * (s - c))
        self.assertAlmostEqual(surface_area(sphere) / heron, 1.0, places=10)
        R = Rotation.from_rotvec([0.3, -1.1, 0.7]).as_matrix()
        moved = sphere.with_vertices(sphere.vertices @ R.T + [4.0, -2.5, 1.0])
        self.assertAlmostEqual(surface_area(moved), surface_area(sphere), places=10)
        flat = TriMesh([[0, 0, 0], [1, 0, 0], [2, 0, 0]], [[0, 1, 2]])
        with self.assertLogs("dfr.geometry", logging.WARNING):
            self.assertEqual(surface_area(flat), 0.0)

    def testNormalize(self):
        "Centering and unit area scaling, and undoing them"
        triangle = TriMesh([[1, 2, 3], [3, 2, 3], [1, 4, 3]], [[0, 1, 2]])
        centered, transform = normalize_shape(triangle, "center")
        self.assertClose(centered.vertices.mean(axis=0), np.zeros(3), 1e-14)
        self.assertAlmostEqual(surface_area(centered), 2.0, places=12)
        scaled, transform = normalize_shape(triangle, "center_unit_area")
        self.assertAlmostEqual(surface_area(scaled), 1.0, places=12)
        self.assertClose(scaled.vertices.mean(axis=0), np.zeros(3), 1e-14)
        self.assertClose(transform.inverse().apply(scaled.vertices), triangle.vertices, 1e-12)
        with self.assertRaises(dfr.UnsupportedModeError):
            normalize_shape(PointCloud(triangle.vertices), "center_unit_area")
        with self.assertRaises(dfr.UnsupportedModeError):
            normalize_shape(triangle, "sideways")

    def testGridMesh(self):
        mesh = grid_mesh(3, 4)
        self.assertEqual(mesh.n_vertices, 12)
        self.assertEqual(len(mesh.faces), 12)
        self.assertClose(mesh.vertices[5], [1 / 3, 0.5, 0])
        self.assertAlmostEqual(surface_area(mesh), 1.0, places=14)
        with self.assertRaises(dfr.ArgumentError):
            grid_mesh(1, 5)

    def testGeodesicExamples(self):
        # collinear points: the two unit edges beat the direct one
        path = TriMesh([[0, 0, 0], [1, 0, 0], [2, 0, 0]], [[0, 1, 2]])
        geo = geodesic_matrix(path)
        self.assertEqual(geo[0, 2], 2.0)
        self.assertEqual(geo[0, 1], 1.0)
        equilateral = TriMesh([[0, 0, 0], [1, 0, 0], [0.5, 3**0.5 / 2, 0]], [[0, 1, 2]])
        d = geodesic_matrix(equilateral).dense
        self.assertClose(d, 1 - np.eye(3), 1e-6)
        self.assertEqual(d.dtype, np.float32)

    def testGeodesicsAgainstFloydWarshall(self):
        mesh = grid_mesh(5)
        n = mesh.n_vertices
        D = np.full((n, n), np.inf)
        np.fill_diagonal(D, 0)
        for (a, b), length in zip(mesh.edges, mesh.edge_lengths):
            D[a, b] = D[b, a] = length
        for k in range(n):
            D = np.minimum(D, D[:, k, None] + D[None, k, :])
        dense = geodesic_matrix(mesh, mode="dense", threads=1)
        self.assertClose(dense.dense, D, 1e-6)
        self.assertClose(dense.dense, dense.dense.T, 0)
        self.assertTrue(np.array_equal(geodesic_matrix(mesh, mode="dense", threads=4).dense, dense.dense))
        rows = geodesic_matrix(mesh, mode="rows")
        self.assertFalse(rows.is_dense)
        self.assertTrue(np.array_equal(rows.row(7), dense.row(7)))
        self.assertTrue(np.array_equal(rows.dense, dense.dense))
        self.assertClose(rows.lookup([0, 3, 7], [24, 3, 1]), [D[0, 24], 0, D[7, 1]], 1e-6)
        with self.assertRaises(dfr.UnsupportedModeError):
            geodesic_matrix(mesh, mode="sparse")

    def testGeodesicComponents(self):
        "Vertices in different components are infinitely far apart"
        mesh = TriMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0], [5, 0, 0], [6, 0, 0], [5, 1, 0]], [[0, 1, 2], [3, 4, 5]])
        self.assertEqual(mesh.n_components, 2)
        geo = geodesic_matrix(mesh)
        self.assertTrue(math.isinf(geo[0, 4]))
        self.assertEqual(geo[3, 4], 1.0)

    def testGeodesicCache(self):
        geo = geodesic_matrix(grid_mesh(4))
        geo.save(self.path("g.dfrg"))
        back = GeodesicMatrix.load(self.path("g.dfrg"), "grid")
        self.assertEqual(back.n, 16)
        self.assertTrue(np.array_equal(back.dense, geo.dense))
        with open(self.path("bad.dfrg"), "wb") as f:
            f.write(b"DFRG" + b"\0" * 30)
        with self.assertRaises(dfr.ParseError):
            GeodesicMatrix.load(self.path("bad.dfrg"))

    def testNearest(self):
        "Ties go to the smaller index"
        idx, d2 = knn.nearest([[0, 0, 0]], [[1, 0, 0], [-1, 0, 0], [0, 0, 2]])
        self.assertEqual(idx.tolist(), [0])
        self.assertEqual(d2.tolist(), [1.0])
        with self.assertRaises(ValueError):
            knn.k_nearest([[0, 0, 0]], [[1, 0, 0]], 2)

    def testNearestTreeMatchesBruteForce(self):
        "The KD-tree path orders ties the same way as the exact path"
        g = np.stack(np.meshgrid(np.arange(5), np.arange(5), indexing="ij"), axis=-1).reshape(-1, 2)
        points = np.hstack([g, np.zeros((25, 1))]).astype(np.float64)
        queries = np.hstack([g[g.max(axis=1) < 4] + 0.5, np.zeros((16, 1))])
        brute = knn.k_nearest(queries, points, 2)
        with unittest.mock.patch.object(knn, "BRUTE_FORCE_PAIRS", 0):
            tree = knn.k_nearest(queries, points, 2)
        self.assertTrue(np.array_equal(brute[0], tree[0]))
        self.assertTrue(np.array_equal(brute[1], tree[1]))

    def testNearestTreeLargeTieGroup(self):
        "Ties larger than the tree's spare neighbours still go to the smallest index"
        ring = [(5, 0), (-5, 0), (0, 5), (0, -5), (3, 4), (3, -4), (-3, 4), (-3, -4), (4, 3), (4, -3), (-4, 3), (-4, -3)]
        far = [(9, 9), (-9, 9), (9, -9), (-9, -9), (12, 0), (0, 12)]
        order = np.random.default_rng(11).permutation(len(ring) + len(far))
        points = np.hstack([np.array(ring + far, dtype=np.float64)[order], np.zeros((len(order), 1))])
        queries = np.array([[0.0, 0.0, 0.0], [0.0, 0.0, 1.0], [20.0, 20.0, 0.0]])
        for k in (1, 3, len(ring)):
            brute = knn.k_nearest(queries, points, k)
            with unittest.mock.patch.object(knn, "BRUTE_FORCE_PAIRS", 0):
                tree = knn.k_nearest(queries, points, k)
            self.assertTrue(np.array_equal(brute[0], tree[0]), f"k={ k }")
            self.assertTrue(np.array_equal(brute[1], tree[1]), f"k={ k }")
        self.assertEqual(tree[0][0, 0], int(np.flatnonzero(order < len(ring)).min()))

    ###
    ### Spectral
    ###

    def testCotanWeights(self):
        equilateral = TriMesh([[0, 0, 0], [1, 0, 0], [0.5, 3**0.5 / 2, 0]], [[0, 1, 2]])
        L, mass = cotan_laplacian(equilateral)
        A = L.toarray()
        for a, b in ((0, 1), (1, 2), (0, 2)):
            self.assertAlmostEqual(A[a, b], -1 / (2 * 3**0.5), places=12)
        self.assertClose(A.sum(axis=1), np.zeros(3), 1e-12)
        self.assertClose(mass, np.full(3, 3**0.5 / 12), 1e-15)

        square = TriMesh([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]], [[0, 1, 2], [0, 2, 3]])
        L, mass = cotan_laplacian(square)
        expected = [[1, -.5, 0, -.5], [-.5, 1, -.5, 0], [0, -.5, 1, -.5], [-.5, 0, -.5, 1]]
        self.assertClose(L.toarray(), expected, 1e-14)
        self.assertClose(L.toarray(), L.toarray().T, 0)
        self.assertAlmostEqual(mass.sum(), 1.0, places=14)

        basis = eigenbasis(L, mass, 1)
        self.assertClose(basis.evecs[:, 0], np.ones(4), 1e-10)
        self.assertLessEqual(abs(basis.evals[0]), 1e-12)

    def testEigenbasisSmall(self):
        "Octahedron eigenvalues match a dense generalized solve"
        mesh = octahedron()
        L, mass = cotan_laplacian(mesh)
        basis = eigenbasis(L, mass, 6)
        oracle = scipy.linalg.eigh(L.toarray(), np.diag(mass), eigvals_only=True)
        self.assertClose(basis.evals, np.maximum(oracle, 0), 1e-10)
        self.assertClose(basis.evecs.T @ (mass[:, None] * basis.evecs), np.eye(6), 1e-8)
        with self.assertRaises(dfr.ArgumentError):
            eigenbasis(L, mass, 7)
        with self.assertRaises(dfr.DimensionError):
            eigenbasis(L, mass[:5], 3)

    def testEigenbasisSphere(self):
        mesh = fibonacci_sphere(400)
        basis = mesh_basis(mesh, 20)
        self.assertEqual((basis.n, basis.k), (400, 20))
        self.assertClose(basis.evecs.T @ (basis.mass[:, None] * basis.evecs), np.eye(20), 1e-6)
        self.assertLessEqual(basis.evals[0], 1e-8)
        self.assertTrue(np.all(np.diff(basis.evals) >= 0))
        # three eigenfunctions of nearly equal eigenvalue follow the constant
        self.assertLess((basis.evals[3] - basis.evals[1]) / basis.evals[1], 0.05)
        pivots = np.argmax(np.abs(basis.evecs), axis=0)
        self.assertTrue(np.all(basis.evecs[pivots, np.arange(20)] > 0))

        # rigid motions leave the spectrum alone, scaling by s divides it by s squared
        R = Rotation.from_rotvec([0.4, 0.9, -0.2]).as_matrix()
        moved = mesh_basis(mesh.with_vertices(mesh.vertices @ R.T + [1.5, -3.0, 2.0]), 20)
        self.assertClose(moved.evals, basis.evals, 1e-6 * basis.evals[-1])
        scaled = mesh_basis(mesh.with_vertices(2.5 * mesh.vertices), 20)
        self.assertClose(scaled.evals * 2.5**2, basis.evals, 1e-6 * basis.evals[-1])

        L, mass = cotan_laplacian(mesh)
        with unittest.mock.patch.object(spectral, "DENSE_EIGEN_LIMIT", 10):
            iterative = eigenbasis(L, mass, 9)
        self.assertClose(iterative.evals, basis.evals[:9], 1e-6)

        basis.save(self.path("b.dfrb"))
        back = SpectralBasis.load(self.path("b.dfrb"))
        self.assertTrue(np.array_equal(back.evecs, basis.evecs))
        self.assertTrue(np.array_equal(back.evals, basis.evals))
        self.assertEqual(basis.truncate(5).k, 5)

    def testProjection(self):
        basis = mesh_basis(fibonacci_sphere(200), 12)
        self.assertClose(project(basis, basis.evecs), np.eye(12), 1e-6)
        coefficients = project(basis, np.full(200, 3.0))
        expected = np.zeros(12)
        expected[0] = 3 * np.sqrt(basis.mass.sum())
        self.assertClose(coefficients, expected, 1e-5)
        f = np.random.default_rng(2).normal(size=(200, 2))
        M = np.diag(basis.mass)
        oracle = np.linalg.solve(basis.evecs.T @ M @ basis.evecs, basis.evecs.T @ M @ f)
        self.assertClose(project(basis, f), oracle, 1e-8)
        self.assertClose(reconstruct(basis, project(basis, basis.evecs[:, 3])), basis.evecs[:, 3], 1e-8)
        with self.assertRaises(dfr.DimensionError):
            project(basis, np.zeros(10))

    ###
    ### Functional maps
    ###

    def testFeatureFiles(self):
        values = np.random.default_rng(3).normal(size=(6, 4))
        save_features(FeatureMatrix(values, "octahedron"), self.path("o.dfrf"))
        back = load_features(self.path("o.dfrf"), points=6)
        self.assertEqual(back.shape_name, "octahedron")
        self.assertTrue(np.array_equal(back.values, values))
        with self.assertRaises(dfr.DimensionError):
            load_features(self.path("o.dfrf"), points=7)
        self.write_text("o.dfrf.txt", "shape = octahedron\npoints = 9\n")
        with self.assertRaises(dfr.ParseError):
            load_features(self.path("o.dfrf"))
        with self.assertRaises(dfr.ArgumentError):
            FeatureMatrix([[0.0, math.nan]])

    def testSolveFmap(self):
        C = solve_fmap(np.eye(4), np.eye(4), 0, np.zeros(4), np.zeros(4)).C
        self.assertClose(C, np.eye(4), 1e-12)

        rng = np.random.default_rng(4)
        A1 = rng.normal(size=(5, 12))
        R = rng.normal(size=(5, 5)) + 5 * np.eye(5)
        self.assertClose(solve_fmap(A1, R @ A1, 0, np.zeros(5), np.zeros(5)).C, R, 1e-8)

        A1, A2 = rng.normal(size=(6, 10)), rng.normal(size=(6, 10))
        e1, e2 = np.sort(rng.uniform(0, 5, 6)), np.sort(rng.uniform(0, 5, 6))
        lam = 1e-3
        C = solve_fmap(A1, A2, lam, e1, e2).C
        for p in range(6):
            system = np.vstack([A1.T, np.sqrt(lam) * np.diag(e2[p] - e1)])
            rhs = np.concatenate([A2[p], np.zeros(6)])
            self.assertClose(C[p], np.linalg.lstsq(system, rhs, rcond=None)[0], 1e-8)

        with self.assertRaises(dfr.SingularityError):
            solve_fmap(np.ones((3, 5)), np.ones((3, 5)), 0, np.zeros(3), np.zeros(3))
        with self.assertRaises(dfr.DimensionError):
            solve_fmap(np.ones((3, 5)), np.ones((3, 4)), 1, np.zeros(3), np.zeros(3))

    def testSoftMap(self):
        P = soft_map([[0.0], [1.0], [2.0]], [[0.0], [2.0]], 1.0).dense()
        for i, f in enumerate((0.0, 1.0, 2.0)):
            w = np.array([math.exp(-abs(f - g)) for g in (0.0, 2.0)])
            self.assertClose(P[i], w / w.sum(), 1e-14)
        sharp = soft_map(np.eye(3), np.eye(3), 1e4)
        self.assertClose(sharp.dense(), np.eye(3), 1e-10)
        self.assertEqual(sharp.argmax().tolist(), [0, 1, 2])
        self.assertClose(sharp @ np.arange(3.0), np.arange(3.0), 1e-10)
        # only differences between features matter
        rng = np.random.default_rng(15)
        F1, F2 = rng.normal(size=(7, 3)), rng.normal(size=(5, 3))
        shift = np.array([3.0, -2.0, 1.0])
        self.assertClose(soft_map(F1 + shift, F2 + shift, 2.0).dense(), soft_map(F1, F2, 2.0).dense(), 1e-12)
        with self.assertRaises(dfr.ArgumentError):
            soft_map(np.eye(3), np.eye(3), 0)

    def testFmapStructureLosses(self):
        self.assertAlmostEqual(e_bij(2 * np.eye(2), np.eye(2)), 2.0, places=14)
        self.assertAlmostEqual(e_ortho(2 * np.eye(2), np.eye(2)), 3 * 2**0.5, places=14)
        self.assertEqual(e_bij(np.eye(3), np.eye(3)), 0.0)

    def testFmapLossesAgainstDenseOracle(self):
        basis = mesh_basis(octahedron(), 4)
        rng = np.random.default_rng(5)
        C12, C21 = rng.normal(size=(4, 4)), rng.normal(size=(4, 4))
        F1, F2 = rng.normal(size=(6, 3)), rng.normal(size=(6, 3))
        pi12, pi21 = soft_map(F1, F2, 2.0), soft_map(F2, F1, 2.0)
        losses = fmap_losses(C12, C21, pi12, pi21, basis, basis)

        Phi, M = basis.evecs, np.diag(basis.mass)
        r12 = C12 - Phi.T @ M @ pi21.dense() @ Phi
        r21 = C21 - Phi.T @ M @ pi12.dense() @ Phi
        bij = np.sum((C12 @ C21 - np.eye(4))**2)
        ortho = np.linalg.norm(C12 @ C12.T - np.eye(4)) + np.linalg.norm(C21 @ C21.T - np.eye(4))
        align = np.sum(r12**2) + np.sum(r21**2)
        self.assertAlmostEqual(losses.e_bij, bij, places=10)
        self.assertAlmostEqual(losses.e_ortho, ortho, places=10)
        self.assertAlmostEqual(losses.e_align, align, places=10)
        self.assertAlmostEqual(losses.e_align_unsquared, np.linalg.norm(r12) + np.linalg.norm(r21), places=10)
        self.assertAlmostEqual(losses.e_dfm, bij + ortho + 1e-4 * align, places=10)
        with self.assertRaises(dfr.DimensionError):
            fmap_losses(C12[:3], C21, pi12, pi21, basis, basis)

    def testNceLoss(self):
        self.assertEqual(nce_loss([[1.0, 2.0]], [[3.0, 4.0]], 0.1), 0.0)
        previous = math.inf
        for gamma in (1, 0.5, 0.1, 0.01):
            value = nce_loss(np.eye(3), np.eye(3), gamma)
            self.assertAlmostEqual(value, 3 * math.log(1 + 2 * math.exp(-1 / gamma)), places=12)
            self.assertLess(value, previous)
            previous = value
        self.assertLess(previous, 1e-10)

        F = [[1, 0], [0, 1], [1, 1]]
        G = [[1, 0.5], [0, 1], [0.5, 0.5]]
        oracle = 0.0
        for i in range(3):
            logits = [sum(a * b for a, b in zip(F[i], G[j])) for j in range(3)]
            oracle -= math.log(math.exp(logits[i]) / sum(math.exp(v) for v in logits))
        self.assertAlmostEqual(nce_loss(F, G, 1.0), oracle, places=12)
        with self.assertRaises(dfr.ArgumentError):
            nce_loss(F, G, 0)
        with self.assertRaises(dfr.DimensionError):
            nce_loss(F, G[:2], 1)

    def testFmapToPointmap(self):
        rng = np.random.default_rng(6)
        phi1 = rng.normal(size=(8, 4))
        perm = rng.permutation(8)
        self.assertEqual(fmap_to_pointmap(np.eye(4), phi1, phi1[perm]).tolist(), np.argsort(perm).tolist())

        basis = mesh_basis(octahedron(), 4)
        self.assertEqual(fmap_to_pointmap(np.eye(4), basis, basis).tolist(), list(range(6)))
        Q, _ = np.linalg.qr(rng.normal(size=(4, 4)))
        mapped = basis.evecs @ Q.T
        oracle = [int(np.argmin(np.linalg.norm(basis.evecs - row, axis=1))) for row in mapped]
        self.assertEqual(fmap_to_pointmap(Q, basis, basis).tolist(), oracle)

    def testDiagnose(self):
        mesh = octahedron()
        basis = mesh_basis(mesh, 4)
        v = mesh.vertices
        values = np.column_stack([v, np.ones(6), v[:, 0]**2])
        F = FeatureMatrix(values, mesh.name)
        d = diagnose(F, F, basis, basis)
        self.assertClose(d.C12.C, np.eye(4), 1e-8)
        self.assertEqual(d.C21.direction, "2->1")
        self.assertLess(d.losses.e_bij, 1e-12)
        self.assertLess(d.losses.e_ortho, 1e-6)
        self.assertEqual(d.pointmap12.tolist(), list(range(6)))
        self.assertTrue(math.isfinite(d.nce))
        self.assertAlmostEqual(d.combined, d.losses.e_dfm + d.nce, places=12)
        with self.assertRaises(dfr.DimensionError):
            diagnose(FeatureMatrix(values[:5]), F, basis, basis)

    ###
    ### Deformation graph
    ###

    def testDecimateNoop(self):
        mesh = grid_mesh(4)
        result = qslim_decimate(mesh, 16)
        self.assertIs(result.mesh, mesh)
        self.assertEqual(result.survivors.tolist(), list(range(16)))
        for bad in (3, 17):
            with self.assertRaises(dfr.ArgumentError):
                qslim_decimate(mesh, bad)

    def testDecimateOctahedron(self):
        "An octahedron decimated to four vertices is a valid tetrahedron"
        result = qslim_decimate(octahedron(), 4)
        mesh = result.mesh
        self.assertFalse(result.stalled)
        self.assertEqual(mesh.n_vertices, 4)
        self.assertEqual(len(mesh.faces), 4)
        self.assertEqual(mesh.n_vertices - len(mesh.edges) + len(mesh.faces), 2)
        self.assertTrue(np.all(mesh.face_areas > 0))
        self.assertEqual(len(set(result.survivors.tolist())), 4)
        self.assertTrue(np.all(result.survivors < 6))

    def testDecimateGreedyBeatsRandom(self):
        mesh = grid_mesh(10)
        greedy = qslim_decimate(mesh, 50)
        self.assertFalse(greedy.stalled)
        self.assertEqual(greedy.mesh.n_vertices, 50)
        self.assertTrue(np.all(greedy.mesh.face_areas > 0))
        random_order = qslim_decimate(mesh, 50, order="random", seed=3)
        if not random_order.stalled:
            self.assertLessEqual(greedy.error, random_order.error + 1e-9)
        again = qslim_decimate(mesh, 50)
        self.assertTrue(np.array_equal(again.mesh.vertices, greedy.mesh.vertices))

    def testSkinning(self):
        vertices = cube().vertices
        nodes = vertices[[0, 2, 5, 7]]
        idx, w = skin(vertices, nodes, 2)
        oracle_idx, oracle_w = skin_oracle(vertices, nodes, 2)
        self.assertEqual(idx.tolist(), oracle_idx.tolist())
        self.assertClose(w, oracle_w, 1e-14)
        # a node vertex binds to itself, a corner between three nodes is uniform
        self.assertEqual(w[0].tolist(), [1.0, 0.0])
        self.assertClose(w[1], [0.5, 0.5], 1e-15)
        with self.assertRaises(dfr.ArgumentError):
            skin(vertices, nodes, 4)

        rng = np.random.default_rng(7)
        points, centres = rng.normal(size=(30, 3)), rng.normal(size=(7, 3))
        idx, w = skin(points, centres, 3)
        oracle_idx, oracle_w = skin_oracle(points, centres, 3)
        self.assertEqual(idx.tolist(), oracle_idx.tolist())
        self.assertClose(w, oracle_w, 1e-12)
        self.assertClose(w.sum(axis=1), np.ones(30), 1e-14)

    def testBuildGraph(self):
        mesh = grid_mesh(3)
        graph = build_graph(mesh, 9, 1)
        self.assertEqual((graph.H, graph.K, graph.N), (9, 1, 9))
        self.assertEqual(graph.skin_indices[:, 0].tolist(), list(range(9)))
        self.assertTrue(np.all(graph.skin_weights == 1))
        for h in range(9):
            expected = sorted({int(b) for a, b in mesh.edges if a == h} | {int(a) for a, b in mesh.edges if b == h})
            self.assertEqual(graph.neighbors(h).tolist(), expected)

        graph = build_graph(cube(), 4, 2)
        self.assertGreaterEqual(graph.H, 4)
        for v, idx, w in zip(cube().vertices, graph.skin_indices, graph.skin_weights):
            d = np.sqrt(np.sum((graph.nodes - v)**2, axis=1))
            ordered = np.sort(d)
            self.assertClose(d[idx], ordered[:2], 1e-12)
            if ordered[2] > 0:
                expected = (1 - ordered[:2] / ordered[2])**2
                expected = expected / expected.sum() if expected.sum() > 0 else np.full(2, 0.5)
                self.assertClose(w, expected, 1e-9)

        with self.assertRaises(dfr.ArgumentError):
            build_graph(mesh, 3)
        with self.assertRaises(dfr.ArgumentError):
            build_graph(mesh, 10)

    def testGraphCache(self):
        graph = build_graph(grid_mesh(5), 10, 3)
        graph.save(self.path("g.dfrd"))
        back = DeformGraph.load(self.path("g.dfrd"))
        for attr in ("nodes", "neighbor_offsets", "neighbor_indices", "skin_indices", "skin_weights", "edges"):
            self.assertTrue(np.array_equal(getattr(back, attr), getattr(graph, attr)), attr)
        with open(self.path("g.dfrd"), "r+b") as f:
            f.truncate(60)
        with self.assertRaises(dfr.ParseError):
            DeformGraph.load(self.path("g.dfrd"))

    def testRodrigues(self):
        self.assertClose(rodrigues([np.pi / 2, 0, 0]), [[1, 0, 0], [0, 0, -1], [0, 1, 0]], 1e-15)
        self.assertTrue(np.array_equal(rodrigues([0, 0, 0]), np.eye(3)))
        rng = np.random.default_rng(8)
        for _ in range(20):
            theta = rng.normal(size=3)
            theta *= rng.uniform(0, np.pi) / np.linalg.norm(theta)
            K = np.array([[0, -theta[2], theta[1]], [theta[2], 0, -theta[0]], [-theta[1], theta[0], 0]])
            series, term = np.eye(3), np.eye(3)
            for n in range(1, 31):
                term = term @ K / n
                series = series + term
            R = rodrigues(theta)
            self.assertClose(R, series, 1e-12)
            self.assertClose(R, Rotation.from_rotvec(theta).as_matrix(), 1e-12)
            self.assertClose(R @ R.T, np.eye(3), 1e-14)
            self.assertClose(rodrigues(axis_angle_from_matrix(R)), R, 1e-12)
        tiny = np.array([1e-10, -2e-10, 3e-10])
        self.assertClose(rodrigues(tiny), Rotation.from_rotvec(tiny).as_matrix(), 1e-15)

    def testRodriguesDerivative(self):
        rng = np.random.default_rng(9)
        thetas = [rng.normal(size=3), rng.normal(size=3) * 5e-5, np.zeros(3), np.array([np.pi - 1e-3, 0, 0])]
        for theta in thetas:
            dR = rodrigues_derivative(theta)[0]
            for c in range(3):
                step = np.zeros(3)
                step[c] = 1e-6
                numeric = (rodrigues(theta + step) - rodrigues(theta - step)) / 2e-6
                self.assertClose(dR[c], numeric, 1e-8)

    def testWrapAxisAngle(self):
        theta = np.array([[1.5 * np.pi, 0, 0], [0.5, 0.2, 0.1]])
        wrapped = wrap_axis_angle(theta)
        self.assertClose(wrapped[0], [-0.5 * np.pi, 0, 0], 1e-14)
        self.assertTrue(np.array_equal(wrapped[1], theta[1]))
        self.assertClose(rodrigues(wrapped[0]), rodrigues(theta[0]), 1e-12)
        self.assertTrue(np.all(np.linalg.norm(wrap_axis_angle(np.array([[0, 7.0, 0]])), axis=1) <= np.pi))

    def testApplyIdentityAndRigid(self):
        mesh = grid_mesh(6)
        graph = build_graph(mesh, 12, 4)
        rest = mesh.vertices
        self.assertTrue(np.array_equal(apply(graph, GraphState.identity(graph.H), rest), rest))
        self.assertEqual(e_arap(graph, GraphState.identity(graph.H))[0], 0.0)

        rotations = Rotation.random(50, 10).as_matrix()
        shifts = np.random.default_rng(10).normal(size=(50, 3))
        for R, t in zip(rotations, shifts):
            state = GraphState.rigid(graph, R, t)
            self.assertClose(apply(graph, state, rest), rest @ R.T + t, 1e-10)
            self.assertLessEqual(e_arap(graph, state)[0], 1e-10)

        with self.assertRaises(dfr.DimensionError):
            apply(graph, GraphState.identity(graph.H + 1), rest)
        with self.assertRaises(dfr.DimensionError):
            apply(graph, GraphState.identity(graph.H), rest[:-1])

    ###
    ### Energies
    ###

    def testCorrespondenceEnergy(self):
        deformed = np.array([[0.0, 0, 0], [1, 0, 0]])
        target = np.array([[0.0, 0, 1], [1, 1, 0]])
        value, grad = e_corr(deformed, target, [[0, 0], [1, 1]])
        self.assertEqual(value, 1.0)
        self.assertClose(grad, [[0, 0, -1], [0, -1, 0]], 0)
        value, grad = e_corr(deformed, target, np.zeros((0, 2), dtype=np.intp))
        self.assertEqual(value, 0.0)
        self.assertFalse(grad.any())
        with self.assertRaises(dfr.ArgumentError):
            e_corr(deformed, target, [[0, 2]])

        rng = np.random.default_rng(11)
        deformed, target = rng.normal(size=(6, 3)), rng.normal(size=(5, 3))
        pairs = np.array([[0, 1], [2, 2], [2, 4], [5, 0]])
        _, grad = e_corr(deformed, target, pairs)
        numeric = numeric_gradient(lambda x: e_corr(x.reshape(6, 3), target, pairs)[0], deformed.ravel())
        self.assertGradient(grad.ravel(), numeric)

    def testChamfer(self):
        rng = np.random.default_rng(12)
        deformed, target = rng.uniform(size=(10, 3)), rng.uniform(size=(12, 3))
        value, grad = e_cd(deformed, target)
        forward = np.mean([min(np.sum((v - t)**2) for t in target) for v in deformed])
        backward = np.mean([min(np.sum((v - t)**2) for v in deformed) for t in target])
        self.assertAlmostEqual(value, forward + backward, places=12)
        numeric = numeric_gradient(lambda x: e_cd(x.reshape(10, 3), target)[0], deformed.ravel())
        self.assertGradient(grad.ravel(), numeric)

        self.assertEqual(e_cd(target, target)[0], 0.0)
        self.assertEqual(e_cd(deformed, target, subsample=10)[0], value)
        partial, grad = e_cd(deformed, target, subsample=4)
        self.assertEqual(int(np.count_nonzero(np.any(grad != 0, axis=1))), 4)

        # with equal point counts the two terms trade places when the arguments swap
        other = rng.uniform(size=(10, 3))
        self.assertAlmostEqual(e_cd(deformed, other)[0], e_cd(other, deformed)[0], places=14)

    def testArapGradient(self):
        mesh = octahedron()
        graph = full_graph(mesh.vertices, TETRA_NODES, 2)
        rng = np.random.default_rng(13)
        state = GraphState(rng.normal(scale=0.5, size=(4, 3)), rng.normal(scale=0.1, size=(4, 3)))
        value, g_theta, g_delta = e_arap(graph, state, 0.2)
        self.assertGreater(value, 0)
        numeric = numeric_gradient(lambda x: e_arap(graph, GraphState.from_vector(x), 0.2)[0], state.vector())
        self.assertGradient(np.concatenate([g_theta.ravel(), g_delta.ravel()]), numeric)

        # numbering the nodes differently changes nothing
        p = np.array([2, 0, 3, 1])
        renumbered = full_graph(mesh.vertices, TETRA_NODES[p], 2)
        moved = e_arap(renumbered, GraphState(state.theta[p], state.delta[p]), 0.2)
        self.assertAlmostEqual(moved[0], value, places=12)
        self.assertClose(moved[1], g_theta[p], 1e-12)
        self.assertClose(moved[2], g_delta[p], 1e-12)

    def testTotalEnergyGradient(self):
        mesh = octahedron()
        graph = full_graph(mesh.vertices, TETRA_NODES, 2)
        rng = np.random.default_rng(14)
        target = rng.normal(size=(8, 3))
        pairs = np.array([[0, 0], [1, 3], [4, 5]])
        weights = EnergyWeights(0.5, 1.0, 0.1)
        state = GraphState(rng.normal(scale=0.3, size=(4, 3)), rng.normal(scale=0.1, size=(4, 3)))
        energy = e_total(graph, state, mesh.vertices, target, pairs, weights)
        self.assertAlmostEqual(energy.total, 0.5 * energy.e_cd + energy.e_corr + 0.1 * energy.e_arap, places=12)
        self.assertTrue(energy.is_finite())

        def total(x):
            return e_total(graph, GraphState.from_vector(x), mesh.vertices, target, pairs, weights,
                           gradient=False).total

        numeric = numeric_gradient(total, state.vector())
        self.assertGradient(np.concatenate([energy.grad_theta.ravel(), energy.grad_delta.ravel()]), numeric)

        with self.assertRaises(dfr.DimensionError):
            e_total(graph, state, mesh.vertices, target[:, :2], pairs, weights)

    def testEnergyWeights(self):
        self.assertEqual(EnergyWeights(1, 0, 0).alpha_smooth, 0.2)
        with self.assertRaises(dfr.ArgumentError):
            EnergyWeights(-1, 1, 1)
        with self.assertRaises(dfr.ArgumentError):
            EnergyWeights(0, 0, 0)
        with self.assertRaises(dfr.ArgumentError):
            EnergyWeights(math.inf, 1, 1)

    ###
    ### Configuration, traces and output
    ###

    def testConfigDefaults(self):
        config = RegistrationConfig()
        w1, w2 = config.stage1.weights(), config.stage2.weights()
        self.assertEqual((w1.lambda_cd, w1.lambda_corr, w1.lambda_arap), (0.01, 1.0, 20.0))
        self.assertEqual((w2.lambda_cd, w2.lambda_corr, w2.lambda_arap), (1.0, 0.01, 1.0))
        self.assertEqual((config.stage1.eps, config.stage2.eps), (1e-8, 1e-7))
        self.assertEqual(config.update_interval, 100)
        self.assertEqual(config.patience, 15)
        self.assertEqual(w1.alpha_smooth, 0.2)
        self.assertEqual(config.filter.tau, 0.05)
        self.assertIs(config.validate(), config)

    def testConfigFile(self):
        name = self.write_text(
            "c.ini", "update_interval = 50  # refresh more often\nthreads = 2\n\n[stage1]\nlambda_arap = 5\n"
            "enabled = false\n[filter]\ntau = 0.1\n")
        config = load_config(name)
        self.assertEqual(config.update_interval, 50)
        self.assertEqual(config.threads, 2)
        self.assertEqual(config.stage1.lambda_arap, 5.0)
        self.assertFalse(config.stage1.enabled)
        self.assertEqual(config.filter.tau, 0.1)
        self.assertEqual(config.stage2, RegistrationConfig().stage2)

        self.write_text("round.ini", to_text(config))
        self.assertEqual(load_config(self.path("round.ini")), config)

        for text in ("bogus = 1\n", "[stage3]\neps = 1\n", "[stage1]\neps = tiny\n", "[filter]\ntau = -1\n"):
            with self.assertRaises(dfr.ConfigError, msg=text):
                load_config(self.write_text("bad.ini", text))
        with self.assertRaises(dfr.ConfigError):
            load_config(self.path("missing.ini"))

    def testConfigOverrides(self):
        config = apply_overrides(RegistrationConfig(), {("stage2", "lambda_cd"): "2.5", (None, "patience"): 3})
        self.assertEqual(config.stage2.lambda_cd, 2.5)
        self.assertEqual(config.patience, 3)
        self.assertEqual(RegistrationConfig().stage2.lambda_cd, 1.0)
        with self.assertRaises(dfr.ConfigError):
            apply_overrides(RegistrationConfig(), {("stage2", "lambda"): 1})
        flags = {k.flag for k in config_keys()}
        self.assertIn("--stage1-lambda-cd", flags)
        self.assertIn("--update-interval", flags)
        self.assertIn("--filter-tau", flags)

    def testWorkerCount(self):
        with unittest.mock.patch.dict(os.environ, {THREADS_ENV: "2"}):
            self.assertEqual(worker_count(8), 2)
            self.assertEqual(worker_count(1), 1)
        with unittest.mock.patch.dict(os.environ, {THREADS_ENV: "many"}):
            with self.assertRaises(dfr.ConfigError):
                worker_count(4)
        with unittest.mock.patch.dict(os.environ, {THREADS_ENV: ""}):
            self.assertEqual(worker_count(3), 3)
            self.assertGreaterEqual(worker_count(0), 1)

    def testTraceFile(self):
        trace = EnergyTrace([TraceRow(0, "stage1", 1 / 3, 0.1, 0.2, 1e-300, 7), TraceRow(1, "stage2", 0.5, 0.25, 0.0, 2.0, 9)])
        trace.save(self.path("t.csv"))
        with open(self.path("t.csv"), "rt", encoding="utf8") as f:
            self.assertEqual(f.readline().strip(), "iter,stage,E_total,E_cd,E_corr,E_arap,|C|")
        back = EnergyTrace.load(self.path("t.csv"))
        self.assertEqual(back.rows, trace.rows)
        self.assertEqual(back.stages, ["stage1", "stage2"])
        self.assertEqual(len(back.stage("stage2")), 1)

    def testRuntimeAccount(self):
        ticks = iter(range(100))
        account = RuntimeAccount("stage2", clock=lambda: next(ticks))
        with account.section("energy"):
            pass
        with account.section("energy"):
            pass
        runtime = account.finish(12)
        self.assertEqual(runtime.sections["energy"], 2)
        self.assertEqual(runtime.sections["filter"], 0)
        self.assertEqual(runtime.iterations, 12)
        self.assertEqual(runtime.as_dict()["stage"], "stage2")

    def testFormatTable(self):
        text = dfr.ext.format_table(["name", "value"], [["a", 1.5], ["bb", None]], use_unicode=False)
        lines = text.splitlines()
        self.assertEqual(len(lines), 6)
        self.assertIn("name", lines[1])
        self.assertIn("1.5", lines[3])
        self.assertIn("-", lines[4])
        self.assertEqual(len({len(line) for line in lines}), 1)

    def testLoggingExtra(self):
        out = io.StringIO()
        logger = logging.getLogger("dfr.tests.extra")
        handler = dfr.ext.configure_logging(logging.INFO, logger, stream=out, show_extra=True)
        try:
            logger.info("hello", extra={"dfr_stage": "stage1", "other": 3})
        finally:
            logger.removeHandler(handler)
        self.assertIn("hello [stage=stage1]", out.getvalue())


from .regtests import *

if __name__ == '__main__':
    unittest.main()
