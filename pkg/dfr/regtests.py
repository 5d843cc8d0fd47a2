#!/usr/bin/env python3
#
# Registration, batch pipeline and command line tests.  These run whole
# optimizations so they take longer than the unit tests in tests.py,
# which imports them.

from __future__ import annotations

import io
import json
import logging
import math
import os
import shlex
import shutil
import sys
import tempfile
import unittest
import unittest.mock

import numpy as np
from scipy.spatial.transform import Rotation

import dfr
from dfr import knn
from dfr.config import RegistrationConfig
from dfr.defgraph import GraphState, build_graph
from dfr.fmaps import FeatureMatrix, save_features
from dfr.geometry import PointCloud, TriMesh, geodesic_matrix, grid_mesh, load_shape, save_shape, surface_area
from dfr.pipeline import (Batch, RunManifest, TargetSpec, align_input, check_rotation, compose_maps, dense_map,
                          evaluate_pairs, geodesic_error, load_manifest, load_map, load_rotation, match_through_template,
                          prepare_target, run_batch, save_map)
from dfr.registration import (CorrespondenceSet, CorrespondenceUpdater, FeatureCommand, bijectivity_filter,
                              filter_threshold, optimize_stage, register, update_correspondences)
from dfr.energies import EnergyWeights
from dfr.shell import Shell
from dfr.speedtest import bent_target

OCTAHEDRON_OFF = """OFF
6 8 0
1 0 0
-1 0 0
0 1 0
0 -1 0
0 0 1
0 0 -1
3 0 2 4
3 2 1 4
3 1 3 4
3 3 0 4
3 2 0 5
3 1 2 5
3 3 1 5
3 0 3 5
"""


def quick_config() -> RegistrationConfig:
    "Default settings with little rigidity and a lower iteration cap"
    config = RegistrationConfig(threads=1)
    for stage in (config.stage1, config.stage2):
        stage.lambda_arap = 1e-4
        stage.max_iterations = 1000
    return config


def rotation_z(degrees: float) -> np.ndarray:
    return Rotation.from_euler("z", degrees, degrees=True).as_matrix()


def about_centre(points: np.ndarray, R: np.ndarray) -> np.ndarray:
    c = points.mean(axis=0)
    return (points - c) @ R.T + c


def vertex_error(deformed: np.ndarray, target: np.ndarray) -> float:
    "Mean distance between each deformed vertex and its true image"
    return float(np.linalg.norm(deformed - target, axis=1).mean())


def diagonal(points: np.ndarray) -> float:
    return float(np.linalg.norm(np.ptp(points, axis=0)))


class TempDirMixin:

    def setUp(self):
        self.tmpdir = tempfile.mkdtemp(prefix="dfr-regtests-")

    def tearDown(self):
        shutil.rmtree(self.tmpdir, ignore_errors=True)

    def path(self, *names: str) -> str:
        return os.path.join(self.tmpdir, *names)

    def write_text(self, name: str, text: str) -> str:
        with open(self.path(name), "wt", encoding="utf8") as f:
            f.write(text)
        return self.path(name)


class Registration(TempDirMixin, unittest.TestCase):

    def testNearestNeighbourMaps(self):
        grid = grid_mesh(4).vertices
        pi_st, pi_ts = update_correspondences(grid, grid, None, None, "stage2")
        self.assertEqual(pi_st.tolist(), list(range(16)))
        self.assertEqual(pi_ts.tolist(), list(range(16)))

        pi_st, pi_ts = update_correspondences([[0.0, 0, 0]], [[1.0, 0, 0], [-1.0, 0, 0]], None, None, "stage2")
        self.assertEqual(pi_st.tolist(), [0])
        self.assertEqual(pi_ts.tolist(), [0, 0])

        deformed = np.zeros((2, 3))
        target = np.zeros((3, 3))
        pi_st, pi_ts = update_correspondences(deformed, target, [[0.0], [1.0]], [[1.0], [0.0], [0.9]], "stage1")
        self.assertEqual(pi_st.tolist(), [1, 0])
        self.assertEqual(pi_ts.tolist(), [1, 0, 1])

        # renumbering the source features renumbers the feature space matches
        rng = np.random.default_rng(19)
        ft = rng.normal(size=(20, 5))
        perm = rng.permutation(20)
        pi_st, pi_ts = update_correspondences(np.zeros((20, 3)), np.zeros((20, 3)), ft[perm], ft, "stage1")
        self.assertEqual(pi_st.tolist(), perm.tolist())
        self.assertEqual(pi_ts.tolist(), np.argsort(perm).tolist())

        with self.assertRaises(dfr.ArgumentError):
            update_correspondences(deformed, target, None, None, "stage1")
        with self.assertRaises(dfr.ArgumentError):
            update_correspondences(deformed, target, None, None, "stage3")
        with self.assertRaises(dfr.DimensionError):
            update_correspondences(deformed, target, [[0.0]], [[1.0], [0.0], [0.9]], "stage1")
        with self.assertRaises(dfr.DimensionError):
            update_correspondences(deformed, target, [[0.0], [1.0]], [[1.0, 0], [0, 0], [0, 0]], "stage1")

    def testBijectivityFilter(self):
        path = TriMesh([[0, 0, 0], [1, 0, 0], [2, 0, 0]], [[0, 1, 2]])
        geo = geodesic_matrix(path)
        corr = bijectivity_filter([0, 1, 2], [2, 1, 0], geo, 1.0)
        self.assertEqual(corr.pairs.tolist(), [[1, 1]])
        self.assertTrue(corr.filtered)
        self.assertEqual(len(bijectivity_filter([0, 1, 2], [2, 1, 0], geo, 2.0)), 3)
        self.assertEqual(len(bijectivity_filter([0, 1, 2], [2, 1, 0], None, math.inf)), 3)
        for bad in (0, -1.0):
            with self.assertRaises(dfr.ArgumentError):
                bijectivity_filter([0, 1, 2], [2, 1, 0], geo, bad)
        with self.assertRaises(dfr.ArgumentError):
            bijectivity_filter([0, 1, 2], [2, 1, 0], None, 1.0)

    def testBijectivityFilterOracle(self):
        mesh = grid_mesh(5)
        geo = geodesic_matrix(mesh)
        rng = np.random.default_rng(20)
        pi_ts = rng.integers(0, 25, size=30)
        pi_st = rng.integers(0, 30, size=25)
        corr = bijectivity_filter(pi_st, pi_ts, geo, 0.3, provenance="feature", iteration=7)
        expected = [[i, int(pi_st[i])] for i in range(25) if geo.dense[i, pi_ts[pi_st[i]]] <= 0.3]
        self.assertEqual(corr.pairs.tolist(), expected)
        self.assertEqual(corr.provenance, "feature")
        self.assertEqual(corr.iteration, 7)

    def testFilterThreshold(self):
        config = RegistrationConfig()
        self.assertAlmostEqual(filter_threshold(grid_mesh(4), config), 0.05, places=14)
        config.filter.enabled = False
        self.assertTrue(math.isinf(filter_threshold(grid_mesh(4), config)))

    def testUpdaterFallsBackWhenFilterEmpties(self):
        grid = grid_mesh(3).vertices
        empty = CorrespondenceSet(np.zeros((0, 2), dtype=np.intp), np.arange(9), np.arange(9), "coordinate", 0)
        updater = CorrespondenceUpdater(grid, "stage2", None, math.inf)
        with unittest.mock.patch("dfr.registration.bijectivity_filter", return_value=empty):
            with self.assertLogs("dfr.registration", logging.WARNING):
                corr = updater(grid, 0)
        self.assertFalse(corr.filtered)
        self.assertEqual(corr.pairs.tolist(), [[i, i] for i in range(9)])

        frozen = CorrespondenceUpdater(grid, "stage2", None, math.inf, update=False)
        first = frozen(grid, 0)
        self.assertIs(frozen(grid + 1, 100), first)

    def testFeatureCommand(self):
        package_parent = os.path.dirname(os.path.dirname(os.path.abspath(dfr.__file__)))
        script = self.write_text(
            "features.py", f"import sys\nsys.path.insert(0, { package_parent!r})\n"
            "from dfr.geometry import load_shape\nfrom dfr.fmaps import FeatureMatrix, save_features\n"
            "mesh = load_shape(sys.argv[1])\nsave_features(FeatureMatrix(2 * mesh.vertices, 'doubled'), sys.argv[2])\n")
        mesh = grid_mesh(3)
        command = FeatureCommand(f"{ shlex.quote(sys.executable) } { shlex.quote(script) } {{input}} {{output}}", mesh)
        moved = mesh.vertices + [0.5, 0.25, 1.0]
        self.assertTrue(np.array_equal(command(moved), 2 * moved))

        failing = self.write_text("fail.py", "import sys\nsys.exit(3)\n")
        with self.assertRaises(dfr.InputError):
            FeatureCommand(f"{ shlex.quote(sys.executable) } { shlex.quote(failing) }", mesh)(moved)

    def testOptimizeAtRest(self):
        mesh = grid_mesh(5)
        graph = build_graph(mesh, 12, 4)
        fixed = bijectivity_filter(np.arange(25), np.arange(25), None, math.inf)
        result = optimize_stage(GraphState.identity(12), graph, mesh.vertices, mesh.vertices, lambda d, i: fixed,
                                EnergyWeights(1, 1, 1), 1e-8, 15, 100)
        self.assertTrue(result.converged)
        self.assertLessEqual(result.energy.total, 1e-10)
        self.assertTrue(np.array_equal(result.state.vector(), np.zeros(72)))
        self.assertEqual(result.iterations, 17)
        self.assertGreaterEqual(result.runtime.sections["correspondence"], 0)

    def testOptimizeIsMonotone(self):
        mesh = grid_mesh(8)
        graph = build_graph(mesh, 20, 4)
        target = bent_target(mesh, graph)
        fixed = bijectivity_filter(np.arange(64), np.arange(64), None, math.inf)
        result = optimize_stage(GraphState.identity(20),
                                graph,
                                mesh.vertices,
                                target,
                                lambda d, i: fixed,
                                EnergyWeights(0.01, 1, 1e-4),
                                1e-10,
                                15,
                                50,
                                max_iterations=300)
        totals = result.trace.totals()
        self.assertTrue(np.all(np.diff(totals) <= 0))
        self.assertLess(totals[-1], totals[0])
        self.assertEqual([r.iteration for r in result.trace], list(range(len(totals))))

    def testNonFiniteEnergy(self):
        mesh = grid_mesh(4)
        graph = build_graph(mesh, 8, 4)
        target = mesh.vertices.copy()
        target[0] = 1e200
        fixed = bijectivity_filter(np.arange(16), np.arange(16), None, math.inf)
        with np.errstate(over="ignore", invalid="ignore"):
            with self.assertRaises(dfr.NonFiniteEnergyError) as cm:
                optimize_stage(GraphState.identity(8), graph, mesh.vertices, target, lambda d, i: fixed,
                               EnergyWeights(1, 1, 1), 1e-8, 15, 100)
        self.assertEqual(cm.exception.iteration, 0)
        self.assertEqual(len(cm.exception.trace), 0)
        self.assertTrue(cm.exception.state.is_finite())

    def testRegisterIdentity(self):
        mesh = grid_mesh(6)
        features = (FeatureMatrix(mesh.vertices), FeatureMatrix(mesh.vertices))
        result = register(mesh, mesh, features, quick_config())
        self.assertTrue(np.array_equal(result.deformed.vertices, mesh.vertices))
        self.assertEqual(result.pi_st.tolist(), list(range(36)))
        self.assertEqual(result.pi_ts.tolist(), list(range(36)))
        self.assertEqual(result.initial_pi_st.tolist(), list(range(36)))
        self.assertEqual(result.trace.stages, ["stage1", "stage2"])
        self.assertEqual([r.stage for r in result.runtimes], ["stage1", "stage2"])

    def testRegisterWithoutFeatures(self):
        mesh = grid_mesh(4)
        with self.assertLogs("dfr.registration", logging.WARNING):
            result = register(mesh, mesh, None, quick_config())
        self.assertEqual(result.trace.stages, ["stage2"])
        self.assertIsNone(result.initial_pi_st)

    def testRegisterRigidRotation(self):
        mesh = grid_mesh(10)
        target = about_centre(mesh.vertices, rotation_z(30))
        features = (FeatureMatrix(mesh.vertices), FeatureMatrix(mesh.vertices))
        result = register(mesh, target, features, quick_config())
        self.assertLessEqual(vertex_error(result.deformed.vertices, target), 0.01 * diagonal(mesh.vertices))

    def testRegisterBend(self):
        mesh = grid_mesh(10)
        graph = build_graph(mesh, 50, 4)
        target = bent_target(mesh, graph)
        features = (FeatureMatrix(mesh.vertices), FeatureMatrix(mesh.vertices))
        result = register(mesh, target, features, quick_config(), graph=graph)
        self.assertLessEqual(vertex_error(result.deformed.vertices, target), 0.01 * diagonal(mesh.vertices))
        self.assertTrue(all(np.isfinite(result.trace.totals())))

    def testFeatureStageOnBend(self):
        "With the bend also given a quarter turn only the feature stage finds the right vertices"
        mesh = grid_mesh(10)
        graph = build_graph(mesh, 50, 4)
        target = about_centre(bent_target(mesh, graph), rotation_z(90))
        features = (FeatureMatrix(mesh.vertices), FeatureMatrix(mesh.vertices))

        both = register(mesh, target, features, quick_config(), graph=graph)
        config = quick_config()
        config.stage1.enabled = False
        coordinates_only = register(mesh, target, features, config, graph=graph)

        wrong = vertex_error(coordinates_only.deformed.vertices, target)
        self.assertGreater(wrong, 0.1)
        self.assertLess(vertex_error(both.deformed.vertices, target), wrong / 2)

    def testFeaturesResolveSymmetry(self):
        "A quarter turn of a square grid is invisible to coordinates alone"
        mesh = grid_mesh(10)
        target = about_centre(mesh.vertices, rotation_z(90))
        features = (FeatureMatrix(mesh.vertices), FeatureMatrix(mesh.vertices))
        graph = build_graph(mesh, 50, 4)

        both = register(mesh, target, features, quick_config(), graph=graph)
        self.assertLessEqual(vertex_error(both.deformed.vertices, target), 0.01 * diagonal(mesh.vertices))

        config = quick_config()
        config.stage1.enabled = False
        coordinates_only = register(mesh, target, features, config, graph=graph)
        self.assertGreater(vertex_error(coordinates_only.deformed.vertices, target), 0.1)


class Pipeline(TempDirMixin, unittest.TestCase):

    def testMapFiles(self):
        save_map([2, 0, 1], self.path("m.txt"), source="a", target="b", stage="stage2")
        with open(self.path("m.txt"), "rt", encoding="utf8") as f:
            self.assertEqual(f.readline().strip(), "# source=a target=b stage=stage2")
        pairs = load_map(self.path("m.txt"))
        self.assertEqual(pairs.tolist(), [[0, 2], [1, 0], [2, 1]])
        self.assertEqual(dense_map(pairs, 3).tolist(), [2, 0, 1])
        with self.assertRaises(dfr.ArgumentError):
            dense_map(pairs[:2], 3)
        with self.assertRaises(dfr.ArgumentError):
            dense_map([[0, 1], [0, 2], [2, 0]], 3)

        for text, line in (("0 1\n1 2 3\n", 2), ("# c\n\n0 x\n", 3), ("0 1\n-1 4\n", 2)):
            with self.assertRaises(dfr.ParseError) as cm:
                load_map(self.write_text("bad.txt", text))
            self.assertEqual(cm.exception.line, line)

    def testCompose(self):
        self.assertEqual(compose_maps([2, 0, 1], [10, 20, 30]).tolist(), [30, 10, 20])
        rng = np.random.default_rng(21)
        a, b, c = rng.integers(0, 8, 8), rng.integers(0, 8, 8), rng.integers(0, 8, 8)
        self.assertEqual(compose_maps(compose_maps(a, b), c).tolist(), compose_maps(a, compose_maps(b, c)).tolist())
        perm = rng.permutation(8)
        self.assertEqual(compose_maps(perm, np.argsort(perm)).tolist(), list(range(8)))
        self.assertEqual(compose_maps(np.argsort(perm), perm).tolist(), list(range(8)))
        with self.assertRaises(dfr.ArgumentError):
            compose_maps([0, 5], [1, 2])

    def testGeodesicError(self):
        strip = grid_mesh(2, 5)
        strip = TriMesh(strip.vertices * [4, 1, 1], strip.faces)
        stats = geodesic_error([1, 2, 3, 4], [0, 1, 2, 3], geodesic_matrix(strip), 4.0)
        self.assertAlmostEqual(stats.mean, 0.5, places=6)
        self.assertAlmostEqual(stats.percent, 50, places=4)
        self.assertEqual((stats.count, stats.excluded), (4, 0))
        with self.assertRaises(dfr.ArgumentError):
            geodesic_error([1], [0], geodesic_matrix(strip), 0)

        mesh = grid_mesh(6)
        bigger = mesh.with_vertices(3 * mesh.vertices)
        rng = np.random.default_rng(22)
        pred, gt = rng.integers(0, 36, 40), rng.integers(0, 36, 40)
        geo = geodesic_matrix(mesh)
        small = geodesic_error(pred, gt, geo, 1.0)
        large = geodesic_error(pred, gt, geodesic_matrix(bigger), 9.0)
        self.assertAlmostEqual(small.mean, large.mean, places=5)
        oracle = sum(float(geo.dense[p, g]) for p, g in zip(pred, gt)) / 40
        self.assertAlmostEqual(small.mean, oracle, places=5)

    def testGeodesicErrorComponents(self):
        mesh = TriMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0], [5, 0, 0], [6, 0, 0], [5, 1, 0]], [[0, 1, 2], [3, 4, 5]])
        geo = geodesic_matrix(mesh)
        with self.assertLogs("dfr.pipeline", logging.WARNING):
            stats = geodesic_error([0, 3], [1, 1], geo, 1.0)
        self.assertEqual((stats.count, stats.excluded), (1, 1))
        self.assertAlmostEqual(stats.mean, 1.0, places=6)
        with self.assertLogs("dfr.pipeline", logging.WARNING):
            stats = geodesic_error([3], [0], geo, 1.0)
        self.assertTrue(math.isnan(stats.mean))

    def testEvaluateSparseTruth(self):
        mesh = grid_mesh(3)
        stats = evaluate_pairs(np.arange(9), [[0, 0], [4, 4], [8, 8]], mesh)
        self.assertEqual(stats.mean, 0.0)
        self.assertEqual(stats.count, 3)
        with self.assertRaises(dfr.ArgumentError):
            evaluate_pairs(np.arange(9), [[9, 0]], mesh)

    def testRotationFiles(self):
        R = rotation_z(35)
        np.savetxt(self.path("r.txt"), R, fmt="%.17g")
        self.assertTrue(np.array_equal(load_rotation(self.path("r.txt")), R))
        with self.assertRaises(dfr.ParseError):
            load_rotation(self.write_text("bad.txt", "1 0 0\n0 1 0\n"))
        self.assertTrue(np.array_equal(check_rotation(R), R))
        for bad in (np.diag([1.0, 1.0, -1.0]), 2 * np.eye(3)):
            with self.assertRaises(dfr.ArgumentError):
                check_rotation(bad)
        with self.assertRaises(dfr.DimensionError):
            check_rotation(np.eye(2))

    def testAlignRotationFile(self):
        mesh = grid_mesh(4)
        R = Rotation.from_euler("xyz", [10, 20, 30], degrees=True).as_matrix()
        posed = mesh.with_vertices(mesh.vertices @ R.T + [1, 2, 3])
        aligned, transform = align_input(posed, "rotation_file", R)
        self.assertClose(aligned.vertices, mesh.vertices - mesh.vertices.mean(axis=0))
        self.assertClose(transform.apply(posed.vertices), aligned.vertices)
        centred, _ = align_input(posed, "none")
        self.assertClose(centred.vertices.mean(axis=0), np.zeros(3))
        with self.assertRaises(dfr.ArgumentError):
            align_input(posed, "rotation_file")
        with self.assertRaises(dfr.ArgumentError):
            align_input(posed, "sideways")

    def testAlignPca(self):
        rng = np.random.default_rng(23)
        points = rng.exponential(size=(500, 3)) * [5, 2, 0.5]
        points = points @ Rotation.random(1, 24).as_matrix()[0].T
        cloud = PointCloud(points)
        aligned, transform = align_input(cloud, "pca")
        self.assertAlmostEqual(np.linalg.det(transform.rotation), 1.0, places=12)
        cov = np.cov(aligned.vertices.T)
        self.assertClose(cov - np.diag(np.diag(cov)), np.zeros((3, 3)), 1e-9)
        self.assertTrue(np.all(np.diff(np.diag(cov)) < 0))
        again, _ = align_input(aligned, "pca")
        self.assertClose(again.vertices, aligned.vertices, 1e-8)

    def assertClose(self, a, b, tol: float = 1e-10):
        self.assertLessEqual(float(np.max(np.abs(np.asarray(a) - np.asarray(b)))), tol)

    def testPrepareTarget(self):
        "Unit area normalization scales mesh targets like the template"
        big = grid_mesh(5).with_vertices(3 * grid_mesh(5).vertices)
        R = rotation_z(30)
        posed = big.with_vertices(big.vertices @ R.T + [1, 2, 3])
        config = quick_config()
        centered, _ = prepare_target(posed, config, rotation=R)
        self.assertAlmostEqual(surface_area(centered), 9.0, places=12)

        config.normalize = "center_unit_area"
        target, transform = prepare_target(posed, config, rotation=R)
        self.assertAlmostEqual(surface_area(target), 1.0, places=12)
        self.assertClose(target.vertices.mean(axis=0), np.zeros(3), 1e-12)
        self.assertClose(transform.apply(posed.vertices), target.vertices, 1e-12)
        self.assertClose(target.vertices, centered.vertices / 3, 1e-12)

        # point clouds take the template's scale
        cloud, _ = prepare_target(PointCloud(posed.vertices), config, rotation=R, template_scale=1 / 3)
        self.assertClose(cloud.vertices, target.vertices, 1e-12)

    def testManifest(self):
        save_shape(grid_mesh(3), self.path("t.off"))
        save_map(np.arange(9), self.path("gt.txt"))
        self.write_text("m.ini", "[run]\ntemplate = t.off\noutput = out\nworkers = 2\n\n"
                        "[target:a]\npath = t.off\ngt = gt.txt\n[target:b]\npath = t.off\n")
        manifest = load_manifest(self.path("m.ini"))
        self.assertEqual(manifest.template, os.path.normpath(self.path("t.off")))
        self.assertEqual(manifest.output, os.path.normpath(self.path("out")))
        self.assertEqual([t.name for t in manifest.targets], ["a", "b"])
        self.assertEqual(manifest.targets[0].gt, os.path.normpath(self.path("gt.txt")))
        self.assertIsNone(manifest.targets[1].gt)
        self.assertEqual((manifest.workers, manifest.evaluate), (2, "all"))

        cases = (
            (dfr.ConfigError, "[run]\ntemplate = t.off\noutput = out\ncolour = red\n[target:a]\npath = t.off\n"),
            (dfr.ConfigError, "[run]\ntemplate = t.off\noutput = out\n"),
            (dfr.ConfigError, "[run]\ntemplate = t.off\noutput = out\n[extra]\npath = t.off\n"),
            (dfr.ConfigError, "[target:a]\npath = t.off\n"),
            (dfr.InputError, "[run]\ntemplate = t.off\noutput = out\n[target:a]\npath = missing.off\n"),
        )
        for exc, text in cases:
            with self.assertRaises(exc, msg=text):
                load_manifest(self.write_text("bad.ini", text))

    def testMatchThroughTemplate(self):
        mesh = grid_mesh(5)
        features = (FeatureMatrix(mesh.vertices), ) * 3
        t_12, r1, r2 = match_through_template(mesh, mesh, mesh, features, quick_config())
        self.assertEqual(t_12.tolist(), list(range(25)))
        self.assertIs(r1.graph, r2.graph)

    ###
    ### Batches
    ###

    def write_batch(self, output: str, targets: dict[str, dict[str, str]], evaluate: str = "all") -> str:
        "Template grid, features, config and manifest in the temp directory"
        template = grid_mesh(6, name="template")
        if not os.path.exists(self.path("template.off")):
            save_shape(template, self.path("template.off"))
            save_features(FeatureMatrix(template.vertices, "template"), self.path("template.dfrf"))
            save_map(np.arange(36), self.path("identity.txt"))
            self.write_text("config.ini", "threads = 1\n[stage1]\nlambda_arap = 0.0001\nmax_iterations = 600\n"
                            "[stage2]\nlambda_arap = 0.0001\nmax_iterations = 300\n")
        lines = [f"[run]\ntemplate = template.off\nfeatures = template.dfrf\noutput = { output }\n"
                 f"config = config.ini\nworkers = 1\nevaluate = { evaluate }\n"]
        for name, keys in targets.items():
            lines.append(f"[target:{ name }]")
            lines += [f"{ k } = { v }" for k, v in keys.items()]
        return self.write_text(f"{ output }.ini", "\n".join(lines) + "\n")

    def rigid_targets(self) -> dict[str, dict[str, str]]:
        template = grid_mesh(6).vertices
        a = template @ rotation_z(20).T + [0.3, -0.2, 0.1]
        b = template @ rotation_z(35).T + [-1, 0.5, 0]
        save_shape(grid_mesh(6).with_vertices(a), self.path("a.off"))
        save_shape(grid_mesh(6).with_vertices(b), self.path("b.off"))
        np.savetxt(self.path("b-rotation.txt"), rotation_z(35), fmt="%.17g")
        for name in ("a", "b"):
            save_features(FeatureMatrix(template, name), self.path(f"{ name }.dfrf"))
        return {
            "a": {"path": "a.off", "features": "a.dfrf", "gt": "identity.txt"},
            "b": {"path": "b.off", "features": "b.dfrf", "gt": "identity.txt", "rotation": "b-rotation.txt"},
        }

    def testBatchSelf(self):
        "The template registered to itself has zero error and writes every file"
        manifest = load_manifest(self.write_batch("out", {"self": {"path": "template.off", "gt": "identity.txt"}}))
        report = run_batch(manifest)
        self.assertEqual(report.targets[0].status, "ok")
        self.assertEqual(report.mean_error, 0.0)
        for name in ("config.ini", "template.dfrd", "template.dfrg", "report.json", "runtime.json"):
            self.assertTrue(os.path.exists(self.path("out", name)), name)
        for name in ("deformed.ply", "map_st.txt", "map_ts.txt", "trace.csv"):
            self.assertTrue(os.path.exists(self.path("out", "self", name)), name)
        with open(self.path("out", "report.json"), "rt", encoding="utf8") as f:
            data = json.load(f)
        self.assertEqual(data["pairs"][0]["error"], 0.0)
        self.assertNotIn("runtime", data)

        # cached graph and geodesics are reused on a second run
        before = os.path.getmtime(self.path("out", "template.dfrd"))
        run_batch(manifest)
        self.assertEqual(os.path.getmtime(self.path("out", "template.dfrd")), before)

    def testBatchCacheFollowsSettings(self):
        "Cached template files are rebuilt when the settings they were built from change"
        save_shape(grid_mesh(6, name="template").with_vertices(3 * grid_mesh(6).vertices), self.path("big.off"))
        manifest = RunManifest(self.path("big.off"), self.path("out"), [])
        config = quick_config()
        config.nodes = 18
        batch = Batch(manifest, config)
        batch.prepare()
        self.assertEqual((batch.graph.H, batch.graph.K), (18, 4))

        config.nodes, config.skin_neighbors = 12, 2
        batch = Batch(manifest, config)
        with self.assertLogs("dfr.pipeline", logging.INFO):
            batch.prepare()
        self.assertEqual((batch.graph.H, batch.graph.K), (12, 2))

        config.normalize = "center_unit_area"
        batch = Batch(manifest, config)
        batch.prepare()
        self.assertEqual(knn.nearest(batch.graph.nodes, batch.template.vertices)[1].max(), 0.0)
        self.assertClose(batch.geodesics.dense, geodesic_matrix(batch.template).dense, 1e-6)

        # unchanged settings reuse the files
        before = os.path.getmtime(self.path("out", "template.dfrd"))
        Batch(manifest, config).prepare()
        self.assertEqual(os.path.getmtime(self.path("out", "template.dfrd")), before)

    def testBatchUnitAreaTargets(self):
        "A target identical to the template stays identical under unit area normalization"
        save_shape(grid_mesh(6, name="template").with_vertices(3 * grid_mesh(6).vertices), self.path("template.off"))
        save_map(np.arange(36), self.path("identity.txt"))
        scan = TargetSpec("scan", self.path("template.off"), gt=self.path("identity.txt"))
        manifest = RunManifest(self.path("template.off"), self.path("out"), [scan], evaluate="template")
        config = quick_config()
        config.normalize = "center_unit_area"
        with self.assertLogs("dfr.registration", logging.WARNING):
            report = run_batch(manifest, config)
        self.assertEqual(report.targets[0].status, "ok")
        self.assertLessEqual(report.targets[0].chamfer, 1e-12)
        self.assertEqual(report.mean_error, 0.0)

    def testBatchRigidTargets(self):
        manifest = load_manifest(self.write_batch("out", self.rigid_targets()))
        report = Batch(manifest).run()
        self.assertEqual([t.status for t in report.targets], ["ok", "ok"])
        self.assertEqual([t.align for t in report.targets], ["none", "rotation_file"])
        self.assertEqual({(p.source, p.target) for p in report.pairs},
                         {("template", "a"), ("template", "b"), ("a", "b"), ("b", "a")})
        self.assertLess(report.mean_error, 2.0)
        for p in report.pairs:
            if p.source == "template":
                self.assertIsNotNone(p.initial_error)
                self.assertEqual(p.initial_error, 0.0)

        t_a = dense_map(load_map(self.path("out", "a", "map_ts.txt")), 36)
        t_b = dense_map(load_map(self.path("out", "b", "map_st.txt")), 36)
        composed = compose_maps(t_a, t_b)
        self.assertGreaterEqual(np.mean(composed == np.arange(36)), 0.95)

    def testBatchDeterministic(self):
        targets = self.rigid_targets()
        run_batch(load_manifest(self.write_batch("one", targets)))
        run_batch(load_manifest(self.write_batch("two", targets)))
        for name in ("report.json", "a/map_st.txt", "a/trace.csv", "b/map_ts.txt", "b/deformed.ply"):
            with open(self.path("one", name), "rb") as f1, open(self.path("two", name), "rb") as f2:
                self.assertEqual(f1.read(), f2.read(), name)

    def testBatchFailedTarget(self):
        self.write_text("broken.off", "OFF\n3 1 0\n0 0 0\n")
        manifest = load_manifest(
            self.write_batch("out", {
                "broken": {"path": "broken.off"},
                "self": {"path": "template.off", "gt": "identity.txt"}
            }, "template"))
        with self.assertLogs("dfr.pipeline", logging.ERROR):
            report = run_batch(manifest)
        status = {t.name: t for t in report.targets}
        self.assertEqual(status["broken"].status, "failed")
        self.assertIn("ParseError", status["broken"].message)
        self.assertEqual(status["self"].status, "ok")
        self.assertEqual([(p.source, p.target) for p in report.pairs], [("template", "self")])

    def testBatchManifestObject(self):
        save_shape(grid_mesh(4), self.path("t.off"))
        manifest = RunManifest(self.path("t.off"), self.path("out"), [], evaluate="none")
        self.assertEqual(Batch(manifest, quick_config()).pairs_to_evaluate(["x"]), [])
        manifest.evaluate = "x:y, y:x"
        self.assertEqual(Batch(manifest, quick_config()).pairs_to_evaluate(["x", "y"]), [("x", "y"), ("y", "x")])
        manifest.evaluate = "x-y"
        with self.assertRaises(dfr.ConfigError):
            Batch(manifest, quick_config()).pairs_to_evaluate(["x", "y"])


class ShellTests(TempDirMixin, unittest.TestCase):

    def setUp(self):
        super().setUp()
        self.stdout = io.StringIO()
        self.stderr = io.StringIO()
        self.grid = self.path("grid.off")
        save_shape(grid_mesh(4, name="grid"), self.grid)

    def run_shell(self, *argv: str) -> int:
        self.stdout.seek(0)
        self.stdout.truncate()
        self.stderr.seek(0)
        self.stderr.truncate()
        return Shell(self.stdout, self.stderr).run(list(argv))

    def testHelpAndVersion(self):
        self.assertEqual(self.run_shell("help"), 0)
        for command in ("register", "match", "eval", "fmap-diagnose", "decimate", "geodesics", "align", "batch"):
            self.assertIn(command, self.stdout.getvalue())
        self.assertEqual(self.run_shell("help", "decimate"), 0)
        self.assertIn("OUTPUT.idx", self.stdout.getvalue())
        self.assertEqual(self.run_shell("--version"), 0)
        self.assertEqual(self.stdout.getvalue(), f"dfr { dfr.__version__ }\n")
        self.assertEqual(self.run_shell("register", "--help"), 0)
        self.assertIn("--stage1-lambda-cd", self.stdout.getvalue() + self.stderr.getvalue())

    def testUsageErrors(self):
        self.assertEqual(self.run_shell("nosuch"), 2)
        self.assertEqual(self.run_shell("--colour", "help"), 2)
        self.assertEqual(self.run_shell("help", "nosuch"), 2)
        self.assertEqual(self.run_shell("decimate", self.grid), 2)
        self.assertEqual(
            self.run_shell("register", self.grid, self.grid, "--output", self.path("o"), "--stage1-lambda-cd", "abc"), 2)
        self.assertIn("ConfigError", self.stderr.getvalue())
        self.assertEqual(self.run_shell("decimate", self.path("missing.off"), "4", self.path("d.off")), 2)

    def testNumericalFailureExitCode(self):
        mesh = self.write_text("oct.off", OCTAHEDRON_OFF)
        save_features(FeatureMatrix(np.ones((6, 1))), self.path("f.dfrf"))
        code = self.run_shell("fmap-diagnose", mesh, mesh, self.path("f.dfrf"), self.path("f.dfrf"), "--k", "4",
                              "--lambda-reg", "0")
        self.assertEqual(code, 3)
        self.assertIn("SingularityError", self.stderr.getvalue())

    def testFmapDiagnose(self):
        mesh = self.write_text("oct.off", OCTAHEDRON_OFF)
        v = load_shape(mesh).vertices
        save_features(FeatureMatrix(np.column_stack([v, np.ones(6), v[:, 0]**2])), self.path("f.dfrf"))
        self.assertEqual(self.run_shell("fmap-diagnose", mesh, mesh, self.path("f.dfrf"), self.path("f.dfrf"), "--k", "4"), 0)
        for row in ("bijectivity", "orthogonality", "contrastive", "combined"):
            self.assertIn(row, self.stdout.getvalue())

    def testRegister(self):
        out = self.path("reg")
        self.assertEqual(self.run_shell("register", self.grid, self.grid, "--output", out, "--threads", "1"), 0)
        for name in ("deformed.ply", "map_st.txt", "map_ts.txt", "trace.csv", "config.ini"):
            self.assertTrue(os.path.exists(os.path.join(out, name)), name)
        self.assertEqual(dense_map(load_map(os.path.join(out, "map_st.txt")), 16).tolist(), list(range(16)))
        self.assertIn("stage2", self.stdout.getvalue())

    def testMatch(self):
        out = self.path("t12.txt")
        self.assertEqual(self.run_shell("match", self.grid, self.grid, self.grid, "--output", out, "--threads", "1"), 0)
        self.assertEqual(dense_map(load_map(out), 16).tolist(), list(range(16)))

    def testMatchRotations(self):
        R = rotation_z(40)
        grid = load_shape(self.grid, "mesh")
        posed = self.path("posed.off")
        save_shape(grid.with_vertices(grid.vertices @ R.T + [2, -1, 0.5]), posed)
        np.savetxt(self.path("r.txt"), R, fmt="%.17g")
        out = self.path("t12.txt")
        code = self.run_shell("match", self.grid, posed, posed, "--output", out, "--threads", "1", "--rotation1",
                              self.path("r.txt"), "--rotation2", self.path("r.txt"))
        self.assertEqual(code, 0)
        self.assertEqual(dense_map(load_map(out), 16).tolist(), list(range(16)))
        self.assertEqual(self.run_shell("match", self.grid, posed, posed, "--output", out, "--rotation1",
                                        self.path("missing.txt")), 2)

    def testEval(self):
        save_map(np.arange(16), self.path("pred.txt"))
        save_map([[0, 0], [5, 5]], self.path("truth.txt"))
        self.assertEqual(self.run_shell("eval", self.path("pred.txt"), self.path("truth.txt"), self.grid), 0)
        self.assertIn("error x100", self.stdout.getvalue())
        save_map([[20, 0]], self.path("none.txt"))
        self.assertEqual(self.run_shell("eval", self.path("pred.txt"), self.path("none.txt"), self.grid), 2)

    def testPreprocessing(self):
        out = self.path("small.off")
        self.assertEqual(self.run_shell("decimate", self.grid, "8", out), 0)
        self.assertGreaterEqual(load_shape(out).n_vertices, 8)
        self.assertTrue(os.path.exists(out + ".idx"))

        self.assertEqual(self.run_shell("geodesics", self.grid, self.path("g.dfrg"), "--threads", "1"), 0)
        self.assertTrue(os.path.exists(self.path("g.dfrg")))

        self.assertEqual(self.run_shell("align", self.grid, self.path("aligned.ply")), 0)
        self.assertEqual(len(self.stdout.getvalue().splitlines()), 3)
        self.assertTrue(np.allclose(load_shape(self.path("aligned.ply")).vertices.mean(axis=0), 0))

    def testBatch(self):
        save_map(np.arange(16), self.path("identity.txt"))
        self.write_text("config.ini", "threads = 1\n")
        manifest = self.write_text(
            "m.ini", "[run]\ntemplate = grid.off\noutput = out\nconfig = config.ini\n"
            "[target:self]\npath = grid.off\ngt = identity.txt\n")
        self.assertEqual(self.run_shell("batch", manifest, "--workers", "1"), 0)
        self.assertIn("mean error x100: 0", self.stdout.getvalue())
        self.assertTrue(os.path.exists(self.path("out", "report.json")))


if __name__ == '__main__':
    unittest.main()
