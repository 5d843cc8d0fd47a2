#!/usr/bin/env python3

# This code uses Python's optional typing annotations.  You can
# ignore them and do not need to use them.  If you do use them
# then you must include this future annotations line first.
from __future__ import annotations

import logging
import os
import tempfile

import numpy as np
from scipy.spatial.transform import Rotation

import dfr
import dfr.ext
from dfr.config import RegistrationConfig, load_config, to_text
from dfr.defgraph import GraphState, apply, build_graph, qslim_decimate
from dfr.fmaps import FeatureMatrix, diagnose, load_features, save_features
from dfr.geometry import geodesic_matrix, grid_mesh, load_shape, normalize_shape, save_shape
from dfr.pipeline import align_input, compose_maps, evaluate_pairs, load_manifest, run_batch, save_map
from dfr.registration import register
from dfr.spectral import mesh_basis

### version_check: Checking the version
# The package version is a plain string

print("dfr version", dfr.__version__)

workdir = tempfile.mkdtemp(prefix="dfr-example-")

### logging: Logging
# The library only logs, to the ``dfr`` logger and its children.  Use
# :meth:`dfr.ext.configure_logging` to see the messages, optionally
# with the structured values attached to each one.

dfr.ext.configure_logging(logging.INFO, show_extra=True)

### shapes: Loading and saving shapes
# OFF, OBJ and PLY files are read with :meth:`dfr.geometry.load_shape`.
# Ask for a ``mesh`` when faces are needed, or ``auto`` to accept a
# point cloud too.

template = grid_mesh(12, name="template")
save_shape(template, os.path.join(workdir, "template.off"))
template = load_shape(os.path.join(workdir, "template.off"), "mesh")
print(template.n_vertices, "vertices", len(template.faces), "faces")

# Templates are centered (or scaled to unit area) before registering
template, transform = normalize_shape(template, "center")

### target: Making a target
# A deformation graph is a set of nodes each carrying a rotation and a
# translation.  Applying a state to the rest pose gives a deformed
# copy, which makes a target with known correspondence.

graph = build_graph(template, 40)
theta = np.zeros((graph.H, 3))
theta[:, 1] = 0.5 * graph.nodes[:, 0]
state = GraphState(theta, np.tile([0.1, 0.0, 0.2], (graph.H, 1)))
target = template.with_vertices(apply(graph, state, template.vertices), name="scan")

# Targets arrive in any pose.  Alignment centers them and undoes a
# known rotation, or uses principal axes.
R = Rotation.from_euler("z", 40, degrees=True).as_matrix()
posed = target.with_vertices(target.vertices @ R.T + [3, 1, 0])
target, _ = align_input(posed, "rotation_file", R)

### features: Per vertex features
# Stage one matches in feature space.  Any per vertex embedding works,
# typically the output of a learned network saved as a feature file.

features_t = FeatureMatrix(template.vertices, "template")
features_s = FeatureMatrix(template.vertices, "scan")
save_features(features_t, os.path.join(workdir, "template.dfrf"))
features_t = load_features(os.path.join(workdir, "template.dfrf"), points=template.n_vertices)

### register: Registering
# :meth:`dfr.registration.register` runs the feature stage then the
# coordinate stage and returns the deformed template with nearest
# neighbour maps in both directions.

config = RegistrationConfig(threads=1)
config.stage1.lambda_arap = config.stage2.lambda_arap = 1e-3
result = register(template, target, (features_t, features_s), config, graph=graph)
error = np.linalg.norm(result.deformed.vertices - target.vertices, axis=1).mean()
print(f"mean vertex error { error:.4f} after { len(result.trace) } iterations")
result.trace.save(os.path.join(workdir, "trace.csv"))

### config: Settings files
# Settings are INI files.  Top level keys come first, then one section
# per stage.  Unknown keys are errors.

with open(os.path.join(workdir, "config.ini"), "wt", encoding="utf8") as f:
    f.write(to_text(config))
config = load_config(os.path.join(workdir, "config.ini"))

### evaluate: Evaluating a map
# Errors are geodesic distances on the target divided by the square
# root of its area.  Ground truth can be sparse.

truth = np.stack([np.arange(0, template.n_vertices, 7)] * 2, axis=1)
stats = evaluate_pairs(result.pi_st, truth, target)
print(f"geodesic error x100 { stats.percent:.3f} over { stats.count } points")

# Maps compose, so two shapes registered to one template can be
# matched to each other
print(compose_maps(result.pi_ts, result.pi_st)[:10])

### fmaps: Diagnosing features with functional maps
# The losses used to train feature extractors can score a pair of
# feature matrices.

basis = mesh_basis(template, 20)
diagnosis = diagnose(features_t, features_s, basis, basis)
print(f"bijectivity { diagnosis.losses.e_bij:.3g} orthogonality { diagnosis.losses.e_ortho:.3g}")

### decimate: Decimating
# Quadric error decimation keeps a subset of the input vertices, which
# is how graph nodes are chosen.

decimation = qslim_decimate(template, 30)
print(len(decimation.survivors), "vertices kept")

### geodesics: Geodesic distances
# All pairs geodesics are computed with Dijkstra on the edge graph and
# stored as float32.

geo = geodesic_matrix(template, threads=1)
print("diameter", float(geo.dense.max()))

### batch: Running a batch
# A manifest names a template and targets, and the output directory
# receives per target results plus a report.

save_shape(target, os.path.join(workdir, "scan.ply"))
save_features(features_s, os.path.join(workdir, "scan.dfrf"))
save_map(np.arange(template.n_vertices), os.path.join(workdir, "gt.txt"))
with open(os.path.join(workdir, "manifest.ini"), "wt", encoding="utf8") as f:
    f.write("[run]\ntemplate = template.off\nfeatures = template.dfrf\noutput = out\n"
            "[target:scan]\npath = scan.ply\nfeatures = scan.dfrf\ngt = gt.txt\n")
report = run_batch(load_manifest(os.path.join(workdir, "manifest.ini")), config)
print(report.to_json())
