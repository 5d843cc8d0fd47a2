#!/usr/bin/env python3
#
# Times each part of a registration on a synthetic bent grid so changes
# to the numerics can be compared.

from __future__ import annotations

import argparse
import sys
import time

import numpy as np

import dfr
import dfr.ext
from dfr.config import RegistrationConfig
from dfr.defgraph import DeformGraph, GraphState, apply, build_graph
from dfr.fmaps import FeatureMatrix
from dfr.geometry import TriMesh, geodesic_matrix, grid_mesh
from dfr.registration import register
from dfr.spectral import mesh_basis
from dfr.trace import print_runtime


def bend_state(graph: DeformGraph, amount: float = 0.4) -> GraphState:
    """A smooth bend of a grid around the y axis plus a shift

    Node rotations grow linearly along x and translations lift the ends.
    """
    gx = graph.nodes[:, 0] - 0.5
    theta = np.zeros((graph.H, 3))
    theta[:, 1] = amount * gx
    delta = np.tile([0.25, 0.0, 0.1], (graph.H, 1))
    delta[:, 2] += 0.5 * amount * gx**2
    return GraphState(theta, delta)


def bent_target(mesh: TriMesh, graph: DeformGraph, amount: float = 0.4) -> np.ndarray:
    return apply(graph, bend_state(graph, amount), mesh.vertices)


def timed(what: str, func, *args, **kwargs):
    start = time.perf_counter()
    result = func(*args, **kwargs)
    timings.append([what, time.perf_counter() - start])
    return result


timings: list[list] = []


def doit():
    mesh = grid_mesh(options.size, name=f"grid{ options.size }")
    print(f"dfr { dfr.__version__ } numpy { np.__version__ }")
    print(f"Grid { options.size } x { options.size }: { mesh.n_vertices } vertices, { len(mesh.faces) } faces\n")

    for _ in range(options.repeat):
        timings.clear()
        if options.spectral:
            timed("eigenbasis", mesh_basis, mesh, min(options.k, mesh.n_vertices - 2))
        geo = timed("geodesics", geodesic_matrix, mesh, mode="dense", threads=options.threads)
        graph = timed("graph", build_graph, mesh, options.nodes or None)
        target = bent_target(mesh, graph, options.bend)

        config = RegistrationConfig(threads=options.threads, update_interval=options.interval)
        config.stage1.enabled = options.stage in ("both", "stage1")
        config.stage2.enabled = options.stage in ("both", "stage2")
        config.stage1.max_iterations = config.stage2.max_iterations = options.iterations
        features = (FeatureMatrix(mesh.vertices, mesh.name), FeatureMatrix(mesh.vertices, "target"))
        result = timed("register", register, mesh, target, features, config, graph=graph, geodesics=geo)

        print_runtime(result.runtimes)
        sys.stdout.write(dfr.ext.format_table(["step", "seconds"], timings))
        error = np.linalg.norm(result.deformed.vertices - target, axis=1).mean()
        print(f"mean vertex error { error:.3g}\n")


parser = argparse.ArgumentParser(prog="dfr.speedtest", description="Times registration of a synthetically bent grid")
parser.add_argument("--size", type=int, default=20, help="Grid vertices along each side [%(default)s]")
parser.add_argument("--nodes", type=int, default=0, help="Deformation graph nodes, 0 for half the vertices [%(default)s]")
parser.add_argument("--iterations", type=int, default=500, help="Iteration cap per stage [%(default)s]")
parser.add_argument("--interval", type=int, default=100, help="Iterations between correspondence updates [%(default)s]")
parser.add_argument("--stage",
                    choices=("both", "stage1", "stage2"),
                    default="both",
                    help="Which stages to run [%(default)s]")
parser.add_argument("--bend", type=float, default=0.4, help="Bend amount in radians per unit length [%(default)s]")
parser.add_argument("--threads", type=int, default=0, help="Worker threads, 0 for all cores [%(default)s]")
parser.add_argument("--repeat", type=int, default=1, help="How many times to run everything [%(default)s]")
parser.add_argument("--spectral", action="store_true", help="Also time the Laplacian eigenbasis")
parser.add_argument("--k", type=int, default=50, help="Eigenfunctions for --spectral [%(default)s]")

if __name__ == "__main__":
    options = parser.parse_args()

    if options.size < 3:
        parser.error("--size must be at least 3")
    if options.iterations < 1 or options.repeat < 1:
        parser.error("--iterations and --repeat must be positive")

    doit()
