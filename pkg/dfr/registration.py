# Two stage registration: correspondences found in feature space, then in
# coordinate space, each stage optimizing the deformation graph state
# until the energy settles.

from __future__ import annotations

import contextlib
import logging
import math
import os
import shlex
import subprocess
import tempfile
from dataclasses import dataclass, field
from typing import Literal

import numpy as np
from scipy.spatial import cKDTree

from . import ArgumentError, DimensionError, InputError, NonFiniteEnergyError
from . import knn
from .config import OptimizerConfig, RegistrationConfig, StageConfig
from .defgraph import DeformGraph, GraphState, apply, build_graph
from .dfrtypes import Array, CorrespondenceProvider, FeatureRefresher, IndexArray, Stage
from .energies import Energy, EnergyWeights, e_total
from .fmaps import FeatureMatrix, load_features
from .geometry import GeodesicMatrix, PointCloud, Shape, TriMesh, geodesic_matrix, save_shape, surface_area
from .trace import EnergyTrace, RuntimeAccount, StageRuntime, TraceRow

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CorrespondenceSet:
    "Filtered correspondences at one refresh"
    pairs: IndexArray
    "P x 2 (source vertex, target point), a subset of ``(i, pi_st[i])``"
    pi_st: IndexArray
    "Nearest target point for each source vertex"
    pi_ts: IndexArray
    "Nearest source vertex for each target point"
    provenance: Literal["feature", "coordinate"]
    iteration: int
    "Iteration within the stage the set was computed at"
    filtered: bool = True
    "False when the filter rejected everything and all pairs were kept"

    def __len__(self) -> int:
        return len(self.pairs)


def _points(shape: Shape | Array) -> Array:
    if isinstance(shape, (TriMesh, PointCloud)):
        return shape.vertices
    return np.asarray(shape, dtype=np.float64)


def _feature_values(features: FeatureMatrix | Array | None) -> Array | None:
    if features is None or isinstance(features, np.ndarray):
        return features
    return features.values


def update_correspondences(deformed: Array,
                           target: Shape | Array,
                           features_s: FeatureMatrix | Array | None,
                           features_t: FeatureMatrix | Array | None,
                           stage: Stage) -> tuple[IndexArray, IndexArray]:
    """Hard nearest neighbour maps in both directions

    ``stage1`` searches feature space and needs both feature matrices,
    ``stage2`` searches coordinates and ignores them.  Ties go to the
    smaller index.

    :returns: (pi_st, pi_ts)
    """
    target = _points(target)
    deformed = np.asarray(deformed, dtype=np.float64)
    if stage == "stage2":
        return knn.nearest(deformed, target)[0], knn.nearest(target, deformed)[0]
    if stage != "stage1":
        raise ArgumentError(f"unknown stage '{ stage }'")
    fs, ft = _feature_values(features_s), _feature_values(features_t)
    if fs is None or ft is None:
        raise ArgumentError("stage1 correspondences need source and target features")
    if fs.shape[0] != deformed.shape[0]:
        raise DimensionError(f"source features have { fs.shape[0] } rows, source has { deformed.shape[0] } vertices")
    if ft.shape[0] != target.shape[0]:
        raise DimensionError(f"target features have { ft.shape[0] } rows, target has { target.shape[0] } points")
    if fs.shape[1] != ft.shape[1]:
        raise DimensionError(f"feature dimensions differ: { fs.shape[1] } and { ft.shape[1] }")
    return knn.nearest(fs, ft)[0], knn.nearest(ft, fs)[0]


def bijectivity_filter(pi_st: IndexArray,
                       pi_ts: IndexArray,
                       geodesics: GeodesicMatrix | None,
                       tau_abs: float,
                       *,
                       provenance: Literal["feature", "coordinate"] = "coordinate",
                       iteration: int = 0) -> CorrespondenceSet:
    """Keeps ``(i, pi_st[i])`` when the round trip ``pi_ts[pi_st[i]]`` lands
    within `tau_abs` geodesic distance of i

    Distances come from the rest pose geodesic matrix.  An infinite
    threshold keeps every pair and needs no geodesics.
    """
    pi_st = np.asarray(pi_st, dtype=np.intp)
    pi_ts = np.asarray(pi_ts, dtype=np.intp)
    if not tau_abs > 0:
        raise ArgumentError(f"filter threshold must be > 0, got { tau_abs }")
    if len(pi_st) and (pi_st.min() < 0 or pi_st.max() >= len(pi_ts)):
        raise ArgumentError("pi_st refers to target points outside pi_ts")
    source = np.arange(len(pi_st))
    if math.isinf(tau_abs):
        keep = np.ones(len(pi_st), dtype=bool)
    else:
        if geodesics is None:
            raise ArgumentError("a finite filter threshold needs the source geodesic matrix")
        if geodesics.n != len(pi_st):
            raise DimensionError(f"geodesic matrix covers { geodesics.n } vertices, map has { len(pi_st) }")
        keep = geodesics.lookup(source, pi_ts[pi_st]) <= tau_abs
    pairs = np.stack([source[keep], pi_st[keep]], axis=1)
    return CorrespondenceSet(pairs, pi_st, pi_ts, provenance, iteration)


def filter_threshold(source: TriMesh, config: RegistrationConfig) -> float:
    "Absolute filter threshold for a source mesh, infinite when filtering is off"
    if not config.filter.enabled:
        return math.inf
    area = surface_area(source)
    if area <= 0:
        raise ArgumentError(f"source mesh '{ source.name }' has zero area so the filter threshold is zero")
    return config.filter.tau * math.sqrt(area)


class FeatureCommand:
    """Re-extracts source features by running an external program

    The deformed source is written as a binary PLY file and the command is
    run with ``{input}`` and ``{output}`` in its arguments replaced by that
    file and the feature file it must write.

    :param command: Command line, split with :func:`shlex.split`
    :param mesh: Source mesh supplying the faces
    """

    def __init__(self, command: str, mesh: TriMesh):
        self.command = command
        self.mesh = mesh

    def __call__(self, deformed: Array) -> Array:
        with tempfile.TemporaryDirectory(prefix="dfr-") as tmp:
            infile = os.path.join(tmp, "deformed.ply")
            outfile = os.path.join(tmp, "features.dfrf")
            save_shape(self.mesh.with_vertices(deformed), infile, binary=True)
            args = [a.format(input=infile, output=outfile) for a in shlex.split(self.command)]
            log.debug("Running feature command %s", args)
            try:
                proc = subprocess.run(args, capture_output=True, text=True)
            except OSError as exc:
                raise InputError(f"can't run feature command { args[0] }: { exc }") from exc
            if proc.returncode != 0:
                raise InputError(f"feature command exited with { proc.returncode }: { proc.stderr.strip() }")
            return load_features(outfile, self.mesh.name, points=len(deformed)).values


class CorrespondenceUpdater:
    """The usual correspondence provider: nearest neighbours then filtering

    :param update: When false the first set computed is returned for every
       later call
    :param refresher: Produces fresh source features from deformed vertices
       in stage1.  Without one the rest pose features are reused, which is
       valid because vertex identity does not change under deformation.
    """

    def __init__(self,
                 target: Array,
                 stage: Stage,
                 geodesics: GeodesicMatrix | None,
                 tau_abs: float,
                 *,
                 features_s: FeatureMatrix | Array | None = None,
                 features_t: FeatureMatrix | Array | None = None,
                 refresher: FeatureRefresher | None = None,
                 update: bool = True):
        self.target = target
        self.stage = stage
        self.geodesics = geodesics
        self.tau_abs = tau_abs
        self.features_s = _feature_values(features_s)
        self.features_t = _feature_values(features_t)
        self.refresher = refresher
        self.update = update
        self.account: RuntimeAccount | None = None
        self.last: CorrespondenceSet | None = None

    def _section(self, name: str):
        return self.account.section(name) if self.account else contextlib.nullcontext()

    def __call__(self, deformed: Array, iteration: int) -> CorrespondenceSet:
        if not self.update and self.last is not None:
            return self.last
        with self._section("correspondence"):
            fs = self.features_s
            if self.stage == "stage1" and self.refresher is not None and iteration > 0:
                fs = self.refresher(deformed)
            pi_st, pi_ts = update_correspondences(deformed, self.target, fs, self.features_t, self.stage)
        provenance = "feature" if self.stage == "stage1" else "coordinate"
        with self._section("filter"):
            corr = bijectivity_filter(pi_st, pi_ts, self.geodesics, self.tau_abs, provenance=provenance,
                                      iteration=iteration)
        if len(corr) == 0:
            log.warning("Filter rejected every %s correspondence at iteration %d, using them all unfiltered",
                        self.stage,
                        iteration,
                        extra={"dfr_stage": self.stage, "dfr_iteration": iteration})
            corr = CorrespondenceSet(np.stack([np.arange(len(pi_st)), pi_st], axis=1), pi_st, pi_ts, provenance,
                                     iteration, filtered=False)
        self.last = corr
        return corr


class Adam:
    """Adaptive moment estimation over the 6H state parameters

    :param settings: Step size and moment decay rates
    :param H: Node count
    :param translation_scale: Translations take steps this many times
       larger than rotations
    """

    def __init__(self, settings: OptimizerConfig, H: int, translation_scale: float = 1.0):
        self.settings = settings
        self.lr = np.concatenate([np.full(3 * H, settings.learning_rate),
                                  np.full(3 * H, settings.learning_rate * translation_scale)])
        self.m = np.zeros(6 * H)
        self.v = np.zeros(6 * H)
        self.t = 0
        self.scale = 1.0
        "Multiplier on the step, halved by backtracking"

    def direction(self, grad: Array) -> Array:
        "Updates the moments with `grad` and returns the unscaled step"
        s = self.settings
        self.t += 1
        self.m = s.beta1 * self.m + (1 - s.beta1) * grad
        self.v = s.beta2 * self.v + (1 - s.beta2) * grad**2
        m_hat = self.m / (1 - s.beta1**self.t)
        v_hat = self.v / (1 - s.beta2**self.t)
        return self.lr * m_hat / (np.sqrt(v_hat) + s.epsilon)


@dataclass
class StageResult:
    "Outcome of :func:`optimize_stage`"
    state: GraphState
    trace: EnergyTrace
    converged: bool
    "False when the iteration cap was reached first"
    iterations: int
    correspondences: CorrespondenceSet | None
    runtime: StageRuntime
    energy: Energy | None = None
    "Energy at the returned state"


def optimize_stage(state: GraphState,
                   graph: DeformGraph,
                   rest: Array,
                   target: Array,
                   corr_provider: CorrespondenceProvider,
                   weights: EnergyWeights,
                   eps: float,
                   patience: int,
                   interval: int,
                   *,
                   max_iterations: int = 5000,
                   optimizer: OptimizerConfig | None = None,
                   stage: Stage = "stage2",
                   translation_scale: float = 1.0,
                   subsample: int | None = None,
                   first_iteration: int = 0) -> StageResult:
    """Minimizes the total energy for one stage

    Each iteration refreshes correspondences when due, evaluates the energy
    and its gradient, and takes one optimizer step.  The stage has
    converged once more than `patience` consecutive iterations change the
    energy by less than `eps`.

    :param corr_provider: Called with the deformed vertices every
       `interval` iterations
    :param first_iteration: Number of the first iteration in the trace
    :raises NonFiniteEnergyError: with the offending state and the trace so far
    """
    if interval < 1:
        raise ArgumentError(f"update interval must be >= 1, got { interval }")
    optimizer = optimizer or OptimizerConfig()
    target = np.asarray(target, dtype=np.float64)
    rest = np.asarray(rest, dtype=np.float64)
    tree = cKDTree(target)
    account = RuntimeAccount(stage)
    if hasattr(corr_provider, "account"):
        corr_provider.account = account
    adam = Adam(optimizer, graph.H, translation_scale)
    trace = EnergyTrace()

    def evaluate(s: GraphState, pairs: IndexArray) -> Energy:
        with account.section("energy"):
            return e_total(graph, s, rest, target, pairs, weights, target_tree=tree, subsample=subsample)

    corr: CorrespondenceSet | None = None
    energy: Energy | None = None
    previous: float | None = None
    count = 0
    converged = False
    for iteration in range(max_iterations):
        if iteration % interval == 0:
            deformed = energy.deformed if energy is not None else apply(graph, state, rest)
            if hasattr(corr_provider, "account"):
                corr = corr_provider(deformed, iteration)
            else:
                with account.section("correspondence"):
                    corr = corr_provider(deformed, iteration)
            energy = evaluate(state, corr.pairs)
            adam.scale = 1.0

        if not energy.is_finite():
            raise NonFiniteEnergyError(f"{ stage } energy is not finite at iteration { iteration }",
                                       state=state,
                                       trace=trace,
                                       iteration=first_iteration + iteration)
        trace.append(
            TraceRow(first_iteration + iteration, stage, energy.total, energy.e_cd, energy.e_corr, energy.e_arap,
                     len(corr)))

        if previous is not None and abs(energy.total - previous) < eps:
            count += 1
        else:
            count = 0
        previous = energy.total
        if count > patience:
            converged = True
            break

        with account.section("step"):
            step = adam.direction(np.concatenate([energy.grad_theta.ravel(), energy.grad_delta.ravel()]))
            x = state.vector()
        attempts = optimizer.max_backtracks + 1 if optimizer.monotone else 1
        for attempt in range(attempts):
            candidate = GraphState.from_vector(x - adam.scale * step).wrapped()
            trial = evaluate(candidate, corr.pairs)
            if not optimizer.monotone or (trial.is_finite() and trial.total <= energy.total):
                state, energy = candidate, trial
                if attempt == 0:
                    adam.scale = min(1.0, 2 * adam.scale)
                break
            adam.scale /= 2

    if not converged:
        log.info("%s stopped at the iteration cap of %d", stage, max_iterations, extra={"dfr_stage": stage})
    return StageResult(state, trace, converged, len(trace), corr, account.finish(len(trace)), energy)


@dataclass
class RegistrationResult:
    "Everything :func:`register` produces"
    state: GraphState
    deformed: TriMesh
    "Source mesh moved onto the target"
    pi_st: IndexArray
    "Final map from source vertices to target points"
    pi_ts: IndexArray
    "Final map from target points to source vertices"
    trace: EnergyTrace
    runtimes: list[StageRuntime]
    graph: DeformGraph
    stages: list[StageResult] = field(default_factory=list)
    initial_pi_st: IndexArray | None = None
    "Feature space nearest neighbour map before any deformation, when features were given"


def register(source: TriMesh,
             target: Shape | Array,
             features: tuple[FeatureMatrix | Array, FeatureMatrix | Array] | None = None,
             config: RegistrationConfig | None = None,
             *,
             graph: DeformGraph | None = None,
             geodesics: GeodesicMatrix | None = None,
             refresher: FeatureRefresher | None = None) -> RegistrationResult:
    """Deforms `source` onto `target`

    Stage one matches in feature space, stage two in coordinates.  Without
    features stage one is skipped with a warning.  The final maps are
    nearest neighbours between the deformed source and the target.

    :param features: (source features, target features)
    :param graph: A prebuilt graph for `source`, shared across a batch
    :param geodesics: The source geodesic matrix, shared across a batch
    :param refresher: Overrides the configured feature refresh
    """
    config = (config or RegistrationConfig()).validate()
    target_points = _points(target)
    rest = source.vertices
    if graph is None:
        graph = build_graph(source, config.nodes or None, config.skin_neighbors)
    if graph.N != source.n_vertices:
        raise DimensionError(f"graph skins { graph.N } vertices, source has { source.n_vertices }")

    tau_abs = filter_threshold(source, config)
    if geodesics is None and not math.isinf(tau_abs):
        geodesics = geodesic_matrix(source, mode=config.geodesics, threads=config.threads)
    area = surface_area(source)
    translation_scale = math.sqrt(area) if area > 0 else float(np.ptp(rest, axis=0).max() or 1.0)

    state = GraphState.identity(graph.H)
    trace = EnergyTrace()
    stages: list[StageResult] = []
    initial_pi_st = None
    fs = ft = None

    plan: list[tuple[Stage, StageConfig]] = []
    if config.stage1.enabled:
        if features is None:
            log.warning("No features for '%s', skipping stage1 and registering on coordinates only",
                        source.name,
                        extra={"dfr_mesh": source.name})
        else:
            plan.append(("stage1", config.stage1))
    if config.stage2.enabled:
        plan.append(("stage2", config.stage2))

    if features is not None:
        fs, ft = (_feature_values(f) for f in features)
        initial_pi_st, _ = update_correspondences(rest, target_points, fs, ft, "stage1")
        if refresher is None and config.feature_refresh == "command":
            refresher = FeatureCommand(config.feature_command, source)

    for name, stage_config in plan:
        provider = CorrespondenceUpdater(target_points,
                                         name,
                                         geodesics,
                                         tau_abs,
                                         features_s=fs if name == "stage1" else None,
                                         features_t=ft if name == "stage1" else None,
                                         refresher=refresher if name == "stage1" else None,
                                         update=config.update_correspondences)
        result = optimize_stage(state,
                                graph,
                                rest,
                                target_points,
                                provider,
                                stage_config.weights(),
                                stage_config.eps,
                                config.patience,
                                config.update_interval,
                                max_iterations=stage_config.max_iterations,
                                optimizer=config.optimizer,
                                stage=name,
                                translation_scale=translation_scale,
                                subsample=config.chamfer_subsample or None,
                                first_iteration=len(trace))
        state = result.state
        trace.extend(result.trace)
        stages.append(result)
        log.info("%s finished after %d iterations",
                 name,
                 result.iterations,
                 extra={"dfr_stage": name, "dfr_converged": result.converged, "dfr_seconds": result.runtime.seconds})

    deformed = apply(graph, state, rest)
    pi_st, pi_ts = update_correspondences(deformed, target_points, None, None, "stage2")
    return RegistrationResult(state, source.with_vertices(deformed), pi_st, pi_ts, trace, [s.runtime for s in stages],
                              graph, stages, initial_pi_st)
