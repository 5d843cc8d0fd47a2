# Batch orchestration around a template hub: alignment, registration of
# the template to every target, map composition and evaluation.

from __future__ import annotations

import concurrent.futures
import configparser
import hashlib
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import ArgumentError, ConfigError, DimensionError, Error, InputError, ParseError
from .config import RegistrationConfig, load_config, to_text, worker_count
from .defgraph import DeformGraph, build_graph
from .dfrtypes import AlignMode, Array, IndexArray, PathLike
from .energies import e_cd
from .fmaps import FeatureMatrix, load_features
from .geometry import (GeodesicMatrix, Shape, SimilarityTransform, TriMesh, geodesic_matrix, load_shape,
                       normalize_shape, reshape, save_shape, surface_area)
from .registration import RegistrationResult, register

log = logging.getLogger(__name__)

###
### Maps
###


def load_map(path: PathLike) -> IndexArray:
    """Reads ``i j`` lines, 0-based, ignoring ``#`` comments

    :returns: P x 2 pairs in file order
    """
    pairs = []
    with open(path, "rt", encoding="utf8") as f:
        for number, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 2:
                raise ParseError(f"expected 'i j', found { line!r}", path=str(path), line=number)
            try:
                i, j = int(parts[0]), int(parts[1])
            except ValueError:
                raise ParseError(f"malformed index in { line!r}", path=str(path), line=number) from None
            if i < 0 or j < 0:
                raise ParseError(f"negative index in { line!r}", path=str(path), line=number)
            pairs.append((i, j))
    return np.array(pairs, dtype=np.intp).reshape(-1, 2)


def save_map(mapping: IndexArray, path: PathLike, *, source: str = "", target: str = "", stage: str = "final") -> None:
    """Writes a map as ``i j`` lines after a ``# source=.. target=.. stage=..`` header

    :param mapping: Either a vector where entry i is the image of i, or
       P x 2 pairs
    """
    mapping = np.asarray(mapping, dtype=np.intp)
    if mapping.ndim == 1:
        mapping = np.stack([np.arange(len(mapping)), mapping], axis=1)
    with open(path, "wt", encoding="utf8") as f:
        f.write(f"# source={ source } target={ target } stage={ stage }\n")
        np.savetxt(f, mapping, fmt="%d")


def dense_map(pairs: IndexArray, n: int) -> IndexArray:
    "Converts pairs covering every source index 0..n-1 exactly once into a vector"
    pairs = np.asarray(pairs, dtype=np.intp).reshape(-1, 2)
    out = np.full(n, -1, dtype=np.intp)
    if len(pairs) and (pairs[:, 0].max() >= n):
        raise ArgumentError(f"map has source index { pairs[:, 0].max() } beyond { n - 1 }")
    out[pairs[:, 0]] = pairs[:, 1]
    if np.any(out < 0) or len(pairs) != n:
        raise ArgumentError(f"map does not cover each of the { n } source indices exactly once")
    return out


def compose_maps(t_1s: IndexArray, t_s2: IndexArray) -> IndexArray:
    "``t_12[i] = t_s2[t_1s[i]]``"
    t_1s = np.asarray(t_1s, dtype=np.intp)
    t_s2 = np.asarray(t_s2, dtype=np.intp)
    if len(t_1s) and (t_1s.min() < 0 or t_1s.max() >= len(t_s2)):
        raise ArgumentError(f"first map reaches index { t_1s.max() } but the second only covers { len(t_s2) }")
    return t_s2[t_1s]


@dataclass
class ErrorStats:
    "Result of :func:`geodesic_error`"
    mean: float
    "Mean geodesic distance divided by the square root of the area, nan when nothing was measured"
    count: int
    "Points measured"
    excluded: int
    "Points skipped because prediction and truth lie in different components"

    @property
    def percent(self) -> float:
        "The value usually tabulated, :attr:`mean` times 100"
        return 100 * self.mean


def geodesic_error(pred: IndexArray, gt: IndexArray, geo_target: GeodesicMatrix, area: float) -> ErrorStats:
    """Mean of ``geo[pred[i], gt[i]] / sqrt(area)``

    Pairs at the infinite distance between components are left out and
    counted in :attr:`ErrorStats.excluded`.
    """
    pred = np.asarray(pred, dtype=np.intp)
    gt = np.asarray(gt, dtype=np.intp)
    if pred.shape != gt.shape:
        raise DimensionError(f"prediction { pred.shape } and ground truth { gt.shape } differ")
    if area <= 0:
        raise ArgumentError(f"area must be > 0, got { area }")
    if len(pred) and max(pred.max(), gt.max()) >= geo_target.n:
        raise ArgumentError(f"map index beyond the { geo_target.n } target vertices")
    d = geo_target.lookup(pred, gt)
    finite = np.isfinite(d)
    excluded = int((~finite).sum())
    if excluded:
        log.warning("Excluded %d points whose prediction is in another component",
                    excluded,
                    extra={"dfr_excluded": excluded, "dfr_mesh": geo_target.mesh_name})
    count = int(finite.sum())
    mean = float(np.sum(d[finite]) / math.sqrt(area) / count) if count else math.nan
    return ErrorStats(mean, count, excluded)


def evaluate_pairs(pred: IndexArray, gt_pairs: IndexArray, target: TriMesh,
                   geo: GeodesicMatrix | None = None) -> ErrorStats:
    """Geodesic error of a dense prediction on the sources listed in `gt_pairs`

    Ground truth may be sparse landmarks, only listed source indices count.
    """
    gt_pairs = np.asarray(gt_pairs, dtype=np.intp).reshape(-1, 2)
    pred = np.asarray(pred, dtype=np.intp)
    if len(gt_pairs) and gt_pairs[:, 0].max() >= len(pred):
        raise ArgumentError(f"ground truth refers to source { gt_pairs[:, 0].max() } beyond the map's { len(pred) }")
    geo = geo or geodesic_matrix(target)
    return geodesic_error(pred[gt_pairs[:, 0]], gt_pairs[:, 1], geo, surface_area(target))


###
### Alignment
###


def load_rotation(path: PathLike) -> Array:
    "Reads a 3 x 3 matrix as three lines of three numbers"
    try:
        R = np.loadtxt(path, dtype=np.float64, comments="#", ndmin=2)
    except ValueError as exc:
        raise ParseError(f"can't read rotation: { exc }", path=str(path)) from None
    if R.shape != (3, 3):
        raise ParseError(f"rotation must be 3 x 3, found { R.shape }", path=str(path))
    return R


def check_rotation(R: Array, tolerance: float = 1e-6) -> Array:
    "Raises :exc:`ArgumentError` unless `R` is a proper rotation"
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3):
        raise DimensionError(f"rotation must be 3 x 3, not { R.shape }")
    if np.abs(R.T @ R - np.eye(3)).max() > tolerance or abs(np.linalg.det(R) - 1) > tolerance:
        raise ArgumentError("rotation matrix is not orthogonal with determinant +1")
    return R


def pca_axes(points: Array) -> Array:
    """Principal axes as columns, largest variance first

    Each axis points so the third central moment of the coordinates along it
    is non-negative.  When that gives a reflection the axis with the
    smallest moment magnitude is reversed.
    """
    X = points - points.mean(axis=0)
    _, evecs = np.linalg.eigh(X.T @ X / len(X))
    axes = evecs[:, ::-1]
    m3 = np.mean((X @ axes)**3, axis=0)
    signs = np.where(m3 < 0, -1.0, 1.0)
    if np.linalg.det(axes * signs) < 0:
        k = int(np.argmin(np.abs(m3)))
        signs[k] = -signs[k]
    return axes * signs


def align_input(shape: Shape, mode: AlignMode = "none", rotation: Array | None = None) -> tuple[Shape, SimilarityTransform]:
    """Centers a shape and brings it to the canonical orientation

    :param mode: ``rotation_file`` applies the transpose of `rotation`,
       ``pca`` puts principal axes on the coordinate axes, ``none`` only
       centers
    :returns: (aligned shape, transform applied)
    """
    pts = shape.vertices
    c = pts.mean(axis=0)
    if mode == "none":
        R = np.eye(3)
    elif mode == "rotation_file":
        if rotation is None:
            raise ArgumentError("rotation_file alignment needs a rotation")
        R = check_rotation(rotation).T
    elif mode == "pca":
        R = pca_axes(pts).T
    else:
        raise ArgumentError(f"unknown alignment mode '{ mode }'")
    transform = SimilarityTransform(1.0, R, -(R @ c))
    return reshape(shape, transform.apply(pts)), transform


def prepare_target(shape: Shape,
                   config: RegistrationConfig,
                   mode: AlignMode | None = None,
                   rotation: Array | None = None,
                   template_scale: float = 1.0) -> tuple[Shape, SimilarityTransform]:
    """Aligns a target and brings it to the template's scale

    Under ``center_unit_area`` normalization a mesh target is scaled to
    unit area like the template.  Point clouds have no area so they get
    `template_scale`, the scale applied to the template, on the
    assumption both arrived in the same units.

    :param mode: Alignment mode, default ``rotation_file`` when `rotation`
       is given and the config's ``align`` otherwise
    """
    if mode is None:
        mode = "rotation_file" if rotation is not None else config.align
    aligned, transform = align_input(shape, mode, rotation)
    if config.normalize != "center_unit_area":
        return aligned, transform
    if isinstance(aligned, TriMesh):
        area = surface_area(aligned)
        if area <= 0:
            raise ArgumentError(f"mesh '{ aligned.name }' has zero area and can't be scaled to unit area")
        s = 1.0 / math.sqrt(area)
    else:
        s = float(template_scale)
    scaling = SimilarityTransform(s, np.eye(3), np.zeros(3))
    return reshape(aligned, scaling.apply(aligned.vertices)), transform.then(scaling)


###
### Manifests and batches
###


@dataclass
class TargetSpec:
    "One target of a batch"
    name: str
    path: str
    features: str | None = None
    rotation: str | None = None
    gt: str | None = None
    "Ground truth map file from template vertices to target points"


@dataclass
class RunManifest:
    "What a batch registers and evaluates"
    template: str
    output: str
    targets: list[TargetSpec]
    template_features: str | None = None
    config: str | None = None
    "Registration config file"
    workers: int = 0
    evaluate: str = "all"
    """``all`` evaluates template to target and every target pair with
    ground truth, ``template`` only template to target, ``none`` nothing,
    or a comma separated list of ``a:b`` pairs"""


_RUN_KEYS = {"template", "features", "output", "config", "workers", "evaluate"}
_TARGET_KEYS = {"path", "features", "rotation", "gt"}


def load_manifest(path: PathLike) -> RunManifest:
    """Reads a batch manifest

    A ``[run]`` section names the template, its features, the output
    directory and optionally a config file, the worker count and which
    pairs to evaluate.  Each ``[target:NAME]`` section gives a target's
    path, features, rotation and ground truth.  Relative paths are relative
    to the manifest, and every named file must exist.
    """
    path = os.fspath(path)
    parser = configparser.ConfigParser(comment_prefixes=("#", ),
                                       inline_comment_prefixes=("#", ),
                                       interpolation=None,
                                       default_section="__defaults__")
    try:
        with open(path, "rt", encoding="utf8") as f:
            parser.read_file(f, source=path)
    except OSError as exc:
        raise ConfigError(f"can't read manifest { path }: { exc }") from exc
    except configparser.Error as exc:
        raise ConfigError(f"{ path }: { exc }") from None

    base = os.path.dirname(os.path.abspath(path))

    def resolve(value: str | None, what: str) -> str | None:
        if not value:
            return None
        full = os.path.normpath(os.path.join(base, value))
        if not os.path.exists(full):
            raise InputError(f"{ path }: { what } { full } does not exist")
        return full

    if "run" not in parser:
        raise ConfigError(f"{ path }: missing [run] section")
    run = parser["run"]
    unknown = set(run) - _RUN_KEYS
    if unknown:
        raise ConfigError(f"{ path }: unknown [run] keys { ', '.join(sorted(unknown)) }")
    if "template" not in run or "output" not in run:
        raise ConfigError(f"{ path }: [run] needs template and output")

    targets = []
    for section in parser.sections():
        if section == "run":
            continue
        if not section.startswith("target:") or not section[len("target:"):].strip():
            raise ConfigError(f"{ path }: unknown section [{ section }]")
        name = section[len("target:"):].strip()
        values = parser[section]
        unknown = set(values) - _TARGET_KEYS
        if unknown:
            raise ConfigError(f"{ path }: unknown [{ section }] keys { ', '.join(sorted(unknown)) }")
        if "path" not in values:
            raise ConfigError(f"{ path }: [{ section }] needs a path")
        targets.append(
            TargetSpec(name, resolve(values["path"], f"target { name } shape"),
                       resolve(values.get("features"), f"target { name } features"),
                       resolve(values.get("rotation"), f"target { name } rotation"),
                       resolve(values.get("gt"), f"target { name } ground truth")))
    if not targets:
        raise ConfigError(f"{ path }: no [target:NAME] sections")
    if len({t.name for t in targets}) != len(targets):
        raise ConfigError(f"{ path }: duplicate target names")

    try:
        workers = int(run.get("workers", "0"))
    except ValueError:
        raise ConfigError(f"{ path }: workers must be an integer") from None
    return RunManifest(resolve(run["template"], "template"),
                       os.path.normpath(os.path.join(base, run["output"])),
                       targets,
                       template_features=resolve(run.get("features"), "template features"),
                       config=resolve(run.get("config"), "config"),
                       workers=workers,
                       evaluate=run.get("evaluate", "all").strip())


@dataclass
class TargetReport:
    "Outcome of registering the template to one target"
    name: str
    status: str
    "``ok`` or ``failed``"
    message: str = ""
    align: str = ""
    "Alignment mode used"
    chamfer: float | None = None
    "Chamfer distance between the deformed template and the target"
    iterations: dict[str, int] = field(default_factory=dict)
    converged: dict[str, bool] = field(default_factory=dict)


@dataclass
class PairReport:
    "Geodesic error for one evaluated pair"
    source: str
    target: str
    error: float
    "Mean geodesic error times 100"
    count: int
    excluded: int
    initial_error: float | None = None
    "Same measure for the feature nearest neighbour map before registration"


@dataclass
class EvalReport:
    "Everything a batch measured"
    targets: list[TargetReport]
    pairs: list[PairReport]
    mean_error: float | None
    "Arithmetic mean of the pair errors"
    runtime: dict[str, list[dict]] = field(default_factory=dict)
    "Per target stage timings, kept out of :meth:`to_json`"

    def to_json(self) -> str:
        "Deterministic JSON of everything except timings"
        data = asdict(self)
        del data["runtime"]
        return json.dumps(data, indent=2, sort_keys=True, allow_nan=True) + "\n"


@dataclass
class _Target:
    spec: TargetSpec
    shape: Shape
    result: RegistrationResult | None = None
    gt: IndexArray | None = None
    geo: GeodesicMatrix | None = None


class Batch:
    """Registers a template to many targets sharing one deformation graph

    :param manifest: What to run
    :param config: Overrides the manifest's config file
    """

    def __init__(self, manifest: RunManifest, config: RegistrationConfig | None = None):
        self.manifest = manifest
        if config is None:
            config = load_config(manifest.config) if manifest.config else RegistrationConfig()
        self.config = config.validate()
        template = load_shape(manifest.template, "mesh")
        self.template, self.template_transform = normalize_shape(template, self.config.normalize)
        self.template_features: FeatureMatrix | None = None
        if manifest.template_features:
            self.template_features = load_features(manifest.template_features, self.template.name,
                                                   points=self.template.n_vertices)
        self.graph: DeformGraph | None = None
        self.geodesics: GeodesicMatrix | None = None

    def cache_keys(self) -> dict[str, str]:
        """Fingerprints of what each cached template file was built from

        Both depend on the normalized template geometry, the graph also on
        the node count and skinning neighbours.
        """
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.template.vertices, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.template.faces, dtype="<i8").tobytes())
        geometry = h.hexdigest()
        graph = hashlib.sha256(f"{ geometry } { self.config.nodes!r} { self.config.skin_neighbors!r}".encode("utf8"))
        return {"graph": graph.hexdigest(), "geodesics": geometry}

    def prepare(self) -> None:
        """Builds or loads the template graph and geodesics, cached in the output directory

        ``template.key`` records what the cached files were built from.  A
        cache built from a different template, normalization or graph
        setting is rebuilt.
        """
        out = self.manifest.output
        os.makedirs(out, exist_ok=True)
        with open(os.path.join(out, "config.ini"), "wt", encoding="utf8") as f:
            f.write(to_text(self.config))
        key_file = os.path.join(out, "template.key")
        try:
            with open(key_file, "rt", encoding="utf8") as f:
                stored = json.load(f)
            if not isinstance(stored, dict):
                stored = {}
        except (OSError, ValueError):
            stored = {}
        keys = self.cache_keys()
        written: dict[str, str] = {}

        def cached(kind: str, path: str) -> bool:
            if not os.path.exists(path):
                return False
            if stored.get(kind) == keys[kind]:
                return True
            log.info("Rebuilding stale %s cache %s", kind, path, extra={"dfr_cache": path})
            return False

        graph_file = os.path.join(out, "template.dfrd")
        if cached("graph", graph_file):
            self.graph = DeformGraph.load(graph_file)
            if self.graph.N != self.template.n_vertices:
                raise DimensionError(f"{ graph_file } was built for a different template")
        else:
            self.graph = build_graph(self.template, self.config.nodes or None, self.config.skin_neighbors)
            self.graph.save(graph_file)
        written["graph"] = keys["graph"]
        if self.config.filter.enabled:
            geo_file = os.path.join(out, "template.dfrg")
            if cached("geodesics", geo_file):
                self.geodesics = GeodesicMatrix.load(geo_file, self.template.name)
                if self.geodesics.n != self.template.n_vertices:
                    raise DimensionError(f"{ geo_file } was built for a different template")
                written["geodesics"] = keys["geodesics"]
            else:
                self.geodesics = geodesic_matrix(self.template, mode=self.config.geodesics, threads=self.config.threads)
                if self.geodesics.is_dense:
                    self.geodesics.save(geo_file)
                    written["geodesics"] = keys["geodesics"]
        elif "geodesics" in stored:
            written["geodesics"] = stored["geodesics"]
        with open(key_file, "wt", encoding="utf8") as f:
            json.dump(written, f, indent=2)

    def run_target(self, spec: TargetSpec) -> tuple[_Target, TargetReport, list[dict]]:
        "Registers one target and writes its files, raising on failure"
        shape = load_shape(spec.path, "auto", spec.name)
        rotation = load_rotation(spec.rotation) if spec.rotation else None
        mode = "rotation_file" if spec.rotation else self.config.align
        aligned, _ = prepare_target(shape, self.config, mode, rotation, self.template_transform.scale)
        features = None
        if self.template_features is not None and spec.features:
            features = (self.template_features, load_features(spec.features, spec.name, points=len(aligned.vertices)))
        result = register(self.template, aligned, features, self.config, graph=self.graph, geodesics=self.geodesics)

        directory = os.path.join(self.manifest.output, spec.name)
        os.makedirs(directory, exist_ok=True)
        save_shape(result.deformed, os.path.join(directory, "deformed.ply"))
        save_map(result.pi_st, os.path.join(directory, "map_st.txt"), source=self.template.name, target=spec.name)
        save_map(result.pi_ts, os.path.join(directory, "map_ts.txt"), source=spec.name, target=self.template.name)
        result.trace.save(os.path.join(directory, "trace.csv"))

        chamfer, _ = e_cd(result.deformed.vertices, aligned.vertices)
        report = TargetReport(spec.name,
                              "ok",
                              align=mode,
                              chamfer=chamfer,
                              iterations={s.runtime.stage: s.iterations for s in result.stages},
                              converged={s.runtime.stage: s.converged for s in result.stages})
        target = _Target(spec, aligned, result, load_map(spec.gt) if spec.gt else None)
        return target, report, [r.as_dict() for r in result.runtimes]

    def _safe_run(self, spec: TargetSpec):
        try:
            return self.run_target(spec)
        except Exception as exc:
            # one bad target must not stop the others
            log.error("Target '%s' failed: %s", spec.name, exc, extra={"dfr_target": spec.name})
            return None, TargetReport(spec.name, "failed", message=f"{ type(exc).__name__ }: { exc }"), []

    def _geodesics(self, target: _Target) -> GeodesicMatrix:
        if not isinstance(target.shape, TriMesh):
            raise InputError(f"target '{ target.spec.name }' has no faces so geodesic error can't be measured")
        if target.geo is None:
            target.geo = geodesic_matrix(target.shape, threads=self.config.threads)
        return target.geo

    def pairs_to_evaluate(self, names: list[str]) -> list[tuple[str, str]]:
        mode = self.manifest.evaluate
        if mode == "none":
            return []
        hub = [("template", n) for n in names]
        if mode == "template":
            return hub
        if mode == "all":
            return hub + [(a, b) for a in names for b in names if a != b]
        pairs = []
        for item in mode.split(","):
            a, sep, b = item.strip().partition(":")
            if not sep or not a or not b:
                raise ConfigError(f"bad evaluate pair { item.strip()!r}, expected a:b")
            pairs.append((a.strip(), b.strip()))
        return pairs

    def evaluate(self, done: dict[str, _Target]) -> list[PairReport]:
        "Geodesic errors for every requested pair with ground truth"
        reports = []
        for a, b in self.pairs_to_evaluate(list(done)):
            if b not in done or (a != "template" and a not in done):
                continue
            tb = done[b]
            if tb.gt is None or (a != "template" and done[a].gt is None):
                continue
            try:
                geo = self._geodesics(tb)
                area = surface_area(tb.shape)
                if a == "template":
                    stats = geodesic_error(tb.result.pi_st[tb.gt[:, 0]], tb.gt[:, 1], geo, area)
                    initial = None
                    if tb.result.initial_pi_st is not None:
                        initial = geodesic_error(tb.result.initial_pi_st[tb.gt[:, 0]], tb.gt[:, 1], geo, area).percent
                else:
                    ta = done[a]
                    # template vertices with truth on both sides
                    _, ia, ib = np.intersect1d(ta.gt[:, 0], tb.gt[:, 0], return_indices=True)
                    t_12 = compose_maps(ta.result.pi_ts, tb.result.pi_st)
                    stats = geodesic_error(t_12[ta.gt[ia, 1]], tb.gt[ib, 1], geo, area)
                    initial = None
            except Error as exc:
                log.error("Can't evaluate %s -> %s: %s", a, b, exc, extra={"dfr_pair": f"{ a }:{ b }"})
                continue
            reports.append(PairReport(a, b, stats.percent, stats.count, stats.excluded, initial))
        return reports

    def run(self) -> EvalReport:
        """Registers every target, evaluates and writes ``report.json`` and
        ``runtime.json`` to the output directory"""
        start = time.perf_counter()
        self.prepare()
        specs = self.manifest.targets
        workers = worker_count(self.manifest.workers or self.config.threads)
        if workers == 1 or len(specs) == 1:
            outcomes = [self._safe_run(s) for s in specs]
        else:
            with concurrent.futures.ThreadPoolExecutor(min(workers, len(specs))) as pool:
                outcomes = list(pool.map(self._safe_run, specs))

        done = {t.spec.name: t for t, _, _ in outcomes if t is not None}
        pairs = self.evaluate(done)
        errors = [p.error for p in pairs if not math.isnan(p.error)]
        report = EvalReport([r for _, r, _ in outcomes], pairs, float(np.mean(errors)) if errors else None,
                            {s.name: rt for s, (_, _, rt) in zip(specs, outcomes)})
        with open(os.path.join(self.manifest.output, "report.json"), "wt", encoding="utf8") as f:
            f.write(report.to_json())
        with open(os.path.join(self.manifest.output, "runtime.json"), "wt", encoding="utf8") as f:
            json.dump({"total_seconds": time.perf_counter() - start, "targets": report.runtime}, f, indent=2, sort_keys=True)
            f.write("\n")
        return report


def run_batch(manifest: RunManifest, config: RegistrationConfig | None = None) -> EvalReport:
    "Registers the template to every target of `manifest` and evaluates the results"
    return Batch(manifest, config).run()


def match_through_template(template: TriMesh,
                           target1: Shape,
                           target2: Shape,
                           features: tuple[FeatureMatrix, FeatureMatrix, FeatureMatrix] | None = None,
                           config: RegistrationConfig | None = None) -> tuple[IndexArray, RegistrationResult,
                                                                              RegistrationResult]:
    """Map from target1 points to target2 points through the template

    Both targets are registered to the template, then the target1 to
    template map is composed with the template to target2 map.

    :param features: (template, target1, target2) features
    """
    config = (config or RegistrationConfig()).validate()
    graph = build_graph(template, config.nodes or None, config.skin_neighbors)
    geo = geodesic_matrix(template, mode=config.geodesics, threads=config.threads) if config.filter.enabled else None
    f1 = (features[0], features[1]) if features else None
    f2 = (features[0], features[2]) if features else None
    r1 = register(template, target1, f1, config, graph=graph, geodesics=geo)
    r2 = register(template, target2, f2, config, graph=graph, geodesics=geo)
    return compose_maps(r1.pi_ts, r2.pi_st), r1, r2
