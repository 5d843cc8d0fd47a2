# Shape representation, file formats, normalization, area and geodesics

from __future__ import annotations

import concurrent.futures
import functools
import logging
import os
import re
import struct
import threading
from dataclasses import dataclass

import numpy as np
import scipy.sparse
import scipy.sparse.csgraph

from . import ArgumentError, DimensionError, ParseError, UnsupportedModeError
from .dfrtypes import Array, IndexArray, NormalizeMode, PathLike, ShapeKind

log = logging.getLogger(__name__)

# dense geodesic matrices up to this many vertices in auto mode
DENSE_GEODESIC_LIMIT = 15000

GEODESIC_MAGIC = b"DFRG"
GEODESIC_VERSION = 1


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


class TriMesh:
    """A triangle mesh

    :param vertices: N x 3 positions
    :param faces: F x 3 vertex indices
    :param name: Identifier used in output files and reports

    Vertices not referenced by any face are dropped with a warning.  The
    remaining vertices keep their relative order, and the original indices
    of dropped ones are in :attr:`dropped_vertices`.  Instances are
    immutable and can be shared between threads.
    """

    def __init__(self, vertices: Array, faces: IndexArray, name: str = "mesh"):
        vertices = np.array(vertices, dtype=np.float64)
        faces = np.array(faces, dtype=np.int64)
        if vertices.ndim != 2 or vertices.shape[1] != 3:
            raise DimensionError(f"vertices must be N x 3, not { vertices.shape }")
        if faces.ndim != 2 or faces.shape[1] != 3:
            raise DimensionError(f"faces must be F x 3, not { faces.shape }")
        if len(faces) == 0:
            raise ArgumentError(f"mesh '{ name }' has no faces")
        if not np.all(np.isfinite(vertices)):
            raise ArgumentError(f"mesh '{ name }' has non-finite vertex coordinates")
        if faces.min() < 0 or faces.max() >= len(vertices):
            bad = int(np.nonzero((faces < 0).any(axis=1) | (faces >= len(vertices)).any(axis=1))[0][0])
            raise ArgumentError(f"mesh '{ name }' face { bad } has an index out of range 0..{ len(vertices) - 1 }")
        repeated = (faces[:, 0] == faces[:, 1]) | (faces[:, 1] == faces[:, 2]) | (faces[:, 0] == faces[:, 2])
        if repeated.any():
            raise ArgumentError(f"mesh '{ name }' face { int(np.nonzero(repeated)[0][0]) } repeats a vertex")

        used = np.zeros(len(vertices), dtype=bool)
        used[faces.ravel()] = True
        self.dropped_vertices: IndexArray = _frozen(np.nonzero(~used)[0])
        "Original indices of vertices removed because no face used them"
        if len(self.dropped_vertices):
            log.warning("Dropping %d isolated vertices from mesh '%s'",
                        len(self.dropped_vertices),
                        name,
                        extra={"dfr_mesh": name, "dfr_dropped": len(self.dropped_vertices)})
            remap = np.cumsum(used) - 1
            vertices = vertices[used]
            faces = remap[faces]

        self.vertices: Array = _frozen(vertices)
        "N x 3 vertex positions"
        self.faces: IndexArray = _frozen(faces)
        "F x 3 vertex indices"
        self.name = name

    @classmethod
    def _trusted(cls, vertices: Array, faces: IndexArray, name: str) -> TriMesh:
        # skips validation when faces are already known good
        self = cls.__new__(cls)
        self.vertices = _frozen(np.array(vertices, dtype=np.float64))
        self.faces = faces
        self.name = name
        self.dropped_vertices = _frozen(np.zeros(0, dtype=np.intp))
        return self

    def __repr__(self) -> str:
        return f"<TriMesh '{ self.name }' N={ self.n_vertices } F={ len(self.faces) }>"

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    def __len__(self) -> int:
        return self.n_vertices

    @property
    def points(self) -> Array:
        "Same as :attr:`vertices` so meshes can stand in for point clouds"
        return self.vertices

    def with_vertices(self, vertices: Array, name: str | None = None) -> TriMesh:
        "A mesh with the same connectivity and new positions"
        vertices = np.asarray(vertices, dtype=np.float64)
        if vertices.shape != self.vertices.shape:
            raise DimensionError(f"expected { self.vertices.shape } vertices, got { vertices.shape }")
        return TriMesh._trusted(vertices, self.faces, name or self.name)

    @functools.cached_property
    def edges(self) -> IndexArray:
        "E x 2 unique undirected edges with the smaller index first, sorted"
        e = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]])
        e.sort(axis=1)
        return _frozen(np.unique(e, axis=0))

    @functools.cached_property
    def edge_lengths(self) -> Array:
        e = self.edges
        return _frozen(np.linalg.norm(self.vertices[e[:, 0]] - self.vertices[e[:, 1]], axis=1))

    def edge_graph(self) -> scipy.sparse.csr_matrix:
        "Symmetric sparse adjacency with Euclidean edge lengths as weights"
        e = self.edges
        n = self.n_vertices
        w = self.edge_lengths
        g = scipy.sparse.coo_matrix((np.concatenate([w, w]), (np.concatenate([e[:, 0], e[:, 1]]),
                                                              np.concatenate([e[:, 1], e[:, 0]]))),
                                    shape=(n, n))
        return g.tocsr()

    @functools.cached_property
    def components(self) -> IndexArray:
        "Connected component label of each vertex"
        _, labels = scipy.sparse.csgraph.connected_components(self.edge_graph(), directed=False)
        return _frozen(labels.astype(np.intp))

    @property
    def n_components(self) -> int:
        return int(self.components.max()) + 1

    @functools.cached_property
    def face_areas(self) -> Array:
        v = self.vertices
        f = self.faces
        cross = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
        return _frozen(0.5 * np.linalg.norm(cross, axis=1))

    @property
    def degenerate(self) -> bool:
        "True when every face has zero area"
        return not np.any(self.face_areas > 0)


class PointCloud:
    """An unstructured set of points

    :param points: M x 3 positions
    :param name: Identifier used in output files and reports
    :param features: Optional M x d per-point features
    """

    def __init__(self, points: Array, name: str = "cloud", features: Array | None = None):
        points = np.array(points, dtype=np.float64)
        if points.ndim != 2 or points.shape[1] != 3:
            raise DimensionError(f"points must be M x 3, not { points.shape }")
        if len(points) < 1:
            raise ArgumentError(f"point cloud '{ name }' is empty")
        if not np.all(np.isfinite(points)):
            raise ArgumentError(f"point cloud '{ name }' has non-finite coordinates")
        if features is not None:
            features = np.array(features, dtype=np.float64)
            if features.ndim != 2 or features.shape[0] != len(points):
                raise DimensionError(f"features { features.shape } do not match { len(points) } points")
            features = _frozen(features)
        self.points: Array = _frozen(points)
        "M x 3 positions"
        self.name = name
        self.features = features

    def __repr__(self) -> str:
        return f"<PointCloud '{ self.name }' M={ len(self.points) }>"

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def vertices(self) -> Array:
        "Same as :attr:`points`"
        return self.points

    def with_points(self, points: Array, name: str | None = None) -> PointCloud:
        return PointCloud(points, name or self.name, self.features)


Shape = TriMesh | PointCloud


def as_point_cloud(shape: Shape) -> PointCloud:
    "The vertices of a mesh, or the cloud itself"
    if isinstance(shape, PointCloud):
        return shape
    return PointCloud(shape.vertices, shape.name)


def reshape(shape: Shape, positions: Array) -> Shape:
    "Same kind of shape with new positions"
    if isinstance(shape, TriMesh):
        return shape.with_vertices(positions)
    return shape.with_points(positions)


@dataclass(frozen=True)
class SimilarityTransform:
    """``x -> scale * rotation @ x + translation`` applied to row vectors

    Returned by normalization and alignment so results can be mapped back
    to the input frame with :meth:`inverse`."""
    scale: float
    rotation: Array
    translation: Array

    @classmethod
    def identity(cls) -> SimilarityTransform:
        return cls(1.0, np.eye(3), np.zeros(3))

    def apply(self, points: Array) -> Array:
        return self.scale * (np.asarray(points, dtype=np.float64) @ self.rotation.T) + self.translation

    def inverse(self) -> SimilarityTransform:
        rt = self.rotation.T
        return SimilarityTransform(1.0 / self.scale, rt, -(rt @ self.translation) / self.scale)

    def then(self, other: SimilarityTransform) -> SimilarityTransform:
        "This transform followed by `other`"
        return SimilarityTransform(other.scale * self.scale, other.rotation @ self.rotation,
                                   other.scale * (other.rotation @ self.translation) + other.translation)


###
### Area and normalization
###


def surface_area(mesh: TriMesh) -> float:
    """Sum of face areas

    Returns 0 when every face is degenerate, with a warning; check
    :attr:`TriMesh.degenerate` for the flag.
    """
    if mesh.degenerate:
        log.warning("Every face of mesh '%s' has zero area", mesh.name, extra={"dfr_mesh": mesh.name})
        return 0.0
    return float(np.sum(mesh.face_areas))


def normalize_shape(shape: Shape, mode: NormalizeMode = "center") -> tuple[Shape, SimilarityTransform]:
    """Center a shape on its vertex mean, optionally scaling a mesh to unit area

    :returns: (normalized shape, transform that was applied)
    """
    if mode not in ("center", "center_unit_area"):
        raise UnsupportedModeError(f"Unknown normalization mode '{ mode }'")
    pts = shape.vertices
    transform = SimilarityTransform(1.0, np.eye(3), -pts.mean(axis=0))
    if mode == "center_unit_area":
        if not isinstance(shape, TriMesh):
            raise UnsupportedModeError("center_unit_area needs a mesh, point clouds have no area")
        area = surface_area(shape)
        if area <= 0:
            raise ArgumentError(f"mesh '{ shape.name }' has zero area and can't be scaled to unit area")
        s = 1.0 / np.sqrt(area)
        transform = transform.then(SimilarityTransform(s, np.eye(3), np.zeros(3)))
    return reshape(shape, transform.apply(pts)), transform


###
### Geodesics
###


class GeodesicMatrix:
    """All pairs edge-graph shortest path distances on a mesh

    Stored as a dense float32 matrix, or computed a row at a time on demand
    for large meshes.  Vertices in different connected components are
    ``inf`` apart.

    :param dense: n x n matrix, or None for row mode
    :param graph: Edge graph used to compute rows in row mode
    :param mesh_name: Name of the mesh the distances belong to
    """

    SENTINEL = np.float32(np.inf)
    "Distance between vertices in different components"

    def __init__(self, dense: np.ndarray | None, *, n: int, mesh_name: str,
                 graph: scipy.sparse.csr_matrix | None = None, row_cache: int = 256):
        if dense is None and graph is None:
            raise ValueError("Need either dense distances or a graph")
        self.n = n
        self.mesh_name = mesh_name
        self._dense = _frozen(np.asarray(dense, dtype=np.float32)) if dense is not None else None
        self._graph = graph
        self._row_cache_size = row_cache
        self._rows: dict[int, np.ndarray] = {}
        self._lock = threading.Lock()

    def __repr__(self) -> str:
        return f"<GeodesicMatrix '{ self.mesh_name }' n={ self.n } { 'dense' if self.is_dense else 'rows' }>"

    @property
    def is_dense(self) -> bool:
        return self._dense is not None

    @property
    def dense(self) -> np.ndarray:
        "The full matrix, computing every row if in row mode"
        if self._dense is not None:
            return self._dense
        return np.stack([self.row(i) for i in range(self.n)])

    def row(self, i: int) -> np.ndarray:
        "Distances from vertex `i` to every vertex"
        if self._dense is not None:
            return self._dense[i]
        with self._lock:
            if i in self._rows:
                return self._rows[i]
        r = _frozen(scipy.sparse.csgraph.dijkstra(self._graph, directed=False, indices=int(i)).astype(np.float32))
        with self._lock:
            if len(self._rows) >= self._row_cache_size:
                self._rows.pop(next(iter(self._rows)))
            self._rows[i] = r
        return r

    def __getitem__(self, ij: tuple[int, int]) -> float:
        i, j = ij
        return float(self.row(i)[j])

    def lookup(self, rows: IndexArray, cols: IndexArray) -> np.ndarray:
        "Distances between paired entries of `rows` and `cols` as float64"
        rows = np.asarray(rows, dtype=np.intp)
        cols = np.asarray(cols, dtype=np.intp)
        if self._dense is not None:
            return self._dense[rows, cols].astype(np.float64)
        out = np.empty(len(rows))
        for r in np.unique(rows):
            sel = rows == r
            out[sel] = self.row(int(r))[cols[sel]]
        return out

    def save(self, path: PathLike) -> None:
        "Writes the cache file: magic, u32 version, u64 n, n*n little endian f32"
        with open(path, "wb") as f:
            f.write(GEODESIC_MAGIC + struct.pack("<IQ", GEODESIC_VERSION, self.n))
            f.write(np.ascontiguousarray(self.dense, dtype="<f4").tobytes())

    @classmethod
    def load(cls, path: PathLike, mesh_name: str | None = None) -> GeodesicMatrix:
        with open(path, "rb") as f:
            header = f.read(16)
            if len(header) != 16 or header[:4] != GEODESIC_MAGIC:
                raise ParseError("not a geodesic cache file", path=str(path), offset=0)
            version, n = struct.unpack("<IQ", header[4:])
            if version != GEODESIC_VERSION:
                raise ParseError(f"unsupported geodesic cache version { version }", path=str(path), offset=4)
            data = f.read()
        if len(data) != 4 * n * n:
            raise ParseError(f"expected { 4 * n * n } bytes of distances, found { len(data) }",
                             path=str(path),
                             offset=16 + len(data))
        dense = np.frombuffer(data, dtype="<f4").reshape(n, n).astype(np.float32)
        return cls(dense, n=n, mesh_name=mesh_name or os.path.basename(str(path)))


def geodesic_matrix(mesh: TriMesh, *, mode: str = "auto", threads: int | None = None) -> GeodesicMatrix:
    """Shortest paths over the mesh edge graph with Euclidean edge lengths

    :param mode: ``dense``, ``rows`` (computed on demand), or ``auto``
       which picks dense up to :data:`DENSE_GEODESIC_LIMIT` vertices
    :param threads: Worker threads for the dense computation.  Each source
       row is an independent Dijkstra run so the result does not depend
       on this.
    """
    graph = mesh.edge_graph()
    n = mesh.n_vertices
    if mode == "auto":
        mode = "dense" if n <= DENSE_GEODESIC_LIMIT else "rows"
    if mode == "rows":
        return GeodesicMatrix(None, n=n, mesh_name=mesh.name, graph=graph)
    if mode != "dense":
        raise UnsupportedModeError(f"Unknown geodesic mode '{ mode }'")

    from .config import worker_count
    workers = worker_count(threads)
    chunks = np.array_split(np.arange(n), max(1, min(n, workers * 4)))

    def run(chunk: np.ndarray) -> np.ndarray:
        return scipy.sparse.csgraph.dijkstra(graph, directed=False, indices=chunk).astype(np.float32)

    if workers == 1:
        parts = [run(c) for c in chunks]
    else:
        with concurrent.futures.ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(run, chunks))
    return GeodesicMatrix(np.vstack(parts), n=n, mesh_name=mesh.name, graph=graph)


###
### File formats
###


class _Lines:
    "Iterates meaningful lines of a text file keeping 1-based line numbers"

    def __init__(self, text: str, path: str, comment: str = "#"):
        self.path = path
        self.items = []
        for number, line in enumerate(text.splitlines(), 1):
            line = line.split(comment, 1)[0].strip()
            if line:
                self.items.append((number, line))
        self.pos = 0
        self.last_line = len(text.splitlines())

    def next(self, what: str) -> tuple[int, str]:
        if self.pos >= len(self.items):
            raise ParseError(f"file ended, expected { what }", path=self.path, line=self.last_line + 1)
        item = self.items[self.pos]
        self.pos += 1
        return item

    def floats(self, line: int, text: str, count: int, what: str) -> list[float]:
        parts = text.split()
        if len(parts) < count:
            raise ParseError(f"expected { count } numbers for { what }, found { len(parts) }", path=self.path, line=line)
        try:
            return [float(p) for p in parts[:count]]
        except ValueError:
            raise ParseError(f"malformed number in { what }: { text!r}", path=self.path, line=line) from None

    def ints(self, line: int, parts: list[str], what: str) -> list[int]:
        try:
            return [int(p) for p in parts]
        except ValueError:
            raise ParseError(f"malformed integer in { what }: { ' '.join(parts)!r}", path=self.path, line=line) from None


def _check_face(face: list[int], nv: int, path: str, where: dict) -> None:
    for i in face:
        if not 0 <= i < nv:
            raise ParseError(f"vertex index { i } out of range 0..{ nv - 1 }", path=path, **where)
    if len(set(face)) != 3:
        raise ParseError(f"face { face } repeats a vertex", path=path, **where)


def _read_off(data: bytes, path: str, want_faces: bool) -> tuple[Array, np.ndarray | None]:
    lines = _Lines(data.decode("utf8", errors="replace"), path)
    number, text = lines.next("OFF header")
    parts = text.split()
    if not parts[0].endswith("OFF"):
        raise ParseError(f"expected 'OFF' header, found { parts[0]!r}", path=path, line=number)
    counts = parts[1:]
    if not counts:
        number, text = lines.next("vertex and face counts")
        counts = text.split()
    if len(counts) < 2:
        raise ParseError("expected vertex and face counts", path=path, line=number)
    nv, nf = lines.ints(number, counts[:2], "counts")
    if nv < 0 or nf < 0:
        raise ParseError("negative element count", path=path, line=number)

    vertices = np.empty((nv, 3))
    for i in range(nv):
        number, text = lines.next(f"vertex record { i + 1 } of { nv }")
        vertices[i] = lines.floats(number, text, 3, f"vertex { i }")

    if not want_faces:
        return vertices, None
    faces = np.empty((nf, 3), dtype=np.int64)
    for i in range(nf):
        number, text = lines.next(f"face record { i + 1 } of { nf }")
        parts = text.split()
        vals = lines.ints(number, parts[:1], f"face { i }")
        if vals[0] != 3:
            raise ParseError(f"face { i } has { vals[0] } vertices, only triangles are supported", path=path, line=number)
        if len(parts) < 4:
            raise ParseError(f"face { i } lists fewer than 3 indices", path=path, line=number)
        face = lines.ints(number, parts[1:4], f"face { i }")
        _check_face(face, nv, path, {"line": number})
        faces[i] = face
    return vertices, faces


def _read_obj(data: bytes, path: str, want_faces: bool) -> tuple[Array, np.ndarray | None]:
    vertices: list[list[float]] = []
    faces: list[list[int]] = []
    lines = _Lines(data.decode("utf8", errors="replace"), path)
    for number, text in lines.items:
        parts = text.split()
        if parts[0] == "v":
            vertices.append(lines.floats(number, " ".join(parts[1:]), 3, "vertex"))
        elif parts[0] == "f" and want_faces:
            if len(parts) != 4:
                raise ParseError(f"face has { len(parts) - 1 } vertices, only triangles are supported",
                                 path=path,
                                 line=number)
            face = []
            for p in parts[1:]:
                idx = lines.ints(number, [p.split("/")[0]], "face")[0]
                # negative indices count back from the most recent vertex
                face.append(idx - 1 if idx > 0 else len(vertices) + idx)
            _check_face(face, len(vertices), path, {"line": number})
            faces.append(face)
    if not vertices:
        raise ParseError("no vertices found", path=path, line=lines.last_line)
    return np.array(vertices, dtype=np.float64), (np.array(faces, dtype=np.int64).reshape(-1, 3) if want_faces else None)


_ply_types = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


@dataclass
class _PlyElement:
    name: str
    count: int
    # (name, dtype) for scalars, (name, count dtype, item dtype) for lists
    properties: list[tuple]


def _read_ply(data: bytes, path: str, want_faces: bool) -> tuple[Array, np.ndarray | None]:
    end = re.search(rb"end_header[ \t]*\r?\n", data)
    if not data.startswith(b"ply") or not end:
        raise ParseError("missing 'ply' magic or 'end_header'", path=path, line=1)
    header = data[:end.end()].decode("ascii", errors="replace").splitlines()
    fmt = None
    elements: list[_PlyElement] = []
    for number, line in enumerate(header, 1):
        parts = line.split()
        if not parts or parts[0] in ("ply", "comment", "obj_info", "end_header"):
            continue
        if parts[0] == "format":
            fmt = parts[1] if len(parts) > 1 else None
            if fmt not in ("ascii", "binary_little_endian"):
                raise ParseError(f"unsupported PLY format { fmt!r}", path=path, line=number)
        elif parts[0] == "element" and len(parts) == 3:
            try:
                elements.append(_PlyElement(parts[1], int(parts[2]), []))
            except ValueError:
                raise ParseError(f"bad element count { parts[2]!r}", path=path, line=number) from None
        elif parts[0] == "property" and elements:
            try:
                if parts[1] == "list":
                    elements[-1].properties.append((parts[4], _ply_types[parts[2]], _ply_types[parts[3]]))
                else:
                    elements[-1].properties.append((parts[2], _ply_types[parts[1]]))
            except (KeyError, IndexError):
                raise ParseError(f"bad property declaration { line!r}", path=path, line=number) from None
        else:
            raise ParseError(f"unrecognised header line { line!r}", path=path, line=number)
    if fmt is None:
        raise ParseError("missing format line", path=path, line=1)
    vertex = next((e for e in elements if e.name == "vertex"), None)
    if vertex is None:
        raise ParseError("no vertex element", path=path, line=1)
    names = [p[0] for p in vertex.properties]
    if not all(c in names for c in "xyz"):
        raise ParseError("vertex element lacks x, y, z", path=path, line=1)

    values: dict[str, object] = {}
    if fmt == "ascii":
        lines = _Lines(data[end.end():].decode("ascii", errors="replace"), path, comment="\0")
        offset = len(header)
        for element in elements:
            rows = []
            for i in range(element.count):
                number, text = lines.next(f"{ element.name } record { i + 1 } of { element.count }")
                parts = text.split()
                row, pos = [], 0
                for prop in element.properties:
                    try:
                        if len(prop) == 3:
                            count = int(parts[pos])
                            row.append([float(p) if "f" in prop[2] else int(p) for p in parts[pos + 1:pos + 1 + count]])
                            if len(row[-1]) != count:
                                raise IndexError
                            pos += 1 + count
                        else:
                            row.append(float(parts[pos]) if "f" in prop[1] else int(parts[pos]))
                            pos += 1
                    except (ValueError, IndexError):
                        raise ParseError(f"malformed { element.name } record", path=path,
                                         line=number + offset) from None
                rows.append((row, number + offset))
            values[element.name] = rows
    else:
        pos = end.end()
        for element in elements:
            if all(len(p) == 2 for p in element.properties):
                dt = np.dtype([(p[0], "<" + p[1]) for p in element.properties])
                size = dt.itemsize * element.count
                if pos + size > len(data):
                    raise ParseError(f"file ended inside { element.name } data", path=path, offset=len(data))
                arr = np.frombuffer(data, dtype=dt, count=element.count, offset=pos)
                values[element.name] = [([arr[p[0]][i] for p in element.properties], pos + i * dt.itemsize)
                                        for i in range(element.count)] if element.name != "vertex" else arr
                pos += size
                continue
            rows = []
            for i in range(element.count):
                start = pos
                row = []
                for prop in element.properties:
                    try:
                        if len(prop) == 3:
                            cdt, idt = np.dtype("<" + prop[1]), np.dtype("<" + prop[2])
                            count = int(np.frombuffer(data, dtype=cdt, count=1, offset=pos)[0])
                            pos += cdt.itemsize
                            row.append(np.frombuffer(data, dtype=idt, count=count, offset=pos).tolist())
                            pos += idt.itemsize * count
                        else:
                            sdt = np.dtype("<" + prop[1])
                            row.append(np.frombuffer(data, dtype=sdt, count=1, offset=pos)[0])
                            pos += sdt.itemsize
                    except ValueError:
                        raise ParseError(f"file ended inside { element.name } record { i }", path=path,
                                         offset=start) from None
                rows.append((row, start))
            values[element.name] = rows

    vdata = values["vertex"]
    if isinstance(vdata, np.ndarray):
        vertices = np.stack([vdata["x"], vdata["y"], vdata["z"]], axis=1).astype(np.float64)
    else:
        xi, yi, zi = names.index("x"), names.index("y"), names.index("z")
        vertices = np.array([[r[xi], r[yi], r[zi]] for r, _ in vdata], dtype=np.float64)

    if not want_faces:
        return vertices, None
    face = next((e for e in elements if e.name == "face"), None)
    if face is None:
        return vertices, np.zeros((0, 3), dtype=np.int64)
    li = next((i for i, p in enumerate(face.properties) if p[0] in ("vertex_indices", "vertex_index")), None)
    if li is None:
        raise ParseError("face element lacks vertex_indices", path=path, line=1)
    faces = np.empty((face.count, 3), dtype=np.int64)
    for i, (row, where) in enumerate(values["face"]):
        loc = {"line": where} if fmt == "ascii" else {"offset": where}
        idx = [int(v) for v in row[li]]
        if len(idx) != 3:
            raise ParseError(f"face { i } has { len(idx) } vertices, only triangles are supported", path=path, **loc)
        _check_face(idx, len(vertices), path, loc)
        faces[i] = idx
    return vertices, faces


_readers = {".off": _read_off, ".obj": _read_obj, ".ply": _read_ply}


def load_shape(path: PathLike, kind: ShapeKind = "mesh", name: str | None = None) -> Shape:
    """Reads an OFF, OBJ or PLY (ascii or binary little endian) file

    Vertex order is exactly the file order so correspondence indices refer
    to file positions.

    :param kind: ``mesh`` requires triangle faces, ``pointcloud`` ignores
       any faces, ``auto`` returns a mesh when faces are present
    :param name: Defaults to the file name without extension
    """
    path = os.fspath(path)
    ext = os.path.splitext(path)[1].lower()
    reader = _readers.get(ext)
    if reader is None:
        raise ParseError(f"unknown shape file extension '{ ext }'", path=path)
    if kind not in ("mesh", "pointcloud", "auto"):
        raise UnsupportedModeError(f"Unknown shape kind '{ kind }'")
    with open(path, "rb") as f:
        data = f.read()
    name = name or os.path.splitext(os.path.basename(path))[0]
    vertices, faces = reader(data, path, kind != "pointcloud")
    if kind == "pointcloud" or (kind == "auto" and (faces is None or len(faces) == 0)):
        return PointCloud(vertices, name)
    if faces is None or len(faces) == 0:
        raise ParseError("no faces found, load it as a point cloud instead", path=path)
    return TriMesh(vertices, faces, name)


def save_shape(shape: Shape, path: PathLike, *, binary: bool = False) -> None:
    """Writes a shape, with the format chosen by the file extension

    Coordinates are written with 17 significant digits so reading the file
    back gives bit identical values.

    :param binary: Use binary little endian for PLY files
    """
    path = os.fspath(path)
    ext = os.path.splitext(path)[1].lower()
    v = shape.vertices
    faces = shape.faces if isinstance(shape, TriMesh) else np.zeros((0, 3), dtype=np.int64)
    if ext == ".off":
        with open(path, "wt", encoding="utf8") as f:
            f.write(f"OFF\n{ len(v) } { len(faces) } 0\n")
            np.savetxt(f, v, fmt="%.17g")
            if len(faces):
                np.savetxt(f, np.hstack([np.full((len(faces), 1), 3), faces]), fmt="%d")
    elif ext == ".obj":
        with open(path, "wt", encoding="utf8") as f:
            f.write(f"# { shape.name }\n")
            np.savetxt(f, v, fmt="v %.17g %.17g %.17g")
            if len(faces):
                np.savetxt(f, faces + 1, fmt="f %d %d %d")
    elif ext == ".ply":
        header = ["ply", "format " + ("binary_little_endian" if binary else "ascii") + " 1.0", f"comment { shape.name }",
                  f"element vertex { len(v) }", "property double x", "property double y", "property double z"]
        if len(faces):
            header += [f"element face { len(faces) }", "property list uchar int vertex_indices"]
        header.append("end_header")
        with open(path, "wb") as f:
            f.write(("\n".join(header) + "\n").encode("ascii"))
            if binary:
                f.write(np.ascontiguousarray(v, dtype="<f8").tobytes())
                if len(faces):
                    rec = np.zeros(len(faces), dtype=[("n", "u1"), ("i", "<i4", (3, ))])
                    rec["n"] = 3
                    rec["i"] = faces
                    f.write(rec.tobytes())
            else:
                text = [" ".join("%.17g" % c for c in row) for row in v]
                text += ["3 %d %d %d" % tuple(face) for face in faces]
                f.write(("\n".join(text) + "\n").encode("ascii"))
    else:
        raise ParseError(f"unknown shape file extension '{ ext }'", path=path)


def grid_mesh(rows: int, cols: int | None = None, name: str = "grid") -> TriMesh:
    """A flat triangulated grid over the unit square in the z = 0 plane

    Vertex ``r * cols + c`` sits at ``(c / (cols - 1), r / (rows - 1), 0)``
    and each cell is split along the same diagonal.
    """
    cols = cols or rows
    if rows < 2 or cols < 2:
        raise ArgumentError(f"a grid needs at least 2 x 2 vertices, not { rows } x { cols }")
    y, x = np.mgrid[0:rows, 0:cols]
    vertices = np.stack([x.ravel() / (cols - 1), y.ravel() / (rows - 1), np.zeros(rows * cols)], axis=1)
    i = (np.arange(rows - 1)[:, None] * cols + np.arange(cols - 1)[None, :]).ravel()
    faces = np.concatenate([np.stack([i, i + 1, i + cols + 1], axis=1), np.stack([i, i + cols + 1, i + cols], axis=1)])
    return TriMesh(vertices, faces, name)
