# Embedded deformation graph: quadric error decimation to pick the nodes,
# skinning of mesh vertices to nodes, and the axis-angle rotations that
# deform them.

from __future__ import annotations

import heapq
import logging
import struct
from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

from . import ArgumentError, DimensionError, ParseError
from . import knn
from .dfrtypes import Array, IndexArray, PathLike
from .geometry import TriMesh

log = logging.getLogger(__name__)

DEFAULT_SKIN_NEIGHBORS = 4

# boundary edges get a perpendicular plane quadric scaled by this
BOUNDARY_WEIGHT = 1e3

# quadric systems with a larger condition number use the fallback positions
MAX_QUADRIC_CONDITION = 1e10

# below this angle rodrigues uses a Taylor expansion
SMALL_ANGLE = 1e-8

# below this angle the rotation derivative uses a Taylor expansion
SMALL_ANGLE_DERIVATIVE = 1e-4

GRAPH_MAGIC = b"DFRD"
GRAPH_VERSION = 1

###
### Quadric error decimation
###


@dataclass
class Decimation:
    "Result of :func:`qslim_decimate`"
    mesh: TriMesh
    "The simplified mesh"
    survivors: IndexArray
    "For each vertex of :attr:`mesh` its index in the input mesh"
    stalled: bool
    "True when no valid collapse remained before reaching the target"
    error: float
    "Sum of the quadric costs of all collapses performed"
    target: int
    "The vertex count asked for"


def _plane_quadric(normal: Array, point: Array, weight: float) -> np.ndarray:
    p = np.append(normal, -normal @ point)
    return weight * np.outer(p, p)


class _Collapser:
    "Mutable mesh state for edge collapses"

    def __init__(self, mesh: TriMesh):
        v = mesh.vertices
        self.pos = v.copy()
        self.faces = mesh.faces.copy()
        self.face_alive = np.ones(len(self.faces), dtype=bool)
        self.alive = np.ones(len(v), dtype=bool)
        self.version = np.zeros(len(v), dtype=np.int64)
        self.faces_of: list[set[int]] = [set() for _ in range(len(v))]
        self.neighbors: list[set[int]] = [set() for _ in range(len(v))]
        for fi, (a, b, c) in enumerate(self.faces):
            for x in (a, b, c):
                self.faces_of[x].add(fi)
            self.neighbors[a].update((b, c))
            self.neighbors[b].update((a, c))
            self.neighbors[c].update((a, b))

        self.Q = np.zeros((len(v), 4, 4))
        normals = np.cross(v[self.faces[:, 1]] - v[self.faces[:, 0]], v[self.faces[:, 2]] - v[self.faces[:, 0]])
        double_areas = np.linalg.norm(normals, axis=1)
        edge_faces: dict[tuple[int, int], list[int]] = {}
        for fi, face in enumerate(self.faces):
            if double_areas[fi] == 0:
                continue
            n = normals[fi] / double_areas[fi]
            K = _plane_quadric(n, v[face[0]], double_areas[fi] / 2)
            for x in face:
                self.Q[x] += K
            for i in range(3):
                a, b = int(face[i]), int(face[(i + 1) % 3])
                edge_faces.setdefault((min(a, b), max(a, b)), []).append(fi)
        for (a, b), fs in sorted(edge_faces.items()):
            if len(fs) != 1:
                continue
            e = v[b] - v[a]
            m = np.cross(e, normals[fs[0]])
            if np.linalg.norm(m) == 0:
                continue
            K = _plane_quadric(m / np.linalg.norm(m), v[a], BOUNDARY_WEIGHT * (e @ e))
            self.Q[a] += K
            self.Q[b] += K

    def candidates(self, a: int, b: int) -> list[tuple[float, Array]]:
        "Positions for the merged vertex, cheapest first"
        Q = self.Q[a] + self.Q[b]
        options = []
        A = Q[:3, :3]
        if np.linalg.cond(A) < MAX_QUADRIC_CONDITION:
            options.append(np.linalg.solve(A, -Q[:3, 3]))
        options += [self.pos[a], self.pos[b], (self.pos[a] + self.pos[b]) / 2]
        costs = []
        for x in options:
            h = np.append(x, 1.0)
            costs.append(max(float(h @ Q @ h), 0.0))
        order = sorted(range(len(options)), key=lambda i: costs[i])
        return [(costs[i], options[i]) for i in order]

    def link_ok(self, a: int, b: int) -> bool:
        shared = self.faces_of[a] & self.faces_of[b]
        return len(self.neighbors[a] & self.neighbors[b]) == len(shared)

    def flips(self, a: int, b: int, x: Array) -> bool:
        "Would moving a and b to x flip or flatten a remaining face"
        shared = self.faces_of[a] & self.faces_of[b]
        for fi in (self.faces_of[a] | self.faces_of[b]) - shared:
            face = self.faces[fi]
            p = self.pos[face]
            before = np.cross(p[1] - p[0], p[2] - p[0])
            q = p.copy()
            q[(face == a) | (face == b)] = x
            after = np.cross(q[1] - q[0], q[2] - q[0])
            scale = max(np.sum((p[1] - p[0])**2), np.sum((p[2] - p[0])**2), 1e-300)
            if np.linalg.norm(after) <= 1e-12 * scale:
                return True
            if before @ after <= 0 and np.linalg.norm(before) > 0:
                return True
        return False

    def collapse(self, a: int, b: int, x: Array) -> None:
        "Merges b into a at position x"
        shared = self.faces_of[a] & self.faces_of[b]
        for fi in shared:
            self.face_alive[fi] = False
            for y in self.faces[fi]:
                self.faces_of[y].discard(fi)
        for fi in self.faces_of[b]:
            self.faces[fi][self.faces[fi] == b] = a
            self.faces_of[a].add(fi)
        self.faces_of[b] = set()
        for nb in self.neighbors[b]:
            self.neighbors[nb].discard(b)
            if nb != a:
                self.neighbors[nb].add(a)
                self.neighbors[a].add(nb)
        self.neighbors[a].discard(b)
        self.neighbors[b] = set()
        self.pos[a] = x
        self.Q[a] += self.Q[b]
        self.alive[b] = False
        self.version[a] += 1
        self.version[b] += 1


def qslim_decimate(mesh: TriMesh, target: int, *, order: str = "quadric", seed: int = 0) -> Decimation:
    """Edge collapse simplification driven by quadric error

    Edges are collapsed cheapest first, ties going to the edge with the
    smaller vertex pair.  The merged vertex keeps the smaller index and is
    placed at the position minimizing the summed quadric, or the best of
    the endpoints and midpoint when that system is ill conditioned.
    Collapses that break the link condition or flip a face are skipped.

    :param target: Vertex count wanted, at least 4
    :param order: ``quadric`` for the usual greedy order, ``random`` to
       collapse valid edges in a seeded random order (a baseline for
       comparing error)
    """
    n = mesh.n_vertices
    if target < 4:
        raise ArgumentError(f"target vertex count { target } must be at least 4")
    if target > n:
        raise ArgumentError(f"target vertex count { target } exceeds the mesh's { n } vertices")
    if order not in ("quadric", "random"):
        raise ArgumentError(f"unknown collapse order '{ order }'")
    if target == n:
        return Decimation(mesh, np.arange(n), False, 0.0, target)

    state = _Collapser(mesh)
    rng = np.random.default_rng(seed)
    heap: list[tuple[float, int, int, int, int]] = []

    def push(a: int, b: int) -> None:
        a, b = min(a, b), max(a, b)
        key = state.candidates(a, b)[0][0] if order == "quadric" else float(rng.random())
        heapq.heappush(heap, (key, a, b, int(state.version[a]), int(state.version[b])))

    for a, b in mesh.edges:
        push(int(a), int(b))

    count = n
    error = 0.0
    while count > target and heap:
        _, a, b, va, vb = heapq.heappop(heap)
        if not (state.alive[a] and state.alive[b]) or va != state.version[a] or vb != state.version[b]:
            continue
        if b not in state.neighbors[a] or not state.link_ok(a, b):
            continue
        for cost, x in state.candidates(a, b):
            if not state.flips(a, b, x):
                break
        else:
            continue
        state.collapse(a, b, x)
        error += cost
        count -= 1
        for nb in sorted(state.neighbors[a]):
            push(a, nb)

    stalled = count > target
    if stalled:
        log.warning("Decimation of '%s' stalled at %d vertices, wanted %d",
                    mesh.name,
                    count,
                    target,
                    extra={"dfr_mesh": mesh.name, "dfr_achieved": count, "dfr_target": target})

    survivors = np.nonzero(state.alive)[0]
    remap = np.full(n, -1, dtype=np.int64)
    remap[survivors] = np.arange(len(survivors))
    faces = remap[state.faces[state.face_alive]]
    result = TriMesh(state.pos[survivors], faces, f"{ mesh.name }-decimated")
    if len(result.dropped_vertices):
        survivors = np.delete(survivors, result.dropped_vertices)
    return Decimation(result, survivors, stalled, error, target)


###
### Rotations
###


def skew(w: Array) -> Array:
    "Cross product matrices, ``(..., 3) -> (..., 3, 3)``"
    w = np.asarray(w, dtype=np.float64)
    out = np.zeros(w.shape[:-1] + (3, 3))
    out[..., 0, 1] = -w[..., 2]
    out[..., 0, 2] = w[..., 1]
    out[..., 1, 0] = w[..., 2]
    out[..., 1, 2] = -w[..., 0]
    out[..., 2, 0] = -w[..., 1]
    out[..., 2, 1] = w[..., 0]
    return out


def rodrigues_batch(theta: Array) -> Array:
    "Rotation matrices for H x 3 axis-angles, H x 3 x 3"
    theta = np.asarray(theta, dtype=np.float64).reshape(-1, 3)
    phi = np.linalg.norm(theta, axis=1)
    K = skew(theta)
    K2 = K @ K
    small = phi < SMALL_ANGLE
    safe = np.where(small, 1.0, phi)
    # for tiny angles sin(phi)/phi -> 1 and (1 - cos(phi))/phi^2 -> 1/2
    a = np.where(small, 1.0, np.sin(safe) / safe)
    b = np.where(small, 0.5, (1 - np.cos(safe)) / safe**2)
    return np.eye(3) + a[:, None, None] * K + b[:, None, None] * K2


def rodrigues(theta: Array) -> Array:
    """Rotation matrix from an axis-angle vector

    ``R = I + sin(phi) [k]x + (1 - cos(phi)) [k]x^2`` with ``phi = |theta|``
    and ``k = theta / phi``.
    """
    return rodrigues_batch(np.asarray(theta, dtype=np.float64).reshape(1, 3))[0]


def rodrigues_derivative(theta: Array, R: Array | None = None) -> Array:
    """Derivatives of each rotation with respect to each axis-angle component

    :returns: H x 3 x 3 x 3 where ``[h, c]`` is ``dR_h / dtheta_h[c]``
    """
    theta = np.asarray(theta, dtype=np.float64).reshape(-1, 3)
    if R is None:
        R = rodrigues_batch(theta)
    H = theta.shape[0]
    phi2 = np.sum(theta**2, axis=1)
    E = skew(np.eye(3))
    out = np.empty((H, 3, 3, 3))

    small = np.sqrt(phi2) < SMALL_ANGLE_DERIVATIVE
    if np.any(~small):
        t = theta[~small]
        Rs = R[~small]
        Kt = skew(t)
        IminusR = np.eye(3) - Rs
        for c in range(3):
            # dR/dtheta_c = (theta_c [theta]x + [theta x (I - R) e_c]x) R / |theta|^2
            v = np.cross(t, IminusR[:, :, c])
            out[~small, c] = ((t[:, c, None, None] * Kt + skew(v)) @ Rs) / phi2[~small, None, None]
    if np.any(small):
        K = skew(theta[small])
        K2 = K @ K
        for c in range(3):
            Ec = E[c]
            # series of exp(K) differentiated to third order
            out[small, c] = (Ec + (Ec @ K + K @ Ec) / 2 + (Ec @ K2 + K @ Ec @ K + K2 @ Ec) / 6)
    return out


def axis_angle_from_matrix(R: Array) -> Array:
    "Axis-angle vector with angle in [0, pi] for one or more rotation matrices"
    R = np.asarray(R, dtype=np.float64)
    return Rotation.from_matrix(R).as_rotvec()


def wrap_axis_angle(theta: Array) -> Array:
    "Equivalent axis-angles with norm at most pi"
    theta = np.asarray(theta, dtype=np.float64)
    phi = np.linalg.norm(theta, axis=-1, keepdims=True)
    over = phi > np.pi
    if not np.any(over):
        return theta
    wrapped = np.mod(phi, 2 * np.pi)
    # angles past pi become the negative angle about the same axis
    wrapped = np.where(wrapped > np.pi, wrapped - 2 * np.pi, wrapped)
    safe = np.where(phi == 0, 1.0, phi)
    return np.where(over, theta / safe * wrapped, theta)


###
### Graph
###


@dataclass(frozen=True)
class GraphState:
    "Per node axis-angle rotations and translations"
    theta: Array
    "H x 3 axis-angles in radians"
    delta: Array
    "H x 3 translations"

    @classmethod
    def identity(cls, H: int) -> GraphState:
        return cls(np.zeros((H, 3)), np.zeros((H, 3)))

    @classmethod
    def from_vector(cls, x: Array) -> GraphState:
        "Inverse of :meth:`vector`"
        x = np.asarray(x, dtype=np.float64).reshape(2, -1, 3)
        return cls(x[0].copy(), x[1].copy())

    @classmethod
    def rigid(cls, graph: DeformGraph, R: Array, t: Array) -> GraphState:
        "The state moving every node by the rigid motion ``x -> R x + t``"
        R = np.asarray(R, dtype=np.float64)
        theta = np.tile(axis_angle_from_matrix(R), (graph.H, 1))
        delta = graph.nodes @ R.T + np.asarray(t, dtype=np.float64) - graph.nodes
        return cls(theta, delta)

    @property
    def H(self) -> int:
        return self.theta.shape[0]

    def vector(self) -> Array:
        "All 6H parameters, rotations first"
        return np.concatenate([self.theta.ravel(), self.delta.ravel()])

    def wrapped(self) -> GraphState:
        return GraphState(wrap_axis_angle(self.theta), self.delta)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.theta)) and np.all(np.isfinite(self.delta)))


class DeformGraph:
    """Nodes, node adjacency and vertex skinning

    :param nodes: H x 3 rest positions
    :param neighbor_offsets: H + 1 offsets into `neighbor_indices`
    :param neighbor_indices: Adjacent nodes of node h are
       ``neighbor_indices[neighbor_offsets[h]:neighbor_offsets[h+1]]``, sorted
    :param skin_indices: N x K node indices per mesh vertex
    :param skin_weights: N x K weights, each row summing to 1
    :param survivors: Source mesh vertex each node came from, when known
    """

    def __init__(self,
                 nodes: Array,
                 neighbor_offsets: IndexArray,
                 neighbor_indices: IndexArray,
                 skin_indices: IndexArray,
                 skin_weights: Array,
                 survivors: IndexArray | None = None):
        self.nodes = np.asarray(nodes, dtype=np.float64)
        self.neighbor_offsets = np.asarray(neighbor_offsets, dtype=np.int64)
        self.neighbor_indices = np.asarray(neighbor_indices, dtype=np.int64)
        self.skin_indices = np.asarray(skin_indices, dtype=np.int64)
        self.skin_weights = np.asarray(skin_weights, dtype=np.float64)
        self.survivors = survivors
        if self.neighbor_offsets.shape != (self.H + 1, ):
            raise DimensionError(f"expected { self.H + 1 } neighbour offsets, got { self.neighbor_offsets.shape }")
        if self.skin_indices.shape != self.skin_weights.shape:
            raise DimensionError("skin indices and weights differ in shape")
        for a in (self.nodes, self.neighbor_offsets, self.neighbor_indices, self.skin_indices, self.skin_weights):
            a.setflags(write=False)
        counts = np.diff(self.neighbor_offsets)
        self.edges = np.stack([np.repeat(np.arange(self.H), counts), self.neighbor_indices], axis=1)
        "Directed node pairs (h, l) for every l adjacent to h"

    def __repr__(self) -> str:
        return f"<DeformGraph H={ self.H } K={ self.K } N={ self.N }>"

    @property
    def H(self) -> int:
        return self.nodes.shape[0]

    @property
    def K(self) -> int:
        return self.skin_indices.shape[1]

    @property
    def N(self) -> int:
        return self.skin_indices.shape[0]

    def neighbors(self, h: int) -> IndexArray:
        return self.neighbor_indices[self.neighbor_offsets[h]:self.neighbor_offsets[h + 1]]

    def save(self, path: PathLike) -> None:
        """Cache file: magic, u32 version, u64 H, K, N and adjacency count,
        then nodes (f64), offsets (u64), adjacency (u32), skin indices (u32)
        and weights (f64), all little endian"""
        with open(path, "wb") as f:
            f.write(GRAPH_MAGIC + struct.pack("<IQQQQ", GRAPH_VERSION, self.H, self.K, self.N, len(self.neighbor_indices)))
            f.write(np.ascontiguousarray(self.nodes, dtype="<f8").tobytes())
            f.write(np.ascontiguousarray(self.neighbor_offsets, dtype="<u8").tobytes())
            f.write(np.ascontiguousarray(self.neighbor_indices, dtype="<u4").tobytes())
            f.write(np.ascontiguousarray(self.skin_indices, dtype="<u4").tobytes())
            f.write(np.ascontiguousarray(self.skin_weights, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path: PathLike) -> DeformGraph:
        with open(path, "rb") as f:
            data = f.read()
        if len(data) < 40 or data[:4] != GRAPH_MAGIC:
            raise ParseError("not a deformation graph cache file", path=str(path), offset=0)
        version, H, K, N, E = struct.unpack("<IQQQQ", data[4:40])
        if version != GRAPH_VERSION:
            raise ParseError(f"unsupported graph cache version { version }", path=str(path), offset=4)
        sizes = [("<f8", H * 3), ("<u8", H + 1), ("<u4", E), ("<u4", N * K), ("<f8", N * K)]
        expected = 40 + sum(np.dtype(t).itemsize * c for t, c in sizes)
        if len(data) != expected:
            raise ParseError(f"expected { expected } bytes, found { len(data) }", path=str(path), offset=len(data))
        parts, pos = [], 40
        for t, c in sizes:
            parts.append(np.frombuffer(data, dtype=t, count=c, offset=pos))
            pos += np.dtype(t).itemsize * c
        return cls(parts[0].reshape(H, 3), parts[1].astype(np.int64), parts[2].astype(np.int64),
                   parts[3].reshape(N, K).astype(np.int64), parts[4].reshape(N, K).astype(np.float64))


def skin(vertices: Array, nodes: Array, K: int) -> tuple[IndexArray, Array]:
    """Binds each vertex to its K nearest nodes

    Weights are ``(1 - d_k / d_{K+1})^2`` normalized, where d_{K+1} is the
    distance to the next nearest node.  A vertex whose K+1 nearest nodes
    all coincide with it binds rigidly to the first one, and a vertex
    equidistant from all of them gets uniform weights.
    """
    H = nodes.shape[0]
    if not 1 <= K < H:
        raise ArgumentError(f"K={ K } skinning neighbours needs more than K nodes, have { H }")
    idx, d2 = knn.k_nearest(vertices, nodes, K + 1)
    d = np.sqrt(d2)
    reference = d[:, K:K + 1]
    with np.errstate(divide="ignore", invalid="ignore"):
        w = (1 - d[:, :K] / reference)**2
    rigid = reference[:, 0] == 0
    w[rigid] = 0
    w[rigid, 0] = 1
    totals = w.sum(axis=1)
    w[totals == 0] = 1
    w /= w.sum(axis=1, keepdims=True)
    return idx[:, :K], w


def build_graph(mesh: TriMesh, H: int | None = None, K: int = DEFAULT_SKIN_NEIGHBORS) -> DeformGraph:
    """Deformation graph for a mesh

    Nodes are the vertices of the mesh decimated to `H` vertices, with the
    decimated edges as node adjacency.

    :param H: Node count, default half the vertex count
    :param K: Nodes each vertex is skinned to
    """
    if H is None or H == 0:
        H = mesh.n_vertices // 2
    if H < 4:
        raise ArgumentError(f"deformation graph needs at least 4 nodes, asked for { H }")
    if H > mesh.n_vertices:
        raise ArgumentError(f"{ H } nodes is more than the mesh's { mesh.n_vertices } vertices")
    decimation = qslim_decimate(mesh, H)
    nodes = decimation.mesh.vertices
    Hn = len(nodes)
    edges = decimation.mesh.edges
    pairs = np.concatenate([edges, edges[:, ::-1]])
    pairs = pairs[np.lexsort((pairs[:, 1], pairs[:, 0]))]
    offsets = np.zeros(Hn + 1, dtype=np.int64)
    np.add.at(offsets, pairs[:, 0] + 1, 1)
    offsets = np.cumsum(offsets)
    indices, weights = skin(mesh.vertices, nodes, K)
    log.debug("Built deformation graph for '%s'", mesh.name, extra={"dfr_nodes": Hn, "dfr_skin": K})
    return DeformGraph(nodes, offsets, pairs[:, 1], indices, weights, decimation.survivors)


def apply(graph: DeformGraph, state: GraphState, rest: Array, *, rotations: Array | None = None) -> Array:
    """Deformed vertex positions

    ``v' = sum_h w_h [R_h (v - g_h) + g_h + delta_h]``, evaluated as the
    rest position plus the weighted offsets so the identity state returns
    the rest positions exactly.

    :param rest: N x 3 rest positions of the skinned vertices
    :param rotations: Precomputed ``rodrigues_batch(state.theta)``
    """
    rest = np.asarray(rest, dtype=np.float64)
    if rest.shape != (graph.N, 3):
        raise DimensionError(f"expected { graph.N } x 3 rest vertices, got { rest.shape }")
    if state.H != graph.H:
        raise DimensionError(f"state has { state.H } nodes, graph has { graph.H }")
    R = rodrigues_batch(state.theta) if rotations is None else rotations
    idx = graph.skin_indices
    local = rest[:, None, :] - graph.nodes[idx]
    offsets = np.einsum("nkab,nkb->nka", R[idx] - np.eye(3), local) + state.delta[idx]
    return rest + np.einsum("nk,nka->na", graph.skin_weights, offsets)


def pullback(graph: DeformGraph,
             state: GraphState,
             rest: Array,
             grad_vertices: Array,
             *,
             derivatives: Array | None = None) -> tuple[Array, Array]:
    """Chains a gradient with respect to deformed vertices into the state

    :returns: (gradient for theta, gradient for delta), both H x 3
    """
    idx = graph.skin_indices
    w = graph.skin_weights
    grad_vertices = np.asarray(grad_vertices, dtype=np.float64)
    grad_delta = np.zeros((graph.H, 3))
    np.add.at(grad_delta, idx, w[:, :, None] * grad_vertices[:, None, :])

    # M_h = sum_i w_ih grad_i (v_i - g_h)^T, then dE/dtheta_hc = <dR_h/dtheta_hc, M_h>
    local = rest[:, None, :] - graph.nodes[idx]
    outer = w[:, :, None, None] * grad_vertices[:, None, :, None] * local[:, :, None, :]
    M = np.zeros((graph.H, 3, 3))
    np.add.at(M, idx, outer)
    dR = rodrigues_derivative(state.theta) if derivatives is None else derivatives
    grad_theta = np.einsum("hcab,hab->hc", dR, M)
    return grad_theta, grad_delta
