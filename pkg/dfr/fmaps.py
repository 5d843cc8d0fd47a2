# Functional maps, soft maps and the spectral losses evaluated on feature
# matrices.  Nothing here trains anything: features come from files.

from __future__ import annotations

import logging
import os
import struct
from dataclasses import dataclass, field
from typing import Literal

import numpy as np
import scipy.linalg
from scipy.spatial.distance import cdist
from scipy.special import logsumexp, softmax

from . import ArgumentError, DimensionError, ParseError, SingularityError
from . import knn
from .dfrtypes import Array, IndexArray, PathLike
from .spectral import SpectralBasis, project

log = logging.getLogger(__name__)

FEATURE_MAGIC = b"DFRF"
FEATURE_VERSION = 1

DEFAULT_FEATURE_DIMENSION = 128

# soft map temperature used for diagnostics, after unit variance scaling
DEFAULT_ALPHA = 100.0

# rows of a soft map materialized at once
SOFTMAP_BLOCK = 512


class FeatureMatrix:
    """Per-point embeddings of one shape

    :param values: n x d matrix, all finite
    :param shape_name: Name of the shape the rows belong to
    """

    def __init__(self, values: Array, shape_name: str = ""):
        values = np.array(values, dtype=np.float64)
        if values.ndim != 2:
            raise DimensionError(f"features must be n x d, not { values.shape }")
        if not np.all(np.isfinite(values)):
            raise ArgumentError(f"features for '{ shape_name }' contain non-finite values")
        values.setflags(write=False)
        self.values = values
        self.shape_name = shape_name

    def __repr__(self) -> str:
        return f"<FeatureMatrix '{ self.shape_name }' n={ self.n } d={ self.d }>"

    def __len__(self) -> int:
        return self.values.shape[0]

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def d(self) -> int:
        return self.values.shape[1]

    def check_points(self, count: int, what: str = "shape") -> None:
        if self.n != count:
            raise DimensionError(f"features for '{ self.shape_name }' have { self.n } rows but the { what } has "
                                 f"{ count } points")


def _values(features: FeatureMatrix | Array) -> Array:
    if isinstance(features, FeatureMatrix):
        return features.values
    values = np.asarray(features, dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise ArgumentError("features contain non-finite values")
    return values


def save_features(features: FeatureMatrix, path: PathLike) -> None:
    """Writes a feature file and its ``.txt`` sidecar naming the shape

    The binary layout is the magic, u32 version, u64 n, u64 d and then the
    values as little endian f64 row by row.
    """
    path = os.fspath(path)
    with open(path, "wb") as f:
        f.write(FEATURE_MAGIC + struct.pack("<IQQ", FEATURE_VERSION, features.n, features.d))
        f.write(np.ascontiguousarray(features.values, dtype="<f8").tobytes())
    with open(path + ".txt", "wt", encoding="utf8") as f:
        f.write(f"shape = { features.shape_name }\npoints = { features.n }\n")


def load_features(path: PathLike, shape_name: str | None = None, points: int | None = None) -> FeatureMatrix:
    """Reads a feature file, checking the sidecar when present

    :param shape_name: Used when there is no sidecar
    :param points: Expected row count
    """
    path = os.fspath(path)
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 24 or data[:4] != FEATURE_MAGIC:
        raise ParseError("not a feature file", path=path, offset=0)
    version, n, d = struct.unpack("<IQQ", data[4:24])
    if version != FEATURE_VERSION:
        raise ParseError(f"unsupported feature file version { version }", path=path, offset=4)
    if len(data) != 24 + 8 * n * d:
        raise ParseError(f"expected { 24 + 8 * n * d } bytes, found { len(data) }", path=path, offset=len(data))
    values = np.frombuffer(data, dtype="<f8", offset=24).reshape(n, d)

    sidecar = path + ".txt"
    if os.path.exists(sidecar):
        with open(sidecar, "rt", encoding="utf8") as f:
            for number, line in enumerate(f, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                key, sep, value = line.partition("=")
                key, value = key.strip(), value.strip()
                if not sep or key not in ("shape", "points"):
                    raise ParseError(f"unrecognised sidecar line { line!r}", path=sidecar, line=number)
                if key == "shape":
                    shape_name = value
                elif value != str(n):
                    raise ParseError(f"sidecar says { value } points, feature file has { n }", path=sidecar, line=number)
    try:
        features = FeatureMatrix(values, shape_name or os.path.splitext(os.path.basename(path))[0])
    except ArgumentError as exc:
        raise ParseError(str(exc), path=path) from None
    if points is not None:
        features.check_points(points)
    return features


def unit_variance(*features: FeatureMatrix | Array) -> list[Array]:
    "Scales feature matrices by one common factor so their pooled values have unit variance"
    values = [_values(f) for f in features]
    std = np.concatenate([v.ravel() for v in values]).std()
    if std == 0:
        return values
    return [v / std for v in values]


@dataclass(frozen=True)
class FunctionalMap:
    "Maps spectral coefficients of one shape to those of another"
    C: Array
    "k2 x k1 matrix"
    direction: Literal["1->2", "2->1"] = "1->2"

    @property
    def k(self) -> int:
        return self.C.shape[0]


def solve_fmap(A1: Array, A2: Array, lambda_reg: float, evals1: Array, evals2: Array) -> FunctionalMap:
    """Least squares map ``C A1 ~ A2`` with Laplacian commutativity regularization

    Minimizes ``|C A1 - A2|^2 + lambda_reg * sum_pq ((evals2[p] - evals1[q]) C[p,q])^2``.
    Each row of C is independent, with normal equations
    ``(A1 A1^T + lambda_reg diag(D_p^2)) c_p = A1 a2_p``.

    :param A1: k1 x d spectral coefficients of the shape 1 features
    :param A2: k2 x d spectral coefficients of the shape 2 features
    :raises SingularityError: lambda_reg is zero and A1 is rank deficient
    """
    A1 = np.asarray(A1, dtype=np.float64)
    A2 = np.asarray(A2, dtype=np.float64)
    evals1 = np.asarray(evals1, dtype=np.float64)
    evals2 = np.asarray(evals2, dtype=np.float64)
    if A1.ndim != 2 or A2.ndim != 2 or A1.shape[1] != A2.shape[1]:
        raise DimensionError(f"coefficient shapes { A1.shape } and { A2.shape } disagree on d")
    k1, k2 = A1.shape[0], A2.shape[0]
    if evals1.shape != (k1, ) or evals2.shape != (k2, ):
        raise DimensionError(f"eigenvalue counts { evals1.shape } { evals2.shape } do not match k1={ k1 } k2={ k2 }")
    if lambda_reg < 0:
        raise ArgumentError(f"lambda_reg must be >= 0, got { lambda_reg }")

    gram = A1 @ A1.T
    rhs = A1 @ A2.T
    if lambda_reg == 0 and np.linalg.matrix_rank(gram) < k1:
        raise SingularityError("functional map normal equations are rank deficient, use lambda_reg > 0")

    C = np.empty((k2, k1))
    for p in range(k2):
        system = gram + lambda_reg * np.diag((evals2[p] - evals1)**2)
        try:
            C[p] = scipy.linalg.solve(system, rhs[:, p], assume_a="sym")
        except scipy.linalg.LinAlgError as exc:
            raise SingularityError(f"functional map row { p } is singular, use lambda_reg > 0") from exc
    return FunctionalMap(C)


class SoftMap:
    """Row stochastic map ``P[i, j] = softmax_j(-alpha |F1[i] - F2[j]|)``

    Rows are computed on demand in blocks so the full n1 x n2 matrix is
    only materialized by :meth:`dense`.
    """

    def __init__(self, F1: Array, F2: Array, alpha: float):
        self.F1 = F1
        self.F2 = F2
        self.alpha = alpha

    @property
    def shape(self) -> tuple[int, int]:
        return self.F1.shape[0], self.F2.shape[0]

    def rows(self, start: int, stop: int) -> Array:
        "Rows ``start:stop`` of the map"
        dist = cdist(self.F1[start:stop], self.F2)
        # softmax subtracts the row maximum before exponentiating
        return softmax(-self.alpha * dist, axis=1)

    def blocks(self):
        "Yields (start, rows) covering the whole map"
        for start in range(0, self.shape[0], SOFTMAP_BLOCK):
            yield start, self.rows(start, start + SOFTMAP_BLOCK)

    def dense(self) -> Array:
        return np.vstack([rows for _, rows in self.blocks()])

    def __matmul__(self, other: Array) -> Array:
        other = np.asarray(other, dtype=np.float64)
        if other.shape[0] != self.shape[1]:
            raise DimensionError(f"soft map has { self.shape[1] } columns, operand has { other.shape[0] } rows")
        return np.vstack([rows @ other for _, rows in self.blocks()])

    def argmax(self) -> IndexArray:
        "Most likely column of each row, first on ties"
        return np.concatenate([np.argmax(rows, axis=1) for _, rows in self.blocks()])


def soft_map(F1: FeatureMatrix | Array, F2: FeatureMatrix | Array, alpha: float) -> SoftMap:
    "Soft map from shape 1 points to shape 2 points at temperature `alpha`"
    v1, v2 = _values(F1), _values(F2)
    if alpha <= 0:
        raise ArgumentError(f"alpha must be > 0, got { alpha }")
    if v1.ndim != 2 or v2.ndim != 2 or v1.shape[1] != v2.shape[1]:
        raise DimensionError(f"feature shapes { v1.shape } and { v2.shape } disagree on d")
    return SoftMap(v1, v2, alpha)


@dataclass(frozen=True)
class DFMWeights:
    "Weights combining the functional map losses"
    bij: float = 1.0
    ortho: float = 1.0
    align: float = 1e-4


@dataclass
class FmapLosses:
    "Structure and alignment losses for a pair of functional maps"
    e_bij: float
    "``|C12 C21 - I|_F^2``"
    e_ortho: float
    "``|C12 C12^T - I|_F + |C21 C21^T - I|_F``"
    e_align: float
    "Squared Frobenius distances to the maps induced by the soft maps"
    e_align_unsquared: float
    "Same as :attr:`e_align` with plain Frobenius norms"
    e_dfm: float
    "Weighted sum using :attr:`e_align`"
    weights: DFMWeights = field(default_factory=DFMWeights)


def e_bij(C12: Array, C21: Array) -> float:
    if C12.shape != C21.T.shape:
        raise DimensionError(f"map shapes { C12.shape } and { C21.shape } are not transposes")
    return float(np.sum((C12 @ C21 - np.eye(C12.shape[0]))**2))


def e_ortho(C12: Array, C21: Array) -> float:
    return float(
        np.linalg.norm(C12 @ C12.T - np.eye(C12.shape[0])) + np.linalg.norm(C21 @ C21.T - np.eye(C21.shape[0])))


def induced_fmap(pi: SoftMap | Array, basis_from: SpectralBasis, basis_to: SpectralBasis) -> Array:
    """Functional map ``Phi_to^T M_to Pi Phi_from`` given by a point map

    `pi` maps functions on `basis_from` to functions on `basis_to`, so it
    has ``basis_to.n`` rows.
    """
    transported = pi @ basis_from.evecs
    return project(basis_to, transported)


def fmap_losses(C12: Array,
                C21: Array,
                pi12: SoftMap | Array,
                pi21: SoftMap | Array,
                basis1: SpectralBasis,
                basis2: SpectralBasis,
                weights: DFMWeights = DFMWeights()) -> FmapLosses:
    """All functional map losses for one shape pair

    :param C12: Map from basis 1 coefficients to basis 2 coefficients
    :param C21: The reverse map
    :param pi12: Soft map from shape 1 points to shape 2 points
    :param pi21: Soft map from shape 2 points to shape 1 points
    """
    C12 = np.asarray(C12, dtype=np.float64)
    C21 = np.asarray(C21, dtype=np.float64)
    if C12.shape != (basis2.k, basis1.k) or C21.shape != (basis1.k, basis2.k):
        raise DimensionError(f"maps { C12.shape } { C21.shape } do not match basis sizes { basis1.k } { basis2.k }")
    if tuple(pi12.shape) != (basis1.n, basis2.n) or tuple(pi21.shape) != (basis2.n, basis1.n):
        raise DimensionError(f"soft maps { pi12.shape } { pi21.shape } do not match shapes { basis1.n } { basis2.n }")

    bij = e_bij(C12, C21)
    ortho = e_ortho(C12, C21)
    # pi21 transports shape 1 functions onto shape 2
    r12 = C12 - induced_fmap(pi21, basis1, basis2)
    r21 = C21 - induced_fmap(pi12, basis2, basis1)
    align = float(np.sum(r12**2) + np.sum(r21**2))
    align_unsquared = float(np.linalg.norm(r12) + np.linalg.norm(r21))
    return FmapLosses(bij, ortho, align, align_unsquared, weights.bij * bij + weights.ortho * ortho + weights.align * align,
                      weights)


def nce_loss(F: FeatureMatrix | Array, G: FeatureMatrix | Array, gamma: float) -> float:
    """Point contrastive loss between two embeddings of the same points

    ``-sum_i log(exp(<F_i, G_i>/gamma) / sum_j exp(<F_i, G_j>/gamma))``
    """
    f, g = _values(F), _values(G)
    if gamma <= 0:
        raise ArgumentError(f"gamma must be > 0, got { gamma }")
    if f.shape != g.shape:
        raise DimensionError(f"feature shapes { f.shape } and { g.shape } differ")
    total = 0.0
    for start in range(0, f.shape[0], SOFTMAP_BLOCK):
        logits = f[start:start + SOFTMAP_BLOCK] @ g.T / gamma
        diagonal = logits[np.arange(logits.shape[0]), np.arange(start, start + logits.shape[0])]
        total += float(np.sum(logsumexp(logits, axis=1) - diagonal))
    return total


def pair_nce_loss(F1: FeatureMatrix | Array, G1: FeatureMatrix | Array, F2: FeatureMatrix | Array,
                  G2: FeatureMatrix | Array, gamma: float) -> float:
    "Contrastive loss summed over both shapes of a pair"
    return nce_loss(F1, G1, gamma) + nce_loss(F2, G2, gamma)


def combined_loss(dfm: float, nce: float, lambda_nce: float = 1.0) -> float:
    "Total training objective value from its two parts"
    return dfm + lambda_nce * nce


def fmap_to_pointmap(C12: Array, basis1: SpectralBasis | Array, basis2: SpectralBasis | Array) -> IndexArray:
    """Vertex map from shape 1 to shape 2 by nearest rows of ``Phi1 C12^T`` among rows of ``Phi2``"""
    phi1 = basis1.evecs if isinstance(basis1, SpectralBasis) else np.asarray(basis1, dtype=np.float64)
    phi2 = basis2.evecs if isinstance(basis2, SpectralBasis) else np.asarray(basis2, dtype=np.float64)
    C12 = np.asarray(C12, dtype=np.float64)
    if C12.shape != (phi2.shape[1], phi1.shape[1]):
        raise DimensionError(f"map { C12.shape } does not match bases of size { phi1.shape[1] } and { phi2.shape[1] }")
    idx, _ = knn.nearest(phi1 @ C12.T, phi2)
    return idx


@dataclass
class Diagnosis:
    "Everything computed for one shape pair by :func:`diagnose`"
    C12: FunctionalMap
    C21: FunctionalMap
    losses: FmapLosses
    nce: float
    combined: float
    pointmap12: IndexArray
    pointmap21: IndexArray


def diagnose(F1: FeatureMatrix,
             F2: FeatureMatrix,
             basis1: SpectralBasis,
             basis2: SpectralBasis,
             *,
             G1: FeatureMatrix | None = None,
             G2: FeatureMatrix | None = None,
             lambda_reg: float = 1e-3,
             alpha: float = DEFAULT_ALPHA,
             gamma: float = 0.07,
             weights: DFMWeights = DFMWeights(),
             lambda_nce: float = 1.0) -> Diagnosis:
    """Scores a pair of feature matrices the way the training losses would

    Features are scaled to unit variance before the soft maps.  `G1` and
    `G2` are the second embeddings for the contrastive term and default to
    the first ones.
    """
    F1.check_points(basis1.n)
    F2.check_points(basis2.n)
    A1 = project(basis1, F1.values)
    A2 = project(basis2, F2.values)
    C12 = solve_fmap(A1, A2, lambda_reg, basis1.evals, basis2.evals)
    C21 = solve_fmap(A2, A1, lambda_reg, basis2.evals, basis1.evals)
    C21 = FunctionalMap(C21.C, "2->1")
    s1, s2 = unit_variance(F1, F2)
    losses = fmap_losses(C12.C, C21.C, soft_map(s1, s2, alpha), soft_map(s2, s1, alpha), basis1, basis2, weights)
    nce = pair_nce_loss(F1, G1 if G1 is not None else F1, F2, G2 if G2 is not None else F2, gamma)
    return Diagnosis(C12, C21, losses, nce, combined_loss(losses.e_dfm, nce, lambda_nce),
                     fmap_to_pointmap(C12.C, basis1, basis2), fmap_to_pointmap(C21.C, basis2, basis1))
