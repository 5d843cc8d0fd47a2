# Cotangent Laplace-Beltrami operator and its eigenbasis

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse
import scipy.sparse.linalg

from . import ArgumentError, ConvergenceError, DimensionError, ParseError
from .dfrtypes import Array, PathLike
from .geometry import TriMesh

log = logging.getLogger(__name__)

# dense generalized eigensolver up to this many vertices
DENSE_EIGEN_LIMIT = 3000

# shift used by the iterative solver, just below the zero eigenvalue
SHIFT = -1e-8

# relative residual accepted from the eigensolver
RESIDUAL_TOLERANCE = 1e-6

BASIS_MAGIC = b"DFRB"
BASIS_VERSION = 1


def cotan_laplacian(mesh: TriMesh, *, clamp: bool = False) -> tuple[scipy.sparse.csr_matrix, Array]:
    """Stiffness matrix and lumped mass of a mesh

    The stiffness matrix is positive semidefinite with off diagonal
    entries ``-(cot a + cot b) / 2`` for the two angles opposite each edge,
    and rows summing to zero.  The mass of a vertex is a third of the area
    of its faces.

    :param clamp: Replace negative cotangent weights (obtuse angles) with
       zero
    :returns: (L as CSR, mass vector)
    """
    v = mesh.vertices
    f = mesh.faces
    n = mesh.n_vertices
    areas = mesh.face_areas
    good = areas > 0
    if not good.all():
        log.warning("Skipping %d zero area faces of mesh '%s' in the Laplacian",
                    int((~good).sum()),
                    mesh.name,
                    extra={"dfr_mesh": mesh.name, "dfr_degenerate_faces": int((~good).sum())})
    f = f[good]
    double_area = 2 * areas[good]

    rows, cols, weights = [], [], []
    # the angle at corner c is opposite edge (a, b)
    for a, b, c in ((0, 1, 2), (1, 2, 0), (2, 0, 1)):
        ea = v[f[:, a]] - v[f[:, c]]
        eb = v[f[:, b]] - v[f[:, c]]
        cot = np.einsum("ij,ij->i", ea, eb) / double_area
        w = 0.5 * cot
        if clamp:
            w = np.maximum(w, 0)
        rows.append(f[:, a])
        cols.append(f[:, b])
        weights.append(w)
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    weights = np.concatenate(weights)

    W = scipy.sparse.coo_matrix((weights, (rows, cols)), shape=(n, n)).tocsr()
    # each face contributes to one triangle, symmetrize into both
    W = W + W.T
    L = scipy.sparse.diags(np.asarray(W.sum(axis=1)).ravel()) - W
    L = L.tocsr()
    L.sum_duplicates()
    L.sort_indices()

    mass = np.zeros(n)
    np.add.at(mass, f.ravel(), np.repeat(areas[good] / 3, 3))
    if np.any(mass <= 0):
        floor = 1e-12 * (mass.mean() if mass.mean() > 0 else 1.0)
        log.warning("%d vertices of mesh '%s' touch only zero area faces, flooring their mass",
                    int((mass <= 0).sum()),
                    mesh.name,
                    extra={"dfr_mesh": mesh.name})
        mass = np.maximum(mass, floor)
    return L, mass


@dataclass(frozen=True)
class SpectralBasis:
    """Leading eigenfunctions of ``L phi = lambda M phi``"""

    evecs: Array
    "n x k eigenfunctions, orthonormal under the mass inner product"
    evals: Array
    "k eigenvalues in ascending order, all >= 0"
    mass: Array
    "n lumped vertex masses"

    @property
    def k(self) -> int:
        return self.evecs.shape[1]

    @property
    def n(self) -> int:
        return self.evecs.shape[0]

    def truncate(self, k: int) -> SpectralBasis:
        "The first `k` eigenpairs"
        if not 1 <= k <= self.k:
            raise ArgumentError(f"k={ k } must be between 1 and { self.k }")
        return SpectralBasis(self.evecs[:, :k], self.evals[:k], self.mass)

    def save(self, path: PathLike) -> None:
        with open(path, "wb") as f:
            f.write(BASIS_MAGIC + struct.pack("<IQQ", BASIS_VERSION, self.n, self.k))
            f.write(np.ascontiguousarray(self.evals, dtype="<f8").tobytes())
            f.write(np.ascontiguousarray(self.mass, dtype="<f8").tobytes())
            f.write(np.ascontiguousarray(self.evecs, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path: PathLike) -> SpectralBasis:
        with open(path, "rb") as f:
            data = f.read()
        if len(data) < 24 or data[:4] != BASIS_MAGIC:
            raise ParseError("not a spectral basis cache file", path=str(path), offset=0)
        version, n, k = struct.unpack("<IQQ", data[4:24])
        if version != BASIS_VERSION:
            raise ParseError(f"unsupported basis cache version { version }", path=str(path), offset=4)
        expected = 24 + 8 * (k + n + n * k)
        if len(data) != expected:
            raise ParseError(f"expected { expected } bytes, found { len(data) }", path=str(path), offset=len(data))
        values = np.frombuffer(data, dtype="<f8", offset=24).astype(np.float64)
        return cls(values[k + n:].reshape(n, k), values[:k], values[k:k + n])


def eigenbasis(L: scipy.sparse.spmatrix, mass: Array, k: int = 50) -> SpectralBasis:
    """The `k` smallest generalized eigenpairs

    Each eigenfunction has its entry of largest magnitude made positive,
    the first such entry when several share the magnitude.

    :raises ArgumentError: k is larger than the vertex count
    :raises ConvergenceError: residuals exceed tolerance, with the residual
       norms attached
    """
    n = L.shape[0]
    mass = np.asarray(mass, dtype=np.float64)
    if mass.shape != (n, ):
        raise DimensionError(f"mass has shape { mass.shape }, expected ({ n },)")
    if not 1 <= k <= n:
        raise ArgumentError(f"k={ k } must be between 1 and the vertex count { n }")

    M = scipy.sparse.diags(mass)
    if n <= DENSE_EIGEN_LIMIT or k >= n - 1:
        evals, evecs = scipy.linalg.eigh(L.toarray(), np.diag(mass), subset_by_index=[0, k - 1])
    else:
        try:
            evals, evecs = scipy.sparse.linalg.eigsh(L.tocsc(), k=k, M=M.tocsc(), sigma=SHIFT, which="LM")
        except scipy.sparse.linalg.ArpackNoConvergence as exc:
            raise ConvergenceError(f"eigensolver did not converge: { exc }") from exc
        order = np.argsort(evals, kind="stable")
        evals, evecs = evals[order], evecs[:, order]

    # renormalize under the mass inner product
    evecs = evecs / np.sqrt(np.einsum("ij,i,ij->j", evecs, mass, evecs))
    pivot = np.argmax(np.abs(evecs), axis=0)
    signs = np.sign(evecs[pivot, np.arange(k)])
    signs[signs == 0] = 1
    evecs = evecs * signs

    Lphi = L @ evecs
    residuals = np.linalg.norm(Lphi - (mass[:, None] * evecs) * evals, axis=0)
    scale = np.linalg.norm(Lphi, axis=0)
    # the constant eigenfunction has Lphi ~ 0, so allow an absolute floor
    floor = 1e-9 * abs(L).max() * np.linalg.norm(evecs, axis=0)
    if np.any(residuals > RESIDUAL_TOLERANCE * scale + floor):
        raise ConvergenceError(f"eigenpair residuals up to { residuals.max():.3g } exceed tolerance",
                               residuals=residuals)

    evals = np.maximum(evals, 0)
    return SpectralBasis(evecs, evals, mass)


def mesh_basis(mesh: TriMesh, k: int = 50, *, clamp: bool = False) -> SpectralBasis:
    "Laplacian and eigenbasis in one step, with k capped at the vertex count"
    L, mass = cotan_laplacian(mesh, clamp=clamp)
    return eigenbasis(L, mass, min(k, mesh.n_vertices))


def project(basis: SpectralBasis, f: Array) -> Array:
    """Spectral coefficients ``Phi^T M f`` of per-vertex functions

    :param f: n x d matrix or length n vector
    """
    f = np.asarray(f, dtype=np.float64)
    if f.shape[0] != basis.n:
        raise DimensionError(f"function has { f.shape[0] } rows, basis has { basis.n } vertices")
    if f.ndim == 1:
        return basis.evecs.T @ (basis.mass * f)
    return basis.evecs.T @ (basis.mass[:, None] * f)


def reconstruct(basis: SpectralBasis, coefficients: Array) -> Array:
    "Per-vertex functions from spectral coefficients, ``Phi c``"
    coefficients = np.asarray(coefficients, dtype=np.float64)
    if coefficients.shape[0] != basis.k:
        raise DimensionError(f"{ coefficients.shape[0] } coefficients for a basis of size { basis.k }")
    return basis.evecs @ coefficients
