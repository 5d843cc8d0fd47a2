# Registration energies and their analytic gradients

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from . import ArgumentError, DimensionError
from . import knn
from .defgraph import DeformGraph, GraphState, apply, pullback, rodrigues_batch, rodrigues_derivative
from .dfrtypes import Array, IndexArray


@dataclass(frozen=True)
class EnergyWeights:
    "Weights of the energy terms in :func:`e_total`"
    lambda_cd: float
    "Chamfer distance weight"
    lambda_corr: float
    "Correspondence distance weight"
    lambda_arap: float
    "As-rigid-as-possible weight"
    alpha_smooth: float = 0.2
    "Weight of rotation smoothness inside the as-rigid-as-possible term"

    def __post_init__(self):
        values = (self.lambda_cd, self.lambda_corr, self.lambda_arap, self.alpha_smooth)
        if any(not np.isfinite(v) or v < 0 for v in values):
            raise ArgumentError(f"energy weights must be finite and >= 0: { self }")
        if self.lambda_cd == self.lambda_corr == self.lambda_arap == 0:
            raise ArgumentError("at least one energy weight must be non-zero")


def e_corr(deformed: Array, target: Array, pairs: IndexArray) -> tuple[float, Array]:
    """Mean squared distance between corresponding points

    :param pairs: P x 2 (source vertex, target point) indices
    :returns: (value, gradient with respect to `deformed`)
    """
    pairs = np.asarray(pairs, dtype=np.intp).reshape(-1, 2)
    grad = np.zeros_like(deformed)
    if len(pairs) == 0:
        return 0.0, grad
    i, j = pairs[:, 0], pairs[:, 1]
    if i.min() < 0 or i.max() >= len(deformed) or j.min() < 0 or j.max() >= len(target):
        raise ArgumentError("correspondence index out of range")
    diff = deformed[i] - target[j]
    value = float(np.sum(diff**2)) / len(pairs)
    np.add.at(grad, i, 2 * diff / len(pairs))
    return value, grad


def e_cd(deformed: Array,
         target: Array,
         *,
         target_tree: cKDTree | None = None,
         subsample: int | None = None) -> tuple[float, Array]:
    """Symmetric Chamfer distance with squared nearest neighbour distances

    Nearest neighbours are held fixed for the gradient.

    :param target_tree: KD-tree of `target`, reused across evaluations
    :param subsample: Evaluate on this many evenly spaced source vertices
       instead of all of them
    :returns: (value, gradient with respect to `deformed`)
    """
    grad = np.zeros_like(deformed)
    if subsample is not None and subsample < len(deformed):
        if subsample < 1:
            raise ArgumentError(f"subsample must be >= 1, got { subsample }")
        chosen = np.unique(np.linspace(0, len(deformed) - 1, subsample).astype(np.intp))
    else:
        chosen = np.arange(len(deformed))
    v = deformed[chosen]
    N, M = len(v), len(target)

    fwd, fwd_d2 = knn.nearest(v, target, tree=target_tree)
    bwd, bwd_d2 = knn.nearest(target, v)
    value = float(np.sum(fwd_d2)) / N + float(np.sum(bwd_d2)) / M

    g = 2 * (v - target[fwd]) / N
    np.add.at(g, bwd, 2 * (v[bwd] - target) / M)
    grad[chosen] = g
    return value, grad


def e_arap(graph: DeformGraph, state: GraphState, alpha_smooth: float = 0.2) -> tuple[float, Array, Array]:
    """As-rigid-as-possible energy over the node adjacency

    ``sum_h sum_(l in N(h)) |d_hl|^2 + alpha |R_h - R_l|_F^2`` with
    ``d_hl = R_h (g_l - g_h) + delta_h + g_h - (g_l + delta_l)``, which is
    zero for any global rigid motion.

    :returns: (value, gradient for theta, gradient for delta)
    """
    g = graph.nodes
    h, l = graph.edges[:, 0], graph.edges[:, 1]
    R = rodrigues_batch(state.theta)
    dR = rodrigues_derivative(state.theta, R)

    edge = g[l] - g[h]
    d = np.einsum("eab,eb->ea", R[h], edge) + state.delta[h] - state.delta[l] - edge
    D = R[h] - R[l]
    value = float(np.sum(d**2) + alpha_smooth * np.sum(D**2))

    grad_delta = np.zeros_like(state.delta)
    np.add.at(grad_delta, h, 2 * d)
    np.add.at(grad_delta, l, -2 * d)

    # per node matrices G with dE/dtheta_hc = <dR_h/dtheta_hc, G_h>
    G = np.zeros((graph.H, 3, 3))
    np.add.at(G, h, 2 * d[:, :, None] * edge[:, None, :] + 2 * alpha_smooth * D)
    np.add.at(G, l, -2 * alpha_smooth * D)
    grad_theta = np.einsum("hcab,hab->hc", dR, G)
    return value, grad_theta, grad_delta


@dataclass
class Energy:
    "One evaluation of :func:`e_total`"
    total: float
    e_cd: float
    e_corr: float
    e_arap: float
    grad_theta: Array | None
    grad_delta: Array | None
    deformed: Array
    "Vertex positions the energy was evaluated at"

    def is_finite(self) -> bool:
        values = [self.total, self.e_cd, self.e_corr, self.e_arap]
        if self.grad_theta is not None:
            return bool(np.all(np.isfinite(values)) and np.all(np.isfinite(self.grad_theta))
                        and np.all(np.isfinite(self.grad_delta)))
        return bool(np.all(np.isfinite(values)))


def e_total(graph: DeformGraph,
            state: GraphState,
            rest: Array,
            target: Array,
            pairs: IndexArray,
            weights: EnergyWeights,
            *,
            target_tree: cKDTree | None = None,
            subsample: int | None = None,
            gradient: bool = True) -> Energy:
    """Weighted sum of the Chamfer, correspondence and rigidity energies

    Vertex gradients of the first two are chained through the skinning into
    the state.

    :param target: M x 3 target points
    :param pairs: P x 2 correspondences
    """
    target = np.asarray(target, dtype=np.float64)
    if target.ndim != 2 or target.shape[1] != 3:
        raise DimensionError(f"target must be M x 3, not { target.shape }")
    R = rodrigues_batch(state.theta)
    deformed = apply(graph, state, rest, rotations=R)
    cd, grad_cd = e_cd(deformed, target, target_tree=target_tree, subsample=subsample)
    corr, grad_corr = e_corr(deformed, target, pairs)
    arap, arap_theta, arap_delta = e_arap(graph, state, weights.alpha_smooth)
    total = weights.lambda_cd * cd + weights.lambda_corr * corr + weights.lambda_arap * arap
    if not gradient:
        return Energy(total, cd, corr, arap, None, None, deformed)

    grad_vertices = weights.lambda_cd * grad_cd + weights.lambda_corr * grad_corr
    grad_theta, grad_delta = pullback(graph, state, rest, grad_vertices)
    grad_theta += weights.lambda_arap * arap_theta
    grad_delta += weights.lambda_arap * arap_delta
    return Energy(total, cd, corr, arap, grad_theta, grad_delta, deformed)
