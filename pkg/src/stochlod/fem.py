"""P1 finite elements on Kuhn meshes and the quasi-interpolation operator.

All global matrices and vectors live on the free (interior) vertices unless
``full=True`` is requested; homogeneous Dirichlet data are imposed by
eliminating the boundary vertices.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .mesh import Mesh, Patch

# Symmetric quadrature rules of degree 2 on the reference simplex, in
# barycentric coordinates with weights summing to one.
_A3 = 0.5854101966249685
_B3 = 0.1381966011250105
_QUADRATURE = {
    1: (
        np.array([[0.5 + 0.5 / math.sqrt(3), 0.5 - 0.5 / math.sqrt(3)],
                  [0.5 - 0.5 / math.sqrt(3), 0.5 + 0.5 / math.sqrt(3)]]),
        np.array([0.5, 0.5]),
    ),
    2: (
        np.array([[0.5, 0.5, 0.0], [0.0, 0.5, 0.5], [0.5, 0.0, 0.5]]),
        np.full(3, 1.0 / 3.0),
    ),
    3: (
        np.array([[_A3, _B3, _B3, _B3], [_B3, _A3, _B3, _B3],
                  [_B3, _B3, _A3, _B3], [_B3, _B3, _B3, _A3]]),
        np.full(4, 0.25),
    ),
}


@dataclass(eq=False)
class FeFunction:
    """P1 function given by its values at the free vertices of ``mesh``."""

    mesh: Mesh
    values: np.ndarray
    space: str = "coarse"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.mesh.free.size,):
            raise ValueError(
                f"expected {self.mesh.free.size} free values, got shape {self.values.shape}"
            )

    def full(self) -> np.ndarray:
        return to_full(self.mesh, self.values)

    def gradients(self) -> np.ndarray:
        return element_gradients(self.mesh, self.values)


def _values(v):
    return v.values if isinstance(v, FeFunction) else np.asarray(v, dtype=float)


def to_full(mesh: Mesh, free_values: np.ndarray) -> np.ndarray:
    """Extend free-vertex values by zero to all vertices."""
    free_values = np.asarray(free_values)
    out = np.zeros((mesh.n_vertices,) + free_values.shape[1:])
    out[mesh.free] = free_values
    return out


def element_gradients(mesh: Mesh, v) -> np.ndarray:
    """Piecewise constant gradient of a P1 function, shape ``(ne, d)``."""
    full = to_full(mesh, _values(v))
    return np.einsum("na,nai->ni", full[mesh.elements], mesh.gradients)


def coefficient_array(mesh: Mesh, coeff) -> np.ndarray:
    """Normalize a coefficient to an ``(ne, d, d)`` array of element matrices."""
    values = getattr(coeff, "values", coeff)
    d, ne = mesh.d, mesh.n_elements
    values = np.asarray(values, dtype=float)
    if values.ndim == 0:
        return np.broadcast_to(values * np.eye(d), (ne, d, d))
    if values.shape == (ne,):
        return values[:, None, None] * np.eye(d)
    if values.shape == (ne, d, d):
        return values
    raise ValueError(f"coefficient of shape {values.shape} does not match mesh with {ne} elements in d={d}")


def _assemble(mesh: Mesh, local: np.ndarray, full: bool) -> sp.csr_matrix:
    k = mesh.d + 1
    rows = np.repeat(mesh.elements, k, axis=1).ravel()
    cols = np.tile(mesh.elements, (1, k)).ravel()
    nv = mesh.n_vertices
    M = sp.csr_matrix((local.ravel(), (rows, cols)), shape=(nv, nv))
    if full:
        return M
    return M[mesh.free][:, mesh.free].tocsr()


def assemble_stiffness(mesh: Mesh, coeff=1.0, full: bool = False) -> sp.csr_matrix:
    """Stiffness matrix ``sum_tau |tau| grad phi_i . A_tau grad phi_j``.

    Exact for element-wise constant coefficients.  ``coeff`` may be a scalar,
    one scalar per element, an ``(ne, d, d)`` array or a
    :class:`~stochlod.randomfield.CoefficientField`.
    """
    A = coefficient_array(mesh, coeff)
    G = mesh.gradients
    local = mesh.volumes[:, None, None] * np.einsum("nai,nij,nbj->nab", G, A, G)
    return _assemble(mesh, local, full)


def assemble_mass(mesh: Mesh, full: bool = False) -> sp.csr_matrix:
    d = mesh.d
    ref = (np.ones((d + 1, d + 1)) + np.eye(d + 1)) / ((d + 1) * (d + 2))
    local = mesh.volumes[:, None, None] * ref
    return _assemble(mesh, local, full)


def assemble_load(mesh: Mesh, f=1.0, full: bool = False) -> np.ndarray:
    """Load vector ``b_i = int f phi_i`` with a degree-2 simplex rule.

    ``f`` is a constant or a callable taking points of shape ``(m, d)``.
    """
    d = mesh.d
    lam, w = _QUADRATURE[d]
    X = mesh.vertices[mesh.elements]
    if callable(f):
        pts = np.einsum("qa,nai->nqi", lam, X)
        fq = np.asarray(f(pts.reshape(-1, d)), dtype=float).reshape(mesh.n_elements, -1)
    else:
        fq = np.full((mesh.n_elements, w.size), float(f))
    local = mesh.volumes[:, None] * np.einsum("q,nq,qa->na", w, fq, lam)
    b = np.bincount(mesh.elements.ravel(), weights=local.ravel(), minlength=mesh.n_vertices)
    return b if full else b[mesh.free]


def l2_norm(mesh: Mesh, v) -> float:
    v = _values(v)
    return float(np.sqrt(v @ (assemble_mass(mesh) @ v)))


def _barycentric(mesh: Mesh, elements: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Barycentric coordinates of ``points[i]`` in ``mesh`` element ``elements[i]``."""
    X0 = mesh.vertices[mesh.elements[elements, 0]]
    Jinv = mesh.gradients[elements, 1:, :]
    lam = np.empty((points.shape[0], mesh.d + 1))
    lam[:, 1:] = np.einsum("nij,nj->ni", Jinv, points - X0)
    lam[:, 0] = 1.0 - lam[:, 1:].sum(axis=1)
    lam[np.abs(lam) < 1e-12] = 0.0
    return lam


def _check_nested(coarse: Mesh, fine: Mesh):
    if fine.parent_map is None or fine.domain != coarse.domain:
        raise ValueError("fine mesh is not a refinement of the coarse mesh")
    if fine.parent_map.max() >= coarse.n_elements or np.any(np.asarray(fine.n) % np.asarray(coarse.n)):
        raise ValueError("fine mesh is not nested in the coarse mesh")
    # the parent map must refer to this coarse mesh
    lam = _barycentric(coarse, fine.parent_map, fine.barycenters)
    if np.any(lam < -1e-10):
        raise ValueError("fine parent map does not match the coarse mesh")


def prolongation(coarse: Mesh, fine: Mesh, full: bool = False) -> sp.csr_matrix:
    """Embedding of coarse P1 functions into the fine P1 space (nodal interpolation)."""
    _check_nested(coarse, fine)
    # one fine element per fine vertex suffices: the vertex lies in its closure
    owner = np.empty(fine.n_vertices, dtype=np.int64)
    owner[fine.elements.ravel()] = np.repeat(np.arange(fine.n_elements), fine.d + 1)
    parent = fine.parent_map[owner]
    lam = _barycentric(coarse, parent, fine.vertices)
    rows = np.repeat(np.arange(fine.n_vertices), coarse.d + 1)
    P = sp.csr_matrix(
        (lam.ravel(), (rows, coarse.elements[parent].ravel())),
        shape=(fine.n_vertices, coarse.n_vertices),
    )
    P.eliminate_zeros()
    if full:
        return P
    return P[fine.free][:, coarse.free].tocsr()


@dataclass(eq=False)
class QuasiInterpolator:
    """Element-wise L2 projection onto discontinuous P1 followed by vertex averaging.

    ``matrix`` maps fine free values to coarse free values; boundary coarse
    vertices are set to zero.  ``full_matrix`` is the same map on all vertices.
    """

    coarse: Mesh
    fine: Mesh
    full_matrix: sp.csr_matrix

    @cached_property
    def matrix(self) -> sp.csr_matrix:
        return self.full_matrix[self.coarse.free][:, self.fine.free].tocsr()

    @cached_property
    def embedding(self) -> sp.csr_matrix:
        return prolongation(self.coarse, self.fine)

    def __call__(self, v_fine) -> np.ndarray:
        return self.matrix @ _values(v_fine)

    def embed(self, v_coarse) -> np.ndarray:
        return self.embedding @ _values(v_coarse)


def build_quasi_interpolator(coarse: Mesh, fine: Mesh) -> QuasiInterpolator:
    _check_nested(coarse, fine)
    d = coarse.d
    k = d + 1
    parent = fine.parent_map
    # coarse barycentric coordinates of the fine element vertices
    pts = fine.vertices[fine.elements].reshape(-1, d)
    lam = _barycentric(coarse, np.repeat(parent, k), pts).reshape(fine.n_elements, k, k)
    # b_T[i] = int_T v lambda_i = sum_tau v_tau^T M_tau lambda_i(x_tau)
    ref = (np.ones((k, k)) + np.eye(k)) / (k * (k + 1))
    local = fine.volumes[:, None, None] * np.einsum("ab,nbi->nia", ref, lam)
    rows = (parent[:, None, None] * k + np.arange(k)[None, :, None]) * np.ones((1, 1, k), dtype=np.int64)
    cols = np.broadcast_to(fine.elements[:, None, :], local.shape)
    load = sp.csr_matrix(
        (local.ravel(), (rows.ravel(), cols.ravel())),
        shape=(coarse.n_elements * k, fine.n_vertices),
    )
    # inverse of the local P1 mass matrix |T| (1 + delta_ij) / ((d+1)(d+2))
    inv_ref = k * (k + 1) * (np.eye(k) - np.ones((k, k)) / (k + 1))
    blocks = inv_ref[None] / coarse.volumes[:, None, None]
    projection = sp.block_diag(list(blocks), format="csr") @ load

    counts = np.bincount(coarse.elements.ravel(), minlength=coarse.n_vertices)
    weights = 1.0 / counts[coarse.elements.ravel()]
    interior = ~coarse.boundary_vertex_flags[coarse.elements.ravel()]
    averaging = sp.csr_matrix(
        (weights[interior], (coarse.elements.ravel()[interior], np.flatnonzero(interior))),
        shape=(coarse.n_vertices, coarse.n_elements * k),
    )
    full_matrix = (averaging @ projection).tocsr()
    full_matrix.eliminate_zeros()
    return QuasiInterpolator(coarse, fine, full_matrix)


@dataclass(eq=False)
class PatchConstraints:
    """Restriction of the quasi-interpolator to the fine dofs interior to a patch.

    ``dofs`` are fine free-vertex positions, ``coarse_rows`` the coarse free
    vertices whose rows survived zero-row pruning.
    """

    dofs: np.ndarray
    coarse_rows: np.ndarray
    matrix: sp.csr_matrix


def patch_interior_dofs(fine: Mesh, fine_elements: np.ndarray) -> np.ndarray:
    """Fine free-vertex positions whose whole vertex star lies in ``fine_elements``."""
    mask = np.zeros(fine.n_elements, dtype=np.int32)
    mask[fine_elements] = 1
    E = fine.incidence.T.astype(np.int32)
    in_count = E @ mask
    all_count = np.asarray(E.sum(axis=1)).ravel()
    verts = np.flatnonzero((in_count == all_count) & (in_count > 0) & ~fine.boundary_vertex_flags)
    return fine.free_index[verts]


def kernel_constraint_rows(interp: QuasiInterpolator, patch: Patch, tol: float = 1e-12) -> PatchConstraints:
    """Constraint matrix ``I_H`` restricted to the fine dofs interior to ``patch``."""
    if patch.fine_elements is None:
        raise ValueError("patch has no fine elements attached")
    dofs = patch_interior_dofs(interp.fine, patch.fine_elements)
    B = interp.matrix[:, dofs].tocsr()
    norms = np.sqrt(np.asarray(B.multiply(B).sum(axis=1)).ravel())
    keep = np.flatnonzero(norms > tol * max(norms.max(initial=0.0), 1e-300))
    return PatchConstraints(dofs, keep, B[keep].tocsr())
