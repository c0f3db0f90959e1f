"""Structured simplicial meshes of boxes, uniform refinement and element patches.

Meshes are Kuhn (Freudenthal) subdivisions of a tensor grid: every grid cell
is split into ``d!`` congruent simplices, one per permutation of the axes.
The family is nested under halving of the grid spacing, which is what makes
:func:`refine_uniform` a true refinement with a well defined parent map.
"""
from __future__ import annotations

import hashlib
import itertools
import json
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp


@dataclass(frozen=True)
class BoxDomain:
    """Axis-aligned box ``prod_i (lo_i, hi_i)`` in dimension 1, 2 or 3."""

    extents: tuple[tuple[float, float], ...]

    def __post_init__(self):
        ext = tuple((float(lo), float(hi)) for lo, hi in self.extents)
        object.__setattr__(self, "extents", ext)
        if len(ext) not in (1, 2, 3):
            raise ValueError(f"dimension must be 1, 2 or 3, got {len(ext)}")
        for lo, hi in ext:
            if not lo < hi:
                raise ValueError(f"empty axis interval ({lo}, {hi})")
        if not 0.5 <= self.diameter <= 2.0:
            raise ValueError(f"domain diameter {self.diameter:.3g} outside [0.5, 2]")

    @classmethod
    def unit(cls, d: int) -> "BoxDomain":
        return cls(((0.0, 1.0),) * d)

    @property
    def d(self) -> int:
        return len(self.extents)

    @property
    def lo(self) -> np.ndarray:
        return np.array([e[0] for e in self.extents])

    @property
    def hi(self) -> np.ndarray:
        return np.array([e[1] for e in self.extents])

    @property
    def lengths(self) -> np.ndarray:
        return self.hi - self.lo

    @property
    def diameter(self) -> float:
        return float(np.linalg.norm(self.lengths))

    @property
    def volume(self) -> float:
        return float(np.prod(self.lengths))


def _kuhn_permutations(d):
    return list(itertools.permutations(range(d)))


@dataclass(eq=False)
class Mesh:
    """Kuhn triangulation of a box.

    Elements are numbered ``cell * d! + p`` where ``cell`` is the C-order index
    of the grid cell and ``p`` the index of the axis permutation.  Vertices are
    numbered in C order over the ``(n + 1)`` vertex grid.
    """

    domain: BoxDomain
    n: tuple[int, ...]
    vertices: np.ndarray
    elements: np.ndarray
    level: str = "coarse"
    parent_map: np.ndarray | None = None
    H: float = field(init=False)

    def __post_init__(self):
        self.vertices.setflags(write=False)
        self.elements.setflags(write=False)
        if self.parent_map is not None:
            self.parent_map.setflags(write=False)
        self.H = float(np.linalg.norm(self.spacing))

    @property
    def d(self) -> int:
        return self.domain.d

    @property
    def spacing(self) -> np.ndarray:
        """Grid spacing per axis."""
        return self.domain.lengths / np.asarray(self.n)

    @property
    def h(self) -> float:
        """Largest grid spacing over the axes."""
        return float(self.spacing.max())

    @property
    def n_elements(self) -> int:
        return self.elements.shape[0]

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @cached_property
    def boundary_vertex_flags(self) -> np.ndarray:
        idx = np.array(np.unravel_index(np.arange(self.n_vertices), tuple(m + 1 for m in self.n))).T
        flags = np.any((idx == 0) | (idx == np.asarray(self.n)), axis=1)
        flags.setflags(write=False)
        return flags

    @cached_property
    def free(self) -> np.ndarray:
        """Indices of interior (non-Dirichlet) vertices."""
        return np.flatnonzero(~self.boundary_vertex_flags)

    @cached_property
    def free_index(self) -> np.ndarray:
        """Map vertex -> position among free vertices, -1 on the boundary."""
        out = -np.ones(self.n_vertices, dtype=np.int64)
        out[self.free] = np.arange(self.free.size)
        return out

    @cached_property
    def _jacobians(self) -> np.ndarray:
        X = self.vertices[self.elements]
        return np.transpose(X[:, 1:, :] - X[:, :1, :], (0, 2, 1))

    @cached_property
    def volumes(self) -> np.ndarray:
        vol = np.abs(np.linalg.det(self._jacobians)) / math.factorial(self.d)
        vol.setflags(write=False)
        return vol

    @cached_property
    def gradients(self) -> np.ndarray:
        """Gradients of the barycentric coordinates, shape ``(ne, d + 1, d)``."""
        Jinv = np.linalg.inv(self._jacobians)
        G = np.empty((self.n_elements, self.d + 1, self.d))
        G[:, 1:, :] = Jinv
        G[:, 0, :] = -Jinv.sum(axis=1)
        G.setflags(write=False)
        return G

    @cached_property
    def barycenters(self) -> np.ndarray:
        return self.vertices[self.elements].mean(axis=1)

    @cached_property
    def diameters(self) -> np.ndarray:
        X = self.vertices[self.elements]
        diam = np.zeros(self.n_elements)
        for a, b in itertools.combinations(range(self.d + 1), 2):
            diam = np.maximum(diam, np.linalg.norm(X[:, a] - X[:, b], axis=1))
        return diam

    @cached_property
    def incidence(self) -> sp.csr_matrix:
        """Element-vertex incidence matrix, shape ``(ne, nv)``."""
        ne, k = self.elements.shape
        rows = np.repeat(np.arange(ne), k)
        data = np.ones(ne * k, dtype=np.int8)
        return sp.csr_matrix((data, (rows, self.elements.ravel())), shape=(ne, self.n_vertices))

    @cached_property
    def element_adjacency(self) -> sp.csr_matrix:
        """Boolean vertex-sharing adjacency between elements (includes the diagonal)."""
        E = self.incidence.astype(np.int32)
        A = (E @ E.T).tocsr()
        A.data[:] = 1
        return A.astype(bool)

    @cached_property
    def children(self) -> np.ndarray:
        """Fine elements grouped by parent, shape ``(n_parents, n_children)``."""
        if self.parent_map is None:
            raise ValueError("mesh has no parent map")
        order = np.argsort(self.parent_map, kind="stable")
        n_parents = int(self.parent_map.max()) + 1
        return order.reshape(n_parents, -1)

    @cached_property
    def key(self) -> str:
        """Content hash of the geometry (vertices and connectivity)."""
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.vertices, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.elements, dtype="<i8").tobytes())
        return h.hexdigest()[:16]

    def locate(self, points: np.ndarray) -> np.ndarray:
        """Element index containing each point (ties broken towards the lower cell)."""
        points = np.atleast_2d(points)
        d = self.d
        local = (points - self.domain.lo) / self.spacing
        cell = np.clip(np.floor(local).astype(np.int64), 0, np.asarray(self.n) - 1)
        frac = local - cell
        perms = {p: i for i, p in enumerate(_kuhn_permutations(d))}
        order = np.argsort(-frac, axis=1, kind="stable")
        pidx = np.array([perms[tuple(row)] for row in order])
        cell_lin = np.ravel_multi_index(tuple(cell.T), self.n)
        return cell_lin * math.factorial(d) + pidx

    def to_json(self) -> str:
        return json.dumps(
            {
                "vertices": self.vertices.tolist(),
                "elements": self.elements.tolist(),
                "level": self.level,
                "H": self.H,
            }
        )


def build_coarse_mesh(domain: BoxDomain, n_per_axis, level: str = "coarse") -> Mesh:
    """Kuhn triangulation of ``domain`` with ``n_per_axis`` cells per axis.

    Examples
    --------
    >>> m = build_coarse_mesh(BoxDomain.unit(2), 2)
    >>> m.n_elements, m.n_vertices
    (8, 9)
    """
    d = domain.d
    n = np.broadcast_to(np.asarray(n_per_axis, dtype=np.int64), (d,))
    if np.any(n < 1):
        raise ValueError(f"need at least one cell per axis, got {tuple(n)}")
    n = tuple(int(v) for v in n)
    axes = [np.linspace(lo, hi, m + 1) for (lo, hi), m in zip(domain.extents, n)]
    vertices = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)

    vshape = tuple(m + 1 for m in n)
    cells = np.array(np.unravel_index(np.arange(int(np.prod(n))), n)).T
    perms = _kuhn_permutations(d)
    elements = np.empty((cells.shape[0], len(perms), d + 1), dtype=np.int64)
    eye = np.eye(d, dtype=np.int64)
    for p, perm in enumerate(perms):
        corner = cells.copy()
        elements[:, p, 0] = np.ravel_multi_index(tuple(corner.T), vshape)
        for k, axis in enumerate(perm):
            corner = corner + eye[axis]
            elements[:, p, k + 1] = np.ravel_multi_index(tuple(corner.T), vshape)
    return Mesh(domain, n, vertices, elements.reshape(-1, d + 1), level=level)


def refine_uniform(mesh: Mesh, levels: int) -> Mesh:
    """Refine ``levels`` times by halving the grid; every simplex gets ``2^d`` children.

    The Kuhn family is nested, so red refinement with the Kuhn diagonal choice
    coincides with the Kuhn triangulation of the halved grid.  ``parent_map``
    maps each fine element to the element of ``mesh`` containing it.
    """
    if levels < 0:
        raise ValueError("levels must be nonnegative")
    n = tuple(m * 2**levels for m in mesh.n)
    fine = build_coarse_mesh(mesh.domain, n, level="fine")
    parent = mesh.locate(fine.barycenters)
    return Mesh(fine.domain, fine.n, fine.vertices, fine.elements, level="fine", parent_map=parent)


@dataclass(eq=False)
class Patch:
    """The ``ell``-th order element patch around a coarse element.

    ``ring[i]`` is the smallest ``r`` with ``elements[i]`` in ``N^r(T)``
    (``0`` for the center element itself).
    """

    center: int
    ell: int
    elements: np.ndarray
    ring: np.ndarray
    boundary_vertices: np.ndarray
    domain_boundary_vertices: np.ndarray
    fine_elements: np.ndarray | None = None

    def __contains__(self, K) -> bool:
        i = np.searchsorted(self.elements, K)
        return bool(i < self.elements.size and self.elements[i] == K)


def patch(mesh: Mesh, T: int, ell: int, fine: Mesh | None = None) -> Patch:
    """Elements reachable from ``T`` by ``ell`` vertex-sharing one-ring steps.

    ``boundary_vertices`` are the patch boundary vertices inside the domain;
    ``domain_boundary_vertices`` those on the boundary of the box.  With a
    nested ``fine`` mesh the fine elements covering the patch are attached.
    """
    if not 0 <= T < mesh.n_elements:
        raise IndexError(f"element {T} out of range for mesh with {mesh.n_elements} elements")
    if ell < 1:
        raise ValueError("ell must be at least 1")
    adj = mesh.element_adjacency
    ring = -np.ones(mesh.n_elements, dtype=np.int64)
    ring[T] = 0
    inside = np.zeros(mesh.n_elements, dtype=bool)
    inside[T] = True
    for r in range(1, ell + 1):
        grown = (adj @ inside.astype(np.int32)) > 0
        ring[grown & ~inside] = r
        inside = grown
    elements = np.flatnonzero(inside)

    E = mesh.incidence
    in_count = np.asarray(E[elements].sum(axis=0)).ravel()
    all_count = np.asarray(E.sum(axis=0)).ravel()
    touched = in_count > 0
    bnd = mesh.boundary_vertex_flags
    boundary_vertices = np.flatnonzero(touched & (in_count < all_count) & ~bnd)
    domain_boundary_vertices = np.flatnonzero(touched & bnd)

    fine_elements = None
    if fine is not None:
        if fine.parent_map is None:
            raise ValueError("fine mesh has no parent map")
        fine_elements = np.flatnonzero(inside[fine.parent_map])
    return Patch(T, ell, elements, ring[elements], boundary_vertices, domain_boundary_vertices, fine_elements)


def default_ell(H: float) -> int:
    """Oversampling ``ceil(log2(1 / H))``, at least 1."""
    return max(1, math.ceil(math.log2(1.0 / H) - 1e-12))
