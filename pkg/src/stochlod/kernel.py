"""The quasi-local effective kernel on pairs of coarse elements.

For one coefficient sample the block of the pair ``(T, K)`` is::

    (1 / (|T| |K|)) * (delta_TK * int_T A  -  int_K A grad q_{T,.})

with row index ``j`` and column index ``k`` (``q_{T,k}`` in column ``k``).
Blocks are only stored for ``K`` in the patch ``N^ell(T)``; the correctors of
``T`` vanish elsewhere.

The induced bilinear form pairs the gradient of its first argument on ``K``
with the gradient of its second argument on ``T``::

    a(v, z) = sum_{T,K} |T| |K| grad v|_K . block(T, K) grad z|_T

which makes ``a(v, z) = int grad v . A grad (1 - C) z`` hold exactly.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .corrector import CorrectorSet, corrector_gradients
from .fem import _values, coefficient_array, element_gradients
from .mesh import Mesh

SCHEMA_VERSION = 1


@dataclass(eq=False)
class SparseKernel:
    """Blocks ``(T, K) -> d x d`` in lexicographic ``(T, K)`` order.

    ``sample`` is ``{"master_seed": .., "sample_index": ..}`` for a single
    realization or ``{"averaged": N}`` for an empirical mean over ``N`` samples.
    """

    mesh: Mesh
    ell: int
    pairs: np.ndarray
    blocks: np.ndarray
    sample: dict = field(default_factory=dict)

    def __post_init__(self):
        self.pairs = np.asarray(self.pairs, dtype=np.int64).reshape(-1, 2)
        d = self.mesh.d
        self.blocks = np.asarray(self.blocks, dtype=float).reshape(-1, d, d)
        order = np.lexsort((self.pairs[:, 1], self.pairs[:, 0]))
        self.pairs = self.pairs[order]
        self.blocks = self.blocks[order]
        if not np.all(np.isfinite(self.blocks)):
            raise ValueError("kernel has non-finite entries")

    @property
    def n_blocks(self) -> int:
        return self.pairs.shape[0]

    @property
    def mesh_hash(self) -> str:
        return self.mesh.key

    def _codes(self):
        return self.pairs[:, 0] * self.mesh.n_elements + self.pairs[:, 1]

    def index(self, pairs) -> np.ndarray:
        """Position of each ``(T, K)`` in ``pairs``; ``-1`` where not stored."""
        pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        codes = self._codes()
        want = pairs[:, 0] * self.mesh.n_elements + pairs[:, 1]
        pos = np.searchsorted(codes, want)
        pos = np.minimum(pos, max(codes.size - 1, 0))
        hit = codes.size > 0
        found = hit & (codes[pos] == want) if hit else np.zeros(want.shape, dtype=bool)
        return np.where(found, pos, -1)

    def get(self, T: int, K: int) -> np.ndarray:
        i = self.index([(T, K)])[0]
        if i < 0:
            return np.zeros((self.mesh.d, self.mesh.d))
        return self.blocks[i].copy()

    def as_dict(self) -> dict:
        return {(int(T), int(K)): b for (T, K), b in zip(self.pairs, self.blocks)}

    def to_json(self) -> str:
        return json.dumps(
            {
                "schema_version": SCHEMA_VERSION,
                "mesh_hash": self.mesh_hash,
                "ell": self.ell,
                "sample": self.sample,
                "entries": [
                    {"T": int(T), "K": int(K), "block": [float(x) for x in b.ravel()]}
                    for (T, K), b in zip(self.pairs, self.blocks)
                ],
            }
        )

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_json())
        return path

    @classmethod
    def from_json(cls, text: str, mesh: Mesh) -> "SparseKernel":
        data = json.loads(text)
        if data.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported kernel schema {data.get('schema_version')}")
        if data["mesh_hash"] != mesh.key:
            raise ValueError("kernel was assembled on a different coarse mesh")
        entries = data["entries"]
        pairs = np.array([(e["T"], e["K"]) for e in entries], dtype=np.int64).reshape(-1, 2)
        blocks = np.array([e["block"] for e in entries], dtype=float)
        return cls(mesh, int(data["ell"]), pairs, blocks, data["sample"])

    @classmethod
    def load(cls, path, mesh: Mesh) -> "SparseKernel":
        return cls.from_json(Path(path).read_text(), mesh)


def assemble_kernel(correctors: list[CorrectorSet], coeff, coarse: Mesh, fine: Mesh | None = None) -> SparseKernel:
    """Kernel blocks of one sample from its correctors and coefficient.

    ``fine`` is only needed when ``coeff`` is a plain array rather than a
    :class:`~stochlod.randomfield.CoefficientField`.
    """
    fine = getattr(coeff, "mesh", fine)
    if fine is None:
        raise ValueError("pass the fine mesh for a coefficient given as an array")
    seed = getattr(coeff, "seed", None)
    A = coefficient_array(fine, coeff)
    d = coarse.d
    volA = fine.volumes[:, None, None] * A
    # int_T A per coarse element
    intA = np.zeros((coarse.n_elements, d, d))
    np.add.at(intA, fine.parent_map, volA)

    pairs, blocks = [], []
    ells = set()
    for c in correctors:
        if seed is not None and c.seed is not None and tuple(c.seed) != tuple(seed):
            raise ValueError(f"corrector of element {c.element} belongs to sample {c.seed}, coefficient to {seed}")
        ells.add(c.ell)
        T = c.element
        elems, g = corrector_gradients(c, fine)
        flux = np.einsum("nij,njk->nik", volA[elems], g)
        Ks = c.patch.elements
        local = np.searchsorted(Ks, fine.parent_map[elems])
        intflux = np.zeros((Ks.size, d, d))
        np.add.at(intflux, local, flux)
        blk = -intflux
        blk[np.searchsorted(Ks, T)] += intA[T]
        blk /= (coarse.volumes[T] * coarse.volumes[Ks])[:, None, None]
        pairs.append(np.column_stack([np.full(Ks.size, T), Ks]))
        blocks.append(blk)
    if len(ells) > 1:
        raise ValueError(f"correctors mix oversampling orders {sorted(ells)}")
    sample = {"master_seed": seed[0], "sample_index": seed[1]} if seed is not None else {}
    return SparseKernel(coarse, ells.pop(), np.concatenate(pairs), np.concatenate(blocks), sample)


def _check_mesh(kernel: SparseKernel, v):
    mesh = getattr(v, "mesh", None)
    if mesh is not None and mesh.key != kernel.mesh.key:
        raise ValueError("function and kernel live on different meshes")


def bilinear_form(kernel: SparseKernel, v_H, z_H) -> float:
    """``sum_{T,K} |T| |K| grad v|_K . block(T, K) grad z|_T``."""
    _check_mesh(kernel, v_H)
    _check_mesh(kernel, z_H)
    mesh = kernel.mesh
    gv = element_gradients(mesh, _values(v_H))
    gz = element_gradients(mesh, _values(z_H))
    T, K = kernel.pairs.T
    w = mesh.volumes[T] * mesh.volumes[K]
    return float(np.einsum("n,ni,nij,nj->", w, gv[K], kernel.blocks, gz[T]))


def coarse_matrix(kernel: SparseKernel) -> sp.csr_matrix:
    """Matrix ``M[a, b] = a(phi_b, phi_a)`` on the coarse free vertices."""
    mesh = kernel.mesh
    T, K = kernel.pairs.T
    w = mesh.volumes[T] * mesh.volumes[K]
    G = mesh.gradients
    # local[n, a, b]: a runs over the vertices of T, b over those of K
    local = w[:, None, None] * np.einsum("nbj,njk,nak->nab", G[K], kernel.blocks, G[T])
    k = mesh.d + 1
    rows = np.repeat(mesh.elements[T], k, axis=1).ravel()
    cols = np.tile(mesh.elements[K], (1, k)).ravel()
    nv = mesh.n_vertices
    M = sp.csr_matrix((local.ravel(), (rows, cols)), shape=(nv, nv))
    return M[mesh.free][:, mesh.free].tocsr()
