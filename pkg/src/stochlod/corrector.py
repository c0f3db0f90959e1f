"""Localized element correctors and the correction operator.

For a coarse element ``T`` and direction ``e_j`` the corrector ``q_{T,j}``
lives in the fine P1 functions that vanish outside the patch ``N^ell(T)`` and
lie in the kernel of the quasi-interpolator.  It is computed from the KKT
system::

    [ K   B^T ] [ q ]   [ r_j ]
    [ B   0   ] [ p ] = [ 0   ]

with ``K`` the fine stiffness matrix on the patch, ``B`` the patch constraint
rows and ``r_j`` the load ``int_T grad w . A e_j``.
"""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .fem import (
    FeFunction,
    PatchConstraints,
    QuasiInterpolator,
    _values,
    assemble_stiffness,
    coefficient_array,
    element_gradients,
    kernel_constraint_rows,
)
from .mesh import Mesh, Patch, patch as make_patch


class SingularSystemError(RuntimeError):
    """Raised when a corrector saddle-point system cannot be factorized."""


class InvariantViolation(AssertionError):
    """A solved corrector breaks the kernel constraint or the energy bound."""


# Set STOCHLOD_CHECK_INVARIANTS=1 to verify every corrector solve.  The test
# suite switches this on; CHECK_COUNT counts verified solves in this process.
CHECK_ENV = "STOCHLOD_CHECK_INVARIANTS"
CHECK_COUNT = [0]


@dataclass(eq=False)
class CorrectorSet:
    """The ``d`` correctors of one coarse element for one coefficient sample.

    ``values[:, j]`` holds ``q_{T,j}`` at the fine free dofs listed in
    ``dofs``; ``multipliers[:, j]`` the Lagrange multiplier per constraint row.
    """

    element: int
    patch: Patch
    dofs: np.ndarray
    values: np.ndarray
    multipliers: np.ndarray
    constraint_rows: np.ndarray
    seed: tuple | None = None

    @property
    def ell(self) -> int:
        return self.patch.ell

    def fine_vector(self, fine: Mesh, j: int) -> np.ndarray:
        out = np.zeros(fine.free.size)
        out[self.dofs] = self.values[:, j]
        return out


def element_load(fine: Mesh, coeff) -> np.ndarray:
    """Per fine element ``|tau| grad phi_a . A e_j``, shape ``(ne, d + 1, d)``."""
    A = coefficient_array(fine, coeff)
    return fine.volumes[:, None, None] * np.einsum("nai,nij->naj", fine.gradients, A)


def corrector_rhs(fine: Mesh, coeff, T: int, dofs: np.ndarray, local=None) -> np.ndarray:
    """Load ``int_T grad phi_i . A e_j`` on the patch dofs, shape ``(len(dofs), d)``."""
    if local is None:
        local = element_load(fine, coeff)
    sub = fine.children[T]
    d = fine.d
    rhs = np.zeros((fine.n_vertices, d))
    verts = fine.elements[sub].ravel()
    for j in range(d):
        rhs[:, j] = np.bincount(verts, weights=local[sub, :, j].ravel(), minlength=fine.n_vertices)
    return rhs[fine.free][dofs]


def solve_saddle(K: sp.spmatrix, B: sp.spmatrix, rhs: np.ndarray, tol: float = 1e-10):
    """Solve the KKT system for every column of ``rhs``; returns ``(q, p)``."""
    n, m = K.shape[0], B.shape[0]
    S = sp.bmat([[K, B.T], [B, None]], format="csc")
    try:
        lu = spla.splu(S)
    except RuntimeError as exc:
        raise SingularSystemError(f"saddle-point system of size {n}+{m} is singular: {exc}") from exc
    b = np.vstack([rhs, np.zeros((m, rhs.shape[1]))])
    x = lu.solve(b)
    for _ in range(3):
        res = b - S @ x
        scale = np.maximum(np.abs(b).max(axis=0), np.abs(S @ x).max(axis=0))
        if np.all(np.abs(res).max(axis=0) <= tol * np.maximum(scale, 1e-300)):
            break
        x += lu.solve(res)
    if not np.all(np.isfinite(x)):
        raise SingularSystemError("saddle-point solve produced non-finite values")
    return x[:n], x[n:]


def prepare_patches(interp: QuasiInterpolator, ell: int) -> list[tuple[Patch, PatchConstraints]]:
    """Patches and constraint rows of every coarse element; sample independent."""
    coarse, fine = interp.coarse, interp.fine
    out = []
    for T in range(coarse.n_elements):
        P = make_patch(coarse, T, ell, fine)
        out.append((P, kernel_constraint_rows(interp, P)))
    return out


def solve_corrector(
    patch: Patch,
    coeff,
    interp: QuasiInterpolator,
    stiffness: sp.spmatrix | None = None,
    local_load: np.ndarray | None = None,
    directions=None,
    constraints: PatchConstraints | None = None,
) -> CorrectorSet:
    """Correctors ``q_{T,j}`` of ``patch.center`` for all directions ``j``.

    ``stiffness`` (fine, free dofs), ``local_load`` and ``constraints`` may be
    passed in to share work between elements and samples.  ``directions`` is
    an optional ``(d, d)`` matrix whose columns replace the unit vectors.
    """
    fine = interp.fine
    cmesh = getattr(coeff, "mesh", fine)
    if cmesh is not fine and cmesh.key != fine.key:
        raise ValueError("coefficient and interpolator live on different fine meshes")
    if patch.fine_elements is None:
        patch = make_patch(interp.coarse, patch.center, patch.ell, fine)
    cons = constraints if constraints is not None else kernel_constraint_rows(interp, patch)
    if stiffness is None:
        stiffness = assemble_stiffness(fine, coeff)
    K = stiffness[cons.dofs][:, cons.dofs]
    rhs = corrector_rhs(fine, coeff, patch.center, cons.dofs, local_load)
    if directions is not None:
        rhs = rhs @ np.asarray(directions, dtype=float)
    q, p = solve_saddle(K, cons.matrix, rhs)
    out = CorrectorSet(patch.center, patch, cons.dofs, q, p, cons.coarse_rows, getattr(coeff, "seed", None))
    if directions is None and os.environ.get(CHECK_ENV) == "1":
        check_invariants(out, cons, coeff, fine)
    return out


def check_invariants(c: CorrectorSet, cons: PatchConstraints, coeff, fine: Mesh) -> dict:
    """Constraint residual and energy bound of one solved corrector set.

    Checks ``|B q|_inf <= 1e-10 |q|_2`` and
    ``||A^{1/2} grad q_j||^2 <= (Lam / lam) int_T A_jj`` per direction.
    """
    residual = np.abs(cons.matrix @ c.values).max(axis=0, initial=0.0)
    qnorm = np.linalg.norm(c.values, axis=0)
    A = coefficient_array(fine, coeff)
    sub = fine.children[c.element]
    load = np.einsum("n,njj->j", fine.volumes[sub], A[sub])
    spec = getattr(coeff, "spec", None)
    if spec is not None:
        contrast = spec.Lam / spec.lam
    else:
        eig = np.linalg.eigvalsh(A)
        contrast = eig.max() / eig.min()
    e = energy(c, coeff, fine)
    CHECK_COUNT[0] += 1
    if np.any(residual > 1e-10 * qnorm):
        raise InvariantViolation(f"element {c.element}: constraint residual {residual.max():.2e} vs |q| {qnorm.max():.2e}")
    if np.any(e > contrast * load * (1 + 1e-10)):
        raise InvariantViolation(f"element {c.element}: corrector energy {e.max():.3e} above bound {(contrast * load).max():.3e}")
    return {"residual": residual, "q_norm": qnorm, "energy": e, "bound": contrast * load}


def solve_all_correctors(interp: QuasiInterpolator, coeff, ell: int, prepared=None) -> list[CorrectorSet]:
    """Correctors for every coarse element of one coefficient sample.

    ``prepared`` is the output of :func:`prepare_patches` for the same ``ell``.
    """
    fine = interp.fine
    if prepared is None:
        prepared = prepare_patches(interp, ell)
    K = assemble_stiffness(fine, coeff)
    local = element_load(fine, coeff)
    out = []
    for P, cons in prepared:
        try:
            out.append(solve_corrector(P, coeff, interp, K, local, constraints=cons))
        except SingularSystemError as exc:
            raise SingularSystemError(f"element {P.center}: {exc}") from exc
    return out


def apply_correction(v_H, correctors: list[CorrectorSet], interp: QuasiInterpolator) -> FeFunction:
    """``C v_H = sum_T sum_j (d_j v_H|_T) q_{T,j}`` as a fine P1 function."""
    coarse, fine = interp.coarse, interp.fine
    by_element = {c.element: c for c in correctors}
    missing = set(range(coarse.n_elements)) - set(by_element)
    if missing:
        raise KeyError(f"missing correctors for elements {sorted(missing)[:10]}")
    grads = element_gradients(coarse, _values(v_H))
    out = np.zeros(fine.free.size)
    for T in range(coarse.n_elements):
        c = by_element[T]
        np.add.at(out, c.dofs, c.values @ grads[T])
    return FeFunction(fine, out, space="fine")


def corrector_gradients(c: CorrectorSet, fine: Mesh) -> tuple[np.ndarray, np.ndarray]:
    """Fine elements of the patch and ``grad q_{T,j}`` on them, shape ``(n, d, d)``.

    The last axis of the gradient array indexes the direction ``j``.
    """
    full = np.zeros((fine.n_vertices, c.values.shape[1]))
    full[fine.free[c.dofs]] = c.values
    elems = c.patch.fine_elements
    grads = np.einsum("naj,nai->nij", full[fine.elements[elems]], fine.gradients[elems])
    return elems, grads


def energy(c: CorrectorSet, coeff, fine: Mesh) -> np.ndarray:
    """``||A^{1/2} grad q_{T,j}||^2`` on the patch, one value per direction."""
    elems, g = corrector_gradients(c, fine)
    A = coefficient_array(fine, coeff)[elems]
    return np.einsum("n,nij,nik,nkj->j", fine.volumes[elems], g, A, g)


def decay_profile(c: CorrectorSet, fine: Mesh) -> np.ndarray:
    """``||grad q_{T,j}||`` on the rings ``N^r(T) \\ N^{r-1}(T)``, ``r = 1..ell``.

    Returns an ``(ell, d)`` array.
    """
    elems, g = corrector_gradients(c, fine)
    ring_of = dict(zip(c.patch.elements.tolist(), c.patch.ring.tolist()))
    ring = np.array([ring_of[K] for K in fine.parent_map[elems]])
    sq = fine.volumes[elems, None] * (g * g).sum(axis=1)
    out = np.zeros((c.ell, g.shape[2]))
    for r in range(1, c.ell + 1):
        out[r - 1] = sq[ring == r].sum(axis=0)
    return np.sqrt(out)


def fit_decay_rate(profile: np.ndarray) -> np.ndarray:
    """Least-squares ``theta`` in ``e_r ~ C theta^r``, one per column."""
    profile = np.asarray(profile, dtype=float)
    if profile.ndim == 1:
        profile = profile[:, None]
    r = np.arange(1, profile.shape[0] + 1)
    thetas = []
    for col in profile.T:
        slope = np.polyfit(r, np.log(col), 1)[0]
        thetas.append(np.exp(slope))
    return np.array(thetas)
