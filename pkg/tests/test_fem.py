import numpy as np
import pytest
import scipy.linalg as sla
from hypothesis import given
from hypothesis import strategies as st

from oracles import dense_quasi_interpolator, dense_stiffness, unit_meshes
from stochlod.fem import (
    FeFunction,
    assemble_load,
    assemble_mass,
    assemble_stiffness,
    build_quasi_interpolator,
    kernel_constraint_rows,
    prolongation,
)
from stochlod.mesh import BoxDomain, build_coarse_mesh, patch


def _random_spd(rng, ne, d, lo=1.0, hi=10.0):
    Q = np.linalg.qr(rng.standard_normal((ne, d, d)))[0]
    ev = rng.uniform(lo, hi, (ne, d))
    return np.einsum("nij,nj,nkj->nik", Q, ev, Q)


def test_stiffness_two_elements():
    m = build_coarse_mesh(BoxDomain.unit(1), 2)
    np.testing.assert_allclose(assemble_stiffness(m).toarray(), [[4.0]], rtol=1e-15)


def test_stiffness_linear_in_coefficient():
    m = build_coarse_mesh(BoxDomain.unit(2), 3)
    np.testing.assert_allclose(assemble_stiffness(m, 2.5).toarray(), 2.5 * assemble_stiffness(m).toarray(), rtol=1e-14)


def test_stiffness_identity_matches_quadrature_oracle():
    m = build_coarse_mesh(BoxDomain.unit(2), 2)
    A = np.broadcast_to(np.eye(2), (m.n_elements, 2, 2))
    K = dense_stiffness(m, A)[m.free][:, m.free]
    np.testing.assert_allclose(assemble_stiffness(m).toarray(), K, atol=1e-14)


@given(d=st.integers(1, 3), n=st.integers(1, 3), seed=st.integers(0, 2**32 - 1))
def test_stiffness_matrix_coefficient_matches_oracle(d, n, seed):
    m = build_coarse_mesh(BoxDomain.unit(d), n + 1)
    A = _random_spd(np.random.default_rng(seed), m.n_elements, d)
    K = dense_stiffness(m, A)
    got = assemble_stiffness(m, A, full=True).toarray()
    np.testing.assert_allclose(got, K, atol=1e-12 * np.abs(K).max())


@given(seed=st.integers(0, 2**32 - 1), d=st.integers(1, 2))
def test_stiffness_spd(seed, d):
    _, fine = unit_meshes(d, 2, 4 if d == 1 else 3)
    rng = np.random.default_rng(seed)
    A = rng.uniform(1.0, 10.0, fine.n_elements)
    K = assemble_stiffness(fine, A).toarray()
    assert K.shape[0] <= 500
    np.testing.assert_allclose(K, K.T, atol=1e-12)
    assert sla.eigvalsh(K)[0] > 0


def test_coefficient_mismatch():
    m = build_coarse_mesh(BoxDomain.unit(1), 4)
    with pytest.raises(ValueError):
        assemble_stiffness(m, np.ones(5))


def test_load_constant_and_zero():
    m = build_coarse_mesh(BoxDomain.unit(1), 2)
    np.testing.assert_allclose(assemble_load(m, 1.0), [0.5], rtol=1e-15)
    assert not np.any(assemble_load(build_coarse_mesh(BoxDomain.unit(2), 4), 0.0))


def test_load_linear_function_closed_form():
    m = build_coarse_mesh(BoxDomain.unit(1), 4)
    b = assemble_load(m, lambda x: x[:, 0])
    # int x phi_i = x_i h for an interior hat of width 2h
    np.testing.assert_allclose(b, m.vertices[m.free, 0] * 0.25, rtol=1e-14)


def test_load_quadratic_exact_in_2d():
    # f phi is cubic; check against the mass matrix for a P1 f instead
    m = build_coarse_mesh(BoxDomain.unit(2), 3)
    fv = 1 + 2 * m.vertices[:, 0] - m.vertices[:, 1]
    b = assemble_load(m, lambda x: 1 + 2 * x[:, 0] - x[:, 1], full=True)
    np.testing.assert_allclose(b, assemble_mass(m, full=True) @ fv, rtol=1e-13)


def test_mass_total():
    m = build_coarse_mesh(BoxDomain(((0, 1), (0, 0.5))), 3)
    assert assemble_mass(m, full=True).sum() == pytest.approx(0.5, rel=1e-14)


@pytest.mark.parametrize("d,n,levels", [(1, 4, 3), (2, 2, 2)])
def test_quasi_interpolator_matches_dense_oracle(d, n, levels):
    coarse, fine = unit_meshes(d, n, levels)
    got = build_quasi_interpolator(coarse, fine).matrix.toarray()
    np.testing.assert_allclose(got, dense_quasi_interpolator(coarse, fine), atol=1e-13)


@pytest.mark.parametrize("d,n,levels", [(1, 8, 3), (2, 4, 2), (3, 2, 1)])
def test_quasi_interpolator_idempotent(d, n, levels):
    coarse, fine = unit_meshes(d, n, levels)
    interp = build_quasi_interpolator(coarse, fine)
    # fine embeddings of all coarse hats at once
    P = interp.embedding.toarray()
    np.testing.assert_allclose(interp.matrix @ P, np.eye(coarse.free.size), atol=1e-13)
    assert not np.any(interp(np.zeros(fine.free.size)))


def test_quasi_interpolator_row_support_is_local():
    coarse, fine = unit_meshes(2, 4, 2)
    interp = build_quasi_interpolator(coarse, fine)
    I = interp.matrix.tocsr()
    for row, z in enumerate(coarse.free):
        star = np.flatnonzero((coarse.elements == z).any(axis=1))
        allowed = np.unique(fine.elements[np.isin(fine.parent_map, star)])
        cols = fine.free[I.indices[I.indptr[row]:I.indptr[row + 1]]]
        assert set(cols.tolist()) <= set(allowed.tolist())


def _local_norms(coarse, fine, v, interp):
    """Per coarse element: ||v - I_H v||_T, ||I_H v||_T, ||v||_N(T), ||grad v||_N(T)."""
    vfull = np.zeros(fine.n_vertices)
    vfull[fine.free] = v
    Iv = np.zeros(fine.n_vertices)
    Iv[fine.free] = interp.embed(interp(v))
    k = fine.d + 1
    ref = (np.ones((k, k)) + np.eye(k)) / (k * (k + 1))

    def l2sq(u):
        ue = u[fine.elements]
        return fine.volumes * np.einsum("na,ab,nb->n", ue, ref, ue)

    g = np.einsum("na,nai->ni", vfull[fine.elements], fine.gradients)
    gsq = fine.volumes * (g * g).sum(axis=1)
    per = lambda x: np.bincount(fine.parent_map, weights=x, minlength=coarse.n_elements)
    err, stab, vv, gg = per(l2sq(vfull - Iv)), per(l2sq(Iv)), per(l2sq(vfull)), per(gsq)
    out = []
    for T in range(coarse.n_elements):
        ring = patch(coarse, T, 1).elements
        out.append((np.sqrt(err[T]), np.sqrt(stab[T]), np.sqrt(vv[ring].sum()), np.sqrt(gg[ring].sum())))
    return np.array(out)


def test_quasi_interpolator_approximation_and_stability():
    coarse, fine = unit_meshes(1, 8, 4)
    interp = build_quasi_interpolator(coarse, fine)
    rng = np.random.default_rng(2024)
    x = fine.vertices[fine.free, 0]
    worst_approx = worst_stab = 0.0
    for s in range(100):
        if s % 2:
            v = rng.standard_normal(fine.free.size)
        else:
            k = rng.integers(1, 12, 4)
            v = rng.standard_normal(4) @ np.sin(np.pi * np.outer(k, x))
        norms = _local_norms(coarse, fine, v, interp)
        with np.errstate(divide="ignore", invalid="ignore"):
            worst_approx = max(worst_approx, np.nanmax(norms[:, 0] / (coarse.H * norms[:, 3])))
            worst_stab = max(worst_stab, np.nanmax(norms[:, 1] / norms[:, 2]))
    assert worst_approx <= 10
    assert worst_stab <= 10


def test_prolongation_is_nodal_interpolation():
    coarse, fine = unit_meshes(2, 3, 2)
    P = prolongation(coarse, fine, full=True)
    f = lambda X: 1 + 2 * X[:, 0] - 3 * X[:, 1]
    np.testing.assert_allclose(P @ f(coarse.vertices), f(fine.vertices), atol=1e-13)


def test_not_nested():
    coarse, _ = unit_meshes(1, 4, 0)
    _, other = unit_meshes(1, 3, 2)
    with pytest.raises(ValueError):
        build_quasi_interpolator(coarse, other)


def test_constraints_whole_domain():
    coarse, fine = unit_meshes(2, 3, 2)
    interp = build_quasi_interpolator(coarse, fine)
    P = patch(coarse, 0, 10, fine)
    cons = kernel_constraint_rows(interp, P)
    np.testing.assert_array_equal(cons.coarse_rows, np.arange(coarse.free.size))
    assert cons.dofs.size == fine.free.size


def test_constraints_ignore_functions_outside_patch():
    coarse, fine = unit_meshes(1, 8, 3)
    interp = build_quasi_interpolator(coarse, fine)
    P = patch(coarse, 1, 1, fine)
    cons = kernel_constraint_rows(interp, P)
    v = np.zeros(fine.free.size)
    outside = np.setdiff1d(np.arange(fine.free.size), cons.dofs)
    v[outside] = np.random.default_rng(0).standard_normal(outside.size)
    assert not np.any(cons.matrix @ v[cons.dofs])


@pytest.mark.parametrize("d,n,levels,T,ell", [(1, 4, 4, 0, 1), (1, 4, 4, 2, 2), (1, 8, 3, 5, 1), (2, 4, 2, 12, 1)])
def test_constraint_null_space_dimension(d, n, levels, T, ell):
    coarse, fine = unit_meshes(d, n, levels)
    interp = build_quasi_interpolator(coarse, fine)
    cons = kernel_constraint_rows(interp, patch(coarse, T, ell, fine))
    B = cons.matrix.toarray()
    sv = sla.svdvals(B)
    assert sv.min() > 1e-10
    assert sla.null_space(B).shape[1] == cons.dofs.size - B.shape[0]


def test_fe_function_length_checked():
    m = build_coarse_mesh(BoxDomain.unit(1), 4)
    with pytest.raises(ValueError):
        FeFunction(m, np.zeros(4))
    assert FeFunction(m, np.ones(3)).full().tolist() == [0, 1, 1, 1, 0]
