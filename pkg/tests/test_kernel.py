import dataclasses

import numpy as np
import pytest
import scipy.linalg as sla
from hypothesis import given
from hypothesis import strategies as st

from oracles import kernel_blocks_oracle, unit_meshes
from stochlod.corrector import apply_correction, solve_all_correctors
from stochlod.fem import FeFunction, assemble_load, assemble_stiffness, build_quasi_interpolator
from stochlod.kernel import SparseKernel, assemble_kernel, bilinear_form, coarse_matrix
from stochlod.mesh import default_ell, patch
from stochlod.randomfield import FieldSpec, sample_field
from stochlod.solver import solve_coarse


def _pipeline(d, n, levels, ell, seed=(3, 0)):
    coarse, fine = unit_meshes(d, n, levels)
    interp = build_quasi_interpolator(coarse, fine)
    A = sample_field(FieldSpec(eps=4 * fine.h), fine, seed)
    cs = solve_all_correctors(interp, A, ell)
    return coarse, fine, interp, A, cs, assemble_kernel(cs, A, coarse)


@pytest.fixture(scope="module")
def p1d():
    return _pipeline(1, 8, 3, 2)


@pytest.fixture(scope="module")
def p2d():
    return _pipeline(2, 4, 2, 1)


def test_zero_correctors_collapse_formula(p2d):
    coarse, fine, interp, A, cs, _ = p2d
    zero = [dataclasses.replace(c, values=np.zeros_like(c.values)) for c in cs]
    k = assemble_kernel(zero, A, coarse)
    intA = np.zeros((coarse.n_elements, 2, 2))
    np.add.at(intA, fine.parent_map, fine.volumes[:, None, None] * A.values)
    for (T, K), blk in k.as_dict().items():
        expect = intA[T] / coarse.volumes[T] ** 2 if T == K else np.zeros((2, 2))
        np.testing.assert_allclose(blk, expect, rtol=1e-14, atol=0)


def test_sparsity_pattern(p2d):
    coarse, fine, interp, A, cs, k = p2d
    for T in range(coarse.n_elements):
        P = patch(coarse, T, 1)
        stored = k.pairs[k.pairs[:, 0] == T, 1]
        np.testing.assert_array_equal(stored, P.elements)
    outside = next(K for K in range(coarse.n_elements) if K not in patch(coarse, 0, 1))
    assert k.index([(0, outside)])[0] == -1
    assert not np.any(k.get(0, outside))


@pytest.mark.parametrize("d,n,levels,ell", [(1, 4, 4, 2), (2, 2, 3, 1)])
def test_end_to_end_dense_oracle(d, n, levels, ell):
    coarse, fine, interp, A, cs, k = _pipeline(d, n, levels, ell, (9, 1))
    oracle = kernel_blocks_oracle(coarse, fine, A.values, ell)
    assert set(oracle) == set(k.as_dict())
    for key, blk in oracle.items():
        np.testing.assert_allclose(k.get(*key), blk, rtol=0, atol=1e-10 * np.abs(blk).max())


def _fine_pg(fine, interp, A, cs, v, z):
    """int grad v . A grad (1 - C) z on the fine mesh."""
    K = assemble_stiffness(fine, A)
    vf = interp.embed(v)
    zf = interp.embed(z) - apply_correction(z, cs, interp).values
    return vf @ (K @ zf)


@pytest.mark.parametrize("which", ["p1d", "p2d"])
def test_petrov_galerkin_identity(which, request):
    coarse, fine, interp, A, cs, k = request.getfixturevalue(which)
    rng = np.random.default_rng(42)
    for _ in range(20):
        v, z = rng.standard_normal((2, coarse.free.size))
        lhs = bilinear_form(k, v, z)
        rhs = _fine_pg(fine, interp, A, cs, v, z)
        assert abs(lhs - rhs) <= 1e-10 * abs(rhs)


def test_transposed_pairing_is_not_the_identity(p2d):
    # pairing grad v on T with grad z on K breaks the identity for general samples
    coarse, fine, interp, A, cs, k = p2d
    swapped = SparseKernel(coarse, k.ell, k.pairs[:, ::-1], k.blocks.transpose(0, 2, 1))
    v, z = np.random.default_rng(0).standard_normal((2, coarse.free.size))
    rhs = _fine_pg(fine, interp, A, cs, v, z)
    assert abs(bilinear_form(swapped, z, v) - bilinear_form(k, v, z)) < 1e-12 * abs(rhs)
    assert abs(bilinear_form(swapped, v, z) - rhs) > 1e-6 * abs(rhs)


@given(a=st.floats(-3, 3), b=st.floats(-3, 3), seed=st.integers(0, 1000))
def test_bilinearity(p1d, a, b, seed):
    coarse, fine, interp, A, cs, k = p1d
    u, v, z = np.random.default_rng(seed).standard_normal((3, coarse.free.size))
    lhs = bilinear_form(k, a * u + b * v, z)
    rhs = a * bilinear_form(k, u, z) + b * bilinear_form(k, v, z)
    scale = (abs(a) + abs(b) + 1) * np.abs([bilinear_form(k, u, z), bilinear_form(k, v, z)]).max()
    assert abs(lhs - rhs) <= 1e-12 * scale
    assert bilinear_form(k, np.zeros_like(u), z) == 0


def test_coarse_matrix_entries(p2d):
    coarse, fine, interp, A, cs, k = p2d
    M = coarse_matrix(k).toarray()
    E = np.eye(coarse.free.size)
    brute = np.array([[bilinear_form(k, E[b], E[a]) for b in range(E.shape[0])] for a in range(E.shape[0])])
    np.testing.assert_allclose(M, brute, atol=1e-12 * np.abs(M).max())
    assert sla.eigvalsh(0.5 * (M + M.T))[0] > 0


def test_coarse_matrix_locality(p1d):
    coarse, fine, interp, A, cs, k = p1d
    M = coarse_matrix(k).toarray()
    x = coarse.vertices[coarse.free, 0]
    far = np.abs(x[:, None] - x[None, :]) > (2 * k.ell + 2) * coarse.H
    assert not np.any(M[far])


def test_constant_coefficient_reproduces_fem():
    for n in (8, 16):
        coarse, fine = unit_meshes(1, n, 3)
        interp = build_quasi_interpolator(coarse, fine)
        A = np.ones((fine.n_elements, 1, 1))
        k = assemble_kernel(solve_all_correctors(interp, A, default_ell(coarse.H)), A, coarse, fine)
        u = solve_coarse(k, 1.0).u.values
        fem = np.linalg.solve(assemble_stiffness(coarse).toarray(), assemble_load(coarse, 1.0))
        assert np.abs(u - fem).max() <= 0.1 * coarse.H**2


def test_json_roundtrip(tmp_path, p2d):
    coarse, fine, interp, A, cs, k = p2d
    back = SparseKernel.load(k.save(tmp_path / "k.json"), coarse)
    assert back.sample == {"master_seed": 3, "sample_index": 0} and back.ell == k.ell
    assert back.blocks.tobytes() == k.blocks.tobytes()
    np.testing.assert_array_equal(back.pairs, k.pairs)
    other, _ = unit_meshes(2, 3, 0)
    with pytest.raises(ValueError):
        SparseKernel.load(tmp_path / "k.json", other)


def test_rejects_bad_inputs(p2d):
    coarse, fine, interp, A, cs, k = p2d
    with pytest.raises(ValueError):
        SparseKernel(coarse, 1, [(0, 0)], [[np.nan, 0, 0, 0]])
    other = sample_field(A.spec, fine, (3, 1))
    with pytest.raises(ValueError, match="sample"):
        assemble_kernel(cs, other, coarse)
    mixed = cs[:-1] + solve_all_correctors(interp, A, 2)[-1:]
    with pytest.raises(ValueError, match="oversampling"):
        assemble_kernel(mixed, A, coarse)


def test_deterministic_assembly():
    a = _pipeline(1, 8, 3, 2, (5, 5))[-1]
    b = _pipeline(1, 8, 3, 2, (5, 5))[-1]
    assert a.blocks.tobytes() == b.blocks.tobytes() and a.to_json() == b.to_json()
