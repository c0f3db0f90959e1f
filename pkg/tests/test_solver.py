import json

import numpy as np
import pytest
import scipy.sparse.linalg as spla

from oracles import unit_meshes
from stochlod.fem import assemble_load, assemble_mass, assemble_stiffness, element_gradients, prolongation
from stochlod.kernel import SparseKernel, coarse_matrix
from stochlod.montecarlo import average_kernels, run_batch
from stochlod.randomfield import FieldSpec, sample_field
from stochlod.solver import NumericalFailure, expected_l2_error, solve_coarse, solve_reference
from stochlod.study import make_rhs


def _l2(fine, v):
    return float(np.sqrt(v @ (assemble_mass(fine) @ v)))


@pytest.fixture(scope="module")
def random_case():
    # rough coefficient: eps = 1/128 well below H = 1/16
    coarse, fine = unit_meshes(1, 16, 5)
    batch = run_batch(FieldSpec(eps=4 * fine.h), coarse, fine, 4, 200, master_seed=11)
    return batch, average_kernels(batch)


def test_constant_coefficient_poisson():
    for n in (8, 16):
        coarse, fine = unit_meshes(1, n, 3)
        batch = run_batch(FieldSpec(eps=4 * fine.h, lam=1.0, Lam=1.0), coarse, fine, 3, 1)
        uH = solve_coarse(average_kernels(batch), 1.0).u
        x = fine.vertices[fine.free, 0]
        err = _l2(fine, prolongation(coarse, fine) @ uH.values - x * (1 - x) / 2)
        assert err <= 0.1 * coarse.H**2


def test_zero_load(random_case):
    batch, avg = random_case
    assert not np.any(solve_coarse(avg, 0.0).u.values)
    rep = expected_l2_error(batch, avg, 0.0)
    assert rep.rmse == 0.0 and not np.any(rep.errors)


def test_lod_beats_naive_coarse_fem(random_case):
    batch, avg = random_case
    coarse, fine = batch.coarse, batch.fine
    lod = expected_l2_error(batch, avg, 1.0)
    P = prolongation(coarse, fine)
    naive = []
    for i in batch.indices:
        A = sample_field(batch.spec, fine, (batch.master_seed, int(i)))
        # naive per-sample coarse coefficient: arithmetic mean over each coarse element
        a = np.bincount(fine.parent_map, weights=fine.volumes * A.scalar) / coarse.volumes
        u = spla.spsolve(assemble_stiffness(coarse, a).tocsc(), assemble_load(coarse, 1.0))
        naive.append(_l2(fine, solve_reference(A, 1.0).values - P @ u))
    assert lod.rmse <= np.sqrt(np.mean(np.square(naive)))


def test_reference_constant_coefficient():
    _, fine = unit_meshes(1, 4, 4)
    u = solve_reference(_unit_field(fine), 1.0)
    x = fine.vertices[fine.free, 0]
    assert np.abs(u.values - x * (1 - x) / 2).max() <= fine.h**2
    assert not np.any(solve_reference(_unit_field(fine), 0.0).values)


def _unit_field(fine):
    return sample_field(FieldSpec(eps=4 * fine.h, lam=1.0, Lam=1.0), fine, (0, 0))


@pytest.mark.parametrize("d", [1, 2])
def test_reference_energy_bound(d):
    _, fine = unit_meshes(d, 4, 4 if d == 1 else 2)
    spec = FieldSpec(eps=4 * fine.h, lam=0.5, Lam=5.0)
    f = make_rhs("sin(3*x) + 2" if d == 1 else "x*y - 1", d)
    for i in range(5):
        u = solve_reference(sample_field(spec, fine, (2, i)), f)
        g = element_gradients(fine, u.values)
        grad = np.sqrt((fine.volumes * (g * g).sum(axis=1)).sum())
        fv = f(fine.barycenters)
        # f is smooth; a fine midpoint rule is accurate far below the bound slack
        fnorm = np.sqrt((fine.volumes * fv**2).sum())
        assert grad <= fine.domain.diameter / np.pi / spec.lam * fnorm


def test_deterministic_coefficient_errors_equal():
    coarse, fine = unit_meshes(1, 8, 3)
    batch = run_batch(FieldSpec(eps=4 * fine.h, lam=2.0, Lam=2.0), coarse, fine, 3, 4)
    rep = expected_l2_error(batch, average_kernels(batch), 1.0)
    assert np.all(rep.errors == rep.errors[0])
    assert rep.rmse == pytest.approx(rep.errors[0], rel=1e-15)


def test_rmse_linear_in_f(random_case):
    batch, avg = random_case
    one = expected_l2_error(batch, avg, 1.0)
    two = expected_l2_error(batch, avg, 2.0)
    assert two.rmse == pytest.approx(2 * one.rmse, rel=1e-9)
    assert one.rmse**2 == pytest.approx(np.mean(one.errors**2), rel=1e-12)


def test_bandwidth_grows_with_ell():
    coarse, fine = unit_meshes(1, 16, 2)
    spec = FieldSpec(eps=4 * fine.h)
    nnz = [coarse_matrix(average_kernels(run_batch(spec, coarse, fine, ell, 2))).nnz for ell in (1, 2, 3, 4)]
    assert nnz == sorted(nnz) and nnz[0] < nnz[-1]


def test_indefinite_system_detected():
    coarse, _ = unit_meshes(1, 4, 0)
    pairs = np.column_stack([np.arange(4), np.arange(4)])
    bad = SparseKernel(coarse, 1, pairs, -np.ones((4, 1, 1)))
    with pytest.raises(NumericalFailure):
        solve_coarse(bad, 1.0)


def test_error_report_exports(random_case):
    batch, avg = random_case
    rep = expected_l2_error(batch, avg, make_rhs("sin(pi*x)", 1))
    data = json.loads(rep.to_json())
    assert data["f"] == "sin(pi*x)" and data["N"] == 200 and data["ell"] == 4
    assert data["H"] == batch.coarse.H and data["eps"] == batch.spec.eps
    assert rep.to_csv().count("\n") == 201
    assert rep.rmse_se > 0
