"""Offline / online walk-through on the unit interval.

Draws a batch of coefficient samples, builds one effective kernel per sample,
averages them, solves the coarse problem and compares against fine-scale
reference solutions.  Runs in a few seconds.
"""
import numpy as np

from stochlod import (
    BoxDomain,
    FieldSpec,
    average_kernels,
    build_coarse_mesh,
    default_ell,
    estimate_gamma,
    expected_l2_error,
    refine_uniform,
    run_batch,
    solve_coarse,
)

coarse = build_coarse_mesh(BoxDomain.unit(1), 16)
fine = refine_uniform(coarse, 5)  # h = 1/512
spec = FieldSpec(eps=1 / 128, lam=1.0, Lam=10.0)
ell = default_ell(coarse.H)
print(f"H = {coarse.H}, h = {fine.h}, eps = {spec.eps}, ell = {ell}")

# offline: per-sample correctors and kernels, then the sample mean
batch = run_batch(spec, coarse, fine, ell, n_samples=100, master_seed=1)
avg = average_kernels(batch)
gam = estimate_gamma(batch, avg)
print(f"{avg.n_blocks} stored blocks, gamma = {gam.gamma:.4f} +/- {gam.gamma_se:.4f}")

# online: one sparse coarse solve, reusable for any right-hand side
sol = solve_coarse(avg, 1.0)
print(f"coarse solve residual {sol.residual:.1e}, max u_H = {np.max(sol.u.values):.5f}")

err = expected_l2_error(batch, avg, 1.0, sol)
print(f"Monte Carlo L2 error: rmse = {err.rmse:.3e} +/- {err.rmse_se:.1e} over {err.n_samples} samples")
