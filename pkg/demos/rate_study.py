"""Small (H, eps) sweep through the study driver, then log-log rate fits.

Writes its table to ``demos_out/`` in the working directory.  Takes about a
minute on one core; pass a worker count as the first argument to go faster.
"""
import sys

from stochlod import ExperimentConfig, fit_rates, run_study

workers = int(sys.argv[1]) if len(sys.argv) > 1 else 1
cfg = ExperimentConfig.from_dict(
    {
        "d": 1,
        "n_coarse": [4, 8, 16, 32],
        "field": {"eps": ["1/128", "1/256", "1/512"], "lam": 1.0, "Lam": 10.0},
        "n_samples": 40,
        "master_seed": 3,
        "out": "demos_out",
    }
)
table = run_study(cfg, workers=workers)
print(table.to_csv())
# gamma against eps at the finest coarse mesh; rmse against H at the largest eps
print(fit_rates(table, "eps", fixed=1 / 32))
print(fit_rates(table, "H", fixed=1 / 128))
