"""A miniature active learning experiment: uncertainty sampling against random.

Uses the default network on a smaller pool; about five minutes on one core.  The full
benchmark is ``mdnal compare-agg`` with the default configuration.
"""
# %%
import numpy as np

from mdnal import harness as H
from mdnal.losses import OptimizerConfig
from mdnal.scenes import DatasetSpec

cfg = H.ExperimentConfig(dataset=DatasetSpec(n_scenes=800, seed=7, class_weights=(0.55, 0.25, 0.12, 0.08)),
                         optimizer=OptimizerConfig(steps=300),
                         initial_labeled=100, budget=100, cycles=3, seeds=(0, 1))
data = H.PoolData.build(cfg)
cache = H.ModelCache()

# %% [markdown]
# Every method starts from the same initial labeled set, so cycle 1 is shared.
# Each cycle retrains from scratch, scores the pool and labels the top images.

# %%
reports = H.compare_aggregations(cfg, modes=["max_all"], data=data, cache=cache)
for label, rep in reports.items():
    print(f"{label:8s}", "  ".join(f"n={r[1]}: {r[3]:.3f}" for r in rep.summary))

# %% [markdown]
# Two seeds on a few hundred images are noisy. The acceptance suite runs the
# full benchmark (2000 pool images, five seeds) for the directional comparison.

# %% [markdown]
# Which uncertainty types pick the same images?  The overlap matrix is the
# percentage of shared picks, averaged over seeds.

# %%
names, M, _ = H.overlap_analysis(cfg, data=data, cache=cache)
print(names)
print(np.round(M, 1))
