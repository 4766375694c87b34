"""Train a small mixture detector, then rank an unlabeled pool by uncertainty.

Takes about a minute on one core.  Run with ``python3 demos/03_train_and_score.py``.
"""
# %%
import numpy as np

from mdnal import acquisition as acq
from mdnal.detector import NetworkConfig, detect, init_params
from mdnal.evaluation import evaluate_map
from mdnal.losses import OptimizerConfig, train
from mdnal.scenes import DatasetSpec, generate_dataset
from mdnal.uncertainty import detection_uncertainties

scenes = generate_dataset(DatasetSpec(n_scenes=400, seed=1))
labeled, pool, test = scenes[:150], scenes[150:300], scenes[300:]
net = NetworkConfig(head="full_gmm", K=4)

# %% [markdown]
# Training minimises the mixture negative log-likelihood for boxes plus a
# mixture-weighted classification loss with hard negative mining.

# %%
fit = train(init_params(net, 0), labeled, net, OptimizerConfig(steps=400), seed=0)
for step, total, *_ in fit.curve[::50]:
    print(f"step {step:4d}  loss {total:.3f}")
print("test mAP:", {k: round(v, 3) for k, v in evaluate_map(fit.params, net, test).items()})

# %% [markdown]
# Each detection surviving NMS gets four uncertainties. Images are scored by
# z-scoring each type over the pool, taking the max over detections, then
# aggregating. ``max_all`` takes the max over the four types.

# %%
quads = []
for dets, gmm, _ in detect(fit.params, net, pool):
    dets = detection_uncertainties(gmm, dets)
    quads.append(np.array([d.uncertainties.as_array() for d in dets]).reshape(-1, 4))
ids = [s.id for s in pool]
scores = acq.score_pool(ids, quads, acq.AggregationMode.MAX_ALL)
chosen = acq.select_top_k(scores.ids, scores.final, 10, scores.has_detection)
print("pool stats (mean, std) per type:\n", np.round(scores.stats, 4))
print("ten most uncertain images:", chosen)

# %% [markdown]
# Different types disagree about which images are interesting.

# %%
picks = {}
for mode in ("al_b", "ep_b", "al_c", "ep_c"):
    s = acq.score_pool(ids, quads, acq.AggregationMode.parse(mode))
    picks[mode] = acq.select_top_k(s.ids, s.final, 30, s.has_detection)
names, overlap = acq.overlap_matrix(picks)
print(names)
print(np.round(overlap, 1))
