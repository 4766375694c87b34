"""How a Gaussian mixture splits its variance into aleatoric and epistemic parts.

Run with ``python3 demos/01_uncertainty_decomposition.py``.
"""
# %%
import numpy as np

from mdnal.detector import GmmParams
from mdnal.uncertainty import efficient_cls_aleatoric, mixture_uncertainty

rng = np.random.default_rng(0)

# %% [markdown]
# Two components that agree on the mean: all the spread is aleatoric.

# %%
same = GmmParams(pi=np.array([0.5, 0.5]), mu=np.array([1.0, 1.0]), var=np.array([0.2, 0.6]))
print("agreeing components  (u_al, u_ep):", mixture_uncertainty(same))

# %% [markdown]
# Pull the means apart and the epistemic term grows, while the aleatoric term stays put.

# %%
for gap in (0.0, 1.0, 2.0, 4.0):
    g = GmmParams(np.array([0.5, 0.5]), np.array([-gap / 2, gap / 2]), np.array([0.2, 0.6]))
    al, ep = mixture_uncertainty(g)
    print(f"gap {gap:3.1f}:  u_al {al:.3f}  u_ep {ep:.3f}  total {al + ep:.3f}")

# %% [markdown]
# The two terms add up to the variance of the mixture. A quick sampling check:

# %%
pi, mu, var = np.array([0.2, 0.3, 0.5]), np.array([-1.0, 0.5, 2.0]), np.array([0.3, 0.1, 0.8])
al, ep = mixture_uncertainty(GmmParams(pi, mu, var))
k = rng.choice(3, size=400_000, p=pi)
x = rng.normal(mu[k], np.sqrt(var[k]))
print(f"closed form {al + ep:.4f}   sampled {x.var():.4f}")

# %% [markdown]
# For the efficient classification head each component outputs a softmax
# vector p_k. Its aleatoric matrix is sum_k pi_k (diag(p_k) - p_k p_k^T).
# The diagonal holds per-class Bernoulli variances. A confident one-hot
# prediction has none.

# %%
p = np.array([[0.7, 0.2, 0.1], [0.6, 0.3, 0.1]])
print(np.round(efficient_cls_aleatoric(np.array([0.5, 0.5]), p), 4))
print("one-hot:", efficient_cls_aleatoric(np.array([1.0]), np.eye(3)[[0]]).any())
