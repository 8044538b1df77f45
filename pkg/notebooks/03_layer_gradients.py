"""
The BDC pooling layer and its backward pass
===========================================

A feature map of shape (h, w, C) is projected to d channels, then pooled
into a BDC matrix. The backward pass is analytic; here it is compared
against central finite differences.
"""

# %%
import numpy as np

from deepbdc import gradcheck
from deepbdc.layer import PoolingConfig, Projection, bdc_backward, bdc_forward

rng = np.random.default_rng(1)
fm = rng.normal(size=(5, 5, 12))
proj = Projection.init(12, 6, rng)

# %%
# Channels as observations give a d x d matrix; positions as observations
# give an (h*w) x (h*w) matrix.
for axis in ("channels", "spatial"):
    a, _ = bdc_forward(fm, proj, PoolingConfig(axis, 6))
    print(axis, a.shape)

# %%
# Back-propagate an arbitrary upstream gradient.
a, cache = bdc_forward(fm, proj, PoolingConfig("channels", 6))
g_fm, g_proj = bdc_backward(np.ones_like(a), cache, proj)
print("feature-map gradient", g_fm.shape, "weight gradient", g_proj.weight.shape)

# %%
# The finite-difference suite covers both axes and a case with coincident
# observations, where the gradient must stay finite.
results = gradcheck.run_suite(n_seeds=5)
print("worst relative error:", max(r.max_error for r in results))
