"""
BDC matrices and distance correlation
=====================================

A BDC matrix is the double-centered Euclidean distance matrix of a set of
observations. Inner products of two such matrices measure dependence.
"""

# %%
import numpy as np

from deepbdc import kernel

rng = np.random.default_rng(0)

# %%
# Six observations in three dimensions give a 6 x 6 matrix whose rows and
# columns sum to zero.
x = rng.normal(size=(6, 3))
a = kernel.bdc_matrix(x)
print(np.round(a, 3))
print("row sums:", np.round(a.sum(axis=1), 12))

# %%
# Rotating and translating the observations leaves the matrix unchanged;
# scaling multiplies it by |s|.
q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
print("rotation+shift gap:", np.abs(kernel.bdc_matrix(x @ q.T + 4.0) - a).max())
print("scale by -3 gap:   ", np.abs(kernel.bdc_matrix(-3 * x) - 3 * a).max())

# %%
# The trace form and the sqrt(2)-scaled upper-triangle vectors agree, which
# lets downstream code work with plain vectors.
y = x[:, :1] ** 2 + 0.1 * rng.normal(size=(6, 1))
b = kernel.bdc_matrix(y)
print("trace form:  ", kernel.bdc_value(a, b))
print("vector form: ", kernel.vectorize(a) @ kernel.vectorize(b))

# %%
# Normalizing by the two self-terms yields a score in [0, 1]: one for a
# variable with itself, near zero for independent samples.
u = rng.normal(size=(2000, 1))
v = rng.normal(size=(2000, 1))
print("bdcorr(u, u) =", kernel.bdcorr(u, u))
print("bdcorr(u, v) =", kernel.bdcorr(u, v))
print("bdcorr(u, u**2) =", kernel.bdcorr(u, u**2), " pearson =", kernel.pearson_corr(u, u**2))
