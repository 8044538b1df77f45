"""Central finite-difference checks of the BDC layer's analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layer import PoolingConfig, Projection, bdc_backward, bdc_forward


def numeric_grad(f, x, step=1e-5):
    """Central differences of scalar ``f()`` w.r.t. array ``x`` (mutated in place)."""
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + step
        hi = f()
        x[idx] = orig - step
        lo = f()
        x[idx] = orig
        g[idx] = (hi - lo) / (2.0 * step)
    return g


def relative_error(analytic, numeric, scale):
    """``max|a - n| / max(|a|, |n|)`` over the array.

    Groups whose gradient is identically zero up to ``1e-7 * scale`` (e.g.
    the bias under spatial pooling, which the BDC matrix is invariant to)
    are measured against ``scale`` instead.
    """
    diff = np.max(np.abs(analytic - numeric))
    denom = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)))
    if denom < 1e-7 * scale:
        denom = scale
    return float(diff / denom) if denom > 0 else 0.0


@dataclass
class GradCheckResult:
    seed: int
    axis: str
    errors: dict

    @property
    def max_error(self) -> float:
        return max(self.errors.values())


def check_layer(seed: int, h: int = 2, w: int = 3, channels: int = 8, dim: int = 5,
                axis: str = "channels", step: float = 1e-5, duplicate: bool = False):
    """Compare analytic and numeric gradients of ``L = <G, A>`` for one seed.

    With ``duplicate`` two observations coincide (two positions for the
    spatial axis, two projection columns for the channels axis), so the
    distance matrix has off-diagonal zeros. The layer is not differentiable
    at that kink, so only finiteness is checked and the returned errors are
    0 or ``inf``.
    """
    rng = np.random.default_rng(seed)
    fm = rng.normal(size=(h, w, channels))
    proj = Projection(rng.normal(size=(channels, dim)) / np.sqrt(channels), rng.normal(size=dim))
    if duplicate and axis == "spatial":
        fm[0, 1] = fm[0, 0]
    elif duplicate:
        proj.weight[:, 1] = proj.weight[:, 0]
        proj.bias[1] = proj.bias[0]
    cfg = PoolingConfig(axis, dim)
    a, cache = bdc_forward(fm, proj, cfg)
    probe = rng.normal(size=a.shape)
    g_fm, g_proj = bdc_backward(probe, cache, proj)
    analytic = {"features": g_fm, "weight": g_proj.weight, "bias": g_proj.bias}
    if duplicate:
        finite = all(np.all(np.isfinite(v)) for v in analytic.values())
        return GradCheckResult(seed, axis, {k: 0.0 if finite else np.inf for k in analytic})

    def loss():
        return float(np.sum(probe * bdc_forward(fm, proj, cfg)[0]))

    numeric = {
        "features": numeric_grad(loss, fm, step),
        "weight": numeric_grad(loss, proj.weight, step),
        "bias": numeric_grad(loss, proj.bias, step),
    }
    scale = max(np.max(np.abs(v)) for v in numeric.values())
    errors = {k: relative_error(analytic[k], numeric[k], scale) for k in analytic}
    return GradCheckResult(seed, axis, errors)


def run_suite(n_seeds: int = 20, axes=("channels", "spatial"), step: float = 1e-5):
    """All seeds on every axis, plus one duplicate-observation case per axis."""
    results = [check_layer(s, axis=ax, step=step) for ax in axes for s in range(n_seeds)]
    results += [check_layer(0, axis=ax, duplicate=True) for ax in axes]
    return results
