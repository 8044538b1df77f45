"""
BDC pooling layer with hand-written reverse-mode gradients.

A feature map of shape ``(h, w, C)`` is passed through a per-position affine
projection ``C -> d`` (the 1x1 convolution) and then through the BDC
pipeline. The observation axis decides what counts as one observation:

* ``"channels"``: each of the ``d`` projected channels is an observation of
  dimension ``h*w``, giving a ``d x d`` matrix (spatial pooling).
* ``"spatial"``: each of the ``h*w`` positions is an observation of
  dimension ``d``, giving an ``hw x hw`` matrix (channel pooling).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernel
from .errors import InvalidInputError, ShapeError, TrainingError

#: Below this distance the sqrt adjoint is defined as zero.
GRAD_EPS = 1e-12

AXES = ("channels", "spatial")


@dataclass
class Projection:
    """Affine 1x1 projection: ``weight`` is ``(C, d)``, ``bias`` is ``(d,)``."""

    weight: np.ndarray
    bias: np.ndarray | None = None

    @classmethod
    def init(cls, in_channels: int, out_dim: int, rng, bias: bool = True):
        """Uniform ``[-1/sqrt(C), 1/sqrt(C)]`` weights and a zero bias."""
        bound = 1.0 / np.sqrt(in_channels)
        weight = rng.uniform(-bound, bound, size=(in_channels, out_dim))
        return cls(weight, np.zeros(out_dim) if bias else None)

    @classmethod
    def identity(cls, channels: int, bias: bool = True):
        return cls(np.eye(channels), np.zeros(channels) if bias else None)

    @property
    def in_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]

    def copy(self) -> "Projection":
        return Projection(self.weight.copy(), None if self.bias is None else self.bias.copy())


@dataclass(frozen=True)
class PoolingConfig:
    observation_axis: str = "channels"
    reduced_dim: int = 16

    def __post_init__(self):
        if self.observation_axis not in AXES:
            raise ValueError(f"observation_axis must be one of {AXES}")
        if self.reduced_dim < 1:
            raise ValueError("reduced_dim must be positive")


@dataclass
class LayerCache:
    """Intermediates saved by :func:`bdc_forward` for :func:`bdc_backward`."""

    features: np.ndarray  # (hw, C) flattened input
    map_shape: tuple
    observations: np.ndarray  # (m, p) observation layout of projected features
    sq_dist: np.ndarray
    dist: np.ndarray
    axis: str


@dataclass
class TauParam:
    value: float = 1.0
    grad: float = 0.0


def check_feature_map(fm) -> np.ndarray:
    fm = np.asarray(fm, dtype=np.float64)
    if fm.ndim != 3:
        raise ShapeError(f"feature map must be (h, w, C), got shape {fm.shape}")
    if min(fm.shape) < 1:
        raise InvalidInputError(f"feature map is empty: {fm.shape}")
    if not np.all(np.isfinite(fm)):
        raise InvalidInputError("feature map contains non-finite entries")
    return fm


def project(fm, proj: Projection) -> np.ndarray:
    """Projected features of shape ``(h*w, d)``."""
    fm = check_feature_map(fm)
    if fm.shape[2] != proj.in_channels:
        raise ShapeError(
            f"feature map has {fm.shape[2]} channels, projection expects {proj.in_channels}"
        )
    x = fm.reshape(-1, fm.shape[2])
    y = x @ proj.weight
    if proj.bias is not None:
        y = y + proj.bias
    return y


def bdc_forward(fm, proj: Projection, cfg: PoolingConfig):
    """Return ``(bdc_matrix, cache)`` for a single feature map."""
    fm = check_feature_map(fm)
    y = project(fm, proj)
    obs = y.T if cfg.observation_axis == "channels" else y
    sq = kernel.pairwise_sq_dist(obs)
    dist = kernel.sqrt_dist(sq)
    a = kernel.double_center(dist)
    cache = LayerCache(
        features=fm.reshape(-1, fm.shape[2]),
        map_shape=fm.shape,
        observations=obs,
        sq_dist=sq,
        dist=dist,
        axis=cfg.observation_axis,
    )
    return a, cache


def center_adjoint(g) -> np.ndarray:
    """Adjoint of double centering, ``P g P`` (the map is self-adjoint)."""
    return kernel.double_center(g)


def sqrt_adjoint(g, dist, eps: float = GRAD_EPS) -> np.ndarray:
    """Adjoint of the entrywise sqrt; zero where ``dist <= eps``."""
    out = np.zeros_like(g)
    mask = dist > eps
    out[mask] = g[mask] / (2.0 * dist[mask])
    np.fill_diagonal(out, 0.0)
    return out


def sq_dist_adjoint(g, obs) -> np.ndarray:
    """Adjoint of the Gram-identity squared distances w.r.t. the observations."""
    s = g + g.T
    return 2.0 * (s.sum(axis=1)[:, None] * obs - s @ obs)


def bdc_backward(grad_a, cache: LayerCache, proj: Projection):
    """Backpropagate ``grad_a = dL/dA`` through :func:`bdc_forward`.

    Returns ``(grad_fm, grad_proj)`` where ``grad_fm`` has the feature map's
    shape and ``grad_proj`` is a :class:`Projection` holding the gradients of
    the weight and bias.
    """
    grad_a = np.asarray(grad_a, dtype=np.float64)
    m = cache.dist.shape[0]
    if grad_a.shape != (m, m):
        raise ShapeError(f"grad_a has shape {grad_a.shape}, expected {(m, m)}")
    if cache.features.shape[1] != proj.in_channels:
        raise ShapeError("cache does not match projection")
    g_dist = center_adjoint(grad_a)
    g_sq = sqrt_adjoint(g_dist, cache.dist)
    g_obs = sq_dist_adjoint(g_sq, cache.observations)
    g_y = g_obs.T if cache.axis == "channels" else g_obs
    g_weight = cache.features.T @ g_y
    g_bias = g_y.sum(axis=0) if proj.bias is not None else None
    g_fm = (g_y @ proj.weight.T).reshape(cache.map_shape)
    return g_fm, Projection(g_weight, g_bias)


def mean_pool_forward(fm, proj: Projection):
    """Mean of the projected features over positions, with its cache."""
    fm = check_feature_map(fm)
    y = project(fm, proj)
    return y.mean(axis=0), (fm.reshape(-1, fm.shape[2]), fm.shape)


def mean_pool_backward(grad_mu, cache, proj: Projection):
    x, shape = cache
    g_y = np.broadcast_to(np.asarray(grad_mu) / x.shape[0], (x.shape[0], proj.out_dim))
    g_weight = x.T @ g_y
    g_bias = g_y.sum(axis=0) if proj.bias is not None else None
    return (g_y @ proj.weight.T).reshape(shape), Projection(g_weight, g_bias)


class SGD:
    """Momentum SGD with L2 weight decay added to the gradient.

    ``v <- momentum * v + (g + weight_decay * p)``; ``p <- p - lr * v``.
    Velocities are keyed by parameter name and start at zero.
    """

    def __init__(self, momentum: float = 0.9, weight_decay: float = 5e-4):
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, params: dict, grads: dict, lr: float) -> dict:
        return sgd_update(params, grads, lr, self.momentum, self.weight_decay, self.velocity)


def sgd_update(params: dict, grads: dict, lr: float, momentum: float = 0.0,
               weight_decay: float = 0.0, velocity: dict | None = None) -> dict:
    """One SGD step on a dict of named arrays; returns new parameter arrays.

    ``velocity`` is updated in place when given. Non-finite gradients raise
    :class:`TrainingError` listing the offending parameters.
    """
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        raise TrainingError(
            f"non-finite gradients for {', '.join(sorted(bad))}",
            diagnostics={k: np.asarray(grads[k]).tolist() for k in bad},
        )
    if velocity is None:
        velocity = {}
    out = {}
    for name, p in params.items():
        p = np.asarray(p, dtype=np.float64)
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, expected {p.shape}")
        g = g + weight_decay * p
        v = velocity.get(name)
        v = g if v is None else momentum * v + g
        velocity[name] = v
        out[name] = p - lr * v
    return out
