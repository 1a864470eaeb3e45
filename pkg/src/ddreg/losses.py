"""Variational registration objective.

The velocity at each branch is sampled from a per-voxel diagonal Gaussian
posterior (mu, sigma**2) by reparameterization.  Matching is mean squared
error scaled by an image-noise variance; smoothness enters as the KL
divergence between the posterior and a zero-mean Gaussian prior whose
precision is ``prior_precision`` times the grid graph Laplacian.  Dropping
parameter-free constants, that KL is

    0.5 * (lam_p * (sum_edges |mu(p) - mu(q)|**2 + sum_p sigma2(p) * deg(p))
           - sum_p log sigma2(p))

so the mean field pays for roughness across grid edges and the variance
field is pulled toward the prior's spread.  Reported KL values are therefore
meaningful up to an additive constant only.

``ddr_total_loss`` combines the three branches:

    w_down  * (mse_down + lam * kl_global)
  + w_chunk * mean_i(mse_chunk_i + lam * kl_chunk_i)
  + w_full  * mse_full
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .chunks import split_chunks
from .fields import downsample

__all__ = [
    "LOG_VAR_MIN",
    "LOG_VAR_MAX",
    "VelocityPosterior",
    "ObjectiveConfig",
    "LossBreakdown",
    "sample_velocity",
    "sample_velocity_vjp",
    "mse_loss",
    "mse_loss_vjp",
    "kl_loss",
    "kl_loss_vjp",
    "ddr_total_loss",
]

# keeps sigma**2 in [2e-9, 148]; outside this range the KL is numerically useless
LOG_VAR_MIN = -20.0
LOG_VAR_MAX = 5.0


@dataclass
class VelocityPosterior:
    """Per-voxel Gaussian over a velocity field: mean and log-variance."""

    mu: np.ndarray
    log_var: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=float)
        self.log_var = np.clip(np.asarray(self.log_var, dtype=float), LOG_VAR_MIN, LOG_VAR_MAX)
        if self.mu.shape != self.log_var.shape:
            raise ValueError(f"mu shape {self.mu.shape} does not match log_var shape {self.log_var.shape}")

    @property
    def sigma(self):
        return np.exp(0.5 * self.log_var)

    @classmethod
    def zeros(cls, dims, log_var=-10.0):
        """Identity-centred posterior with near-deterministic sampling."""
        shape = tuple(dims) + (len(dims),)
        return cls(np.zeros(shape), np.full(shape, float(log_var)))


@dataclass(frozen=True)
class ObjectiveConfig:
    kl_weight: float = 0.01
    prior_precision: float = 10.0
    branch_weights: tuple[float, float, float] = (1.0, 1.0, 1.0)
    image_noise_var: float = 0.01

    def __post_init__(self):
        w = tuple(float(x) for x in self.branch_weights)
        object.__setattr__(self, "branch_weights", w)
        if len(w) != 3 or any(not np.isfinite(x) or x < 0 for x in w):
            raise ValueError(f"branch_weights must be three finite non-negative reals, got {w}")
        if max(w) == 0:
            raise ValueError("at least one branch weight must be positive")
        if not self.kl_weight >= 0:
            raise ValueError(f"kl_weight must be >= 0, got {self.kl_weight}")
        if not self.prior_precision > 0:
            raise ValueError(f"prior_precision must be > 0, got {self.prior_precision}")
        if not self.image_noise_var > 0:
            raise ValueError(f"image_noise_var must be > 0, got {self.image_noise_var}")


def sample_velocity(post, noise):
    """Reparameterized draw v = mu + sigma * noise."""
    noise = np.asarray(noise, dtype=float)
    if noise.shape != post.mu.shape:
        raise ValueError(f"noise shape {noise.shape} does not match posterior shape {post.mu.shape}")
    return post.mu + np.exp(0.5 * post.log_var) * noise


def sample_velocity_vjp(post, noise, grad):
    """VJP of :func:`sample_velocity`: returns (grad_mu, grad_log_var)."""
    grad = np.asarray(grad, dtype=float)
    return grad, 0.5 * np.exp(0.5 * post.log_var) * np.asarray(noise, dtype=float) * grad


def mse_loss(warped, target, cfg=ObjectiveConfig()):
    """Matching term: sum of squared differences over 2 * noise_var * N."""
    warped = np.asarray(warped, dtype=float)
    target = np.asarray(target, dtype=float)
    if warped.shape != target.shape:
        raise ValueError(f"shapes differ: {warped.shape} vs {target.shape}")
    diff = warped - target
    return float(np.sum(diff * diff) / (2.0 * cfg.image_noise_var * diff.size))


def mse_loss_vjp(warped, target, cfg, grad):
    """Gradient of grad * mse_loss w.r.t. `warped`."""
    warped = np.asarray(warped, dtype=float)
    target = np.asarray(target, dtype=float)
    return grad * (warped - target) / (cfg.image_noise_var * warped.size)


def _degree_map(dims):
    """Number of grid-graph neighbours of each voxel."""
    deg = np.zeros(dims)
    for axis, n in enumerate(dims):
        edge = np.full(n, 2.0)
        edge[0] = edge[-1] = 1.0
        shape = [1] * len(dims)
        shape[axis] = n
        deg += edge.reshape(shape)
    return deg


def _graph_laplacian(arr):
    """Grid Laplacian per component: deg(p) * x(p) - sum of neighbours."""
    out = np.zeros_like(arr)
    for axis in range(arr.ndim - 1):
        d = np.diff(arr, axis=axis)
        lo = tuple(slice(None, -1) if a == axis else slice(None) for a in range(arr.ndim))
        hi = tuple(slice(1, None) if a == axis else slice(None) for a in range(arr.ndim))
        out[lo] -= d
        out[hi] += d
    return out


def kl_loss(post, cfg=ObjectiveConfig()):
    """KL from the posterior to the Laplacian smoothing prior, constants dropped."""
    mu, log_var = post.mu, post.log_var
    sig2 = np.exp(log_var)
    edge_energy = 0.0
    for axis in range(mu.ndim - 1):
        d = np.diff(mu, axis=axis)
        edge_energy += float(np.sum(d * d))
    deg = _degree_map(mu.shape[:-1])[..., None]
    trace_term = float(np.sum(sig2 * deg))
    return 0.5 * (cfg.prior_precision * (edge_energy + trace_term) - float(np.sum(log_var)))


def kl_loss_vjp(post, cfg, grad):
    """VJP of :func:`kl_loss`: returns (grad_mu, grad_log_var)."""
    deg = _degree_map(post.mu.shape[:-1])[..., None]
    grad_mu = grad * cfg.prior_precision * _graph_laplacian(post.mu)
    grad_log_var = grad * 0.5 * (cfg.prior_precision * deg * np.exp(post.log_var) - 1.0)
    return grad_mu, grad_log_var


@dataclass(frozen=True)
class LossBreakdown:
    """Total objective value plus its weighted addends, in summation order."""

    total: float
    addends: dict[str, float] = field(compare=False)
    mse_down: float = 0.0
    kl_global: float = 0.0
    mse_chunks: tuple[float, ...] = ()
    kl_chunks: tuple[float, ...] = ()
    mse_full: float = 0.0


def ddr_total_loss(image0, image1, warped_down, warped_chunks, warped_full,
                   global_post, chunk_posts, layout, cfg=ObjectiveConfig()):
    """Three-branch objective from already-warped branch outputs.

    `image0` participates only in shape validation; the matching targets are
    `image1` at full scale and its downsampled / chunked versions.
    """
    image0 = np.asarray(image0, dtype=float)
    image1 = np.asarray(image1, dtype=float)
    if image0.shape != image1.shape:
        raise ValueError(f"image shapes differ: {image0.shape} vs {image1.shape}")
    warped_full = np.asarray(warped_full, dtype=float)
    if warped_full.shape != image1.shape:
        raise ValueError(f"full-scale warp shape {warped_full.shape} does not match {image1.shape}")
    k = layout.num_chunks
    if len(warped_chunks) != k or len(chunk_posts) != k:
        raise ValueError(f"expected {k} chunk outputs and posteriors")

    w_down, w_chunk, w_full = cfg.branch_weights
    target_down = downsample(image1)
    target_chunks = split_chunks(image1, layout)

    mse_down = mse_loss(warped_down, target_down, cfg)
    kl_global = kl_loss(global_post, cfg)
    mse_chunks = tuple(mse_loss(w, t, cfg) for w, t in zip(warped_chunks, target_chunks))
    kl_chunks = tuple(kl_loss(p, cfg) for p in chunk_posts)
    mse_full = mse_loss(warped_full, image1, cfg)

    addends = {
        "down.mse": w_down * mse_down,
        "down.kl": w_down * cfg.kl_weight * kl_global,
    }
    for i in range(k):
        addends[f"chunk{i}.mse"] = w_chunk / k * mse_chunks[i]
        addends[f"chunk{i}.kl"] = w_chunk / k * cfg.kl_weight * kl_chunks[i]
    addends["full.mse"] = w_full * mse_full
    total = 0.0
    for value in addends.values():
        total += value
    return LossBreakdown(
        total=total,
        addends=addends,
        mse_down=mse_down,
        kl_global=kl_global,
        mse_chunks=mse_chunks,
        kl_chunks=kl_chunks,
        mse_full=mse_full,
    )
