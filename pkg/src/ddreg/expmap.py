"""Exponentiate a stationary velocity field into a diffeomorphism.

The flow of a constant-in-time velocity field over unit time is computed by
scaling and squaring: scale the field by ``1 / 2**n`` so no voxel moves more
than ``target_max_step``, then compose the resulting small deformation with
itself n times.  ``exponentiate_vjp`` backpropagates exactly through the
squarings and the initial scaling; the step count n is treated as a constant
during differentiation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .fields import compose, compose_vjp

__all__ = ["IntegrationConfig", "choose_steps", "exponentiate", "exponentiate_vjp"]


@dataclass(frozen=True)
class IntegrationConfig:
    """Step selection for scaling and squaring.

    `target_max_step` caps the per-voxel displacement of the scaled field,
    in voxels; `max_squarings` caps the number of squarings.
    """

    target_max_step: float = 0.5
    max_squarings: int = 10

    def __post_init__(self):
        if not 0.0 < self.target_max_step <= 1.0:
            raise ValueError(f"target_max_step must be in (0, 1], got {self.target_max_step}")
        if not 0 <= self.max_squarings <= 16:
            raise ValueError(f"max_squarings must be in [0, 16], got {self.max_squarings}")


def _check_velocity(velocity):
    if velocity.ndim not in (3, 4) or velocity.shape[-1] != velocity.ndim - 1:
        raise ValueError(f"expected a velocity field of shape dims + (d,), got {velocity.shape}")
    if not np.all(np.isfinite(velocity)):
        raise FloatingPointError("non-finite velocity field")


def choose_steps(velocity, cfg=IntegrationConfig()):
    """Number of squarings so the scaled field moves <= target_max_step."""
    velocity = np.asarray(velocity, dtype=float)
    _check_velocity(velocity)
    peak = float(np.max(np.abs(velocity)))
    if peak <= cfg.target_max_step:
        return 0
    return min(cfg.max_squarings, math.ceil(math.log2(peak / cfg.target_max_step)))


def _scaling_squaring(velocity, cfg):
    """Forward pass keeping each squaring's input for the backward sweep."""
    n = choose_steps(velocity, cfg)
    disp = velocity / float(2 ** n)
    steps = [disp]
    for _ in range(n):
        disp = compose(disp, disp)
        if not np.all(np.isfinite(disp)):
            raise FloatingPointError("velocity field diverged during integration")
        steps.append(disp)
    return disp, steps


def exponentiate(velocity, cfg=IntegrationConfig()):
    """Displacement of the unit-time flow of a stationary velocity field."""
    velocity = np.asarray(velocity, dtype=float)
    disp, _ = _scaling_squaring(velocity, cfg)
    return disp


def _backprop_squarings(steps, grad):
    for disp in reversed(steps[:-1]):
        grad_a, grad_b = compose_vjp(disp, disp, grad)
        grad = grad_a + grad_b
    return grad / float(2 ** (len(steps) - 1))


def exponentiate_vjp(velocity, cfg, grad_phi):
    """Gradient of a scalar loss w.r.t. the velocity, given its gradient
    w.r.t. the output displacement of :func:`exponentiate`."""
    velocity = np.asarray(velocity, dtype=float)
    grad_phi = np.asarray(grad_phi, dtype=float)
    if grad_phi.shape != velocity.shape:
        raise ValueError(f"gradient shape {grad_phi.shape} does not match velocity shape {velocity.shape}")
    _, steps = _scaling_squaring(velocity, cfg)
    return _backprop_squarings(steps, grad_phi)
