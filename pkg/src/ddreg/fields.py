"""Scalar/vector field algebra on regular voxel grids.

Conventions used throughout the package:

* A scalar field (an image) is a float array of shape ``dims`` with 2 or 3
  axes, every axis of length >= 2.
* A vector field stores one d-component vector per voxel in a trailing axis:
  shape ``dims + (d,)`` with ``d == len(dims)``.  Components are in voxel
  units of the grid the field lives on.
* A deformation phi is represented by its displacement field u, so that
  ``phi(p) = p + u(p)``.  The identity deformation is all zeros, exactly.
* Warping is pull-back: the output at voxel p samples the source at phi(p).
* All sampling clamps coordinates to ``[0, n - 1]`` per axis, so warps are
  defined everywhere and out-of-bounds flow never produces NaNs.
"""

from __future__ import annotations

import itertools

import numpy as np

__all__ = [
    "grid_coordinates",
    "identity_displacement",
    "sample_linear",
    "sample_linear_vjp",
    "warp_image",
    "warp_image_vjp",
    "warp_labels",
    "compose",
    "compose_vjp",
    "downsample",
    "upsample",
    "upsample_vjp",
    "spatial_gradient",
    "jacobian_determinant_map",
]


def grid_coordinates(dims):
    """Voxel coordinates as a vector field of shape ``dims + (d,)``."""
    axes = [np.arange(n, dtype=float) for n in dims]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


def identity_displacement(dims):
    """Displacement of the identity deformation: all zeros."""
    return np.zeros(tuple(dims) + (len(dims),))


def _voxel_dims(field, d):
    """Grid dims of `field` for d-dimensional queries; flags vector fields."""
    if field.ndim == d:
        return field.shape, False
    if field.ndim == d + 1 and field.shape[-1] == d:
        return field.shape[:-1], True
    raise ValueError(
        f"array of shape {field.shape} is neither a scalar nor a vector "
        f"field on a {d}-d grid"
    )


def _check_dims(dims):
    if len(dims) not in (2, 3):
        raise ValueError(f"only 2-d and 3-d grids are supported, got dims {dims}")
    if min(dims) < 2:
        raise ValueError(f"every grid axis needs at least 2 voxels, got dims {dims}")


def _voxel_strides(dims):
    """C-order flat strides, in elements, for voxel index arithmetic."""
    strides = [1] * len(dims)
    for j in range(len(dims) - 2, -1, -1):
        strides[j] = strides[j + 1] * dims[j + 1]
    return strides


def _cell_anchor(dims, points):
    """Clamped lower cell corner and in-cell fraction for each query point."""
    hi = np.asarray(dims, dtype=float) - 1.0
    x = np.clip(points, 0.0, hi)
    i0 = np.minimum(x.astype(np.intp), np.asarray(dims, dtype=np.intp) - 2)
    return i0, x - i0


def sample_linear(field, points):
    """Multilinear interpolation of a field at fractional voxel coordinates.

    `points` has shape ``batch + (d,)``; coordinates outside the grid are
    clamped to the boundary before interpolation.  Returns shape ``batch``
    for scalar fields and ``batch + (d,)`` for vector fields.
    """
    field = np.asarray(field, dtype=float)
    points = np.asarray(points, dtype=float)
    if points.ndim == 0 or points.shape[-1] not in (2, 3):
        raise ValueError("sample points must have a trailing axis of length 2 or 3")
    d = points.shape[-1]
    dims, is_vector = _voxel_dims(field, d)
    _check_dims(dims)
    if not np.all(np.isfinite(points)):
        raise ValueError("non-finite sample coordinates")

    i0, t = _cell_anchor(dims, points)
    flat = field.reshape(-1, d) if is_vector else field.reshape(-1)
    strides = _voxel_strides(dims)
    out = None
    for corner in itertools.product((0, 1), repeat=d):
        idx = sum((i0[..., j] + corner[j]) * strides[j] for j in range(d))
        w = np.ones(points.shape[:-1])
        for j in range(d):
            w = w * (t[..., j] if corner[j] else 1.0 - t[..., j])
        val = flat[idx]
        term = w[..., None] * val if is_vector else w * val
        out = term if out is None else out + term
    return out


def sample_linear_vjp(field, points, grad, need_point_grad=True):
    """Vector-Jacobian product of :func:`sample_linear`.

    Returns ``(grad_field, grad_points)`` for an upstream gradient `grad` of
    the sampled output.  The point gradient differentiates the interpolant
    itself (piecewise-linear weights); coordinates that were clamped get a
    zero coordinate gradient.  With ``need_point_grad=False`` the second
    return value is None.
    """
    field = np.asarray(field, dtype=float)
    points = np.asarray(points, dtype=float)
    d = points.shape[-1]
    dims, is_vector = _voxel_dims(field, d)
    grad = np.asarray(grad, dtype=float)

    i0, t = _cell_anchor(dims, points)
    flat = field.reshape(-1, d) if is_vector else field.reshape(-1)
    grad_flat = np.zeros_like(flat)
    grad_points = np.zeros_like(points) if need_point_grad else None
    hi = np.asarray(dims, dtype=float) - 1.0
    inside = (points >= 0.0) & (points <= hi)
    strides = _voxel_strides(dims)

    for corner in itertools.product((0, 1), repeat=d):
        idx = sum((i0[..., j] + corner[j]) * strides[j] for j in range(d))
        w_axis = [(t[..., j] if corner[j] else 1.0 - t[..., j]) for j in range(d)]
        w = w_axis[0]
        for j in range(1, d):
            w = w * w_axis[j]
        if is_vector:
            np.add.at(grad_flat, idx, w[..., None] * grad)
        else:
            np.add.at(grad_flat, idx, w * grad)
        if not need_point_grad:
            continue
        # d(out)/d(x_j) = sum_corners value * dw/dx_j, zero where clamped
        gval = np.sum(flat[idx] * grad, axis=-1) if is_vector else flat[idx] * grad
        for j in range(d):
            dw = np.ones(points.shape[:-1]) if corner[j] else -np.ones(points.shape[:-1])
            for k in range(d):
                if k != j:
                    dw = dw * w_axis[k]
            grad_points[..., j] += gval * dw * inside[..., j]
    return grad_flat.reshape(field.shape), grad_points


def warp_image(image, displacement):
    """Pull-back warp: output(p) = image sampled at p + u(p)."""
    image = np.asarray(image, dtype=float)
    displacement = np.asarray(displacement, dtype=float)
    if displacement.shape != image.shape + (image.ndim,):
        raise ValueError(
            f"displacement shape {displacement.shape} does not match image "
            f"shape {image.shape}"
        )
    return sample_linear(image, grid_coordinates(image.shape) + displacement)


def warp_image_vjp(image, displacement, grad):
    """VJP of :func:`warp_image`: returns (grad_image, grad_displacement)."""
    image = np.asarray(image, dtype=float)
    points = grid_coordinates(image.shape) + np.asarray(displacement, dtype=float)
    return sample_linear_vjp(image, points, grad)


def warp_labels(labels, displacement):
    """Nearest-neighbour warp for integer label maps; never invents labels."""
    labels = np.asarray(labels)
    displacement = np.asarray(displacement, dtype=float)
    if displacement.shape != labels.shape + (labels.ndim,):
        raise ValueError(
            f"displacement shape {displacement.shape} does not match label "
            f"map shape {labels.shape}"
        )
    _check_dims(labels.shape)
    points = grid_coordinates(labels.shape) + displacement
    if not np.all(np.isfinite(points)):
        raise ValueError("non-finite sample coordinates")
    idx = np.rint(points).astype(np.intp)
    for j, n in enumerate(labels.shape):
        np.clip(idx[..., j], 0, n - 1, out=idx[..., j])
    flat = sum(idx[..., j] * s for j, s in enumerate(_voxel_strides(labels.shape)))
    return labels.reshape(-1)[flat]


def compose(disp_a, disp_b):
    """Displacement of phi_a o phi_b: u(p) = u_b(p) + u_a(p + u_b(p))."""
    disp_a = np.asarray(disp_a, dtype=float)
    disp_b = np.asarray(disp_b, dtype=float)
    if disp_a.shape != disp_b.shape:
        raise ValueError(f"displacement shapes differ: {disp_a.shape} vs {disp_b.shape}")
    dims, is_vector = _voxel_dims(disp_a, disp_a.ndim - 1)
    if not is_vector:
        raise ValueError(f"displacements must be vector fields, got shape {disp_a.shape}")
    points = grid_coordinates(dims) + disp_b
    return disp_b + sample_linear(disp_a, points)


def compose_vjp(disp_a, disp_b, grad):
    """VJP of :func:`compose`: returns (grad_disp_a, grad_disp_b)."""
    disp_b = np.asarray(disp_b, dtype=float)
    points = grid_coordinates(disp_b.shape[:-1]) + disp_b
    grad_a, grad_points = sample_linear_vjp(disp_a, points, grad)
    return grad_a, grad + grad_points


def downsample(field, vector=False):
    """Halve the resolution by 2x block-averaging along every grid axis.

    Odd axes are edge-padded by one voxel first, so the result has
    ``ceil(n / 2)`` voxels per axis.  Vector components are additionally
    halved so displacements stay in the coarse grid's voxel units.
    """
    arr = np.asarray(field, dtype=float)
    d = arr.ndim - 1 if vector else arr.ndim
    dims = arr.shape[:d]
    _check_dims(dims)
    pad = [(0, n % 2) for n in dims] + ([(0, 0)] if vector else [])
    if any(p[1] for p in pad):
        arr = np.pad(arr, pad, mode="edge")
    for axis in range(d):
        even = tuple(slice(0, None, 2) if a == axis else slice(None) for a in range(arr.ndim))
        odd = tuple(slice(1, None, 2) if a == axis else slice(None) for a in range(arr.ndim))
        arr = 0.5 * (arr[even] + arr[odd])
    return arr * 0.5 if vector else arr


def _upsample_points(coarse_dims):
    # fine voxel j sits at coarse coordinate (j - 0.5) / 2: block-center
    # alignment, the geometric inverse of 2x block-averaging
    axes = [(np.arange(2 * n, dtype=float) - 0.5) / 2.0 for n in coarse_dims]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


def upsample(field, vector=False):
    """Double the resolution by multilinear interpolation along every axis.

    Vector components are doubled so displacements land in the fine grid's
    voxel units.
    """
    arr = np.asarray(field, dtype=float)
    d = arr.ndim - 1 if vector else arr.ndim
    dims = arr.shape[:d]
    _check_dims(dims)
    out = sample_linear(arr, _upsample_points(dims))
    return out * 2.0 if vector else out


def upsample_vjp(grad, coarse_dims, vector=False):
    """VJP of :func:`upsample` onto the coarse field."""
    coarse_dims = tuple(coarse_dims)
    grad = np.asarray(grad, dtype=float)
    if vector:
        grad = grad * 2.0
        zeros = np.zeros(coarse_dims + (len(coarse_dims),))
    else:
        zeros = np.zeros(coarse_dims)
    grad_field, _ = sample_linear_vjp(zeros, _upsample_points(coarse_dims), grad,
                                      need_point_grad=False)
    return grad_field


def spatial_gradient(field):
    """Per-axis derivatives: central differences inside, one-sided at edges.

    Returns a vector field of shape ``field.shape + (d,)``.
    """
    field = np.asarray(field, dtype=float)
    _check_dims(field.shape)
    if min(field.shape) < 3:
        raise ValueError(f"gradient needs at least 3 voxels per axis, got {field.shape}")
    return np.stack(np.gradient(field), axis=-1)


def jacobian_determinant_map(displacement):
    """det(I + du/dp) at every voxel of a displacement field."""
    displacement = np.asarray(displacement, dtype=float)
    dims, is_vector = _voxel_dims(displacement, displacement.ndim - 1)
    if not is_vector:
        raise ValueError(f"expected a displacement field, got shape {displacement.shape}")
    d = len(dims)
    jac = np.empty(dims + (d, d))
    for i in range(d):
        jac[..., i, :] = spatial_gradient(displacement[..., i])
    for i in range(d):
        jac[..., i, i] += 1.0
    return np.linalg.det(jac)
