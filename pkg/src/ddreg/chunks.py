"""Overlapping-chunk tiling and feathered merging of grid fields.

A grid is divided into two chunks per axis (2**d chunks total) that overlap
by ``2 * overlap`` voxels at each joint.  Each chunk carries a separable
feathering weight field: 1 in its exclusive region, a linear ramp across the
shared band.  The weights of all chunks covering a voxel sum to 1 exactly,
so merging the chunks of an unmodified field reproduces it, and merging
independently estimated chunk fields blends them continuously across the
joints.  ``fuse_velocities`` averages the merged local field with the
upsampled global one at full resolution.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import reduce

import numpy as np

from .fields import _voxel_dims, upsample, upsample_vjp

__all__ = [
    "ChunkLayout",
    "make_chunk_layout",
    "split_chunks",
    "merge_chunks",
    "merge_chunks_vjp",
    "fuse_velocities",
    "fuse_velocities_vjp",
]


@dataclass(frozen=True)
class ChunkLayout:
    """Tiling of a ``full_shape`` grid into 2**d overlapping chunks."""

    full_shape: tuple[int, ...]
    chunk_shape: tuple[int, ...]
    overlap: int
    origins: tuple[tuple[int, ...], ...]
    weights: tuple[np.ndarray, ...]

    @property
    def num_chunks(self):
        return len(self.origins)

    def slices(self, i):
        """Index slices of chunk i within the full grid (voxel axes only)."""
        return tuple(slice(o, o + e) for o, e in zip(self.origins[i], self.chunk_shape))

    def weight_coverage(self):
        """Sum of all feathering weights placed on the full grid."""
        cover = np.zeros(self.full_shape)
        for i in range(self.num_chunks):
            cover[self.slices(i)] += self.weights[i]
        return cover


def _axis_weights(extent, band):
    low = np.ones(extent)
    high = np.ones(extent)
    if band:
        ramp = (np.arange(band) + 0.5) / band
        low[extent - band:] = 1.0 - ramp
        high[:band] = ramp
    return low, high


def make_chunk_layout(full_shape, overlap=4):
    """Two chunks per axis of extent ``ceil(n/2) + overlap``, anchored at 0
    and at ``n - extent``, with partition-of-unity feathering weights."""
    dims = tuple(int(n) for n in full_shape)
    if len(dims) not in (2, 3):
        raise ValueError(f"only 2-d and 3-d grids are supported, got dims {dims}")
    overlap = int(overlap)
    if overlap < 0:
        raise ValueError(f"overlap must be >= 0, got {overlap}")
    for n in dims:
        if n < 2 * overlap + 4:
            raise ValueError(f"axis of {n} voxels too small for overlap {overlap}")

    extents = tuple(-(-n // 2) + overlap for n in dims)
    anchor = [(0, n - e) for n, e in zip(dims, extents)]
    axis_w = [_axis_weights(e, 2 * e - n) for n, e in zip(dims, extents)]

    origins = []
    weights = []
    for bits in itertools.product((0, 1), repeat=len(dims)):
        origins.append(tuple(anchor[j][b] for j, b in enumerate(bits)))
        vecs = [axis_w[j][b] for j, b in enumerate(bits)]
        weights.append(reduce(np.multiply.outer, vecs))
    return ChunkLayout(
        full_shape=dims,
        chunk_shape=extents,
        overlap=overlap,
        origins=tuple(origins),
        weights=tuple(weights),
    )


def _check_field(field, layout):
    field = np.asarray(field, dtype=float)
    dims, is_vector = _voxel_dims(field, len(layout.full_shape))
    if dims != layout.full_shape:
        raise ValueError(f"field dims {dims} do not match layout {layout.full_shape}")
    return field, is_vector


def split_chunks(field, layout):
    """Copy out the k sub-grids of the layout (scalar or vector field)."""
    field, _ = _check_field(field, layout)
    return [field[layout.slices(i)].copy() for i in range(layout.num_chunks)]


def _check_chunks(chunks, layout):
    if len(chunks) != layout.num_chunks:
        raise ValueError(f"expected {layout.num_chunks} chunks, got {len(chunks)}")
    chunks = [np.asarray(c, dtype=float) for c in chunks]
    d = len(layout.full_shape)
    kinds = set()
    for c in chunks:
        dims, is_vector = _voxel_dims(c, d)
        if dims != layout.chunk_shape:
            raise ValueError(f"chunk dims {dims} do not match layout chunk shape {layout.chunk_shape}")
        kinds.add(is_vector)
    if len(kinds) != 1:
        raise ValueError("chunks mix scalar and vector fields")
    return chunks, kinds.pop()


def merge_chunks(chunks, layout):
    """Feather-blend k chunk fields back onto the full grid."""
    chunks, is_vector = _check_chunks(chunks, layout)
    d = len(layout.full_shape)
    out = np.zeros(layout.full_shape + ((d,) if is_vector else ()))
    for i, chunk in enumerate(chunks):
        w = layout.weights[i][..., None] if is_vector else layout.weights[i]
        out[layout.slices(i)] += w * chunk
    return out


def merge_chunks_vjp(grad, layout, vector=True):
    """VJP of :func:`merge_chunks` onto each chunk."""
    grad = np.asarray(grad, dtype=float)
    out = []
    for i in range(layout.num_chunks):
        w = layout.weights[i][..., None] if vector else layout.weights[i]
        out.append(w * grad[layout.slices(i)])
    return out


def fuse_velocities(v_global, v_local, global_weight=0.5):
    """Blend the upsampled half-resolution velocity with the merged local one.

    The default equal weighting averages the two branches; `global_weight`
    is exposed for ablations.
    """
    up = upsample(np.asarray(v_global, dtype=float), vector=True)
    v_local = np.asarray(v_local, dtype=float)
    if up.shape != v_local.shape:
        raise ValueError(
            f"upsampled global velocity {up.shape} does not match local field {v_local.shape}"
        )
    return global_weight * up + (1.0 - global_weight) * v_local


def fuse_velocities_vjp(grad, coarse_dims, global_weight=0.5):
    """VJP of :func:`fuse_velocities`: returns (grad_v_global, grad_v_local)."""
    grad = np.asarray(grad, dtype=float)
    grad_global = upsample_vjp(global_weight * grad, coarse_dims, vector=True)
    return grad_global, (1.0 - global_weight) * grad
