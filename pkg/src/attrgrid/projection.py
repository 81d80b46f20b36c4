"""Splat a front-view image into a sparse grid through its view position map."""
from __future__ import annotations

import numpy as np

from .errors import LayoutError
from .grid import ChannelLayout, SparseAttributeGrid, containing_voxel, encode_keys, decode_keys
from .uv import PositionMap, TextureImage


def project_image_to_grid(img: TextureImage, vpm: PositionMap, resolution: int,
                          layout: ChannelLayout | None = None) -> SparseAttributeGrid:
    """Each touched voxel stores the mean colour of the pixels landing in it."""
    if (img.height, img.width) != (vpm.height, vpm.width):
        raise LayoutError(
            f"image {img.width}x{img.height} does not match position map {vpm.width}x{vpm.height}"
        )
    layout = layout or ChannelLayout()
    if not layout.has("color") or layout.color != img.channels:
        raise LayoutError("projection needs a colour span matching the image channels")
    valid = vpm.mask & img.mask
    pts = vpm.positions[valid]
    cols = img.values[valid]
    if len(pts) == 0:
        return SparseAttributeGrid(resolution, layout)
    keys = encode_keys(containing_voxel(pts, resolution), resolution)
    uniq, inverse, counts = np.unique(keys, return_inverse=True, return_counts=True)
    # bucket by voxel, then sort each bucket by value so the float sums do not
    # depend on pixel order
    order = np.lexsort(tuple(cols[:, c] for c in reversed(range(cols.shape[1]))) + (inverse,))
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    sums = np.add.reduceat(cols[order], starts, axis=0)
    means = np.clip(sums / counts[:, None], 0.0, 1.0)
    attrs = np.zeros((len(uniq), layout.k))
    attrs[:, layout.span("color")] = means
    return SparseAttributeGrid.from_arrays(decode_keys(uniq, resolution), attrs, resolution, layout)
