"""Sparse voxel attribute grids: baking, rendering, a sparse VAE, a flow transformer and part segmentation."""
from .errors import AttrGridError, BoundsError, EmptyInputError, FormatError, LayoutError
from .grid import ChannelLayout, SparseAttributeGrid, batch_query, read_grid, trilinear_query, write_grid

__version__ = "0.1.0"

__all__ = ["AttrGridError", "BoundsError", "EmptyInputError", "FormatError", "LayoutError",
           "ChannelLayout", "SparseAttributeGrid", "batch_query", "trilinear_query", "read_grid", "write_grid"]
