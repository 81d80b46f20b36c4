"""Small reverse-mode autodiff engine plus sparse-voxel network primitives."""
from .tensor import Tensor, no_grad, concat, take_rows, softmax, layer_norm, gelu, relu, sigmoid
from .functional import (SparseTokenSet, sparse_conv, sparse_upsample, windowed_sparse_attention,
                         cross_attention, attention, position_embed, timestep_embed, conv_neighbors)
from .layers import Module, Linear, LayerNorm, MLP, make_rng
from .optim import AdamW
from .gradcheck import grad_check
from .checkpoint import save_checkpoint, load_checkpoint

__all__ = [
    "Tensor", "no_grad", "concat", "take_rows", "softmax", "layer_norm", "gelu", "relu", "sigmoid",
    "SparseTokenSet", "sparse_conv", "sparse_upsample", "windowed_sparse_attention",
    "cross_attention", "attention", "position_embed", "timestep_embed", "conv_neighbors",
    "Module", "Linear", "LayerNorm", "MLP", "make_rng", "AdamW", "grad_check",
    "save_checkpoint", "load_checkpoint",
]
