from . import ops
from .autodiff import Graph, Node, backward
from .io import load_tensor, save_tensor
from .ops import check_finite, layer_norm, matmul, softmax_rows
from .optim import Adam, AdamSettings
from .rng import Rng, randn, stream_id

__all__ = [
    "Adam",
    "AdamSettings",
    "Graph",
    "Node",
    "Rng",
    "backward",
    "check_finite",
    "layer_norm",
    "load_tensor",
    "matmul",
    "ops",
    "randn",
    "save_tensor",
    "softmax_rows",
    "stream_id",
]
