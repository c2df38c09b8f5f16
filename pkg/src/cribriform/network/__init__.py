from .layers import BatchNorm, Conv2D, Layer, MissingCache, ReLU, Residual, SEBlock, Sequential, Softmax
from .model import DESK_NETWORK, PAPER_NETWORK, Network, NetworkConfig, NumericalInstability
from .serialization import (
    ArchitectureMismatch,
    CorruptContainer,
    load_weights,
    read_weights,
    save_weights,
    write_weights,
)

__all__ = [
    "ArchitectureMismatch",
    "BatchNorm",
    "Conv2D",
    "CorruptContainer",
    "DESK_NETWORK",
    "Layer",
    "MissingCache",
    "Network",
    "NetworkConfig",
    "NumericalInstability",
    "PAPER_NETWORK",
    "ReLU",
    "Residual",
    "SEBlock",
    "Sequential",
    "Softmax",
    "load_weights",
    "read_weights",
    "save_weights",
    "write_weights",
]
