"""Minimal float64 neural-network kernel with explicit backward passes."""

from . import checkpoint
from .functional import cross_entropy, log_softmax, one_hot, sigmoid, softmax, softmax_cross_entropy
from .layers import (Activation, BatchNorm, Conv2d, Dense, Dropout, Flatten, Layer, LayerSpec,
                     MaxPool2d)
from .network import Sequential, build_layer
from .optim import SGD, Adam, Optimizer, RMSprop, make_optimizer

__all__ = [
    "Activation", "Adam", "BatchNorm", "Conv2d", "Dense", "Dropout", "Flatten", "Layer",
    "LayerSpec", "MaxPool2d", "Optimizer", "RMSprop", "SGD", "Sequential", "build_layer",
    "checkpoint", "cross_entropy", "log_softmax", "make_optimizer", "one_hot", "sigmoid",
    "softmax", "softmax_cross_entropy",
]
