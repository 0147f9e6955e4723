"""Minimal reverse-mode autodiff over sparse voxel tensors."""

from . import functional
from .checkpoint import load_checkpoint, save_checkpoint
from .gradcheck import grad_check, grad_check_report
from .layers import ECA, MLP, BatchNorm, Conv, GeM, Module, TConv
from .sparse_ops import (BatchNormState, activation, batch_norm, eca, gem_pool, pointwise_mlp,
                         sparse_conv, sparse_tconv)
from .tape import Parameter, Tape, Var, backward
from .tensor import SparseTensor

__all__ = [
    "functional", "load_checkpoint", "save_checkpoint", "grad_check", "grad_check_report",
    "ECA", "MLP", "BatchNorm", "Conv", "GeM", "Module", "TConv",
    "BatchNormState", "activation", "batch_norm", "eca", "gem_pool", "pointwise_mlp",
    "sparse_conv", "sparse_tconv", "Parameter", "Tape", "Var", "backward", "SparseTensor",
]
