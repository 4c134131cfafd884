"""percolab: long-range percolation on Z^d with hierarchical kernel decomposition."""
from ._backend import BACKEND
from .kernels import (INFINITE, Block, Displacement, ModelParams, SigmaDecomposition, block_of,
                      h_sigma, kernel_H_block, kernel_H_sigma, kernel_J, kernel_J_restricted,
                      kernel_R_sigma, translate_sigma)

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "INFINITE", "Block", "Displacement", "ModelParams", "SigmaDecomposition",
    "block_of", "h_sigma", "kernel_H_block", "kernel_H_sigma", "kernel_J", "kernel_J_restricted",
    "kernel_R_sigma", "translate_sigma", "__version__",
]
