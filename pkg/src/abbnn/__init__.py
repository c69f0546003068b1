"""Multiplication-free binary neural networks.

Train small normalizer-free binary networks, fold them into a bit-packed
integer model, and run inference with XNOR-popcount, additions and shifts
only, with op counters that prove no multiplication happened.
"""
from .bitcore import BitTensor, FixedTensor, pack_signs, shift_scale, xnor_popcount_dot
from .graphspec import GraphSpec, load_spec
from .kernels import BACKEND

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "BitTensor",
    "FixedTensor",
    "GraphSpec",
    "load_spec",
    "pack_signs",
    "shift_scale",
    "xnor_popcount_dot",
    "__version__",
]
