"""Hybrid multi-axis aggregation super-resolution network.

Subpackages: tensor (autodiff core), attention (window/grid kernels),
model (network assembly), imaging (I/O, degradation, metrics),
training (optimizer, loop, checkpoints, transfer), analysis (CKA).
"""

__version__ = "0.1.0"
