"""Sparse-view Gaussian splatting toolkit: rendering, pseudo-frame fusion, confidence masks,
scene-aware pruning and confidence-weighted optimization on CPU."""

__version__ = "0.1.0"
