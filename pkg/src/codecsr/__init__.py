"""Codec-prior-driven online video super-resolution.

A toy block codec exposes the signals a real decoder already has (frame
types, block motion vectors, quantized residual magnitudes); a recurrent
network turns them into alignment offsets, fusion gates, and a per-frame
choice of reconstruction depth. The `tensor` module supplies the rank-4
autodiff engine everything runs on; `cli` is the command-line entry point.
"""

__version__ = "0.1.0"
