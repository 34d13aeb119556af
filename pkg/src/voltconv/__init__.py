"""Higher-order Volterra convolution kernels.

Dense Kronecker baseline, unique-term fast path, index-table generation,
a small reverse-mode tape, the hybrid attention block, and the verification
and benchmark command line.
"""

__version__ = "0.1.0"
