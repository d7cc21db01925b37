"""Low-light image enhancement network with dual-stream cross-scale attention.

Pure numpy/numba implementation: tensors and reverse-mode autodiff in
``tensor``, attention operators in ``attention``, the U-shaped network in
``network``, losses and metrics in ``objectives``, the training loop in
``training``, image/dataset handling in ``data``, and the command line in
``cli``.
"""

__version__ = "0.1.0"
