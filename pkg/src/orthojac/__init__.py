"""Piecewise-linear layers with exactly orthogonal Jacobians.

Subpackages
-----------
``linalg``   dense kernels, portable RNG, Householder QR, Jacobi SVD
``pwl``      continuous piecewise-linear scalar functions
``layers``   layer families and their Jacobians / vector-Jacobian products
``verify``   orthogonality and isometry checks, spectra, density gaps
``train``    loss, optimizer, training loop
``data``     IDX loading, splits, synthetic sets, batching
``cli``      command-line entry points
"""

__version__ = "0.1.0"
