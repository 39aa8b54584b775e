"""Adversarial federated transfer learning simulator.

Labeled source clients and one unlabeled target client train image
classifiers together; a server-side client discriminator behind a gradient
reversal layer aligns their feature spaces, and target predictions come
from a majority vote across the source classifiers.
"""

from ._kernels import BACKEND as kernel_backend

__version__ = "0.1.0"
__all__ = ["kernel_backend", "__version__"]
