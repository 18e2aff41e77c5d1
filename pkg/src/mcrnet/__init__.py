"""Meta-learned compression of quantized phase-shift matrices.

Public surface: the autodiff tensor core, the asymmetric autoencoder,
the phase-shift data/channel toolkit, the meta-trainer, and the CLI.
"""

__version__ = "0.1.0"

from .tensor import Parameter, ParameterSet, Tensor  # noqa: F401
