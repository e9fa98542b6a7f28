"""Marked temporal point processes with a neural spectral influence kernel."""

from .core import (DataError, Dataset, Domain, EventPoint, EventSequence, normalize_dataset,
                   read_dataset, validate_sequence)
from .kernel import (BasisKernel, CosineBasis, ExpHawkesKernel, KernelModel, SpectralKernel,
                     kernel_eval, kernel_grad, kernel_grid, kernel_sup_bound)
from .intensity import intensity, lambda_at, lambda_trace
from .likelihood import (LogLikResult, MCIntegralConfig, log_likelihood, log_likelihood_grad,
                         mc_integral)
from .simulator import SimConfig, simulate, simulate_dataset

__version__ = "0.1.0"
