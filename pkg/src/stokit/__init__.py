"""stokit: simulation and cross-validation of stochastic differential equations."""

from .brownian import BrownianPath, refine, sample_path, wiener_shift
from .errors import (BlowUpError, CapabilityError, CensoringError, DataError, EnsembleFailure,
                     GridRangeError, SingularOperatorError, SingularParameterError, StokitError,
                     UndefinedQuantileError, UnknownModelError, ValidationError)
from .integrators import euler_maruyama, milstein, run_ensemble
from .models import SdeModel, builtin_models, get_model

__version__ = "0.1.0"
