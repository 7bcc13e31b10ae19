"""Displacement and strain estimation from ultrasound RF frame pairs.

The objective combines a photometric data term, strain smoothness and an
effective Poisson's ratio (EPR) constraint; :func:`solve` minimizes it
directly over a dense displacement field.
"""

__version__ = "0.1.0"

from .elasticity import (
    DisplacementField,
    EprField,
    EprRange,
    MaterialParams,
    StrainField,
    epr,
    epr_mask,
    strain_from_displacement,
)
from .losses import LossBreakdown, LossWeights, loss_gradient, total_loss
from .metrics import WindowSpec, cnr, rmse_field, sr
from .phantom import PhantomSpec, inclusion_phantom, make_pair
from .signal_proc import RfFrame, build_channels
from .solver import DivergenceError, SolveReport, SolverConfig, solve
