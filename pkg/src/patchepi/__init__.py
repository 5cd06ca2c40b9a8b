"""Multi-patch epidemic models with general stage durations and migration.

Modules:

- ``model``, ``laws``: parameters, duration laws, initial conditions.
- ``migration``: transition matrices and the landing kernels they induce.
- ``simulator``: exact event-driven stochastic simulation.
- ``fluid``: the deterministic large-population limit.
- ``fclt``: the Gaussian fluctuation limit around it.
- ``config``, ``verify``, ``cli``: experiment files, campaigns and the ``epi`` command.
"""
from __future__ import annotations

from .errors import EpiError, InputError, NumericalError, ValidationError
from .laws import DurationLaw, JointDurationLaw, equilibrium_law
from .model import InitialCondition, Laws, ModelSpec, PopulationState, validate_spec
from .migration import TransitionKernelTable, build_kernel_table, transition_matrix
from .simulator import run_replicates, simulate
from .fluid import solve_fluid, solve_fluid_delay
from .fclt import (DriverCovariancePanel, driver_covariance, linearization, sample_drivers,
                   solve_fluctuations)

__version__ = "0.1.0"
