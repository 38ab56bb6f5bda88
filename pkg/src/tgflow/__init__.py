"""Theory-guided neural-network surrogate for transient 2D groundwater flow.

Subpackages cover the truncated spectral (Karhunen-Loeve) representation of
the log-conductivity field, an implicit finite-difference reference solver,
a derivative-propagating fully-connected network, physics-constrained
training, Monte Carlo uncertainty quantification, and experiment
orchestration with a CLI.
"""

__version__ = "0.1.0"

from . import (random_field, darcy, network, training, uq, config, plotting,
               experiment, cli)

__all__ = [
    "random_field",
    "darcy",
    "network",
    "training",
    "uq",
    "config",
    "plotting",
    "experiment",
    "cli",
    "__version__",
]
