"""CNN harness that marks training data via the markaudit CLI and exports
loss records for set-based membership auditing."""

from .config import ExperimentConfig
from .harness import prepare_dataset, run_experiment

__version__ = "0.1.0"
