"""Distributional flow matching on small synthetic conditional datasets.

The velocity network predicts a Gaussian over velocities; sampling can draw
from it at a chosen temperature, and test-time search picks among the
resulting trajectories.
"""

from .datagen import DatasetSpec, NoteSample, bimodal_spec, default_spec, make_dataset
from .errors import (
    ConfigError,
    DFMError,
    InputDomainError,
    NumericDomainError,
    TrajectoryDivergence,
    UndefinedScoreError,
)
from .kernels import BACKEND
from .net import ConditionSet, NetConfig, NetParams, VelocityDistribution, backward, forward
from .rng import Stream
from .sampler import SamplerConfig, Trajectory, generate, integrate, temperature
from .search import SearchConfig, best_of_n, generate_instrument, guided_integrate
from .train import TrainConfig, nll_loss, train

__version__ = "0.1.0"
