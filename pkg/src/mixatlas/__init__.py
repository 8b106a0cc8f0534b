"""Bayesian mixtures of deformable templates fitted by stochastic-approximation EM."""
__version__ = "0.1.0"

from .errors import (
    ChainDiverged, ConfigError, DegenerateWeights, DimensionMismatch, EmptyDataset,
    InversionFailure, MissingFile, MixAtlasError, NonPositiveVariance, ParseError,
    SingularCovariance,
)
from .kernels import Box, Geometry, KernelConfig, LandmarkGrid, PixelGrid
from .params import (
    ComponentParams, HiddenState, Hyperparams, ModelParams, SufficientStats, m_step,
    sufficient_stats,
)
from .rng import CounterRNG
from .sampler import sample_hidden
from .saem import SaemConfig, SaemEngine, train
from .data import Dataset, generate_synthetic, load_dataset, save_dataset
from .checkpoint import load_checkpoint, save_checkpoint
