"""Exit-aware distillation of layered text encoders, at desk scale.

A small numpy autograd engine, a transformer encoder exposing per-layer pooled
vectors, the distillation objective with its exit-shaping terms, convergence
based early exit, and the analyses used to tell exit-compatible students from
incompatible ones.
"""

from .encoder import EncoderConfig, EncoderModel, LayerTrace, forward_trace, load_weights, save_weights
from .errors import (ConfigError, ContractError, CorruptCheckpointError, DegenerateInputError,
                     DivergenceError, LeapError, SchemaVersionError, ShapeError)
from .exits import ExitPolicy, ExitResult, infer_batch, infer_pabee, infer_single
from .losses import ALL_TERMS, BASELINE_TERMS, LeapLossWeights, LossBreakdown, total_loss
from .tensor import Tensor, no_grad

__version__ = "0.1.0"
