"""Deep clustering with fully convolutional auto-encoders and boosted
soft k-means."""

from .chain import ChainState, chain_run, chain_step
from .checkpoint import load_checkpoint, save_checkpoint
from .data import Dataset, SyntheticSpec, batches, load_idx, make_synthetic, write_idx
from .dbc import (DbcConfig, boost_target, grad_centers, grad_features,
                  hard_assign, kl_loss, soft_assign, train_dbc)
from .errors import ConfigurationError, ParseError, TrainingError
from .estimators import BoostedClustering, ConvAutoEncoder, as_image_array
from .metrics import acc, kmeans, nmi, score_histogram
from .network import (PRESETS, FcaeModel, LayerDesc, NetworkSpec,
                      build_network, reconstruction_loss, train_fcae)

__version__ = "0.1.0"

__all__ = [
    "BoostedClustering", "ChainState", "ConfigurationError", "ConvAutoEncoder",
    "Dataset", "DbcConfig", "FcaeModel", "LayerDesc", "NetworkSpec",
    "PRESETS", "ParseError", "SyntheticSpec", "TrainingError", "acc",
    "as_image_array", "batches", "boost_target", "build_network", "chain_run",
    "chain_step", "grad_centers", "grad_features", "hard_assign", "kl_loss",
    "kmeans", "load_checkpoint", "load_idx", "make_synthetic", "nmi",
    "reconstruction_loss", "save_checkpoint", "score_histogram",
    "soft_assign", "train_dbc", "train_fcae", "write_idx",
]
