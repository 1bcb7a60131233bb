"""scikit-learn style estimators wrapping the functional core.

ConvAutoEncoder is a transformer (images -> feature matrix); BoostedClustering
is a clusterer running the full two-stage pipeline (auto-encoder pre-training,
k-means center initialization, boosted joint training).
"""
import numpy as np
from sklearn.base import BaseEstimator, ClusterMixin, TransformerMixin

from .data import Dataset
from .dbc import DbcConfig, hard_assign, soft_assign, train_dbc
from .errors import ConfigurationError
from .metrics import kmeans
from .network import PRESETS, NetworkSpec, build_network, train_fcae


def as_image_array(X, input_shape=None):
    """Validate/coerce X to a float32 (m, c, h, w) array in [0, 1].

    2-D input is reshaped to input_shape when given; values outside [0, 1]
    are rejected rather than silently rescaled.
    """
    X = np.asarray(X, dtype=np.float32)
    if X.ndim == 2:
        if input_shape is None:
            raise ConfigurationError(
                "2-D input needs an input_shape to reshape into images")
        X = X.reshape((X.shape[0],) + tuple(input_shape))
    if X.ndim != 4:
        raise ConfigurationError(f"expected (m, c, h, w) images, got ndim={X.ndim}")
    if X.size and (X.min() < 0 or X.max() > 1):
        raise ConfigurationError("pixel values must lie in [0, 1]")
    return X


def _resolve_spec(preset):
    if isinstance(preset, NetworkSpec):
        return preset
    if preset not in PRESETS:
        raise ConfigurationError(
            f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    return PRESETS[preset]


class ConvAutoEncoder(BaseEstimator, TransformerMixin):
    """Fully convolutional auto-encoder as a feature transformer."""

    def __init__(self, preset="mnist", epochs=50, batch_size=256, lr=0.002,
                 momentum=0.9, seed=0):
        self.preset = preset
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.momentum = momentum
        self.seed = seed

    def fit(self, X, y=None):
        spec = _resolve_spec(self.preset)
        X = as_image_array(X, spec.input_shape)
        self.model_ = build_network(spec, seed=self.seed)
        self.report_ = train_fcae(
            self.model_, Dataset(X), self.epochs, self.batch_size,
            self.lr, self.momentum, self.seed)
        return self

    def transform(self, X):
        X = as_image_array(X, self.model_.spec.input_shape)
        return self.model_.encode(X, mode="eval")

    def reconstruct(self, X):
        X = as_image_array(X, self.model_.spec.input_shape)
        return self.model_.forward(X, mode="eval")


class BoostedClustering(BaseEstimator, ClusterMixin):
    """Two-stage deep clustering: reconstruction pre-training, k-means center
    initialization, then joint boosted training of encoder and centers."""

    def __init__(self, preset="mnist", k=10, alpha=2.0, v=1.0,
                 fcae_epochs=50, dbc_epochs=50, batch_size=256, fcae_lr=0.002,
                 dbc_lr=0.01, momentum=0.9, normalization="boosted-sum",
                 stop_delta=0.001, kmeans_restarts=20, seed=0):
        self.preset = preset
        self.k = k
        self.alpha = alpha
        self.v = v
        self.fcae_epochs = fcae_epochs
        self.dbc_epochs = dbc_epochs
        self.batch_size = batch_size
        self.fcae_lr = fcae_lr
        self.dbc_lr = dbc_lr
        self.momentum = momentum
        self.normalization = normalization
        self.stop_delta = stop_delta
        self.kmeans_restarts = kmeans_restarts
        self.seed = seed

    def fit(self, X, y=None):
        spec = _resolve_spec(self.preset)
        X = as_image_array(X, spec.input_shape)
        ds = Dataset(X, np.asarray(y) if y is not None else None, k=self.k)
        self.encoder_ = build_network(spec, seed=self.seed)
        self.fcae_report_ = train_fcae(
            self.encoder_, ds, self.fcae_epochs, self.batch_size,
            self.fcae_lr, self.momentum, self.seed)
        z = self.encoder_.encode(X, mode="eval")
        centers, _, _ = kmeans(z, self.k, restarts=self.kmeans_restarts,
                               seed=self.seed)
        config = DbcConfig(
            k=self.k, alpha=self.alpha, v=self.v, epochs=self.dbc_epochs,
            batch_size=self.batch_size, lr=self.dbc_lr, momentum=self.momentum,
            normalization=self.normalization, stop_delta=self.stop_delta)
        self.cluster_centers_, self.report_ = train_dbc(
            self.encoder_, ds, config, centers, seed=self.seed)
        self.labels_ = self.predict(X)
        return self

    def predict(self, X):
        X = as_image_array(X, self.encoder_.spec.input_shape)
        z = self.encoder_.encode(X, mode="eval")
        return hard_assign(soft_assign(z, self.cluster_centers_, self.v))

    def score_matrix(self, X):
        X = as_image_array(X, self.encoder_.spec.input_shape)
        z = self.encoder_.encode(X, mode="eval")
        return soft_assign(z, self.cluster_centers_, self.v)
