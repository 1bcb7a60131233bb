"""Boosted soft k-means head and the joint encoder/center trainer.

Soft scores use a Student-t kernel over feature/center distances; the target
distribution raises scores to a power alpha > 1 (optionally balanced per
cluster) and training minimizes KL(target || scores) with analytic gradients
for both features and centers.
"""
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, TrainingError
from .layers import SgdMomentum

NORMALIZATION_MODES = ("constant", "score-sum", "boosted-sum")


def _sq_dists(z, centers):
    # ||z_i - mu_j||^2 via expansion; clip tiny negatives from cancellation
    d2 = (np.sum(z * z, axis=1)[:, None] + np.sum(centers * centers, axis=1)[None, :]
          - 2.0 * z @ centers.T)
    return np.maximum(d2, 0.0)


def soft_assign(z, centers, v=1.0):
    """Row-stochastic Student-t similarities between features and centers."""
    z = np.asarray(z, dtype=np.float64)
    centers = np.asarray(centers, dtype=np.float64)
    if centers.ndim != 2 or centers.shape[0] == 0:
        raise ConfigurationError("need at least one cluster center")
    if z.shape[1] != centers.shape[1]:
        raise ConfigurationError(
            f"feature dim {z.shape[1]} != center dim {centers.shape[1]}")
    if v <= 0:
        raise ConfigurationError("degrees of freedom v must be positive")
    q = (1.0 + _sq_dists(z, centers) / v) ** (-(v + 1.0) / 2.0)
    return q / q.sum(axis=1, keepdims=True)


def boost_target(s, alpha, mode="boosted-sum"):
    """Target distribution: per-row renormalized s^alpha / n_j.

    n_j = 1 ("constant"), sum_i s_ij ("score-sum"), or sum_i s_ij^alpha
    ("boosted-sum", the default).
    """
    s = np.asarray(s, dtype=np.float64)
    if s.size == 0:
        raise ConfigurationError("empty score matrix")
    if alpha <= 1:
        raise ConfigurationError("boosting factor alpha must be > 1")
    if mode not in NORMALIZATION_MODES:
        raise ConfigurationError(
            f"unknown normalization mode {mode!r}; choose from {NORMALIZATION_MODES}")
    boosted = s ** alpha
    if mode == "constant":
        weighted = boosted
    elif mode == "score-sum":
        weighted = boosted / s.sum(axis=0, keepdims=True)
    else:
        weighted = boosted / boosted.sum(axis=0, keepdims=True)
    return weighted / weighted.sum(axis=1, keepdims=True)


def kl_loss(r, s):
    """KL(R || S) = sum_ij r_ij log(r_ij / s_ij); zero target entries contribute 0."""
    r = np.asarray(r, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    if r.shape != s.shape:
        raise ConfigurationError(f"shape mismatch {r.shape} vs {s.shape}")
    if np.any(s <= 0):
        raise ConfigurationError("scores must be strictly positive")
    mask = r > 0
    return float(np.sum(r[mask] * np.log(r[mask] / s[mask])))


def _kernel_weights(z, centers, v):
    return 1.0 + _sq_dists(z, centers) / v


def grad_features(z, centers, s, r, v=1.0):
    """d KL / d z_i (target held constant): rows of the m x d gradient."""
    z = np.asarray(z, dtype=np.float64)
    centers = np.asarray(centers, dtype=np.float64)
    coef = ((v + 1.0) / v) * (r - s) / _kernel_weights(z, centers, v)  # m x k
    return coef.sum(axis=1, keepdims=True) * z - coef @ centers


def grad_centers(z, centers, s, r, v=1.0):
    """d KL / d mu_j: rows of the k x d gradient."""
    z = np.asarray(z, dtype=np.float64)
    centers = np.asarray(centers, dtype=np.float64)
    coef = ((v + 1.0) / v) * (r - s) / _kernel_weights(z, centers, v)  # m x k
    return coef.sum(axis=0)[:, None] * centers - coef.T @ z


def hard_assign(s):
    """Argmax cluster per row; ties break to the lowest index."""
    return np.argmax(np.asarray(s), axis=1)


@dataclass
class DbcConfig:
    k: int = 10
    alpha: float = 2.0
    v: float = 1.0
    epochs: int = 50              # T
    iters_per_epoch: int = 0      # B; 0 means ceil(m / batch_size)
    batch_size: int = 256         # m_b
    lr: float = 0.01
    momentum: float = 0.9
    normalization: str = "boosted-sum"
    stop_delta: float = 0.001     # fraction of changed hard labels
    bn_mode: str = "train"        # encoder batch-norm mode during updates
    hist_cluster: int = 0
    hist_bins: int = 50

    def validate(self):
        if self.alpha <= 1:
            raise ConfigurationError("alpha must be > 1")
        if self.v <= 0:
            raise ConfigurationError("v must be > 0")
        if not 0 <= self.stop_delta < 1:
            raise ConfigurationError("stop_delta must lie in [0, 1)")
        if self.k < 1:
            raise ConfigurationError("k must be >= 1")
        if self.normalization not in NORMALIZATION_MODES:
            raise ConfigurationError(f"unknown normalization {self.normalization!r}")
        return self


@dataclass
class DbcReport:
    epochs: list = field(default_factory=list)  # per-epoch dicts
    wall_clock: float = 0.0
    stopped_early: bool = False


def train_dbc(model, dataset, config, centers, seed=0, callback=None):
    """Stage-II joint training of the encoder and cluster centers.

    Each epoch recomputes the full-dataset scores with the eval-mode encoder,
    refreshes the target distribution once, then runs B mini-batch updates
    that backpropagate the feature gradient through the encoder and apply the
    center gradient directly. Stops when the fraction of changed hard labels
    drops to config.stop_delta or below.
    """
    from .data import batches
    from .metrics import acc, nmi, score_histogram

    config.validate()
    centers = np.array(centers, dtype=np.float64)
    if centers.shape != (config.k, model.spec.feature_dim):
        raise ConfigurationError(
            f"centers shape {centers.shape} != ({config.k}, {model.spec.feature_dim})")
    x = dataset.images
    m = x.shape[0]
    b_iters = config.iters_per_epoch or -(-m // config.batch_size)
    opt = SgdMomentum(lr=config.lr, momentum=config.momentum)
    center_vel = np.zeros_like(centers)
    report = DbcReport()
    prev_labels = None
    t0 = time.perf_counter()
    for epoch in range(1, config.epochs + 1):
        z_all = model.encode(x, mode="eval").astype(np.float64)
        s_all = soft_assign(z_all, centers, config.v)
        r_all = boost_target(s_all, config.alpha, config.normalization)
        labels = hard_assign(s_all)
        changed = 1.0 if prev_labels is None else float(
            np.mean(labels != prev_labels))
        loss = kl_loss(r_all, s_all)
        entry = {
            "epoch": epoch,
            "kl_loss": loss,
            "changed_fraction": changed,
            "acc": float("nan"),
            "nmi": float("nan"),
            "histogram": score_histogram(s_all, config.hist_cluster,
                                         config.hist_bins),
        }
        if dataset.labels is not None:
            entry["acc"] = acc(labels, dataset.labels)
            entry["nmi"] = nmi(labels, dataset.labels)
        report.epochs.append(entry)
        if callback is not None:
            callback(entry)
        if prev_labels is not None and changed <= config.stop_delta:
            report.stopped_early = True
            break
        prev_labels = labels

        order = batches(m, config.batch_size, seed, epoch)
        for b, idx in enumerate(order):
            if b >= b_iters:
                break
            if idx.size < 2 and config.bn_mode == "train":
                continue
            zb = model.encode_forward(x[idx], mode=config.bn_mode)
            z = zb.reshape(zb.shape[0], -1).astype(np.float64)
            s = soft_assign(z, centers, config.v)
            r = r_all[idx]
            gz = grad_features(z, centers, s, r, config.v) / idx.size
            gmu = grad_centers(z, centers, s, r, config.v) / idx.size
            if not (np.all(np.isfinite(gz)) and np.all(np.isfinite(gmu))):
                raise TrainingError("non-finite KL gradient; lr may be too high")
            model.encoder_backward(
                gz.astype(model.dtype).reshape(zb.shape))
            opt.step(model.named_params("encoder"), model.named_grads("encoder"))
            center_vel *= config.momentum
            center_vel -= config.lr * gmu
            centers += center_vel
    report.wall_clock = time.perf_counter() - t0
    return centers, report
