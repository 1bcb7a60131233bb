"""Symmetric fully convolutional auto-encoder: spec validation, presets,
model construction, end-to-end reconstruction training, feature extraction.
"""
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, TrainingError
from .layers import (BatchNorm, Conv2D, Deconv2D, MaxPool2x2, ReLU, SgdMomentum,
                     Unpool2x2)


@dataclass(frozen=True)
class LayerDesc:
    kind: str  # "conv" | "pool"
    ksize: int = 0
    filters: int = 0
    pad: int = 0


@dataclass(frozen=True)
class NetworkSpec:
    """Encoder layer list; the decoder is always the exact mirror.

    The last encoder entry is the feature-producing convolution and must
    reduce the spatial size to 1x1. An explicit decoder may be passed only
    for validation purposes and must be the exact mirror.
    """
    input_shape: tuple  # (channels, height, width)
    encoder: tuple  # of LayerDesc
    decoder: tuple = None

    def __post_init__(self):
        object.__setattr__(self, "encoder", tuple(self.encoder))
        if self.decoder is not None:
            object.__setattr__(self, "decoder", tuple(self.decoder))
        self.validate()

    def validate(self):
        if not self.encoder or self.encoder[-1].kind != "conv":
            raise ConfigurationError("last encoder layer must be the feature convolution")
        c, h, w = self.input_shape
        shapes = [(c, h, w)]
        for d in self.encoder:
            if d.kind == "conv":
                h = h - d.ksize + 2 * d.pad + 1
                w = w - d.ksize + 2 * d.pad + 1
                c = d.filters
                if h < 1 or w < 1:
                    raise ConfigurationError(f"conv {d.ksize}x{d.ksize} underflows to {h}x{w}")
            elif d.kind == "pool":
                if h % 2 or w % 2:
                    raise ConfigurationError(
                        f"pooling on odd spatial size {h}x{w} is rejected")
                h, w = h // 2, w // 2
            else:
                raise ConfigurationError(f"unknown layer kind {d.kind!r}")
            shapes.append((c, h, w))
        if (h, w) != (1, 1):
            raise ConfigurationError(f"feature layer must be 1x1, got {h}x{w}")
        n_dec = len(self.decoder) if self.decoder is not None else len(self.encoder)
        total_maps = len(self.encoder) + n_dec + 1
        if total_maps % 2 == 0:
            raise ConfigurationError(
                f"total layer count {total_maps} is even; the feature layer "
                "must sit at the center of a symmetric stack")
        object.__setattr__(self, "shapes", tuple(shapes))

    @property
    def feature_dim(self):
        return self.encoder[-1].filters


PRESETS = {
    "mnist": NetworkSpec((1, 28, 28), (
        LayerDesc("conv", 5, 6), LayerDesc("pool"),
        LayerDesc("conv", 5, 16), LayerDesc("pool"),
        LayerDesc("conv", 4, 120))),
    "usps": NetworkSpec((1, 16, 16), (
        LayerDesc("conv", 3, 20, pad=1), LayerDesc("pool"),
        LayerDesc("conv", 3, 20, pad=1), LayerDesc("pool"),
        LayerDesc("conv", 4, 160))),
    "coil": NetworkSpec((1, 128, 128), (
        LayerDesc("conv", 9, 20), LayerDesc("pool"),
        LayerDesc("conv", 5, 20), LayerDesc("pool"),
        LayerDesc("conv", 5, 20), LayerDesc("pool"),
        LayerDesc("conv", 5, 40), LayerDesc("pool"),
        LayerDesc("conv", 4, 320))),
    # small net for the 16x16 synthetic blob fixture
    "blobs16": NetworkSpec((1, 16, 16), (
        LayerDesc("conv", 3, 8, pad=1), LayerDesc("pool"),
        LayerDesc("conv", 3, 16, pad=1), LayerDesc("pool"),
        LayerDesc("conv", 4, 32))),
}


def coil_spec(channels):
    base = PRESETS["coil"]
    return NetworkSpec((channels, 128, 128), base.encoder)


class FcaeModel:
    """Encoder + mirrored decoder built from a NetworkSpec.

    Every conv/deconv is followed by batch norm and ReLU except the final
    decoder output layer, which is linear.
    """

    def __init__(self, spec, seed=0, dtype=np.float32):
        self.spec = spec
        self.dtype = dtype
        rng = np.random.default_rng(seed)
        self.encoder = []  # (name, layer)
        self.decoder = []
        in_c = spec.input_shape[0]
        conv_channels = []  # input channel count of each encoder conv
        i_conv = i_pool = 0
        for d in spec.encoder:
            if d.kind == "conv":
                i_conv += 1
                conv_channels.append(in_c)
                self.encoder.append((f"conv{i_conv}", Conv2D(
                    in_c, d.filters, d.ksize, d.pad, rng, dtype)))
                self.encoder.append((f"bn{i_conv}", BatchNorm(d.filters, dtype=dtype)))
                self.encoder.append((f"relu{i_conv}", ReLU()))
                in_c = d.filters
            else:
                i_pool += 1
                self.encoder.append((f"pool{i_pool}", MaxPool2x2()))
        # mirror
        n_convs = i_conv
        j_conv = j_pool = 0
        descs = list(spec.encoder)
        for idx in range(len(descs) - 1, -1, -1):
            d = descs[idx]
            if d.kind == "conv":
                j_conv += 1
                out_c = conv_channels.pop()
                last = (idx == 0)
                self.decoder.append((f"deconv{n_convs - j_conv + 1}", Deconv2D(
                    d.filters, out_c, d.ksize, d.pad, rng, dtype)))
                if not last:
                    self.decoder.append((f"d_bn{n_convs - j_conv + 1}",
                                         BatchNorm(out_c, dtype=dtype)))
                    self.decoder.append((f"d_relu{n_convs - j_conv + 1}", ReLU()))
            else:
                j_pool += 1
                self.decoder.append((f"unpool{i_pool - j_pool + 1}", Unpool2x2()))
        self._pool_states = None

    # ---- forward / backward -------------------------------------------

    def encode_forward(self, x, mode="train"):
        if x.shape[1:] != self.spec.input_shape:
            raise ConfigurationError(
                f"input shape {x.shape[1:]} does not match spec {self.spec.input_shape}")
        pool_states = []
        out = x.astype(self.dtype, copy=False)
        for _, layer in self.encoder:
            out = layer.forward(out, mode=mode)
            if isinstance(layer, MaxPool2x2):
                pool_states.append((layer.switches, layer.input_shape))
        self._pool_states = pool_states
        return out

    def decode_forward(self, z, mode="train"):
        states = list(self._pool_states)
        out = z
        for _, layer in self.decoder:
            if isinstance(layer, Unpool2x2):
                switches, shape = states.pop()
                out = layer.forward(out, switches=switches, input_shape=shape,
                                    mode=mode)
            else:
                out = layer.forward(out, mode=mode)
        return out

    def forward(self, x, mode="train"):
        return self.decode_forward(self.encode_forward(x, mode), mode)

    def backward(self, dxhat):
        dout = dxhat
        for _, layer in reversed(self.decoder):
            dout = layer.backward(dout)
        return self.encoder_backward(dout)

    def encoder_backward(self, dz):
        dout = dz
        for _, layer in reversed(self.encoder):
            dout = layer.backward(dout)
        return dout

    def encode(self, x, mode="eval", batch_size=512):
        """Feature matrix (m, d): flattened 1x1xd encoder outputs."""
        rows = []
        for i in range(0, x.shape[0], batch_size):
            z = self.encode_forward(x[i:i + batch_size], mode=mode)
            rows.append(z.reshape(z.shape[0], -1))
        return np.concatenate(rows, axis=0)

    # ---- parameters ----------------------------------------------------

    def _layers(self, part=None):
        if part == "encoder":
            groups = [("enc", self.encoder)]
        elif part == "decoder":
            groups = [("dec", self.decoder)]
        else:
            groups = [("enc", self.encoder), ("dec", self.decoder)]
        for prefix, layers in groups:
            for name, layer in layers:
                yield f"{prefix}.{name}", layer

    def named_params(self, part=None):
        out = []
        for lname, layer in self._layers(part):
            for pname, arr in layer.params.items():
                out.append((f"{lname}.{pname}", arr))
        return out

    def named_grads(self, part=None):
        out = []
        for lname, layer in self._layers(part):
            for pname, arr in layer.grads.items():
                out.append((f"{lname}.{pname}", arr))
        return out

    def astype(self, dtype):
        self.dtype = dtype
        for _, layer in self._layers():
            layer.astype(dtype)
        return self


def build_network(preset, seed=0, dtype=np.float32):
    """Build an FCAE from a preset name or an explicit NetworkSpec."""
    if isinstance(preset, NetworkSpec):
        return FcaeModel(preset, seed=seed, dtype=dtype)
    if preset not in PRESETS:
        raise ConfigurationError(
            f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    return FcaeModel(PRESETS[preset], seed=seed, dtype=dtype)


def reconstruction_loss(model, batch, mode="train"):
    """Sum over the batch of squared pixel distance ||x - decode(encode(x))||^2."""
    if batch.shape[0] == 0:
        raise ConfigurationError("empty batch")
    xhat = model.forward(batch, mode=mode)
    diff = xhat.astype(np.float64) - batch.astype(np.float64)
    return float(np.sum(diff * diff))


@dataclass
class TrainReport:
    epoch_losses: list = field(default_factory=list)
    wall_clock: float = 0.0
    seed: int = 0


def train_fcae(model, dataset, epochs, batch_size=256, lr=0.002, momentum=0.9,
               seed=0, callback=None):
    """Stage-I training: mini-batch SGD on the Euclidean reconstruction loss."""
    from .data import batches

    if batch_size < 2:
        raise ConfigurationError("batch_size must be >= 2 (batch norm needs statistics)")
    opt = SgdMomentum(lr=lr, momentum=momentum)
    report = TrainReport(seed=seed)
    t0 = time.perf_counter()
    x = dataset.images
    for epoch in range(epochs):
        total = 0.0
        count = 0
        for idx in batches(x.shape[0], batch_size, seed, epoch):
            if idx.size < 2:
                continue  # single sample cannot feed batch norm
            xb = x[idx]
            xhat = model.forward(xb, mode="train")
            diff = xhat - xb
            loss = float(np.sum(diff.astype(np.float64) ** 2))
            if not np.isfinite(loss):
                raise TrainingError(
                    "non-finite reconstruction loss; the learning rate may be too high")
            total += loss
            count += idx.size
            model.backward((2.0 / idx.size) * diff)
            opt.step(model.named_params(), model.named_grads())
        mean_loss = total / max(count, 1)
        report.epoch_losses.append(mean_loss)
        if callback is not None:
            callback(epoch, mean_loss)
    report.wall_clock = time.perf_counter() - t0
    return report
