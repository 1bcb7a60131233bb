"""Dataset ingestion and generation: IDX files, deterministic batching, and a
synthetic blobs-as-images fixture for desk-scale experiments.
"""
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, ParseError

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


@dataclass
class Dataset:
    images: np.ndarray            # (m, c, h, w) float32 in [0, 1]
    labels: np.ndarray = None     # (m,) int labels, evaluation only
    name: str = "unnamed"
    k: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ConfigurationError("images must be (m, c, h, w)")
        if self.labels is not None and len(self.labels) != len(self.images):
            raise ConfigurationError(
                f"{len(self.labels)} labels for {len(self.images)} images")

    def __len__(self):
        return len(self.images)


def _read_u32s(f, n, path):
    raw = f.read(4 * n)
    if len(raw) != 4 * n:
        raise ParseError(f"{path}: truncated header at offset {f.tell()}")
    return struct.unpack(f">{n}I", raw)


def load_idx(image_path, label_path=None, name=None):
    """Parse big-endian IDX image (and optional label) files; pixels / 255."""
    with open(image_path, "rb") as f:
        magic, n, h, w = _read_u32s(f, 4, image_path)
        if magic != IDX_IMAGE_MAGIC:
            raise ParseError(
                f"{image_path}: bad image magic 0x{magic:08x} at offset 0")
        raw = f.read(n * h * w)
        if len(raw) != n * h * w:
            raise ParseError(
                f"{image_path}: expected {n * h * w} pixels, file truncated "
                f"at offset {16 + len(raw)}")
        pixels = np.frombuffer(raw, dtype=np.uint8)
    images = (pixels.astype(np.float32) / 255.0).reshape(n, 1, h, w)
    labels = None
    k = 0
    if label_path is not None:
        with open(label_path, "rb") as f:
            magic, nl = _read_u32s(f, 2, label_path)
            if magic != IDX_LABEL_MAGIC:
                raise ParseError(
                    f"{label_path}: bad label magic 0x{magic:08x} at offset 0")
            raw = f.read(nl)
            if len(raw) != nl:
                raise ParseError(
                    f"{label_path}: expected {nl} labels, file truncated "
                    f"at offset {8 + len(raw)}")
            labels = np.frombuffer(raw, dtype=np.uint8).astype(np.int64)
        if nl != n:
            raise ParseError(
                f"label file has {nl} entries but image file has {n}")
        k = int(labels.max()) + 1
    return Dataset(images, labels, name or str(image_path), k)


def write_idx(dataset, image_path, label_path=None):
    """Inverse of load_idx: pixels are rounded back to u8."""
    m, c, h, w = dataset.images.shape
    if c != 1:
        raise ConfigurationError("IDX export supports single-channel images only")
    pixels = np.clip(np.rint(dataset.images * 255.0), 0, 255).astype(np.uint8)
    with open(image_path, "wb") as f:
        f.write(struct.pack(">4I", IDX_IMAGE_MAGIC, m, h, w))
        f.write(pixels.tobytes())
    if label_path is not None:
        if dataset.labels is None:
            raise ConfigurationError("dataset has no labels to write")
        with open(label_path, "wb") as f:
            f.write(struct.pack(">2I", IDX_LABEL_MAGIC, m))
            f.write(dataset.labels.astype(np.uint8).tobytes())


@dataclass
class SyntheticSpec:
    """Blobs-as-images: cluster j renders a Gaussian intensity bump at a
    per-cluster position (with per-sample jitter) plus pixel noise."""
    k: int = 4
    side: int = 16
    samples_per_cluster: int = 500
    centers: tuple = None     # (k, 2) row/col positions; default: spread grid
    sigmas: tuple = None      # per-cluster bump widths
    jitter: float = 1.5       # uniform position jitter, pixels
    noise: float = 0.05       # additive uniform pixel noise amplitude
    seed: int = 0

    def resolved_centers(self):
        if self.centers is not None:
            return np.asarray(self.centers, dtype=np.float64)
        # spread the clusters over a grid inside the image
        g = int(np.ceil(np.sqrt(self.k)))
        lo, hi = self.side * 0.28, self.side * 0.72
        pts = np.linspace(lo, hi, g)
        grid = [(r, c) for r in pts for c in pts]
        return np.asarray(grid[:self.k], dtype=np.float64)

    def resolved_sigmas(self):
        if self.sigmas is not None:
            return np.asarray(self.sigmas, dtype=np.float64)
        base = (1.2, 1.8, 2.4, 1.5)
        return np.asarray([base[j % len(base)] for j in range(self.k)])

    def validate(self):
        centers = self.resolved_centers()
        if centers.shape != (self.k, 2):
            raise ConfigurationError(f"need {self.k} blob centers, got {centers.shape}")
        margin = self.jitter
        if np.any(centers - margin < 0) or np.any(centers + margin > self.side - 1):
            raise ConfigurationError("blob (with jitter) does not fit inside the image")
        return self


def render_blob(spec, cluster, jitter_rc):
    """Noise-free image of cluster's bump displaced by jitter_rc (row, col)."""
    centers = spec.resolved_centers()
    sigma = spec.resolved_sigmas()[cluster]
    r0, c0 = centers[cluster] + np.asarray(jitter_rc, dtype=np.float64)
    rr = np.arange(spec.side, dtype=np.float64)[:, None]
    cc = np.arange(spec.side, dtype=np.float64)[None, :]
    img = np.exp(-((rr - r0) ** 2 + (cc - c0) ** 2) / (2.0 * sigma ** 2))
    return img.astype(np.float32)


def make_synthetic(spec):
    """Deterministic blob dataset with ground-truth labels attached."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    m = spec.k * spec.samples_per_cluster
    labels = np.repeat(np.arange(spec.k), spec.samples_per_cluster)
    jitters = rng.uniform(-spec.jitter, spec.jitter, size=(m, 2))
    images = np.empty((m, 1, spec.side, spec.side), dtype=np.float32)
    for i in range(m):
        images[i, 0] = render_blob(spec, labels[i], jitters[i])
    if spec.noise > 0:
        noise = rng.uniform(-spec.noise, spec.noise,
                            size=images.shape).astype(np.float32)
        images = np.clip(images + noise, 0.0, 1.0)
    return Dataset(images, labels, "synthetic", spec.k,
                   meta={"jitters": jitters, "spec": spec})


def batches(m, batch_size, seed, epoch):
    """Deterministic per-epoch permutation, chunked; short final batch kept."""
    if batch_size < 1:
        raise ConfigurationError("batch_size must be >= 1")
    rng = np.random.default_rng([seed, epoch])
    perm = rng.permutation(m)
    return [perm[i:i + batch_size] for i in range(0, m, batch_size)]
