"""Flat key=value run configuration with dotted section names.

Files hold one `section.key = value` per line; `#` starts a comment. CLI
flags override file values. The resolved config is snapshotted into every
run directory so a run can be reproduced bit-exactly.
"""
from dataclasses import dataclass, field, fields

from .errors import ConfigurationError


def parse_config_file(path):
    values = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigurationError(f"{path}:{lineno}: expected key = value")
            key, val = line.split("=", 1)
            values[key.strip()] = val.strip()
    return values


def _coerce(raw, like):
    if isinstance(like, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigurationError(f"expected a boolean, got {raw!r}")
    if isinstance(like, int):
        return int(raw)
    if isinstance(like, float):
        return float(raw)
    return raw


@dataclass
class RunConfig:
    """Everything a run needs; dotted keys map onto `section_key` fields."""
    dataset_source: str = "synthetic"   # synthetic | idx
    dataset_images: str = ""
    dataset_labels: str = ""
    dataset_k: int = 4

    synthetic_k: int = 4
    synthetic_side: int = 16
    synthetic_samples_per_cluster: int = 500
    synthetic_jitter: float = 1.5
    synthetic_noise: float = 0.05
    synthetic_seed: int = 0

    network_preset: str = "blobs16"

    fcae_epochs: int = 50
    fcae_batch_size: int = 256
    fcae_lr: float = 0.002
    fcae_momentum: float = 0.9

    dbc_alpha: float = 2.0
    dbc_v: float = 1.0
    dbc_epochs: int = 50
    dbc_iters_per_epoch: int = 0
    dbc_batch_size: int = 256
    dbc_lr: float = 0.01
    dbc_momentum: float = 0.9
    dbc_normalization: str = "boosted-sum"
    dbc_stop_delta: float = 0.001
    dbc_bn_mode: str = "train"
    dbc_hist_cluster: int = 0
    dbc_hist_bins: int = 50

    kmeans_restarts: int = 20

    run_seed: int = 0
    run_out: str = "runs/run"
    run_deterministic: bool = True

    extras: dict = field(default_factory=dict, repr=False)

    @classmethod
    def _field_map(cls):
        return {f.name.replace("_", ".", 1): f.name for f in fields(cls)
                if f.name != "extras"}

    def apply(self, dotted):
        """Apply {dotted.key: raw string} values, coercing to field types."""
        fmap = self._field_map()
        for key, raw in dotted.items():
            if key not in fmap:
                raise ConfigurationError(f"unknown config key {key!r}")
            name = fmap[key]
            setattr(self, name, _coerce(str(raw), getattr(self, name)))
        return self

    def dump(self):
        fmap = self._field_map()
        lines = [f"{dotted} = {getattr(self, name)}"
                 for dotted, name in sorted(fmap.items())]
        return "\n".join(lines) + "\n"

    @classmethod
    def load(cls, path=None, overrides=None):
        cfg = cls()
        if path:
            cfg.apply(parse_config_file(path))
        if overrides:
            cfg.apply(overrides)
        return cfg
