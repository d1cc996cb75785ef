"""Model checkpoints: a GFD stream with one ``1 x 1 x size`` record per tensor,
plus a ``.cfg`` key=value sidecar holding the model configuration."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from . import config as cfgmod
from .errors import ConfigurationError, DataError
from .fields import GridField, iter_gfd, write_gfd_stream
from .model import ModelConfig, SRViT, parameter_shapes


def sidecar_path(path) -> Path:
    return Path(path).with_suffix(".cfg")


def save_checkpoint(model: SRViT, path) -> None:
    records = [GridField(np.asarray(v).reshape(1, 1, -1), (name,))
               for name, v in model.params.items()]
    write_gfd_stream(records, path)
    cfgmod.save(model.config, sidecar_path(path))


def load_model_config(path) -> ModelConfig:
    side = sidecar_path(path)
    if not side.exists():
        raise DataError(f"missing checkpoint sidecar {side}")
    with open(side) as fh:
        values = cfgmod.parse_pairs(fh)
    model_keys = set(cfgmod.to_pairs(ModelConfig()))
    stray = sorted(set(values) - model_keys)
    if stray:
        raise DataError(f"checkpoint sidecar has non-model keys {stray}")
    return cfgmod.build(values).model


def load_checkpoint(path) -> SRViT:
    """Load parameters as float64. Shape or name mismatches raise :class:`DataError`."""
    cfg = load_model_config(path)
    shapes = parameter_shapes(cfg)
    params = {}
    for gf in iter_gfd(path):
        name = gf.channel_names[0]
        if name not in shapes:
            raise DataError(f"checkpoint tensor {name!r} not expected by its configuration")
        if gf.values.size != int(np.prod(shapes[name])):
            raise DataError(f"checkpoint tensor {name!r} has {gf.values.size} values, "
                            f"expected shape {shapes[name]}")
        params[name] = gf.values.astype(np.float64).reshape(shapes[name])
    try:
        return SRViT(cfg, params)
    except ConfigurationError as exc:
        raise DataError(f"checkpoint does not match its configuration: {exc}") from None
