"""Key = value configuration files shared by the model and the command line.

Blank lines and ``#`` comments are ignored. Keys are flat; neuron options use
a ``neuron.`` prefix and list values are comma separated::

    variant = tiny
    channels = 8, 16, 32, 64
    placement = LSTM, LSTM, LSTM, STFE
    neuron.kind = LIF
    neuron.surrogate = ATan
    t_bins = 4
    preset = synthetic
    epochs = 20
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

from .backbone import HsVTConfig
from .detect import HeadConfig
from .events import DELTA_T_PRESETS_MS
from .neurons import NeuronConfig
from .train import TrainConfig

DATA_ROOT_ENV = "HSVT_DATA_ROOT"


class ConfigError(ValueError):
    pass


MODEL_KEYS = {
    "variant": str, "channels": "ints", "placement": "strs", "window_size": int,
    "grid_size": int, "t_bins": int, "head_dim": int, "mlp_ratio": int,
    "mlp_spiking_layers": int, "stem_timesteps": int, "fusion": str, "dtype": str, "seed": int,
}
NEURON_KEYS = {"kind": str, "v_threshold": float, "v_reset": float, "tau": float,
               "surrogate": str, "alpha": float}
HEAD_KEYS = {"num_classes": int, "score_threshold": float, "nms_iou": float, "box_weight": float}
TRAIN_KEYS = {"epochs": int, "batch_size": int, "seq_len": int, "lr_max": float,
              "grad_clip": float, "recurrent": "bool"}
RUN_KEYS = {"preset": str, "delta_t_ms": float, "train_clips": int, "val_clips": int,
            "num_windows": int, "height": int, "width": int, "data_dir": str, "val_dir": str}


def default_data_root():
    return Path(os.environ.get(DATA_ROOT_ENV, "data"))


@dataclass
class RunConfig:
    model: HsVTConfig = field(default_factory=HsVTConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    preset: str = "synthetic"
    delta_t_ms: float = None
    train_clips: int = 128
    val_clips: int = 16
    num_windows: int = 10
    height: int = 64
    width: int = 64
    data_dir: str = None
    val_dir: str = None

    def __post_init__(self):
        if self.preset not in DELTA_T_PRESETS_MS:
            raise ConfigError(f"unknown preset {self.preset!r} (choose from {sorted(DELTA_T_PRESETS_MS)})")
        if self.delta_t_ms is None:
            self.delta_t_ms = DELTA_T_PRESETS_MS[self.preset]
        if not self.delta_t_ms > 0:
            raise ConfigError("delta_t_ms must be positive")


def synthetic_model_config(**overrides):
    """Tiny-scaled backbone sized for the 64x64 moving-square data."""
    base = dict(variant="tiny", channels=(8, 16, 32, 64), t_bins=4, window_size=4, grid_size=4,
                head_dim=8)
    base.update(overrides)
    return HsVTConfig(**base)


def _convert(key, raw, kind):
    try:
        if kind == "ints":
            return tuple(int(v) for v in raw.split(","))
        if kind == "strs":
            return tuple(v.strip() for v in raw.split(","))
        if kind == "bool":
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return kind(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def parse_text(text, source="<config>"):
    """Parse key = value lines into a flat dict of strings."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        k, v = (s.strip() for s in line.split("=", 1))
        if not k:
            raise ConfigError(f"{source}:{lineno}: empty key")
        out[k] = v
    return out


def build_run_config(values, synthetic_defaults=None):
    """Typed :class:`RunConfig` from a flat string dict (unknown keys are errors)."""
    model, neuron, head, train, run = {}, {}, {}, {}, {}
    for k, raw in values.items():
        if k.startswith("neuron."):
            name = k[len("neuron."):]
            if name not in NEURON_KEYS:
                raise ConfigError(f"unknown key {k!r}")
            neuron[name] = _convert(k, raw, NEURON_KEYS[name])
        elif k in MODEL_KEYS:
            model[k] = _convert(k, raw, MODEL_KEYS[k])
        elif k in HEAD_KEYS:
            head[k] = _convert(k, raw, HEAD_KEYS[k])
        elif k in TRAIN_KEYS:
            train[k] = _convert(k, raw, TRAIN_KEYS[k])
        elif k in RUN_KEYS:
            run[k] = _convert(k, raw, RUN_KEYS[k])
        else:
            raise ConfigError(f"unknown key {k!r}")
    if "seed" in model:
        train["seed"] = model["seed"]
    preset = run.get("preset", "synthetic")
    if synthetic_defaults is None:
        synthetic_defaults = preset == "synthetic"
    try:
        if neuron:
            model["neuron"] = NeuronConfig(**neuron)
        mcfg = synthetic_model_config(**model) if synthetic_defaults else HsVTConfig(**model)
        return RunConfig(model=mcfg, head=HeadConfig(**head), train=TrainConfig(**train), **run)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None


def load_config(path):
    path = Path(path)
    return build_run_config(parse_text(path.read_text(), str(path)))


def dump_config(cfg):
    """Serialise a :class:`RunConfig` back to key = value text (round-trips)."""
    m, lines = cfg.model, []

    def put(k, v):
        if isinstance(v, tuple):
            v = ", ".join(str(x) for x in v)
        lines.append(f"{k} = {v}")

    for k in MODEL_KEYS:
        put(k, getattr(m, k))
    for k in NEURON_KEYS:
        put(f"neuron.{k}", getattr(m.neuron, k))
    for k in HEAD_KEYS:
        put(k, getattr(cfg.head, k))
    for k in TRAIN_KEYS:
        put(k, getattr(cfg.train, k))
    for k in RUN_KEYS:
        v = getattr(cfg, k)
        if v is not None:
            put(k, v)
    return "\n".join(lines) + "\n"


def replace(cfg, **changes):
    return dataclasses.replace(cfg, **changes)
