"""Flat key=value configuration with dotted namespaces.

A config file is plain text, one `key=value` per line, `#` comments allowed.
Command-line overrides (`--set key=value`) win over the file, which wins over
the defaults below. Unknown keys are errors in both places.
"""

from __future__ import annotations

import math
from typing import Any

from .errors import ConfigError

# key -> default. The default's type drives value coercion.
DEFAULTS: dict[str, Any] = {
    # model geometry (desk scale)
    "model.d": 64,
    "model.N": 4,
    "model.heads": 4,
    "model.ffn": 256,
    "model.B_ada": 16,
    # out_channels:kernel:stride per conv layer; stride product must map
    # 16 kHz samples to 20 ms frames (product 320)
    "model.conv_stack": "32:16:8,64:16:8,64:5:5",
    "model.C": 32,
    "model.lstm_hidden": 64,
    "model.lstm_layers": 2,
    "model.max_positions": 4096,
    # stage schedule
    "stage.peak_lr": 1e-3,
    "stage.warmup_steps": 40,
    "stage.max_steps": 300,
    "stage.decay": "polynomial",  # polynomial | constant
    "stage.decay_power": 1.0,
    "stage.max_frames_per_batch": 2000,
    "stage.epochs": 20,
    "stage.stop_threshold": 1e-3,
    "stage.finetune_lr": 2e-3,
    "stage.batch_size": 16,
    "stage.eval_every": 50,
    "stage.seed": 0,
    "stage.val_fraction": 0.1,
    "stage.warm_start_frac": 0.25,
    "stage.adam_beta1": 0.9,
    "stage.adam_beta2": 0.98,
    "stage.adam_eps": 1e-6,
    # masking
    "mask.start_prob": 0.065,
    "mask.span": 10,
    # acoustic unit discovery
    "units.source": "layer",  # layer | frontend
    "units.layer": -1,  # -1 -> N // 2
    "units.max_iters": 50,
    # decoding
    "decode.mode": "greedy",  # greedy | beam
    "decode.beam": 8,
    "decode.lm_weight": 0.3,
    "decode.length_bonus": 0.5,
    "decode.lm_order": 4,
    "decode.lm_k": 0.1,
}

# Full-scale reference geometry used for parameter accounting only; never
# instantiated as tensors.
REFERENCE_PRESETS: dict[str, dict[str, Any]] = {
    "hubert-large": {
        "model.d": 1024,
        "model.N": 24,
        "model.heads": 16,
        "model.ffn": 4096,
        "model.B_ada": 1024,
        "model.conv_stack": "768:10:5,768:3:2,768:3:2,768:3:2,768:3:2,768:2:2,768:2:2",
        "model.C": 500,
        "model.lstm_hidden": 1024,
    },
}


def _coerce(key: str, raw: str) -> Any:
    default = DEFAULTS[key]
    try:
        if isinstance(default, bool):
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            if raw.lower() in ("inf", "+inf"):
                return math.inf
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {key!r}: {raw!r}") from exc


class Config:
    """Immutable-ish flat config; read with item access, e.g. cfg['model.d']."""

    def __init__(self, values: dict[str, Any] | None = None):
        self._values = dict(DEFAULTS)
        if values:
            for k, v in values.items():
                if k not in DEFAULTS:
                    raise ConfigError(f"unknown config key {k!r}")
                self._values[k] = v

    def __getitem__(self, key: str) -> Any:
        if key not in self._values:
            raise ConfigError(f"unknown config key {key!r}")
        return self._values[key]

    def set(self, key: str, raw: str) -> None:
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        self._values[key] = _coerce(key, raw) if isinstance(raw, str) else raw

    def set_value(self, key: str, value: Any) -> None:
        """Set an already-typed value (no string coercion)."""
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        self._values[key] = value

    def apply_preset(self, name: str) -> None:
        if name not in REFERENCE_PRESETS:
            raise ConfigError(
                f"unknown reference preset {name!r}; "
                f"available: {sorted(REFERENCE_PRESETS)}"
            )
        for k, v in REFERENCE_PRESETS[name].items():
            self._values[k] = v

    def as_dict(self) -> dict[str, Any]:
        return dict(self._values)

    def dumps(self) -> str:
        lines = [f"{k}={self._values[k]}" for k in sorted(self._values)]
        return "\n".join(lines) + "\n"

    @classmethod
    def load(cls, path: str) -> "Config":
        cfg = cls()
        try:
            fh = open(path, "r", encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path!r}: {exc}") from exc
        with fh:
            for lineno, line in enumerate(fh, 1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
                key, raw = line.split("=", 1)
                cfg.set(key.strip(), raw.strip())
        return cfg

    @classmethod
    def from_overrides(cls, path: str | None, overrides: list[str]) -> "Config":
        cfg = cls.load(path) if path else cls()
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"--set expects key=value, got {item!r}")
            key, raw = item.split("=", 1)
            cfg.set(key.strip(), raw.strip())
        return cfg


def parse_conv_stack(spec: str) -> list[tuple[int, int, int]]:
    """Parse 'out:kernel:stride,...' into a list of (out, kernel, stride)."""
    layers = []
    for part in spec.split(","):
        fields = part.strip().split(":")
        if len(fields) != 3:
            raise ConfigError(f"bad conv layer spec {part!r}")
        out, k, s = (int(f) for f in fields)
        if k < s:
            raise ConfigError(f"conv kernel {k} smaller than stride {s}")
        layers.append((out, k, s))
    stride_prod = 1
    for _, _, s in layers:
        stride_prod *= s
    if stride_prod != 320:
        raise ConfigError(
            f"conv stride product {stride_prod} != 320 (20 ms hop at 16 kHz)"
        )
    return layers
