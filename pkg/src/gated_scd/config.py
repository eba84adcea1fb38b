"""Configuration loading: config/.env defaults and flat `key = value` files.

Precedence, lowest first: model defaults, environment (config/.env),
--config file, explicit command-line flags. Flat keys are routed onto the
nested pydantic models, e.g. ``tau`` lands in ``TrainConfig.loss.tau`` and
``precision = fp16`` in ``TrainConfig.precision.mode``.
"""

import os
from collections.abc import Mapping
from pathlib import Path
from typing import TypeVar

from dotenv import load_dotenv
from pydantic import BaseModel

from gated_scd.errors import FormatError, ParameterError

# Load directory defaults from config/.env
_config_path = Path(__file__).parent.parent.parent / "config" / ".env"
load_dotenv(_config_path)

DATA_DIR = Path(os.getenv("SCD_DATA_DIR", "data"))
OUTPUT_DIR = Path(os.getenv("SCD_OUTPUT_DIR", "output"))

# flat key -> (section field, field inside the section)
_SECTION_KEYS: dict[str, tuple[str, str]] = {
    "variant": ("loss", "variant"),
    "margin": ("loss", "margin"),
    "tau": ("loss", "tau"),
    "sc_weight": ("loss", "sc_weight"),
    "precision": ("precision", "mode"),
    "loss_scale": ("precision", "loss_scale"),
    "grad_clip": ("precision", "grad_clip"),
    "num_classes": ("decoder", "num_classes"),
    "encoder_widths": ("decoder", "encoder_widths"),
    "decoder_width": ("decoder", "decoder_width"),
    "num_blocks": ("decoder", "num_blocks"),
    "cbam_reduction": ("decoder", "cbam_reduction"),
    "use_cagm": ("decoder", "use_cagm"),
    "tie_change_concat": ("decoder", "tie_change_concat"),
}

_NONE_WORDS = {"none", "null", "off", ""}

M = TypeVar("M", bound=BaseModel)


def read_config(path: Path) -> dict[str, str]:
    """Parse a flat `key = value` file; `#` starts a comment."""
    path = Path(path)
    if not path.exists():
        raise FormatError(f"{path}: config file not found")
    values: dict[str, str] = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise FormatError(f"{path}:{lineno}: empty key")
        values[key.replace("-", "_")] = value
    return values


def _coerce(key: str, value: object) -> object:
    if isinstance(value, str):
        if key == "grad_clip" and value.lower() in _NONE_WORDS:
            return None
        if key in ("encoder_widths", "changed_band"):
            return tuple(part.strip() for part in value.split(","))
    return value


def build_config(model_cls: type[M], *layers: Mapping[str, object]) -> M:
    """Merge flat layers (later wins) and validate them into `model_cls`.

    Keys naming a top-level field go there; other known keys are routed into
    their section. Unknown keys raise ParameterError.
    """
    fields = model_cls.model_fields
    top: dict[str, object] = {}
    sections: dict[str, dict[str, object]] = {}
    for layer in layers:
        for raw_key, value in layer.items():
            if value is None:
                continue
            key = raw_key.replace("-", "_")
            value = _coerce(key, value)
            section = _SECTION_KEYS.get(key)
            if key in fields and not (section and section[0] == key):
                top[key] = value
            elif section and section[0] in fields:
                sections.setdefault(section[0], {})[section[1]] = value
            else:
                raise ParameterError(f"unknown config key {raw_key!r} for {model_cls.__name__}")

    for name, overrides in sections.items():
        default = fields[name].get_default(call_default_factory=True)
        if name in top:
            raise ParameterError(f"{name!r} given both as a section and a flat key")
        top[name] = {**default.model_dump(), **overrides}
    return model_cls.model_validate(top)
