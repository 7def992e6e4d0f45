"""TOML configuration loading, snapshots and dotted-key overrides.

A configuration file has up to four sections:

    [system]   n_devices, n_levels, bandwidth_hz, tx_power_w, latency_weight, ...
    [actor]    history_length, memory_size, batch_size, hidden_widths, ...
    [critic]   cache_size, refit_interval, exploration, acquisition, ...
    [oracle]   alpha_max, attenuation, noise_fraction, ...

Unset keys take their defaults. The noise PSD is given either as
`noise_psd_dbm_per_hz` or as `noise_psd_w_per_hz`. Per-device keys take a
scalar (broadcast) or a list with one entry per device.
"""

import tomllib
from dataclasses import fields
from enum import Enum
from pathlib import Path
from typing import Any

from edge_offload_tool.core import (
    PER_DEVICE_FIELDS,
    ActorConfig,
    ConfigError,
    CriticConfig,
    OracleConfig,
    SystemConfig,
    config_field_names,
    dbm_per_hz_to_w,
)
from edge_offload_tool.logging_config import get_logger

logger = get_logger(__name__)

NESTED_SECTIONS: dict[str, type] = {
    "actor": ActorConfig,
    "critic": CriticConfig,
    "oracle": OracleConfig,
}
SECTIONS = ("system", *NESTED_SECTIONS)
NOISE_DBM_KEY = "noise_psd_dbm_per_hz"


def _coerce(key: str, value: Any, default: Any) -> Any:
    """Convert a TOML value to the type of the field default."""
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(key, f"expected true or false, got {value!r}")
        return value
    if isinstance(default, Enum):
        if not isinstance(value, str):
            raise ConfigError(key, f"expected a string, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(key, f"expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, int | float):
            raise ConfigError(key, f"expected a number, got {value!r}")
        return float(value)
    if isinstance(default, tuple):
        items = value if isinstance(value, list) else [value]
        if not all(isinstance(v, int) and not isinstance(v, bool) for v in items):
            raise ConfigError(key, f"expected a list of integers, got {value!r}")
        return tuple(items)
    return value


def _per_device(key: str, name: str, value: Any) -> tuple[Any, ...]:
    if name == "native_resolution":
        # [w, h] broadcasts; [[w, h], ...] is per device
        if isinstance(value, list) and value and all(isinstance(v, int) for v in value):
            value = [value]
        if not isinstance(value, list) or not all(
            isinstance(v, list) and len(v) == 2 and all(isinstance(x, int) for x in v)
            for v in value
        ):
            raise ConfigError(key, "expected [width, height] or a list of them")
        return tuple((int(w), int(h)) for w, h in value)
    items = value if isinstance(value, list) else [value]
    if not all(isinstance(v, int | float) and not isinstance(v, bool) for v in items):
        raise ConfigError(key, f"expected a number or a list of numbers, got {value!r}")
    return tuple(float(v) for v in items)


def _section_kwargs(section: str, cls: type, table: dict[str, Any]) -> dict[str, Any]:
    defaults = {f.name: getattr(cls(), f.name) for f in fields(cls)}
    known = set(config_field_names(cls))
    kwargs: dict[str, Any] = {}
    for name, value in table.items():
        key = f"{section}.{name}"
        if name not in known:
            raise ConfigError(key, "unknown key")
        kwargs[name] = _coerce(key, value, defaults[name])
    return kwargs


def build_config(data: dict[str, Any]) -> SystemConfig:
    """Build and validate a SystemConfig from parsed TOML tables.

    Raises:
        ConfigError: Unknown section or key, wrong type, or invariant violation
    """
    for section in data:
        if section not in SECTIONS:
            raise ConfigError(section, f"unknown section; expected one of {', '.join(SECTIONS)}")
        if not isinstance(data[section], dict):
            raise ConfigError(section, "expected a table")

    system = dict(data.get("system", {}))
    kwargs: dict[str, Any] = {}
    if NOISE_DBM_KEY in system:
        if "noise_psd_w_per_hz" in system:
            raise ConfigError(
                f"system.{NOISE_DBM_KEY}", "give the noise PSD in dBm/Hz or in W/Hz, not both"
            )
        dbm = _coerce(f"system.{NOISE_DBM_KEY}", system.pop(NOISE_DBM_KEY), 0.0)
        kwargs["noise_psd_w_per_hz"] = dbm_per_hz_to_w(dbm)

    known = set(config_field_names(SystemConfig)) - set(NESTED_SECTIONS)
    base = SystemConfig()
    for name, value in system.items():
        key = f"system.{name}"
        if name not in known:
            raise ConfigError(key, "unknown key")
        if name in PER_DEVICE_FIELDS:
            kwargs[name] = _per_device(key, name, value)
        else:
            kwargs[name] = _coerce(key, value, getattr(base, name))

    for section, cls in NESTED_SECTIONS.items():
        kwargs[section] = cls(**_section_kwargs(section, cls, data.get(section, {})))
    return SystemConfig(**kwargs)


def load_config(path: Path | None) -> SystemConfig:
    """Read a TOML configuration file; None yields the defaults.

    Raises:
        ConfigError: Unreadable file, TOML syntax error, or invalid content
    """
    if path is None:
        return SystemConfig()
    try:
        with Path(path).open("rb") as fh:
            data = tomllib.load(fh)
    except OSError as e:
        raise ConfigError(str(path), f"cannot read configuration: {e.strerror}") from e
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(str(path), f"invalid TOML: {e}") from e
    cfg = build_config(data)
    logger.info("Loaded configuration from %s", path)
    return cfg


def _plain(value: Any) -> Any:
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, tuple):
        return [_plain(v) for v in value]
    return value


def config_to_dict(cfg: SystemConfig) -> dict[str, dict[str, Any]]:
    """Canonical nested snapshot; build_config(config_to_dict(cfg)) == cfg."""
    out: dict[str, dict[str, Any]] = {"system": {}}
    for f in fields(SystemConfig):
        if f.name in NESTED_SECTIONS:
            continue
        out["system"][f.name] = _plain(getattr(cfg, f.name))
    for section in NESTED_SECTIONS:
        nested = getattr(cfg, section)
        out[section] = {f.name: _plain(getattr(nested, f.name)) for f in fields(nested)}
    return out


def parse_value(text: str) -> Any:
    """Parse a command-line value as a TOML literal, falling back to a bare string.

    Example:
        >>> parse_value("0.5"), parse_value("[1, 2]"), parse_value("ei")
        (0.5, [1, 2], 'ei')
    """
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def apply_override(cfg: SystemConfig, dotted_key: str, value: Any) -> SystemConfig:
    """Return a copy of cfg with one `section.key` replaced.

    Changing system.n_devices resizes homogeneous per-device settings.

    Raises:
        ConfigError: Malformed or unknown key, or an invalid resulting config
    """
    section, _, name = dotted_key.partition(".")
    if not name or section not in SECTIONS:
        raise ConfigError(dotted_key, f"expected section.key with section in {', '.join(SECTIONS)}")
    if dotted_key == "system.n_devices":
        n = _coerce(dotted_key, value, 0)
        return cfg.with_devices(n)
    data = config_to_dict(cfg)
    if dotted_key == f"system.{NOISE_DBM_KEY}":
        del data["system"]["noise_psd_w_per_hz"]
    data[section][name] = value
    return build_config(data)
