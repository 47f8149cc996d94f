"""Layered INI configuration: shipped defaults, file, environment.

Every physical and algorithmic parameter lives in one flat INI file
with sections [traffic], [grid], [controller], [deeponet], [dataset],
[bench].  Precedence is defaults < file < environment, where the
environment override for section S key K is ARZNO_<S>_<K> (upper case).
A 12-hex-digit digest of the merged configuration is embedded in run
artifacts so downstream commands can detect mismatched inputs.
"""

from __future__ import annotations

import configparser
import hashlib
import json
import os
from pathlib import Path

from arzno.controller import ControllerConfig
from arzno.deeponet import TrainConfig
from arzno.model import TrafficParams
from arzno.sim import GridSpec

__all__ = [
    "ConfigError",
    "DEFAULTS",
    "ENV_PREFIX",
    "load_config",
    "config_hash",
    "write_default_config",
    "build_traffic",
    "build_grid",
    "build_controller",
    "build_train",
    "dataset_options",
    "deeponet_options",
    "bench_options",
]

ENV_PREFIX = "ARZNO"

# Shipped defaults; densities in veh/km and road length in m, matching
# the usual traffic-engineering units, converted on build.
DEFAULTS: dict[str, dict[str, str]] = {
    "traffic": {
        "v_f": "40.0",
        "rho_m_veh_km": "160.0",
        "rho_star_veh_km": "120.0",
        "tau": "60.0",
        "gamma0": "1.0",
        "length": "600.0",
    },
    "grid": {
        "n_x": "60",
        "dt": "0.1",
        "t_end": "300.0",
    },
    "controller": {
        "kernel_source": "solver",
        "kernel_refresh_dt": "0.1",
        "mesh_n": "41",
        "tol": "1e-8",
        "max_iter": "200",
        "rho_gain": "0.05",
        "gamma": "1.0",
        "gamma1": "0.01",
        "tau_guess": "60.0",
        "c_bar": "0.02",
        "ic": "sine",
    },
    "deeponet": {
        "b": "32",
        "hidden": "64,64",
        "lr": "1e-3",
        "batch_size": "256",
        "epochs": "400",
        "val_split": "0.1",
        "seed": "0",
        "model_path": "model.bin",
    },
    "dataset": {
        "n_families": "10",
        "tau_lo": "50.0",
        "tau_hi": "70.0",
        "subsample_dt": "0.1",
        "seed": "0",
        "equispaced": "false",
        "c_source": "estimate",
        "out_dir": "dataset",
        "split": "0.8,0.1,0.1",
        "split_seed": "0",
    },
    "bench": {
        "n": "100",
        "warmup": "5",
        "seed": "0",
    },
}


class ConfigError(ValueError):
    """Invalid configuration file, key, or value."""


def load_config(path: str | Path | None = None) -> dict[str, dict[str, str]]:
    """Merge defaults, the optional file, and environment overrides.

    Unknown sections or keys in the file are rejected with the
    offending name so typos surface immediately.

    Raises:
        ConfigError: unreadable or malformed file, or unknown keys.
    """
    cfg = {s: dict(kv) for s, kv in DEFAULTS.items()}
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            parser.read_string(text, source=str(path))
        except configparser.Error as exc:
            raise ConfigError(str(exc)) from exc
        for section in parser.sections():
            if section not in cfg:
                raise ConfigError(f"{path}: unknown section [{section}]")
            for key, value in parser.items(section):
                if key not in cfg[section]:
                    raise ConfigError(
                        f"{path}: unknown key '{key}' in section [{section}]"
                    )
                cfg[section][key] = value
    for section, kv in cfg.items():
        for key in kv:
            env = os.environ.get(f"{ENV_PREFIX}_{section.upper()}_{key.upper()}")
            if env is not None:
                kv[key] = env
    return cfg


def config_hash(cfg: dict[str, dict[str, str]]) -> str:
    """12-hex digest of the merged configuration."""
    blob = json.dumps(cfg, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def write_default_config(path: str | Path) -> None:
    """Write the shipped defaults as an editable INI file."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.read_dict(DEFAULTS)
    with open(path, "w") as fh:
        parser.write(fh)


def _get(cfg: dict, section: str, key: str, conv, what: str):
    raw = cfg[section][key]
    try:
        return conv(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(
            f"[{section}] {key} = {raw!r}: expected {what}"
        ) from exc


def _bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(raw)


def _floats(raw: str) -> tuple[float, ...]:
    return tuple(float(part) for part in raw.split(","))


def _ints(raw: str) -> tuple[int, ...]:
    return tuple(int(part) for part in raw.split(","))


def build_traffic(cfg: dict) -> TrafficParams:
    """Physical parameters; densities converted from veh/km to veh/m."""
    try:
        return TrafficParams(
            v_f=_get(cfg, "traffic", "v_f", float, "a number"),
            rho_m=_get(cfg, "traffic", "rho_m_veh_km", float, "a number") / 1000.0,
            rho_star=_get(cfg, "traffic", "rho_star_veh_km", float, "a number")
            / 1000.0,
            tau=_get(cfg, "traffic", "tau", float, "a number"),
            gamma0=_get(cfg, "traffic", "gamma0", float, "a number"),
            length=_get(cfg, "traffic", "length", float, "a number"),
        )
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"[traffic]: {exc}") from exc


def build_grid(cfg: dict) -> GridSpec:
    try:
        return GridSpec(
            n_x=_get(cfg, "grid", "n_x", int, "an integer"),
            dt=_get(cfg, "grid", "dt", float, "a number"),
            t_end=_get(cfg, "grid", "t_end", float, "a number"),
        )
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"[grid]: {exc}") from exc


def build_controller(
    cfg: dict, kernel_source: str | None = None
) -> ControllerConfig:
    """Controller settings; kernel_source can be forced by the caller."""
    try:
        return ControllerConfig(
            kernel_source=kernel_source or cfg["controller"]["kernel_source"],
            kernel_refresh_dt=_get(
                cfg, "controller", "kernel_refresh_dt", float, "a number"
            ),
            mesh_n=_get(cfg, "controller", "mesh_n", int, "an integer"),
            tol=_get(cfg, "controller", "tol", float, "a number"),
            max_iter=_get(cfg, "controller", "max_iter", int, "an integer"),
            rho_gain=_get(cfg, "controller", "rho_gain", float, "a number"),
            gamma=_get(cfg, "controller", "gamma", float, "a number"),
            gamma1=_get(cfg, "controller", "gamma1", float, "a number"),
            tau_guess=_get(cfg, "controller", "tau_guess", float, "a number"),
            c_bar=_get(cfg, "controller", "c_bar", float, "a number"),
            ic=cfg["controller"]["ic"],
        )
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"[controller]: {exc}") from exc


def build_train(cfg: dict) -> TrainConfig:
    try:
        return TrainConfig(
            lr=_get(cfg, "deeponet", "lr", float, "a number"),
            batch_size=_get(cfg, "deeponet", "batch_size", int, "an integer"),
            epochs=_get(cfg, "deeponet", "epochs", int, "an integer"),
            val_split=_get(cfg, "deeponet", "val_split", float, "a number"),
            seed=_get(cfg, "deeponet", "seed", int, "an integer"),
        )
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"[deeponet]: {exc}") from exc


def dataset_options(cfg: dict) -> dict:
    """Typed view of the [dataset] section."""
    split = _get(cfg, "dataset", "split", _floats, "comma-separated shares")
    if len(split) != 3:
        raise ConfigError("[dataset] split must have three components")
    return {
        "n_families": _get(cfg, "dataset", "n_families", int, "an integer"),
        "tau_range": (
            _get(cfg, "dataset", "tau_lo", float, "a number"),
            _get(cfg, "dataset", "tau_hi", float, "a number"),
        ),
        "subsample_dt": _get(cfg, "dataset", "subsample_dt", float, "a number"),
        "seed": _get(cfg, "dataset", "seed", int, "an integer"),
        "equispaced": _get(cfg, "dataset", "equispaced", _bool, "a boolean"),
        "c_source": cfg["dataset"]["c_source"],
        "out_dir": cfg["dataset"]["out_dir"],
        "split": split,
        "split_seed": _get(cfg, "dataset", "split_seed", int, "an integer"),
    }


def deeponet_options(cfg: dict) -> dict:
    """Typed view of the [deeponet] section beyond TrainConfig."""
    return {
        "b": _get(cfg, "deeponet", "b", int, "an integer"),
        "hidden": _get(cfg, "deeponet", "hidden", _ints, "comma-separated ints"),
        "model_path": cfg["deeponet"]["model_path"],
    }


def bench_options(cfg: dict) -> dict:
    return {
        "n": _get(cfg, "bench", "n", int, "an integer"),
        "warmup": _get(cfg, "bench", "warmup", int, "an integer"),
        "seed": _get(cfg, "bench", "seed", int, "an integer"),
    }
