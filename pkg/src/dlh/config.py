"""INI run configuration.

A run file has up to four sections mapping onto the config dataclasses:

    [model]   -> networks.ModelConfig
    [train]   -> elbo.TrainConfig
    [data]    -> moving_ball.MovingBallConfig
    [run]     -> seed / out / deterministic defaults for the CLI

Unknown sections or keys are errors, as are values that do not parse into
the field's type. The resolved configuration is re-emitted as canonical
JSON next to every command's outputs, so a run directory always records
exactly what it ran with.
"""

from __future__ import annotations

import configparser
import dataclasses
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Optional, get_args, get_origin

from .distributions import ContractViolation
from .elbo import TrainConfig
from .moving_ball import MovingBallConfig
from .networks import ModelConfig


class ConfigError(ValueError):
    """User-facing configuration problem; the CLI maps this to exit code 2."""


@dataclass(frozen=True)
class RunOptions:
    seed: int = 0
    out: str = "out"
    deterministic: bool = False

    def __post_init__(self):
        if self.seed < 0:
            raise ContractViolation("seed must be >= 0")


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig
    train: TrainConfig
    data: MovingBallConfig
    run: RunOptions


_SECTIONS = {
    "model": ModelConfig,
    "train": TrainConfig,
    "data": MovingBallConfig,
    "run": RunOptions,
}

# Fields that cannot be set from INI (structured values with defaults).
_SKIP_FIELDS = {("data", "palette")}


def _parse_value(raw: str, typ, section: str, key: str):
    try:
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        if typ is bool:
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ is str:
            return raw
        origin = get_origin(typ)
        if origin is tuple:
            inner = get_args(typ)
            parts = [p.strip() for p in raw.split(",") if p.strip()]
            if len(inner) == 2 and inner[1] is Ellipsis:
                return tuple(_parse_value(p, inner[0], section, key) for p in parts)
            if len(parts) != len(inner):
                raise ValueError(f"expected {len(inner)} values")
            return tuple(
                _parse_value(p, t, section, key) for p, t in zip(parts, inner)
            )
    except ValueError as exc:
        raise ConfigError(
            f"[{section}] {key}: cannot parse {raw!r} as {typ}: {exc}"
        ) from exc
    raise ConfigError(f"[{section}] {key}: unsupported field type {typ}")


def _section_kwargs(parser: configparser.ConfigParser, section: str, cls) -> dict:
    if section not in parser:
        return {}
    import typing

    hints = typing.get_type_hints(cls)
    out: dict[str, Any] = {}
    for key, raw in parser[section].items():
        if (section, key) in _SKIP_FIELDS:
            raise ConfigError(f"[{section}] {key} cannot be set from INI")
        if key not in hints:
            raise ConfigError(f"unknown key {key!r} in section [{section}]")
        out[key] = _parse_value(raw, hints[key], section, key)
    return out


def load_run_config(
    path: Optional[str | Path] = None,
    seed: Optional[int] = None,
    out: Optional[str] = None,
    deterministic: Optional[bool] = None,
) -> RunConfig:
    """Parse an INI file (optional) and apply CLI overrides.

    The master seed cascades into the train and data seeds. A seed pinned in
    those sections survives the cascade only when no explicit ``seed``
    argument (the CLI ``--seed`` flag) is given; an explicit flag wins
    everywhere so one flag reseeds the whole run.
    """
    parser = configparser.ConfigParser()
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
        unknown = set(parser.sections()) - set(_SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")

    kwargs = {name: _section_kwargs(parser, name, cls) for name, cls in _SECTIONS.items()}

    run_kw = kwargs["run"]
    if seed is not None:
        run_kw["seed"] = seed
    if out is not None:
        run_kw["out"] = out
    if deterministic is not None and deterministic:
        run_kw["deterministic"] = True

    try:
        run = RunOptions(**run_kw)
        train_kw = kwargs["train"]
        data_kw = kwargs["data"]
        # master seed cascades unless the section pinned its own
        if seed is not None or "seed" not in train_kw:
            train_kw["seed"] = run.seed
        if seed is not None or "seed" not in data_kw:
            data_kw["seed"] = run.seed
        cfg = RunConfig(
            model=ModelConfig(**kwargs["model"]),
            train=TrainConfig(**train_kw),
            data=MovingBallConfig(**data_kw),
            run=run,
        )
    except ContractViolation as exc:
        raise ConfigError(str(exc)) from exc
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def resolved_json(cfg: RunConfig) -> str:
    """Canonical JSON for the resolved configuration."""
    payload = {
        "model": dataclasses.asdict(cfg.model),
        "train": dataclasses.asdict(cfg.train),
        "data": dataclasses.asdict(cfg.data),
        "run": dataclasses.asdict(cfg.run),
    }
    return json.dumps(payload, sort_keys=True, indent=2) + "\n"


def write_resolved(cfg: RunConfig, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "config.json"
    path.write_text(resolved_json(cfg))
    return path
