"""Run configuration: INI-style sections of flat ``key = value`` pairs.

Every key has a typed default. Resolution merges defaults, the config file and
``section.key=value`` overrides; unknown sections or keys are errors. The
canonical text of a resolved config is what gets persisted and digested.
"""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

from .outer import CONV_MAPS, MLP_WIDTHS, OuterSpec


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _ints(text: str) -> tuple[int, ...]:
    t = str(text).strip()
    return tuple(int(v) for v in t.split(",") if v.strip()) if t else ()


# section -> key -> (parser, default)
SCHEMA: dict[str, dict[str, tuple]] = {
    "run": {
        "seed": (int, 0),
        "command": (str, ""),
        "parent": (str, ""),
    },
    "data": {
        "dataset": (str, "mnist"),
        "root": (str, "data/mnist"),
        "train_size": (int, 5000),
        "val_size": (int, 1000),
        "test_size": (int, 1000),
    },
    "model": {
        "kind": (str, "mlp"),
        "arity": (int, 2),
        "activation": (str, "inner"),
        "widths": (_ints, ()),
        "dropout": (float, 0.5),
        "layer_norm": (_bool, True),
    },
    "optim": {
        "lr": (float, 1e-3),
        "beta1": (float, 0.9),
        "beta2": (float, 0.999),
        "eps": (float, 1e-8),
        "batch_size": (int, 128),
    },
    "session1": {
        "resolution": (int, 50),
        "sigma": (float, 3.0),
        "half_width": (float, 2.5),
        "steps": (int, 20000),
        "batch": (int, 256),
        "lr": (float, 1e-3),
    },
    "session2": {
        "max_epochs": (int, 200),
        "early_stop": (_bool, True),
        "patience": (int, 20),
        "snapshot_every": (int, 1),
        "snapshot_resolution": (int, 101),
    },
    "session3": {
        "max_epochs": (int, 400),
        "early_stop": (_bool, True),
        "patience": (int, 20),
    },
    "analysis": {
        "mass": (float, 0.99),
        "bins": (int, 101),
        "fit_mode": (str, "density"),
        "lmax": (int, 8),
        "xavier_count": (int, 24),
        "grid_resolution": (int, 101),
        "max_images": (int, 0),  # 0 = whole test subset
    },
}


def _render(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass
class RunConfig:
    values: dict[str, dict] = field(default_factory=dict)

    @classmethod
    def defaults(cls) -> "RunConfig":
        return cls({s: {k: d for k, (_, d) in keys.items()} for s, keys in SCHEMA.items()})

    def __getitem__(self, dotted: str):
        section, key = _split(dotted)
        return self.values[section][key]

    def set(self, dotted: str, raw) -> None:
        section, key = _split(dotted)
        parser = SCHEMA[section][key][0]
        try:
            self.values[section][key] = parser(raw) if isinstance(raw, str) else raw
        except ValueError as exc:
            raise ConfigError(f"bad value for {dotted}: {raw!r} ({exc})") from exc

    def copy(self) -> "RunConfig":
        return RunConfig({s: dict(kv) for s, kv in self.values.items()})

    def to_text(self) -> str:
        lines = []
        for section, keys in SCHEMA.items():
            lines.append(f"[{section}]")
            lines.extend(f"{k} = {_render(self.values[section][k])}" for k in keys)
            lines.append("")
        return "\n".join(lines)

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()

    def run_id(self) -> str:
        return f"s{self['run.seed']}-{self.digest()[:12]}"

    def widths(self) -> tuple[int, ...]:
        w = self["model.widths"]
        if w:
            return w
        return MLP_WIDTHS if self["model.kind"] == "mlp" else CONV_MAPS

    def outer_spec(self, input_shape, classes: int = 10) -> OuterSpec:
        return OuterSpec(
            kind=self["model.kind"],
            input_shape=tuple(input_shape),
            classes=classes,
            widths=self.widths(),
            arity=self["model.arity"],
            activation=self["model.activation"],
            dropout=self["model.dropout"],
            layer_norm=self["model.layer_norm"],
        )


def _split(dotted: str) -> tuple[str, str]:
    if "." not in dotted:
        raise ConfigError(f"config keys look like section.key, got {dotted!r}")
    section, key = dotted.split(".", 1)
    if section not in SCHEMA:
        raise ConfigError(f"unknown config section {section!r}")
    if key not in SCHEMA[section]:
        raise ConfigError(f"unknown config key {dotted!r}")
    return section, key


def parse_text(text: str, base: RunConfig | None = None) -> RunConfig:
    cfg = (base or RunConfig.defaults()).copy()
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config: {exc}") from exc
    for section in parser.sections():
        for key, raw in parser.items(section):
            cfg.set(f"{section}.{key}", raw)
    return cfg


def load(path=None, overrides=(), seed: int | None = None) -> RunConfig:
    cfg = RunConfig.defaults()
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        cfg = parse_text(p.read_text(), cfg)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must be key=value, got {item!r}")
        k, v = item.split("=", 1)
        cfg.set(k.strip(), v.strip())
    if seed is not None:
        cfg.set("run.seed", seed)
    return cfg
