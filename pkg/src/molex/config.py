"""Run configuration: INI sections ``[backbone] [lora] [molex] [train] [task] [probe]``.

Every key has a default except ``task.name``. Unknown sections and keys are
rejected with the offending line number. JSON with the same nesting is accepted
as an alternative.
"""
from __future__ import annotations

import configparser
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .backbone import BackboneConfig
from .errors import ConfigError
from .probe import ProbeConfig
from .routing import GateConfig, _coerce
from .training import PretrainConfig, TrainConfig

REQUIRED = {("task", "name")}


@dataclass
class LoraConfig:
    rank: int = 8
    alpha: float = 8.0


@dataclass
class MolexSection:
    enabled: bool = True
    gate: GateConfig = field(default_factory=GateConfig)


@dataclass
class TaskSection:
    name: str = "majority"
    transfer: str = ""


@dataclass
class TrainSection:
    train: TrainConfig = field(default_factory=TrainConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    seeds: tuple = (0, 1, 2, 3, 4)
    pretrain_seed: int = 0


@dataclass
class RunConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    lora: LoraConfig = field(default_factory=LoraConfig)
    molex: MolexSection = field(default_factory=MolexSection)
    train: TrainSection = field(default_factory=TrainSection)
    task: TaskSection = field(default_factory=TaskSection)
    probe: ProbeConfig = field(default_factory=ProbeConfig)

    @property
    def gate(self) -> GateConfig | None:
        return self.molex.gate if self.molex.enabled else None

    def train_config(self) -> TrainConfig:
        d = asdict(self.train.train)
        d.update(lora_rank=self.lora.rank, lora_alpha=self.lora.alpha)
        return TrainConfig(**d)


def _flat_fields(obj, skip=()):
    return [(f.name, f.type) for f in fields(obj) if f.name not in skip]


def schema() -> dict:
    """Section -> ordered ``{key: (type, default)}``; used by ``--help`` and the parser."""
    rc = RunConfig()
    out = {
        "backbone": {k: (t, getattr(rc.backbone, k)) for k, t in _flat_fields(rc.backbone)},
        "lora": {k: (t, getattr(rc.lora, k)) for k, t in _flat_fields(rc.lora)},
        "molex": {"enabled": ("bool", True)},
        "train": {},
        "task": {k: (t, getattr(rc.task, k)) for k, t in _flat_fields(rc.task)},
        "probe": {k: (t, getattr(rc.probe, k)) for k, t in _flat_fields(rc.probe)},
    }
    out["molex"].update({k: (t, getattr(rc.molex.gate, k)) for k, t in _flat_fields(rc.molex.gate)})
    out["train"].update({k: (t, getattr(rc.train.train, k))
                         for k, t in _flat_fields(rc.train.train, skip=("lora_rank", "lora_alpha"))})
    out["train"].update({f"pretrain_{k}": (t, getattr(rc.train.pretrain, k))
                         for k, t in _flat_fields(rc.train.pretrain)})
    out["train"]["seeds"] = ("tuple", rc.train.seeds)
    out["train"]["pretrain_seed"] = ("int", rc.train.pretrain_seed)
    return out


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(_format(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def _parse_value(section, key, raw, typ, default):
    try:
        if typ == "tuple":
            items = [s.strip() for s in str(raw).split(",") if s.strip()]
            proto = default[0] if default else ""
            conv = type(proto) if not isinstance(proto, str) else str
            return tuple(conv(s) for s in items)
        v = _coerce(raw, typ)
        if typ == "str" and not isinstance(v, str):
            raise ValueError
        return v
    except (ValueError, TypeError, ConfigError):
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r} as {typ}", section, key) from None


def from_flat(flat: dict) -> RunConfig:
    """Build from ``{section: {key: value}}``; unknown keys raise."""
    sch = schema()
    vals = {s: {} for s in sch}
    for section, items in flat.items():
        if section not in sch:
            raise ConfigError(f"unknown section [{section}]", section)
        for key, raw in items.items():
            if key not in sch[section]:
                raise ConfigError(f"[{section}] unknown key {key!r}", section, key)
            typ, default = sch[section][key]
            vals[section][key] = _parse_value(section, key, raw, typ, default)
    for section, key in REQUIRED:
        if key not in vals[section]:
            raise ConfigError(f"missing required key {section}.{key}", section, key)
    tr = vals["train"]
    pre = {k[len("pretrain_"):]: tr.pop(k) for k in list(tr) if k.startswith("pretrain_") and k != "pretrain_seed"}
    train = TrainSection(
        train=TrainConfig(**{k: v for k, v in tr.items() if k not in ("seeds", "pretrain_seed")}),
        pretrain=PretrainConfig(**pre),
        seeds=tr.get("seeds", TrainSection().seeds),
        pretrain_seed=tr.get("pretrain_seed", 0),
    )
    mx = dict(vals["molex"])
    enabled = mx.pop("enabled", True)
    return RunConfig(
        backbone=BackboneConfig(**vals["backbone"]),
        lora=LoraConfig(**vals["lora"]),
        molex=MolexSection(enabled, GateConfig(**mx)),
        train=train,
        task=TaskSection(**vals["task"]),
        probe=ProbeConfig(**vals["probe"]),
    )


def to_flat(rc: RunConfig) -> dict:
    out = {
        "backbone": asdict(rc.backbone),
        "lora": asdict(rc.lora),
        "molex": {"enabled": rc.molex.enabled, **asdict(rc.molex.gate)},
        "train": {k: v for k, v in asdict(rc.train.train).items() if k not in ("lora_rank", "lora_alpha")},
        "task": asdict(rc.task),
        "probe": asdict(rc.probe),
    }
    out["train"].update({f"pretrain_{k}": v for k, v in asdict(rc.train.pretrain).items()})
    out["train"]["seeds"] = tuple(rc.train.seeds)
    out["train"]["pretrain_seed"] = rc.train.pretrain_seed
    return out


def dumps(rc: RunConfig) -> str:
    lines = []
    for section, items in to_flat(rc).items():
        lines.append(f"[{section}]")
        lines += [f"{k} = {_format(v)}" for k, v in items.items()]
        lines.append("")
    return "\n".join(lines)


def _line_of(text: str, section: str, key: str | None = None) -> int | None:
    current = None
    for n, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        if s.startswith("[") and s.endswith("]"):
            current = s[1:-1].strip()
            if key is None and current == section:
                return n
        elif key is not None and current == section and s.partition("=")[0].strip() == key:
            return n
    return None


def loads(text: str) -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None, strict=True, default_section="__none__")
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    flat = {s: dict(cp.items(s)) for s in cp.sections()}
    try:
        return from_flat(flat)
    except ConfigError as exc:
        line = _line_of(text, exc.section, exc.key) if exc.section else None
        if line is None:
            raise
        raise ConfigError(f"line {line}: {exc}", exc.section, exc.key) from None


def load(path, fmt: str | None = None) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text()
    if (fmt or ("json" if path.suffix == ".json" else "ini")) == "json":
        try:
            return from_flat(json.loads(text))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"malformed JSON config: {exc}") from None
    return loads(text)


def apply_overrides(rc: RunConfig, overrides) -> RunConfig:
    """``section.key=value`` strings on top of an existing config."""
    flat = {s: {k: _format(v) for k, v in items.items()} for s, items in to_flat(rc).items()}
    for ov in overrides or []:
        lhs, sep, value = ov.partition("=")
        section, dot, key = lhs.strip().partition(".")
        if not sep or not dot:
            raise ConfigError(f"override {ov!r} is not section.key=value")
        flat.setdefault(section, {})[key] = value.strip()
    return from_flat(flat)


def help_text() -> str:
    lines = ["config keys (defaults):"]
    for section, items in schema().items():
        for k, (t, d) in items.items():
            req = " (required)" if (section, k) in REQUIRED else ""
            lines.append(f"  {section}.{k} = {_format(d)}{req}")
    return "\n".join(lines)
