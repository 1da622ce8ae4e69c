"""Run configuration: a flat ``section.key = value`` text file.

Lines starting with ``#`` are comments.  Lists are comma separated.  Every
key has a default, so an empty file is a valid configuration.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

from .cmid import CmidConfig
from .errors import ConfigurationError
from .rl import AgentConfig

SHIFTS = ("reversed", "uncorrelated", "none")
SWEEP_AXES = ("alpha", "rho", "history", "k")


@dataclass
class EnvConfig:
    mode: str = "factor"
    rho: float = 0.95
    greyscale: bool = False
    horizon: int = 100


@dataclass
class ProtocolConfig:
    total_steps: int = 40_000
    shift_step: int = 30_000
    shift: str = "reversed"
    eval_every: int = 2_000
    eval_episodes: int = 10
    eval_seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    # stop once a periodic evaluation reaches this expected return
    stop_return: float = float("inf")
    seeds: list = field(default_factory=lambda: [0])
    sweep_axis: str = ""
    sweep_values: list = field(default_factory=list)


@dataclass
class IoConfig:
    out_dir: str = "runs/default"
    checkpoint_every: int = 10_000
    figures: bool = True


@dataclass
class RunConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    agent: AgentConfig = field(default_factory=AgentConfig)
    cmid: CmidConfig = field(default_factory=CmidConfig)
    protocol: ProtocolConfig = field(default_factory=ProtocolConfig)
    io: IoConfig = field(default_factory=IoConfig)

    SECTIONS = ("env", "agent", "cmid", "protocol", "io")

    # -- access by dotted key

    def _field(self, key):
        if "." not in key:
            raise ConfigurationError(f"{key}: keys look like section.name")
        section, name = key.split(".", 1)
        if section not in self.SECTIONS:
            raise ConfigurationError(f"{key}: unknown section {section!r}")
        obj = getattr(self, section)
        fields = {f.name: f for f in dataclasses.fields(obj)}
        if name not in fields:
            raise ConfigurationError(f"{key}: unknown key")
        return obj, fields[name]

    def get(self, key):
        obj, f = self._field(key)
        return getattr(obj, f.name)

    def set(self, key, value):
        obj, f = self._field(key)
        current = getattr(obj, f.name)
        setattr(obj, f.name, _coerce(key, value, current))

    def items(self):
        for section in self.SECTIONS:
            obj = getattr(self, section)
            for f in dataclasses.fields(obj):
                yield f"{section}.{f.name}", getattr(obj, f.name)

    def copy(self):
        return parse_config(self.to_text())

    # -- validation and (de)serialisation

    def validate(self):
        env, proto = self.env, self.protocol
        if env.mode not in ("factor", "image16"):
            raise ConfigurationError(f"env.mode: expected factor or image16, got {env.mode!r}")
        if not 0.5 <= env.rho <= 1.0:
            raise ConfigurationError(f"env.rho: must lie in [0.5, 1], got {env.rho}")
        if env.horizon < 1:
            raise ConfigurationError("env.horizon: must be >= 1")
        if proto.shift not in SHIFTS:
            raise ConfigurationError(f"protocol.shift: expected one of {SHIFTS}")
        if proto.total_steps < 1:
            raise ConfigurationError("protocol.total_steps: must be >= 1")
        if not 0 <= proto.shift_step <= proto.total_steps:
            raise ConfigurationError("protocol.shift_step: must lie in [0, total_steps]")
        if not proto.seeds:
            raise ConfigurationError("protocol.seeds: at least one seed is required")
        if proto.eval_every < 1 or proto.eval_episodes < 1:
            raise ConfigurationError("protocol.eval_every/eval_episodes: must be >= 1")
        if proto.sweep_axis and proto.sweep_axis not in SWEEP_AXES:
            raise ConfigurationError(f"protocol.sweep_axis: expected one of {SWEEP_AXES}")
        try:
            self.agent.validate()
        except ConfigurationError as exc:
            raise ConfigurationError(f"agent: {exc}") from None
        if self.cmid.enabled:
            try:
                self.cmid.validate(self.agent.batch_size)
            except ConfigurationError as exc:
                raise ConfigurationError(f"cmid: {exc}") from None
        return self

    def to_text(self):
        lines = ["# effective run configuration"]
        current = None
        for key, value in self.items():
            section = key.split(".")[0]
            if section != current:
                lines.append(f"\n# {section}")
                current = section
            lines.append(f"{key} = {_format(value)}")
        return "\n".join(lines) + "\n"

    def save(self, path):
        with open(path, "w") as f:
            f.write(self.to_text())


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, list):
        return ",".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _scalar(key, text, like):
    text = text.strip()
    if isinstance(like, bool):
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigurationError(f"{key}: expected a boolean, got {text!r}")
    if isinstance(like, int):
        try:
            return int(text)
        except ValueError:
            raise ConfigurationError(f"{key}: expected an integer, got {text!r}") from None
    if isinstance(like, float):
        try:
            return float(text)
        except ValueError:
            raise ConfigurationError(f"{key}: expected a number, got {text!r}") from None
    return text


def _coerce(key, value, current):
    if not isinstance(value, str):
        if isinstance(current, list) and not isinstance(value, list):
            value = [value]
        return value
    if isinstance(current, list):
        parts = [p for p in value.split(",") if p.strip()]
        out = []
        for p in parts:
            p = p.strip()
            try:
                out.append(int(p))
            except ValueError:
                try:
                    out.append(float(p))
                except ValueError:
                    out.append(p)
        return out
    return _scalar(key, value, current)


def parse_config(text, overrides=()):
    cfg = RunConfig()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        cfg.set(key, value)
    for item in overrides:
        if "=" not in item:
            raise ConfigurationError(f"override {item!r}: expected key=value")
        key, value = (s.strip() for s in item.split("=", 1))
        cfg.set(key, value)
    return cfg.validate()


def load_config(path=None, overrides=()):
    text = ""
    if path:
        try:
            with open(path) as f:
                text = f.read()
        except OSError as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, overrides)
