"""Experiment configuration and its ``key = value`` text format.

Keys are ``section.field`` with sections ``net``, ``memory``, ``loss`` and
``train``.  Blank lines and ``#`` comments are ignored; unknown keys are
errors.  The ablation switches live in ``train``; the mirrored
``net.use_memory``, ``loss.enable_memory`` and ``loss.enable_contrast`` may
be given but must agree with them.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, replace

from ..errors import ConfigurationError
from ..memory import MemoryConfig
from ..network import NetConfig
from ..objective import LossConfig


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 5e-4
    adam_eps: float = 1e-8
    phase_a_iters: int = 500
    phase_b_iters: int = 2000
    batch_size: int = 1
    seed: int = 0
    checkpoint_every: int = 500
    val_every: int = 250
    val_count: int = 8
    enable_memory: bool = True
    enable_contrast: bool = True

    def __post_init__(self):
        if not 0.0 < self.beta1 < self.beta2 < 1.0:
            raise ConfigurationError("need 0 < beta1 < beta2 < 1")
        if self.lr <= 0:
            raise ConfigurationError("lr must be > 0")
        for name in ("phase_a_iters", "phase_b_iters", "checkpoint_every", "val_every", "val_count", "weight_decay"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be >= 0")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")


@dataclass(frozen=True)
class ExperimentConfig:
    net: NetConfig = field(default_factory=NetConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        t = self.train
        if self.net.use_memory != t.enable_memory or self.loss.enable_memory != t.enable_memory:
            raise ConfigurationError("memory switches in net/loss disagree with train.enable_memory")
        if self.loss.enable_contrast != t.enable_contrast:
            raise ConfigurationError("loss.enable_contrast disagrees with train.enable_contrast")

    @classmethod
    def build(cls, net: NetConfig | None = None, loss: LossConfig | None = None, train: TrainConfig | None = None):
        """Assemble a config, propagating the train switches to net and loss."""
        train = train or TrainConfig()
        net = replace(net or NetConfig(), use_memory=train.enable_memory)
        loss = replace(
            loss or LossConfig(), enable_memory=train.enable_memory, enable_contrast=train.enable_contrast
        )
        return cls(net, loss, train)

    def with_switches(self, memory: bool, contrast: bool) -> "ExperimentConfig":
        train = replace(self.train, enable_memory=memory, enable_contrast=contrast)
        return ExperimentConfig.build(self.net, self.loss, train)

    def with_train(self, **changes) -> "ExperimentConfig":
        return ExperimentConfig.build(self.net, self.loss, replace(self.train, **changes))


SECTIONS = ("net", "memory", "loss", "train")


def _section_fields(section: str) -> dict[str, object]:
    cls = {"net": NetConfig, "memory": MemoryConfig, "loss": LossConfig, "train": TrainConfig}[section]
    defaults = cls()
    return {f.name: getattr(defaults, f.name) for f in dataclasses.fields(cls) if f.name != "memory"}


def _coerce(key: str, text: str, default):
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("true", "yes", "on", "1"):
                return True
            if low in ("false", "no", "off", "0"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            value = float(text)
            if value != int(value):
                raise ValueError(text)
            return int(value)
        return float(text)
    except ValueError:
        raise ConfigurationError(f"{key}: cannot parse {text!r} as {type(default).__name__}") from None


def parse_config(text: str) -> ExperimentConfig:
    values: dict[str, dict[str, object]] = {s: {} for s in SECTIONS}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        section, _, name = key.partition(".")
        if section not in SECTIONS or name not in _section_fields(section):
            raise ConfigurationError(f"line {lineno}: unknown key {key!r}")
        if name in values[section]:
            raise ConfigurationError(f"line {lineno}: duplicate key {key!r}")
        values[section][name] = _coerce(key, value, _section_fields(section)[name])

    train = TrainConfig(**values["train"])
    base = values["net"].get("base_channels", NetConfig().base_channels)
    memory = MemoryConfig(**{"C": base, **values["memory"]})
    net_values = dict(values["net"])
    net_values.setdefault("use_memory", train.enable_memory)
    loss_values = dict(values["loss"])
    loss_values.setdefault("enable_memory", train.enable_memory)
    loss_values.setdefault("enable_contrast", train.enable_contrast)
    return ExperimentConfig(NetConfig(memory=memory, **net_values), LossConfig(**loss_values), train)


def load_config(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def config_items(cfg: ExperimentConfig) -> list[tuple[str, object]]:
    """Every field as ``(section.field, value)`` in a fixed order."""
    objects = {"net": cfg.net, "memory": cfg.net.memory, "loss": cfg.loss, "train": cfg.train}
    return [
        (f"{section}.{name}", getattr(objects[section], name))
        for section in SECTIONS
        for name in _section_fields(section)
    ]


def format_config(cfg: ExperimentConfig) -> str:
    def fmt(v):
        return ("true" if v else "false") if isinstance(v, bool) else repr(v)

    return "".join(f"{key} = {fmt(value)}\n" for key, value in config_items(cfg))


def config_from_items(items: dict[str, float]) -> ExperimentConfig:
    """Inverse of :func:`config_items` for numerically stored values."""
    text = []
    for section in SECTIONS:
        for name, default in _section_fields(section).items():
            key = f"{section}.{name}"
            if key not in items:
                raise ConfigurationError(f"missing config entry {key}")
            v = items[key]
            if isinstance(default, bool):
                v = "true" if v else "false"
            elif isinstance(default, int):
                v = str(int(v))
            else:
                v = repr(float(v))
            text.append(f"{key} = {v}")
    return parse_config("\n".join(text))
