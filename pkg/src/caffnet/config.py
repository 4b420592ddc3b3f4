"""Run configuration files.

A run config is a YAML mapping. Every key is optional and unknown keys are
errors, reported with the line they appear on. The schema, with defaults::

    scenario: null              # path to a scenario file; null = shipped single integrator
    method: caffnet_lite        # qp | od_qp | nn_penalty | caffnet | caffnet_lite
    alpha:
      kind: learned             # fixed | learned
      omega: 1.0                # fixed gain, or base gain under the learned multiplier
      softplus: true            # learned multiplier passed through softplus
    sweep: []                   # optional list of {method, alpha}; replaces method/alpha
    seeds: [0, 1, 2, 3, 4]
    epochs: 2000
    out: runs/default
    norm_p: 2.0
    tolerances:
      feas: 1.0e-9              # candidate feasibility test
      pinv_rtol: 1.0e-10        # relative singular-value cutoff
      tie: 1.0e-12              # distance tie window
      violation: 1.0e-8         # residual above which a sample counts as violating
    data:
      n_samples: 500            # training states (cost is measured on these)
      n_test: 500               # held-out states (violations are measured on these)
      data_seed: 0
      test_seed: 1
    training:
      lr: 1.0e-4
      penalty_weight: 100.0
      alpha_init_gain: 1.0
      controller_hidden: [200, 200, 200]
      null_hidden: [64, 64, 64]
      alpha_hidden: [64, 64, 64]
    od_qp:
      p_omega: 1.0
      shared: true
      penalty: rate             # rate | multiplier
    rollout:
      n_starts: 20
      start_seed: 123
"""

from __future__ import annotations

import dataclasses
import math
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from ._yamlutil import line_index, line_of, yaml_error_line
from .affine import SelectorConfig

__all__ = [
    "ConfigError",
    "AlphaConfig",
    "MethodEntry",
    "RunConfig",
    "METHODS",
    "load_config",
    "parse_config",
    "dump_config",
]

METHODS = ("qp", "od_qp", "nn_penalty", "caffnet", "caffnet_lite")
FILTER_METHODS = ("qp", "od_qp")


class ConfigError(ValueError):
    """Invalid run configuration; ``line`` is 1-based when known."""

    def __init__(self, message, line=None, source=None, path=None):
        self.message = message
        self.line = line
        self.source = source
        self.path = tuple(path) if path is not None else None
        where = ""
        if source is not None:
            where = f"{source}:" + (f"{line}:" if line is not None else "") + " "
        elif line is not None:
            where = f"line {line}: "
        super().__init__(where + message)


@dataclass
class AlphaConfig:
    kind: str = "learned"
    omega: float = 1.0
    softplus: bool = True


@dataclass
class MethodEntry:
    method: str = "caffnet_lite"
    alpha: AlphaConfig = field(default_factory=AlphaConfig)

    @property
    def label(self):
        if self.alpha.kind == "fixed":
            return f"{self.method}_w{self.alpha.omega:g}"
        return f"{self.method}_learned"

    @property
    def trained(self):
        return self.method not in FILTER_METHODS


@dataclass
class Tolerances:
    feas: float = 1e-9
    pinv_rtol: float = 1e-10
    tie: float = 1e-12
    violation: float = 1e-8


@dataclass
class DataConfig:
    n_samples: int = 500
    n_test: int = 500
    data_seed: int = 0
    test_seed: int = 1


@dataclass
class TrainingConfig:
    lr: float = 1e-4
    penalty_weight: float = 100.0
    alpha_init_gain: float = 1.0
    controller_hidden: tuple = (200, 200, 200)
    null_hidden: tuple = (64, 64, 64)
    alpha_hidden: tuple = (64, 64, 64)


@dataclass
class OdQpConfig:
    p_omega: float = 1.0
    shared: bool = True
    penalty: str = "rate"


@dataclass
class RolloutConfig:
    n_starts: int = 20
    start_seed: int = 123


@dataclass
class RunConfig:
    scenario: typing.Optional[str] = None
    method: str = "caffnet_lite"
    alpha: AlphaConfig = field(default_factory=AlphaConfig)
    sweep: list = field(default_factory=list)
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    epochs: int = 2000
    out: str = "runs/default"
    norm_p: float = 2.0
    tolerances: Tolerances = field(default_factory=Tolerances)
    data: DataConfig = field(default_factory=DataConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    od_qp: OdQpConfig = field(default_factory=OdQpConfig)
    rollout: RolloutConfig = field(default_factory=RolloutConfig)

    def entries(self) -> list[MethodEntry]:
        return list(self.sweep) if self.sweep else [MethodEntry(self.method, self.alpha)]

    @property
    def selector(self) -> SelectorConfig:
        t = self.tolerances
        return SelectorConfig(norm_p=self.norm_p, feas_tol=t.feas, pinv_rtol=t.pinv_rtol,
                              tie_tol=t.tie)

    def validate(self):
        """Check cross-field invariants; raises :class:`ConfigError` with a key path."""
        if not self.seeds:
            raise ConfigError("seeds must be a nonempty list", path=("seeds",))
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be distinct", path=("seeds",))
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1", path=("epochs",))
        if not (self.norm_p >= 1):
            raise ConfigError("norm_p must be >= 1", path=("norm_p",))
        if self.training.penalty_weight < 0:
            raise ConfigError("penalty_weight must be >= 0", path=("training", "penalty_weight"))
        if self.training.lr <= 0:
            raise ConfigError("lr must be positive", path=("training", "lr"))
        for name in ("n_samples", "n_test"):
            if getattr(self.data, name) < 1:
                raise ConfigError(f"{name} must be >= 1", path=("data", name))
        if self.rollout.n_starts < 0:
            raise ConfigError("n_starts must be >= 0", path=("rollout", "n_starts"))
        if self.od_qp.penalty not in ("rate", "multiplier"):
            raise ConfigError("penalty must be 'rate' or 'multiplier'", path=("od_qp", "penalty"))
        if self.od_qp.p_omega <= 0:
            raise ConfigError("p_omega must be positive", path=("od_qp", "p_omega"))
        for key, val in dataclasses.asdict(self.tolerances).items():
            if not val > 0:
                raise ConfigError(f"{key} must be positive", path=("tolerances", key))
        entries = [(("sweep", i), e) for i, e in enumerate(self.sweep)]
        if not entries:
            entries = [((), MethodEntry(self.method, self.alpha))]
        labels = set()
        for prefix, e in entries:
            if e.method not in METHODS:
                raise ConfigError(f"unknown method {e.method!r}; expected one of {', '.join(METHODS)}",
                                  path=prefix + ("method",))
            if e.alpha.kind not in ("fixed", "learned"):
                raise ConfigError(f"alpha kind must be 'fixed' or 'learned', not {e.alpha.kind!r}",
                                  path=prefix + ("alpha", "kind"))
            if e.method in FILTER_METHODS and e.alpha.kind != "fixed":
                raise ConfigError(f"{e.method} needs a fixed alpha (alpha.kind: fixed)",
                                  path=prefix + ("method",))
            if not (e.alpha.omega > 0 and math.isfinite(e.alpha.omega)):
                raise ConfigError("omega must be positive and finite", path=prefix + ("alpha", "omega"))
            if e.label in labels:
                raise ConfigError(f"duplicate sweep entry {e.label}", path=prefix)
            labels.add(e.label)
        return self


# --------------------------------------------------------------- conversion


def _convert(tp, value, path):
    origin = typing.get_origin(tp)
    if dataclasses.is_dataclass(tp):
        return _from_mapping(tp, value, path)
    if origin is typing.Union:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        return None if value is None else _convert(args[0], value, path)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"expected true/false, got {value!r}", path=path)
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"expected an integer, got {value!r}", path=path)
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"expected a number, got {value!r}", path=path)
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"expected a string, got {value!r}", path=path)
        return value
    raise TypeError(f"unsupported config type {tp}")


def _list_of(item_tp, value, path, container=list):
    if not isinstance(value, list):
        raise ConfigError(f"expected a list, got {value!r}", path=path)
    return container(_convert(item_tp, v, path + (i,)) for i, v in enumerate(value))


# element types for the untyped list/tuple fields
_ITEM_TYPES = {
    (RunConfig, "sweep"): (MethodEntry, list),
    (RunConfig, "seeds"): (int, list),
    (TrainingConfig, "controller_hidden"): (int, tuple),
    (TrainingConfig, "null_hidden"): (int, tuple),
    (TrainingConfig, "alpha_hidden"): (int, tuple),
}


def _from_mapping(cls, value, path):
    if value is None:
        value = {}
    if not isinstance(value, dict):
        raise ConfigError(f"expected a mapping, got {value!r}", path=path)
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in value:
        if key not in names:
            raise ConfigError(f"unknown key {key!r} (allowed: {', '.join(sorted(names))})",
                              path=path + (key,))
    kwargs = {}
    for name in names & set(value):
        item = _ITEM_TYPES.get((cls, name))
        if item is not None:
            kwargs[name] = _list_of(item[0], value[name], path + (name,), item[1])
        else:
            kwargs[name] = _convert(hints[name], value[name], path + (name,))
    return cls(**kwargs)


def _resolve(err: ConfigError, lines, source):
    """Attach the line of the deepest known prefix of ``err.path``."""
    path = err.path or ()
    line = line_of(lines, path) or err.line
    msg = err.message
    if path:
        msg = ".".join(str(p) for p in path) + ": " + msg
    return ConfigError(msg, line, source, path)


def parse_config(text: str, source=None) -> RunConfig:
    """Parse and validate config text; errors carry the offending line."""
    try:
        node = yaml.compose(text)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML: {getattr(exc, 'problem', exc)}",
                          yaml_error_line(exc), source) from None
    lines = line_index(node) if node is not None else {}
    try:
        return _from_mapping(RunConfig, data, ()).validate()
    except ConfigError as err:
        raise _resolve(err, lines, source) from None


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", source=str(path)) from None
    return parse_config(text, source=str(path))


def _plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def dump_config(cfg: RunConfig) -> str:
    """Serialize so that ``parse_config(dump_config(c)) == c``."""
    return yaml.safe_dump(_plain(cfg), sort_keys=False)
