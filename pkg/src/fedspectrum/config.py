"""Experiment configuration: a flat ``key = value`` text format.

Network keys (``K``, ``Nc``, ...) and training keys (``regime``, ``alpha``,
...) share one namespace with the experiment keys below.  Missing keys take
the defaults of the selected regime; ``#`` starts a comment.
"""
from __future__ import annotations

import os
import re
from dataclasses import asdict, dataclass, field, fields

from .env import NetworkConfig, RewardMode
from .errors import ConfigError, InvalidParameterError
from .orchestration import TrainConfig

OUT_ENV = "FEDSPECTRUM_OUT"

NET_KEYS = tuple(f.name for f in fields(NetworkConfig))
TRAIN_KEYS = tuple(f.name for f in fields(TrainConfig))
EXP_KEYS = ("seeds", "out", "T_test", "window", "checkpoints")
ALL_KEYS = NET_KEYS + TRAIN_KEYS + EXP_KEYS


def default_out() -> str:
    return os.environ.get(OUT_ENV, "runs")


@dataclass(frozen=True)
class ExperimentConfig:
    net: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    seeds: tuple = (0,)
    out: str = field(default_factory=default_out)
    T_test: int = 1000
    window: int = 5000  # moving-average window of the summary
    checkpoints: bool = True

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if not self.seeds:
            raise InvalidParameterError("seeds must not be empty")
        if len(set(self.seeds)) != len(self.seeds):
            raise InvalidParameterError("seeds must be distinct")
        if any(s < 0 for s in self.seeds):
            raise InvalidParameterError("seeds must be >= 0")
        if self.T_test < 1:
            raise InvalidParameterError("T_test must be >= 1")
        if not 1 <= self.window <= self.train.T_max:
            raise InvalidParameterError("window must lie in [1, T_max]")
        if self.train.regime == "fdrl" and self.train.G > self.net.K:
            raise InvalidParameterError("G must not exceed K")

    @property
    def benchmark(self) -> bool:
        return self.train.benchmark

    def with_(self, **changes) -> "ExperimentConfig":
        """Copy with flat key overrides, e.g. ``with_(K=4, alpha=0.003)``."""
        return build_config({**flatten(self), **changes})


# ---------------------------------------------------------------- values

_BOOLS = {"true": True, "yes": True, "on": True, "1": True,
          "false": False, "no": False, "off": False, "0": False}


def _defaults(regime):
    return {**asdict(NetworkConfig()), **asdict(TrainConfig.defaults(regime)),
            **{k: getattr(ExperimentConfig, k, None) for k in EXP_KEYS if k not in ("out",)}}


def _convert(key, text, template):
    if key == "seeds":
        parts = [p for p in re.split(r"[,\s]+", text) if p]
        return tuple(int(p) for p in parts)
    if isinstance(template, bool):
        try:
            return _BOOLS[text.lower()]
        except KeyError:
            raise ValueError(f"expected a boolean, got {text!r}") from None
    if isinstance(template, RewardMode):
        return RewardMode(text.lower())
    if isinstance(template, int):
        return int(text)
    if isinstance(template, float):
        return float(text)
    return text


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, RewardMode):
        return value.value
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    return str(value)


def flatten(config: ExperimentConfig) -> dict:
    out = {**asdict(config.net), **asdict(config.train)}
    out.update({k: getattr(config, k) for k in EXP_KEYS})
    return out


def _blame(message: str):
    """Key named in a component validation message (earliest mention wins)."""
    hits = []
    for key in ALL_KEYS:
        # "out" doubles as an English word, so require it in "key=" form
        pattern = r"(?<![\w.])out=" if key == "out" else rf"(?<![\w.]){re.escape(key)}(?!\w)"
        m = re.search(pattern, message)
        if m:
            hits.append((m.start(), -len(key), key))
    return min(hits)[2] if hits else None


def build_config(values: dict) -> ExperimentConfig:
    """Construct from flat values; missing keys take the regime's defaults."""
    unknown = sorted(set(values) - set(ALL_KEYS))
    if unknown:
        raise ConfigError(f"unknown key {unknown[0]!r}", key=unknown[0])
    regime = values.get("regime", "cdrl")
    base = TrainConfig.defaults(regime) if regime in ("cdrl", "ddrl", "fdrl") else TrainConfig()
    train_kw = {**asdict(base), **{k: values[k] for k in TRAIN_KEYS if k in values}}
    try:
        net = NetworkConfig(**{k: values[k] for k in NET_KEYS if k in values})
        train = TrainConfig(**train_kw)
        return ExperimentConfig(net, train, **{k: values[k] for k in EXP_KEYS if k in values})
    except (InvalidParameterError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        key = _blame(str(exc))
        raise ConfigError(f"invalid value for {key or 'config'}: {exc}", key=key) from exc


def parse_config(text: str, regime: str | None = None) -> ExperimentConfig:
    """Parse ``key = value`` lines.  ``regime`` is used when the text does not set one."""
    raw: dict[str, tuple[str, int]] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = (part.strip() for part in line.partition("="))
        if not sep or not key or not re.fullmatch(r"[A-Za-z_]\w*", key):
            raise ConfigError("expected 'key = value'", line=lineno)
        if not value:
            raise ConfigError(f"missing value for {key!r}", line=lineno, key=key)
        if key not in ALL_KEYS:
            raise ConfigError(f"unknown key {key!r}", line=lineno, key=key)
        if key in raw:
            raise ConfigError(f"duplicate key {key!r}", line=lineno, key=key)
        raw[key] = (value, lineno)
    if regime is not None and "regime" not in raw:
        raw["regime"] = (regime.lower(), 0)
    chosen = raw.get("regime", ("cdrl", 0))[0].lower()
    defaults = _defaults(chosen if chosen in ("cdrl", "ddrl", "fdrl") else "cdrl")
    values = {}
    for key, (text_value, lineno) in raw.items():
        try:
            values[key] = _convert(key, text_value, defaults.get(key))
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r}: {exc}", line=lineno, key=key) from None
    try:
        return build_config(values)
    except ConfigError as exc:
        if exc.key in raw and exc.line is None:
            raise ConfigError(str(exc), line=raw[exc.key][1] or None, key=exc.key) from exc
        raise


def render(config: ExperimentConfig) -> str:
    """Complete text form; ``parse_config(render(c)) == c``."""
    flat = flatten(config)
    lines = [f"regime = {flat.pop('regime')}"]
    lines += ["", "# network"] + [f"{k} = {_format(flat[k])}" for k in NET_KEYS]
    lines += ["", "# training"] + [f"{k} = {_format(flat[k])}" for k in TRAIN_KEYS
                                   if k != "regime"]
    lines += ["", "# experiment"] + [f"{k} = {_format(flat[k])}" for k in EXP_KEYS]
    return "\n".join(lines) + "\n"


def load_config(path, regime: str | None = None) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read(), regime)
