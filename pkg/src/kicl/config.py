"""Run configuration: nested dataclasses, JSON/YAML round-trip, hashing, presets."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path

import yaml

from .baselines import METHODS, MethodSpec
from .discourse import DiscourseParams
from .errors import ConfigError, KiclError
from .marketdata import MIN_SYNTH_DAYS, RegimeParams
from .policy import HARD_SCOPES, KiclConfig
from .portfolio import PortfolioConfig
from .replay import BehaviorConfig

# Events per ticker per quarter per KOL; tuned so roughly 1 row in 27 carries an
# active anchor under the default decay.
DEFAULT_INTENSITY = 0.45


@dataclass
class MarketConfig:
    synth: bool = True
    csv: str | None = None
    n_tickers: int = 10
    n_days: int = 756
    regime: RegimeParams = field(default_factory=RegimeParams)


@dataclass
class DiscourseConfig:
    synth: bool = True
    csv: str | None = None
    intensity: float = DEFAULT_INTENSITY
    params: DiscourseParams = field(default_factory=DiscourseParams)


@dataclass
class EvalConfig:
    split_ratios: tuple = (0.6, 0.2, 0.2)
    horizon_cap: int = 20
    tau_act: float | None = None
    splits: tuple = ("val", "test")


@dataclass
class AblationConfig:
    hard_scopes: tuple = HARD_SCOPES
    fixture: str | None = None  # "adversarial" swaps in the reversal-rewarding replay


@dataclass
class RunConfig:
    seed: int = 0
    market: MarketConfig = field(default_factory=MarketConfig)
    discourse: DiscourseConfig = field(default_factory=DiscourseConfig)
    behavior: BehaviorConfig = field(default_factory=BehaviorConfig)
    portfolio: PortfolioConfig = field(default_factory=PortfolioConfig)
    kicl: KiclConfig = field(default_factory=KiclConfig)
    methods: list = field(default_factory=lambda: list(METHODS))
    method_constants: dict = field(default_factory=dict)
    eval: EvalConfig = field(default_factory=EvalConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    output_dir: str = "runs/default"

    def validate(self) -> "RunConfig":
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError("seed must be a non-negative integer")
        m = self.market
        if m.synth and (m.n_tickers < 1 or m.n_days < MIN_SYNTH_DAYS):
            raise ConfigError(f"market needs n_tickers >= 1 and n_days >= {MIN_SYNTH_DAYS}")
        if not m.synth and not m.csv:
            raise ConfigError("market.csv is required when market.synth is false")
        d = self.discourse
        if d.synth and d.intensity <= 0:
            raise ConfigError("discourse.intensity must be > 0")
        if not d.synth and not d.csv:
            raise ConfigError("discourse.csv is required when discourse.synth is false")
        if not self.methods:
            raise ConfigError("method list is empty")
        for name in self.methods:
            if name not in METHODS:
                raise ConfigError(f"unknown method {name!r}")
        for name in self.method_constants:
            if name not in METHODS:
                raise ConfigError(f"method_constants for unknown method {name!r}")
        self.method_specs()
        if len(self.eval.split_ratios) != 3 or min(self.eval.split_ratios) <= 0:
            raise ConfigError("split_ratios must be three positive numbers")
        if self.eval.horizon_cap < 1:
            raise ConfigError("horizon_cap must be >= 1")
        for s in self.eval.splits:
            if s not in ("train", "val", "test"):
                raise ConfigError(f"unknown split {s!r}")
        for s in self.ablation.hard_scopes:
            if s not in HARD_SCOPES:
                raise ConfigError(f"unknown hard scope {s!r}")
        if self.ablation.fixture not in (None, "adversarial"):
            raise ConfigError(f"unknown ablation fixture {self.ablation.fixture!r}")
        self.kicl.validate()
        if self.kicl.tau_entry != self.portfolio.tau_entry:
            raise ConfigError("kicl.tau_entry and portfolio.tau_entry must agree")
        return self

    def method_specs(self) -> list[MethodSpec]:
        out = []
        for name in self.methods:
            raw = dict(self.method_constants.get(name, {}))
            kw = {k: raw.pop(k) for k in ("steps", "batch", "lr") if k in raw}
            out.append(MethodSpec(name, constants=raw, **kw))
        return out

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    def hash(self, exclude=("output_dir",)) -> str:
        d = self.to_dict()
        for k in exclude:
            d.pop(k, None)
        return canonical_hash(d)


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


def canonical_hash(obj) -> str:
    blob = json.dumps(_plain(obj), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def _build(cls, data, path="config"):
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping")
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
    proto = cls()
    kw = {}
    for name, value in data.items():
        current = getattr(proto, name)
        if is_dataclass(current):
            kw[name] = _build(type(current), value, f"{path}.{name}")
        elif isinstance(current, tuple) and isinstance(value, list):
            kw[name] = tuple(value)
        elif isinstance(current, float) and isinstance(value, int) and not isinstance(value, bool):
            kw[name] = float(value)
        else:
            kw[name] = value
    try:
        return cls(**kw)
    except ConfigError:
        raise
    except (KiclError, TypeError, ValueError) as e:
        raise ConfigError(f"{path}: {e}") from e


def from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data).validate()


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text(encoding="utf-8")
    try:
        data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as e:
        raise ConfigError(f"{path}: {e}") from e
    return from_dict(data or {})


def dump_config(cfg: RunConfig, path) -> None:
    path = Path(path)
    d = cfg.to_dict()
    if path.suffix == ".json":
        path.write_text(json.dumps(d, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    else:
        path.write_text(yaml.safe_dump(d, sort_keys=True), encoding="utf-8")


def preset(name: str) -> RunConfig:
    """``full``: default hyperparameters and a long RL budget. ``desk``: same data,
    short RL budget.
    ``tiny``: small world for smoke tests and seed sweeps."""
    if name == "full":
        return RunConfig().validate()
    if name == "desk":
        cfg = RunConfig()
        cfg.kicl = replace(cfg.kicl, iql_steps=2000)
        return cfg.validate()
    if name == "tiny":
        cfg = RunConfig()
        cfg.market = replace(cfg.market, n_tickers=4, n_days=160)
        cfg.discourse = replace(cfg.discourse, intensity=2.0,
                                params=replace(cfg.discourse.params, n_kols=2))
        cfg.kicl = replace(cfg.kicl, iql_steps=40, bc_epochs=2, batch=64, hidden=(16, 16),
                           log_interval=10)
        return cfg.validate()
    raise ConfigError(f"unknown preset {name!r}; expected full, desk or tiny")
