"""Residual policy around the discourse anchor: model, action composition,
hard directional projection, deviation barrier, and decoding."""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import ConfigError, InputError, ShapeError
from .neural import MlpParams, forward, init_mlp, load_checkpoint, save_checkpoint
from .portfolio import PortfolioConfig, alloc
from .replay import ReplayBuffer, StateLayout
from .seeding import substream

HARD_SCOPES = ("both", "train_only", "infer_only", "none")
SIGNAL_HEAD, DECAY_HEAD = 0, 1


@dataclass
class KiclConfig:
    gamma: float = 0.99
    expectile: float = 0.7
    beta: float = 3.0
    lambda_fid: float = 0.03
    actor_align: float = 0.04
    lambda_ent: float = 0.02
    lambda_rev: float = 0.05
    anchor_w: float = 0.03
    tau_entry: float = 5e-4
    delta_clamp: float = 1.8
    bc_epochs: int = 10
    iql_steps: int = 100_000
    batch: int = 256
    lr_actor: float = 3e-4
    lr_critic: float = 3e-4
    lr_value: float = 3e-4
    hard_scope: str = "both"
    regime_split: bool = True
    use_market_factors: bool = True
    hidden: tuple = (64, 64, 32)
    target_rate: float = 0.005
    adv_clip: float = 20.0
    log_interval: int = 200

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        self.validate()

    def validate(self) -> None:
        if not 0.0 < self.expectile < 1.0:
            raise ConfigError("expectile must be in (0, 1)")
        if self.hard_scope not in HARD_SCOPES:
            raise ConfigError(f"hard_scope must be one of {HARD_SCOPES}")
        for name in ("lambda_fid", "actor_align", "lambda_ent", "lambda_rev", "anchor_w",
                     "tau_entry", "beta"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError("gamma must be in [0, 1]")
        if self.delta_clamp <= 0 or self.batch < 1 or self.log_interval < 1:
            raise ConfigError("delta_clamp, batch and log_interval must be positive")
        if self.bc_epochs < 0 or self.iql_steps < 0:
            raise ConfigError("bc_epochs and iql_steps must be >= 0")
        if not self.hidden or min(self.hidden) < 1:
            raise ConfigError("hidden sizes must be positive")

    def stripped(self, **overrides) -> "KiclConfig":
        """All penalty weights zero, no projection, single head."""
        kw = asdict(self)
        kw.update(lambda_fid=0.0, actor_align=0.0, lambda_ent=0.0, lambda_rev=0.0,
                  anchor_w=0.0, hard_scope="none", regime_split=False)
        kw.update(overrides)
        return KiclConfig(**kw)

    @classmethod
    def from_dict(cls, d: dict) -> "KiclConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown kicl keys: {sorted(extra)}")
        return cls(**d)


def trains_projected(scope: str) -> bool:
    return scope in ("both", "train_only")


def infers_projected(scope: str) -> bool:
    return scope in ("both", "infer_only")


@dataclass
class Normalizer:
    mean: np.ndarray
    std: np.ndarray
    mask: np.ndarray  # 1.0 keeps a dim, 0.0 zeroes it

    @classmethod
    def fit(cls, states: np.ndarray, layout: StateLayout, use_market_factors=True):
        mean = states.mean(axis=0)
        std = states.std(axis=0)
        std = np.where(std > 1e-8, std, 1.0)
        mask = np.ones(states.shape[1])
        if not use_market_factors:
            mask[layout.mkt] = 0.0
        return cls(mean, std, mask)

    def __call__(self, states):
        return (np.asarray(states, float) - self.mean) / self.std * self.mask


@dataclass
class KiclModel:
    """Actor: (s, a_base) -> delta heads. Critic: Q(s, a_base, delta).
    Value: V(s, a_base)."""

    config: KiclConfig
    layout: StateLayout
    norm: Normalizer
    actor: MlpParams
    critic: MlpParams
    value: MlpParams
    target_critic: MlpParams
    meta: dict = field(default_factory=dict)

    @property
    def state_dim(self) -> int:
        return self.layout.dim

    @property
    def n_heads(self) -> int:
        return self.actor.out_dim

    def actor_input(self, states, a_base):
        return np.column_stack([self.norm(states), np.asarray(a_base, float)])

    def critic_input(self, states, a_base, delta):
        return np.column_stack([self.norm(states), np.asarray(a_base, float),
                                np.asarray(delta, float)])

    def value_input(self, states, a_base):
        return self.actor_input(states, a_base)

    def nets(self) -> dict:
        return {"actor": self.actor, "critic": self.critic, "value": self.value,
                "target_critic": self.target_critic}

    def save(self, path) -> None:
        meta = {"config": {**asdict(self.config), "hidden": list(self.config.hidden)},
                "layout": [self.layout.d_text, self.layout.d_ticker],
                "norm_mean": self.norm.mean.tolist(), "norm_std": self.norm.std.tolist(),
                "norm_mask": self.norm.mask.tolist(), **self.meta}
        save_checkpoint(path, self.nets(), meta)

    @classmethod
    def load(cls, path) -> "KiclModel":
        ck = load_checkpoint(path)
        meta = dict(ck.meta)
        cfg = KiclConfig.from_dict(meta.pop("config"))
        layout = StateLayout(*meta.pop("layout"))
        norm = Normalizer(np.array(meta.pop("norm_mean")), np.array(meta.pop("norm_std")),
                          np.array(meta.pop("norm_mask")))
        n = ck.nets
        return cls(cfg, layout, norm, n["actor"], n["critic"], n["value"], n["target_critic"],
                   meta)


def init_model(config: KiclConfig, layout: StateLayout, train_states, seed: int,
               zero_actor: bool = False) -> KiclModel:
    rng = substream(seed, "init")
    d = layout.dim
    h = list(config.hidden)
    heads = 2 if config.regime_split else 1
    actor = init_mlp([d + 1, *h, heads], rng, head="tanh", out_scale=config.delta_clamp,
                     zero_output=zero_actor)
    critic = init_mlp([d + 2, *h, 1], rng)
    value = init_mlp([d + 1, *h, 1], rng)
    norm = Normalizer.fit(np.asarray(train_states, float), layout, config.use_market_factors)
    return KiclModel(config, layout, norm, actor, critic, value, critic.copy())


def signal_mask(a_base, tau_entry: float) -> np.ndarray:
    return np.abs(np.asarray(a_base, float)) >= tau_entry


def head_index(fresh, regime_split: bool) -> np.ndarray:
    """Signal head on fresh-event rows, decay head otherwise."""
    fresh = np.asarray(fresh, bool)
    if not regime_split:
        return np.zeros(fresh.shape, dtype=np.int64)
    return np.where(fresh, SIGNAL_HEAD, DECAY_HEAD)


def propose_delta(model: KiclModel, states, a_base, m_t):
    states = np.atleast_2d(np.asarray(states, float))
    if states.shape[1] != model.state_dim:
        raise ShapeError(f"state dim {states.shape[1]} != {model.state_dim}")
    a_base = np.atleast_1d(np.asarray(a_base, float))
    out, _ = forward(model.actor, model.actor_input(states, a_base))
    idx = head_index(np.broadcast_to(m_t, a_base.shape), model.config.regime_split)
    delta = out[np.arange(len(idx)), idx]
    return np.clip(delta, -model.config.delta_clamp, model.config.delta_clamp)


def anchor_offset(a_base, tau_entry: float):
    """The part of the anchor a residual is added to: a_base on signal steps, 0 in silence."""
    a_base = np.asarray(a_base, float)
    return np.where(signal_mask(a_base, tau_entry), a_base, 0.0)


def compose_action(a_base, delta, tau_entry: float = 5e-4):
    out = anchor_offset(a_base, tau_entry) + np.asarray(delta, float)
    return float(out) if np.ndim(out) == 0 else out


def hard_project(a, a_base, p_prev, tau_entry: float = 5e-4):
    """Map a proposed action into the admissible directional set.

    Signal steps keep ``a`` unless it opposes the anchor (then 0). Silent steps
    with no carried position go flat; with a carried position, an opposing
    action goes flat and an aligned one is capped at the carried size.
    """
    a = np.asarray(a, float)
    b = np.asarray(a_base, float)
    p = np.asarray(p_prev, float)
    sig = np.abs(b) >= tau_entry
    on_sig = np.where(a * np.sign(b) < 0.0, 0.0, a)
    hold = np.where(a * np.sign(p) < 0.0, 0.0, np.minimum(np.abs(a), np.abs(p)) * np.sign(p))
    on_sil = np.where(p == 0.0, 0.0, hold)
    out = np.where(sig, on_sig, on_sil)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class Lambdas:
    fid: float = 0.0
    rev: float = 0.0
    ent: float = 0.0


def deviation_barrier(a, a_base, lambdas: Lambdas, tau_entry: float = 5e-4) -> float:
    a, b = float(a), float(a_base)
    if abs(b) >= tau_entry:
        return lambdas.fid * abs(a - b) + lambdas.rev * max(0.0, -a * math.copysign(1.0, b))
    return lambdas.ent * max(0.0, abs(a) - tau_entry)


def barrier_admits(q_dev: float, q_base: float, a, a_base, lambdas: Lambdas,
                   tau_entry: float = 5e-4) -> bool:
    """True when the Q gain of deviating beats the penalty-weighted distance."""
    return (q_dev - q_base) > deviation_barrier(a, a_base, lambdas, tau_entry)


# --- decoding --------------------------------------------------------------------


@dataclass
class DecodeResult:
    """Per-row decoded stream aligned with the source buffer order."""

    raw: np.ndarray  # composed / proposed action before projection
    projected: np.ndarray  # after optional projection
    weights: np.ndarray  # after alloc
    a_base: np.ndarray
    p_prev: np.ndarray  # executed weight carried into each row
    fresh: np.ndarray
    ret_next: np.ndarray
    contrib: np.ndarray
    tickers: np.ndarray
    kol_ids: np.ndarray
    trading_days: np.ndarray

    def __len__(self):
        return len(self.weights)


def execute(buffer: ReplayBuffer, propose, project: bool, pcfg: PortfolioConfig) -> DecodeResult:
    """Shared executor. ``propose(rows, p_prev)`` returns raw actions for a
    block of same-(kol, day) rows given the carried positions.

    The carried position for the projection is the previous executed weight
    while the anchor is active and 0 once it has expired, so a position closes
    with its anchor.
    """
    n = len(buffer)
    raw = np.zeros(n)
    proj = np.zeros(n)
    wts = np.zeros(n)
    pprev = np.zeros(n)
    contrib = np.zeros(n)
    tau = buffer.tau_entry
    order = np.lexsort((buffer.tickers.astype(str), buffer.trading_days,
                        buffer.kol_ids.astype(str)))
    keys = list(zip(buffer.kol_ids[order], buffer.trading_days[order]))
    held: dict = {}
    start = 0
    while start < n:
        end = start
        while end < n and keys[end] == keys[start]:
            end += 1
        rows = order[start:end]
        kol = keys[start][0]
        book = held.setdefault(kol, {})
        carried = np.array([book.get(str(buffer.tickers[i]), 0.0) for i in rows])
        base = buffer.baseline_actions[rows]
        p_eff = np.where(np.abs(base) >= tau, carried, 0.0)
        a = np.asarray(propose(rows, p_eff), float).reshape(-1)
        raw[rows] = a
        p = hard_project(a, base, p_eff, tau) if project else a
        p = np.atleast_1d(p)
        proj[rows] = p
        state = alloc({str(buffer.tickers[i]): float(v) for i, v in zip(rows, p)}, None, pcfg)
        w = np.array([state.get(str(buffer.tickers[i])) for i in rows])
        wts[rows] = w
        pprev[rows] = carried
        contrib[rows] = w * buffer.ret_next[rows] - pcfg.cost_rate * np.abs(w - carried)
        for i, v in zip(rows, w):
            book[str(buffer.tickers[i])] = float(v)
        start = end
    return DecodeResult(raw, proj, wts, buffer.baseline_actions.copy(), pprev,
                        buffer.fresh.copy(), buffer.ret_next.copy(), contrib,
                        buffer.tickers.copy(), buffer.kol_ids.copy(),
                        buffer.trading_days.copy())


def decode(model: KiclModel, buffer: ReplayBuffer, hard_scope: str | None = None,
           pcfg: PortfolioConfig | None = None) -> DecodeResult:
    """propose_delta -> compose_action -> optional hard_project -> alloc."""
    scope = model.config.hard_scope if hard_scope is None else hard_scope
    if scope not in HARD_SCOPES:
        raise ConfigError(f"hard_scope must be one of {HARD_SCOPES}")
    pcfg = pcfg or PortfolioConfig(tau_entry=buffer.tau_entry)
    delta = propose_delta(model, buffer.states, buffer.baseline_actions, buffer.fresh) \
        if len(buffer) else np.zeros(0)
    composed = compose_action(buffer.baseline_actions, delta, buffer.tau_entry)
    composed = np.atleast_1d(composed)
    return execute(buffer, lambda rows, p: composed[rows], infers_projected(scope), pcfg)


def write_decode_csv(path, result: DecodeResult) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["kol_id", "ticker", "trading_day", "m_t", "a_base", "p_prev", "a_raw",
                    "a_projected", "weight", "ret_next", "contrib"])
        order = np.lexsort((result.trading_days, result.tickers.astype(str),
                            result.kol_ids.astype(str)))
        for i in order:
            w.writerow([result.kol_ids[i], result.tickers[i], int(result.trading_days[i]),
                        int(result.fresh[i]), repr(float(result.a_base[i])),
                        repr(float(result.p_prev[i])), repr(float(result.raw[i])),
                        repr(float(result.projected[i])), repr(float(result.weights[i])),
                        repr(float(result.ret_next[i])), repr(float(result.contrib[i]))])


def read_decode_csv(path) -> DecodeResult:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise InputError(f"{path}: empty decode file")
    col = lambda k: np.array([float(r[k]) for r in rows])
    return DecodeResult(
        col("a_raw"), col("a_projected"), col("weight"), col("a_base"), col("p_prev"),
        np.array([r["m_t"] == "1" for r in rows]), col("ret_next"), col("contrib"),
        np.array([r["ticker"] for r in rows], dtype=object),
        np.array([r["kol_id"] for r in rows], dtype=object),
        np.array([int(r["trading_day"]) for r in rows], dtype=np.int64),
    )
