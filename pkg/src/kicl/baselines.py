"""Comparison methods on the shared replay/decode/metrics stack."""
from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, field, replace
import numpy as np

from . import losses as L
from .errors import ConfigError, InputError, TrainingDivergence
from .neural import (MlpParams, adam_init, adam_step, backward, forward, init_mlp,
                     load_checkpoint, save_checkpoint, soft_update)
from .policy import (DecodeResult, KiclConfig, KiclModel, Normalizer, decode, execute,
                     init_model)
from .portfolio import PortfolioConfig
from .replay import ReplayBuffer, StateLayout
from .seeding import substream
from .training import TrainLog, bc_pretrain, train_kicl

METHODS = ("RMB", "HAP", "BC", "SUP-DELTA", "IQL", "AWAC", "CQL", "TD3+BC", "KICL")
FULL_ACTION = ("AWAC", "CQL", "TD3+BC")

DEFAULT_CONSTANTS = {
    "HAP": {"hold_days": 10, "size": 0.1},
    "AWAC": {"beta": 1.0, "max_weight": 20.0},
    "CQL": {"alpha": 1.0, "temperature": 1.0, "n_samples": 10},
    "TD3+BC": {"alpha": 2.5, "policy_noise": 0.2, "noise_clip": 0.5, "policy_delay": 2},
}


@dataclass
class MethodSpec:
    method: str
    steps: int | None = None  # None: use the shared KICL step budget
    batch: int | None = None
    lr: float | None = None
    constants: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; expected one of {METHODS}")
        merged = dict(DEFAULT_CONSTANTS.get(self.method, {}))
        unknown = set(self.constants) - set(merged)
        if unknown:
            raise ConfigError(f"{self.method}: unknown constants {sorted(unknown)}")
        merged.update(self.constants)
        self.constants = merged

    @property
    def trains(self) -> bool:
        return self.method not in ("RMB", "HAP")


def load_methods_cfg(path) -> list[MethodSpec]:
    """INI file: ``[methods] run = RMB, KICL, ...`` plus optional per-method
    sections with ``steps``, ``batch``, ``lr`` and method constants."""
    cp = configparser.ConfigParser()
    cp.optionxform = str
    if not cp.read(path, encoding="utf-8"):
        raise ConfigError(f"methods file not found: {path}")
    if not cp.has_option("methods", "run"):
        raise ConfigError(f"{path}: missing [methods] run")
    out = []
    for name in [m.strip() for m in cp.get("methods", "run").split(",") if m.strip()]:
        kw, consts = {}, {}
        if cp.has_section(name):
            for k, v in cp.items(name):
                if k in ("steps", "batch"):
                    kw[k] = int(v)
                elif k == "lr":
                    kw[k] = float(v)
                else:
                    consts[k] = float(v)
        out.append(MethodSpec(name, constants=consts, **kw))
    return out


def _with_spec(cfg: KiclConfig, spec: MethodSpec | None) -> KiclConfig:
    if spec is None:
        return cfg
    kw = {}
    if spec.steps is not None:
        kw["iql_steps"] = spec.steps
    if spec.batch is not None:
        kw["batch"] = spec.batch
    if spec.lr is not None:
        kw.update(lr_actor=spec.lr, lr_critic=spec.lr, lr_value=spec.lr)
    return replace(cfg, **kw)


# --- heuristic anchors ---------------------------------------------------------


def run_rmb(buffer: ReplayBuffer, pcfg: PortfolioConfig | None = None) -> DecodeResult:
    """Zero-residual mirror of the anchor through the shared executor."""
    pcfg = pcfg or PortfolioConfig(tau_entry=buffer.tau_entry)
    base = buffer.baseline_actions
    return execute(buffer, lambda rows, p: base[rows], False, pcfg)


def hap_actions(buffer: ReplayBuffer, hold_days: int = 10, size: float = 0.1) -> np.ndarray:
    """On each fresh active signal take sign(base) * size for ``hold_days``
    rows; a later signal restarts the hold in its own direction."""
    if hold_days < 1:
        raise InputError("hold_days must be >= 1")
    out = np.zeros(len(buffer))
    keys = np.lexsort((buffer.trading_days, buffer.tickers.astype(str),
                       buffer.kol_ids.astype(str)))
    prev_key, remaining, pos = None, 0, 0.0
    for i in keys:
        key = (buffer.kol_ids[i], buffer.tickers[i])
        if key != prev_key:
            prev_key, remaining, pos = key, 0, 0.0
        b = buffer.baseline_actions[i]
        if buffer.fresh[i] and abs(b) >= buffer.tau_entry:
            pos, remaining = math.copysign(size, b), hold_days
        if remaining > 0:
            out[i] = pos
            remaining -= 1
    return out


def run_hap(buffer: ReplayBuffer, hold_days: int = 10, size: float = 0.1,
            pcfg: PortfolioConfig | None = None) -> DecodeResult:
    pcfg = pcfg or PortfolioConfig(tau_entry=buffer.tau_entry)
    acts = hap_actions(buffer, hold_days, size)
    return execute(buffer, lambda rows, p: acts[rows], False, pcfg)


# --- imitation ---------------------------------------------------------------------


def bc_config(cfg: KiclConfig) -> KiclConfig:
    return cfg.stripped(iql_steps=0)


def sup_delta_config(cfg: KiclConfig) -> KiclConfig:
    return replace(cfg, iql_steps=0, hard_scope="infer_only", regime_split=True,
                   lambda_fid=0.0, actor_align=0.0, lambda_rev=0.0, lambda_ent=0.0)


def run_bc(train: ReplayBuffer, cfg: KiclConfig, seed: int = 0):
    c = bc_config(cfg)
    model = init_model(c, train.layout, train.states, seed)
    log = TrainLog()
    bc_pretrain(model, train, c, seed, log)
    return model, log


def run_sup_delta(train: ReplayBuffer, cfg: KiclConfig, seed: int = 0):
    c = sup_delta_config(cfg)
    model = init_model(c, train.layout, train.states, seed)
    log = TrainLog()
    bc_pretrain(model, train, c, seed, log)
    return model, log


# --- offline RL ----------------------------------------------------------------------


@dataclass
class FullActionModel:
    """Actor (s, a_base) -> action in [-cap, cap]; critics Q(s, a_base, a)."""

    method: str
    layout: StateLayout
    norm: Normalizer
    cap: float
    actor: MlpParams
    critics: list
    targets: list
    target_actor: MlpParams | None = None
    meta: dict = field(default_factory=dict)

    def actor_input(self, states, a_base):
        return np.column_stack([self.norm(states), np.asarray(a_base, float)])

    def critic_input(self, states, a_base, a):
        return np.column_stack([self.norm(states), np.asarray(a_base, float),
                                np.asarray(a, float)])

    def act(self, states, a_base):
        out, _ = forward(self.actor, self.actor_input(states, a_base))
        return out[:, 0]

    def nets(self) -> dict:
        d = {"actor": self.actor}
        for i, (c, t) in enumerate(zip(self.critics, self.targets)):
            d[f"critic{i}"] = c
            d[f"target{i}"] = t
        if self.target_actor is not None:
            d["target_actor"] = self.target_actor
        return d

    def save(self, path) -> None:
        save_checkpoint(path, self.nets(), {
            "method": self.method, "layout": [self.layout.d_text, self.layout.d_ticker],
            "cap": self.cap, "norm_mean": self.norm.mean.tolist(),
            "norm_std": self.norm.std.tolist(), "norm_mask": self.norm.mask.tolist(),
            **self.meta})

    @classmethod
    def load(cls, path) -> "FullActionModel":
        ck = load_checkpoint(path)
        m = dict(ck.meta)
        n = ck.nets
        k = sum(1 for name in n if name.startswith("critic"))
        norm = Normalizer(np.array(m.pop("norm_mean")), np.array(m.pop("norm_std")),
                          np.array(m.pop("norm_mask")))
        return cls(m.pop("method"), StateLayout(*m.pop("layout")), norm, m.pop("cap"),
                   n["actor"], [n[f"critic{i}"] for i in range(k)],
                   [n[f"target{i}"] for i in range(k)], n.get("target_actor"), m)


def _finite(loss, what, step):
    if not math.isfinite(loss):
        raise TrainingDivergence(f"non-finite {what} loss at step {step}",
                                 diagnostics={"step": step, "loss": what})


def _q_action_grad(critic, cache, n):
    """dQ/da for each row; the action is the last critic input column."""
    g = backward(critic, cache, np.ones((n, 1)))
    return g.input[:, -1]


def train_full_action(method: str, train: ReplayBuffer, cfg: KiclConfig, spec: MethodSpec,
                      seed: int = 0, cap: float = 0.2):
    if method not in FULL_ACTION:
        raise ConfigError(f"{method} is not a full-action method")
    if len(train) == 0:
        raise InputError("empty training split")
    c = spec.constants
    rng_init = substream(seed, "init")
    rng = substream(seed, "sampling", 2)
    d = train.layout.dim
    h = list(cfg.hidden)
    n_critics = 2 if method == "TD3+BC" else 1
    actor = init_mlp([d + 1, *h, 1], rng_init, head="tanh", out_scale=cap)
    critics = [init_mlp([d + 2, *h, 1], rng_init) for _ in range(n_critics)]
    norm = Normalizer.fit(train.states, train.layout, cfg.use_market_factors)
    model = FullActionModel(method, train.layout, norm, cap, actor, critics,
                            [q.copy() for q in critics],
                            actor.copy() if method == "TD3+BC" else None)
    opt_a = adam_init(actor, cfg.lr_actor)
    opt_q = [adam_init(q, cfg.lr_critic) for q in critics]
    log = TrainLog()

    n = len(train)
    s_in = model.actor_input(train.states, train.baseline_actions)
    ns_in = model.actor_input(train.next_states, train.next_baseline_actions)
    sa_norm = norm(train.states)
    nsa_norm = norm(train.next_states)
    batch = min(cfg.batch, n)

    def q_in(norm_states, base, a):
        return np.column_stack([norm_states, base, a])

    for step in range(1, cfg.iql_steps + 1):
        idx = rng.integers(0, n, size=batch)
        base, nbase = train.baseline_actions[idx], train.next_baseline_actions[idx]
        a_data = train.behavior_actions[idx]
        # next action for the TD target
        if method == "TD3+BC":
            a_next, _ = forward(model.target_actor, ns_in[idx])
            noise = np.clip(rng.normal(0.0, c["policy_noise"] * cap, batch),
                            -c["noise_clip"] * cap, c["noise_clip"] * cap)
            a_next = np.clip(a_next[:, 0] + noise, -cap, cap)
        else:
            a_next, _ = forward(actor, ns_in[idx])
            a_next = a_next[:, 0]
        x_next = q_in(nsa_norm[idx], nbase, a_next)
        q_next = np.min([forward(t, x_next)[0][:, 0] for t in model.targets], axis=0)
        y = train.rewards[idx] + cfg.gamma * (1.0 - train.done[idx]) * q_next

        x_data = q_in(sa_norm[idx], base, a_data)
        q_losses = []
        for q, opt in zip(critics, opt_q):
            qv, qc = forward(q, x_data)
            loss, g = L.mse(qv[:, 0], y)
            gq = g[:, None]
            grads = None
            if method == "CQL":
                samples = rng.uniform(-cap, cap, size=(batch, int(c["n_samples"])))
                xs = np.column_stack([np.repeat(sa_norm[idx], samples.shape[1], axis=0),
                                      np.repeat(base, samples.shape[1]), samples.ravel()])
                qs, sc = forward(q, xs)
                reg, (g_s, g_d) = L.cql_regularizer(qs[:, 0].reshape(samples.shape), qv[:, 0],
                                                    c["alpha"], c["temperature"])
                loss += reg
                gq = gq + g_d[:, None]
                grads = backward(q, sc, g_s.reshape(-1, 1))
            total = backward(q, qc, gq)
            if grads is not None:
                total = total.plus_params(grads)
            _finite(loss, "critic", step)
            adam_step(q, total, opt)
            q_losses.append(loss)

        actor_loss = math.nan
        update_actor = method != "TD3+BC" or step % int(c["policy_delay"]) == 0
        if update_actor:
            pi, pc = forward(actor, s_in[idx])
            pi = pi[:, 0]
            x_pi = q_in(sa_norm[idx], base, pi)
            q1 = critics[0]
            q_pi, qpc = forward(q1, x_pi)
            if method == "AWAC":
                q_d, _ = forward(q1, x_data)
                adv = q_d[:, 0] - q_pi[:, 0]
                w = L.advantage_weights(adv, 1.0 / c["beta"], c["max_weight"])
                actor_loss, g_a = L.awr(pi, a_data, w)
            elif method == "CQL":
                actor_loss = -float(np.mean(q_pi[:, 0]))
                g_a = -_q_action_grad(q1, qpc, batch) / batch
            else:
                actor_loss, (g_q, g_bc), _ = L.td3bc_actor(q_pi[:, 0], pi, a_data, c["alpha"])
                g_a = g_q * _q_action_grad(q1, qpc, batch) + g_bc
            _finite(actor_loss, "actor", step)
            adam_step(actor, backward(actor, pc, g_a[:, None]), opt_a)
            if model.target_actor is not None:
                soft_update(model.target_actor, actor, cfg.target_rate)
        if update_actor or method != "TD3+BC":
            for t, q in zip(model.targets, critics):
                soft_update(t, q, cfg.target_rate)
        if step % cfg.log_interval == 0 or step == cfg.iql_steps:
            log.rows.append((step, 0.0, float(np.mean(q_losses)), actor_loss, 0.0, 0.0, 0.0,
                             float(np.mean(np.abs(a_data)))))
    return model, log


def decode_full_action(model: FullActionModel, buffer: ReplayBuffer,
                       pcfg: PortfolioConfig | None = None) -> DecodeResult:
    pcfg = pcfg or PortfolioConfig(tau_entry=buffer.tau_entry)
    acts = model.act(buffer.states, buffer.baseline_actions) if len(buffer) else np.zeros(0)
    return execute(buffer, lambda rows, p: acts[rows], False, pcfg)


def run_offline_rl(method: str, train: ReplayBuffer, cfg: KiclConfig,
                   spec: MethodSpec | None = None, seed: int = 0, cap: float = 0.2):
    spec = spec or MethodSpec(method)
    c = _with_spec(cfg, spec)
    if method == "IQL":
        return train_kicl(train, c.stripped(), seed)
    return train_full_action(method, train, c, spec, seed, cap)


def train_method(spec: MethodSpec, train: ReplayBuffer, cfg: KiclConfig, seed: int = 0,
                 cap: float = 0.2):
    """Returns ``(model or None, log or None)``."""
    m = spec.method
    c = _with_spec(cfg, spec)
    if m in ("RMB", "HAP"):
        return None, None
    if m == "BC":
        return run_bc(train, c, seed)
    if m == "SUP-DELTA":
        return run_sup_delta(train, c, seed)
    if m == "KICL":
        return train_kicl(train, c, seed)
    return run_offline_rl(m, train, c, spec, seed, cap)


def decode_method(spec: MethodSpec, model, buffer: ReplayBuffer, pcfg: PortfolioConfig,
                  hard_scope: str | None = None) -> DecodeResult:
    """``hard_scope`` overrides a KICL-family model's configured scope."""
    m = spec.method
    if m == "RMB":
        return run_rmb(buffer, pcfg)
    if m == "HAP":
        return run_hap(buffer, int(spec.constants["hold_days"]), spec.constants["size"], pcfg)
    if isinstance(model, FullActionModel):
        return decode_full_action(model, buffer, pcfg)
    if not isinstance(model, KiclModel):
        raise InputError(f"{m}: no trained model to decode")
    return decode(model, buffer, hard_scope or model.config.hard_scope, pcfg)


def load_model(path):
    meta = load_checkpoint(path).meta
    return FullActionModel.load(path) if "method" in meta and "config" not in meta \
        else KiclModel.load(path)
