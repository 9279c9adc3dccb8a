"""BC pretraining with an anchor term and the penalty-augmented IQL loop."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import losses as L
from .errors import InputError, TrainingDivergence
from .neural import adam_init, adam_step, backward, forward, soft_update
from .policy import (KiclConfig, KiclModel, anchor_offset, hard_project, head_index,
                     init_model, signal_mask, trains_projected)
from .replay import ReplayBuffer
from .seeding import substream

LOG_COLUMNS = ("step", "value_loss", "critic_loss", "actor_loss", "fid", "rev", "ent",
               "mean_abs_delta")


@dataclass
class TrainLog:
    bc_epoch_losses: list = field(default_factory=list)
    rows: list = field(default_factory=list)

    def write_csv(self, path) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(LOG_COLUMNS)
            for r in self.rows:
                w.writerow([r[0], *[repr(float(x)) for x in r[1:]]])


def _head_grad(n_heads, idx, g):
    out = np.zeros((len(idx), n_heads))
    out[np.arange(len(idx)), idx] = g
    return out


def _check(loss, what, step, model):
    if not math.isfinite(loss):
        raise TrainingDivergence(f"non-finite {what} loss at step {step}",
                                 diagnostics={"step": step, "loss": what}, checkpoint=model)


def _delta_targets(buf: ReplayBuffer, idx, project: bool, tau: float):
    """Residual targets implied by the behavior action (optionally projected)."""
    base = buf.baseline_actions[idx]
    a = buf.behavior_actions[idx]
    if project:
        p = np.where(np.abs(base) >= tau, buf.p_prev[idx], 0.0)
        a = hard_project(a, base, p, tau)
    return np.atleast_1d(a) - anchor_offset(base, tau)


def bc_pretrain(model: KiclModel, train: ReplayBuffer, config: KiclConfig | None = None,
                seed: int = 0, log: TrainLog | None = None) -> KiclModel:
    """Regress composed actions on behavior actions plus anchor_w * delta^2."""
    cfg = config or model.config
    if len(train) == 0:
        raise InputError("empty training split")
    log = log if log is not None else TrainLog()
    rng = substream(seed, "sampling", 0)
    opt = adam_init(model.actor, cfg.lr_actor)
    tau = cfg.tau_entry
    offset_all = anchor_offset(train.baseline_actions, tau)
    heads_all = head_index(train.fresh, cfg.regime_split)
    x_all = model.actor_input(train.states, train.baseline_actions)
    n = len(train)
    for epoch in range(cfg.bc_epochs):
        perm = rng.permutation(n)
        total = 0.0
        for s in range(0, n, cfg.batch):
            idx = perm[s : s + cfg.batch]
            out, cache = forward(model.actor, x_all[idx])
            h = heads_all[idx]
            delta = out[np.arange(len(idx)), h]
            loss, g = L.bc_anchor(delta, offset_all[idx], train.behavior_actions[idx],
                                  cfg.anchor_w)
            _check(loss, "bc", epoch, model)
            grads = backward(model.actor, cache, _head_grad(model.n_heads, h, g))
            adam_step(model.actor, grads, opt)
            total += loss * len(idx)
        log.bc_epoch_losses.append(total / n)
    return model


def iql_train(model: KiclModel, train: ReplayBuffer, config: KiclConfig | None = None,
              seed: int = 0, log: TrainLog | None = None) -> tuple[KiclModel, TrainLog]:
    cfg = config or model.config
    if len(train) == 0:
        raise InputError("empty training split")
    log = log if log is not None else TrainLog()
    rng = substream(seed, "sampling", 1)
    opt_a = adam_init(model.actor, cfg.lr_actor)
    opt_q = adam_init(model.critic, cfg.lr_critic)
    opt_v = adam_init(model.value, cfg.lr_value)
    tau = cfg.tau_entry
    project = trains_projected(cfg.hard_scope)
    n = len(train)
    base_all = train.baseline_actions
    sig_all = signal_mask(base_all, tau).astype(float)
    delta_data_all = train.behavior_actions - anchor_offset(base_all, tau)
    target_all = _delta_targets(train, np.arange(n), project, tau)
    heads_all = head_index(train.fresh, cfg.regime_split)
    s_in = model.actor_input(train.states, base_all)
    q_in = model.critic_input(train.states, base_all, delta_data_all)
    ns_in = model.value_input(train.next_states, train.next_baseline_actions)
    w_fid = cfg.lambda_fid + cfg.actor_align

    for step in range(1, cfg.iql_steps + 1):
        idx = rng.integers(0, n, size=min(cfg.batch, n))
        # value: expectile of target Q at the data action
        q_t, _ = forward(model.target_critic, q_in[idx])
        v, vc = forward(model.value, s_in[idx])
        v_loss, gv = L.expectile(v[:, 0], q_t[:, 0], cfg.expectile)
        _check(v_loss, "value", step, model)
        adam_step(model.value, backward(model.value, vc, gv[:, None]), opt_v)

        # critic: one-step TD toward V(s')
        v_next, _ = forward(model.value, ns_in[idx])
        y = train.rewards[idx] + cfg.gamma * (1.0 - train.done[idx]) * v_next[:, 0]
        q, qc = forward(model.critic, q_in[idx])
        q_loss, gq = L.mse(q[:, 0], y)
        _check(q_loss, "critic", step, model)
        adam_step(model.critic, backward(model.critic, qc, gq[:, None]), opt_q)

        # actor: advantage-weighted residual regression plus intent penalties
        v_new, _ = forward(model.value, s_in[idx])
        wts = L.advantage_weights(q_t[:, 0] - v_new[:, 0], cfg.beta, cfg.adv_clip)
        out, ac = forward(model.actor, s_in[idx])
        h = heads_all[idx]
        delta = out[np.arange(len(idx)), h]
        a_loss, g = L.awr(delta, target_all[idx], wts)
        base = base_all[idx]
        sig = sig_all[idx]
        a = anchor_offset(base, tau) + delta
        fid, g_fid = L.fidelity_penalty(a, base, sig)
        rev, g_rev = L.reversal_penalty(a, base, sig)
        ent, g_ent = L.entry_penalty(a, 1.0 - sig, tau)
        a_loss += w_fid * fid + cfg.lambda_rev * rev + cfg.lambda_ent * ent
        if w_fid:
            g = g + w_fid * g_fid
        if cfg.lambda_rev:
            g = g + cfg.lambda_rev * g_rev
        if cfg.lambda_ent:
            g = g + cfg.lambda_ent * g_ent
        _check(a_loss, "actor", step, model)
        adam_step(model.actor, backward(model.actor, ac, _head_grad(model.n_heads, h, g)), opt_a)

        soft_update(model.target_critic, model.critic, cfg.target_rate)
        if step % cfg.log_interval == 0 or step == cfg.iql_steps:
            log.rows.append((step, v_loss, q_loss, a_loss, fid, rev, ent,
                             float(np.mean(np.abs(delta)))))
    return model, log


def train_kicl(train: ReplayBuffer, config: KiclConfig, seed: int = 0,
               skip_bc: bool = False) -> tuple[KiclModel, TrainLog]:
    """Fresh model, BC warm start (unless skipped), then the IQL loop."""
    if len(train) == 0:
        raise InputError("empty training split")
    model = init_model(config, train.layout, train.states, seed)
    log = TrainLog()
    if not skip_bc:
        bc_pretrain(model, train, config, seed, log)
    iql_train(model, train, config, seed, log)
    return model, log
