"""Constructed datasets for stress tests of the intent constraints."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .discourse import baseline_signals, generate_discourse
from .marketdata import TradingCalendar, generate_market
from .replay import ReplayBuffer, build_replay, chronological_split
from .seeding import substream

SYNTH_START = "2021-01-04"

# Reference signal/silence counts used as an arithmetic fixture.
REFERENCE_COUNTS = {"n_sig": 45_626, "n_sil": 1_183_395}


@dataclass
class CountFixture:
    """Duck-typed stand-in for a buffer: only what partition_stats reads."""

    baseline_actions: np.ndarray
    tau_entry: float = 5e-4


def count_fixture(n_sig: int, n_sil: int, tau_entry: float = 5e-4) -> CountFixture:
    base = np.zeros(n_sig + n_sil)
    base[:n_sig] = 0.1
    return CountFixture(base, tau_entry)


def adversarial_replay(seed: int = 0, n_tickers: int = 6, n_days: int = 400,
                       intensity: float = 3.0, reverse_prob: float = 0.7,
                       edge: float = 0.01) -> ReplayBuffer:
    """A replay where reversing the anchor pays in training but not at test.

    On signal rows behavior takes ``-a_base`` with probability
    ``reverse_prob`` and ``a_base`` otherwise; it is flat in silence. Next-day
    returns on signal rows oppose the anchor on train days and follow it on
    validation and test days, with magnitude around ``edge``. Rewards are the
    behavior weight times that return, so the critic favors reversals.
    """
    series = generate_market(seed, n_tickers, n_days)
    cal = TradingCalendar.business_days(SYNTH_START, n_days)
    events = generate_discourse(seed, [s.ticker for s in series], cal, intensity)
    sigs = baseline_signals(events, cal)
    buf = build_replay(series, sigs, kol_ids=sorted({s.kol_id for s in sigs})[:1] or None)
    rng = substream(seed, "sampling", 99)
    train, _, _ = chronological_split(buf)
    train_days = set(int(d) for d in np.unique(train.trading_days))
    in_train = np.array([int(d) in train_days for d in buf.trading_days])

    base = buf.baseline_actions
    sig = np.abs(base) >= buf.tau_entry
    s = np.sign(base)
    flip = rng.random(len(buf)) < reverse_prob
    beh = np.where(sig, np.where(flip, -base, base), 0.0)
    mag = edge * (0.5 + rng.random(len(buf)))
    noise = 0.2 * edge * rng.standard_normal(len(buf))
    ret = np.where(sig, np.where(in_train, -s, s) * mag, noise)

    p_prev = np.zeros(len(buf))
    nxt_beh = {}
    order = np.lexsort((buf.trading_days, buf.tickers.astype(str), buf.kol_ids.astype(str)))
    prev_key = None
    for i in order:
        key = (buf.kol_ids[i], buf.tickers[i])
        p_prev[i] = nxt_beh.get(key, 0.0) if key == prev_key else 0.0
        nxt_beh[key] = beh[i]
        prev_key = key
    states = buf.states.copy()
    states[:, buf.layout.last_position] = p_prev
    next_states = buf.next_states.copy()
    next_states[:, buf.layout.last_position] = beh
    return ReplayBuffer(
        buf.layout, states, next_states, beh, base.copy(), buf.next_baseline_actions.copy(),
        buf.prev_baseline_actions.copy(), beh * ret, buf.fresh.copy(), p_prev, ret,
        buf.done.copy(), buf.tickers.copy(), buf.kol_ids.copy(), buf.trading_days.copy(),
        buf.tau_entry, {**buf.meta, "fixture": "adversarial", "reverse_prob": reverse_prob},
    )
