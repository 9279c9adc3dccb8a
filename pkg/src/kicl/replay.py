"""State assembly, replay construction, signal/silence partition, and the
chronological split."""
from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .discourse import BaselineSignal
from .errors import InputError, SplitError
from .marketdata import FACTOR_NAMES, WARMUP_BARS, MarketSeries, factor_table
from .portfolio import PortfolioConfig, PortfolioState, alloc, ticker_pnl

CORE_NAMES = ("sentiment", "confidence", "last_position", "silence_days")


def embed_token(token: str, dim: int, seed: int = 0) -> np.ndarray:
    """Deterministic unit vector keyed on ``(seed, token)``."""
    if not token:
        raise InputError("cannot embed an empty token")
    if dim < 1:
        raise InputError("embedding dim must be >= 1")
    digest = hashlib.sha256(f"{seed}\x1f{token}".encode("utf-8")).digest()
    key = [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 32, 4)]
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(key)))
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


@dataclass(frozen=True)
class StateLayout:
    d_text: int = 16
    d_ticker: int = 16

    @property
    def dim(self) -> int:
        return self.d_text + self.d_ticker + len(CORE_NAMES) + len(FACTOR_NAMES)

    @property
    def text(self) -> slice:
        return slice(0, self.d_text)

    @property
    def ticker(self) -> slice:
        return slice(self.d_text, self.d_text + self.d_ticker)

    @property
    def core_start(self) -> int:
        return self.d_text + self.d_ticker

    @property
    def last_position(self) -> int:
        return self.core_start + 2

    @property
    def silence_days(self) -> int:
        return self.core_start + 3

    @property
    def mkt(self) -> slice:
        s = self.core_start + len(CORE_NAMES)
        return slice(s, s + len(FACTOR_NAMES))

    def assemble(self, text, ticker, core, mkt) -> np.ndarray:
        parts = [np.asarray(text, float), np.asarray(ticker, float),
                 np.asarray(core, float), np.asarray(mkt, float)]
        if [len(p) for p in parts] != [self.d_text, self.d_ticker, len(CORE_NAMES),
                                       len(FACTOR_NAMES)]:
            raise InputError("state part dimensions do not match layout")
        if core[3] < 0:
            raise InputError("silence_days must be >= 0")
        return np.concatenate(parts)


@dataclass
class BehaviorConfig:
    alpha: float = 0.3
    d_text: int = 16
    d_ticker: int = 16
    embed_seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise InputError("behavior alpha must be in (0, 1]")


@dataclass(frozen=True)
class Transition:
    s: np.ndarray
    behavior_action: float
    baseline_action: float
    reward: float
    s_next: np.ndarray
    m_t: bool
    ticker: str
    trading_day: int
    kol_id: str
    p_prev: float
    done: bool


@dataclass
class ReplayBuffer:
    """Columnar transition store; row order is (kol, ticker, trading_day)."""

    layout: StateLayout
    states: np.ndarray
    next_states: np.ndarray
    behavior_actions: np.ndarray
    baseline_actions: np.ndarray
    next_baseline_actions: np.ndarray
    prev_baseline_actions: np.ndarray
    rewards: np.ndarray
    fresh: np.ndarray
    p_prev: np.ndarray
    ret_next: np.ndarray
    done: np.ndarray
    tickers: np.ndarray
    kol_ids: np.ndarray
    trading_days: np.ndarray
    tau_entry: float = 5e-4
    meta: dict = field(default_factory=dict)

    _COLUMNS = ("states", "next_states", "behavior_actions", "baseline_actions",
                "next_baseline_actions", "prev_baseline_actions", "rewards", "fresh",
                "p_prev", "ret_next", "done", "tickers", "kol_ids", "trading_days")

    def __post_init__(self):
        n = len(self.rewards)
        if any(len(getattr(self, c)) != n for c in self._COLUMNS):
            raise InputError("replay columns have unequal length")
        self.states = np.asarray(self.states, float).reshape(n, self.layout.dim)
        self.next_states = np.asarray(self.next_states, float).reshape(n, self.layout.dim)
        self.fresh = np.asarray(self.fresh, bool)
        self.done = np.asarray(self.done, bool)
        self.trading_days = np.asarray(self.trading_days, np.int64)
        self.tickers = np.asarray(self.tickers, dtype=object)
        self.kol_ids = np.asarray(self.kol_ids, dtype=object)

    def __len__(self) -> int:
        return len(self.rewards)

    @property
    def signal_mask(self) -> np.ndarray:
        return np.abs(self.baseline_actions) >= self.tau_entry

    @property
    def sig_index(self) -> np.ndarray:
        return np.flatnonzero(self.signal_mask)

    @property
    def sil_index(self) -> np.ndarray:
        return np.flatnonzero(~self.signal_mask)

    @property
    def silence_days(self) -> np.ndarray:
        return self.states[:, self.layout.silence_days]

    def transition(self, i: int) -> Transition:
        return Transition(
            self.states[i], float(self.behavior_actions[i]), float(self.baseline_actions[i]),
            float(self.rewards[i]), self.next_states[i], bool(self.fresh[i]),
            str(self.tickers[i]), int(self.trading_days[i]), str(self.kol_ids[i]),
            float(self.p_prev[i]), bool(self.done[i]),
        )

    def subset(self, idx) -> "ReplayBuffer":
        idx = np.asarray(idx, dtype=np.int64)
        cols = {c: getattr(self, c)[idx] for c in self._COLUMNS}
        return ReplayBuffer(self.layout, **cols, tau_entry=self.tau_entry, meta=dict(self.meta))

    def checksum(self) -> str:
        h = hashlib.sha256()
        for c in self._COLUMNS:
            a = getattr(self, c)
            h.update(c.encode())
            if a.dtype == object:
                h.update("\x1f".join(map(str, a)).encode())
            else:
                h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()


def build_replay(
    series: list[MarketSeries],
    signals: list[BaselineSignal],
    behavior_config: BehaviorConfig | None = None,
    portfolio_config: PortfolioConfig | None = None,
    kol_ids=None,
) -> ReplayBuffer:
    """One transition per (kol, ticker, day) past factor warmup.

    Each KOL runs its own anchor book through :func:`alloc`. The behavior path
    is an exponential smoothing of the anchor weight; its reward is earned on
    the next session's return. ``p_prev`` is the previous behavior weight.
    """
    bcfg = behavior_config or BehaviorConfig()
    pcfg = portfolio_config or PortfolioConfig()
    layout = StateLayout(bcfg.d_text, bcfg.d_ticker)
    if not series:
        raise InputError("no market series")
    days = series[0].days
    for s in series[1:]:
        if not np.array_equal(s.days, days):
            raise InputError(f"calendar misalignment: {s.ticker} days differ from {series[0].ticker}")
    if len(days) < WARMUP_BARS + 1:
        raise InputError("factor warmup not satisfied: need at least 22 bars")
    by_ticker = {s.ticker: s for s in series}
    pos_of_day = {int(d): i for i, d in enumerate(days)}
    fresh_by_kol: dict[str, dict] = {}
    for sig in signals:
        if sig.ticker not in by_ticker:
            raise InputError(f"calendar misalignment: signal for unknown ticker {sig.ticker}")
        if sig.trading_day not in pos_of_day:
            raise InputError(f"calendar misalignment: signal day {sig.trading_day} has no bar")
        fresh_by_kol.setdefault(sig.kol_id, {})[(sig.ticker, pos_of_day[sig.trading_day])] = sig
    if kol_ids is None:
        kol_ids = sorted(fresh_by_kol) or ["kol_00"]
    kol_ids = list(kol_ids)

    tickers = [s.ticker for s in series]
    n = len(days)
    factors = {}
    next_ret = {}
    for s in series:
        fdays, rows = factor_table(s)
        full = np.full((n, len(FACTOR_NAMES)), np.nan)
        full[WARMUP_BARS - 1 :] = rows
        factors[s.ticker] = full
        next_ret[s.ticker] = s.next_returns()
    ticker_emb = {t: embed_token(t, bcfg.d_ticker, bcfg.embed_seed) for t in tickers}
    zero_text = np.zeros(bcfg.d_text)

    cols = {k: [] for k in ("s", "ns", "beh", "base", "nbase", "pbase", "rew", "fresh",
                            "pprev", "ret", "done", "ticker", "kol", "day")}
    first, last = WARMUP_BARS - 1, n - 2
    for kol in kol_ids:
        fresh = fresh_by_kol.get(kol, {})
        base = {t: np.zeros(n) for t in tickers}
        beh = {t: np.zeros(n) for t in tickers}
        is_fresh = {t: np.zeros(n, bool) for t in tickers}
        core = {t: np.zeros((n, 2)) for t in tickers}
        silence = {t: np.zeros(n) for t in tickers}
        text = {t: np.zeros((n, bcfg.d_text)) for t in tickers}
        book = PortfolioState({})
        last_text = {t: zero_text for t in tickers}
        last_core = {t: (0.0, 0.0) for t in tickers}
        for i in range(n):
            scores = {}
            for t in tickers:
                sig = fresh.get((t, i))
                if sig is not None:
                    scores[t] = sig.a_raw
                    last_core[t] = (sig.sentiment, sig.confidence)
                    last_text[t] = embed_token(f"{kol}:{t}:{int(days[i])}", bcfg.d_text,
                                               bcfg.embed_seed)
            book = alloc(scores, book, pcfg, day=int(days[i]))
            for t in tickers:
                w = book.get(t)
                base[t][i] = w
                prev_beh = beh[t][i - 1] if i > 0 else 0.0
                beh[t][i] = (1.0 - bcfg.alpha) * prev_beh + bcfg.alpha * w
                is_fresh[t][i] = t in scores
                prev_sil = silence[t][i - 1] if i > 0 else 0.0
                silence[t][i] = 0.0 if t in scores else prev_sil + 1.0
                core[t][i] = last_core[t]
                text[t][i] = last_text[t]

        for t in tickers:
            def state(i):
                prev_beh = beh[t][i - 1] if i > 0 else 0.0
                c = (core[t][i][0], core[t][i][1], prev_beh, silence[t][i])
                return layout.assemble(text[t][i], ticker_emb[t], c, factors[t][i])

            for i in range(first, last + 1):
                prev_beh = beh[t][i - 1] if i > 0 else 0.0
                cols["s"].append(state(i))
                cols["ns"].append(state(i + 1))
                cols["beh"].append(beh[t][i])
                cols["base"].append(base[t][i])
                cols["nbase"].append(base[t][i + 1])
                cols["pbase"].append(base[t][i - 1] if i > 0 else 0.0)
                r = ticker_pnl(np.array(beh[t][i]), np.array(prev_beh),
                               np.array(next_ret[t][i]), pcfg.cost_rate)
                cols["rew"].append(float(r))
                cols["fresh"].append(bool(is_fresh[t][i]))
                cols["pprev"].append(prev_beh)
                cols["ret"].append(next_ret[t][i])
                cols["done"].append(i == last)
                cols["ticker"].append(t)
                cols["kol"].append(kol)
                cols["day"].append(int(days[i]))

    m = len(cols["rew"])
    dim = layout.dim
    buf = ReplayBuffer(
        layout,
        np.array(cols["s"]).reshape(m, dim),
        np.array(cols["ns"]).reshape(m, dim),
        np.array(cols["beh"], float),
        np.array(cols["base"], float),
        np.array(cols["nbase"], float),
        np.array(cols["pbase"], float),
        np.array(cols["rew"], float),
        np.array(cols["fresh"], bool),
        np.array(cols["pprev"], float),
        np.array(cols["ret"], float),
        np.array(cols["done"], bool),
        np.array(cols["ticker"], dtype=object),
        np.array(cols["kol"], dtype=object),
        np.array(cols["day"], np.int64),
        tau_entry=pcfg.tau_entry,
        meta={"behavior_alpha": bcfg.alpha, "anchor_decay": pcfg.anchor_decay,
              "per_asset_cap": pcfg.per_asset_cap, "gross_cap": pcfg.gross_cap,
              "cost_rate": pcfg.cost_rate, "embed_seed": bcfg.embed_seed},
    )
    if np.any(np.abs(buf.baseline_actions) > pcfg.per_asset_cap):
        raise AssertionError("baseline action exceeds per-asset cap")
    return buf


def chronological_split(buffer: ReplayBuffer, ratios=(0.6, 0.2, 0.2)):
    """Split on whole trading days at the rounded cumulative-ratio boundaries."""
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise SplitError("ratios must be three positive numbers")
    total = float(sum(ratios))
    uniq = np.unique(buffer.trading_days)
    n = len(uniq)
    if n < 3:
        raise SplitError(f"{n} distinct trading days; need at least 3")
    c1 = int(math.floor(n * ratios[0] / total + 0.5))
    c2 = int(math.floor(n * (ratios[0] + ratios[1]) / total + 0.5))
    c1 = min(max(c1, 1), n - 2)
    c2 = min(max(c2, c1 + 1), n - 1)
    train_days, val_days, test_days = uniq[:c1], uniq[c1:c2], uniq[c2:]
    pick = lambda ds: buffer.subset(np.flatnonzero(np.isin(buffer.trading_days, ds)))
    return pick(train_days), pick(val_days), pick(test_days)


def partition_stats(buffer) -> dict:
    """Signal/silence counts; works on anything with ``baseline_actions`` and
    ``tau_entry``."""
    base = np.asarray(buffer.baseline_actions)
    if base.size == 0:
        raise InputError("empty buffer")
    n_sig = int(np.count_nonzero(np.abs(base) >= buffer.tau_entry))
    n_sil = int(base.size - n_sig)
    return {
        "n_sig": n_sig,
        "n_sil": n_sil,
        "ratio": n_sil / n_sig if n_sig else math.inf,
        "pct_sig": 100.0 * n_sig / base.size,
    }


def regime_decomposition(losses, signal_mask) -> tuple[float, float]:
    """(mean over all rows, |sig|/|D| * mean_sig + |sil|/|D| * mean_sil)."""
    losses = np.asarray(losses, float)
    sig = np.asarray(signal_mask, bool)
    n = losses.size
    parts = 0.0
    for mask in (sig, ~sig):
        k = int(mask.sum())
        if k:
            parts += (k / n) * losses[mask].mean()
    return float(losses.mean()), float(parts)


# --- dump / load -------------------------------------------------------------

_SCALARS = ("behavior_actions", "baseline_actions", "next_baseline_actions",
            "prev_baseline_actions", "rewards", "p_prev", "ret_next")


def write_replay(directory, buffer: ReplayBuffer, manifest_extra: dict | None = None) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    with (d / "transitions.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["idx", "kol_id", "ticker", "trading_day", "m_t", "done", *_SCALARS])
        for i in range(len(buffer)):
            w.writerow([i, buffer.kol_ids[i], buffer.tickers[i], int(buffer.trading_days[i]),
                        int(buffer.fresh[i]), int(buffer.done[i]),
                        *[repr(float(getattr(buffer, c)[i])) for c in _SCALARS]])
    dim = buffer.layout.dim
    with (d / "states.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["idx", *[f"s_{j}" for j in range(dim)], *[f"ns_{j}" for j in range(dim)]])
        for i in range(len(buffer)):
            w.writerow([i, *map(repr, map(float, buffer.states[i])),
                        *map(repr, map(float, buffer.next_states[i]))])
    manifest = {
        "format": "kicl-replay/1",
        "n": len(buffer),
        "d_text": buffer.layout.d_text,
        "d_ticker": buffer.layout.d_ticker,
        "state_dim": dim,
        "tau_entry": buffer.tau_entry,
        "checksum": buffer.checksum(),
        "meta": buffer.meta,
        **(manifest_extra or {}),
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def read_replay(directory) -> ReplayBuffer:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    layout = StateLayout(manifest["d_text"], manifest["d_ticker"])
    with (d / "transitions.csv").open(newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    dim = layout.dim
    states = np.zeros((len(rows), dim))
    next_states = np.zeros((len(rows), dim))
    with (d / "states.csv").open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        next(reader)
        for i, r in enumerate(reader):
            vals = np.array([float(x) for x in r[1:]])
            states[i], next_states[i] = vals[:dim], vals[dim:]
    scal = {c: np.array([float(r[c]) for r in rows]) for c in _SCALARS}
    buf = ReplayBuffer(
        layout, states, next_states,
        fresh=np.array([r["m_t"] == "1" for r in rows]),
        done=np.array([r["done"] == "1" for r in rows]),
        tickers=np.array([r["ticker"] for r in rows], dtype=object),
        kol_ids=np.array([r["kol_id"] for r in rows], dtype=object),
        trading_days=np.array([int(r["trading_day"]) for r in rows], np.int64),
        tau_entry=manifest["tau_entry"], meta=manifest.get("meta", {}), **scal,
    )
    if buf.checksum() != manifest["checksum"]:
        raise InputError(f"{d}: replay checksum mismatch")
    return buf
