"""Alloc layer, daily P&L, and equity curves."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BankruptcyError, InputError

DRAWDOWN_GUARD = 1e-8


@dataclass
class PortfolioConfig:
    per_asset_cap: float = 0.2
    gross_cap: float = 1.0
    # Daily carry factor for an anchor weight with no fresh score.
    anchor_decay: float = 0.35
    tau_entry: float = 5e-4
    cost_rate: float = 0.0

    def __post_init__(self):
        if self.per_asset_cap <= 0 or self.gross_cap <= 0:
            raise InputError("caps must be positive")
        if not 0.0 <= self.anchor_decay <= 1.0:
            raise InputError("anchor_decay must be in [0, 1]")
        if self.tau_entry < 0 or self.cost_rate < 0:
            raise InputError("tau_entry and cost_rate must be >= 0")


@dataclass
class PortfolioState:
    weights: dict = field(default_factory=dict)
    day: int | None = None

    @property
    def gross(self) -> float:
        return math.fsum(abs(w) for w in self.weights.values())

    @property
    def cash_weight(self) -> float:
        return 1.0 - self.gross

    def get(self, ticker: str) -> float:
        return self.weights.get(ticker, 0.0)


@dataclass(frozen=True)
class EquityPoint:
    day: int
    equity: float
    peak: float
    daily_return: float

    @property
    def drawdown(self) -> float:
        return (self.peak - self.equity) / (self.peak + DRAWDOWN_GUARD)


def alloc(raw_scores: dict, prev: PortfolioState | None, config: PortfolioConfig,
          day: int | None = None) -> PortfolioState:
    """Map scores to capped weights.

    Fresh scores are clamped to the per-asset cap; tickers held in ``prev``
    without a fresh score carry their weight times ``anchor_decay``. The book
    is then scaled down proportionally when gross exposure exceeds the cap,
    and any weight below ``tau_entry`` in magnitude is zeroed.
    """
    for t, s in raw_scores.items():
        if not math.isfinite(s):
            raise InputError(f"non-finite score for {t}: {s}")
    cap = config.per_asset_cap
    weights = {}
    if prev is not None:
        for t, w in prev.weights.items():
            if t not in raw_scores:
                weights[t] = w * config.anchor_decay
    for t, s in raw_scores.items():
        weights[t] = min(max(float(s), -cap), cap)

    # fsum makes the cap test independent of dict order
    gross = math.fsum(abs(w) for w in weights.values())
    if gross > config.gross_cap:
        factor = config.gross_cap / gross
        while math.fsum(abs(w * factor) for w in weights.values()) > config.gross_cap:
            factor = float(np.nextafter(factor, 0.0))
        weights = {t: w * factor for t, w in weights.items()}

    out = {}
    for t in sorted(weights):
        w = weights[t]
        out[t] = 0.0 if abs(w) < config.tau_entry else w
    return PortfolioState(out, day)


def step_pnl(state: PortfolioState, next_day_returns: dict, cost_rate: float,
             prev: PortfolioState | None = None):
    """One day of mark-to-market.

    Returns ``(r_t, drifted, contributions)``: the net portfolio return, the
    book after weights drift with the day's returns, and per-ticker net
    contributions. Turnover is measured against ``prev`` target weights.
    """
    prev_w = prev.weights if prev is not None else {}
    contributions = {}
    gross_ret = 0.0
    for t in sorted(set(state.weights) | set(prev_w)):
        w = state.weights.get(t, 0.0)
        if w != 0.0 and t not in next_day_returns:
            raise InputError(f"missing next-day return for held ticker {t}")
        ret = next_day_returns.get(t, 0.0)
        c = w * ret - cost_rate * abs(w - prev_w.get(t, 0.0))
        contributions[t] = c
        gross_ret += w * ret
    r = float(sum(contributions.values()))
    growth = 1.0 + gross_ret
    drifted = {
        t: (w * (1.0 + next_day_returns.get(t, 0.0)) / growth if growth > 0 else 0.0)
        for t, w in state.weights.items()
    }
    return r, PortfolioState(drifted, state.day), contributions


def ticker_pnl(weights: np.ndarray, prev_weights: np.ndarray, next_returns: np.ndarray,
               cost_rate: float) -> np.ndarray:
    """Vectorized per-row contribution, same rule as :func:`step_pnl`."""
    return weights * next_returns - cost_rate * np.abs(weights - prev_weights)


def equity_curve(daily_returns, days=None) -> list[EquityPoint]:
    rets = [float(r) for r in daily_returns]
    if days is None:
        days = range(len(rets))
    out = []
    equity, peak = 1.0, -math.inf
    for d, r in zip(days, rets):
        if r <= -1.0:
            raise BankruptcyError(f"return {r} on day {d} wipes out equity")
        equity *= 1.0 + r
        peak = max(peak, equity)
        out.append(EquityPoint(int(d), equity, peak, r))
    return out


def write_equity_csv(path, points) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["day", "equity", "peak", "drawdown", "daily_return"])
        for p in points:
            w.writerow([p.day, repr(p.equity), repr(p.peak), repr(p.drawdown),
                        repr(p.daily_return)])
