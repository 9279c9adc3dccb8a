"""Daily bars, the trading calendar, and the six leakage-free market factors."""
from __future__ import annotations

import csv
import datetime as dt
from dataclasses import dataclass
from pathlib import Path
from zoneinfo import ZoneInfo

import numpy as np

from .errors import CalendarRangeError, InputError, WarmupError
from .seeding import substream

FACTOR_NAMES = ("ret_1d", "ret_5d", "vol_5d", "vol_20d", "volu_z_20d", "dist_sma20")
WARMUP_BARS = 21
MIN_SYNTH_DAYS = 25

# Relative floor below which the 20-day volume std counts as zero.
_VOLUME_STD_EPS = 1e-12


class TradingCalendar:
    """Ordered trading dates; ``trading_day`` values index into ``dates``.

    Session boundaries are wall-clock times in ``tz``. Aware timestamps are
    converted to that zone; naive timestamps are taken as already local.
    """

    def __init__(
        self,
        dates,
        open_time: dt.time = dt.time(9, 30),
        close_time: dt.time = dt.time(16, 0),
        tz: str = "America/New_York",
    ):
        dates = [d if isinstance(d, dt.date) else dt.date.fromisoformat(str(d)) for d in dates]
        if not dates:
            raise InputError("calendar needs at least one date")
        if any(b <= a for a, b in zip(dates, dates[1:])):
            raise InputError("calendar dates must be strictly increasing")
        self.dates = dates
        self.open_time = open_time
        self.close_time = close_time
        self.tz = tz
        self._ordinals = np.array([d.toordinal() for d in dates], dtype=np.int64)

    @classmethod
    def business_days(cls, start: dt.date | str, n_days: int, **kwargs) -> "TradingCalendar":
        """Weekday calendar of ``n_days`` sessions starting on or after ``start``."""
        if isinstance(start, str):
            start = dt.date.fromisoformat(start)
        days = []
        d = start
        while len(days) < n_days:
            if d.weekday() < 5:
                days.append(d)
            d += dt.timedelta(days=1)
        return cls(days, **kwargs)

    def __len__(self) -> int:
        return len(self.dates)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, TradingCalendar)
            and self.dates == other.dates
            and self.open_time == other.open_time
            and self.close_time == other.close_time
            and self.tz == other.tz
        )

    def date_of(self, trading_day: int) -> dt.date:
        if not 0 <= trading_day < len(self.dates):
            raise CalendarRangeError(f"trading_day {trading_day} outside calendar")
        return self.dates[trading_day]

    def day_of(self, date: dt.date) -> int:
        i = int(np.searchsorted(self._ordinals, date.toordinal()))
        if i >= len(self.dates) or self.dates[i] != date:
            raise CalendarRangeError(f"{date} is not a trading date")
        return i

    def next_after(self, date: dt.date) -> int:
        """Index of the first session strictly after ``date``."""
        i = int(np.searchsorted(self._ordinals, date.toordinal(), side="right"))
        if i >= len(self.dates):
            raise CalendarRangeError(f"no session after {date}")
        return i

    def to_local(self, ts: dt.datetime) -> dt.datetime:
        if ts.tzinfo is not None:
            ts = ts.astimezone(ZoneInfo(self.tz)).replace(tzinfo=None)
        return ts

    def covers(self, ts: dt.datetime) -> bool:
        ts = self.to_local(ts)
        first = dt.datetime.combine(self.dates[0], dt.time(0, 0))
        last = dt.datetime.combine(self.dates[-1], self.close_time)
        return first <= ts <= last


@dataclass(frozen=True)
class MarketBar:
    trading_day: int
    open: float
    high: float
    low: float
    close: float
    volume: float


@dataclass(frozen=True)
class FactorVector:
    ret_1d: float
    ret_5d: float
    vol_5d: float
    vol_20d: float
    volu_z_20d: float
    dist_sma20: float

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in FACTOR_NAMES], dtype=np.float64)


@dataclass
class MarketSeries:
    """Columnar bar series for one ticker, sorted by ``trading_day``."""

    ticker: str
    days: np.ndarray
    open: np.ndarray
    high: np.ndarray
    low: np.ndarray
    close: np.ndarray
    volume: np.ndarray

    def __post_init__(self):
        self.days = np.asarray(self.days, dtype=np.int64)
        for name in ("open", "high", "low", "close", "volume"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        n = len(self.days)
        if any(len(getattr(self, k)) != n for k in ("open", "high", "low", "close", "volume")):
            raise InputError(f"{self.ticker}: column lengths differ")
        if not self.ticker:
            raise InputError("empty ticker")
        if n and np.any(np.diff(self.days) <= 0):
            raise InputError(f"{self.ticker}: trading_day must be strictly increasing")
        prices = np.stack([self.open, self.high, self.low, self.close])
        if n and (not np.all(np.isfinite(prices)) or np.any(prices <= 0)):
            raise InputError(f"{self.ticker}: prices must be finite and positive")
        if n and np.any(self.volume < 0):
            raise InputError(f"{self.ticker}: negative volume")
        tol = 1e-12 * np.maximum(1.0, np.abs(prices).max(axis=0)) if n else 0.0
        if n and (
            np.any(self.low > np.minimum(self.open, self.close) + tol)
            or np.any(self.high < np.maximum(self.open, self.close) - tol)
        ):
            raise InputError(f"{self.ticker}: high/low envelope violated")

    def __len__(self) -> int:
        return len(self.days)

    @classmethod
    def from_bars(cls, ticker: str, bars) -> "MarketSeries":
        bars = sorted(bars, key=lambda b: b.trading_day)
        return cls(
            ticker,
            [b.trading_day for b in bars],
            [b.open for b in bars],
            [b.high for b in bars],
            [b.low for b in bars],
            [b.close for b in bars],
            [b.volume for b in bars],
        )

    def bars(self) -> list[MarketBar]:
        return [
            MarketBar(int(d), float(o), float(h), float(l), float(c), float(v))
            for d, o, h, l, c, v in zip(
                self.days, self.open, self.high, self.low, self.close, self.volume
            )
        ]

    def position(self, trading_day: int) -> int:
        i = int(np.searchsorted(self.days, trading_day))
        if i >= len(self.days) or self.days[i] != trading_day:
            raise CalendarRangeError(f"{self.ticker}: no bar on trading_day {trading_day}")
        return i

    def next_returns(self) -> np.ndarray:
        """close_{i+1}/close_i - 1 per bar; NaN on the last bar."""
        out = np.full(len(self.close), np.nan)
        out[:-1] = self.close[1:] / self.close[:-1] - 1.0
        return out


@dataclass
class RegimeParams:
    """Regime-switching GBM parameters; one entry per regime."""

    drift: tuple = (0.0004, -0.0008)
    vol: tuple = (0.012, 0.028)
    switch_prob: tuple = (0.02, 0.06)
    log_volume_mean: tuple = (13.8, 14.2)
    log_volume_sigma: float = 0.30
    gap_fraction: float = 0.25
    range_fraction: float = 0.5
    start_price: float = 100.0

    def __post_init__(self):
        k = len(self.drift)
        if not (len(self.vol) == len(self.switch_prob) == len(self.log_volume_mean) == k) or k < 1:
            raise InputError("regime parameter tuples must share one non-zero length")
        if any(v < 0 for v in self.vol) or any(not 0 <= p <= 1 for p in self.switch_prob):
            raise InputError("vol must be >= 0 and switch_prob in [0, 1]")
        if self.start_price <= 0:
            raise InputError("start_price must be positive")


def generate_market(
    seed: int,
    n_tickers: int,
    n_days: int,
    regime_params: RegimeParams | None = None,
) -> list[MarketSeries]:
    if n_days < MIN_SYNTH_DAYS:
        raise WarmupError(f"n_days={n_days} < {MIN_SYNTH_DAYS} needed for 20-day windows")
    if n_tickers < 1:
        raise InputError("n_tickers must be >= 1")
    p = regime_params or RegimeParams()
    rng = substream(seed, "market")
    drift = np.asarray(p.drift, dtype=np.float64)
    vol = np.asarray(p.vol, dtype=np.float64)
    switch = np.asarray(p.switch_prob, dtype=np.float64)
    lvm = np.asarray(p.log_volume_mean, dtype=np.float64)
    n_regimes = len(drift)

    out = []
    for k in range(n_tickers):
        z = rng.standard_normal((n_days, 5))
        u = rng.random(n_days)
        regime = np.empty(n_days, dtype=np.int64)
        state = 0
        for t in range(n_days):
            if t > 0 and n_regimes > 1 and u[t] < switch[state]:
                state = (state + 1) % n_regimes
            regime[t] = state
        sig = vol[regime]
        log_ret = drift[regime] - 0.5 * sig**2 + sig * z[:, 0]
        log_ret[0] = 0.0
        close = p.start_price * np.exp(np.cumsum(log_ret))
        prev_close = np.concatenate([[p.start_price], close[:-1]])
        open_ = prev_close * np.exp(p.gap_fraction * sig * z[:, 1])
        top = np.maximum(open_, close)
        bottom = np.minimum(open_, close)
        high = top * np.exp(p.range_fraction * sig * np.abs(z[:, 2]))
        low = bottom * np.exp(-p.range_fraction * sig * np.abs(z[:, 3]))
        volume = np.exp(lvm[regime] + p.log_volume_sigma * z[:, 4])
        out.append(MarketSeries(f"T{k:03d}", np.arange(n_days), open_, high, low, close, volume))
    return out


def compute_factors(series: MarketSeries, t: int) -> FactorVector:
    """Factor vector at trading day ``t`` from bars with day <= t only."""
    i = series.position(t)
    if i + 1 < WARMUP_BARS:
        raise WarmupError(f"{series.ticker}: {i + 1} bars through day {t}, need {WARMUP_BARS}")
    close = series.close[i - 20 : i + 1]
    volume = series.volume[i - 19 : i + 1]
    rets = close[1:] / close[:-1] - 1.0
    p_t = close[-1]
    mu_v = volume.mean()
    sigma_v = volume.std()
    if sigma_v <= _VOLUME_STD_EPS * max(1.0, abs(mu_v)):
        volu_z = 0.0
    else:
        volu_z = float((volume[-1] - mu_v) / sigma_v)
    return FactorVector(
        ret_1d=float(p_t / close[-2] - 1.0),
        ret_5d=float(p_t / close[-6] - 1.0),
        vol_5d=float(rets[-5:].std()),
        vol_20d=float(rets.std()),
        volu_z_20d=volu_z,
        dist_sma20=float(p_t / close[1:].mean() - 1.0),
    )


def factor_table(series: MarketSeries) -> tuple[np.ndarray, np.ndarray]:
    """(days, factors[n, 6]) for every bar past warmup; warmup rows dropped."""
    idx = range(WARMUP_BARS - 1, len(series))
    days = np.array([series.days[i] for i in idx], dtype=np.int64)
    if len(days) == 0:
        return days, np.zeros((0, len(FACTOR_NAMES)))
    rows = np.stack([compute_factors(series, int(d)).as_array() for d in days])
    return days, rows


def read_market_csv(path) -> tuple[list[MarketSeries], TradingCalendar | None]:
    """Parse ``ticker,trading_day,open,high,low,close,volume``.

    ``trading_day`` is either an integer index or an ISO date. With dates the
    calendar is the sorted union of all dates in the file.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"market CSV not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    required = {"ticker", "trading_day", "open", "high", "low", "close", "volume"}
    if not rows or not required.issubset(rows[0]):
        raise InputError(f"{path}: missing columns, need {sorted(required)}")
    raw_days = [r["trading_day"].strip() for r in rows]
    calendar = None
    if all(_is_int(d) for d in raw_days):
        days = [int(d) for d in raw_days]
    else:
        try:
            dates = [dt.date.fromisoformat(d) for d in raw_days]
        except ValueError as exc:
            raise InputError(f"{path}: trading_day must be integer or ISO date") from exc
        calendar = TradingCalendar(sorted(set(dates)))
        days = [calendar.day_of(d) for d in dates]
    by_ticker: dict[str, list[MarketBar]] = {}
    for r, d in zip(rows, days):
        bar = MarketBar(d, float(r["open"]), float(r["high"]), float(r["low"]),
                        float(r["close"]), float(r["volume"]))
        by_ticker.setdefault(r["ticker"].strip(), []).append(bar)
    series = []
    for ticker in sorted(by_ticker):
        bars = by_ticker[ticker]
        if len({b.trading_day for b in bars}) != len(bars):
            raise InputError(f"{path}: duplicate trading_day for {ticker}")
        series.append(MarketSeries.from_bars(ticker, bars))
    return series, calendar


def write_market_csv(path, series: list[MarketSeries], calendar: TradingCalendar | None = None):
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["ticker", "trading_day", "open", "high", "low", "close", "volume"])
        for s in series:
            for b in s.bars():
                day = calendar.date_of(b.trading_day).isoformat() if calendar else b.trading_day
                w.writerow([s.ticker, day, repr(b.open), repr(b.high), repr(b.low),
                            repr(b.close), repr(b.volume)])


def write_factor_csv(path, series: list[MarketSeries]):
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["ticker", "trading_day", *FACTOR_NAMES])
        for s in series:
            days, rows = factor_table(s)
            for d, row in zip(days, rows):
                w.writerow([s.ticker, int(d), *[repr(float(x)) for x in row]])


def _is_int(s: str) -> bool:
    try:
        int(s)
    except ValueError:
        return False
    return True
