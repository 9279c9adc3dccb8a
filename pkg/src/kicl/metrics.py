"""Performance and betrayal metrics, event segmentation, and report tables."""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import BankruptcyError, InputError
from .portfolio import DRAWDOWN_GUARD

TRADING_DAYS = 252
DENOM_GUARD = 1e-8
REPORT_COLUMNS = ("method", "split", "kol_id", "ret", "sharpe", "mdd", "wr", "uer", "drr",
                  "bd", "cg")
HIGHER_IS_BETTER = {"ret": True, "sharpe": True, "wr": True, "mdd": False, "uer": False,
                    "drr": False, "bd": False, "cg": False}


def perf_metrics(daily_returns) -> dict:
    """CR, annualized Sharpe (ddof=1, 0 when flat), and max drawdown.

    The equity path starts at 1.0 before the first return.
    """
    r = np.asarray(daily_returns, dtype=np.float64).reshape(-1)
    if r.size == 0:
        raise InputError("empty return series")
    if np.any(r <= -1.0):
        raise BankruptcyError("a daily return of -100% or worse wipes out equity")
    equity = np.concatenate([[1.0], np.cumprod(1.0 + r)])
    peak = np.maximum.accumulate(equity)
    mdd = float(np.max((peak - equity) / (peak + DRAWDOWN_GUARD)))
    # sigma is exactly 0 iff all returns are equal; np.std leaves round-off there
    sd = float(np.std(r, ddof=1)) if r.size > 1 and np.ptp(r) > 0.0 else 0.0
    sharpe = 0.0 if sd == 0.0 else float(np.mean(r) / sd * math.sqrt(TRADING_DAYS))
    return {"CR": float(equity[-1] - 1.0), "Sharpe": sharpe, "MDD": mdd}


def betrayal_metrics(a, a_base, tau_entry: float = 5e-4, tau_act: float | None = None) -> dict:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(a_base, dtype=np.float64)
    if a.shape != b.shape or a.size == 0:
        raise InputError("policy and base streams must be non-empty and aligned")
    tau_act = tau_entry if tau_act is None else tau_act
    sil = np.abs(b) < tau_entry
    sig = ~sil
    uer = np.count_nonzero(sil & (np.abs(a) > tau_act)) / (np.count_nonzero(sil) + DENOM_GUARD)
    drr = np.count_nonzero(sig & (a * b < 0.0)) / (np.count_nonzero(sig) + DENOM_GUARD)
    return {"UER": float(uer), "DRR": float(drr), "BD": float(np.mean(np.abs(a - b)))}


def correlation_gap(a, a_base) -> float:
    """1 - Pearson(a, base) over steps where both point the same way."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(a_base, dtype=np.float64)
    q = a * b > 0.0
    if np.count_nonzero(q) < 2:
        return 0.0
    x, y = a[q] - a[q].mean(), b[q] - b[q].mean()
    den = math.sqrt(float(np.dot(x, x)) * float(np.dot(y, y)))
    if den == 0.0:
        return 0.0
    return 1.0 - float(np.dot(x, y)) / den


@dataclass
class EvalTrace:
    """One KOL's aligned per-row streams, rows sorted by (ticker, day)."""

    kol_id: str
    tickers: np.ndarray
    days: np.ndarray
    a_policy: np.ndarray
    a_base: np.ndarray
    p_prev: np.ndarray
    r_policy: np.ndarray  # per-row contribution
    r_base: np.ndarray
    fresh: np.ndarray

    def __post_init__(self):
        n = len(self.days)
        for name in ("tickers", "a_policy", "a_base", "p_prev", "r_policy", "r_base", "fresh"):
            if len(getattr(self, name)) != n:
                raise InputError(f"trace column {name} has length {len(getattr(self, name))}, "
                                 f"expected {n}")

    def daily(self, which="policy"):
        r = self.r_policy if which == "policy" else self.r_base
        days = np.unique(self.days)
        pos = np.searchsorted(days, self.days)
        out = np.zeros(len(days))
        np.add.at(out, pos, r)
        return days, out


def build_traces(policy, baseline) -> dict:
    """Per-KOL traces from two decode results over the same buffer."""
    for name in ("kol_ids", "tickers", "trading_days"):
        if not np.array_equal(getattr(policy, name), getattr(baseline, name)):
            raise InputError(f"misaligned traces: {name} differ")
    if not np.array_equal(policy.a_base, baseline.a_base):
        raise InputError("misaligned traces: anchors differ")
    out = {}
    kols = policy.kol_ids.astype(str)
    for kol in sorted(set(kols)):
        rows = np.flatnonzero(kols == kol)
        rows = rows[np.lexsort((policy.trading_days[rows], policy.tickers[rows].astype(str)))]
        out[kol] = EvalTrace(kol, policy.tickers[rows], policy.trading_days[rows],
                             policy.weights[rows], policy.a_base[rows], policy.p_prev[rows],
                             policy.contrib[rows], baseline.contrib[rows], policy.fresh[rows])
    return out


@dataclass(frozen=True)
class Event:
    ticker: str
    start: int  # row index into the trace
    end: int  # exclusive
    r_policy: float
    r_base: float


def _series_bounds(trace: EvalTrace):
    t = trace.tickers.astype(str)
    edges = [0] + [i for i in range(1, len(t)) if t[i] != t[i - 1]] + [len(t)]
    return list(zip(edges[:-1], edges[1:]))


def segment_events(trace: EvalTrace, tau_entry: float = 5e-4, horizon_cap: int = 20,
                   until_expiry: bool = True) -> list[Event]:
    """Events open on fresh rows with an active anchor and close at the next
    fresh row, at ``horizon_cap`` rows, or (if ``until_expiry``) once the
    anchor drops below ``tau_entry``."""
    if horizon_cap < 1:
        raise InputError("horizon_cap must be >= 1")
    events = []
    active = np.abs(trace.a_base) >= tau_entry
    for lo, hi in _series_bounds(trace):
        for i in range(lo, hi):
            if not (trace.fresh[i] and active[i]):
                continue
            j = i + 1
            while (j < hi and j - i < horizon_cap and not trace.fresh[j]
                   and (active[j] or not until_expiry)):
                j += 1
            rp = float(np.prod(1.0 + trace.r_policy[i:j]) - 1.0)
            rb = float(np.prod(1.0 + trace.r_base[i:j]) - 1.0)
            events.append(Event(str(trace.tickers[i]), i, j, rp, rb))
    return events


def event_win_rate(trace: EvalTrace, tau_entry: float = 5e-4, horizon_cap: int = 20):
    """(WR, flag). Ties count as losses; no events gives WR 0 with a flag."""
    events = segment_events(trace, tau_entry, horizon_cap)
    if not events:
        return 0.0, "no events"
    wins = sum(e.r_policy > e.r_base for e in events)
    if wins == 0 and all(e.r_policy == e.r_base for e in events):
        return 0.0, "all ties"
    return wins / len(events), ""


@dataclass
class EvalReport:
    ret: float
    sharpe: float
    mdd: float
    wr: float
    uer: float
    drr: float
    bd: float
    cg: float
    flags: list = field(default_factory=list)

    def values(self) -> dict:
        d = asdict(self)
        d.pop("flags")
        return d


def evaluate(trace: EvalTrace, tau_entry: float = 5e-4, tau_act: float | None = None,
             horizon_cap: int = 20) -> EvalReport:
    _, daily = trace.daily("policy")
    perf = perf_metrics(daily)
    bet = betrayal_metrics(trace.a_policy, trace.a_base, tau_entry, tau_act)
    wr, flag = event_win_rate(trace, tau_entry, horizon_cap)
    return EvalReport(perf["CR"], perf["Sharpe"], perf["MDD"], wr, bet["UER"], bet["DRR"],
                      bet["BD"], correlation_gap(trace.a_policy, trace.a_base),
                      [flag] if flag else [])


def mean_report(reports) -> EvalReport:
    reports = list(reports)
    if not reports:
        raise InputError("no reports to average")
    vals = {k: float(np.mean([r.values()[k] for r in reports])) for k in reports[0].values()}
    return EvalReport(**vals)


def ablation_deltas(variant: EvalReport, anchor: EvalReport) -> dict:
    """Return/Sharpe as percent of |anchor|, MDD in percentage points, BD absolute."""
    flags = []

    def rel(v, a, name):
        if a == 0.0:
            flags.append(f"{name}: zero anchor")
            return 0.0 if v == a else math.nan
        return 100.0 * (v - a) / abs(a)

    return {
        "d_return_pct": rel(variant.ret, anchor.ret, "return"),
        "d_sharpe_pct": rel(variant.sharpe, anchor.sharpe, "sharpe"),
        "d_mdd_pp": 100.0 * (variant.mdd - anchor.mdd),
        "d_bd": variant.bd - anchor.bd,
        "flags": flags,
    }


def hard_betrayal_steps(a, a_base, tau_entry: float = 5e-4, tau_act: float | None = None):
    """Rows counted by the UER or DRR numerator."""
    a = np.asarray(a, float)
    b = np.asarray(a_base, float)
    tau_act = tau_entry if tau_act is None else tau_act
    sil = np.abs(b) < tau_entry
    return (sil & (np.abs(a) > tau_act)) | (~sil & (a * b < 0.0))


def profit_linked_betrayal(trace: EvalTrace, tau_entry: float = 5e-4,
                           tau_act: float | None = None, horizon_cap: int = 20):
    """Among excess-positive events, the fraction with a hard-betrayal step.

    Spans run to the next fresh signal or the horizon, ignoring anchor expiry,
    so positions held past the anchor are inside the event. Returns
    ``(probability or None, n_events, n_excess_positive, n_betrayed)``.
    """
    bad = hard_betrayal_steps(trace.a_policy, trace.a_base, tau_entry, tau_act)
    evs = [e for e in segment_events(trace, tau_entry, horizon_cap, until_expiry=False)
           if e.r_policy > e.r_base]
    n_all = len(segment_events(trace, tau_entry, horizon_cap, until_expiry=False))
    if not evs:
        return None, n_all, 0, 0
    hit = sum(bool(bad[e.start : e.end].any()) for e in evs)
    return hit / len(evs), n_all, len(evs), hit


# --- report output ---------------------------------------------------------------


@dataclass
class ReportRow:
    method: str
    split: str
    kol_id: str
    report: EvalReport


def _fmt(x: float) -> str:
    return repr(float(x))


def write_report_csv(path, rows) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in rows:
            v = r.report.values()
            w.writerow([r.method, r.split, r.kol_id, *[_fmt(v[c]) for c in REPORT_COLUMNS[3:]]])


def read_report_csv(path) -> list[ReportRow]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        return [ReportRow(r["method"], r["split"], r["kol_id"],
                          EvalReport(**{c: float(r[c]) for c in REPORT_COLUMNS[3:]}))
                for r in csv.DictReader(fh)]


def markdown_table(rows, split="test", kol_id="ALL") -> str:
    """Method x metric table with **best** and _second_ markers per column."""
    sel = [r for r in rows if r.split == split and r.kol_id == kol_id]
    cols = REPORT_COLUMNS[3:]
    marks = {}
    for c in cols:
        vals = sorted({round(r.report.values()[c], 12) for r in sel},
                      reverse=HIGHER_IS_BETTER[c])
        marks[c] = vals[:2]
    lines = ["| method | " + " | ".join(cols) + " |",
             "|---|" + "---|" * len(cols)]
    for r in sel:
        cells = []
        for c in cols:
            v = r.report.values()[c]
            s = f"{v:.4f}"
            key = round(v, 12)
            if marks[c] and key == marks[c][0]:
                s = f"**{s}**"
            elif len(marks[c]) > 1 and key == marks[c][1]:
                s = f"_{s}_"
            cells.append(s)
        lines.append(f"| {r.method} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"
