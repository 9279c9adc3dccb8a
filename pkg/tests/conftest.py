import numpy as np
import pytest

from kicl.discourse import baseline_signals, generate_discourse
from kicl.fixtures import SYNTH_START
from kicl.marketdata import TradingCalendar, generate_market
from kicl.replay import build_replay, chronological_split


def small_world(seed=0, n_tickers=4, n_days=160, intensity=2.0, n_kols=2):
    from kicl.discourse import DiscourseParams

    series = generate_market(seed, n_tickers, n_days)
    cal = TradingCalendar.business_days(SYNTH_START, n_days)
    events = generate_discourse(seed, [s.ticker for s in series], cal, intensity,
                                DiscourseParams(n_kols=n_kols))
    sigs = baseline_signals(events, cal)
    kols = [f"kol_{k:02d}" for k in range(n_kols)]
    return series, cal, sigs, build_replay(series, sigs, kol_ids=kols)


@pytest.fixture(scope="session")
def world():
    return small_world()


@pytest.fixture(scope="session")
def buffer(world):
    return world[3]


@pytest.fixture(scope="session")
def splits(buffer):
    return chronological_split(buffer)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    from _acceptance_log import RESULTS
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(RESULTS):
        title, ok, detail = RESULTS[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] #{n:>2} {title}: {detail}")
