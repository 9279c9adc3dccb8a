"""Stage-cached orchestration: data, replay, training, decoding, reports,
ablations and the profit-linked betrayal diagnostic."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import platform
import time
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import __version__
from .baselines import MethodSpec, decode_method, load_model, run_rmb, train_method
from .config import RunConfig, canonical_hash
from .discourse import (BaselineSignal, baseline_signals, generate_discourse, read_events_csv,
                        write_events_csv)
from .errors import KiclError, StageError
from .fixtures import SYNTH_START, adversarial_replay
from .marketdata import TradingCalendar, generate_market, read_market_csv, write_market_csv
from .metrics import (EvalReport, ReportRow, ablation_deltas, build_traces, evaluate,
                      markdown_table, mean_report, profit_linked_betrayal, write_report_csv)
from .policy import DecodeResult, KiclModel, write_decode_csv
from .replay import (ReplayBuffer, build_replay, chronological_split, partition_stats,
                     read_replay, write_replay)
from .training import TrainLog

log = logging.getLogger("kicl")

OUTPUT_ROOT_ENV = "KICL_OUTPUT_ROOT"
SPLITS = ("train", "val", "test")
ABLATION_VARIANTS = ("Baseline", "WO-RL-COMPLETION", "WO-REGIME-SPLIT", "WO-H", "KICL (Full)")
ABLATION_COMPONENTS = ("Anchor", "Policy", "RL Comp.", "Regime", "Hard")
COMPONENT_MATRIX = {
    "Baseline": (1, 0, 0, 0, 1),
    "WO-RL-COMPLETION": (1, 1, 0, 0, 1),
    "WO-REGIME-SPLIT": (1, 1, 1, 0, 1),
    "WO-H": (1, 1, 1, 1, 0),
    "KICL (Full)": (1, 1, 1, 1, 1),
}


def method_dirname(method: str) -> str:
    return method.lower().replace("+", "_").replace("-", "_").replace(" ", "_")


def resolve_output_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.output_dir)
    if not out.is_absolute():
        out = Path(os.environ.get(OUTPUT_ROOT_ENV, ".")) / out
    return out


def write_signals_csv(path, signals) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["kol_id", "ticker", "trading_day", "sentiment", "confidence", "a_raw",
                    "n_events"])
        for s in signals:
            w.writerow([s.kol_id, s.ticker, s.trading_day, repr(s.sentiment),
                        repr(s.confidence), repr(s.a_raw), s.n_events])


class Pipeline:
    """One run directory. Each stage records the hash of everything it depends
    on; a stage whose recorded hash matches reloads its outputs instead of
    recomputing them."""

    def __init__(self, cfg: RunConfig, out_dir: Path | None = None, use_cache: bool = True):
        self.cfg = cfg.validate()
        self.out = Path(out_dir) if out_dir is not None else resolve_output_dir(cfg)
        self.use_cache = use_cache
        self.timings: dict = {}
        self.checksums: dict = {}
        self.cached: dict = {}
        self.flags: list = []
        self._market = self._signals = self._replay = None
        self._models: dict = {}

    # -- stage bookkeeping ------------------------------------------------------------

    def _stage_dir(self, name) -> Path:
        d = self.out / name
        d.mkdir(parents=True, exist_ok=True)
        return d

    def _fresh(self, name, key, files) -> bool:
        d = self.out / name
        marker = d / "stage.json"
        if not self.use_cache or not marker.exists():
            return False
        try:
            ok = json.loads(marker.read_text()).get("key") == key
        except json.JSONDecodeError:
            return False
        return ok and all((d / f).exists() for f in files)

    def _mark(self, name, key) -> None:
        (self._stage_dir(name) / "stage.json").write_text(json.dumps({"key": key}) + "\n")

    def _run(self, stage, fn):
        t = time.perf_counter()
        try:
            return fn()
        except StageError:
            raise
        except (KiclError, OSError, ValueError) as e:
            raise StageError(stage, str(e)) from e
        finally:
            self.timings[stage] = self.timings.get(stage, 0.0) + time.perf_counter() - t

    # -- data --------------------------------------------------------------------------

    def market_key(self) -> str:
        m = self.cfg.market
        src = _file_sha(m.csv) if not m.synth and Path(m.csv).exists() else None
        return canonical_hash({"seed": self.cfg.seed, "market": asdict(m), "source": src})

    def market(self):
        if self._market is None:
            self._market = self._run("market", self._load_market)
        return self._market

    def _load_market(self):
        m = self.cfg.market
        key = self.market_key()
        files = ("market.csv",)
        if not m.synth:
            path = Path(m.csv)
            if not path.exists():
                raise StageError("market", f"market CSV not found: {path}")
            series, cal = read_market_csv(path)
            if cal is None:
                cal = TradingCalendar.business_days(SYNTH_START, len(series[0]))
            return series, cal
        if self._fresh("market", key, files):
            self.cached["market"] = True
            series, cal = read_market_csv(self.out / "market" / "market.csv")
            return series, cal
        series = generate_market(self.cfg.seed, m.n_tickers, m.n_days, m.regime)
        cal = TradingCalendar.business_days(SYNTH_START, m.n_days)
        d = self._stage_dir("market")
        write_market_csv(d / "market.csv", series, cal)
        self._mark("market", key)
        return series, cal

    def discourse_key(self) -> str:
        d = self.cfg.discourse
        src = _file_sha(d.csv) if not d.synth and Path(d.csv).exists() else None
        return canonical_hash({"market": self.market_key(), "seed": self.cfg.seed,
                               "discourse": asdict(d), "source": src})

    def signals(self) -> list[BaselineSignal]:
        if self._signals is None:
            series, cal = self.market()
            self._signals = self._run("discourse", lambda: self._load_signals(series, cal))
        return self._signals

    def _load_signals(self, series, cal):
        dcfg = self.cfg.discourse
        key = self.discourse_key()
        if not dcfg.synth:
            path = Path(dcfg.csv)
            if not path.exists():
                raise StageError("discourse", f"event CSV not found: {path}")
            return baseline_signals(read_events_csv(path), cal)
        d = self.out / "discourse"
        if self._fresh("discourse", key, ("events.csv",)):
            self.cached["discourse"] = True
            events = read_events_csv(d / "events.csv")
        else:
            events = generate_discourse(self.cfg.seed, [s.ticker for s in series], cal,
                                        dcfg.intensity, dcfg.params)
            d = self._stage_dir("discourse")
            write_events_csv(d / "events.csv", events)
        sigs = baseline_signals(events, cal)
        write_signals_csv(self._stage_dir("discourse") / "signals.csv", sigs)
        self._mark("discourse", key)
        return sigs

    def replay_key(self) -> str:
        return canonical_hash({"discourse": self.discourse_key(),
                               "behavior": asdict(self.cfg.behavior),
                               "portfolio": asdict(self.cfg.portfolio),
                               "n_kols": self.cfg.discourse.params.n_kols})

    def replay(self) -> ReplayBuffer:
        if self._replay is None:
            self._replay = self._run("replay", self._load_replay)
            self.checksums["replay"] = self._replay.checksum()
        return self._replay

    def _load_replay(self):
        key = self.replay_key()
        d = self.out / "replay"
        if self._fresh("replay", key, ("transitions.csv", "states.csv", "manifest.json")):
            self.cached["replay"] = True
            return read_replay(d)
        series, _ = self.market()
        sigs = self.signals()
        kols = [f"kol_{k:02d}" for k in range(self.cfg.discourse.params.n_kols)] \
            if self.cfg.discourse.synth else None
        buf = build_replay(series, sigs, self.cfg.behavior, self.cfg.portfolio, kols)
        write_replay(self._stage_dir("replay"), buf,
                     {"seed": self.cfg.seed, "partition": partition_stats(buf)})
        self._mark("replay", key)
        return buf

    def splits(self, buf: ReplayBuffer | None = None) -> dict:
        buf = buf if buf is not None else self.replay()
        parts = self._run("split", lambda: chronological_split(buf, self.cfg.eval.split_ratios))
        return dict(zip(SPLITS, parts))

    # -- methods -----------------------------------------------------------------------

    def method_key(self, spec: MethodSpec, kicl_cfg=None, data_key=None) -> str:
        return canonical_hash({"replay": data_key or self.replay_key(), "seed": self.cfg.seed,
                               "split": list(self.cfg.eval.split_ratios),
                               "kicl": asdict(kicl_cfg or self.cfg.kicl),
                               "spec": asdict(spec), "cap": self.cfg.portfolio.per_asset_cap})

    def train(self, spec: MethodSpec, splits: dict | None = None, kicl_cfg=None,
              tag: str | None = None, data_key=None):
        """Train (or reload) one method; returns the model or None."""
        if not spec.trains:
            return None
        name = tag or spec.method
        if name in self._models:
            return self._models[name]
        kcfg = kicl_cfg or self.cfg.kicl
        stage = f"methods/{method_dirname(name)}"
        key = self.method_key(spec, kcfg, data_key)

        def work():
            d = self.out / stage
            if self._fresh(stage, key, ("model.npz", "model.json")):
                self.cached[stage] = True
                return load_model(d / "model")
            sp = splits if splits is not None else self.splits()
            model, tlog = train_method(spec, sp["train"], kcfg, self.cfg.seed,
                                       self.cfg.portfolio.per_asset_cap)
            d = self._stage_dir(stage)
            if isinstance(model, KiclModel):
                model.meta["method"] = spec.method
            model.save(d / "model")
            (tlog or TrainLog()).write_csv(d / "train_log.csv")
            if tlog and tlog.bc_epoch_losses:
                (d / "bc_losses.json").write_text(json.dumps(tlog.bc_epoch_losses) + "\n")
            self._mark(stage, key)
            return model

        model = self._run(stage, work)
        self._models[name] = model
        return model

    def decode(self, spec: MethodSpec, model, buf: ReplayBuffer,
               hard_scope: str | None = None) -> DecodeResult:
        return self._run(f"decode/{spec.method}",
                         lambda: decode_method(spec, model, buf, self.cfg.portfolio, hard_scope))

    # -- evaluation --------------------------------------------------------------------

    def evaluate_split(self, spec: MethodSpec, model, buf: ReplayBuffer, split: str,
                       write_dir: Path | None = None, hard_scope: str | None = None):
        res = self.decode(spec, model, buf, hard_scope)
        base = run_rmb(buf, self.cfg.portfolio)
        traces = build_traces(res, base)
        e = self.cfg.eval
        tau = self.cfg.portfolio.tau_entry
        reports = {k: evaluate(t, tau, e.tau_act, e.horizon_cap) for k, t in traces.items()}
        if write_dir is not None:
            write_decode_csv(write_dir / f"decode_{split}.csv", res)
        return res, traces, reports

    def run(self) -> dict:
        """Full pipeline for the configured method list."""
        buf = self.replay()
        sp = self.splits(buf)
        rows, plb = [], []
        for spec in self.cfg.method_specs():
            model = self.train(spec, sp)
            mdir = self._stage_dir(f"methods/{method_dirname(spec.method)}")
            method_rows = []
            for split in self.cfg.eval.splits:
                _, traces, reports = self._run(
                    "eval", lambda: self.evaluate_split(spec, model, sp[split], split, mdir))
                for kol in sorted(reports):
                    method_rows.append(ReportRow(spec.method, split, kol, reports[kol]))
                method_rows.append(ReportRow(spec.method, split, "ALL",
                                             mean_report(reports.values())))
                for kol in sorted(traces):
                    p, n_ev, n_pos, n_bad = profit_linked_betrayal(
                        traces[kol], self.cfg.portfolio.tau_entry, self.cfg.eval.tau_act,
                        self.cfg.eval.horizon_cap)
                    if p is None:
                        self.flags.append(f"{spec.method}/{split}/{kol}: no excess-positive events")
                        continue
                    plb.append((spec.method, split, kol, n_ev, n_pos, n_bad, p))
            write_report_csv(mdir / "metrics.csv", method_rows)
            rows += method_rows
        rdir = self._stage_dir("report")
        write_report_csv(rdir / "report.csv", rows)
        write_profit_linked_csv(rdir / "profit_linked.csv", plb)
        with (rdir / "report.md").open("w", encoding="utf-8") as fh:
            for split in self.cfg.eval.splits:
                fh.write(f"## {split}\n\n")
                fh.write(markdown_table(rows, split))
                fh.write("\n")
        self.checksums["report"] = _file_sha(rdir / "report.csv")
        self.write_manifest()
        return {"rows": rows, "profit_linked": plb}

    def write_manifest(self) -> None:
        manifest = {
            "config_hash": self.cfg.hash(),
            "seeds": {"root": self.cfg.seed},
            "versions": {"kicl": __version__, "numpy": np.__version__,
                         "python": platform.python_version()},
            "stage_checksums": self.checksums,
            "cached_stages": sorted(self.cached),
            "wall_clock_s": {k: round(v, 4) for k, v in sorted(self.timings.items())},
            "flags": self.flags,
            "config": self.cfg.to_dict(),
        }
        self.out.mkdir(parents=True, exist_ok=True)
        (self.out / "run_manifest.json").write_text(json.dumps(manifest, indent=1,
                                                               sort_keys=True) + "\n")

    # -- ablations ---------------------------------------------------------------------

    def ablate(self, split: str = "test") -> dict:
        """Constructive ladder plus the hard-scope study on one split."""
        if self.cfg.ablation.fixture == "adversarial":
            buf = self._run("replay", lambda: adversarial_replay(self.cfg.seed))
            data_key = canonical_hash({"fixture": "adversarial", "seed": self.cfg.seed})
        else:
            buf = self.replay()
            data_key = self.replay_key()
        sp = self.splits(buf)
        k = self.cfg.kicl
        kicl = MethodSpec("KICL")
        variants = {
            "WO-RL-COMPLETION": replace(k, iql_steps=0, regime_split=False, hard_scope="both"),
            "WO-REGIME-SPLIT": replace(k, regime_split=False, hard_scope="both"),
            "WO-H": replace(k, regime_split=True, hard_scope="none"),
            "KICL (Full)": replace(k, regime_split=True, hard_scope="both"),
        }
        tags = {"WO-H": "ablate-none", "KICL (Full)": "ablate-both"}
        reports = {"Baseline": self._ablation_report(MethodSpec("RMB"), None, sp[split])}
        for name, kcfg in variants.items():
            model = self.train(kicl, sp, kcfg, tag=tags.get(name, f"ablate-{name}"),
                               data_key=data_key)
            reports[name] = self._ablation_report(kicl, model, sp[split])
        anchor = reports["Baseline"]
        ladder = [(v, reports[v], ablation_deltas(reports[v], anchor)) for v in ABLATION_VARIANTS]

        # hard-scope study: projected vs unprojected training, each decoded both ways
        scopes = {}
        for scope in self.cfg.ablation.hard_scopes:
            projected = scope in ("both", "train_only")
            kcfg = replace(k, regime_split=True, hard_scope="both" if projected else "none")
            model = self.train(kicl, sp, kcfg, tag=f"ablate-{kcfg.hard_scope}",
                               data_key=data_key)
            scopes[scope] = self._ablation_report(kicl, model, sp[split], scope)
        adir = self._stage_dir("ablation")
        write_ablation_csv(adir / "ablation.csv", ladder)
        write_scope_csv(adir / "hard_scope.csv", scopes, anchor)
        (adir / "components.md").write_text(component_matrix_markdown())
        self.write_manifest()
        return {"ladder": ladder, "scopes": scopes}

    def _ablation_report(self, spec, model, buf, hard_scope=None) -> EvalReport:
        _, _, reports = self.evaluate_split(spec, model, buf, "test", hard_scope=hard_scope)
        return mean_report(reports.values())


def _file_sha(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_profit_linked_csv(path, rows) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "split", "kol_id", "n_events", "n_excess_positive",
                    "n_betrayed", "probability"])
        for r in rows:
            w.writerow([*r[:6], repr(float(r[6]))])


def write_ablation_csv(path, ladder) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", "ret", "sharpe", "mdd", "bd", "uer", "drr", "d_return_pct",
                    "d_sharpe_pct", "d_mdd_pp", "d_bd", "flags"])
        for name, rep, d in ladder:
            w.writerow([name, *[repr(x) for x in (rep.ret, rep.sharpe, rep.mdd, rep.bd,
                                                  rep.uer, rep.drr)],
                        *[repr(float(d[k])) for k in ("d_return_pct", "d_sharpe_pct",
                                                      "d_mdd_pp", "d_bd")],
                        ";".join(d["flags"])])


def write_scope_csv(path, scopes, anchor) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["hard_scope", "ret", "sharpe", "mdd", "bd", "uer", "drr", "d_return_pct"])
        for scope, rep in scopes.items():
            d = ablation_deltas(rep, anchor)
            w.writerow([f"hard_{scope}", *[repr(x) for x in (rep.ret, rep.sharpe, rep.mdd,
                                                             rep.bd, rep.uer, rep.drr)],
                        repr(float(d["d_return_pct"]))])


def component_matrix_markdown() -> str:
    lines = ["| Variant | " + " | ".join(ABLATION_COMPONENTS) + " |",
             "|---|" + "---|" * len(ABLATION_COMPONENTS)]
    for v in ABLATION_VARIANTS:
        lines.append(f"| {v} | " + " | ".join("x" if c else "" for c in COMPONENT_MATRIX[v])
                     + " |")
    return "\n".join(lines) + "\n"
