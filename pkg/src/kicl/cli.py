"""Command-line entry point. Exit codes: 0 ok, 2 config error, 3 stage failure."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from .baselines import METHODS, MethodSpec, load_methods_cfg
from .config import RunConfig, from_dict, load_config, preset
from .discourse import RankConfig, rank_kols, read_candidates, write_ranking_csv
from .errors import ConfigError, KiclError, StageError
from .metrics import markdown_table, read_report_csv
from .pipeline import Pipeline, method_dirname
from .policy import write_decode_csv

EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 2, 3
log = logging.getLogger("kicl")


def _set_path(d: dict, dotted: str, raw: str) -> None:
    keys = dotted.split(".")
    cur = d
    for k in keys[:-1]:
        if k not in cur or not isinstance(cur[k], dict):
            raise ConfigError(f"--set {dotted}: no such section {k!r}")
        cur = cur[k]
    if keys[-1] not in cur:
        raise ConfigError(f"--set {dotted}: no such key")
    cur[keys[-1]] = yaml.safe_load(raw)


def build_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else preset(args.preset)
    d = cfg.to_dict()
    if args.seed is not None:
        d["seed"] = args.seed
    if args.output_dir is not None:
        d["output_dir"] = args.output_dir
    if getattr(args, "methods", None):
        d["methods"] = [m.strip() for m in args.methods.split(",") if m.strip()]
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        _set_path(d, k.strip(), v)
    cfg = from_dict(d)
    methods_cfg = getattr(args, "methods_cfg", None)
    if methods_cfg:
        specs = load_methods_cfg(methods_cfg)
        cfg.methods = [s.method for s in specs]
        cfg.method_constants = {s.method: {**s.constants,
                                           **{k: getattr(s, k) for k in ("steps", "batch", "lr")
                                              if getattr(s, k) is not None}}
                                for s in specs}
        cfg.validate()
    return cfg


def _spec(cfg: RunConfig, method: str) -> MethodSpec:
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}")
    for s in cfg.method_specs():
        if s.method == method:
            return s
    return MethodSpec(method)


def cmd_gen_market(p: Pipeline, args) -> None:
    p.market()
    print(p.out / "market" / "market.csv")


def cmd_gen_discourse(p: Pipeline, args) -> None:
    sigs = p.signals()
    print(f"{len(sigs)} signals -> {p.out / 'discourse'}")


def cmd_build_replay(p: Pipeline, args) -> None:
    from .replay import partition_stats
    buf = p.replay()
    print(json.dumps(partition_stats(buf), sort_keys=True))
    p.write_manifest()


def cmd_train(p: Pipeline, args) -> None:
    spec = _spec(p.cfg, args.method)
    p.train(spec)
    p.write_manifest()
    print(p.out / "methods" / method_dirname(spec.method))


def cmd_decode(p: Pipeline, args) -> None:
    spec = _spec(p.cfg, args.method)
    model = p.train(spec)
    sp = p.splits()
    res = p.decode(spec, model, sp[args.split], args.hard_scope)
    d = p._stage_dir(f"methods/{method_dirname(spec.method)}")
    path = d / f"decode_{args.split}.csv"
    write_decode_csv(path, res)
    print(path)


def cmd_eval(p: Pipeline, args) -> None:
    spec = _spec(p.cfg, args.method)
    model = p.train(spec)
    sp = p.splits()
    _, _, reports = p.evaluate_split(spec, model, sp[args.split], args.split,
                                     hard_scope=args.hard_scope)
    for kol in sorted(reports):
        vals = reports[kol].values()
        print(kol, " ".join(f"{k}={v:.6g}" for k, v in vals.items()))


def cmd_pipeline(p: Pipeline, args) -> None:
    out = p.run()
    print(markdown_table(out["rows"], "test"), end="")
    print(f"report: {p.out / 'report' / 'report.csv'}")


def cmd_report(p: Pipeline, args) -> None:
    path = p.out / "report" / "report.csv"
    if not path.exists() or args.refresh:
        p.run()
    rows = read_report_csv(path)
    print(markdown_table(rows, args.split), end="")


def cmd_ablate(p: Pipeline, args) -> None:
    out = p.ablate(args.split)
    print("variant, ret, sharpe, mdd, bd, uer, drr, d_return_pct, d_sharpe_pct, d_mdd_pp, d_bd")
    for name, rep, d in out["ladder"]:
        print(f"{name}, {rep.ret:.6g}, {rep.sharpe:.6g}, {rep.mdd:.6g}, {rep.bd:.6g}, "
              f"{rep.uer:.6g}, {rep.drr:.6g}, {d['d_return_pct']:.4g}, "
              f"{d['d_sharpe_pct']:.4g}, {d['d_mdd_pp']:.4g}, {d['d_bd']:.4g}")
    print("hard_scope, ret, uer, drr, bd")
    for scope, rep in out["scopes"].items():
        print(f"hard_{scope}, {rep.ret:.6g}, {rep.uer:.6g}, {rep.drr:.6g}, {rep.bd:.6g}")


def cmd_rank_kols(args) -> None:
    cands = read_candidates(args.candidates)
    scores = rank_kols(cands, RankConfig())
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_ranking_csv(out, scores)
    print(out)


def _common(sp):
    sp.add_argument("--config", help="JSON or YAML run config")
    sp.add_argument("--preset", default="desk", help="full, desk or tiny (default desk)")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--output-dir", help="run directory; relative paths resolve under "
                                         "$KICL_OUTPUT_ROOT")
    sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                    help="override a config key, e.g. kicl.iql_steps=500")
    sp.add_argument("--no-cache", action="store_true", help="recompute every stage")
    return sp


def make_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="kicl", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    _common(sub.add_parser("gen-market", help="synthesize or ingest market bars"))
    _common(sub.add_parser("gen-discourse", help="synthesize or ingest discourse events"))
    _common(sub.add_parser("build-replay", help="assemble the transition replay"))
    for name, hlp in (("train", "train one method"), ("decode", "decode one method"),
                      ("eval", "evaluate one method")):
        sp = _common(sub.add_parser(name, help=hlp))
        sp.add_argument("--method", required=True, choices=METHODS)
        if name != "train":
            sp.add_argument("--split", default="test", choices=("train", "val", "test"))
            sp.add_argument("--hard-scope", choices=("both", "train_only", "infer_only", "none"))
    sp = _common(sub.add_parser("pipeline", help="run every stage for the method list"))
    sp.add_argument("--methods", help="comma-separated method ids")
    sp.add_argument("--methods-cfg", help="INI file selecting methods and constants")
    sp = _common(sub.add_parser("report", help="print the aggregate table"))
    sp.add_argument("--methods", help="comma-separated method ids")
    sp.add_argument("--split", default="test")
    sp.add_argument("--refresh", action="store_true", help="rerun the pipeline first")
    sp = _common(sub.add_parser("ablate", help="ablation ladder and hard-scope study"))
    sp.add_argument("--split", default="test", choices=("val", "test"))
    sp = sub.add_parser("rank-kols", help="score candidate KOL records")
    sp.add_argument("--candidates", required=True, help="JSON list of candidate records")
    sp.add_argument("--out", default="kol_ranking.csv")
    return ap


COMMANDS = {
    "gen-market": cmd_gen_market,
    "gen-discourse": cmd_gen_discourse,
    "build-replay": cmd_build_replay,
    "train": cmd_train,
    "decode": cmd_decode,
    "eval": cmd_eval,
    "pipeline": cmd_pipeline,
    "report": cmd_report,
    "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "rank-kols":
            cmd_rank_kols(args)
            return EXIT_OK
        cfg = build_config(args)
        p = Pipeline(cfg, use_cache=not args.no_cache)
        COMMANDS[args.command](p, args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as e:
        print(f"stage failure: {e}", file=sys.stderr)
        return EXIT_STAGE
    except (KiclError, OSError, ValueError, KeyError) as e:
        print(f"stage failure: {e}", file=sys.stderr)
        return EXIT_STAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
