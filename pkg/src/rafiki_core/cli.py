"""Command line: ``rafiki-core tune|serve-sim|compare``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .config import apply_overrides, from_dict, preset_names, preset_path, read_raw
from .errors import RafikiError

log = logging.getLogger("rafiki_core")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rafiki-core", description="Simulated tuning and inference serving runs.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_ in (("tune", "run a hyper-parameter study"), ("serve-sim", "simulate ensemble serving")):
        s = sub.add_parser(name, help=help_)
        src = s.add_mutually_exclusive_group()
        src.add_argument("--config", type=Path, help="TOML or JSON run config")
        src.add_argument("--preset", help=f"bundled config: {', '.join(preset_names())}")
        s.add_argument("--seed", type=int, help="root seed (overrides the config)")
        s.add_argument("--out", type=Path, help="output directory (RAFIKI_OUT takes precedence)")
        s.add_argument("--trace", action="store_true", help="also write event traces")
        s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config field, e.g. study.max_trials=20")
    c = sub.add_parser("compare", help="paired comparison of completed run directories")
    c.add_argument("runs", nargs="+", type=Path)
    c.add_argument("--out", type=Path, help="report directory (RAFIKI_OUT takes precedence)")
    c.add_argument("--no-plots", action="store_true")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _out_dir(arg: Path | None, default: str) -> Path:
    env = os.environ.get("RAFIKI_OUT")
    if env:
        return Path(env)
    return arg if arg is not None else Path(default)


def _load(args):
    raw = read_raw(preset_path(args.preset)) if args.preset else read_raw(args.config) if args.config else {}
    sets = list(args.set)
    if args.seed is not None:
        sets.append(f"seed={args.seed}")
    return from_dict(apply_overrides(raw, sets))


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "compare":
            from .report import compare_runs
            out = _out_dir(args.out, "compare")
            rows = compare_runs(args.runs, out, plots=not args.no_plots)
            for r in rows:
                print(f"{Path(r['run']).name} {r['metric']}: delta {r['mean_delta']:+.4f} "
                      f"(+{r['n_pos']}/-{r['n_neg']}, sign p={r['sign_p']:.3g})")
            print(f"report written to {out}")
            return 0
        cfg = _load(args)
        out = _out_dir(args.out, cfg.output.dir)
        from . import runs
        if args.command == "tune":
            res = runs.cmd_tune(cfg, out, args.trace or cfg.output.trace)
            ps = [b["p"] for b in res["best"]]
            print(f"{len(ps)} run(s), best p max {max(ps):.4f}")
        else:
            res = runs.cmd_serve_sim(cfg, out, args.trace or cfg.output.trace)
            for row in res["summary"]:
                print(f"seed {row['seed']} beta {row['beta']:g} {row['dispatcher']}: accuracy {row['mean_accuracy']:.4f}, "
                      f"overdue/s {row['overdue_per_s']:.2f}, dropped/s {row['dropped_per_s']:.2f}")
        print(f"artifacts written to {out}")
        return 0
    except (RafikiError, OSError, ValueError) as e:
        print(f"rafiki-core: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
