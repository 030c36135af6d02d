"""Command-line entry point: ``srt {synth,train,eval,ablate,flowcheck}``.

Exit codes: 0 success, 1 internal error, 2 user or configuration error.
"""
from __future__ import annotations

import argparse
import json
import os
import sys

from . import experiment as ex
from .synthworld import ConfigInfeasibleError


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="srt", description="Registration and triangulation supervision experiments.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True):
        sp.add_argument("--config", help="YAML experiment config (defaults are used for missing keys)")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int, help="top-level seed, overrides the config")
        sp.add_argument("--mode", choices=ex.EXPERIMENT_MODES, help="overrides the config mode")
        if data:
            sp.add_argument("--data", help="data directory written by synth (default: --out)")

    common(sub.add_parser("synth", help="generate the synthetic benchmark"), data=False)
    t = sub.add_parser("train", help="two-stage training")
    common(t)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--stop-after", type=int, help="stop after this many epochs in total")
    e = sub.add_parser("eval", help="evaluate a checkpoint on the test set")
    common(e)
    e.add_argument("--checkpoint", required=True)
    a = sub.add_parser("ablate", help="grid sweep over config entries")
    common(a, data=False)
    a.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    common(sub.add_parser("flowcheck", help="flow interpolation vs LK discrepancy"))
    return p


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    cfg = ex.load_config(args.config, seed=args.seed, mode=args.mode)
    data = getattr(args, "data", None) or args.out
    if args.command == "synth":
        ex.cmd_synth(cfg, args.out)
        print(f"wrote {args.out} (config_hash {ex.config_hash(cfg)})")
    elif args.command == "train":
        if args.stop_after is not None and args.stop_after < 1:
            raise ex.ConfigError("--stop-after must be positive")
        tr = ex.cmd_train(cfg, data, args.out, args.resume, args.stop_after)
        last = tr.log[-1] if tr.log else {}
        print(json.dumps({"epoch": tr.epoch, "nme": last.get("nme"), "config_hash": ex.config_hash(cfg)}))
    elif args.command == "eval":
        ev = ex.cmd_eval(cfg, args.checkpoint, data, args.out)
        print(json.dumps({k: ev[k] for k in ("nme", "auc", "failure", "p_error") if k in ev}))
    elif args.command == "ablate":
        if args.jobs < 1:
            raise ex.ConfigError("--jobs must be at least 1")
        rows = ex.cmd_ablate(cfg, args.out, args.jobs)
        failed = sum(1 for r in rows if r["seed"] != "mean" and r["status"] != "ok")
        print(f"wrote {os.path.join(args.out, 'ablate.csv')} ({len(rows)} rows, {failed} failed runs)")
    elif args.command == "flowcheck":
        res = ex.cmd_flowcheck(cfg, data, args.out)
        print(json.dumps({"mean": res["mean"], "max": res["max"], "invalid": res["invalid"]}))
    return 0


def main(argv=None) -> int:
    try:
        return run(argv)
    except (ex.ConfigError, ConfigInfeasibleError) as e:
        print(f"srt: error: {e}", file=sys.stderr)
        return 2
    except SystemExit as e:   # argparse usage errors
        return 2 if e.code not in (0, None) else 0
    except Exception as e:
        print(f"srt: internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
