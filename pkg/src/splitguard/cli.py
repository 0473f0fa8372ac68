"""Command line entry point: ``splitguard <command> [options]``.

Exit codes: 0 success, 1 unexpected failure, 2 configuration error,
3 numerical divergence, 4 transport failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import harness
from .errors import SplitGuardError

log = logging.getLogger("splitguard")


def _floats(text):
    return [float(v) for v in text.split(",") if v.strip()]


def _ints(text):
    return [int(v) for v in text.split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="TOML configuration file")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--out", type=Path, help="run directory (default $SPLITGUARD_OUT/<command>-seed<seed>)")
    common.add_argument("--transport", choices=["loopback", "socket"], help="edge-cloud channel")
    common.add_argument("--epsilon", type=float, help="override the privacy budget")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="splitguard", description="Private edge-cloud split learning with attack evaluation.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("pretrain", parents=[common], help="adversarial pre-training of the edge")
    t = sub.add_parser("train", parents=[common], help="pre-training, edge-cloud training and test evaluation")
    t.add_argument("--baseline", action="store_true", help="train the non-private baseline instead")
    for name, text in (("evaluate", "evaluate a saved checkpoint on the test split"), ("whitebox", "white-box inversion of a saved checkpoint")):
        e = sub.add_parser(name, parents=[common], help=text)
        e.add_argument("--checkpoint", type=Path, required=True)
    sub.add_parser("dp-verify", parents=[common], help="empirical check of the noise mechanism's density ratio")
    s = sub.add_parser("sweep", parents=[common], help="baseline plus one private run per epsilon, per seed")
    s.add_argument("--epsilons", type=_floats, help="comma separated, e.g. 0.5,1,2")
    s.add_argument("--seeds", type=_ints, help="comma separated, e.g. 0,1,2")
    sub.add_parser("config", parents=[common], help="print the resolved configuration as JSON")
    return p


def _overrides(args) -> dict:
    o = {}
    if args.seed is not None:
        o["seed"] = args.seed
    if args.transport is not None:
        o["transport"] = {"kind": args.transport}
    if args.epsilon is not None:
        o["privacy"] = {"epsilon": args.epsilon}
    return o


def _out_dir(args, cfg) -> Path:
    if args.out is not None:
        return args.out
    if cfg.output_dir:
        return Path(cfg.output_dir)
    return harness.default_out_dir(args.command, cfg.seed)


def _emit(obj):
    print(json.dumps(obj, indent=1, sort_keys=True, default=str))


def run(args) -> int:
    cfg = harness.load_config(args.config, _overrides(args))
    if args.command == "config":
        _emit(cfg.to_dict())
        return 0
    out = _out_dir(args, cfg)
    if args.command == "pretrain":
        bundle = harness.build_bundle(cfg)
        model, logs = harness.run_pretrain(cfg, bundle, out_dir=out)
        _emit({"out": str(out), "epochs": len(logs), **harness.evaluate_exits(model, bundle, cfg.seed)})
    elif args.command == "train":
        res = harness.run_training(cfg, private=not args.baseline, out_dir=out)
        _emit({"out": str(out), **harness.summary_row(res)})
    elif args.command in ("evaluate", "whitebox"):
        wb = args.command == "whitebox"
        _, test_metrics, _ = harness.evaluate_checkpoint(cfg, args.checkpoint, whitebox=wb)
        _emit(test_metrics["whitebox"] if wb else test_metrics)
    elif args.command == "dp-verify":
        reports = harness.run_dp_verify(cfg, out)
        _emit(reports)
        if not all(r["pass"] for r in reports):
            return 1
    elif args.command == "sweep":
        rows = harness.run_sweep(cfg, args.epsilons, args.seeds, out)
        _emit({"out": str(out), "runs": len(rows)})
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except SplitGuardError as exc:
        print(f"splitguard: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except Exception as exc:  # noqa: BLE001
        print(f"splitguard: unexpected {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
