"""Command-line entry points for the experiment pipeline."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import pipeline


def _add_common(p):
    p.add_argument("--config", type=Path, default=None,
                   help="JSON file with configuration overrides")
    p.add_argument("--out", type=Path, required=True,
                   help="run directory for artifacts")
    p.add_argument("--seed", type=int, default=None,
                   help="override the master seed")
    p.add_argument("--force", action="store_true",
                   help="recompute this stage even if cached")


def _load_cfg(args) -> dict:
    cfg = pipeline.load_config(args.config) if args.config \
        else pipeline.merge_config({})
    if args.seed is not None:
        cfg["seed"] = int(args.seed)
    return cfg


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="narxmpc",
        description="Offset-free MPC on neural NARX models: data "
                    "generation, training, tuning, closed-loop runs "
                    "and comparisons.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, doc in [
        ("generate", "record excitation experiments from the plant"),
        ("train", "fit the window model on the recorded data"),
        ("tune", "certify equilibria and integral gains per setpoint"),
        ("report", "summarize metrics of completed runs"),
        ("pipeline", "run every stage in order with caching"),
    ]:
        p = sub.add_parser(name, help=doc)
        _add_common(p)

    p = sub.add_parser("run", help="closed-loop run for one controller")
    _add_common(p)
    p.add_argument("--controller", choices=["proposed", "debmpc"],
                   default="proposed")
    p.add_argument("--plant", choices=["ode", "model"], default="ode",
                   help="ground-truth simulator or the model as its own plant")

    p = sub.add_parser("compare", help="run both controllers and report")
    _add_common(p)

    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s")
    cfg = _load_cfg(args)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    force = args.force

    if args.command == "generate":
        pipeline.stage_generate(cfg, out, force=force)
    elif args.command == "train":
        pipeline.stage_train(cfg, out, force=force)
    elif args.command == "tune":
        pipeline.stage_tune(cfg, out, force=force)
    elif args.command == "run":
        model = pipeline.stage_train(cfg, out)
        if args.plant == "model":
            trace, info, metrics = pipeline.run_closed_loop(
                cfg, model, args.controller, plant_kind="model")
            tdir = out / "traces"
            tdir.mkdir(exist_ok=True)
            pipeline.write_trace(trace, tdir / f"{args.controller}_nominal.csv")
            mdir = out / "metrics"
            mdir.mkdir(exist_ok=True)
            pipeline.write_json(metrics.to_dict(),
                                mdir / f"{args.controller}_nominal.json")
        else:
            pipeline.stage_run(cfg, out, args.controller, force=force)
    elif args.command == "compare":
        model = pipeline.stage_train(cfg, out)
        pipeline.stage_run(cfg, out, "proposed", model, force=force)
        pipeline.stage_run(cfg, out, "debmpc", model, force=force)
        report = pipeline.stage_report(cfg, out, force=True)
        print(json.dumps(report, indent=1))
    elif args.command == "report":
        report = pipeline.stage_report(cfg, out, force=force)
        print((out / "report.txt").read_text())
    elif args.command == "pipeline":
        pipeline.run_pipeline(cfg, out,
                              force_stages=("all",) if force else ())
        print((out / "report.txt").read_text())
    return 0


if __name__ == "__main__":
    sys.exit(main())
