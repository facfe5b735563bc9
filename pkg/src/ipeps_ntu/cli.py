"""Command line interface: ``ipeps-ntu {quench,thermal,fit-tc,observe}``."""

from __future__ import annotations

import argparse
import json
import logging
import re
import sys
from pathlib import Path

from . import checkpoint as ckpt
from .experiments import (
    BIAS_GRIDS,
    EvolutionRecord,
    QuenchRun,
    ThermalRun,
    fit_tc,
    observe,
    run_quench,
    run_thermal_single,
    steepest_slope_temperature,
)
from .gates import ModelParams

# built-in defaults; a JSON config file overrides them and explicit flags override both
DEFAULTS = {
    "hx": 0.0,
    "hz": None,
    "D": 2,
    "chi": None,
    "scheme": "ntu",
    "dt": 0.01,
    "dbeta": 0.0025,
    "t_max": 1.0,
    "beta_max": 1.2,
    "warmup_beta": None,
    "stride": None,
    "out": ".",
    "checkpoint_every": None,
    "resume": None,
    "trace": False,
    "energy_drift_cap": 0.01,
    "no_xi": False,
    "ctm_max_sweeps": 200,
}


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with default values for any flag")
    p.add_argument("--hx", type=float, help="transverse field")
    p.add_argument("--hz", type=float, action="append", help="longitudinal bias (repeatable)")
    p.add_argument("--D", type=int, help="bond dimension")
    p.add_argument("--chi", type=int, help="CTMRG environment dimension")
    p.add_argument("--scheme", choices=["svdu", "ntu", "ftu"])
    p.add_argument("--stride", type=int, help="steps between observable evaluations")
    p.add_argument("--out", help="output directory")
    p.add_argument("--checkpoint-every", type=int, dest="checkpoint_every", help="steps between checkpoints")
    p.add_argument("--resume", help="checkpoint file to resume from")
    p.add_argument("--trace", action="store_true", default=None, help="write per-step JSON lines")
    p.add_argument("--ctm-max-sweeps", type=int, dest="ctm_max_sweeps", help="CTMRG sweep cap per evaluation")
    p.add_argument("--no-xi", action="store_true", default=None, dest="no_xi", help="skip the correlation length")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ipeps-ntu", description="iPEPS time evolution with SVDU/NTU/FTU truncation")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    q = sub.add_parser("quench", help="real-time evolution after a sudden quench")
    _add_common(q)
    q.add_argument("--dt", type=float)
    q.add_argument("--t-max", type=float, dest="t_max")
    q.add_argument("--energy-drift-cap", type=float, dest="energy_drift_cap")

    t = sub.add_parser("thermal", help="imaginary-time evolution of the purified thermal state")
    _add_common(t)
    t.add_argument("--dbeta", type=float)
    t.add_argument("--beta-max", type=float, dest="beta_max")
    t.add_argument("--warmup-beta", type=float, dest="warmup_beta")

    f = sub.add_parser("fit-tc", help="fit Tc from thermal CSV files")
    f.add_argument("csv", nargs="+", help="thermal CSV files, one per bias field")
    f.add_argument("--hz", type=float, action="append", help="bias of each CSV, in order")
    f.add_argument("--out", help="write the fit JSON here instead of stdout")
    f.add_argument("--bootstrap", type=int, default=0, help="residual-bootstrap refits for the 95%% intervals")

    o = sub.add_parser("observe", help="recompute observables from a checkpoint")
    o.add_argument("checkpoint")
    o.add_argument("--chi", type=int, required=True)
    return parser


def resolve(args: argparse.Namespace) -> dict:
    """Merge built-in defaults, the optional config file and explicit flags."""
    opts = dict(DEFAULTS)
    if getattr(args, "config", None):
        cfg = json.loads(Path(args.config).read_text())
        unknown = set(cfg) - set(DEFAULTS)
        if unknown:
            raise SystemExit(f"unknown config keys: {sorted(unknown)}")
        opts.update(cfg)
    for k, v in vars(args).items():
        if k in DEFAULTS and v is not None:
            opts[k] = v
    return opts


def _tracer(path: Path | None):
    if path is None:
        return None
    fh = open(path, "a")

    def write(line: str) -> None:
        fh.write(line + "\n")
        fh.flush()

    return write


def cmd_quench(o: dict) -> int:
    hz = (o["hz"] or [0.0])[0]
    params = ModelParams(o["hx"], hz)
    run = QuenchRun(
        params,
        D=o["D"],
        chi=o["chi"],
        dt=o["dt"],
        scheme=o["scheme"],
        t_max=o["t_max"],
        energy_drift_cap=o["energy_drift_cap"],
        observable_stride=o["stride"] or 10,
        with_xi=not o["no_xi"],
        ctm_max_sweeps=o["ctm_max_sweeps"],
    )
    out = Path(o["out"])
    out.mkdir(parents=True, exist_ok=True)
    stem = f"quench_hx{o['hx']:g}_hz{hz:g}_{run.scheme}_D{run.D}"
    rec = run_quench(
        run,
        out_csv=out / f"{stem}.csv",
        checkpoint_path=out / f"{stem}.ckpt",
        checkpoint_every=o["checkpoint_every"],
        resume=o["resume"],
        trace=_tracer(out / f"{stem}.trace.jsonl" if o["trace"] else None),
    )
    print(f"{stem}: {rec.terminated} at t={rec.rows[-1].time_or_beta:g}")
    return 0


def cmd_thermal(o: dict) -> int:
    hzs = o["hz"] or list(BIAS_GRIDS.get(o["hx"], (0.0,)))
    if o["resume"] and len(hzs) != 1:
        raise SystemExit("--resume needs exactly one --hz")
    run = ThermalRun(
        ModelParams(o["hx"]),
        hz=hzs,
        D=o["D"],
        chi=o["chi"] or 40,
        dbeta=o["dbeta"],
        scheme=o["scheme"],
        beta_max=o["beta_max"],
        warmup_beta=o["warmup_beta"],
        observable_stride=o["stride"] or 40,
        with_xi=not o["no_xi"],
        ctm_max_sweeps=o["ctm_max_sweeps"],
    )
    out = Path(o["out"])
    out.mkdir(parents=True, exist_ok=True)
    for hz in hzs:
        stem = f"thermal_hx{o['hx']:g}_hz{hz:g}_{run.scheme}_D{run.D}"
        rec = run_thermal_single(
            run,
            hz,
            out_csv=out / f"{stem}.csv",
            checkpoint_path=out / f"{stem}.ckpt",
            checkpoint_every=o["checkpoint_every"],
            resume=o["resume"],
            trace=_tracer(out / f"{stem}.trace.jsonl" if o["trace"] else None),
        )
        print(f"{stem}: beta={rec.rows[-1].time_or_beta:g}")
    return 0


_HZ_IN_NAME = re.compile(r"hz([0-9.eE+-]+?)_")


def cmd_fit(args) -> int:
    paths = [Path(p) for p in args.csv]
    if args.hz:
        if len(args.hz) != len(paths):
            raise SystemExit("give one --hz per CSV file")
        hzs = args.hz
    else:
        hzs = []
        for p in paths:
            m = _HZ_IN_NAME.search(p.name)
            if not m:
                raise SystemExit(f"cannot read hz from {p.name}; pass --hz")
            hzs.append(float(m.group(1)))
    points = [(h, steepest_slope_temperature(EvolutionRecord.from_csv(p))) for h, p in zip(hzs, paths)]
    text = fit_tc(points, bootstrap=args.bootstrap, seed=0).to_json()
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        print(text)
    return 0


def cmd_observe(args) -> int:
    ck = ckpt.load(args.checkpoint)
    vals, _ = observe(ck.state, ck.params, args.chi, ck.env)
    vals.update(step=ck.step_index, time_or_beta=ck.time_or_beta, scheme=ck.scheme, kind=ck.kind)
    print(json.dumps(vals))
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.command == "quench":
        return cmd_quench(resolve(args))
    if args.command == "thermal":
        return cmd_thermal(resolve(args))
    if args.command == "fit-tc":
        return cmd_fit(args)
    return cmd_observe(args)


if __name__ == "__main__":
    sys.exit(main())
