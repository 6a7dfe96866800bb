"""Command-line entry point: ``drscl {run,sweep,baselines,report,verify}``.

Exit codes: 0 success, 2 configuration error, 3 numerical failure, 1 other
failures (missing data, failed verification).
"""

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import experiment as ex
from . import metrics as mt
from .errors import ConfigError, DrsclError, NumericalError
from .tasks import DATA_DIR_ENV

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3


def _load_config(args):
    config = ex.RunConfig.load(args.config) if args.config else ex.RunConfig()
    changes = {}
    if args.seed is not None:
        changes["seeds"] = [args.seed]
    if args.out is not None:
        changes["out_dir"] = args.out
    if getattr(args, "data_dir", None):
        stream = dict(config.to_dict()["stream"], data_dir=args.data_dir)
        changes["stream"] = stream
    if changes:
        d = config.to_dict()
        d.update(changes)
        config = ex.RunConfig.from_dict(d)
    return config


def cmd_run(args):
    config = _load_config(args)
    records = []
    for seed in config.seeds:
        rec = ex.run_continual(config, seed, resume=args.resume)
        records.append(rec)
        r = rec.report
        print(f"seed {seed}: ACC={r['acc']:.4f} BWT={r['bwt'] if r['bwt'] is None else round(r['bwt'], 4)}"
              f" bound violations {r['bound_violations']}/{r['bound_transitions']} -> {rec.out_dir}")
    ex.emit_plotdata(records, Path(config.out_dir) / "plotdata.csv")
    return EXIT_OK


def cmd_sweep(args):
    config = _load_config(args)
    values = [float(v) for v in args.values.split(",")]
    records = ex.sweep(config, args.axis, values)
    if records:
        ex.emit_plotdata(records, Path(config.out_dir) / f"plotdata_{args.axis}.csv")
    print((Path(config.out_dir) / f"sweep_{args.axis}.csv").read_text(), end="")
    return EXIT_OK


def cmd_baselines(args):
    config = _load_config(args)
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result = {}
    for seed in config.seeds:
        b = ex.run_baseline_singles(config, seed)
        result[str(seed)] = b.tolist()
        print(f"seed {seed}: " + " ".join(f"{v:.4f}" for v in b))
    (out / "baselines.json").write_text(json.dumps(result, indent=2))
    return EXIT_OK


def cmd_report(args):
    """Summarise run directories; adds FWT when a baselines.json is supplied."""
    baselines = json.loads(Path(args.baselines).read_text()) if args.baselines else {}
    records = []
    for run_dir in args.runs:
        rec = ex.load_record(run_dir)
        records.append(rec)
        A = np.array(rec.accuracy, dtype=np.float64)
        base = baselines.get(str(rec.seed))
        report = mt.build_report(A, baseline=base, block=args.block)
        line = f"{run_dir}: method={rec.config['method']} seed={rec.seed} ACC={report.acc:.4f}"
        if report.bwt is not None:
            line += f" BWT={report.bwt:.4f} mean F={np.mean(report.per_task_forgetting):.4f}"
        if report.fwt is not None:
            line += f" FWT={report.fwt:.4f}"
        print(line)
    if args.plotdata:
        ex.emit_plotdata(records, args.plotdata)
    return EXIT_OK


def cmd_verify(args):
    from .verify import run_all
    return EXIT_OK if run_all() else EXIT_FAIL


def build_parser():
    parser = argparse.ArgumentParser(prog="drscl", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)

    def common(p):
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--seed", type=int, help="run this single seed instead of config.seeds")
        p.add_argument("--out", help="output directory (overrides config.out_dir)")
        p.add_argument("--data-dir", help=f"dataset cache directory (else ${DATA_DIR_ENV})")

    p = sub.add_parser("run", help="train one method over a task stream")
    common(p)
    p.add_argument("--resume", action="store_true", help="continue from the last checkpoint")
    p.set_defaults(func=cmd_run)
    p = sub.add_parser("sweep", help="grid over one DRS hyperparameter")
    common(p)
    p.add_argument("--axis", required=True, choices=ex.SWEEP_AXES)
    p.add_argument("--values", required=True, help="comma-separated values")
    p.set_defaults(func=cmd_sweep)
    p = sub.add_parser("baselines", help="single-task baselines for forward transfer")
    common(p)
    p.set_defaults(func=cmd_baselines)
    p = sub.add_parser("report", help="summarise finished runs")
    p.add_argument("runs", nargs="+", help="run directories containing run_record.json")
    p.add_argument("--baselines", help="baselines.json from the baselines verb")
    p.add_argument("--block", type=int, help="interval size for interval forgetting")
    p.add_argument("--plotdata", help="write long-format plot CSV here")
    p.set_defaults(func=cmd_report)
    p = sub.add_parser("verify", help="run the fast oracle checks")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DrsclError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
