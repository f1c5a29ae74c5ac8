"""Command line entry point: ``holdreach <subcommand>``.

Global flags ``--config``, ``--seed`` and ``--out-dir`` may come before or
after the subcommand. Results land in the output directory; on failure an
``error.json`` manifest is written there and the exit code is non-zero.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import traceback
from dataclasses import asdict
from pathlib import Path

from .experiments import (ConfigError, ExperimentConfig, estimate_document, manifest,
                          run_coverage_study, run_derand_demo, run_split_sweep,
                          run_tube_experiment, run_wait_and_judge, write_coverage_csv,
                          write_csv, write_derand_csv, write_instants_csv, write_json,
                          write_sweep_csv)

log = logging.getLogger("holdreach")

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_CONFIG = 2


def _parse_splits(text: str):
    try:
        return [tuple(int(v) for v in part.split(":")) for part in text.split(",") if part]
    except ValueError:
        raise argparse.ArgumentTypeError("splits look like 1500:1500,2000:1000") from None


def _float_list(text: str):
    return [float(v) for v in text.split(",") if v]


def _int_list(text: str):
    return [int(v) for v in text.split(",") if v]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=argparse.SUPPRESS,
                        help="JSON experiment config")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--out-dir", type=Path, default=argparse.SUPPRESS)

    parser = argparse.ArgumentParser(prog="holdreach", parents=[common],
                                     description="Holdout-certified data-driven reachability")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("sweep", parents=[common], help="training/holdout split sweep")
    p.add_argument("--model")
    p.add_argument("--m", type=int)
    p.add_argument("--beta", type=float)
    p.add_argument("--total", type=int)
    p.add_argument("--splits", type=_parse_splits)

    p = sub.add_parser("wnj", parents=[common], help="wait-and-judge baseline")
    p.add_argument("--model")
    p.add_argument("--m", type=int)
    p.add_argument("--beta", type=float)
    p.add_argument("--total", type=int)

    p = sub.add_parser("coverage", parents=[common], help="frequency check of the certificate")
    p.add_argument("--trials", type=int)
    p.add_argument("--n-train", type=int)
    p.add_argument("--n-holdout", type=int)
    p.add_argument("--beta", type=float)
    p.add_argument("--t1", type=float)
    p.add_argument("--reference-size", type=int)

    p = sub.add_parser("tube", parents=[common], help="reach tube experiment")
    p.add_argument("--lam", type=float)
    p.add_argument("--n-instants", type=int)
    p.add_argument("--n-train", type=int)
    p.add_argument("--n-holdout", type=int)

    p = sub.add_parser("derand", parents=[common], help="de-randomization cost table")
    p.add_argument("--dims", type=_int_list)
    p.add_argument("--eps", type=_float_list)
    p.add_argument("--L", type=float)
    p.add_argument("--n", type=int)

    p = sub.add_parser("inspect", parents=[common], help="summarize an output file")
    p.add_argument("path", type=Path)
    return parser


def load_config(args) -> ExperimentConfig:
    path = getattr(args, "config", None)
    data = json.loads(Path(path).read_text()) if path else {}
    if args.command == "tube":
        data.setdefault("model", "linear2d")
    if args.command == "coverage":
        data.setdefault("model", "linear2d")
    top = {"model": "model", "m": "m", "beta": "beta", "total": "total", "splits": "splits"}
    nested = {"tube": {"lam": "lam", "n_instants": "n_instants", "n_train": "n_train",
                       "n_holdout": "n_holdout"},
              "coverage": {"trials": "trials", "n_train": "n_train", "n_holdout": "n_holdout",
                           "beta": "beta", "t1": "t1", "reference_size": "reference_size"},
              "derand": {"dims": "dims", "eps": "eps", "L": "L", "n": "n"}}
    if args.command in nested:
        section = dict(data.get(args.command, {}))
        for attr, key in nested[args.command].items():
            if getattr(args, attr, None) is not None:
                section[key] = getattr(args, attr)
        data[args.command] = section
    else:
        for attr, key in top.items():
            if getattr(args, attr, None) is not None:
                data[key] = getattr(args, attr)
    if getattr(args, "seed", None) is not None:
        data["seed"] = args.seed
    if getattr(args, "out_dir", None) is not None:
        data["out_dir"] = str(args.out_dir)
    if args.command == "sweep" and "total" in data and "splits" not in data:
        raise ConfigError("changing total requires explicit --splits")
    return ExperimentConfig.from_dict(data).validate(splits=args.command == "sweep")


def cmd_sweep(config: ExperimentConfig, out: Path) -> int:
    estimates = []
    rows = run_split_sweep(config, estimates)
    write_sweep_csv(rows, out / "sweep.csv")
    est_dir = out / "estimates"
    est_dir.mkdir(exist_ok=True)
    for N, M, est, report in estimates:
        write_json(estimate_document(est, report, config), est_dir / f"sweep_N{N}_M{M}.json")
    failures = [asdict(r) for r in rows if r.error is not None]
    write_json(manifest(config, "sweep", rows=[asdict(r) for r in rows], failures=failures,
                        outputs=["sweep.csv", "estimates/"]), out / "sweep_manifest.json")
    for r in rows:
        if r.error is None:
            print(f"N={r.N:5d} M={r.M:5d} vol={r.vol:.3f} k_hat={r.k_hat:4d} "
                  f"eps={r.epsilon:.4f} ({r.runtime_s:.2f}s)")
        else:
            print(f"N={r.N:5d} M={r.M:5d} FAILED: {r.error}")
    return EXIT_FAILED if failures else EXIT_OK


def cmd_wnj(config: ExperimentConfig, out: Path) -> int:
    estimates = []
    row = run_wait_and_judge(config, estimates)
    write_csv(out / "wnj.csv", ("N", "support_count", "vol", "epsilon", "seed"),
              [[row.N, row.support_count, repr(row.vol), repr(row.epsilon), row.seed]])
    N, _, est, report = estimates[0]
    write_json(estimate_document(est, report, config), out / "wnj_estimate.json")
    write_json(manifest(config, "wnj", row=asdict(row), outputs=["wnj.csv", "wnj_estimate.json"]),
               out / "wnj_manifest.json")
    print(f"N={row.N} support={row.support_count} vol={row.vol:.3f} eps={row.epsilon:.4f} "
          f"({row.runtime_s:.1f}s)")
    return EXIT_OK


def cmd_coverage(config: ExperimentConfig, out: Path) -> int:
    c = config.coverage
    result = run_coverage_study(config.model, c.trials, c.n_train, c.n_holdout, c.beta,
                                config.seed, m=c.m, gamma=config.gamma, t1=c.t1,
                                reference_size=c.reference_size, step=config.step)
    write_coverage_csv(result, out / "coverage.csv")
    write_json(manifest(config, "coverage", miscoverage=result.miscoverage, trials=result.trials,
                        outputs=["coverage.csv"]), out / "coverage_manifest.json")
    print(f"miscoverage {result.miscoverage:.4f} over {result.trials} trials (beta={c.beta})")
    return EXIT_OK


def cmd_tube(config: ExperimentConfig, out: Path) -> int:
    result = run_tube_experiment(config)
    r = result.row
    write_sweep_csv([r], out / "tube.csv")
    write_instants_csv(result, out / "tube_instants.csv")
    write_json(result.tube.to_dict(), out / "tube.json")
    write_json(manifest(config, "tube", row=asdict(r),
                        outputs=["tube.csv", "tube_instants.csv", "tube.json"]),
               out / "tube_manifest.json")
    print(f"N={r.N} M={r.M} violations={r.k_hat} eps={r.epsilon:.4f} ({r.runtime_s:.1f}s)")
    return EXIT_OK


def cmd_derand(config: ExperimentConfig, out: Path) -> int:
    d = config.derand
    rows = run_derand_demo(d.dims, d.eps, d.L, d.n, config.seed)
    write_derand_csv(rows, out / "derand.csv")
    write_json(manifest(config, "derand", rows=rows, outputs=["derand.csv"]),
               out / "derand_manifest.json")
    for r in rows:
        print(f"d={r['d']:3d} eps={r['epsilon']:<6g} delta*={r['delta_star']:.4f} "
              f"exact={r['exact_p']:.4g} mc={r['mc_estimate']:.4g} queries={r['query_bound']}")
    return EXIT_OK


def cmd_inspect(path: Path) -> int:
    if path.suffix == ".json":
        doc = json.loads(path.read_text())
        if "centers" in doc and "widths" in doc and "times" not in doc:
            print(f"RBF estimate: m={doc['m']} gamma={doc['gamma']} model={doc.get('model')}")
            vol = sum(w * w for w in doc["widths"]) ** 0.5
            print(f"  widths={doc['widths']} volume proxy={vol:.4f}")
        elif "times" in doc:
            print(f"tube: {len(doc['times'])} instants, lam={doc['lam']}, gamma={doc['gamma']}")
        else:
            print(json.dumps({k: v for k, v in doc.items() if k != "rows"}, indent=2))
    elif path.suffix == ".csv":
        with path.open(newline="") as fh:
            rows = list(csv.reader(fh))
        print(f"{path.name}: {len(rows) - 1} rows, columns {rows[0]}")
        for r in rows[1:11]:
            print("  " + ", ".join(r))
    else:
        print(f"don't know how to inspect {path}", file=sys.stderr)
        return EXIT_FAILED
    return EXIT_OK


COMMANDS = {"sweep": cmd_sweep, "wnj": cmd_wnj, "coverage": cmd_coverage, "tube": cmd_tube,
            "derand": cmd_derand}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "inspect":
        return cmd_inspect(args.path)
    out = Path(getattr(args, "out_dir", None) or "runs")
    try:
        config = load_config(args)
        out = Path(config.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](config, out)
    except (ConfigError, json.JSONDecodeError, OSError) as err:
        _error_manifest(out, args.command, err)
        print(f"configuration error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as err:  # noqa: BLE001  recorded in the error manifest
        _error_manifest(out, args.command, err)
        print(f"{args.command} failed: {err}", file=sys.stderr)
        return EXIT_FAILED


def _error_manifest(out: Path, command: str, err: Exception) -> None:
    try:
        out.mkdir(parents=True, exist_ok=True)
        write_json({"command": command, "error_type": type(err).__name__, "message": str(err),
                    "traceback": traceback.format_exc()}, out / "error.json")
    except OSError:
        pass


if __name__ == "__main__":
    sys.exit(main())
