"""Command line entry point: run, sweep, validate, predict."""

from __future__ import annotations

import argparse
import json
import sys

from .config import ConfigError, ExperimentConfig, validate
from .engine import EngineError, ModeError, QuadratureError
from .pipeline import SWEEP_AXES, run, sweep
from .sample import GeometryError
from .spectra import predict_lines

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 2, 3


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML experiment file (defaults when omitted)")
    common.add_argument("--seed", type=int, help="override run.seed")
    common.add_argument("--out", help="override run.output_dir")
    common.add_argument("--threads", type=int, default=1, help="worker threads for propagation")
    common.add_argument("--bit-reproducible", action="store_true", help="pin BLAS threads and drop timings")
    common.add_argument("--svg", action="store_true", help="also write spectrum.svg")

    ap = argparse.ArgumentParser(prog="nvsolid", description=__doc__)
    sub = ap.add_subparsers(dest="verb", required=True)
    sub.add_parser("run", parents=[common], help="simulate one configuration")
    sw = sub.add_parser("sweep", parents=[common], help="repeat a run over one parameter")
    sw.add_argument("--axis", required=True, choices=sorted(SWEEP_AXES))
    sw.add_argument("--values", required=True, help="comma-separated values (phi_error in degrees)")
    sub.add_parser("validate", parents=[common], help="check a configuration and print it resolved")
    sub.add_parser("predict", parents=[common], help="print predicted lines and the Bloch-Siegert shift")
    return ap


def _load(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = cfg.replace("run.seed", args.seed)
    if args.out is not None:
        cfg = cfg.replace("run.output_dir", args.out)
    if args.bit_reproducible:
        cfg = cfg.replace("run.bit_reproducible", True)
    return cfg


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    if args.threads < 1:
        print("error: --threads must be at least 1", file=sys.stderr)
        return EXIT_VALIDATION
    try:
        cfg = _load(args)
        resolved = validate(cfg)
        if args.verb == "validate":
            sys.stdout.write(resolved.to_yaml())
        elif args.verb == "predict":
            pred = predict_lines(resolved.iso_shifts(), resolved.drive_program())
            drive = resolved.drive_program()
            print(json.dumps({
                "lines_hz": list(pred.lines),
                "bloch_siegert_line_hz": pred.bloch_siegert,
                "Omega_hz": drive.Omega,
                "Delta_hz": drive.Delta,
            }, indent=2))
        elif args.verb == "run":
            res = run(cfg, threads=args.threads, svg=args.svg)
            print(f"wrote {cfg.run.output_dir}; peaks (Hz): "
                  + ", ".join(f"{p.frequency:.2f}" for p in res.spectrum.peaks[:4]))
        else:
            try:
                values = [float(v) for v in args.values.split(",") if v.strip()]
            except ValueError:
                raise ConfigError([("--values", f"not a list of numbers: {args.values!r}")]) from None
            if not values:
                raise ConfigError([("--values", "need at least one value")])
            sweep(cfg, args.axis, values, threads=args.threads, svg=args.svg)
            print(f"wrote {cfg.run.output_dir}/summary.csv")
    except (ConfigError, ModeError, GeometryError) as exc:
        errors = getattr(exc, "errors", None) or [("<config>", str(exc))]
        for path, msg in errors:
            print(f"error: {path}: {msg}", file=sys.stderr)
        return EXIT_VALIDATION
    except FileNotFoundError as exc:
        print(f"error: --config: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (EngineError, QuadratureError, FloatingPointError, ArithmeticError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
