"""Command-line entry point: ``flowimpute {genmask,train,impute,eval,replay}``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
Every command writes a JSON run manifest (resolved configuration, input
digests, outputs, status) before doing any heavy work and updates it when the
command finishes or fails.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import ChainFormatError, load_chain, save_chain
from .dataset import (DataError, DataTable, RngStream, generate_mcar_mask, load_csv, load_mask_csv,
                      write_mask_csv, write_matrix_csv)
from .diffcore import NonFiniteError
from .imputer import cross_validate, impute_chain
from .trainer import TrainConfig, TrainingError, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("flowimpute")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


class RunManifest:
    """JSON record of one command invocation."""

    def __init__(self, path: Path, command: str, argv: list[str], config: dict, seed: int | None,
                 inputs: list[str], outputs: list[str]):
        self.path = Path(path)
        self.data = {
            "artifact_version": __version__,
            "command": command,
            "argv": list(argv),
            "config": config,
            "seed": seed,
            "inputs": {str(p): _digest(p) for p in inputs if Path(p).is_file()},
            "outputs": [str(o) for o in outputs],
            "started": _now(),
            "finished": None,
            "status": "running",
            "error": None,
        }

    def write(self) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text(json.dumps(self.data, indent=2, sort_keys=True) + "\n")

    def finish(self, status: str, error: str | None = None) -> None:
        self.data.update(status=status, error=error, finished=_now())
        self.write()


def _load_table(path, header: bool, grid: str | None) -> DataTable:
    if not Path(path).is_file():
        raise DataError(f"input file not found: {path}")
    table = load_csv(path, has_header=header)
    if grid:
        shape = tuple(int(g) for g in grid.split(","))
        if len(shape) == 2:
            shape = shape + (1,)
        table = DataTable(table.values, table.mask, table.columns, shape)
    return table


def _config_from(args) -> TrainConfig:
    try:
        return TrainConfig(
            epochs=args.epochs, learning_rate=args.lr, batch_size=args.batch, lam=args.lam, seed=args.seed,
            schedule_mode=args.schedule, initializer=args.init,
            high_missing_lr_switch=not args.no_lr_switch,
        )
    except ValueError as err:
        raise UsageError(str(err)) from None


def _add_train_flags(p) -> None:
    p.add_argument("--epochs", type=int, default=500)
    p.add_argument("--batch", type=int, default=128)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--lambda", dest="lam", type=float, default=0.01)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--schedule", choices=("power-of-2", "every-epoch"), default="power-of-2")
    p.add_argument("--init", choices=("marginal", "nearest"), default="marginal")
    p.add_argument("--no-lr-switch", action="store_true",
                   help="keep --lr even when more than 60%% of entries are missing")


# ---------------------------------------------------------------------------


def cmd_genmask(args, argv) -> int:
    out = Path(args.output)
    manifest = RunManifest(out.with_name(out.name + ".manifest.json"), "genmask", argv,
                           {"rate": args.rate, "guard": args.guard}, args.seed, [args.input], [str(out)])
    if not 0.0 <= args.rate <= 1.0:
        raise UsageError(f"--rate must lie in [0, 1], got {args.rate}")
    table = _load_table(args.input, args.header, None)
    manifest.write()
    mask = generate_mcar_mask(table.shape, args.rate, RngStream(args.seed).child("mask"), guard=args.guard)
    write_mask_csv(out, mask)
    print(f"mask {mask.shape[0]}x{mask.shape[1]} written to {out}; missing fraction {mask.mean():.6f}")
    manifest.finish("ok")
    return EXIT_OK


def cmd_train(args, argv) -> int:
    outdir = Path(args.outdir)
    table = _load_table(args.input, args.header, args.grid)
    if args.mask and args.rate is not None:
        raise UsageError("--mask and --rate are mutually exclusive")
    inputs = [args.input]
    if args.mask:
        inputs.append(args.mask)
        if table.mask.any():
            raise UsageError("input already has missing cells; do not pass --mask")
        table = DataTable(table.values, load_mask_csv(args.mask, table.shape), table.columns, table.grid_shape)
    elif args.rate is not None:
        if table.mask.any():
            raise UsageError("input already has missing cells; do not pass --rate")
        if not 0.0 <= args.rate <= 1.0:
            raise UsageError(f"--rate must lie in [0, 1], got {args.rate}")
        mask = generate_mcar_mask(table.shape, args.rate, RngStream(args.seed).child("mask"))
        table = DataTable(table.values, mask, table.columns, table.grid_shape)
    elif not table.mask.any():
        raise UsageError("input is complete: pass --mask or --rate to create missing entries")
    config = _config_from(args)
    manifest = RunManifest(outdir / "run_manifest.json", "train", argv,
                           {**config.as_dict(), "effective_learning_rate": config.effective_lr(table.missing_rate),
                            "mask_rate": args.rate},
                           args.seed, inputs, [str(outdir / "manifest.txt"), str(outdir / "training_log.csv")])
    manifest.write()
    try:
        chain, tlog = train(table, config)
        save_chain(chain, outdir)
        tlog.write_csv(outdir / "training_log.csv")
    except Exception as err:
        manifest.finish("failed", str(err))
        raise
    print(f"trained {config.epochs} epochs; {len(chain.snapshots)} snapshots at epochs "
          f"{','.join(map(str, chain.epochs))}; chain written to {outdir}")
    manifest.finish("ok")
    return EXIT_OK


def cmd_impute(args, argv) -> int:
    out = Path(args.output)
    manifest = RunManifest(out.with_name(out.name + ".manifest.json"), "impute", argv, {}, None,
                           [args.input, str(Path(args.chain) / "manifest.txt")], [str(out)])
    table = _load_table(args.input, args.header, None)
    chain = load_chain(args.chain)
    if table.shape[1] != chain.n:
        raise DataError(f"input has {table.shape[1]} columns, chain expects {chain.n}")
    manifest.write()
    try:
        result = impute_chain(table, chain)
        write_matrix_csv(out, result.completed, columns=table.columns)
    except Exception as err:
        manifest.finish("failed", str(err))
        raise
    print(f"imputed {result.n_imputed} entries; output written to {out}")
    manifest.finish("ok")
    return EXIT_OK


def cmd_eval(args, argv) -> int:
    out = Path(args.output)
    table = _load_table(args.input, args.header, None)
    if table.mask.any():
        raise DataError("evaluation input must be fully observed ground truth")
    if not 0.0 < args.rate <= 1.0:
        raise UsageError(f"--rate must lie in (0, 1], got {args.rate}")
    config = _config_from(args)
    manifest = RunManifest(out.with_name(out.name + ".manifest.json"), "eval", argv,
                           {**config.as_dict(), "rate": args.rate, "folds": args.folds, "method": args.method},
                           args.seed, [args.input], [str(out)])
    manifest.write()
    dataset = args.dataset or Path(args.input).stem
    try:
        folds = cross_validate(table.values, args.rate, args.folds, args.seed, config, method=args.method)
        scaled = np.array([f.rmse_scaled for f in folds])
        raw = np.array([f.rmse_raw for f in folds])
        ddof = 1 if len(folds) > 1 else 0
        with out.open("w") as fh:
            fh.write("dataset,missing_rate,fold,rmse_scaled,rmse_raw,n_imputed,rmse_scaled_std,rmse_raw_std\n")
            for f in folds:
                fh.write(f"{dataset},{args.rate!r},{f.fold},{f.rmse_scaled!r},{f.rmse_raw!r},{f.n_imputed},,\n")
            fh.write(f"{dataset},{args.rate!r},mean,{float(scaled.mean())!r},{float(raw.mean())!r},"
                     f"{sum(f.n_imputed for f in folds)},{float(scaled.std(ddof=ddof))!r},"
                     f"{float(raw.std(ddof=ddof))!r}\n")
    except Exception as err:
        manifest.finish("failed", str(err))
        raise
    print(f"{args.method}: scaled RMSE {scaled.mean():.4f} +- {scaled.std(ddof=ddof):.4f} "
          f"over {len(folds)} folds; metrics written to {out}")
    manifest.finish("ok")
    return EXIT_OK


def cmd_replay(args, argv) -> int:
    path = Path(args.manifest)
    if not path.is_file():
        raise DataError(f"run manifest not found: {path}")
    data = json.loads(path.read_text())
    for inp, digest in data.get("inputs", {}).items():
        if not Path(inp).is_file() or _digest(inp) != digest:
            raise DataError(f"input {inp} changed since the recorded run")
    return main(data["argv"])


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="flowimpute", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("genmask", help="write an MCAR mask for a CSV file")
    p.add_argument("--input", required=True)
    p.add_argument("--rate", type=float, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--guard", action="store_true", help="keep at least one observed entry per row")
    p.add_argument("--output", required=True)
    p.add_argument("--header", action="store_true")
    p.set_defaults(func=cmd_genmask)

    p = sub.add_parser("train", help="train a checkpoint chain")
    p.add_argument("--input", required=True)
    p.add_argument("--mask")
    p.add_argument("--rate", type=float)
    p.add_argument("--outdir", required=True)
    p.add_argument("--header", action="store_true")
    p.add_argument("--grid", help="rows,cols[,channels] for image data")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("impute", help="impute a CSV with a trained chain")
    p.add_argument("--input", required=True)
    p.add_argument("--chain", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--header", action="store_true")
    p.set_defaults(func=cmd_impute)

    p = sub.add_parser("eval", help="k-fold MCAR imputation benchmark on complete data")
    p.add_argument("--input", required=True)
    p.add_argument("--rate", type=float, default=0.2)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--method", choices=("flow", "mean", "marginal"), default="flow")
    p.add_argument("--dataset")
    p.add_argument("--output", required=True)
    p.add_argument("--header", action="store_true")
    _add_train_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("replay", help="re-run a command from its run manifest")
    p.add_argument("manifest")
    p.set_defaults(func=cmd_replay)
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args, argv)
    except UsageError as err:
        print(f"flowimpute: usage error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingError, NonFiniteError) as err:
        print(f"flowimpute: numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, ChainFormatError, FileNotFoundError, ValueError) as err:
        print(f"flowimpute: data error: {err}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
