"""Command-line entry point: ``gridinfer <subcommand> ...``.

Every subcommand writes one JSON run manifest next to its main output
(override with ``--manifest``); ``report`` printing to stdout writes one
only when ``--manifest`` is given. Exit codes: 0 success, 1 runtime failure,
2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import math
import sys
import time
from fractions import Fraction
from importlib import resources
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import __version__
from .grid import Grid, default_sensor_buses, read_case, reduce_grid
from .inference import infer
from .mlp import init_model, fit_normalization, load_model, read_model_header, save_model
from .scenarios import (
    GenConfig,
    calibrate_p_out,
    export_csv,
    generate_dataset,
    load_dataset,
    save_dataset,
    split_dataset,
)
from .trainer import TrainConfig, evaluate, train, write_curves

log = logging.getLogger("gridinfer")


class UsageError(Exception):
    pass


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _case_text(case_ref: str) -> tuple[str, str | None]:
    """Text of a case given a path or a bundled name; second item is the file path if any."""
    path = Path(case_ref)
    if path.is_file():
        return path.read_text(encoding="utf-8"), str(path)
    data = resources.files("gridinfer") / "data"
    for suffix in (".json", ".m"):
        res = data / f"{case_ref}{suffix}"
        if res.is_file():
            return res.read_text(encoding="utf-8"), None
    raise UsageError(f"case {case_ref!r} is neither a file nor a bundled case")


def _load_reduced(case_ref: str) -> tuple[Grid, str | None]:
    text, path = _case_text(case_ref)
    return reduce_grid(read_case(text)[0]), path


def _parse_fractions(text: str) -> list[float]:
    try:
        return [float(Fraction(part.strip())) for part in text.split(",")]
    except (ValueError, ZeroDivisionError):
        raise UsageError(f"bad split fractions {text!r}; expected e.g. 2/3,1/6,1/6") from None


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from None


def _jsonable(value: Any) -> Any:
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


class Run:
    """Collects what a subcommand read, wrote and measured, then emits the manifest."""

    def __init__(self, args: argparse.Namespace, argv: Sequence[str]):
        self.args = args
        self.argv = list(argv)
        self.inputs: dict[str, str] = {}
        self.outputs: dict[str, str] = {}
        self.timings: dict[str, float] = {}
        self.results: dict[str, Any] = {}
        self.t0 = time.perf_counter()

    def read(self, path) -> None:
        if path is not None:
            self.inputs[str(path)] = file_sha256(path)

    def wrote(self, path) -> None:
        self.outputs[str(path)] = file_sha256(path)

    def manifest(self) -> dict:
        config = {k: _jsonable(v) for k, v in vars(self.args).items() if k not in ("func",)}
        return {
            "tool": "gridinfer",
            "version": __version__,
            "subcommand": self.args.command,
            "argv": self.argv,
            "config": config,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "wall_time_s": {**self.timings, "total": time.perf_counter() - self.t0},
            "results": self.results,
        }

    def finish(self, default_path) -> None:
        path = self.args.manifest or (f"{default_path}.manifest.json" if default_path else None)
        if path is None:
            return
        Path(path).write_text(json.dumps(self.manifest(), indent=2, sort_keys=True) + "\n")


def cmd_convert(args, run: Run) -> int:
    text, path = _case_text(args.case)
    run.read(path)
    raw, raw_branches = read_case(text)
    grid = reduce_grid(raw)
    Path(args.output).write_text(grid.to_json(), encoding="utf-8")
    run.wrote(args.output)
    run.results = {"buses": grid.n_buses, "raw_branches": raw_branches,
                   "branches": grid.n_branches, "switchable": grid.n_switchable,
                   "grid_fingerprint": grid.fingerprint().hex()}
    print(f"N={grid.n_buses} raw_L={raw_branches} merged_L={grid.n_branches} "
          f"switchable_L={grid.n_switchable}")
    run.finish(args.output)
    return 0


def _gen_config(args, grid: Grid) -> GenConfig:
    if args.p_out is not None and args.target_outages is not None:
        raise UsageError("give either --p-out or --target-outages, not both")
    if args.target_outages is not None:
        p_out = calibrate_p_out(grid, args.target_outages, seed=args.seed)
    elif args.p_out is not None:
        p_out = args.p_out
    else:
        raise UsageError("one of --p-out or --target-outages is required")
    if args.observed_buses is not None and args.sensors is not None:
        raise UsageError("give either --observed-buses or --sensors, not both")
    observed = None
    if args.observed_buses is not None:
        observed = tuple(_int_list(args.observed_buses))
    elif args.sensors is not None:
        observed = tuple(default_sensor_buses(grid, args.sensors))
    cfg = GenConfig(
        p_out=p_out,
        theta_max=math.radians(args.theta_max_deg),
        noise_std_deg=args.noise_std_deg,
        observed_buses=observed,
        injection_measured=not args.no_injections,
        seed=args.seed,
        max_rejections_per_sample=args.max_rejections,
    )
    cfg.observed(grid)  # range check
    return cfg


def cmd_generate(args, run: Run) -> int:
    grid, path = _load_reduced(args.case)
    run.read(path)
    cfg = _gen_config(args, grid)
    t = time.perf_counter()
    d = generate_dataset(grid, cfg, args.count, workers=args.workers)
    run.timings["generate"] = time.perf_counter() - t
    save_dataset(d, args.output)
    run.wrote(args.output)
    accepted = len(d) + d.rejections
    run.results = {
        "samples": len(d),
        "p_out": cfg.p_out,
        "feature_dim": d.feature_dim,
        "switchable": grid.n_switchable,
        "expected_outages_pre_rejection": cfg.p_out * grid.n_switchable,
        "mean_outages": d.mean_outages(),
        "distinct_fraction": d.distinct_fraction(),
        "rejections": d.rejections,
        "acceptance_rate": len(d) / accepted if accepted else 1.0,
        "grid_fingerprint": d.fingerprint.hex(),
    }
    print(f"samples={len(d)} K={d.feature_dim} p_out={cfg.p_out:.6g} "
          f"mean_outages={d.mean_outages():.4f} distinct_fraction={d.distinct_fraction():.4f}")
    run.finish(args.output)
    return 0


def cmd_export_csv(args, run: Run) -> int:
    d = load_dataset(args.dataset)
    run.read(args.dataset)
    with open(args.output, "w", newline="") as fh:
        export_csv(d, fh)
    run.wrote(args.output)
    run.finish(args.output)
    return 0


def _switchable_for(args, d) -> np.ndarray:
    """Switchable mask from --case, else lines that are ever out in the data."""
    if args.case:
        grid, path = _load_reduced(args.case)
        if grid.fingerprint() != d.fingerprint:
            raise UsageError("--case does not match the dataset's grid fingerprint")
        return grid.switchable_mask
    return (d.labels == 0).any(axis=0)


def _existing(path: str) -> str:
    if not Path(path).is_file():
        raise UsageError(f"no such file: {path}")
    return path


def cmd_train(args, run: Run) -> int:
    d = load_dataset(_existing(args.dataset))
    run.read(args.dataset)
    switchable = _switchable_for(args, d)
    fractions = _parse_fractions(args.split)
    if len(fractions) != 3:
        raise UsageError("--split needs three fractions: train,validation,test")
    train_set, val_set, test_set = split_dataset(d, fractions)
    model = init_model((d.feature_dim, args.hidden, d.n_lines), args.init_seed, d.fingerprint)
    if len(train_set):
        model = fit_normalization(model, train_set.features)
    cfg = TrainConfig(learning_rate=args.lr, momentum=args.momentum, batch_size=args.batch_size,
                      epochs=args.epochs, shuffle_seed=args.shuffle_seed, log_every=args.log_every)
    t = time.perf_counter()
    model, history = train(model, train_set, val_set, test_set, cfg, switchable)
    run.timings["train"] = time.perf_counter() - t
    save_model(model, args.model_out)
    run.wrote(args.model_out)
    if args.curves:
        with open(args.curves, "w", newline="") as fh:
            write_curves(history, fh)
        run.wrote(args.curves)
    final = evaluate(model, test_set, switchable) if len(test_set) else None
    run.results = {
        "grid_fingerprint": d.fingerprint.hex(),
        "hidden_dim": args.hidden,
        "feature_dim": d.feature_dim,
        "train_size": len(train_set),
        "validation_size": len(val_set),
        "test_size": len(test_set),
        "epochs": args.epochs,
        "dataset_mean_outages": d.mean_outages(),
        "final_train_loss": history[-1].train_loss if history else None,
        "final_val_loss": history[-1].val_loss if history else None,
        "metrics": final.to_dict() if final else None,
    }
    if final:
        print(f"test accuracy={final.per_line_accuracy:.4f} "
              f"avg_misidentified={final.avg_misidentified:.4f}")
    run.finish(args.model_out)
    return 0


def cmd_evaluate(args, run: Run) -> int:
    d = load_dataset(_existing(args.dataset))
    run.read(args.dataset)
    run.read(_existing(args.model))
    model = load_model(args.model, feature_dim=d.feature_dim, grid_fingerprint=d.fingerprint)
    switchable = _switchable_for(args, d)
    if args.split:
        parts = split_dataset(d, _parse_fractions(args.split))
        d = parts[args.part]
    metrics = evaluate(model, d, switchable)
    out = {"learned": metrics.to_dict()}
    if args.exact_map:
        from .inference import exact_map_accuracy
        if not args.case:
            raise UsageError("--exact-map needs --case")
        grid, _ = _load_reduced(args.case)
        out["exact_map"] = exact_map_accuracy(grid, d).to_dict()
    text = json.dumps(out, indent=2, sort_keys=True)
    print(text)
    if args.metrics_out:
        Path(args.metrics_out).write_text(text + "\n")
        run.wrote(args.metrics_out)
    if args.lines_out:
        with open(args.lines_out, "w", newline="") as fh:
            metrics.write_line_csv(fh)
        run.wrote(args.lines_out)
    run.results = out
    run.finish(args.metrics_out or f"{args.model}.evaluate")
    return 0


def _read_measurements(text: str, k: int) -> np.ndarray:
    text = text.strip()
    if not text:
        raise UsageError("no measurement input")
    if text[0] in "[{":
        doc = json.loads(text)
        rows = doc["y"] if isinstance(doc, dict) else doc
        arr = np.asarray(rows, dtype=np.float64)
    else:
        reader = list(csv.reader(io.StringIO(text)))
        header = reader[0]
        if any(cell.startswith(("y_", "s_")) for cell in header):
            cols = [i for i, c in enumerate(header) if c.startswith("y_")]
            arr = np.array([[float(r[i]) for i in cols] for r in reader[1:] if r], dtype=np.float64)
        else:
            arr = np.array([[float(v) for v in r] for r in reader if r], dtype=np.float64)
    if arr.shape[-1] != k:
        raise ValueError(f"measurement vector has {arr.shape[-1]} entries; the model expects K={k}")
    return arr


def cmd_infer(args, run: Run) -> int:
    header = read_model_header(_existing(args.model))
    model = load_model(args.model)
    run.read(args.model)
    if args.input in (None, "-"):
        text = sys.stdin.read()
    else:
        text = Path(_existing(args.input)).read_text()
        run.read(args.input)
    y = _read_measurements(text, header["K"])
    results = []
    for row in np.atleast_2d(y):
        q, decisions, elapsed = infer(model, row)
        results.append({
            "marginals": [float(v) for v in q],
            "decisions": [int(v) for v in decisions],
            "elapsed_us": elapsed * 1e6,
        })
    out = results[0] if y.ndim == 1 else results
    print(json.dumps(out))
    run.results = {"count": len(results)}
    run.finish(f"{args.model}.infer")
    return 0


REPORT_FIELDS = ["hidden_dim", "train_size", "epochs", "per_line_accuracy", "avg_misidentified",
                 "missed_detection_rate", "false_alarm_rate", "train_seconds", "grid_fingerprint",
                 "manifest", "warning"]


def build_report(manifests: list[tuple[str, dict]]) -> tuple[list[dict], int]:
    """One row per training manifest, sorted by (hidden size, training size)."""
    rows = []
    reference = None
    for name, m in manifests:
        res = m.get("results") or {}
        fp = res.get("grid_fingerprint")
        metrics = res.get("metrics") or {}
        if reference is None and fp:
            reference = fp
        rows.append({
            "hidden_dim": res.get("hidden_dim"),
            "train_size": res.get("train_size"),
            "epochs": res.get("epochs"),
            "per_line_accuracy": metrics.get("per_line_accuracy"),
            "avg_misidentified": metrics.get("avg_misidentified"),
            "missed_detection_rate": metrics.get("missed_detection_rate"),
            "false_alarm_rate": metrics.get("false_alarm_rate"),
            "train_seconds": (m.get("wall_time_s") or {}).get("train"),
            "grid_fingerprint": fp,
            "manifest": name,
            "warning": "",
        })
    warnings = 0
    for row in rows:
        if row["hidden_dim"] is None:
            row["warning"] = "not a training manifest"
        elif row["grid_fingerprint"] != reference:
            row["warning"] = "grid differs from first manifest"
        warnings += bool(row["warning"])
    rows.sort(key=lambda r: (r["hidden_dim"] is None, r["hidden_dim"] or 0, r["train_size"] or 0))
    return rows, warnings


def cmd_report(args, run: Run) -> int:
    manifests = []
    for path in args.manifests:
        run.read(_existing(path))
        manifests.append((path, json.loads(Path(path).read_text())))
    rows, warnings = build_report(manifests)
    if args.format == "json":
        text = json.dumps(rows, indent=2) + "\n"
    else:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=REPORT_FIELDS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
        text = buf.getvalue()
    if args.output:
        Path(args.output).write_text(text)
        run.wrote(args.output)
    else:
        sys.stdout.write(text)
    if warnings:
        print(f"warnings: {warnings}", file=sys.stderr)
    run.results = {"rows": len(rows), "warnings": warnings}
    run.finish(args.output)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gridinfer", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, func, help: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help)
        p.set_defaults(func=func)
        p.add_argument("--config", help="JSON file supplying any option; command line wins")
        p.add_argument("--manifest", help="manifest path (default: <output>.manifest.json)")
        return p

    p = add("convert", cmd_convert, "MATPOWER or JSON case -> canonical reduced JSON case")
    p.add_argument("case", help="case file path or bundled name (case30, case5_ring)")
    p.add_argument("output")

    p = add("generate", cmd_generate, "generate a labeled Monte Carlo dataset")
    p.add_argument("--case", default="case30")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--output", "-o", required=True)
    p.add_argument("--p-out", type=float, help="per-line Bernoulli outage probability")
    p.add_argument("--target-outages", type=float,
                   help="calibrate p_out so accepted samples average this many outages")
    p.add_argument("--theta-max-deg", type=float, default=36.0)
    p.add_argument("--noise-std-deg", type=float, default=0.01)
    p.add_argument("--observed-buses", help="comma-separated 0-based bus ids with PMUs")
    p.add_argument("--sensors", type=int, help="use the N highest-degree buses as PMU sites")
    p.add_argument("--no-injections", action="store_true", help="omit injection features")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--max-rejections", type=int, default=10_000)
    p.add_argument("--workers", type=int, default=1)

    p = add("export-csv", cmd_export_csv, "dataset -> CSV (s_0.., y_0..)")
    p.add_argument("dataset")
    p.add_argument("output")

    p = add("train", cmd_train, "train a classifier on a dataset")
    p.add_argument("dataset")
    p.add_argument("--model-out", required=True)
    p.add_argument("--curves", help="training-curve CSV path")
    p.add_argument("--case", help="case for the switchable-line mask (default: infer from labels)")
    p.add_argument("--split", default="2/3,1/6,1/6")
    p.add_argument("--hidden", type=int, default=300)
    p.add_argument("--init-seed", type=int, default=0)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--shuffle-seed", type=int, default=0)
    p.add_argument("--log-every", type=int, default=1)

    p = add("evaluate", cmd_evaluate, "score a model on a dataset")
    p.add_argument("model")
    p.add_argument("dataset")
    p.add_argument("--case")
    p.add_argument("--split", help="evaluate only one split of the dataset")
    p.add_argument("--part", type=int, default=2, help="split index (default 2 = test)")
    p.add_argument("--metrics-out")
    p.add_argument("--lines-out", help="per-line CSV (line_id,accuracy,missed,false_alarm)")
    p.add_argument("--exact-map", action="store_true", help="also score exact enumeration MAP")

    p = add("infer", cmd_infer, "marginals and decisions for measurement vectors")
    p.add_argument("model")
    p.add_argument("--input", "-i", help="JSON vector/list or CSV (default: stdin)")

    p = add("report", cmd_report, "tabulate training manifests (model size x data size)")
    p.add_argument("manifests", nargs="*")
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("--output", "-o")
    return parser


def _config_path(argv: list[str]) -> str | None:
    for i, arg in enumerate(argv):
        if arg == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if arg.startswith("--config="):
            return arg.split("=", 1)[1]
    return None


def _apply_config(parser: argparse.ArgumentParser, argv: list[str]) -> argparse.Namespace:
    """Parse ``argv``, taking option defaults from the ``--config`` JSON file if one is given.

    The file is read before parsing so it can also supply options that are
    otherwise required; anything on the command line still wins.
    """
    path = _config_path(argv)
    choices = parser._subparsers._group_actions[0].choices  # noqa: SLF001
    command = next((a for a in argv if a in choices), None)
    if path is None or command is None:
        return parser.parse_args(argv)
    try:
        overrides = json.loads(Path(path).read_text())
        if not isinstance(overrides, dict):
            raise ValueError("top level must be an object")
    except (OSError, ValueError) as exc:
        parser.error(f"cannot read --config: {exc}")
    subparser = choices[command]
    options = {a.dest: a for a in subparser._actions if a.option_strings}  # noqa: SLF001
    defaults = {}
    for key, value in overrides.items():
        dest = key.lstrip("-").replace("-", "_")
        if dest not in options or dest in ("config", "help"):
            parser.error(f"unknown option {key!r} in --config")
        options[dest].required = False
        defaults[dest] = value
    subparser.set_defaults(**defaults)
    return parser.parse_args(argv)


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    run = Run(args, argv)
    try:
        return args.func(args, run)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"gridinfer {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError, RuntimeError, ArithmeticError) as exc:
        print(f"gridinfer {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
