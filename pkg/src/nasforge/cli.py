"""Command-line entry point: ``nasforge <command> [options]``."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import arch, compiler, gradcheck
from .arch import ArchParseError, CellDescription
from .experiment import (ConfigError, ExperimentConfig, compare_logs, compare_tsv, load_config, run_nas,
                         run_random)
from .searchlog import SearchLog
from .tasks import builtin_tasks
from .train import GRID_KEYS, default_config, grid_search

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _err(msg: str) -> None:
    print(msg, file=sys.stderr)


def _global_flags() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    sup = argparse.SUPPRESS
    p.add_argument("--config", default=sup, help="experiment config file (JSON profile)")
    p.add_argument("--seed", type=int, default=sup, help="master seed")
    p.add_argument("--deterministic", action="store_true", default=sup,
                   help="seeded total order of all messages (exactly reproducible)")
    p.add_argument("--out", default=sup, help="output directory")
    p.add_argument("--resume", action="store_true", default=sup, help="continue from an existing log in --out")
    p.add_argument("--greedy-final", action="store_true", default=sup,
                   help="also emit the greedy-decoded architecture")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags()
    parser = argparse.ArgumentParser(prog="nasforge", description=__doc__, parents=[common])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("search", parents=[common], help="controller search")
    p.add_argument("--budget", type=int, help="override the config's sample budget")
    p = sub.add_parser("randsearch", parents=[common], help="uniform random search")
    p.add_argument("--budget", type=int, help="override the config's sample budget")

    p = sub.add_parser("compare", parents=[common], help="per-window top-k difference of two logs")
    p.add_argument("nas_log")
    p.add_argument("rand_log")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--window", type=int, default=400)

    p = sub.add_parser("compile", parents=[common], help="compile a description and dump the graph")
    p.add_argument("desc_file", help="architecture file, or 'lstm' for the reference LSTM cell")
    p.add_argument("--input-shape", default="8,8,3", help="conv input H,W,C")
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--input-dim", type=int, default=8, help="cell input width")
    p.add_argument("--hidden", type=int, default=8, help="cell hidden width")
    p.add_argument("--batch", type=int, default=2)
    p.add_argument("--check-grad", action="store_true", help="finite-difference check of the compiled graph")

    p = sub.add_parser("grid", parents=[common], help="grid search over training settings for one description")
    p.add_argument("desc_file")
    p.add_argument("--task", required=True)
    p.add_argument("--grid", required=True, help="grid file: {\"learning_rate\": [...], ...}")
    p.add_argument("--epochs", type=int)

    sub.add_parser("tasks", parents=[common], help="list built-in tasks")
    return parser


# --------------------------------------------------------------------------


def _experiment(args) -> ExperimentConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    if getattr(args, "deterministic", False):
        cfg = dataclasses.replace(cfg, cluster=dataclasses.replace(cfg.cluster, deterministic=True))
    if getattr(args, "budget", None) is not None:
        cfg = dataclasses.replace(cfg, budget=args.budget)
    return cfg


def _summary(report: dict) -> str:
    lines = [f"{report['kind']}: {report['n_samples']} samples on {report['task']}"]
    for r in report["best"]:
        lines.append(f"  sample {r['sample']:>6}  reward {r['reward']:.6f}  raw {r['raw']:.6f}")
    if report.get("greedy"):
        lines.append("greedy: " + json.dumps(report["greedy"], separators=(",", ":")))
    return "\n".join(lines)


def cmd_search(args) -> int:
    cfg = _experiment(args)
    out = getattr(args, "out", None)
    if getattr(args, "resume", False) and out is None:
        raise UsageError("--resume needs --out")
    report, _ = run_nas(cfg, out, getattr(args, "resume", False), getattr(args, "greedy_final", False))
    print(_summary(report))
    return EXIT_OK


def cmd_randsearch(args) -> int:
    cfg = _experiment(args)
    out = getattr(args, "out", None)
    if getattr(args, "resume", False) and out is None:
        raise UsageError("--resume needs --out")
    report, _ = run_random(cfg, out, getattr(args, "resume", False))
    print(_summary(report))
    return EXIT_OK


def cmd_compare(args) -> int:
    if args.k < 1 or args.window < 1:
        raise UsageError("--k and --window must be >= 1")
    nas, rand = SearchLog.read(args.nas_log), SearchLog.read(args.rand_log)
    if not len(nas) or not len(rand):
        raise UsageError("both logs must be non-empty")
    report = compare_logs(nas, rand, args.k, args.window)
    table = compare_tsv(report)
    sys.stdout.write(table)
    out = getattr(args, "out", None)
    if out is not None:
        Path(out).mkdir(parents=True, exist_ok=True)
        (Path(out) / "compare.tsv").write_text(table, encoding="utf-8")
        (Path(out) / "compare.report.json").write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    return EXIT_OK


def _compile_target(args):
    if args.desc_file == "lstm":
        return compiler.reference_lstm(args.input_dim, args.hidden, args.batch)
    text = Path(args.desc_file).read_text(encoding="utf-8")
    desc = arch.parse(text)
    if isinstance(desc, CellDescription):
        return compiler.compile_cell(desc, args.input_dim, args.hidden, args.batch)
    try:
        shape = tuple(int(v) for v in args.input_shape.split(","))
    except ValueError:
        raise UsageError(f"--input-shape must look like H,W,C, got {args.input_shape!r}") from None
    if len(shape) != 3:
        raise UsageError(f"--input-shape must look like H,W,C, got {args.input_shape!r}")
    return compiler.compile_conv(desc, shape, args.classes, batch=args.batch)


def cmd_compile(args) -> int:
    compiled = _compile_target(args)
    print(compiler.dump(compiled))
    if args.check_grad:
        rng = np.random.default_rng(getattr(args, "seed", 0))
        params = compiler.init_params(compiled.manifest, rng)
        inputs = {k: rng.standard_normal(s) for k, s in compiled.graph.input_shapes().items()}
        err = gradcheck.check_graph(compiled.graph, params, inputs, rng, include_inputs=True)
        ok = err < 1e-4
        print(f"max rel error: {err:.3e} ({'ok' if ok else 'FAILED'})")
        if err.skipped:
            print(f"{err.skipped} coordinates skipped: a relu/max kink lies within every probe step")
        if not ok:
            _err(f"gradient check failed: max rel error {err:.3e} >= 1e-4")
            return EXIT_FAIL
    return EXIT_OK


def _read_grid(path) -> dict:
    obj = arch.load_profile_json(Path(path).read_text(encoding="utf-8"), allow_reals=True)
    if not isinstance(obj, dict) or not obj:
        raise UsageError("grid file must be a non-empty object")
    obj = {k: v for k, v in obj.items() if k not in ("format", "version")}
    for key, vals in obj.items():
        if key not in GRID_KEYS:
            raise UsageError(f"grid.{key}: unknown axis; allowed {', '.join(GRID_KEYS)}")
        if not isinstance(vals, list) or not vals:
            raise UsageError(f"grid.{key}: must be a non-empty list")
    return obj


def cmd_grid(args) -> int:
    catalog = builtin_tasks()
    if args.task not in catalog:
        raise UsageError(f"unknown task {args.task!r}; known: {', '.join(sorted(catalog))}")
    seed = getattr(args, "seed", 0)
    task = catalog[args.task].load(seed=seed)
    if task is None:
        raise UsageError(f"task {args.task!r} is not available")
    if task.kind == "landscape":
        raise UsageError("grid search needs a trainable task")
    grid = _read_grid(args.grid)
    desc = "lstm" if args.desc_file == "lstm" else arch.parse(Path(args.desc_file).read_text(encoding="utf-8"))
    base = default_config(task, seed=seed)
    if args.epochs is not None:
        base = dataclasses.replace(base, epochs=args.epochs)
    config, result, cells = grid_search(desc, task, grid, base)
    for cfg, res in cells:
        picked = {k: getattr(cfg, k) for k in grid}
        print(f"cell {json.dumps(picked)}  valid {task.metric} {res.best_recent():.6f}")
    winner = {k: getattr(config, k) for k in grid}
    print(f"winner {json.dumps(winner)}  valid {task.metric} {result.best_recent():.6f}")
    print(f"test {task.metric} {result.test_metric:.6f}")
    out = getattr(args, "out", None)
    if out is not None:
        Path(out).mkdir(parents=True, exist_ok=True)
        payload = {"winner": dataclasses.asdict(config), "result": result.to_dict()}
        (Path(out) / "grid.json").write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_tasks(args) -> int:
    for name, entry in builtin_tasks().items():
        state = "available" if entry.available() else "unavailable"
        print(f"{name:<18} {entry.kind:<16} {state:<12} {entry.description}")
    return EXIT_OK


COMMANDS = {"search": cmd_search, "randsearch": cmd_randsearch, "compare": cmd_compare,
            "compile": cmd_compile, "grid": cmd_grid, "tasks": cmd_tasks}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        _err(f"config error in field {exc.field!r}: {exc}")
        return EXIT_USAGE
    except ArchParseError as exc:
        _err(f"invalid description: {exc}")
        return EXIT_FAIL
    except UsageError as exc:
        _err(f"usage error: {exc}")
        return EXIT_USAGE
    except (FileNotFoundError, IsADirectoryError) as exc:
        _err(f"error: {exc}")
        return EXIT_USAGE
    except ValueError as exc:
        _err(f"error: {exc}")
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
