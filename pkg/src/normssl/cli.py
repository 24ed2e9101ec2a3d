"""Command-line experiment runner: ``normssl run | grid | verify``."""
from __future__ import annotations

import argparse
import contextlib
import csv
import logging
import os
import sys
from pathlib import Path

from .config import ConfigError, ExperimentConfig, apply_overrides, load, preset

log = logging.getLogger("normssl")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_VERIFY = 4

OUT_ENV = "NORMSSL_OUT"

METRICS_COLUMNS = [
    "epoch", "step", "loss", "positive_term", "negative_term", "lr",
    "feature_std", "pairwise_cosine", "probe_acc",
]


def _fmt(v) -> str:
    return "" if v is None else repr(float(v)) if isinstance(v, float) else str(v)


def metrics_row(m) -> list[str]:
    return [_fmt(v) for v in (
        m.epoch, m.step, m.loss, m.positive, m.negative, m.lr, m.feature_std, m.pairwise_cosine, m.probe_acc,
    )]


def thread_limit(n: int | None):
    """Cap BLAS threads for the duration of a run."""
    if not n:
        return contextlib.nullcontext()
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover - optional
        log.warning("threadpoolctl unavailable; --threads ignored")
        return contextlib.nullcontext()
    return threadpool_limits(limits=n)


def parse_sets(items: list[str] | None) -> dict[str, str]:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def resolve_config(args) -> ExperimentConfig:
    if args.preset and args.config:
        raise ConfigError("give either --preset or --config, not both")
    if args.config:
        cfg = load(args.config)
    elif args.preset:
        cfg = preset(args.preset)
    else:
        cfg = ExperimentConfig()
    overrides = parse_sets(args.set)
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    return apply_overrides(cfg, overrides)


def _read_metrics(path: Path, upto_epoch: int) -> list[list[str]]:
    if not path.exists():
        return []
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return [r for r in rows[1:] if r and int(r[0]) <= upto_epoch]


def cmd_run(args) -> int:
    from .checkpoint import load_trainer, save_trainer
    from .training import DivergenceError, Trainer

    if args.resume:
        trainer = load_trainer(args.resume)
        cfg = trainer.cfg
        out = Path(args.out) if args.out else Path(args.resume).parent
    else:
        cfg = resolve_config(args)
        root = Path(os.environ.get(OUT_ENV, "runs"))
        out = Path(args.out) if args.out else root / f"{cfg.name}-{cfg.hash()}-s{cfg.seed}"
        trainer = Trainer(cfg)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.dumps())
    metrics_path = out / "metrics.csv"
    previous = _read_metrics(metrics_path, trainer.state.epoch) if args.resume else []
    ckpt = out / "checkpoint.bin"

    with open(metrics_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRICS_COLUMNS)
        writer.writerows(previous)
        fh.flush()

        def on_epoch(m):
            writer.writerow(metrics_row(m))
            fh.flush()
            save_trainer(ckpt, trainer)
            log.info("epoch %d loss %.4f feature_std %.4g probe %s", m.epoch, m.loss, m.feature_std, m.probe_acc)

        if trainer.state.epoch == 0:
            save_trainer(ckpt, trainer)
        try:
            trainer.fit(until_epoch=args.until_epoch, on_epoch=on_epoch)
        except DivergenceError as exc:
            print(f"diverged: {exc}; last checkpoint at epoch {trainer.state.epoch} kept in {ckpt}", file=sys.stderr)
            return EXIT_DIVERGED
    print(out)
    return EXIT_OK


def parse_grid_file(path: Path):
    """Grid spec: one cell per line as whitespace-separated key=value pairs
    (``preset`` and ``id`` are recognized); a line starting with ``defaults``
    sets overrides shared by every cell; ``#`` comments."""
    from .evaluation import AblationGrid, Cell

    defaults: dict[str, str] = {}
    cells = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        is_defaults = tokens[0] == "defaults"
        pairs = parse_sets(tokens[1:] if is_defaults else tokens)
        if is_defaults:
            defaults.update(pairs)
            continue
        base = pairs.pop("preset", None)
        cell_id = pairs.pop("id", None)
        cfg = preset(base) if base else ExperimentConfig()
        cfg = apply_overrides(cfg, {**defaults, **pairs})
        cells.append(Cell(cell_id or f"line{lineno}/{cfg.name}/s{cfg.seed}", cfg))
    if not cells:
        raise ConfigError(f"{path}: grid has no cells")
    return AblationGrid(cells)


def cmd_grid(args) -> int:
    from .evaluation import run_grid, table1_grid, table2_grid

    overrides = parse_sets(args.set)
    seeds = tuple(int(s) for s in args.seeds.split(",")) if args.seeds else (0,)
    if args.spec == "table1":
        grid = table1_grid(seeds, **overrides)
    elif args.spec == "table2":
        grid = table2_grid(seeds, **overrides)
    else:
        path = Path(args.spec)
        if not path.exists():
            raise ConfigError(f"grid spec {args.spec!r} is neither a built-in nor a file")
        grid = parse_grid_file(path)
    if args.list:
        for c in grid.cells:
            print(c.cell_id, c.config.hash())
        return EXIT_OK
    out = Path(args.out) if args.out else Path(os.environ.get(OUT_ENV, "runs")) / f"grid-{args.spec if args.spec in ('table1', 'table2') else Path(args.spec).stem}"
    rows = run_grid(grid, out, workers=args.threads or 1)
    failed = [r for r in rows if r.get("status") != "ok"]
    print(f"{len(rows)} cells, {len(failed)} not ok -> {out / 'results.csv'}")
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verify import run_verification

    results = run_verification(cases=args.cases, seed=args.seed or 0, fault=args.inject_fault)
    for r in results:
        print(r.line())
    bad = [r for r in results if not r.passed]
    print(f"{len(results) - len(bad)}/{len(results)} checks passed")
    return EXIT_VERIFY if bad else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="normssl", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field (repeatable)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", metavar="DIR")
        sp.add_argument("--threads", type=int, metavar="N")
        sp.add_argument("--deterministic", action="store_true", help="single-threaded kernels")

    run = sub.add_parser("run", help="train and evaluate one configuration")
    run.add_argument("--preset")
    run.add_argument("--config", metavar="FILE")
    run.add_argument("--epochs", type=int)
    run.add_argument("--resume", metavar="CHECKPOINT")
    run.add_argument("--until-epoch", type=int, metavar="E", help="stop after epoch E (schedule unchanged)")
    common(run)

    grid = sub.add_parser("grid", help="run an ablation grid")
    grid.add_argument("spec", help="table1, table2, or a grid spec file")
    grid.add_argument("--seeds", help="comma-separated seeds for built-in grids")
    grid.add_argument("--list", action="store_true", help="print the cells and exit")
    common(grid)

    ver = sub.add_parser("verify", help="run the invariant suite")
    ver.add_argument("--cases", type=int, default=3)
    ver.add_argument("--inject-fault", choices=["relu", "conv2d", "matmul", "standardize"], help=argparse.SUPPRESS)
    common(ver)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    threads = 1 if args.deterministic else args.threads
    handlers = {"run": cmd_run, "grid": cmd_grid, "verify": cmd_verify}
    try:
        with thread_limit(threads):
            return handlers[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
