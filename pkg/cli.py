"""
Command-line experiment driver for the neatpad workbench.

    python cli.py run --config config/xor.toml --seeds 0..9
    python cli.py inspect runs/xor/seed_0/best_genome.json
    python cli.py export runs/xor/seed_0/best_genome.json --dot --formula typeset
    python cli.py bench --config config/xor.toml --sweep 50,200,1000

Exit codes: 0 success, 1 runtime failure, 2 config error.
"""

import argparse
import json
import logging
import sys

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from pydantic import ValidationError
from tqdm import tqdm

from config.settings import DEBUG, DEFAULT_THREADS, RUNS_DIR, VERSION
from models.data_models import GenerationStats, NeatConfig, RunManifest, RunSummary
from models.errors import ConfigError, NeatError
from services.encoding_service import decode_genome, validate_genome
from services.evolution_service import evolve
from services.export_service import export_service
from services.inference_service import DEFAULT_SCHEMA
from services.problem_service import genome_act, problem_service
from utils.logging_utils import configure_root_logging
from utils.rng import RngKey

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2

STATS_COLUMNS = ["generation", "best", "mean", "std", "species_count", "elapsed_ms"]


# Config handling

def parse_override(text: str) -> Tuple[str, Any]:
    """Parse ``key=value``; the value is read as a TOML scalar, else kept as a string."""
    if "=" not in text:
        raise ConfigError(text, "override must look like key=value")
    key, raw = text.split("=", 1)
    try:
        value = tomllib.loads(f"value = {raw.strip()}")["value"]
    except tomllib.TOMLDecodeError:
        value = raw.strip()
    return key.strip(), value


def parse_seeds(text: str) -> List[int]:
    """Accept ``3``, ``0..9`` (inclusive) or ``1,4,7``."""
    try:
        if ".." in text:
            start, stop = (int(part) for part in text.split("..", 1))
            seeds = list(range(start, stop + 1))
        else:
            seeds = [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise ConfigError("seeds", f"cannot parse '{text}'") from None
    if not seeds or min(seeds) < 0:
        raise ConfigError("seeds", f"'{text}' selects no valid seeds")
    return seeds


def build_config(data: Dict[str, Any]) -> NeatConfig:
    """
    Validate a flat config mapping.

    Raises:
        ConfigError: Naming the first offending field
    """
    try:
        return NeatConfig(**data)
    except ValidationError as e:
        first = e.errors()[0]
        field = ".".join(str(p) for p in first["loc"]) or "config"
        raise ConfigError(field, first["msg"]) from None


def load_config(path: str, overrides: Optional[List[str]] = None) -> NeatConfig:
    """
    Read a TOML experiment config and apply ``--set`` overrides.

    Raises:
        ConfigError: If the file is missing, malformed or fails validation
    """
    try:
        with open(path, "rb") as f:
            data = tomllib.load(f)
    except FileNotFoundError:
        raise ConfigError("config", f"{path} not found") from None
    except tomllib.TOMLDecodeError as e:
        raise ConfigError("config", f"{path}: {e}") from None

    for text in overrides or []:
        key, value = parse_override(text)
        data[key] = value
    return build_config(data)


def load_manifest(path: str) -> Tuple[NeatConfig, List[int]]:
    try:
        with open(path) as f:
            manifest = RunManifest(**json.load(f))
    except (OSError, json.JSONDecodeError, ValidationError) as e:
        raise ConfigError("manifest", f"cannot read {path}: {e}") from None
    return build_config(manifest.config), manifest.seeds


# Output helpers

def write_json(path: Path, payload: Dict[str, Any]) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=str) + "\n")


def append_stats(path: Path, record: GenerationStats) -> None:
    row = pd.DataFrame([record.model_dump(include=set(STATS_COLUMNS))])[STATS_COLUMNS]
    row.to_csv(path, mode="a", header=not path.exists(), index=False)


def write_aggregate(out_dir: Path, seeds: List[int]) -> Path:
    """Per-generation mean and 95% CI half-width of best and mean fitness across seeds."""
    frames = [pd.read_csv(out_dir / f"seed_{seed}" / "stats.csv").assign(seed=seed) for seed in seeds]
    grouped = pd.concat(frames).groupby("generation")
    aggregate = pd.DataFrame({
        "seeds": grouped["seed"].count(),
        "best_mean": grouped["best"].mean(),
        "best_ci95": 1.96 * grouped["best"].std(ddof=1).fillna(0.0) / np.sqrt(grouped["best"].count()),
        "mean_mean": grouped["mean"].mean(),
        "mean_ci95": 1.96 * grouped["mean"].std(ddof=1).fillna(0.0) / np.sqrt(grouped["mean"].count()),
    }).reset_index()
    path = out_dir / "aggregate.csv"
    aggregate.to_csv(path, index=False)
    return path


def _manifest(cfg: NeatConfig, seeds: List[int], outputs: Dict[str, Dict[str, str]], started: datetime,
              finished: Optional[datetime] = None) -> Dict[str, Any]:
    return RunManifest(
        config=cfg.model_dump(), seeds=seeds, outputs=outputs, version=VERSION,
        started_at=started, finished_at=finished,
    ).model_dump()


# Commands

def cmd_run(args: argparse.Namespace) -> int:
    """Evolve once per seed, writing stats, champion, summary and manifest."""
    try:
        if args.manifest:
            cfg, seeds = load_manifest(args.manifest)
        else:
            cfg = load_config(args.config, args.set)
            seeds = [cfg.seed]
        if args.seeds:
            seeds = parse_seeds(args.seeds)
        problem = problem_service.create(cfg)
    except ConfigError as e:
        logging.error(f"Config error: {e}")
        print(f"config error in field '{e.field}': {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NeatError as e:
        logging.error(f"Error preparing run: {e}")
        return EXIT_RUNTIME

    source = Path(args.manifest or args.config)
    out_dir = Path(args.out) if args.out else Path(RUNS_DIR) / source.stem
    started = datetime.now()
    outputs = {
        str(seed): {
            name: str(out_dir / f"seed_{seed}" / name)
            for name in ("stats.csv", "best_genome.json", "summary.json", "manifest.json")
        }
        for seed in seeds
    }
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        write_json(out_dir / "manifest.json", _manifest(cfg, seeds, outputs, started))

        for seed in seeds:
            seed_cfg = build_config({**cfg.model_dump(), "seed": seed})
            seed_dir = out_dir / f"seed_{seed}"
            seed_dir.mkdir(parents=True, exist_ok=True)
            write_json(seed_dir / "manifest.json", _manifest(seed_cfg, [seed], {str(seed): outputs[str(seed)]}, started))
            stats_path = seed_dir / "stats.csv"
            stats_path.unlink(missing_ok=True)

            def on_generation(record: GenerationStats, seed=seed, stats_path=stats_path) -> None:
                append_stats(stats_path, record)
                print(f"seed {seed} gen {record.generation:4d}  best {record.best:.6f}  "
                      f"mean {record.mean:.6f}  species {record.species_count}  {record.elapsed_ms:.1f} ms")

            best, stats = evolve(problem, seed_cfg, RngKey(seed), workers=args.threads,
                                 schema=DEFAULT_SCHEMA, on_generation=on_generation)
            (seed_dir / "best_genome.json").write_text(export_service.save_genome(best, DEFAULT_SCHEMA))

            summary = RunSummary(
                seed=seed,
                problem=cfg.problem,
                generations=len(stats.generations),
                best_fitness=stats.best_fitness,
                solved=stats.best_fitness >= cfg.fitness_target,
                best_genome_nodes=int(best.node_mask().sum()),
                best_genome_conns=int(best.conn_mask().sum()),
                elapsed_ms=sum(g.elapsed_ms for g in stats.generations),
            )
            write_json(seed_dir / "summary.json", summary.model_dump())
            logging.info(f"Seed {seed} champion:\n{problem.show(RngKey(seed), genome_act(best, DEFAULT_SCHEMA))}")

        if len(seeds) > 1:
            logging.info(f"Aggregate written to {write_aggregate(out_dir, seeds)}")
        write_json(out_dir / "manifest.json", _manifest(cfg, seeds, outputs, started, datetime.now()))
    except ConfigError as e:
        logging.error(f"Config error: {e}")
        return EXIT_CONFIG
    except (NeatError, OSError) as e:
        logging.error(f"Run failed: {e}")
        return EXIT_RUNTIME

    print(f"results in {out_dir}")
    return EXIT_OK


def _read_genome(path: str):
    text = Path(path).read_text()
    return export_service.load_genome_with_schema(text)


def cmd_inspect(args: argparse.Namespace) -> int:
    """Print node / connection tables, counts and a validity verdict."""
    try:
        genome, schema = _read_genome(args.genome)
    except (NeatError, OSError) as e:
        logging.error(f"Cannot read genome {args.genome}: {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME

    problems = validate_genome(genome, schema)
    try:
        nodes, conns = decode_genome(genome, schema)
    except NeatError:
        nodes, conns = [], []

    if nodes:
        print(pd.DataFrame([n.model_dump() for n in nodes]).to_string(index=False))
    if conns:
        print()
        print(pd.DataFrame([c.model_dump() for c in conns]).to_string(index=False))
    enabled = sum(1 for c in conns if c.enabled)
    print()
    print(f"inputs {genome.num_inputs}  outputs {genome.num_outputs}  "
          f"nodes {len(nodes)}/{genome.max_nodes}  connections {len(conns)}/{genome.max_conns} ({enabled} enabled)")

    if problems:
        print("INVALID: " + "; ".join(problems))
        return EXIT_RUNTIME
    print("VALID")
    return EXIT_OK


def cmd_export(args: argparse.Namespace) -> int:
    """Write a diagram and/or formula file next to the genome (or at --out)."""
    try:
        genome, schema = _read_genome(args.genome)
        problems = validate_genome(genome, schema)
        if problems:
            raise NeatError("; ".join(problems))

        stem = Path(args.out) if args.out else Path(args.genome).with_suffix("")
        stem.parent.mkdir(parents=True, exist_ok=True)
        if args.dot:
            path = stem.with_name(stem.name + ".dot")
            path.write_text(export_service.to_dot(genome, schema))
            print(f"wrote {path}")
        if args.formula:
            suffix = ".tex" if args.formula == "typeset" else ".txt"
            path = stem.with_name(stem.name + suffix)
            path.write_text(export_service.to_formula(genome, args.formula, schema))
            print(f"wrote {path}")
    except (NeatError, OSError) as e:
        logging.error(f"Export failed: {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def _timed_run(problem, cfg: NeatConfig, threads: int, progress: bool) -> List[GenerationStats]:
    records: List[GenerationStats] = []
    with tqdm(total=cfg.generation_limit, desc=f"pop {cfg.pop_size}", disable=not progress, leave=False) as bar:
        def on_generation(record: GenerationStats) -> None:
            records.append(record)
            bar.update(1)
            bar.set_postfix(best=f"{record.best:.4f}")

        evolve(problem, cfg, RngKey(cfg.seed), workers=threads, schema=DEFAULT_SCHEMA, on_generation=on_generation)
    return records


def cmd_bench(args: argparse.Namespace) -> int:
    """Time a run per generation and optionally sweep population sizes."""
    try:
        cfg = load_config(args.config, args.set)
        problem = problem_service.create(cfg)
        sizes = [int(s) for s in args.sweep.split(",")] if args.sweep else []
    except ConfigError as e:
        logging.error(f"Config error: {e}")
        print(f"config error in field '{e.field}': {e}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError:
        logging.error(f"Cannot parse sweep '{args.sweep}'")
        return EXIT_CONFIG
    except NeatError as e:
        logging.error(f"Error preparing bench: {e}")
        return EXIT_RUNTIME

    out_dir = Path(args.out) if args.out else Path(RUNS_DIR) / f"bench-{Path(args.config).stem}"
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        records = _timed_run(problem, cfg, args.threads, not args.quiet)
        timing = pd.DataFrame({
            "generation": [r.generation for r in records],
            "elapsed_ms": [r.elapsed_ms for r in records],
        })
        timing["cumulative_ms"] = timing["elapsed_ms"].cumsum()
        timing.to_csv(out_dir / "timing.csv", index=False)
        print(f"{len(records)} generations, {timing['cumulative_ms'].iloc[-1]:.1f} ms total")

        if sizes:
            rows = []
            for size in tqdm(sizes, desc="sweep", disable=args.quiet):
                sized = build_config({**cfg.model_dump(), "pop_size": size})
                sized_records = _timed_run(problem, sized, args.threads, False)
                elapsed = [r.elapsed_ms for r in sized_records]
                rows.append({
                    "pop_size": size,
                    "generations": len(sized_records),
                    "total_ms": float(np.sum(elapsed)),
                    "mean_generation_ms": float(np.mean(elapsed)),
                    "best_fitness": max(r.best for r in sized_records),
                })
            sweep = pd.DataFrame(rows)
            sweep.to_csv(out_dir / "sweep.csv", index=False)
            print(sweep.to_string(index=False))
    except ConfigError as e:
        logging.error(f"Config error: {e}")
        return EXIT_CONFIG
    except (NeatError, OSError) as e:
        logging.error(f"Bench failed: {e}")
        return EXIT_RUNTIME
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="neatpad", description="Tensorized NEAT experiment driver")
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    parser.add_argument("--quiet", action="store_true", help="warnings only, no progress bars")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="evolve one or more seeds")
    source = run.add_mutually_exclusive_group(required=True)
    source.add_argument("--config", help="TOML experiment config")
    source.add_argument("--manifest", help="re-run from a run manifest")
    run.add_argument("--seeds", help="'0..9', '1,2,3' or a single seed (default: config seed)")
    run.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config field")
    run.add_argument("--threads", type=int, default=DEFAULT_THREADS, help="evaluation threads")
    run.add_argument("--out", help="output directory (default: runs dir / config name)")
    run.set_defaults(handler=cmd_run)

    inspect = sub.add_parser("inspect", help="print and validate a genome document")
    inspect.add_argument("genome")
    inspect.set_defaults(handler=cmd_inspect)

    export = sub.add_parser("export", help="write a diagram and/or formula for a genome")
    export.add_argument("genome")
    export.add_argument("--dot", action="store_true", help="write a .dot topology diagram")
    export.add_argument("--formula", choices=["typeset", "plain"], help="write formulas in this style")
    export.add_argument("--out", help="output path without extension (default: next to the genome)")
    export.set_defaults(handler=cmd_export)

    bench = sub.add_parser("bench", help="time a run and optionally sweep population sizes")
    bench.add_argument("--config", required=True)
    bench.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    bench.add_argument("--sweep", help="comma-separated population sizes")
    bench.add_argument("--threads", type=int, default=DEFAULT_THREADS)
    bench.add_argument("--out", help="output directory")
    bench.set_defaults(handler=cmd_bench)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "export" and not (args.dot or args.formula):
        parser.error("export needs --dot and/or --formula")

    level = logging.DEBUG if (DEBUG or args.verbose) else logging.WARNING if args.quiet else logging.INFO
    configure_root_logging(level)
    return args.handler(args)


if __name__ == "__main__":
    sys.exit(main())
