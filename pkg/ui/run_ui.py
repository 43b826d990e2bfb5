"""
Run UI components for the neatpad run browser.
Lists finished runs and plots their per-seed statistics.
"""

import json
import logging
from pathlib import Path
from typing import Dict, List

import pandas as pd
import streamlit as st

from ui.genome_ui import genome_page
from utils.logging_utils import log_error


def list_runs(runs_dir: Path) -> List[Path]:
    """Run directories (those holding a manifest.json), newest first."""
    if not runs_dir.is_dir():
        return []
    runs = [p.parent for p in runs_dir.glob("*/manifest.json")]
    return sorted(runs, key=lambda p: p.stat().st_mtime, reverse=True)


def load_run_stats(run_dir: Path) -> Dict[int, pd.DataFrame]:
    """Per-seed stats frames keyed by seed."""
    stats = {}
    for path in sorted(run_dir.glob("seed_*/stats.csv")):
        try:
            stats[int(path.parent.name.split("_", 1)[1])] = pd.read_csv(path)
        except (ValueError, pd.errors.ParserError) as e:
            logging.error(f"Skipping unreadable stats file {path}: {e}")
    return stats


def fitness_curves(stats: Dict[int, pd.DataFrame], column: str = "best") -> pd.DataFrame:
    """Wide frame indexed by generation with one column per seed."""
    if not stats:
        return pd.DataFrame()
    return pd.DataFrame({f"seed {seed}": frame.set_index("generation")[column] for seed, frame in stats.items()})


def run_page(runs_dir: Path) -> None:
    """
    Display the run browser.

    Args:
        runs_dir: Directory whose sub-directories are CLI run outputs
    """
    runs = list_runs(runs_dir)
    if not runs:
        st.info(f"No runs found in {runs_dir}. Start one with `python cli.py run --config config/xor.toml`.")
        return

    run_dir = st.sidebar.selectbox("Run", runs, format_func=lambda p: p.name)
    st.header(run_dir.name)

    try:
        manifest = json.loads((run_dir / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as e:
        log_error(e, f"Cannot read manifest of {run_dir.name}")
        return

    stats = load_run_stats(run_dir)
    col1, col2, col3 = st.columns(3)
    col1.metric("Problem", manifest["config"].get("problem", "?"))
    col2.metric("Seeds", len(manifest.get("seeds", [])))
    col3.metric("Best fitness", f"{max((f['best'].max() for f in stats.values()), default=float('nan')):.4f}")

    with st.expander("Config snapshot"):
        st.json(manifest["config"])

    if stats:
        metric = st.radio("Series", ["best", "mean", "species_count", "elapsed_ms"], horizontal=True)
        st.line_chart(fitness_curves(stats, metric))

    aggregate_path = run_dir / "aggregate.csv"
    if aggregate_path.exists():
        st.subheader("Across seeds")
        st.dataframe(pd.read_csv(aggregate_path), use_container_width=True, hide_index=True)

    seeds = sorted(stats)
    if seeds:
        seed = st.selectbox("Champion of seed", seeds)
        genome_path = run_dir / f"seed_{seed}" / "best_genome.json"
        if genome_path.exists():
            genome_page(genome_path)
        else:
            st.warning(f"Seed {seed} has no saved champion yet.")
