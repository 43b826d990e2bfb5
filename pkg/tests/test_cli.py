"""End-to-end tests of the experiment driver."""

import json
import os
from pathlib import Path

import pandas as pd
import pytest

from builders import make_genome
from cli import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, STATS_COLUMNS, main, parse_override, parse_seeds
from models.errors import ConfigError
from services.export_service import export_service

CONFIG_DIR = Path(__file__).resolve().parent.parent / "config"
XOR = str(CONFIG_DIR / "xor.toml")
SMALL = ["--set", "pop_size=12", "--set", "generation_limit=3"]


def run(out, *extra):
    return main(["--quiet", "run", "--config", XOR, *SMALL, "--threads", "1", "--out", str(out), *extra])


def stats_without_time(path):
    return pd.read_csv(path).drop(columns=["elapsed_ms"])


class TestParsing:

    @pytest.mark.parametrize("text, expected", [("3", [3]), ("0..2", [0, 1, 2]), ("1,4,7", [1, 4, 7])])
    def test_seeds(self, text, expected):
        assert parse_seeds(text) == expected

    @pytest.mark.parametrize("text", ["", "a..b", "-1"])
    def test_bad_seeds(self, text):
        with pytest.raises(ConfigError):
            parse_seeds(text)

    @pytest.mark.parametrize("text, expected", [
        ("pop_size=50", ("pop_size", 50)),
        ("compatibility_threshold=2.5", ("compatibility_threshold", 2.5)),
        ("problem=cartpole", ("problem", "cartpole")),
        ('activation_options=["tanh", "relu"]', ("activation_options", ["tanh", "relu"])),
    ])
    def test_override(self, text, expected):
        assert parse_override(text) == expected

    def test_override_needs_equals(self):
        with pytest.raises(ConfigError):
            parse_override("pop_size")


class TestRun:

    def test_writes_run_artifacts(self, tmp_path):
        out = tmp_path / "xor"
        assert run(out) == EXIT_OK

        stats = pd.read_csv(out / "seed_0" / "stats.csv")
        assert list(stats.columns) == STATS_COLUMNS
        assert stats["generation"].tolist() == [0, 1, 2]

        genome = export_service.load_genome((out / "seed_0" / "best_genome.json").read_text())
        assert genome.num_inputs == 3

        summary = json.loads((out / "seed_0" / "summary.json").read_text())
        assert summary["generations"] == 3
        assert summary["best_fitness"] == pytest.approx(stats["best"].max())

        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["seeds"] == [0]
        assert manifest["config"]["pop_size"] == 12
        assert manifest["finished_at"] is not None

    def test_unknown_problem(self, tmp_path):
        assert run(tmp_path / "bad", "--set", "problem=sudoku") == EXIT_CONFIG

    def test_unknown_field(self, tmp_path, capsys):
        assert run(tmp_path / "bad", "--set", "colour=blue") == EXIT_CONFIG
        assert "colour" in capsys.readouterr().err

    def test_missing_config(self, tmp_path):
        assert main(["--quiet", "run", "--config", str(tmp_path / "nope.toml")]) == EXIT_CONFIG

    def test_several_seeds(self, tmp_path):
        out = tmp_path / "multi"
        assert run(out, "--seeds", "0..1") == EXIT_OK
        assert (out / "seed_0" / "stats.csv").exists()
        assert (out / "seed_1" / "stats.csv").exists()
        aggregate = pd.read_csv(out / "aggregate.csv")
        assert aggregate["generation"].tolist() == [0, 1, 2]
        assert (aggregate["seeds"] == 2).all()

    def test_thread_count_does_not_change_stats(self, tmp_path):
        assert run(tmp_path / "one") == EXIT_OK
        assert main(["--quiet", "run", "--config", XOR, *SMALL, "--threads", "3",
                     "--out", str(tmp_path / "three")]) == EXIT_OK
        pd.testing.assert_frame_equal(stats_without_time(tmp_path / "one" / "seed_0" / "stats.csv"),
                                      stats_without_time(tmp_path / "three" / "seed_0" / "stats.csv"))
        assert (tmp_path / "one" / "seed_0" / "best_genome.json").read_text() == \
            (tmp_path / "three" / "seed_0" / "best_genome.json").read_text()

    def test_rerun_from_manifest(self, tmp_path):
        assert run(tmp_path / "first") == EXIT_OK
        manifest = str(tmp_path / "first" / "manifest.json")
        assert main(["--quiet", "run", "--manifest", manifest, "--threads", "1",
                     "--out", str(tmp_path / "again")]) == EXIT_OK
        pd.testing.assert_frame_equal(stats_without_time(tmp_path / "first" / "seed_0" / "stats.csv"),
                                      stats_without_time(tmp_path / "again" / "seed_0" / "stats.csv"))


class TestInspect:

    def test_valid(self, tmp_path, capsys):
        path = tmp_path / "g.json"
        path.write_text(export_service.save_genome(make_genome(2, 1, hidden=[3], conns=[(0, 3, 1.0), (3, 2, 0.5)])))
        assert main(["--quiet", "inspect", str(path)]) == EXIT_OK
        out = capsys.readouterr().out
        assert out.strip().endswith("VALID")
        assert "nodes 4/10" in out

    def test_cycle_is_invalid(self, tmp_path, capsys):
        path = tmp_path / "cycle.json"
        path.write_text(export_service.save_genome(
            make_genome(1, 1, hidden=[2, 3], conns=[(0, 2, 1.0), (2, 3, 1.0), (3, 2, 1.0), (3, 1, 1.0)])))
        assert main(["--quiet", "inspect", str(path)]) == EXIT_RUNTIME
        assert "INVALID: cycle" in capsys.readouterr().out

    def test_unreadable_document(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text('{"version": 1, "nodes": [')
        assert main(["--quiet", "inspect", str(path)]) == EXIT_RUNTIME


class TestExport:

    @pytest.fixture
    def genome_path(self, tmp_path):
        path = tmp_path / "champion.json"
        path.write_text(export_service.save_genome(make_genome(1, 1, conns=[(0, 1, 1.0)])))
        return path

    def test_dot_and_typeset(self, genome_path):
        assert main(["--quiet", "export", str(genome_path), "--dot", "--formula", "typeset"]) == EXIT_OK
        assert genome_path.with_suffix(".dot").read_text().startswith("digraph")
        assert "o_{0}" in genome_path.with_suffix(".tex").read_text()

    def test_plain_to_out_stem(self, genome_path, tmp_path):
        stem = tmp_path / "exports" / "net"
        assert main(["--quiet", "export", str(genome_path), "--formula", "plain", "--out", str(stem)]) == EXIT_OK
        assert (tmp_path / "exports" / "net.txt").read_text() == "o0 = (1.000 * i0 + 0.000)\n"

    def test_needs_a_format(self, genome_path):
        with pytest.raises(SystemExit):
            main(["export", str(genome_path)])


def test_bench_with_sweep(tmp_path):
    out = tmp_path / "bench"
    assert main(["--quiet", "bench", "--config", XOR, "--set", "generation_limit=2", "--set", "pop_size=10",
                 "--sweep", "10,20", "--threads", "1", "--out", str(out)]) == EXIT_OK
    timing = pd.read_csv(out / "timing.csv")
    assert timing["generation"].tolist() == [0, 1]
    assert (timing["cumulative_ms"].diff().dropna() >= 0).all()
    sweep = pd.read_csv(out / "sweep.csv")
    assert sweep["pop_size"].tolist() == [10, 20]
    assert (sweep["generations"] == 2).all()


@pytest.mark.slow
def test_bench_sweep_cost_per_genome_does_not_grow(tmp_path):
    out = tmp_path / "sweep"
    threads = str(os.cpu_count() or 1)
    assert main(["--quiet", "bench", "--config", XOR, "--set", "generation_limit=5", "--set", "fitness_target=inf",
                 "--sweep", "50,200,1000,5000", "--threads", threads, "--out", str(out)]) == EXIT_OK
    sweep = pd.read_csv(out / "sweep.csv").set_index("pop_size")
    assert (sweep["generations"] == 5).all()
    # reproduction runs per genome, so at best linear in pop_size
    assert sweep.loc[5000, "total_ms"] < 2 * 100 * sweep.loc[50, "total_ms"]
