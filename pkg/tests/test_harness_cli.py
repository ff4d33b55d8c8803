from __future__ import annotations

import csv
import io
import json
from dataclasses import replace

import pytest

from fglora import backbone as bb
from fglora import cli
from fglora import harness as H

TINY_TOML = """
methods = ["lora", "seq_ft"]
seeds = [1, 2]
n_shots = [4]
epochs = 1

[backbone]
base_channels = 2
depth = 2
patch_size = 8

[data]
n_subjects = 16
size = 16

[pretrain]
epochs = 1
n_volumes = 4
"""


def tiny_config(tmp_path, **changes) -> H.ExperimentConfig:
    path = tmp_path / "tiny.toml"
    path.write_text(TINY_TOML)
    cfg = H.load_config(path)
    return replace(cfg, output_dir=str(tmp_path / "out"), **changes)


def _cell(method, seed, R, params=(10, 12), error=None):
    return H.CellResult(method, seed, 32, "seg->reg", ["seg", "reg"], ["dice", "mae"], R, list(params),
                        [1.0, 2.0], [100.0, 110.0], error)


# ---------------------------------------------------------------- config


def test_defaults_match_documented_values():
    cfg = H.ExperimentConfig()
    assert cfg.seeds == (42, 43, 44) and cfg.n_shots == (32,) and cfg.lr == 1e-3 and cfg.epochs == 30
    assert cfg.lora.rank == 2 and cfg.lora.alpha == 4.0 and cfg.backbone == bb.UNetConfig()
    assert H.paper_scale(cfg).epochs == 100


def test_config_toml_round_trip(tmp_path):
    cfg = tiny_config(tmp_path)
    path = tmp_path / "again.toml"
    path.write_text(H.dump_config(cfg))
    assert H.load_config(path) == cfg
    assert cfg.backbone == bb.UNetConfig(2, 2, 2, 8)


@pytest.mark.parametrize("raw, fragment", [
    ({"sedes": [1]}, "unknown top-level keys"),
    ({"lora": {"rnak": 2}}, "unknown keys in [lora]"),
    ({"methods": ["magic"]}, "magic"),
    ({"seeds": []}, "non-empty"),
    ({"n_shots": [0]}, "positive"),
    ({"task_order": ["segmentation", "segmentation"]}, "repeat"),
    ({"lr": 0}, "lr > 0"),
])
def test_config_errors(raw, fragment):
    with pytest.raises(H.ConfigError) as info:
        H.config_from_dict(raw)
    assert fragment in str(info.value)


def test_malformed_and_missing_config(tmp_path):
    bad = tmp_path / "bad.toml"
    bad.write_text("seeds = [1,")
    with pytest.raises(H.ConfigError, match="malformed"):
        H.load_config(bad)
    with pytest.raises(H.ConfigError, match="cannot read"):
        H.load_config(tmp_path / "absent.toml")


# ---------------------------------------------------------------- tables


def test_emit_table_header_only_when_empty():
    assert H.emit_table([], "csv") == "Method,T1 Dice↑,T2 MAE↓,T1-after-T2,BWT\n"
    md = H.emit_table([], "markdown").splitlines()
    assert md == ["| Method | T1 Dice↑ | T2 MAE↓ | T1-after-T2 | BWT |", "|---|---|---|---|---|"]
    with pytest.raises(ValueError):
        H.emit_table([], "latex")


def test_summary_golden_and_csv_round_trip():
    cells = [_cell("lora", 42, [[0.52, None], [0.52, 0.2]]), _cell("lora", 43, [[0.68, None], [0.68, 0.1]]),
             _cell("seq_ft", 42, None, error="RuntimeError: boom")]
    rows = H.summarize(cells)
    assert rows[0] == {"Method": "lora", "T1 Dice↑": "0.60 ± 0.11", "T2 MAE↓": "0.150 ± 0.071",
                       "T1-after-T2": "0.60 ± 0.11", "BWT": "0.00 ± 0.00", "seeds": "42 43", "failed": "0"}
    assert rows[1]["T1 Dice↑"] == "n/a" and rows[1]["failed"] == "1"
    parsed = list(csv.DictReader(io.StringIO(H.emit_table(rows, "csv"))))
    assert parsed == rows


def test_seed_aggregate_rendering():
    cells = [_cell("lora", s, [[v, None], [v, 0.1]]) for s, v in zip((42, 43, 44), (0.52, 0.60, 0.68))]
    assert H.summarize(cells)[0]["T1 Dice↑"] == "0.60 ± 0.08"


def test_results_csv_round_trip_is_lossless():
    cells = [_cell("lora", 42, [[0.1 + 0.2, None], [0.3, 1 / 3]]), _cell("ewc", 43, None, error="X: y")]
    text = H.results_csv(cells)
    back = H.read_results_csv(text)
    assert [c.R for c in back] == [c.R for c in cells]
    assert [c.error for c in back] == [None, "X: y"]
    assert H.results_csv(back) == text


def test_resource_report_and_count_format():
    cells = [_cell("lora", 42, [[0.5, None], [0.5, 0.1]], params=(46872, 1200))]
    entries = H.resource_report(cells)
    assert [(e.task_id, e.trainable_params) for e in entries] == [("seg", 46872), ("reg", 1200)]
    assert "46,872" in H.resource_table(entries)
    assert H.fmt_count(46872) == "46,872" and H.fmt_count(7) == "7"


# ---------------------------------------------------------------- grid and CLI


def test_grid_runs_every_cell_and_isolates_failures(tmp_path):
    cfg = tiny_config(tmp_path)
    datasets = H.generate_datasets(cfg)
    store, history = H.pretrain(cfg, datasets)
    assert len(history) == cfg.pretrain.epochs + 1
    grid = H.run_grid(cfg, datasets, store)
    assert [(c.method, c.seed) for c in grid.cells] == [
        ("lora[encoder_decoder]", 1), ("lora[encoder_decoder]", 2), ("seq_ft", 1), ("seq_ft", 2)]
    assert not grid.failed
    broken = {"seg": datasets["seg"]}  # the regression task has no data
    cell = H.run_cell(cfg, broken, store, "lora", 1, 4)
    assert not cell.ok and "reg" in cell.error


def test_cli_run_report_and_exit_codes(tmp_path, capsys):
    cfg_path = tmp_path / "tiny.toml"
    cfg_path.write_text(TINY_TOML)
    out = tmp_path / "cli"
    assert cli.main(["run", "--config", str(cfg_path), "--out", str(out), "--seeds", "3"]) == cli.EXIT_OK
    printed = capsys.readouterr().out
    assert "T1 Dice↑" in printed
    rows = list(csv.DictReader(io.StringIO((out / "results.csv").read_text())))
    assert [r["method"] for r in rows] == ["lora[encoder_decoder]", "seq_ft"] and {r["seed"] for r in rows} == {"3"}
    assert len(json.loads((out / "results_resource.json").read_text())) == 4
    assert (out / "backbone.fgls").exists() and (out / "config.toml").exists()
    assert cli.main(["report", "--out", str(out)]) == cli.EXIT_OK
    assert "## results" in capsys.readouterr().out


def test_cli_config_errors_exit_1(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text("unknown_key = 1\n")
    assert cli.main(["run", "--config", str(bad)]) == cli.EXIT_CONFIG
    assert "config error" in capsys.readouterr().err
    assert cli.main(["run", "--method", "nope", "--out", str(tmp_path)]) == cli.EXIT_CONFIG
    assert cli.main(["report", "--out", str(tmp_path / "empty")]) == cli.EXIT_CONFIG
    with pytest.raises(SystemExit):
        cli.main(["fly"])


def test_cli_gen_data_and_pretrain(tmp_path, capsys):
    cfg_path = tmp_path / "tiny.toml"
    cfg_path.write_text(TINY_TOML)
    out = tmp_path / "gen"
    assert cli.main(["gen-data", "--config", str(cfg_path), "--out", str(out)]) == cli.EXIT_OK
    assert (out / "data" / "seg").is_dir() and (out / "data" / "reg").is_dir()
    assert cli.main(["pretrain", "--config", str(cfg_path), "--out", str(out)]) == cli.EXIT_OK
    assert (out / "backbone.fgls").exists()
    assert "pretrained backbone" in capsys.readouterr().out
