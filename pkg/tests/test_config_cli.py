import json
import subprocess
import sys
from importlib import resources

import jsonschema
import numpy as np
import pytest

from rankgame.cli import EXIT_OK, EXIT_USAGE, main
from rankgame.config import ConfigError, config_from_dict, dump_config, load_config, parse_config
from rankgame.diagnostics import CSV_COLUMNS
from rankgame.experiment import THREADS_ENV, compare_configs, seed_list, thread_cap
from rankgame.mdp import load_mdp

from helpers import CONFIGS

TINY = """
output_dir = "{out}"
repeats = {repeats}

[scenario]
env_kind = "gridworld"
width = 3
height = 3
slip = 0.1

[game]
leader = "{leader}"
loss_kind = "{loss}"
rounds = {rounds}
temperature = 0.05
"""


def write_cfg(tmp_path, name="cfg.toml", repeats=1, rounds=3, leader="policy", loss="lk"):
    out = tmp_path / "out"
    path = tmp_path / name
    path.write_text(TINY.format(out=out.as_posix(), repeats=repeats, rounds=rounds, leader=leader, loss=loss))
    return path, out


@pytest.fixture
def schema():
    return json.loads(resources.files("rankgame").joinpath("schemas/summary.schema.json").read_text())


# -- config parsing ---------------------------------------------------------------

@pytest.mark.parametrize("path", sorted(CONFIGS.glob("*.toml")), ids=lambda p: p.stem)
def test_shipped_configs_load_and_round_trip(path):
    cfg = load_config(path)
    text = dump_config(cfg)
    again = parse_config(text)
    assert dump_config(again) == text


def test_defaults_and_tuple_fields():
    cfg = config_from_dict({"scenario": {"goal": [1, 2]}, "game": {"clamp_range": [-1.0, 1.0]}})
    assert cfg.scenario.goal == (1, 2)
    assert cfg.game.clamp_range == (-1.0, 1.0)
    assert cfg.repeats == 1 and cfg.threshold == 0.9


@pytest.mark.parametrize("doc,fragment", [
    ({"game": {"roundz": 3}}, "game.roundz: unknown field"),
    ({"game": {"rounds": "x"}}, "game.rounds: expected int"),
    ({"scenario": {"slip": "high"}}, "scenario.slip: expected float"),
    ({"game": {"temperature": -1.0}}, "game: temperature must be positive"),
    ({"repeats": 0}, "repeats"),
    ({"emit": ["csv", "pdf"]}, "emit"),
    ({"budget": 0}, "budget"),
    ({"threshold": 1.5}, "threshold"),
    ({"game": {"rounds": 5}, "scenario": {"mutation": {"kind": "intent_change", "round": 9}}},
     "scenario.mutation.round"),
    ({"game": 3}, "game: expected a section"),
])
def test_invalid_configs_name_the_field(doc, fragment):
    with pytest.raises(ConfigError) as err:
        config_from_dict(doc)
    assert fragment in str(err.value)


def test_parse_error_reports_position():
    with pytest.raises(ConfigError) as err:
        parse_config("repeats = 1\n[game\nrounds = 2\n", "bad.toml")
    assert str(err.value).startswith("bad.toml:2:")


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.toml")


def test_seed_list_offset(tmp_path):
    path, _ = write_cfg(tmp_path, repeats=3)
    assert seed_list(load_config(path), 10) == [10, 11, 12]


def test_thread_cap_env(monkeypatch):
    monkeypatch.setenv(THREADS_ENV, "3")
    assert thread_cap() == 3
    monkeypatch.setenv(THREADS_ENV, "zero")
    with pytest.raises(ConfigError, match=THREADS_ENV):
        thread_cap()
    monkeypatch.setenv(THREADS_ENV, "0")
    with pytest.raises(ConfigError):
        thread_cap()
    monkeypatch.delenv(THREADS_ENV)
    assert thread_cap(2) == 2


# -- run -----------------------------------------------------------------------------

def test_run_single_round_single_row(tmp_path, schema, capsys):
    path, out = write_cfg(tmp_path, rounds=1)
    assert main(["run", "--config", str(path)]) == EXIT_OK
    lines = (out / "seed_0.csv").read_text().splitlines()
    assert lines[0] == ",".join(CSV_COLUMNS) and len(lines) == 2
    summary = json.loads((out / "summary.json").read_text())
    jsonschema.validate(summary, schema)
    assert summary["seeds"] == [0] and summary["runs"][0]["rounds"] == 1
    assert (out / "plot_data.json").exists()
    assert "seed 0" in capsys.readouterr().out


def test_run_repeats_populate_std(tmp_path, schema, monkeypatch):
    monkeypatch.setenv(THREADS_ENV, "1")
    path, out = write_cfg(tmp_path, repeats=5)
    assert main(["run", "--config", str(path), "--seed-offset", "4"]) == EXIT_OK
    summary = json.loads((out / "summary.json").read_text())
    jsonschema.validate(summary, schema)
    assert summary["seeds"] == [4, 5, 6, 7, 8]
    runs = [r["final"]["true_return_ratio"] for r in summary["runs"]]
    assert summary["final_std"]["true_return_ratio"] == pytest.approx(np.std(runs))
    assert summary["final_mean"]["true_return_ratio"] == pytest.approx(np.mean(runs))
    assert sorted(p.name for p in out.glob("seed_*.csv")) == [f"seed_{s}.csv" for s in range(4, 9)]


def test_run_is_byte_identical(tmp_path):
    path, _ = write_cfg(tmp_path, rounds=4, leader="reward", loss="slk_auto")
    main(["run", "--config", str(path), "--out", str(tmp_path / "a"), "--exact"])
    main(["run", "--config", str(path), "--out", str(tmp_path / "b"), "--exact"])
    assert (tmp_path / "a" / "seed_0.csv").read_bytes() == (tmp_path / "b" / "seed_0.csv").read_bytes()
    assert (tmp_path / "a" / "summary.json").read_bytes() == (tmp_path / "b" / "summary.json").read_bytes()


def test_parallel_matches_serial(tmp_path, monkeypatch):
    path, _ = write_cfg(tmp_path, repeats=2)
    monkeypatch.setenv(THREADS_ENV, "1")
    main(["run", "--config", str(path), "--out", str(tmp_path / "serial")])
    monkeypatch.setenv(THREADS_ENV, "2")
    main(["run", "--config", str(path), "--out", str(tmp_path / "pool")])
    for s in (0, 1):
        assert (tmp_path / "serial" / f"seed_{s}.csv").read_bytes() == (tmp_path / "pool" / f"seed_{s}.csv").read_bytes()


def test_empirical_flag_recorded(tmp_path):
    path, out = write_cfg(tmp_path, rounds=2)
    assert main(["run", "--config", str(path), "--empirical"]) == EXIT_OK
    assert json.loads((out / "summary.json").read_text())["mode"] == "empirical"


def test_emit_subset(tmp_path):
    path = tmp_path / "cfg.toml"
    path.write_text(f'output_dir = "{(tmp_path / "o").as_posix()}"\nemit = ["csv"]\n[game]\nrounds = 1\n'
                    '[scenario]\nwidth = 3\nheight = 3\n')
    assert main(["run", "--config", str(path)]) == EXIT_OK
    assert sorted(p.name for p in (tmp_path / "o").iterdir()) == ["seed_0.csv"]


def test_malformed_config_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text("[game]\nrounds = \"many\"\n")
    assert main(["run", "--config", str(bad)]) == EXIT_USAGE
    assert "game.rounds" in capsys.readouterr().err


def test_bad_thread_env_exit_2(tmp_path, monkeypatch):
    path, _ = write_cfg(tmp_path)
    monkeypatch.setenv(THREADS_ENV, "-2")
    assert main(["run", "--config", str(path)]) == EXIT_USAGE


def test_exact_and_empirical_are_exclusive(tmp_path):
    path, _ = write_cfg(tmp_path)
    with pytest.raises(SystemExit) as err:
        main(["run", "--config", str(path), "--exact", "--empirical"])
    assert err.value.code == 2


# -- check-theorem, compare, export-env ------------------------------------------------

def test_check_theorem(tmp_path, capsys):
    path = tmp_path / "thm.toml"
    path.write_text("[sweep]\nn_instances = 12\nmax_states = 6\n[game]\nrounds = 3\n"
                    "[scenario]\nwidth = 3\nheight = 3\n")
    assert main(["check-theorem", "--config", str(path), "--out", str(tmp_path / "o")]) == EXIT_OK
    out = capsys.readouterr().out
    assert "sweep: 12/12" in out and "game: 3/3" in out and out.strip().endswith("PASS")
    assert (tmp_path / "o" / "sweep.csv").exists()


def test_compare_identical_configs(tmp_path, capsys):
    a, _ = write_cfg(tmp_path, "a.toml", repeats=2, rounds=4)
    b, _ = write_cfg(tmp_path, "b.toml", repeats=2, rounds=4)
    assert main(["compare", str(a), "--config", str(b), "--out", str(tmp_path)]) == EXIT_OK
    table = json.loads((tmp_path / "compare.json").read_text())
    first, second = table["variants"]
    assert first["steps_to_threshold"] == second["steps_to_threshold"]
    assert [v["name"] for v in table["variants"]] == ["a", "b"]
    assert "seed 0" in capsys.readouterr().out


def test_compare_needs_two(tmp_path, capsys):
    a, _ = write_cfg(tmp_path, "a.toml")
    assert main(["compare", str(a)]) == EXIT_USAGE
    assert "at least two" in capsys.readouterr().err


def test_compare_rejects_mismatched_scenarios(tmp_path):
    a, _ = write_cfg(tmp_path, "a.toml")
    b = tmp_path / "b.toml"
    b.write_text(a.read_text().replace("width = 3", "width = 4"))
    assert main(["compare", str(a), str(b)]) == EXIT_USAGE
    with pytest.raises(ValueError):
        compare_configs([load_config(a)])


def test_export_env(tmp_path, capsys):
    path, _ = write_cfg(tmp_path)
    target = tmp_path / "env.json"
    assert main(["export-env", "--config", str(path), "--out", str(target)]) == EXIT_OK
    mdp = load_mdp(target)
    assert mdp.n_states == 9 and mdp.n_actions == 4
    capsys.readouterr()
    assert main(["export-env", "--config", str(path)]) == EXIT_OK
    doc = json.loads(capsys.readouterr().out)
    assert np.asarray(doc["transition"]).shape == (9, 4, 9)


def test_module_entry_point(tmp_path):
    path, _ = write_cfg(tmp_path)
    proc = subprocess.run([sys.executable, "-m", "rankgame", "export-env", "--config", str(path)],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and '"gamma"' in proc.stdout
    proc = subprocess.run([sys.executable, "-m", "rankgame", "bogus"], capture_output=True, text=True)
    assert proc.returncode == 2
