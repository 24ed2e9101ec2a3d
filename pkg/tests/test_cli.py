import csv

import pytest

from normssl.cli import METRICS_COLUMNS, main

from conftest import TINY


def sets(**extra):
    args = []
    for k, v in {**TINY, **extra}.items():
        args += ["--set", f"{k}={v}"]
    return args


def read_metrics(path):
    with open(path) as fh:
        return list(csv.reader(fh))


def test_run_writes_artifacts(tmp_path):
    out = tmp_path / "run"
    assert main(["run", "--preset", "vanilla-bn", "--seed", "1", "--out", str(out), *sets(epochs=2)]) == 0
    assert {p.name for p in out.iterdir()} == {"metrics.csv", "checkpoint.bin", "config.txt"}
    rows = read_metrics(out / "metrics.csv")
    assert rows[0] == METRICS_COLUMNS
    assert [r[0] for r in rows[1:]] == ["1", "2"]
    assert rows[1][-1] == "" and rows[2][-1] != ""
    assert "seed=1" in (out / "config.txt").read_text()


def test_default_output_root_from_env(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("NORMSSL_OUT", str(tmp_path))
    assert main(["run", "--preset", "gn-ws", *sets(epochs=1)]) == 0
    made = list(tmp_path.iterdir())
    assert len(made) == 1 and made[0].name.startswith("gn-ws-")
    assert str(made[0]) in capsys.readouterr().out


def test_deterministic_runs_byte_identical(tmp_path):
    for name in ("a", "b"):
        assert main(["run", "--preset", "simclr-ln", "--deterministic", "--out", str(tmp_path / name), *sets()]) == 0
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()


def test_resume_matches_uninterrupted(tmp_path):
    full, part = tmp_path / "full", tmp_path / "part"
    assert main(["run", "--preset", "vanilla-bn", "--out", str(full), *sets(epochs=3)]) == 0
    assert main(["run", "--preset", "vanilla-bn", "--out", str(part), "--until-epoch", "1", *sets(epochs=3)]) == 0
    assert len(read_metrics(part / "metrics.csv")) == 2
    assert main(["run", "--resume", str(part / "checkpoint.bin")]) == 0
    assert (full / "metrics.csv").read_bytes() == (part / "metrics.csv").read_bytes()


def test_config_file(tmp_path):
    cfg = tmp_path / "c.txt"
    cfg.write_text("preset = no-bn\n" + "".join(f"{k} = {v}\n" for k, v in TINY.items()) + "epochs = 1\n")
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    assert "encoder_norm=none" in (tmp_path / "o" / "config.txt").read_text()


@pytest.mark.parametrize("argv", [
    ["run", "--preset", "nonexistent"],
    ["run", "--preset", "vanilla-bn", "--set", "lr"],
    ["run", "--preset", "vanilla-bn", "--set", "bogus=1"],
    ["run", "--preset", "vanilla-bn", "--config", "x.txt"],
    ["grid", "no-such-file.txt"],
])
def test_config_errors_exit_2(argv, tmp_path, monkeypatch):
    monkeypatch.setenv("NORMSSL_OUT", str(tmp_path))
    assert main(argv) == 2
    assert not list(tmp_path.iterdir())


def test_empty_grid_file_writes_nothing(tmp_path):
    spec = tmp_path / "g.txt"
    spec.write_text("# nothing here\ndefaults epochs=1\n")
    out = tmp_path / "out"
    assert main(["grid", str(spec), "--out", str(out)]) == 2
    assert not out.exists()


def test_grid_file_runs(tmp_path):
    spec = tmp_path / "g.txt"
    spec.write_text("defaults " + " ".join(f"{k}={v}" for k, v in TINY.items()) + " epochs=1\n"
                    "preset=gn-ws id=gn\npreset=no-bn id=none seed=3\n")
    out = tmp_path / "out"
    assert main(["grid", str(spec), "--out", str(out)]) == 0
    with open(out / "results.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [(r["cell"], r["seed"], r["status"]) for r in rows] == [("gn", "0", "ok"), ("none", "3", "ok")]


def test_grid_list(capsys):
    assert main(["grid", "table2", "--list", "--seeds", "0,1"]) == 0
    assert len(capsys.readouterr().out.splitlines()) == 8


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_exit_3(tmp_path):
    out = tmp_path / "d"
    code = main(["run", "--preset", "no-bn", "--out", str(out), *sets(optimizer="sgd", lr=1e300, warmup_epochs=0)])
    assert code == 3
    assert (out / "checkpoint.bin").exists()


def test_verify_passes_and_fault_fails(capsys):
    assert main(["verify", "--cases", "1"]) == 0
    assert "FAIL" not in capsys.readouterr().out
    assert main(["verify", "--cases", "1", "--inject-fault", "standardize"]) == 4
    assert "FAIL" in capsys.readouterr().out
