import csv
import logging

import numpy as np
import pytest

from fedweit import cli
from fedweit.config import ConfigError, ExperimentConfig, load_config, parse_config
from fedweit.federation import C2S, S2C, CommLedger
from fedweit.metrics import avg_accuracy, forgetting, load_matrices

TINY = """
[experiment]
method = {method}
seeds = {seeds}

[stream]
kind = noniid
clients = 2
tasks_per_client = 2
classes_per_task = 2
feature_dim = 6
n_train = 6
n_valid = 3
n_test = 3

[federation]
rounds = 2
batch_size = 4

[objective]
lambda1 = 0.001

[optimizer]
lr = 0.01

[model]
hidden = 5
"""


def write_cfg(tmp_path, method="fedweit", seeds="0", name="exp.ini"):
    p = tmp_path / name
    p.write_text(TINY.format(method=method, seeds=seeds))
    return p


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_defaults_are_logged(caplog):
    with caplog.at_level(logging.INFO, logger="fedweit.config"):
        cfg = parse_config("[experiment]\nmethod = fedprox\n")
    assert cfg.lambda2 == 100.0 and cfg.rounds == 20 and cfg.batch_size == 100 and cfg.rho == 1e-7
    assert any("objective.lambda2" in r.message and "100" in r.message for r in caplog.records)


@pytest.mark.parametrize("text,field", [
    ("[federation]\nrounds = 0\n", "federation.rounds"),
    ("[federation]\nkappa_b = 2\n", "federation.kappa_b"),
    ("[experiment]\nmethod = sgd\n", "experiment.method"),
    ("[objective]\nlambda2 = -1\n", "objective.lambda2"),
    ("[objective]\nbogus = 1\n", "objective.bogus"),
    ("[nope]\nx = 1\n", "nope"),
    ("[federation]\nrounds = many\n", "federation.rounds"),
])
def test_invalid_config_names_field(text, field):
    with pytest.raises(ConfigError) as exc:
        parse_config(text)
    assert exc.value.field == field


def test_run_writes_outputs(tmp_path, monkeypatch):
    cfg_path = write_cfg(tmp_path, seeds="0 1")
    before = cfg_path.read_bytes()
    out = tmp_path / "out"
    assert cli.main(["-q", "run", str(cfg_path), "--out", str(out)]) == 0
    assert cfg_path.read_bytes() == before
    names = {p.name for p in out.iterdir()}
    assert names == {"metrics.csv", "summary.csv", "ledger_seed0.csv", "ledger_seed1.csv",
                     "accuracy_seed0.csv", "accuracy_seed1.csv"}
    rows = read_csv(out / "metrics.csv")
    assert list(rows[0]) == ["seed", "client", "task_index", "avg_accuracy", "forgetting"]
    assert len(rows) == 2 * 2 * 2
    # every metric cell can be re-derived from the accuracy dump
    mats = {**load_matrices(out / "accuracy_seed0.csv"), **load_matrices(out / "accuracy_seed1.csv")}
    for r in rows:
        m = mats[(int(r["seed"]), int(r["client"]))]
        t = int(r["task_index"])
        assert float(r["avg_accuracy"]) == avg_accuracy(m, t)
        assert r["forgetting"] == ("" if t == 1 else repr(forgetting(m, t)))
    summary = read_csv(out / "summary.csv")
    assert len(summary) == 1 and summary[0]["seeds"] == "2"
    finals = [np.mean([avg_accuracy(mats[(s, c)], 2) for c in (0, 1)]) for s in (0, 1)]
    assert float(summary[0]["accuracy_mean"]) == pytest.approx(np.mean(finals), abs=1e-15)
    assert float(summary[0]["accuracy_std"]) == pytest.approx(np.std(finals, ddof=1), abs=1e-15)
    c2s = [CommLedger.from_csv(out / f"ledger_seed{s}.csv").total(C2S) for s in (0, 1)]
    assert float(summary[0]["c2s_value_bytes"]) == np.mean(c2s)


def test_run_is_byte_identical(tmp_path):
    cfg_path = write_cfg(tmp_path)
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert cli.main(["-q", "run", str(cfg_path), "--out", str(out)]) == 0
        outs.append({p.name: p.read_bytes() for p in out.iterdir()})
    assert outs[0] == outs[1]


def test_overrides_and_env(tmp_path, monkeypatch):
    cfg_path = write_cfg(tmp_path)
    env_out = tmp_path / "from_env"
    monkeypatch.setenv(cli.OUT_ENV, str(env_out))
    assert cli.main(["-q", "run", str(cfg_path), "--seed", "3", "--method", "fedavg"]) == 0
    assert (env_out / "ledger_seed3.csv").exists()
    assert read_csv(env_out / "summary.csv")[0]["method"] == "fedavg"
    flag_out = tmp_path / "from_flag"
    assert cli.main(["-q", "run", str(cfg_path), "--out", str(flag_out)]) == 0
    assert (flag_out / "summary.csv").exists()


def test_run_errors(tmp_path, capsys):
    cfg_path = write_cfg(tmp_path)
    assert cli.main(["-q", "run", str(cfg_path), "--method", "sgd"]) != 0
    assert "experiment.method" in capsys.readouterr().err
    assert cli.main(["-q", "run", str(tmp_path / "missing.ini")]) != 0
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert cli.main(["-q", "run", str(cfg_path), "--out", str(blocker / "sub")]) != 0


def test_compare(tmp_path, capsys):
    outs = {}
    for method in ("fedweit", "fedprox"):
        cfg_path = write_cfg(tmp_path, method=method, name=f"{method}.ini")
        outs[method] = tmp_path / method
        assert cli.main(["-q", "run", str(cfg_path), "--out", str(outs[method])]) == 0
    capsys.readouterr()
    table = tmp_path / "cmp.csv"
    assert cli.main(["compare", str(outs["fedweit"] / "summary.csv"), str(outs["fedprox"] / "summary.csv"),
                     "--out", str(table)]) == 0
    printed = capsys.readouterr().out
    assert "fedweit" in printed and "fedprox" in printed
    rows = {r["method"]: r for r in read_csv(table)}
    for method, out in outs.items():
        led = CommLedger.from_csv(out / "ledger_seed0.csv")
        assert float(rows[method]["c2s_value_bytes"]) == led.total(C2S)
        assert float(rows[method]["s2c_value_bytes"]) == led.total(S2C)

    assert cli.main(["compare", str(outs["fedweit"] / "summary.csv"), "--out", str(table)]) == 0
    assert len(read_csv(table)) == 1


def test_compare_errors(tmp_path, capsys):
    empty = tmp_path / "empty.csv"
    empty.write_text("")
    assert cli.main(["compare", str(empty), "--out", str(tmp_path / "x.csv")]) != 0
    assert "no data" in capsys.readouterr().err
    header_only = tmp_path / "h.csv"
    header_only.write_text(",".join(cli.SUMMARY_COLUMNS) + "\n")
    assert cli.main(["compare", str(header_only), "--out", str(tmp_path / "x.csv")]) != 0
    assert "no data" in capsys.readouterr().err
    wrong = tmp_path / "wrong.csv"
    wrong.write_text("method,accuracy\nfedweit,0.5\n")
    assert cli.main(["compare", str(wrong), "--out", str(tmp_path / "x.csv")]) != 0


def test_load_config_and_overrides(tmp_path):
    cfg = load_config(write_cfg(tmp_path))
    assert cfg.num_clients == 2 and cfg.hidden == (5,)
    assert cfg.with_overrides(method="fedprox", seeds=None).method == "fedprox"
    assert ExperimentConfig().validate().rounds == 20


def test_desk_scale_config_matches_benchmark():
    from pathlib import Path

    from fedweit.benchmark import DESK_SCALE
    cfg = load_config(Path(__file__).parent.parent / "configs" / "desk_scale.ini")
    assert cfg.with_overrides(out=DESK_SCALE.out) == DESK_SCALE
