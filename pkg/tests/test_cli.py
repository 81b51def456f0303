import json

from conftest import TINY
from selora.campaign import Ledger, RunRecord
from selora.cli import main


def _cfg(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY.to_dict()))
    return str(path)


COMMON = ["--pretrain-steps", "2", "--rank", "2", "--steps", "3", "--lr", "0.01"]


def test_unknown_flag_exits_2(capsys):
    assert main(["probe", "--bogus"]) == 2
    assert main([]) == 2


def test_probe_writes_report(tmp_path, capsys):
    out = tmp_path / "probe.json"
    assert main(["probe", "--config", _cfg(tmp_path), "--out", str(out), "--batches", "2", *COMMON]) == 0
    report = json.loads(out.read_text())
    assert sorted(report["ranking"]) == list(range(TINY.n_layers))
    assert abs(sum(report["normalized"]) - 1.0) < 1e-12


def test_pair_appends_ledger(tmp_path, capsys):
    out = tmp_path / "pair"
    assert main(["pair", "--config", _cfg(tmp_path), "--out", str(out), *COMMON]) == 0
    led = Ledger.load(out / "ledger.csv")
    assert [r.recipe for r in led] == ["standard", "selective"]
    assert "pair: standard ok" in capsys.readouterr().out


def test_train_writes_run_json(tmp_path, capsys):
    out = tmp_path / "train"
    assert main(["train", "--config", _cfg(tmp_path), "--out", str(out), "--select-percent", "50", *COMMON]) == 0
    run = json.loads((out / "run.json").read_text())
    assert run["status"] == "ok" and len(run["selected_layers"]) == 2 and len(run["step_losses"]) == 3


def test_report_from_ledger(tmp_path, capsys):
    led = Ledger(tmp_path / "l.csv")
    for seed in (1, 2):
        led.append(RunRecord("m", "standard", seed, 200, train_time_s=10.0 + seed, eval_loss=1.0))
        led.append(RunRecord("m", "selective", seed, 200, train_time_s=8.0, eval_loss=1.0))
    assert main(["report", "--ledger", str(led.path), "--out", str(tmp_path / "r")]) == 0
    assert (tmp_path / "r" / "summary.md").exists()
    assert main(["report", "--ledger", str(tmp_path / "missing.csv")]) == 1
    assert "selora: error" in capsys.readouterr().err
