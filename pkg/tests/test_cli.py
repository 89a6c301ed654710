import json
import subprocess
import sys

import numpy as np
import pytest

from subjectdp import report
from subjectdp.cli import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, main, parse_sweep
from subjectdp.config import ConfigError, bundled_config

TINY = """
[data]
n_subjects = 60
items_per_subject = const:6
d_in = 5
synthetic_classes = 3

[federation]
n_users = 6
partition = power
alpha = 4
rounds = 4
users_per_round = 4

[training]
algorithm = local_group_dp
B = 8
T = 3
C = 0.5
eta = 0.2

[privacy]
epsilon = 4.0
delta = 1e-5
"""

REPORT_FILES = ["config.cfg", "config.json", "rounds.jsonl", "audits.jsonl", "rounds.csv",
                "noise.json", "summary.json", "bounds.csv", "model.bin", "model.json"]


@pytest.fixture
def tiny(tmp_path):
    p = tmp_path / "tiny.cfg"
    p.write_text(TINY)
    return p


def run(*argv):
    return main([str(a) for a in argv])


def test_run_writes_artifacts(tiny, tmp_path, capsys):
    assert run("run", "--config", tiny, "--out", tmp_path / "o") == EXIT_OK
    for name in REPORT_FILES:
        assert (tmp_path / "o" / name).exists(), name
    summary = json.loads(capsys.readouterr().out)
    assert summary["effective_rounds"] == 2  # ceil(4 / sqrt(4))
    rounds = report.read_jsonl(tmp_path / "o" / "rounds.jsonl")
    audits = report.read_jsonl(tmp_path / "o" / "audits.jsonl")
    assert len(rounds) == 2 and len(audits) == 2 * 4 * 3
    assert all(a["schema"] == "subjectdp.audit/1" for a in audits)
    noise = json.loads((tmp_path / "o" / "noise.json").read_text())
    assert noise["plan"]["accounted_rounds"] == 4 and len(noise["users"]) == 6


def test_run_is_byte_deterministic(tiny, tmp_path):
    for out in ("a", "b"):
        assert run("run", "--config", tiny, "--out", tmp_path / out, "--seed", 3) == EXIT_OK
    for name in REPORT_FILES:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name


def test_seed_flag_changes_results(tiny, tmp_path):
    run("run", "--config", tiny, "--out", tmp_path / "a", "--seed", 1)
    run("run", "--config", tiny, "--out", tmp_path / "b", "--seed", 2)
    assert (tmp_path / "a" / "rounds.jsonl").read_bytes() != (tmp_path / "b" / "rounds.jsonl").read_bytes()
    assert "seed = 2" in (tmp_path / "b" / "config.cfg").read_text()


def test_missing_subject_column_exits_2(tiny, tmp_path, capsys):
    csv = tmp_path / "d.csv"
    csv.write_text("who,label,f0\n1,0,0.5\n")
    code = run("run", "--config", tiny, "--out", tmp_path / "o",
               "--override", "data.source=csv", "--override", f"data.csv_path={csv}")
    assert code == EXIT_CONFIG
    assert "data.subject_column" in capsys.readouterr().err


def test_invalid_field_exits_2_with_field_messages(tiny, tmp_path, capsys):
    code = run("run", "--config", tiny, "--out", tmp_path / "o",
               "--override", "training.B=0", "--override", "privacy.delta=2")
    assert code == EXIT_CONFIG
    err = capsys.readouterr().err
    assert "training.B" in err and "privacy.delta" in err


def test_runtime_failure_exits_1(tiny, tmp_path, capsys):
    csv = tmp_path / "d.csv"
    csv.write_text("subject,label,f0\n1,0,0.5\n2,zero,0.1\n")
    code = run("run", "--config", tiny, "--out", tmp_path / "o",
               "--override", "data.source=csv", "--override", f"data.csv_path={csv}",
               "--override", "data.subject_column=subject")
    assert code == EXIT_RUNTIME
    assert "d.csv:3:" in capsys.readouterr().err


def test_csv_source_runs(tiny, tmp_path):
    rng = np.random.default_rng(0)
    lines = ["subject,label,f0,f1"]
    for i in range(120):
        y = i % 2
        lines.append(f"{i // 4},{y},{rng.normal(2 * y - 1):.6f},{rng.normal():.6f}")
    csv = tmp_path / "d.csv"
    csv.write_text("\n".join(lines) + "\n")
    code = run("run", "--config", tiny, "--out", tmp_path / "o",
               "--override", "data.source=csv", "--override", f"data.csv_path={csv}",
               "--override", "data.subject_column=subject")
    assert code == EXIT_OK
    assert json.loads((tmp_path / "o" / "model.json").read_text())["model"]["d_in"] == 2


def test_console_script_entry_point(tiny, tmp_path):
    proc = subprocess.run([sys.executable, "-m", "subjectdp.cli", "account", "--rounds", "100",
                           "--users-per-round", "16"], capture_output=True, text=True)
    assert proc.returncode == 0 and "effective_rounds=25" in proc.stdout


# account -------------------------------------------------------------------


def _account(capsys, *extra):
    assert run("account", "--epsilon", 4, "--delta", 1e-5, "--rounds", 100,
               "--users-per-round", 16, "--q", 0.05, "--batches", 10, *extra) == EXIT_OK
    out = capsys.readouterr().out
    lines = dict(line.split("=", 1) for line in out.splitlines() if "=" in line and not line.startswith("{"))
    return out, lines


def test_account_prints_effective_rounds(capsys):
    out, lines = _account(capsys)
    assert lines["effective_rounds"] == "25"
    assert json.loads(out.splitlines()[-1])["effective_rounds"] == 25


def test_account_sigma_grows_with_group_size(capsys):
    _, k1 = _account(capsys)
    _, k3 = _account(capsys, "-k", 3)
    assert float(k3["sigma"]) > float(k1["sigma"])


def test_account_output_is_stable(capsys):
    first, _ = _account(capsys, "--group-size", 2)
    second, _ = _account(capsys, "--group-size", 2)
    assert first == second


def test_account_userldp_floor(capsys):
    _, lines = _account(capsys, "--userldp")
    assert float(lines["sigma"]) >= 182 and lines["q"] == "1.0"


def test_account_rejects_bad_budget(capsys):
    assert run("account", "--delta", 1.5) == EXIT_CONFIG


# sweep ---------------------------------------------------------------------


def test_parse_sweep():
    assert parse_sweep(["federation.alpha=2,16", "run.seed=0"]) == [
        ["federation.alpha=2", "run.seed=0"], ["federation.alpha=16", "run.seed=0"]]
    assert parse_sweep([]) == [[]]
    with pytest.raises(ConfigError):
        parse_sweep(["federation.alpha="])
    with pytest.raises(ConfigError):
        parse_sweep(["bogus.key=1"])


def test_empty_sweep_matches_run(tiny, tmp_path):
    assert run("sweep", "--config", tiny, "--out", tmp_path / "s") == EXIT_OK
    assert run("run", "--config", tiny, "--out", tmp_path / "r") == EXIT_OK
    for name in REPORT_FILES:
        assert (tmp_path / "s" / "run_000" / name).read_bytes() == (tmp_path / "r" / name).read_bytes()
    rows = report.read_csv(tmp_path / "s" / "sweep.csv")
    assert len(rows) == 1 and rows[0]["overrides"] == ""


def test_alpha_sweep_raises_mean_group_size(tmp_path):
    cfg = tmp_path / "a.cfg"
    cfg.write_text(TINY.replace("n_subjects = 60", "n_subjects = 100")
                   .replace("const:6", "const:20").replace("B = 8", "B = 32"))
    assert run("sweep", "--config", cfg, "--out", tmp_path / "s",
               "--sweep", "federation.alpha=2,16") == EXIT_OK
    rows = report.read_csv(tmp_path / "s" / "sweep.csv")
    assert [r["overrides"] for r in rows] == ["federation.alpha=2", "federation.alpha=16"]
    assert float(rows[1]["mean_observed_Z"]) > float(rows[0]["mean_observed_Z"])
    assert list(rows[0]) == report.SWEEP_HEADER


def test_sweep_validates_every_combination_first(tiny, tmp_path):
    code = run("sweep", "--config", tiny, "--out", tmp_path / "s",
               "--sweep", "training.B=8,0")
    assert code == EXIT_CONFIG
    assert not (tmp_path / "s" / "run_000").exists()


# plot ----------------------------------------------------------------------


def test_plot_group_dp_run(tiny, tmp_path, capsys):
    run("run", "--config", tiny, "--out", tmp_path / "o")
    assert run("plot", tmp_path / "o") == EXIT_OK
    figs = tmp_path / "o" / "figures"
    for name in ("accuracy.svg", "loss.svg", "group_sizes.svg", "group_sizes.csv", "bounds.svg"):
        assert (figs / name).exists(), name
    audits = report.read_jsonl(tmp_path / "o" / "audits.jsonl")
    hist = {int(r["group_size"]): int(r["batches"]) for r in report.read_csv(figs / "group_sizes.csv")}
    recount = {}
    for a in audits:
        recount[a["observed_Z"]] = recount.get(a["observed_Z"], 0) + 1
    assert hist == recount and sum(hist.values()) == len(audits)


def test_plot_is_byte_deterministic(tiny, tmp_path):
    for out in ("a", "b"):  # the run directory name is the curve label
        run("run", "--config", tiny, "--out", tmp_path / out / "run")
        run("plot", tmp_path / out / "run", "--out", tmp_path / f"fig_{out}")
    for svg in sorted((tmp_path / "fig_a").iterdir()):
        assert svg.read_bytes() == (tmp_path / "fig_b" / svg.name).read_bytes()


def test_plot_warns_without_group_sizes(tiny, tmp_path, capsys):
    run("run", "--config", tiny, "--out", tmp_path / "o", "--override", "training.algorithm=fedavg")
    capsys.readouterr()
    assert run("plot", tmp_path / "o") == EXIT_OK
    assert "histogram skipped" in capsys.readouterr().err


def test_plot_missing_reports_exits_1(tmp_path):
    assert run("plot", tmp_path) == EXIT_RUNTIME


# bundled configuration -----------------------------------------------------


@pytest.mark.slow
def test_bundled_config_runs_end_to_end(tmp_path, capsys):
    assert run("run", "--config", bundled_config("femnist_like"), "--out", tmp_path / "o") == EXIT_OK
    summary = json.loads(capsys.readouterr().out)
    assert summary["effective_rounds"] == 25
    assert len(report.read_jsonl(tmp_path / "o" / "rounds.jsonl")) == 25
    audits = report.read_jsonl(tmp_path / "o" / "audits.jsonl")
    assert len(audits) == 25 * 16 * 100
    assert {a["batch_size"] for a in audits} == {512}


@pytest.mark.slow
def test_algorithm_sweep_fedavg_not_below_item_dp(tmp_path):
    from test_acceptance import ORDERING_CONFIG

    cfg = tmp_path / "o.cfg"
    cfg.write_text(ORDERING_CONFIG)
    code = run("sweep", "--config", cfg, "--out", tmp_path / "s",
               "--sweep", "training.algorithm=fedavg,local_item_dp",
               "--sweep", "run.seed=0,1,2,3,4")
    assert code == EXIT_OK
    acc = {}
    for r in report.read_csv(tmp_path / "s" / "sweep.csv"):
        acc.setdefault(r["algorithm"], []).append(float(r["final_test_accuracy"]))
    assert len(acc["fedavg"]) == len(acc["local_item_dp"]) == 5
    assert np.mean(acc["fedavg"]) >= np.mean(acc["local_item_dp"])
