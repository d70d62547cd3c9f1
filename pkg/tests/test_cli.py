import csv
import json
from collections import deque

import pytest

from rafiki_core import inference as inf
from rafiki_core.cli import main

SHORT_SERVE = ["--set", "workload.period=40.0"]


def rows(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def run(*args):
    return main([str(a) for a in args])


def test_tune_writes_one_row_per_trial(tmp_path):
    out = tmp_path / "t"
    assert run("tune", "--seed", 1, "--out", out, "--set", "study.max_trials=20", "--set", "study.workers=1") == 0
    trials = rows(out / "trials.csv")
    assert len(trials) == 20
    assert list(trials[0]) == ["seed", "workers", "trial_id", "worker", "origin", "p", "epochs"]
    best = json.loads((out / "best.json").read_text())
    assert best["p"] == max(float(r["p"]) for r in trials)
    assert json.loads((out / "run.json").read_text())["seed"] == 1
    assert (out / "config.json").is_file() and (out / "progress.csv").is_file() and (out / "best_p.png").is_file()


def test_identical_configs_give_identical_outputs(tmp_path):
    for name in ("a", "b"):
        assert run("tune", "--preset", "cifar-surrogate-bo", "--out", tmp_path / name,
                   "--set", "repeats=2", "--set", "study.max_trials=8") == 0
    for f in ("trials.csv", "progress.csv", "best.json", "config.json", "run.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_rafiki_out_overrides_and_nothing_escapes(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    env_dir = tmp_path / "from-env"
    monkeypatch.setenv("RAFIKI_OUT", str(env_dir))
    assert run("tune", "--out", tmp_path / "ignored", "--set", "study.max_trials=3") == 0
    assert env_dir.is_dir()
    assert sorted(p.name for p in tmp_path.iterdir()) == ["from-env"]


def test_bad_config_exits_nonzero(tmp_path, capsys):
    cfg = tmp_path / "bad.toml"
    cfg.write_text("[study]\nmax_trials = 0\nfoo = 1\n")
    assert run("tune", "--config", cfg, "--out", tmp_path / "o") == 2
    err = capsys.readouterr().err
    assert "study.max_trials" in err and "study.foo" in err


def test_scaling_sweep_writes_scaling_csv(tmp_path):
    out = tmp_path / "s"
    assert run("tune", "--preset", "tune-scaling", "--out", out, "--set", "repeats=1") == 0
    sc = rows(out / "scaling.csv")
    assert [int(r["workers"]) for r in sc] == [1, 2, 4, 8]
    assert float(sc[0]["speedup"]) == 1.0
    assert (out / "scaling.png").is_file()


def replay_greedy_trace(events, prof, tau, delta, batches):
    """Rebuild the FIFO from arrivals and check each dispatch against the batching rule."""
    queue = deque()  # [arrival time, count]
    checked = 0
    for ev in events:
        if ev["ev"] == "arrive":
            if ev["n"] - ev["dropped"]:
                queue.append([ev["t"], ev["n"] - ev["dropped"]])
        elif ev["ev"] == "dispatch":
            waiting = sum(c for _, c in queue)
            b, t = ev["b"], ev["t"]
            assert ev["n"] == b
            assert b == max(x for x in batches if x <= waiting)
            if b != batches[-1]:
                assert prof.c(b) + (t - queue[0][0]) + delta >= tau - 1e-9
            take = b
            while take:
                k = min(take, queue[0][1])
                queue[0][1] -= k
                take -= k
                if queue[0][1] == 0:
                    queue.popleft()
            checked += 1
    return checked


def test_single_model_greedy_matches_batching_rule(tmp_path):
    out = tmp_path / "g"
    assert run("serve-sim", "--preset", "serve-single-max", "--out", out, "--trace", *SHORT_SERVE) == 0
    summary = rows(out / "summary.csv")[0]
    assert summary["conservation_ok"] == "1"
    events = [json.loads(line) for line in (out / "trace_s0_b1.jsonl").read_text().splitlines()]
    n = replay_greedy_trace(events, inf.inception_v3(), 0.56, 0.056, inf.DEFAULT_BATCHES)
    assert n > 100
    header = (out / "episode_s0_b1.csv").read_text().splitlines()[0]
    assert header.startswith("t,arriving,completed,overdue,dropped")


def test_rl_run_is_reproducible(tmp_path):
    args = ["--preset", "serve-multi-async", "--set", "repeats=1", "--set", "rl.episodes=2", *SHORT_SERVE]
    for name in ("a", "b"):
        assert run("serve-sim", "--out", tmp_path / name, *args) == 0
    for f in ("training.csv", "summary.csv", "params_s0_b1.bin", "episode_s0_b1.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    assert len(rows(tmp_path / "a" / "training.csv")) == 2
    assert (tmp_path / "a" / "training.png").is_file()


def test_compare_identical_runs_gives_zero_deltas(tmp_path, capsys):
    for name in ("a", "b"):
        assert run("serve-sim", "--preset", "serve-single-min", "--out", tmp_path / name, "--set", "repeats=2", *SHORT_SERVE) == 0
    assert run("compare", tmp_path / "a", tmp_path / "b", "--out", tmp_path / "cmp") == 0
    cmp = rows(tmp_path / "cmp" / "compare.csv")
    assert cmp and all(float(r["mean_delta"]) == 0.0 and float(r["sign_p"]) == 1.0 for r in cmp)
    assert (tmp_path / "cmp" / "report.md").is_file() and (tmp_path / "cmp" / "timeseries_compare.png").is_file()


def test_compare_declared_variable_and_incompatible(tmp_path, capsys):
    base = ["--preset", "cifar-surrogate-random", "--set", "repeats=3", "--set", "study.max_trials=8"]
    assert run("tune", "--out", tmp_path / "co", *base) == 0
    assert run("tune", "--out", tmp_path / "st", *base, "--set", 'study.mode="study"') == 0
    assert run("compare", tmp_path / "st", tmp_path / "co", "--out", tmp_path / "cmp") == 0
    cmp = rows(tmp_path / "cmp" / "compare.csv")
    assert cmp[0]["metric"] == "best_p" and int(cmp[0]["n_pairs"]) == 3
    assert run("tune", "--out", tmp_path / "other", *base, "--set", "task.noise_sd=0.01") == 0
    capsys.readouterr()
    assert run("compare", tmp_path / "co", tmp_path / "other", "--out", tmp_path / "cmp2") == 2
    assert "task.noise_sd" in capsys.readouterr().err


def test_compare_needs_two_runs(tmp_path):
    assert run("compare", tmp_path, "--out", tmp_path / "c") == 2


def test_socket_transport_tune(tmp_path):
    out = tmp_path / "sock"
    assert run("tune", "--out", out, "--set", 'study.transport="socket"', "--set", "study.max_trials=6",
               "--set", "study.workers=2", "--set", 'study.mode="costudy"') == 0
    assert len(rows(out / "trials.csv")) >= 6


def test_help_lists_commands(capsys):
    with pytest.raises(SystemExit):
        main(["--help"])
    text = capsys.readouterr().out
    for cmd in ("tune", "serve-sim", "compare"):
        assert cmd in text
