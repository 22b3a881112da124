from __future__ import annotations

import csv
import json
import socket

import pytest
import yaml

from iterrefine import cli
from iterrefine.backends.recording import Transcript
from iterrefine.core import Budget, journal_is_complete
from mock_models import MockModels, endpoints

TASKS = [
    {"id": "a1", "prompt": "a red cube on a blue sphere", "questions": ["cube?", "red?", "sphere?"], "category": "spatial"},
    {"id": "a2", "prompt": "two cats and a dog", "questions": ["two cats?", "dog?"], "category": "count"},
    {"id": "a3", "prompt": "a glass teapot", "questions": ["teapot?", "glass?", "on a table?", "lit?"], "category": "spatial"},
]


def write_tasks(path, tasks, junk=()):
    lines = [json.dumps(t) for t in tasks] + list(junk)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def write_config(tmp_path, **cfg):
    path = tmp_path / "config.yaml"
    path.write_text(yaml.safe_dump(cfg), encoding="utf-8")
    return str(path)


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture
def offline(monkeypatch):
    def refuse(*args, **kwargs):
        raise AssertionError("network access attempted")

    monkeypatch.setattr(socket.socket, "connect", refuse)
    monkeypatch.setattr(socket, "create_connection", refuse)


def test_run_writes_one_directory_per_task_and_an_aggregate(tmp_path, offline):
    write_tasks(tmp_path / "tasks.jsonl", TASKS)
    config = write_config(tmp_path, paths={"tasks": "tasks.jsonl"}, budget={"T": 4, "M": 2})
    out = tmp_path / "runs"
    assert cli.main(["run", "--config", config, "--out", str(out)]) == 0
    for t in TASKS:
        run_dir = out / t["id"]
        assert journal_is_complete(run_dir)
        doc = json.loads((run_dir / "result.json").read_text())
        assert set(doc) == {"task", "engine", "result", "final_report", "row"}
        assert doc["row"]["units"] <= 8
    rows = read_csv(out / "aggregate.csv")
    assert [r["task_id"] for r in rows] == ["a1", "a2", "a3"]
    assert {r["B"] for r in rows} == {"8"}
    assert (out / "aggregate.txt").read_text().startswith("tasks: 3")


def test_malformed_lines_are_skipped_up_to_ten_percent(tmp_path):
    many = [dict(TASKS[0], id=f"t{i}") for i in range(10)]
    write_tasks(tmp_path / "tasks.jsonl", many, junk=["{not json"])
    config = write_config(tmp_path, paths={"tasks": "tasks.jsonl"}, budget={"T": 2, "M": 1})
    assert cli.main(["run", "--config", config, "--out", str(tmp_path / "ok")]) == 0
    assert len(read_csv(tmp_path / "ok" / "aggregate.csv")) == 10

    write_tasks(tmp_path / "tasks.jsonl", TASKS, junk=['{"id": 5}', "[]"])
    assert cli.main(["run", "--config", config, "--out", str(tmp_path / "bad")]) == 1
    assert len(read_csv(tmp_path / "bad" / "aggregate.csv")) == 3


def test_resume_skips_completed_tasks(tmp_path, monkeypatch):
    write_tasks(tmp_path / "tasks.jsonl", TASKS)
    config = write_config(tmp_path, paths={"tasks": "tasks.jsonl"})
    out = tmp_path / "runs"
    assert cli.main(["run", "--config", config, "--out", str(out)]) == 0
    before = (out / "aggregate.csv").read_bytes()

    def boom(*args, **kwargs):
        raise AssertionError("completed task was re-run")

    monkeypatch.setattr(cli, "run_refinement", boom)
    assert cli.main(["run", "--config", config, "--out", str(out), "--resume"]) == 0
    assert (out / "aggregate.csv").read_bytes() == before


def test_synthetic_tasks_without_a_task_file(tmp_path, offline):
    config = write_config(tmp_path, sim={"n_tasks": 2, "ks": [3, 6]})
    out = tmp_path / "runs"
    assert cli.main(["run", "--config", config, "--out", str(out), "--seed", "4"]) == 0
    rows = read_csv(out / "aggregate.csv")
    assert [r["k"] for r in rows] == ["3", "3", "6", "6"]


def test_record_then_replay_offline(tmp_path, monkeypatch):
    write_tasks(tmp_path / "tasks.jsonl", TASKS[:2])
    cfg = {"backends": endpoints(), "paths": {"tasks": str(tmp_path / "tasks.jsonl"), "transcript": str(tmp_path / "t.jsonl")}}
    transcript = Transcript()
    models = MockModels()
    factory = cli.BackendFactory(cfg, "http", 0, transport=models.transport(), transcript=transcript)
    tasks, _ = cli.load_tasks(tmp_path / "tasks.jsonl")
    recorded = cli.run_tasks(tasks, factory, cfg, Budget.of(3, 2), tmp_path / "rec")
    assert all(o.error is None for o in recorded)
    assert models.requests
    transcript.save(tmp_path / "t.jsonl")

    monkeypatch.setattr(socket.socket, "connect", lambda *a: (_ for _ in ()).throw(AssertionError("network")))
    config = write_config(tmp_path, backend="replay", budget={"T": 3, "M": 2},
                          paths={"tasks": "tasks.jsonl", "transcript": "t.jsonl"})
    assert cli.main(["run", "--config", config, "--out", str(tmp_path / "rep")]) == 0
    for t in TASKS[:2]:
        assert (tmp_path / "rep" / t["id"] / "result.json").read_bytes() == (tmp_path / "rec" / t["id"] / "result.json").read_bytes()


def test_sweep_has_fifteen_rows_and_is_reproducible(tmp_path):
    config = write_config(tmp_path, sim={"k": 5}, sweep={"masks": ["full", "no_restart"]})
    outs = []
    for name in ("one", "two"):
        assert cli.main(["sweep", "--config", config, "--out", str(tmp_path / name)]) == 0
        outs.append((tmp_path / name / "sweep_full.csv").read_bytes())
    assert outs[0] == outs[1]
    rows = read_csv(tmp_path / "one" / "sweep_full.csv")
    assert len(rows) == 15
    assert list(rows[0]) == ["I", "P", "B", "solve_rate", "mean_score"]
    assert [(r["I"], r["P"]) for r in rows if r["B"] == "4"] == [("1", "4"), ("2", "2"), ("4", "1")]
    assert (tmp_path / "one" / "sweep_no_restart.csv").exists()


def test_sweep_monte_carlo_and_task_modes(tmp_path):
    config = write_config(tmp_path, sim={"k": 4, "n_tasks": 2}, sweep={"mode": "monte_carlo", "n_trials": 200, "budgets": [2]})
    assert cli.main(["sweep", "--config", config, "--out", str(tmp_path / "mc")]) == 0
    assert len(read_csv(tmp_path / "mc" / "sweep_full.csv")) == 2
    config = write_config(tmp_path, sim={"k": 4, "n_tasks": 2}, sweep={"mode": "tasks", "budgets": [2]})
    assert cli.main(["sweep", "--config", config, "--out", str(tmp_path / "tasks")]) == 0
    assert (tmp_path / "tasks" / "full" / "T2_M1" / "aggregate.csv").exists()


def test_oracle_table(tmp_path):
    config = write_config(tmp_path, oracle={"ks": [3, 5], "budgets": [4], "masks": ["full", "no_backtrack_restart"]})
    assert cli.main(["oracle", "--config", config, "--out", str(tmp_path)]) == 0
    rows = read_csv(tmp_path / "oracle.csv")
    assert list(rows[0]) == ["k", "T", "M", "B", "policy", "solve_rate"]
    assert len(rows) == 2 * 3 * 2
    assert all(0 <= float(r["solve_rate"]) <= 1 for r in rows)


def test_compare_identical_runs_and_missing_category(tmp_path):
    write_tasks(tmp_path / "tasks.jsonl", TASKS)
    config = write_config(tmp_path, paths={"tasks": "tasks.jsonl"})
    assert cli.main(["run", "--config", config, "--out", str(tmp_path / "a")]) == 0
    assert cli.main(["compare", str(tmp_path / "a"), str(tmp_path / "a"), "--out", str(tmp_path / "c1")]) == 0
    rows = read_csv(tmp_path / "c1" / "compare.csv")
    assert rows and all(float(r["delta"]) == 0 for r in rows)

    write_tasks(tmp_path / "tasks.jsonl", [TASKS[0], TASKS[2]])
    assert cli.main(["run", "--config", config, "--out", str(tmp_path / "b")]) == 0
    assert cli.main(["compare", str(tmp_path / "a"), str(tmp_path / "b"), "--out", str(tmp_path / "c2")]) == 0
    count = next(r for r in read_csv(tmp_path / "c2" / "compare.csv") if r["key"] == "count")
    assert count["mean_b"] == "absent" and count["delta"] == "absent"


def test_compare_missing_run_is_config_error(tmp_path):
    assert cli.main(["compare", str(tmp_path / "nope"), str(tmp_path / "nope"), "--out", str(tmp_path)]) == 2


def test_jenga_sim(tmp_path):
    config = write_config(tmp_path, jenga={"n_scenes": 6, "per_step_budget": 2, "min_objects": 2, "max_objects": 4})
    assert cli.main(["jenga", "--config", config, "--out", str(tmp_path)]) == 0
    rows = read_csv(tmp_path / "jenga_scenes.csv")
    assert len(rows) == 6
    for r in rows:
        assert int(r["iterative_edits"]) <= 2 * int(r["objects"])
        assert int(r["parallel_edits"]) == 2 * int(r["objects"])
    assert (tmp_path / "jenga.txt").read_text().startswith("# 6 scenes, per-step budget 2")


def test_jenga_empty_scene_set(tmp_path):
    config = write_config(tmp_path, jenga={"n_scenes": 0})
    assert cli.main(["jenga", "--config", config, "--out", str(tmp_path)]) == 2
    config = write_config(tmp_path, backend="http", paths={"scenes": "."}, backends=endpoints())
    assert cli.main(["jenga", "--config", config, "--out", str(tmp_path)]) == 2


@pytest.mark.parametrize("cfg", [
    {"budget": {"B": 8, "T": 3}},
    {"sim": {"bogus": 1}},
    {"actions": {"allowed": ["CONTINUE", "JUMP"]}},
    {"actions": {"allowed": ["CONTINUE", "STOP"], "fallback": "BACKTRACK"}},
    {"backend": "http", "paths": {"tasks": "tasks.jsonl"}},
    {"backend": "replay"},
])
def test_bad_config_exits_2(tmp_path, cfg):
    write_tasks(tmp_path / "tasks.jsonl", TASKS)
    config = write_config(tmp_path, **cfg)
    assert cli.main(["run", "--config", config, "--out", str(tmp_path / "o")]) == 2


def test_unreadable_config_exits_2(tmp_path):
    assert cli.main(["run", "--config", str(tmp_path / "missing.yaml")]) == 2
    (tmp_path / "list.yaml").write_text("- 1\n- 2\n")
    assert cli.main(["run", "--config", str(tmp_path / "list.yaml")]) == 2


def test_budget_from_config():
    assert cli.budget_from_config({}) == Budget.of(4, 4)
    assert cli.budget_from_config({"budget": {"B": 16, "T": 8}}) == Budget.of(8, 2)
    assert cli.budget_from_config({"budget": {"B": 4}}) == Budget.of(4, 1)


def test_subset_is_seeded_per_category(tmp_path):
    many = [dict(TASKS[i % 2], id=f"t{i}", category=f"c{i % 2}") for i in range(20)]
    write_tasks(tmp_path / "tasks.jsonl", many)
    cfg = {"paths": {"tasks": str(tmp_path / "tasks.jsonl")}, "subset": {"per_category": 3}}
    picked, _ = cli.resolve_tasks(cfg, "sim", seed=1)
    assert len(picked) == 6
    assert sorted({t.category for t in picked}) == ["c0", "c1"]
    assert [t.id for t in picked] == [t.id for t in cli.resolve_tasks(cfg, "sim", seed=1)[0]]
    assert [t.id for t in picked] != [t.id for t in cli.resolve_tasks(cfg, "sim", seed=2)[0]]
    with pytest.raises(cli.ConfigError):
        cli.resolve_tasks({**cfg, "subset": {"per_category": 0}}, "sim")
