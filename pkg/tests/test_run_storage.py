from utils.run_storage import RunStorage, get_run_storage


def test_run_lifecycle(tmp_path):
    storage = RunStorage(str(tmp_path / "registry" / "runs.db"))
    run = storage.start_run("check", "presets/heat.yaml", "/tmp/out")
    assert run["status"] == "running"
    assert run["passed"] is None
    assert run["config_path"].endswith("heat.yaml")

    done = storage.finish_run(run["id"], False, summary="energy.energy_residual")
    assert done["status"] == "completed"
    assert done["passed"] == 0
    assert done["summary"] == "energy.energy_residual"

    storage.start_run("solve", "presets/heat.yaml", "/tmp/out")
    assert len(storage.get_all_runs()) == 2
    assert [r["id"] for r in storage.get_all_runs("check")] == [run["id"]]

    assert storage.delete_run(run["id"])
    assert not storage.delete_run(run["id"])
    assert storage.get_run(run["id"]) is None
    storage.close()


def test_update_without_changes_returns_record(tmp_path):
    storage = RunStorage(str(tmp_path / "runs.db"))
    run = storage.start_run("norm", "a.yaml", "out")
    assert storage.update_run(run["id"], {}) == run
    storage.close()


def test_shared_registry_follows_environment(workspace, monkeypatch):
    first = get_run_storage()
    assert first.db_path == str(workspace / "runs.db")
    assert get_run_storage() is first
    monkeypatch.setenv("ORLICZFLOW_RUNS_DB", str(workspace / "other.db"))
    second = get_run_storage()
    assert second is not first
    assert second.db_path == str(workspace / "other.db")
