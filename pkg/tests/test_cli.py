import json

import pytest

from rolesep import cli
from rolesep.arcdata import Grid, Pair, Task, load_tasks, save_task
from rolesep.model import load_model
from rolesep.train import NonFiniteLoss, demo_accuracy

TINY = ["--embed-dim", "16", "--depth", "2", "--canvas", "8", "--batch-size", "2"]


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def tiny_data(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    assert cli.main(["synth", "--family", "recolor", "--params", '{"src": 1, "dst": 2, "sizes": [1, 2]}',
                     "--n", "2", "--out", str(d)]) == 0
    return d


@pytest.fixture(scope="module")
def tiny_run(tiny_data, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert cli.main(["train", "--data", str(tiny_data), "--steps", "3", "--out", str(out), *TINY]) == 0
    return out


def test_synth_writes_tasks(tiny_data):
    tasks = load_tasks(tiny_data)
    assert len(tasks) == 2 and all(len(t.demos) == 3 for t in tasks)


def test_train_writes_run_dir(tiny_run):
    cfg = json.loads((tiny_run / "config.json").read_text())
    assert cfg["steps"] == 3 and cfg["model"]["embed_dim"] == 16 and cfg["model"]["n_task_embeddings"] == 2
    assert len((tiny_run / "metrics.csv").read_text().splitlines()) == 4
    model, meta = load_model(tiny_run / "model.ck")
    assert meta["task_ids"] == cfg["task_ids"] and model.cfg.canvas == 8


def test_config_file_with_flag_override(tiny_data, tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"steps": 7, "seed": 3, "model": {"embed_dim": 16, "depth": 1, "canvas": 8},
                                                  "train": {"batch_size": 2, "lr": 0.01}}))
    assert run("train", "--config", tmp_path / "c.json", "--data", tiny_data, "--steps", 2, "--out", tmp_path / "r") == 0
    cfg = json.loads((tmp_path / "r" / "config.json").read_text())
    assert cfg["steps"] == 2 and cfg["seed"] == 3 and cfg["train"]["lr"] == 0.01 and cfg["model"]["depth"] == 1


def test_staged_schedule_recorded(tiny_data, tmp_path):
    assert run("train", "--data", tiny_data, "--variant", "c-d", "--steps", 3, "--stage2-epochs", 2,
               "--out", tmp_path, *TINY) == 0
    cfg = json.loads((tmp_path / "config.json").read_text())
    assert cfg["schedule"] == {"stage1": {"variant": "c", "steps": 3}, "stage2": {"variant": "d", "steps": 2}}
    model, meta = load_model(tmp_path / "model.ck")
    assert model.variant == "d" == meta["variant"]
    assert len((tmp_path / "metrics.csv").read_text().splitlines()) == 6


def test_float64_reruns_are_bit_identical(tiny_data, tmp_path):
    for name in ("a", "b"):
        assert run("train", "--data", tiny_data, "--steps", 3, "--dtype", "float64", "--out", tmp_path / name, *TINY) == 0
    assert (tmp_path / "a" / "model.ck").read_bytes() == (tmp_path / "b" / "model.ck").read_bytes()
    assert (tmp_path / "a" / "metrics.csv").read_text() == (tmp_path / "b" / "metrics.csv").read_text()


def test_eval_report(tiny_run, tiny_data, tmp_path):
    assert run("eval", "--checkpoint", tiny_run / "model.ck", "--data", tiny_data, "--views", 1, "--seeds", 4,
               "--out", tmp_path) == 0
    lines = (tmp_path / "per_seed.csv").read_text().splitlines()
    assert lines[0] == "seed,pass_at_2" and len(lines) == 5
    rows = (tmp_path / "report.csv").read_text().splitlines()[1:]
    assert len(rows) == 8 and all(r.endswith(",") for r in rows)  # one view -> no second candidate
    assert json.loads((tmp_path / "config.json").read_text())["seeds"] == 4


def test_eval_with_ttt_log(tiny_run, tiny_data, tmp_path):
    assert run("eval", "--checkpoint", tiny_run / "model.ck", "--data", tiny_data, "--views", 2, "--ttt", 1,
               "--ttt-epochs", 2, "--out", tmp_path) == 0
    log = (tmp_path / "ttt.log").read_text().splitlines()
    assert len(log) == 2 and all("2 epochs (full budget)" in line for line in log)


def test_viz_outputs_and_determinism(tiny_run, tiny_data, tmp_path):
    for name in ("a", "b"):
        assert run("viz", "--checkpoint", tiny_run / "model.ck", "--data", tiny_data, "--layers", "0..1",
                   "--out", tmp_path / name) == 0
    files = sorted(p.name for p in (tmp_path / "a").glob("*.pgm"))
    assert len(files) == 4  # depth 2, dense and structured passes, one query token
    for f in files + ["manifest.json"]:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_viz_oversize_grid_exits_3(tiny_run, tmp_path, capsys):
    big = Grid.from_rows([[1] * 4] * 4)
    save_task(Task("big", (Pair(big, big),), (Pair(big, big),)), tmp_path / "big.json")
    assert run("viz", "--checkpoint", tiny_run / "model.ck", "--data", tmp_path / "big.json", "--out", tmp_path / "v") == 3
    assert "does not fit" in capsys.readouterr().err


def test_missing_data_exits_3(tmp_path):
    assert run("train", "--data", tmp_path / "nope", "--out", tmp_path / "r", *TINY) == 3
    assert run("eval", "--checkpoint", tmp_path / "nope.ck", "--synthetic", "recolor", "--out", tmp_path / "e") == 3


def test_config_errors_exit_2(tiny_data, tmp_path):
    (tmp_path / "bad.json").write_text("{not json")
    assert run("train", "--config", tmp_path / "bad.json", "--data", tiny_data, "--out", tmp_path / "r") == 2
    (tmp_path / "unk.json").write_text(json.dumps({"model": {"width": 3}}))
    assert run("train", "--config", tmp_path / "unk.json", "--data", tiny_data, "--out", tmp_path / "r") == 2
    assert run("train", "--data", tiny_data, "--canvas", 9, "--out", tmp_path / "r") == 2
    assert run("train", "--out", tmp_path / "r") == 2  # neither --data nor --synthetic
    assert run("viz", "--checkpoint", "x", "--synthetic", "recolor", "--layers", "3..1", "--out", tmp_path / "v") == 2
    with pytest.raises(SystemExit) as exc:
        run("train")
    assert exc.value.code == 2


def test_numeric_abort_exits_4(tiny_data, tmp_path, monkeypatch):
    def boom(*a, **kw):
        raise NonFiniteLoss(5)

    monkeypatch.setattr(cli, "train_offline", boom)
    assert run("train", "--data", tiny_data, "--out", tmp_path, *TINY) == 4


def test_recolor_overfit_then_ttt2_streak(tmp_path):
    assert run("train", "--synthetic", "recolor", "--steps", 500, "--out", tmp_path / "r") == 0
    model, _ = load_model(tmp_path / "r" / "model.ck")
    task = cli.recolor_task()
    assert demo_accuracy(model, [task], 16, 0, task_indices=[0]) == 1.0
    # with a zero TTT step size the solved model stays solved: three exact epochs, then stop
    (tmp_path / "e.json").write_text(json.dumps({"train": {"ttt_lr": 0.0}}))
    assert run("eval", "--config", tmp_path / "e.json", "--checkpoint", tmp_path / "r" / "model.ck",
               "--synthetic", "recolor", "--ttt", 2, "--views", 4, "--out", tmp_path / "e") == 0
    assert (tmp_path / "e" / "ttt.log").read_text().strip().endswith("3 epochs (early stop)")
