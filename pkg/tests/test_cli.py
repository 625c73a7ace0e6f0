import json
from pathlib import Path

import pytest

from evtlab import cli
from evtlab.config import read_ini


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data") / "d"
    code = cli.dispatch(["gen-data", "--heights", "0.5,1.7", "--v-max", "1.0", "--episodes", "1",
                         "--config", str(_scenario_ini(out.parent)), "--out", str(out)])
    assert code == cli.EXIT_OK
    return out


def _scenario_ini(folder: Path) -> Path:
    path = folder / "small.ini"
    path.write_text("[scenario]\nmax_steps = 40\n\n[embodiment]\nmask_w = 16\nmask_h = 16\n\n"
                    "[model]\nK = 3\nd_z = 4\nfeat_dim = 8\nencoder_hidden = 8\naux_hidden = 8\n"
                    "lstm_hidden = 8\nhead_hidden = 8\n\n"
                    "[train]\nseq_len = 6\nburn_in = 2\nbatch_size = 2\ncql_samples = 3\nsteps = 3\n"
                    "checkpoint_every = 2\n")
    return path


def _files(folder: Path) -> dict:
    return {p.relative_to(folder).as_posix(): p.read_bytes() for p in sorted(folder.rglob("*"))
            if p.is_file() and p.name != cli.MANIFEST_NAME}


def test_gen_data_outputs_and_manifest(dataset):
    assert sorted(p.name for p in dataset.iterdir()) == ["dataset.bin", "dataset.bin.manifest.json",
                                                          "run_manifest.json"]
    man = json.loads((dataset / "run_manifest.json").read_text())
    assert man["command"][0] == "gen-data"
    assert man["config"]["data"]["heights"] == [0.5, 1.7]
    assert man["config"]["scenario"]["max_steps"] == 40
    assert man["dataset_sha256"] == cli.sha256_file(dataset / "dataset.bin")
    assert man["seeds"] == {"data": 0}
    assert {"version", "duration_s", "checkpoints"} <= set(man)


def test_train_eval_roundtrip_and_manifest_rerun(dataset, tmp_path):
    ini = str(_scenario_ini(tmp_path))
    run = tmp_path / "train"
    assert cli.dispatch(["train", "--data", str(dataset / "dataset.bin"), "--config", ini,
                         "--ablate", "no_lstm", "--out", str(run)]) == 0
    man = json.loads((run / "run_manifest.json").read_text())
    assert set(man["checkpoints"]) == {"ckpt_2.bin", "final.bin"}
    assert man["config"]["train"]["no_lstm"] is True

    again = tmp_path / "again"
    assert cli.dispatch(["train", "--manifest", str(run / "run_manifest.json"), "--out", str(again)]) == 0
    assert _files(run) == _files(again)

    ev = tmp_path / "eval"
    assert cli.dispatch(["eval", "--ckpt", str(run / "final.bin"), "--config", ini, "--heights", "1.0",
                         "--speeds", "0.5,1.0", "--episodes", "2", "--jobs", "1", "--traces",
                         "--out", str(ev)]) == 0
    csv_lines = (ev / "eval.csv").read_text().splitlines()
    assert len(csv_lines) == 1 + 2 + 3
    assert len(list((ev / "traces" / "eval").glob("*.jsonl"))) == 4


def test_flags_override_config_file(tmp_path):
    ini = tmp_path / "c.ini"
    ini.write_text("[data]\nseed = 5\nnoise = 0.4\n")
    args = cli.build_parser().parse_args(["gen-data", "--config", str(ini), "--seed", "9"])
    cfg, _ = cli.resolve(args)
    assert cfg["data"]["seed"] == 9 and cfg["data"]["noise"] == 0.4


def test_dump_config_lists_every_default(capsys, tmp_path):
    assert cli.dispatch(["--dump-config"]) == 0
    text = capsys.readouterr().out
    path = tmp_path / "dump.ini"
    path.write_text(text)
    sections = read_ini(path)
    defaults = cli.default_config()
    assert set(sections) == set(defaults)
    for name, values in defaults.items():
        assert set(sections[name]) == set(values)
    # the dump is itself a valid config file
    args = cli.build_parser().parse_args(["train", "--config", str(path)])
    cfg, _ = cli.resolve(args)
    assert cfg == defaults


def test_subcommand_dump_config_writes_nothing(tmp_path, capsys):
    out = tmp_path / "never"
    assert cli.dispatch(["baseline", "--episodes", "3", "--out", str(out), "--dump-config"]) == 0
    assert "episodes = 3" in capsys.readouterr().out
    assert not out.exists()


@pytest.mark.parametrize("argv, code", [
    (["train", "--steps", "2"], cli.EXIT_USAGE),
    (["train", "--bogus"], cli.EXIT_USAGE),
    (["nope"], cli.EXIT_USAGE),
    (["ablate", "--variants", "full,wrong", "--data", "x"], cli.EXIT_USAGE),
    (["gen-data", "--config", "/nonexistent/c.ini"], cli.EXIT_CONFIG),
    (["eval", "--ckpt", "/nonexistent/final.bin"], cli.EXIT_CHECKPOINT),
    (["train", "--data", "/nonexistent/d.bin"], cli.EXIT_DATASET),
])
def test_exit_codes(argv, code, tmp_path, capsys):
    assert cli.dispatch(argv + ["--out", str(tmp_path / "o")] if argv[0] != "nope" else argv) == code


def test_unknown_config_key_is_config_error(tmp_path):
    ini = tmp_path / "c.ini"
    ini.write_text("[train]\nlearning_rate = 1\n")
    assert cli.dispatch(["gen-data", "--config", str(ini), "--out", str(tmp_path / "o")]) == cli.EXIT_CONFIG


def test_incompatible_checkpoint_exit_code(dataset, tmp_path):
    assert cli.dispatch(["eval", "--ckpt", str(dataset / "dataset.bin"), "--out", str(tmp_path / "o")]) \
        == cli.EXIT_CHECKPOINT


def test_manifest_dataset_checksum_enforced(dataset, tmp_path):
    ini = str(_scenario_ini(tmp_path))
    copy = tmp_path / "d.bin"
    copy.write_bytes((dataset / "dataset.bin").read_bytes())
    run = tmp_path / "t"
    assert cli.dispatch(["train", "--data", str(copy), "--config", ini, "--out", str(run)]) == 0
    copy.write_bytes(copy.read_bytes() + b"\0")
    assert cli.dispatch(["train", "--manifest", str(run / "run_manifest.json"),
                         "--out", str(tmp_path / "t2")]) == cli.EXIT_DATASET


def test_refuses_to_reuse_run_directory(tmp_path):
    out = str(tmp_path / "b")
    argv = ["baseline", "--heights", "1.0", "--speeds", "0.5", "--episodes", "1", "--jobs", "1", "--out", out]
    assert cli.dispatch(argv) == 0
    assert cli.dispatch(argv) == cli.EXIT_OUTPUT


def test_default_output_root_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUT_ROOT_ENV, str(tmp_path / "root"))
    assert cli.dispatch(["baseline", "--heights", "1.0", "--speeds", "0.5", "--episodes", "1",
                         "--jobs", "1"]) == 0
    (run,) = (tmp_path / "root").iterdir()
    assert run.name.startswith("baseline-")
    assert (run / "run_manifest.json").exists() and (run / "baseline_pid.csv").exists()


def test_nothing_written_outside_out(dataset, tmp_path, monkeypatch):
    cwd = tmp_path / "cwd"
    cwd.mkdir()
    monkeypatch.chdir(cwd)
    ini = str(_scenario_ini(tmp_path))
    out = tmp_path / "abl"
    assert cli.dispatch(["ablate", "--variants", "full,no_context", "--data", str(dataset / "dataset.bin"),
                         "--config", ini, "--heights", "1.0", "--speeds", "0.5", "--episodes", "1",
                         "--jobs", "1", "--out", str(out)]) == 0
    assert list(cwd.iterdir()) == []
    table = (out / "ablation.txt").read_text()
    assert "Full model" in table and "absent" in table
    assert (out / "full" / "final.bin").exists() and (out / "no_context.csv").exists()
    assert len(list(out.rglob(cli.MANIFEST_NAME))) == 1


def test_selftest_passes(capsys):
    assert cli.dispatch(["selftest"]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and "checks passed" in out
