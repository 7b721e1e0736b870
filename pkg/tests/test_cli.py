"""End-to-end tests of the command-line interface.

Every test drives `focusrl.cli.main` in-process with a miniature
configuration (96px scene, 16px net input, a few hundred steps) so the
whole file stays fast while still exercising real training runs.
"""

import json
from pathlib import Path

import pytest

from focusrl.cli import list_presets, load_config, main
from focusrl.imaging import load_stack

MINI = {
    "seed": 5,
    "stack": {
        "seed": 7,
        "width": 96,
        "height": 96,
        "z_min": 30.0,
        "z_max": 36.0,
        "spacing": 0.3,
        "z_star": 32.4,
        "blur_gain": 0.5,
        "view_id": "mini",
    },
    "env": {"net_input_size": 16},
    "net": {"conv_channels": [2, 2, 2, 2], "reduce_channels": 2, "embed_dim": 8, "fc_width": 8},
    "train": {
        "total_timesteps": 300,
        "learn_start": 50,
        "eval_interval": 100,
        "target_sync": 100,
        "replay_capacity": 400,
    },
}


@pytest.fixture(scope="module")
def mini_config(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "mini.json"
    path.write_text(json.dumps(MINI), encoding="utf-8")
    return str(path)


@pytest.fixture(scope="module")
def mini_stack_dir(tmp_path_factory, mini_config):
    out = tmp_path_factory.mktemp("stack") / "frames"
    assert main(["gen-stack", "--config", mini_config, "--out", str(out)]) == 0
    return str(out)


@pytest.fixture(scope="module")
def mini_run(tmp_path_factory, mini_config):
    out = tmp_path_factory.mktemp("run") / "r1"
    assert main(["train", "--config", mini_config, "--out", str(out)]) == 0
    return out


class TestConfig:
    def test_bundled_presets_listed(self):
        assert {"tiny", "exp1", "exp2", "exp3"} <= set(list_presets())

    def test_load_preset_by_name(self):
        config, doc = load_config("tiny")
        assert doc["stack"]["view_id"] == "tiny"
        assert config.hyperparams().total_timesteps == 20_000

    def test_unknown_name_fails(self, capsys):
        assert main(["baseline", "scan", "--config", "nope.json"]) == 2
        assert "no config file or preset" in capsys.readouterr().err

    def test_unknown_top_key_rejected(self, tmp_path, capsys):
        doc = dict(MINI, bogus=1)
        path = tmp_path / "bad.json"
        path.write_text(json.dumps(doc), encoding="utf-8")
        assert main(["count", "--config", str(path)]) == 2
        assert "unknown config keys: bogus" in capsys.readouterr().err

    def test_unknown_train_key_rejected(self, tmp_path, capsys):
        doc = dict(MINI, train=dict(MINI["train"], warmup=9))
        path = tmp_path / "bad.json"
        path.write_text(json.dumps(doc), encoding="utf-8")
        assert main(["count", "--config", str(path)]) == 2
        assert "unknown train keys: warmup" in capsys.readouterr().err

    def test_stack_section_needs_geometry(self, tmp_path, capsys):
        doc = dict(MINI, stack={"seed": 1})
        path = tmp_path / "bad.json"
        path.write_text(json.dumps(doc), encoding="utf-8")
        assert main(["count", "--config", str(path)]) == 2
        assert "needs 'z_min'" in capsys.readouterr().err

    def test_net_input_must_match_env(self, tmp_path, capsys):
        doc = dict(MINI, net=dict(MINI["net"], input_size=32))
        path = tmp_path / "bad.json"
        path.write_text(json.dumps(doc), encoding="utf-8")
        assert main(["count", "--config", str(path)]) == 2
        assert "does not match env net_input_size" in capsys.readouterr().err


class TestCount:
    def test_reference_arch_passes_budgets(self, capsys):
        assert main(["count"]) == 0
        out = capsys.readouterr().out
        assert out.count("PASS") == 2
        assert "408813" in out

    def test_undersized_arch_fails(self, tmp_path, capsys):
        path = tmp_path / "small.json"
        path.write_text(json.dumps(MINI), encoding="utf-8")
        assert main(["count", "--config", str(path)]) == 1
        assert "FAIL" in capsys.readouterr().out


class TestGenStack:
    def test_writes_frames_and_manifest(self, mini_stack_dir):
        stack = load_stack(mini_stack_dir)
        assert len(stack) == 21
        assert stack.view_id == "mini"
        assert (Path(mini_stack_dir) / "frame_0000.pgm").is_file()

    def test_refuses_non_empty_target(self, mini_config, mini_stack_dir, capsys):
        assert main(["gen-stack", "--config", mini_config, "--out", mini_stack_dir]) == 2
        assert "non-empty" in capsys.readouterr().err

    def test_writes_train_and_named_test_stacks(self, tmp_path):
        doc = dict(
            MINI,
            test_stacks={"similar": dict(MINI["stack"], seed=8, view_id="sim")},
        )
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps(doc), encoding="utf-8")
        out = tmp_path / "stacks"
        assert main(["gen-stack", "--config", str(path), "--out", str(out)]) == 0
        assert load_stack(out / "train").view_id == "mini"
        assert load_stack(out / "similar").view_id == "sim"


class TestCurve:
    def test_csv_to_stdout(self, mini_stack_dir, capsys):
        assert main(["curve", mini_stack_dir]) == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert lines[0] == "index,position_rad,focus,normalized"
        assert len(lines) == 22
        first = lines[1].split(",")
        assert first[0] == "0"
        assert float(first[1]) == 30.0
        # Normalized column peaks at exactly 1.0 somewhere.
        assert max(float(row.split(",")[3]) for row in lines[1:]) == 1.0

    def test_csv_to_file(self, mini_stack_dir, tmp_path):
        out = tmp_path / "curve.csv"
        assert main(["curve", mini_stack_dir, "--out", str(out)]) == 0
        assert len(out.read_text(encoding="utf-8").strip().splitlines()) == 22


class TestTrain:
    def test_run_directory_contents(self, mini_run):
        names = {p.name for p in mini_run.iterdir()}
        assert {
            "run_meta.json",
            "train_log.csv",
            "ckpt_100",
            "ckpt_200",
            "ckpt_300",
            "eval_100.json",
            "eval_200.json",
            "eval_300.json",
        } <= names

    def test_log_rows_match_eval_interval(self, mini_run):
        lines = (mini_run / "train_log.csv").read_text(encoding="utf-8").strip().splitlines()
        assert lines[0] == "timestep,loss,epsilon,eval_accuracy,eval_avg_steps"
        assert [row.split(",")[0] for row in lines[1:]] == ["100", "200", "300"]

    def test_run_meta_records_arch_and_counts(self, mini_run):
        meta = json.loads((mini_run / "run_meta.json").read_text(encoding="utf-8"))
        assert meta["seed"] == 5
        assert meta["positions"] == 21
        assert meta["net"]["conv_channels"] == [2, 2, 2, 2]
        assert meta["params"] > 0 and meta["macs"] > 0
        assert meta["elapsed_seconds"] > 0

    def test_fixed_seed_runs_are_bit_identical(self, mini_config, mini_run, tmp_path):
        out = tmp_path / "r2"
        assert main(["train", "--config", mini_config, "--out", str(out)]) == 0
        first = (mini_run / "train_log.csv").read_bytes()
        assert (out / "train_log.csv").read_bytes() == first
        assert (out / "ckpt_300").read_bytes() == (mini_run / "ckpt_300").read_bytes()

    def test_seed_flag_changes_the_run(self, mini_config, mini_run, tmp_path):
        out = tmp_path / "r3"
        assert main(["train", "--config", mini_config, "--out", str(out), "--seed", "6"]) == 0
        assert (out / "train_log.csv").read_bytes() != (mini_run / "train_log.csv").read_bytes()

    def test_resume_continues_to_the_end(self, mini_config, mini_run, tmp_path):
        out = tmp_path / "r4"
        ckpt = str(mini_run / "ckpt_200")
        assert main(["train", "--config", mini_config, "--out", str(out), "--resume", ckpt]) == 0
        names = {p.name for p in out.iterdir()}
        assert "ckpt_300" in names
        assert "ckpt_100" not in names

    def test_resume_rejects_wrong_arch_checkpoint(self, mini_run, tmp_path, capsys):
        doc = dict(MINI, net=dict(MINI["net"], fc_width=16))
        path = tmp_path / "wider.json"
        path.write_text(json.dumps(doc), encoding="utf-8")
        ckpt = str(mini_run / "ckpt_200")
        code = main(["train", "--config", str(path), "--out", str(tmp_path / "r5"), "--resume", ckpt])
        assert code == 2
        assert "arch" in capsys.readouterr().err.lower()


class TestEval:
    def test_report_written_and_printed(self, mini_config, mini_run, tmp_path, capsys):
        out = tmp_path / "report.json"
        ckpt = str(mini_run / "ckpt_300")
        assert main(["eval", ckpt, "--config", mini_config, "--out", str(out)]) == 0
        printed = json.loads(capsys.readouterr().out)
        written = json.loads(out.read_text(encoding="utf-8"))
        assert printed == written
        assert written["checkpoint_step"] == 300
        assert written["stack_view"] == "mini"
        assert written["episodes"] == 21

    def test_matches_training_time_eval(self, mini_config, mini_run, capsys):
        ckpt = str(mini_run / "ckpt_300")
        assert main(["eval", ckpt, "--config", mini_config]) == 0
        fresh = json.loads(capsys.readouterr().out)
        logged = json.loads((mini_run / "eval_300.json").read_text(encoding="utf-8"))
        for key in logged:
            assert fresh[key] == logged[key]

    def test_rejects_input_size_mismatch(self, mini_run, tmp_path, capsys):
        doc = dict(MINI, env={"net_input_size": 32}, net={})
        path = tmp_path / "cfg32.json"
        path.write_text(json.dumps(doc), encoding="utf-8")
        ckpt = str(mini_run / "ckpt_300")
        assert main(["eval", ckpt, "--config", str(path)]) == 2
        assert "expects 16px inputs" in capsys.readouterr().err

    def test_thread_count_does_not_change_the_report(
        self, mini_config, mini_run, capsys, monkeypatch
    ):
        ckpt = str(mini_run / "ckpt_300")
        assert main(["eval", ckpt, "--config", mini_config]) == 0
        serial = json.loads(capsys.readouterr().out)
        monkeypatch.setenv("FOCUSRL_THREADS", "3")
        assert main(["eval", ckpt, "--config", mini_config]) == 0
        assert json.loads(capsys.readouterr().out) == serial

    def test_bad_thread_env_rejected(self, mini_config, mini_run, capsys, monkeypatch):
        monkeypatch.setenv("FOCUSRL_THREADS", "zero")
        ckpt = str(mini_run / "ckpt_300")
        assert main(["eval", ckpt, "--config", mini_config]) == 2
        assert "FOCUSRL_THREADS" in capsys.readouterr().err


class TestBaseline:
    @pytest.mark.parametrize("kind", ["hill-climb", "value-iteration", "scan"])
    def test_kinds_emit_labeled_json(self, kind, mini_config, mini_stack_dir, tmp_path, capsys):
        out = tmp_path / f"{kind}.json"
        code = main(
            ["baseline", kind, "--config", mini_config, "--stack", mini_stack_dir, "--out", str(out)]
        )
        assert code == 0
        payload = json.loads(out.read_text(encoding="utf-8"))
        assert payload["baseline"] == kind
        assert payload["stack_view"] == "mini"
        assert json.loads(capsys.readouterr().out) == payload

    def test_value_iteration_solves_the_mini_stack(self, mini_config, mini_stack_dir, capsys):
        code = main(
            ["baseline", "value-iteration", "--config", mini_config, "--stack", mini_stack_dir]
        )
        assert code == 0
        payload = json.loads(capsys.readouterr().out)
        assert payload["accuracy"] == 1.0
        assert payload["avg_steps"] < 3.0
