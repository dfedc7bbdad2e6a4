"""Command-line behavior: exit codes, output files, overrides, determinism.

Commands are invoked in-process through cli.main so exit codes and file
side effects can be asserted directly.
"""

import json
import os

import pytest

from lbi import cli, datasets, engine


def read(path):
    with open(path) as fh:
        return fh.read()


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


TINY_DATA = [
    "--set", "data.n_pretrain=10", "--set", "data.n_train=8",
    "--set", "data.n_val=6", "--set", "data.n_test=8",
    "--set", "data.corrupt_frac=0.3", "--set", "data.shift=0.5",
]


def run_args(out, extra=()):
    return ["run", "--out", str(out), *TINY_DATA,
            "--set", "iterations=5", *extra]


class TestRun:
    def test_zero_iterations_writes_header_only_trace(self, tmp_path, capsys):
        out = tmp_path / "out"
        code = cli.main(run_args(out, ["--set", "iterations=0"]))
        assert code == 0
        trace = read(out / "trace.csv")
        assert trace == cli.TRACE_HEADER + "\n"
        assert (out / "state.json").exists()
        assert (out / "summary.json").exists()
        assert (out / "manifest.json").exists()
        assert "run complete" in capsys.readouterr().out

    def test_trace_has_one_row_per_iteration(self, tmp_path):
        out = tmp_path / "out"
        assert cli.main(run_args(out)) == 0
        lines = read(out / "trace.csv").strip().splitlines()
        assert lines[0] == cli.TRACE_HEADER
        assert len(lines) == 6
        assert lines[1].startswith("0,")
        assert lines[5].startswith("4,")

    def test_set_overrides_echo_in_manifest(self, tmp_path):
        out = tmp_path / "out"
        code = cli.main(run_args(out, ["--set", "lambda=7e-3",
                                       "--set", "gamma=1"]))
        assert code == 0
        manifest = read_json(out / "manifest.json")
        assert manifest["config"]["lambda"] == 7e-3
        assert manifest["config"]["gamma"] == 1
        assert manifest["data"]["spec"]["n_pretrain"] == 10
        assert manifest["tool"]["name"] == "lbi"
        assert "input_sha256" in manifest

    def test_config_file_plus_override(self, tmp_path):
        cfg_path = tmp_path / "cfg.yaml"
        cfg_path.write_text(
            "data:\n  n_pretrain: 10\n  n_train: 8\n  n_val: 6\n"
            "  n_test: 8\n  corrupt_frac: 0.3\n"
            "lbi:\n  iterations: 3\n  lambda: 0.001\n"
        )
        out = tmp_path / "out"
        code = cli.main(["run", "--config", str(cfg_path), "--out", str(out),
                         "--set", "lbi.lambda=0.5"])
        assert code == 0
        manifest = read_json(out / "manifest.json")
        assert manifest["config"]["lambda"] == 0.5
        assert manifest["config"]["iterations"] == 3

    def test_malformed_config_exits_2_without_outputs(self, tmp_path, capsys):
        cfg_path = tmp_path / "bad.yaml"
        cfg_path.write_text("lbi: [unclosed\n")
        out = tmp_path / "never"
        code = cli.main(["run", "--config", str(cfg_path), "--out", str(out)])
        assert code == 2
        assert not out.exists()
        assert "error" in capsys.readouterr().err

    def test_unknown_config_key_exits_2(self, tmp_path):
        out = tmp_path / "never"
        code = cli.main(run_args(out, ["--set", "lbi.bogus=1"]))
        assert code == 2
        assert not out.exists()

    def test_unknown_section_exits_2(self, tmp_path):
        code = cli.main(["run", "--out", str(tmp_path / "never"),
                         "--set", "nosuch.key=1"])
        assert code == 2

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_numeric_failure_exits_3_with_partial_trace(self, tmp_path, capsys):
        out = tmp_path / "out"
        code = cli.main(run_args(out, [
            "--set", "iterations=50",
            "--set", "lr_pretrain_encoder=1e200",
            "--set", "lr_finetune_encoder=1e200",
            "--set", "lambda=1.0",
        ]))
        assert code == 3
        err = capsys.readouterr().err
        assert "numeric failure at iteration" in err
        assert (out / "trace.csv").exists()
        assert not (out / "state.json").exists()

    def test_rerun_is_byte_identical(self, tmp_path):
        out1, out2 = tmp_path / "a", tmp_path / "b"
        assert cli.main(run_args(out1)) == 0
        assert cli.main(run_args(out2)) == 0
        assert read(out1 / "trace.csv") == read(out2 / "trace.csv")
        assert read(out1 / "state.json") == read(out2 / "state.json")
        assert read(out1 / "summary.json") == read(out2 / "summary.json")

    def test_seed_flag_changes_run(self, tmp_path):
        out1, out2 = tmp_path / "a", tmp_path / "b"
        assert cli.main(run_args(out1, ["--seed", "0"])) == 0
        assert cli.main(run_args(out2, ["--seed", "1"])) == 0
        assert read(out1 / "trace.csv") != read(out2 / "trace.csv")

    def test_out_root_env_used_without_out_flag(self, tmp_path, monkeypatch):
        monkeypatch.setenv(cli.OUT_ROOT_ENV, str(tmp_path / "root"))
        code = cli.main(["run", *TINY_DATA, "--set", "iterations=1"])
        assert code == 0
        runs = list((tmp_path / "root").iterdir())
        assert len(runs) == 1
        assert runs[0].name.startswith("run-")
        assert (runs[0] / "trace.csv").exists()

    def test_resume_continues_from_state(self, tmp_path):
        out1 = tmp_path / "first"
        assert cli.main(run_args(out1)) == 0
        out2 = tmp_path / "second"
        code = cli.main(run_args(out2, [
            "--set", "iterations=8",
            "--set", f"run.resume={out1 / 'state.json'}",
        ]))
        assert code == 0
        state = engine.load_state(out2 / "state.json")
        assert state.iteration == 8
        lines = read(out2 / "trace.csv").strip().splitlines()
        assert len(lines) == 4  # header + iterations 5..7

    def test_summary_reports_recovery_auc(self, tmp_path):
        out = tmp_path / "out"
        assert cli.main(run_args(out)) == 0
        summary = read_json(out / "summary.json")
        assert 0.0 <= summary["recovery_auc_pretrain"] <= 1.0
        assert 0.0 <= summary["test_accuracy"] <= 1.0
        assert summary["iterations"] == 5


class TestVerify:
    def test_default_instance_passes(self, capsys):
        assert cli.main(["verify", "--seed", "0"]) == 0
        out = capsys.readouterr().out
        assert "seed 0" in out
        assert "pretrain" in out

    def test_multiple_seeds_from_config(self, tmp_path, capsys):
        cfg = tmp_path / "cfg.yaml"
        cfg.write_text("verify:\n  seeds: [0, 1]\n")
        assert cli.main(["verify", "--config", str(cfg)]) == 0
        out = capsys.readouterr().out
        assert "seed 0" in out and "seed 1" in out

    def test_lambda_zero_instance_passes(self, capsys):
        cfg_args = ["--set", "verify.lambda=0.0"]
        assert cli.main(["verify", "--seed", "3", *cfg_args]) == 0

    def test_sigmoid_instance_passes(self):
        assert cli.main(["verify", "--seed", "1",
                         "--set", "ignore_mode=sigmoid"]) == 0

    def test_impossible_threshold_exits_1(self, tmp_path):
        code = cli.main(["verify", "--seed", "0",
                         "--set", "verify.threshold=1e-18"])
        assert code == 1

    def test_report_written_with_out(self, tmp_path):
        out = tmp_path / "v"
        assert cli.main(["verify", "--seed", "0", "--out", str(out)]) == 0
        report = read_json(out / "verify.json")
        assert report["passed"] is True
        assert report["reports"][0]["seed"] == 0
        assert (out / "manifest.json").exists()


class TestAblate:
    def test_counting_contract(self, tmp_path):
        out = tmp_path / "out"
        code = cli.main(["ablate", "--out", str(out), *TINY_DATA,
                         "--set", "iterations=4",
                         "--ids", "A1,A5,FULL", "--seeds", "0,1"])
        assert code == 0
        lines = read(out / "results.csv").strip().splitlines()
        assert len(lines) == 7  # header + 3 ids x 2 seeds
        summary = read_json(out / "summary.json")
        assert len(summary["aggregates"]) == 3
        assert summary["any_failed"] is False

    def test_table_printed(self, tmp_path, capsys):
        out = tmp_path / "out"
        cli.main(["ablate", "--out", str(out), *TINY_DATA,
                  "--set", "iterations=2", "--ids", "A1", "--seeds", "0"])
        printed = capsys.readouterr().out
        assert "A1" in printed
        assert "test_acc" in printed

    def test_rerun_byte_identical(self, tmp_path):
        args = [*TINY_DATA, "--set", "iterations=3",
                "--ids", "A1,FULL", "--seeds", "0,1"]
        out1, out2 = tmp_path / "a", tmp_path / "b"
        assert cli.main(["ablate", "--out", str(out1), *args]) == 0
        assert cli.main(["ablate", "--out", str(out2), *args]) == 0
        assert read(out1 / "results.csv") == read(out2 / "results.csv")
        assert read(out1 / "summary.json") == read(out2 / "summary.json")

    def test_unknown_id_exits_2(self, tmp_path):
        code = cli.main(["ablate", "--out", str(tmp_path / "x"), *TINY_DATA,
                         "--ids", "A9", "--seeds", "0"])
        assert code == 2

    def test_threads_flag_same_results(self, tmp_path):
        args = [*TINY_DATA, "--set", "iterations=3",
                "--ids", "A1,FULL", "--seeds", "0,1"]
        out1, out2 = tmp_path / "a", tmp_path / "b"
        assert cli.main(["ablate", "--out", str(out1), *args]) == 0
        assert cli.main(["ablate", "--out", str(out2), *args,
                         "--threads", "4"]) == 0
        assert read(out1 / "results.csv") == read(out2 / "results.csv")


class TestSweep:
    def test_curve_and_argmax_written(self, tmp_path, capsys):
        out = tmp_path / "out"
        code = cli.main(["sweep", "--out", str(out), *TINY_DATA,
                         "--set", "iterations=3", "--param", "lambda",
                         "--grid", "0,0.01,0.1", "--seeds", "0,1"])
        assert code == 0
        lines = read(out / "sweep.csv").strip().splitlines()
        assert len(lines) == 7  # header + 3 values x 2 seeds
        summary = read_json(out / "summary.json")
        assert len(summary["points"]) == 3
        assert summary["argmax_value"] in (0.0, 0.01, 0.1)
        assert "best lambda" in capsys.readouterr().out

    def test_gamma_sweep_via_config(self, tmp_path):
        cfg = tmp_path / "cfg.yaml"
        cfg.write_text(
            "data: {n_pretrain: 10, n_train: 8, n_val: 6, n_test: 8,"
            " corrupt_frac: 0.3}\n"
            "lbi: {iterations: 3}\n"
            "sweep: {param: gamma, grid: [0.0, 0.5, 1.0], seeds: [0]}\n"
        )
        out = tmp_path / "out"
        code = cli.main(["sweep", "--config", str(cfg), "--out", str(out)])
        assert code == 0
        summary = read_json(out / "summary.json")
        assert summary["param"] == "gamma"
        assert [p["value"] for p in summary["points"]] == [0.0, 0.5, 1.0]

    def test_missing_param_exits_2(self, tmp_path):
        code = cli.main(["sweep", "--out", str(tmp_path / "x"), *TINY_DATA,
                         "--grid", "0,1,2"])
        assert code == 2

    def test_short_grid_exits_2(self, tmp_path):
        code = cli.main(["sweep", "--out", str(tmp_path / "x"), *TINY_DATA,
                         "--param", "lambda", "--grid", "0,1"])
        assert code == 2

    def test_rerun_byte_identical(self, tmp_path):
        args = [*TINY_DATA, "--set", "iterations=3", "--param", "lambda",
                "--grid", "0,0.01,0.1", "--seeds", "0"]
        out1, out2 = tmp_path / "a", tmp_path / "b"
        assert cli.main(["sweep", "--out", str(out1), *args]) == 0
        assert cli.main(["sweep", "--out", str(out2), *args]) == 0
        assert read(out1 / "sweep.csv") == read(out2 / "sweep.csv")


class TestGenDataAndEval:
    def test_gen_data_round_trips(self, tmp_path):
        out = tmp_path / "out"
        code = cli.main(["gen-data", "--out", str(out), *TINY_DATA,
                         "--set", "data.seed=9"])
        assert code == 0
        bundle = datasets.load_csv(out / "data.csv")
        assert len(bundle.pretrain) == 10
        assert sum(ex.corrupted for ex in bundle.pretrain) == 3
        manifest = read_json(out / "manifest.json")
        assert manifest["data"]["spec"]["seed"] == 9

    def test_run_on_generated_csv(self, tmp_path):
        gen_out = tmp_path / "data"
        assert cli.main(["gen-data", "--out", str(gen_out), *TINY_DATA]) == 0
        run_out = tmp_path / "run"
        code = cli.main(["run", "--out", str(run_out),
                         "--set", "data.kind=csv",
                         "--set", f"data.path={gen_out / 'data.csv'}",
                         "--set", "iterations=3"])
        assert code == 0
        manifest = read_json(run_out / "manifest.json")
        assert manifest["data"]["kind"] == "csv"
        assert "sha256" in manifest["data"]

    def test_eval_matches_run_summary(self, tmp_path):
        run_out = tmp_path / "run"
        assert cli.main(run_args(run_out)) == 0
        eval_out = tmp_path / "eval"
        code = cli.main(["eval", "--out", str(eval_out), *TINY_DATA,
                         "--state", str(run_out / "state.json")])
        assert code == 0
        report = read_json(eval_out / "eval.json")
        summary = read_json(run_out / "summary.json")
        assert report["test_accuracy"] == summary["test_accuracy"]
        assert report["val_accuracy"] == summary["val_accuracy"]
        assert report["iteration"] == 5

    def test_eval_without_state_exits_2(self, tmp_path):
        assert cli.main(["eval", *TINY_DATA]) == 2

    def test_eval_missing_state_file_exits_2(self, tmp_path, capsys):
        code = cli.main(["eval", *TINY_DATA,
                         "--state", str(tmp_path / "nope.json")])
        assert code == 2
        assert "state file not found" in capsys.readouterr().err

    def test_data_path_implies_csv(self, tmp_path):
        gen_out = tmp_path / "data"
        assert cli.main(["gen-data", "--out", str(gen_out), *TINY_DATA]) == 0
        run_out = tmp_path / "run"
        code = cli.main(["run", "--out", str(run_out),
                         "--set", f"data.path={gen_out / 'data.csv'}",
                         "--set", "iterations=3"])
        assert code == 0
        assert read_json(run_out / "manifest.json")["data"]["kind"] == "csv"


class TestOverrideParsing:
    def test_missing_equals_rejected(self):
        assert cli.main(["run", "--set", "lambda"]) == 2

    def test_batch_size_none_round_trips(self, tmp_path):
        out = tmp_path / "out"
        code = cli.main(run_args(out, ["--set", "batch_size=none"]))
        assert code == 0
        assert read_json(out / "manifest.json")["config"]["batch_size"] is None

    def test_batch_size_int(self, tmp_path):
        out = tmp_path / "out"
        code = cli.main(run_args(out, ["--set", "batch_size=4"]))
        assert code == 0
        assert read_json(out / "manifest.json")["config"]["batch_size"] == 4

    def test_bool_value(self, tmp_path):
        out = tmp_path / "out"
        code = cli.main(run_args(out, ["--set", "step_decay=true"]))
        assert code == 0
        assert read_json(out / "manifest.json")["config"]["step_decay"] is True
