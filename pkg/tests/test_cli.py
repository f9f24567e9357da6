import io
import os
import subprocess
import sys

import numpy as np
import pytest

from moefix import cli
from moefix import training as tr
from moefix.cli import ConfigError, main, parse_config_file, resolve_config


TINY = """
# tiny end-to-end settings
tasks = asr,ocr,typo
samples_per_task = 10
n_best = 2
intensity = 0.2
pool_size = 8
d_model = 8
n_layers = 1
n_heads = 2
d_ff = 8
n_experts = 2
top_k = 2
max_seq_len = 128
epochs = 2
batch_size_tokens = 256
learning_rate = 2e-3
seed = 1
"""


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY)
    return str(path)


def run_cli(*argv):
    return main(list(argv))


class TestConfig:
    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("nonsense_key = 3\n")
        with pytest.raises(ConfigError, match="unknown config key"):
            parse_config_file(str(path))

    def test_bad_value_reports_line(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("# comment\nepochs = many\n")
        with pytest.raises(ConfigError, match=":2"):
            parse_config_file(str(path))

    def test_missing_equals_rejected(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("epochs 3\n")
        with pytest.raises(ConfigError, match="key = value"):
            parse_config_file(str(path))

    def test_full_defaulting(self):
        args = cli.build_parser().parse_args(["gen-data", "--out", "x"])
        cfg = resolve_config(args)
        assert cfg.d_model == 128 and cfg.epochs == 3 and cfg.task_names == ["asr", "ocr", "typo"]

    def test_cli_seed_override(self, tiny_config):
        args = cli.build_parser().parse_args(["--config", tiny_config, "--seed", "99",
                                              "gen-data", "--out", "x"])
        assert resolve_config(args).seed == 99

    def test_bad_exit_code_on_unknown_key(self, tmp_path, capsys):
        path = tmp_path / "bad.cfg"
        path.write_text("bogus = 1\n")
        code = run_cli("--config", str(path), "gen-data", "--out", str(tmp_path / "d.jsonl"))
        assert code == 2
        assert "unknown config key" in capsys.readouterr().err

    def test_thread_cap_env(self, monkeypatch):
        monkeypatch.setenv("NEKO_THREADS", "1")
        monkeypatch.delenv("OPENBLAS_NUM_THREADS", raising=False)
        cli._cap_threads()
        assert os.environ["OPENBLAS_NUM_THREADS"] == "1"


class TestGenData:
    def test_writes_all_tasks_and_counts(self, tiny_config, tmp_path, capsys):
        out = tmp_path / "data.jsonl"
        assert run_cli("--config", tiny_config, "gen-data", "--out", str(out)) == 0
        text = capsys.readouterr().out
        for name in ("asr", "ocr", "typo"):
            assert f"{name}: 10 samples" in text
        assert len(out.read_text().splitlines()) == 30

    def test_reproducible_files(self, tiny_config, tmp_path):
        a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        run_cli("--config", tiny_config, "gen-data", "--out", str(a))
        run_cli("--config", tiny_config, "gen-data", "--out", str(b))
        assert a.read_bytes() == b.read_bytes()

    def test_unwritable_path(self, tiny_config, tmp_path, capsys):
        assert run_cli("--config", tiny_config, "gen-data",
                       "--out", str(tmp_path / "no" / "dir.jsonl")) == 2


@pytest.fixture
def trained_run(tiny_config, tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    data = root / "data.jsonl"
    out = root / "out"
    run_cli("--config", tiny_config, "gen-data", "--out", str(data))
    code = run_cli("--config", tiny_config, "train", "--data", str(data),
                   "--out-dir", str(out))
    assert code == 0
    return tiny_config, data, out


class TestTrain:
    def test_run_artifacts(self, trained_run):
        tiny_config, data, out = trained_run
        assert (out / "model.ck").exists()
        lines = (out / "metrics.csv").read_text().splitlines()
        assert lines[0].startswith("step,loss,lr,grad_norm,tokens,expert_load_0")
        ckpt = tr.load_checkpoint(out / "model.ck")
        assert len(lines) - 1 == ckpt.total_steps
        resolved = (out / "config.resolved").read_text()
        assert "d_model = 8" in resolved and "learning_rate = 0.002" in resolved

    def test_smoke_loss_improves_majority_of_seeds(self, tiny_config, tmp_path):
        data = tmp_path / "data.jsonl"
        run_cli("--config", tiny_config, "gen-data", "--out", str(data))
        wins = 0
        for seed in range(20):
            out = tmp_path / f"out{seed}"
            assert run_cli("--config", tiny_config, "--seed", str(seed), "train",
                           "--data", str(data), "--out-dir", str(out)) == 0
            rows = (out / "metrics.csv").read_text().splitlines()[1:]
            first, last = float(rows[0].split(",")[1]), float(rows[-1].split(",")[1])
            wins += last < first
        assert wins >= 19

    def test_interrupt_and_resume_bitwise(self, tiny_config, tmp_path):
        data = tmp_path / "data.jsonl"
        run_cli("--config", tiny_config, "gen-data", "--out", str(data))

        cfg_interval = tmp_path / "cfg_interval.cfg"
        cfg_interval.write_text(TINY + "checkpoint_interval = 3\n")
        full_dir = tmp_path / "full"
        assert run_cli("--config", str(cfg_interval), "train", "--data", str(data),
                       "--out-dir", str(full_dir)) == 0
        mid = full_dir / "checkpoint_000003.ck"
        assert mid.exists()

        resumed_dir = tmp_path / "resumed"
        assert run_cli("--config", str(cfg_interval), "train", "--data", str(data),
                       "--out-dir", str(resumed_dir), "--resume", str(mid)) == 0
        assert (resumed_dir / "model.ck").read_bytes() == (full_dir / "model.ck").read_bytes()

    def test_malformed_dataset_reports_line(self, tiny_config, tmp_path, capsys):
        data = tmp_path / "broken.jsonl"
        data.write_text('{"task": "asr", "hypotheses": ["a"], "target": "a", "seed": 1}\n{oops\n')
        assert run_cli("--config", tiny_config, "train", "--data", str(data),
                       "--out-dir", str(tmp_path / "o")) == 2
        assert "line 2" in capsys.readouterr().err

    def test_numerical_failure_exit_code(self, tiny_config, tmp_path, monkeypatch, capsys):
        data = tmp_path / "data.jsonl"
        run_cli("--config", tiny_config, "gen-data", "--out", str(data))

        def explode(*a, **k):
            raise tr.NumericalError("non-finite loss at step 0; batch (...)")

        monkeypatch.setattr(tr, "train", explode)
        code = run_cli("--config", tiny_config, "train", "--data", str(data),
                       "--out-dir", str(tmp_path / "o"))
        assert code == 3
        assert "numerical failure" in capsys.readouterr().err


class TestEvalCorrectStats:
    def test_eval_runs_and_writes_csv(self, trained_run, tmp_path, capsys):
        tiny_config, data, out = trained_run
        csv = tmp_path / "report.csv"
        code = run_cli("eval", "--checkpoint", str(out / "model.ck"), "--data", str(data),
                       "--csv", str(csv))
        assert code == 0
        assert "overall" in capsys.readouterr().out
        assert csv.read_text().startswith("task,n_samples,baseline_wer")

    def test_correct_reads_stdin(self, trained_run, monkeypatch, capsys):
        tiny_config, data, out = trained_run
        monkeypatch.setattr(sys, "stdin", io.StringIO("the cat sleeps\nthe cat sleeps\n"))
        code = run_cli("correct", "--checkpoint", str(out / "model.ck"), "--task", "asr")
        assert code == 0
        capsys.readouterr()

    def test_correct_unknown_task_exits_2(self, trained_run, monkeypatch, capsys):
        tiny_config, data, out = trained_run
        monkeypatch.setattr(sys, "stdin", io.StringIO("text\n"))
        code = run_cli("correct", "--checkpoint", str(out / "model.ck"), "--task", "mt")
        assert code == 2
        assert "unknown task" in capsys.readouterr().err

    def test_route_stats_fractions_sum_to_two(self, trained_run, capsys):
        tiny_config, data, out = trained_run
        code = run_cli("route-stats", "--checkpoint", str(out / "model.ck"), "--data", str(data))
        assert code == 0
        lines = capsys.readouterr().out.splitlines()
        mapping = [l for l in lines if l.startswith("# task")]
        assert len(mapping) == 3
        rows = [l.split(",") for l in lines if l and not l.startswith("#") and not l.startswith("task,")]
        per_task = {}
        for task, expert, fraction, mean_w in rows:
            per_task[task] = per_task.get(task, 0.0) + float(fraction)
        assert per_task and all(abs(v - 2.0) < 1e-6 for v in per_task.values())

    def test_incompatible_checkpoint_version_exits_2(self, tmp_path, capsys):
        bad = tmp_path / "bad.ck"
        bad.write_bytes(b"NEKO" + (42).to_bytes(4, "little") + b"\x00" * 16)
        code = run_cli("eval", "--checkpoint", str(bad), "--data", str(tmp_path / "x.jsonl"))
        assert code == 2
        assert "version" in capsys.readouterr().err


def test_module_entrypoint_help():
    proc = subprocess.run([sys.executable, "-m", "moefix.cli", "--help"],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    assert "gen-data" in proc.stdout
