from pathlib import Path

import numpy as np
import pytest

from pituning import pipeline
from pituning.cli import main, parse_overrides
from pituning.config import ExperimentConfig, config_to_text, load_config, parse_config_text
from pituning.pipeline import (
    ReportError,
    StageFailed,
    missing_artifacts,
    read_plans,
    read_results,
    report,
    run_pipeline,
    sweep,
)

TINY = {
    "data.n_users": "16", "data.events_per_user": "20", "data.device_users": "4", "data.device_events": "40",
    "data.window": "8", "model.embed_dim": "4", "model.n_heads": "2", "population.max_epochs": "1",
    "distill.max_epochs": "1", "finetune.max_epochs": "1", "unlearn.steps": "2",
}


def tiny(tmp_path, name="run", **extra):
    cfg = load_config(overrides={**TINY, **extra})
    cfg.run.out_dir = str(tmp_path / name)
    return cfg


class TestConfig:
    def test_text_roundtrip(self):
        cfg = ExperimentConfig()
        cfg.eval.ks = (1, 4)
        cfg.finetune.patience = 2
        cfg.run.unlearning = False
        assert parse_config_text(config_to_text(cfg)) == cfg

    def test_comments_and_errors(self):
        cfg = parse_config_text("# desk run\nrun.seed = 7  # trailing\n\ndata.noise_rate=0.2\n")
        assert cfg.run.seed == 7 and cfg.data.noise_rate == 0.2
        with pytest.raises(ValueError, match="line 1"):
            parse_config_text("run.nope = 1\n")
        with pytest.raises(ValueError, match="line 2"):
            parse_config_text("run.seed = 1\nrun.unlearning = maybe\n")

    def test_file_then_overrides(self, tmp_path):
        p = tmp_path / "c.txt"
        p.write_text("run.seed = 3\ndata.n_users = 10\n")
        cfg = load_config(p, [("data.n_users", "12")])
        assert (cfg.run.seed, cfg.data.n_users) == (3, 12)

    def test_validation(self, tmp_path):
        with pytest.raises(ValueError):
            load_config(overrides={"data.device_split": "0.5,0.1,0.1"}).validate()
        with pytest.raises(FileNotFoundError):
            load_config(overrides={"data.path": str(tmp_path / "x"), "data.device_path": "y"}).validate()

    def test_stage_seeds(self):
        cfg = load_config(overrides={"run.seed": "5", "population.seed": "2"})
        assert cfg.stage_seed("population") == 7 and cfg.stage_seed("distill") == 5

    def test_cli_override_parsing(self):
        assert parse_overrides(["--run.seed", "3", "--data.window=10"]) == [("run.seed", "3"), ("data.window", "10")]
        with pytest.raises(SystemExit):
            parse_overrides(["--nodot", "1"])


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    cfg = tiny(tmp_path_factory.mktemp("pipe"))
    return cfg, run_pipeline(cfg)


class TestPipeline:
    def test_three_rows_and_artifacts(self, tiny_run):
        cfg, res = tiny_run
        assert list(res.rows) == ["student", "finetune_only", "pituning"]
        assert missing_artifacts(res.root) == []
        manifest = (res.root / "manifest.txt").read_text()
        for name in ("config.txt", "seeds.txt", "teacher.ckpt", "student.ckpt", "p_out.txt", "plans.txt",
                     "metrics_ledger.tsv", "results.tsv", "users/0/plan.txt", "users/0/metrics.tsv"):
            assert f"\n{name}\t" in "\n" + manifest

    def test_aggregate_is_mean_of_users(self, tiny_run):
        _, res = tiny_run
        lines = (res.root / "metrics_ledger.tsv").read_text().splitlines()
        cols = lines[0].split("\t")[2:]
        per_arm = {}
        for line in lines[1:]:
            if line.startswith("#"):
                continue
            uid, arm, *vals = line.split("\t")
            per_arm.setdefault(arm, []).append([float(v) for v in vals])
        rows = read_results(res.root / "results.tsv")
        for arm, vals in per_arm.items():
            mean = np.mean(vals, axis=0)
            for c, m in zip(cols, mean):
                assert abs(rows[arm][c] - m) < 1e-9

    def test_full_equals_finetune_when_plan_empty(self, tiny_run):
        _, res = tiny_run
        plans = read_plans(res.root / "plans.txt")
        for uid, plan in plans.items():
            table = (res.root / "users" / str(uid) / "metrics.tsv").read_text().splitlines()
            rows = {l.split("\t")[0]: l.split("\t")[1:] for l in table[1:]}
            if plan.is_empty:
                assert rows["pituning"] == rows["finetune_only"]
                assert not (res.root / "users" / str(uid) / "unlearn.txt").exists()

    def test_report_idempotent(self, tiny_run):
        _, res = tiny_run
        a, b = report(res.root), report(res.root)
        assert a == b
        for arm in ("student", "finetune_only", "pituning"):
            assert f"\n{arm} " in a
        assert "users with non-empty forget set" in a

    def test_report_lists_missing(self, tiny_run, tmp_path):
        with pytest.raises(ReportError, match="results.tsv"):
            report(tmp_path)
        _, res = tiny_run
        partial = tmp_path / "partial"
        partial.mkdir()
        (partial / "results.tsv").write_bytes((res.root / "results.tsv").read_bytes())
        text = report(partial)
        assert "missing artifacts:" in text and "teacher.ckpt" in text

    def test_forced_skip_of_unlearning(self, tmp_path):
        cfg = tiny(tmp_path, **{"unlearn.threshold": "0", "run.p_in_source": "population"})
        res = run_pipeline(cfg)
        assert all(p.is_empty for p in read_plans(res.root / "plans.txt").values())
        assert res.rows["pituning"] == res.rows["finetune_only"]
        assert (res.root / "unlearn_ledger.tsv").read_text().count("\n") == 1

    def test_worker_pool_matches_sequential(self, tiny_run, tmp_path):
        _, res = tiny_run
        pooled = run_pipeline(tiny(tmp_path, **{"run.workers": "2"}))
        for name in ("results.tsv", "metrics_ledger.tsv", "unlearn_ledger.tsv"):
            assert (pooled.root / name).read_text() == (res.root / name).read_text()

    def test_stage_failure_names_stage(self, tmp_path, monkeypatch):
        def boom(*args):
            raise RuntimeError("loss diverged")

        monkeypatch.setattr(pipeline, "stage_population", boom)
        cfg = tiny(tmp_path)
        with pytest.raises(StageFailed) as err:
            run_pipeline(cfg)
        assert err.value.stage == "train-population"
        assert (Path(cfg.run.out_dir) / "failed_stage.txt").read_text().startswith("train-population")
        assert (Path(cfg.run.out_dir) / "data" / "population.csv").exists()


def test_sweep_single_value_equals_plain_run(tmp_path, tiny_run):
    cfg, res = tiny_run
    table = sweep(cfg, "device_data_size", [1.0], tmp_path / "sw")
    assert len(table) == 1
    assert table[0][1] == res.rows
    assert (tmp_path / "sw" / "sweep.tsv").exists() and (tmp_path / "sw" / "sweep.png").exists()
    with pytest.raises(ValueError):
        sweep(cfg, "depth", [1], tmp_path / "x")
    with pytest.raises(ValueError):
        sweep(cfg, "sequence_length", [], tmp_path / "x")


class TestCli:
    def args(self, out, *extra):
        flat = [x for k, v in TINY.items() for x in (f"--{k}", v)]
        return [*extra, "--out", str(out), *flat]

    def test_stagewise_equals_run_all(self, tmp_path, capsys):
        out = tmp_path / "stages"
        for cmd in ("generate-data", "train-population", "distill", "plan-forget", "tune-device"):
            assert main(self.args(out, cmd)) == 0
        assert main(self.args(tmp_path / "all", "run-all")) == 0
        assert read_results(out / "results.tsv") == read_results(tmp_path / "all" / "results.tsv")
        assert main(self.args(out, "evaluate")) == 0
        assert "prec_w" in capsys.readouterr().out
        assert main(self.args(out, "export-attention")) == 0
        assert (out / "attention.tsv").read_text().startswith("position\t")
        assert main(self.args(out, "report")) == 0
        assert (out / "report.txt").exists()

    def test_failure_exit_code(self, tmp_path, capsys):
        assert main(self.args(tmp_path / "empty", "distill")) == 1
        assert "distill" in capsys.readouterr().err
        assert main(["report", "--out", str(tmp_path / "nothing")]) == 1
