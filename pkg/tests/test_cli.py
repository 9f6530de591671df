import json
import subprocess
import sys

import numpy as np
import pytest

from eclip.cli import main
from eclip.config import config_from_dict, load_config
from eclip.encoders import load_checkpoint
from eclip.errors import ConfigError
from eclip.preprocess import ImageBuffer, ProductRecord, write_manifest, write_ppm

SMALL_RUN = """
[run]
out_dir = "{out}"
[synth]
n_classes = 8
n_catalogs_per_class = 4
n_duplicates_per_catalog = 2
[train]
total_steps = 8
B0 = 8
Bmax = 16
micro_batch = 4
lr = {lr}
eval_interval = 2
text_hidden = [8]
image_hidden = [8]
embed_dim = 4
activation = "tanh"
[eval]
pca_dim = 4
probe_epochs = 5
adult_prefixes = ["L0g01"]
"""


def write_cfg(tmp_path, lr=1e-3, out=None):
    path = tmp_path / "run.toml"
    path.write_text(SMALL_RUN.format(out=out or (tmp_path / "out"), lr=lr))
    return str(path)


class TestConfig:
    def test_defaults(self):
        cfg = load_config(environ={})
        assert cfg.run.seed == 0 and cfg.train.tau_init == 0.07 and cfg.train.B0 == 32

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match=r"train\.learning_rate"):
            config_from_dict({"train": {"learning_rate": 1.0}})

    def test_unknown_section(self):
        with pytest.raises(ConfigError, match="model"):
            config_from_dict({"model": {}})

    def test_type_error_names_field(self):
        with pytest.raises(ConfigError, match=r"train\.B0"):
            config_from_dict({"train": {"B0": "big"}})

    @pytest.mark.parametrize(
        "doc,field",
        [
            ({"train": {"Bmax": 8}}, "train.Bmax"),
            ({"train": {"micro_batch": 64}}, "train.micro_batch"),
            ({"train": {"sampling": "random"}}, "train.sampling"),
            ({"eval": {"tasks": ["vqa"]}}, "eval.tasks"),
            ({"synth": {"noise_sigma": -0.1}}, "synth.noise_sigma"),
        ],
    )
    def test_validation(self, doc, field):
        with pytest.raises(ConfigError) as exc:
            config_from_dict(doc)
        assert exc.value.field == field

    def test_precedence(self, tmp_path):
        path = write_cfg(tmp_path)
        env = {"ECLIP_SEED": "5", "ECLIP_OUT_DIR": "/env/out"}
        cfg = load_config(path, environ=env)
        assert cfg.run.seed == 5 and cfg.run.out_dir == "/env/out"
        cfg = load_config(path, seed=9, out_dir="/flag/out", environ=env)
        assert cfg.run.seed == 9 and cfg.run.out_dir == "/flag/out"

    def test_bad_env_seed(self):
        with pytest.raises(ConfigError, match="ECLIP_SEED"):
            load_config(environ={"ECLIP_SEED": "x"})

    def test_train_config_mapping(self):
        cfg = config_from_dict({"train": {"category_level": 1, "lr": 0.5}, "run": {"seed": 4}})
        tc = cfg.train_config(10, 20)
        assert tc.category_level == 1 and tc.lr == 0.5 and tc.seed == 4
        assert tc.text_spec.input_dim == 10 and tc.image_spec.input_dim == 20


class TestCli:
    def test_pipeline(self, tmp_path, capsys):
        cfg = write_cfg(tmp_path)
        for cmd in ("synth-gen", "preprocess", "train", "eval"):
            assert main([cmd, "--config", cfg]) == 0
            assert (tmp_path / "out" / cmd.split("-")[0] / "resolved_config.json").exists()
        report = json.loads((tmp_path / "out" / "eval" / "eval_report.json").read_text())
        assert set(report) == {"zero_shot", "matching", "clustering", "attribute", "category", "adult"}
        metrics = (tmp_path / "out" / "train" / "metrics.jsonl").read_text().splitlines()
        assert len(metrics) == 4

    def test_zero_lr_checkpoint_equals_init(self, tmp_path):
        cfg = write_cfg(tmp_path, lr=0.0)
        for cmd in ("synth-gen", "preprocess", "train"):
            assert main([cmd, "--config", cfg]) == 0
        init = load_checkpoint(tmp_path / "out" / "train" / "init.json")
        final = load_checkpoint(tmp_path / "out" / "train" / "model.json")
        assert final.params.equals(init.params)

    def test_deterministic_metrics(self, tmp_path):
        logs = []
        for name in ("a", "b"):
            cfg = write_cfg(tmp_path, out=tmp_path / name)
            for cmd in ("synth-gen", "preprocess", "train"):
                assert main([cmd, "--config", cfg, "--deterministic"]) == 0
            logs.append((tmp_path / name / "train" / "metrics.jsonl").read_bytes())
        assert logs[0] == logs[1]

    def test_preprocess_reports_duplicate_title(self, tmp_path):
        src = tmp_path / "data"
        (src / "img").mkdir(parents=True)
        rng = np.random.default_rng(0)
        records = []
        for i, title in enumerate(["blue denim jacket", "red wool scarf", "blue denim jacket"]):
            write_ppm(src / "img" / f"{i}.ppm", ImageBuffer(rng.integers(0, 256, (16, 16, 3), dtype=np.uint8)))
            records.append(ProductRecord(f"p{i}", title, f"c{i}", ["a"], f"img/{i}.ppm", registration_time=f"2022-01-0{i + 1}"))
        write_manifest(src / "manifest.jsonl", records)
        cfg = tmp_path / "p.toml"
        cfg.write_text(f'[run]\nout_dir = "{tmp_path / "out"}"\n[preprocess]\nmanifest = "{src / "manifest.jsonl"}"\n')
        assert main(["preprocess", "--config", str(cfg)]) == 0
        report = json.loads((tmp_path / "out" / "preprocess" / "dedup_report.json").read_text())
        assert report["removed"]["dup-title"] == 1 and report["removed_ids"] == {"p2": "dup-title"}
        # cleaned manifest resolves images from its own directory
        cleaned = [json.loads(l) for l in (tmp_path / "out" / "preprocess" / "cleaned_manifest.jsonl").read_text().splitlines()]
        assert all((tmp_path / "out" / "preprocess" / r["image_path"]).exists() for r in cleaned)

    def test_verify(self, capsys):
        assert main(["verify"]) == 0
        out = capsys.readouterr().out
        assert out.count("[PASS]") == 10 and "[FAIL]" not in out

    def test_config_error_exit_code(self, tmp_path, capsys):
        bad = tmp_path / "bad.toml"
        bad.write_text("[train]\nB0 = 0\n")
        assert main(["train", "--config", str(bad)]) == 2
        assert "train.B0" in capsys.readouterr().err

    def test_missing_config_file(self, tmp_path):
        assert main(["train", "--config", str(tmp_path / "none.toml")]) == 2

    def test_runtime_error_exit_code(self, tmp_path, capsys):
        assert main(["train", "--out", str(tmp_path / "empty")]) == 1
        assert "error" in capsys.readouterr().err

    def test_console_script(self):
        proc = subprocess.run([sys.executable, "-m", "eclip.cli", "--help"], capture_output=True, text=True)
        assert proc.returncode == 0 and "synth-gen" in proc.stdout
