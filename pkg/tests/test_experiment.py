import csv
import json

import pytest

from tshap import experiment
from tshap.cli import EXIT_CONFIG, EXIT_FAILURE, EXIT_OK, EXIT_TRAINING, build_parser, main
from tshap.errors import ConfigError
from tshap.smoothing import SmoothingConfig

TINY = """\
seed: 2
k: 2
generator: {n_per_class: 3, n_subjects: 2, noise_std: 0.02, raw_length_range: [20, 26]}
model: {h: 6, T: 12, epochs: 2}
cnn: {epochs: 2, channels: 4}
attribution: {per_class: 1}
metrics: {latency_runs: 1, latency_warmup: 0}
sweep_w: [1, 2]
"""


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.yaml"
    path.write_text(TINY)
    return path


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    config = root / "tiny.yaml"
    config.write_text(TINY)
    out = root / "out"
    for cmd in ("generate", "train", "explain", "evaluate", "sweep-w", "ablate", "report"):
        assert main([cmd, "-c", str(config), "--output-dir", str(out)]) == EXIT_OK, cmd
    return out


class TestConfig:
    def test_defaults(self):
        cfg = experiment.load_config()
        assert (cfg.k, cfg.model.h, cfg.model.T, cfg.model.epochs) == (5, 128, 100, 30)
        assert cfg.attribution.methods == ["shap", "saliency", "gradcam"]
        assert [c.tag for c in cfg.smoothing] == ["tshap[w=2]", "tshap[ewma,alpha=0.5]"]

    def test_file_then_overrides(self, tiny_config):
        cfg = experiment.load_config(tiny_config, ["model.h=9", "generator.noise_std=0.01"])
        assert cfg.model.h == 9 and cfg.generator.noise_std == 0.01 and cfg.model.T == 12 and cfg.k == 2

    def test_exponent_without_dot(self):
        assert experiment.load_config(overrides=["model.learning_rate=1e-3"]).model.learning_rate == 0.001

    def test_smoothing_list(self):
        cfg = experiment.config_from_dict({"smoothing": [{"kind": "ewma", "alpha": 0.3}]})
        assert cfg.smoothing == [SmoothingConfig("ewma", alpha=0.3)]

    def test_fold_seed(self):
        cfg = experiment.load_config(overrides=["model.seed=10"])
        assert cfg.model_config(3).seed == 13 and cfg.model_config(0, "cnn").kind == "cnn"

    def test_digest_tracks_content(self):
        a = experiment.load_config()
        assert a.digest() == experiment.load_config().digest()
        assert a.digest() != experiment.load_config(overrides=["seed=1"]).digest()

    @pytest.mark.parametrize("overrides", [
        ["model.hidden=3"], ["bogus=1"], ["model.h=abc"], ["model.binary_mode=1"], ["k=1"],
        ["attribution.methods=[lime]"], ["attribution.granularity=per_joint"],
        ["attribution.granularity=per_feature"], ["attribution.per_class=0"],
        ["metrics.fractions=[0.5, 0.1]"], ["sweep_w=[]"], ["generator.noise_std=-1"],
        ["model.h=0"], ["generator.n_subjects=3"], ["model=5"], ["smoothing=[{kind: median}]"],
        ["no_equals_sign"],
    ])
    def test_rejects(self, overrides):
        with pytest.raises(ConfigError):
            experiment.load_config(overrides=overrides)

    def test_unreadable_file(self, tmp_path):
        with pytest.raises(ConfigError):
            experiment.load_config(tmp_path / "missing.yaml")

    def test_malformed_yaml(self, tmp_path):
        path = tmp_path / "bad.yaml"
        path.write_text("model: {h: [\n")
        with pytest.raises(ConfigError):
            experiment.load_config(path)

    def test_output_root_env(self, monkeypatch, tmp_path):
        monkeypatch.setenv(experiment.OUTPUT_ROOT_ENV, str(tmp_path))
        assert experiment.load_config(overrides=["output_dir=x"]).resolved_output() == tmp_path / "x"
        absolute = tmp_path / "abs"
        assert experiment.load_config(overrides=[f"output_dir={absolute}"]).resolved_output() == absolute


class TestFileHelpers:
    def test_atomic_write_leaves_no_temp(self, tmp_path):
        experiment.write_json(tmp_path / "a" / "x.json", {"b": 1})
        assert [p.name for p in (tmp_path / "a").iterdir()] == ["x.json"]

    def test_failed_write_keeps_old_file(self, tmp_path):
        target = tmp_path / "x.txt"
        target.write_text("old")
        with pytest.raises(RuntimeError):
            with experiment.atomic_path(target) as tmp:
                tmp.write_text("partial")
                raise RuntimeError
        assert target.read_text() == "old" and len(list(tmp_path.iterdir())) == 1

    def test_method_file_tag(self):
        assert experiment.method_file_tag("shap|tshap[w=2]") == "shap_tshap_w_2"


class TestCli:
    def test_invalid_config_exits_2_and_writes_nothing(self, tmp_path, capsys):
        out = tmp_path / "out"
        assert main(["generate", "--set", "model.h=-4", "--output-dir", str(out)]) == EXIT_CONFIG
        assert not out.exists()
        assert "config error" in capsys.readouterr().err

    def test_missing_inputs_exit_1(self, tmp_path, capsys):
        assert main(["train", "--set", "k=2", "--output-dir", str(tmp_path)]) == EXIT_FAILURE
        assert "run `generate` first" in capsys.readouterr().err

    def test_training_failure_exit_3(self, tiny_config, tmp_path, capsys):
        out = str(tmp_path / "out")
        assert main(["generate", "-c", str(tiny_config), "--output-dir", out]) == EXIT_OK
        code = main(["train", "-c", str(tiny_config), "--output-dir", out, "--set", "model.learning_rate=1e308"])
        assert code == EXIT_TRAINING
        assert "training failed" in capsys.readouterr().err

    def test_unknown_command(self):
        with pytest.raises(SystemExit):
            build_parser().parse_args(["fly"])

    def test_parser_lists(self):
        args = build_parser().parse_args(["explain", "--method", "shap", "--folds", "0,2"])
        assert args.method == ["shap"] and args.folds == [0, 2]

    def test_env_output_root(self, tiny_config, tmp_path, monkeypatch, capsys):
        monkeypatch.setenv(experiment.OUTPUT_ROOT_ENV, str(tmp_path))
        assert main(["generate", "-c", str(tiny_config), "--set", "output_dir=rel"]) == EXIT_OK
        assert (tmp_path / "rel" / "data" / "dataset.csv").exists()


class TestPipeline:
    def test_stage_outputs(self, run_dir):
        expected = [
            "data/dataset.csv", "models/fold0_lstm.json", "models/fold1_cnn.json", "models/history.csv",
            "models/train_metrics.csv", "models/folds.json", "attributions/shap.csv", "attributions/gradcam.csv",
            "eval/report.csv", "eval/summary.json", "eval/fig8_per_joint.csv", "eval/latency.json",
            "eval/fig7_latency_aup.json", "sweep/table5.csv", "ablate/table6.csv", "report/fig7_latency_aup.svg",
        ]
        for rel in expected:
            assert (run_dir / rel).exists(), rel

    def test_every_stage_has_manifest(self, run_dir):
        for sub in ("data", "models", "attributions", "eval", "sweep", "ablate", "report"):
            man = json.loads((run_dir / sub / "manifest.json").read_text())
            assert man["config_sha256"] and man["stage"] and "seeds" in man

    def test_report_cells(self, run_dir):
        with open(run_dir / "eval" / "report.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        cells = {(r["method"], r["smoothing"]) for r in rows}
        assert len(cells) == 3 * 3  # three methods, raw plus two smoothing settings
        assert {r["metric"] for r in rows} == {"aup", "tv", "correct"}

    def test_sweep_accuracy_constant(self, run_dir):
        with open(run_dir / "sweep" / "table5.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert [r["w"] for r in rows] == ["1", "2"]
        assert len({r["accuracy_mean"] for r in rows}) == 1

    def test_ablation_rows(self, run_dir):
        with open(run_dir / "ablate" / "table6.csv", newline="") as fh:
            methods = [r["method"] for r in csv.DictReader(fh)]
        assert methods[0] == "raw" and any(m.startswith("uniform") for m in methods) and \
            any(m.startswith("ewma") for m in methods)

    def test_svgs_are_wellformed(self, run_dir):
        import xml.etree.ElementTree as ET

        svgs = list((run_dir / "report").glob("*.svg"))
        assert any(p.name.startswith("fig6_heatmap") for p in svgs)
        for p in svgs:
            assert ET.parse(p).getroot().tag.endswith("svg")

    def test_explain_subset(self, run_dir, capsys):
        assert main(["explain", "-c", str(run_dir.parent / "tiny.yaml"), "--output-dir", str(run_dir),
                     "--method", "saliency", "--folds", "1"]) == EXIT_OK
        with open(run_dir / "attributions" / "saliency.csv", newline="") as fh:
            assert sum(1 for _ in fh) > 1

    def test_report_without_evaluate(self, tmp_path, tiny_config):
        assert main(["report", "-c", str(tiny_config), "--output-dir", str(tmp_path)]) == EXIT_FAILURE
