import hashlib
import os
from pathlib import Path

import numpy as np
import pytest

from leaflite.cli import main
from leaflite.imageproc import save_image
from leaflite.model import build_mobilenet_v2, random_weight_store
from leaflite.weights_io import write_weights

from conftest import make_class_image


def tree_hash(root: Path) -> str:
    digest = hashlib.sha256()
    for f in sorted(root.rglob("*")):
        if f.is_file():
            digest.update(f.name.encode())
            digest.update(f.read_bytes())
    return digest.hexdigest()


@pytest.fixture(scope="module")
def mini_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("minicorpus")
    rng = np.random.default_rng(1)
    for class_id, name in enumerate(["a_spot", "b_mold", "c_clean"]):
        d = root / name
        d.mkdir()
        for i in range(7):
            save_image(make_class_image(rng, class_id, side=48), d / f"{i}.png")
    return root


@pytest.fixture(scope="module")
def backbone_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("weights") / "backbone.lwts"
    write_weights(random_weight_store(build_mobilenet_v2(), 3), path)
    return path


class TestEnhance:
    def test_three_image_corpus(self, tmp_path):
        src = tmp_path / "src"
        rng = np.random.default_rng(2)
        (src / "only").mkdir(parents=True)
        for i in range(3):
            save_image(rng.integers(0, 256, (32, 32, 3), dtype=np.uint8),
                       src / "only" / f"{i}.png")
        code = main(["enhance", str(src), str(tmp_path / "dst"),
                     "--run-dir", str(tmp_path / "run")])
        assert code == 0
        outputs = sorted((tmp_path / "dst" / "only").glob("*.png"))
        assert len(outputs) == 3
        summary = (tmp_path / "run" / "enhance-summary.txt").read_text()
        assert "images_enhanced=3" in summary

    def test_empty_dir_error_exit(self, tmp_path):
        (tmp_path / "empty").mkdir()
        code = main(["enhance", str(tmp_path / "empty"), str(tmp_path / "dst"),
                     "--run-dir", str(tmp_path / "run")])
        assert code == 3

    def test_rerun_idempotent_bytewise(self, tmp_path, mini_corpus):
        out1, out2 = tmp_path / "o1", tmp_path / "o2"
        assert main(["enhance", str(mini_corpus), str(out1),
                     "--run-dir", str(tmp_path / "r1")]) == 0
        assert main(["enhance", str(mini_corpus), str(out2),
                     "--run-dir", str(tmp_path / "r2")]) == 0
        assert tree_hash(out1) == tree_hash(out2)

    def test_config_resolution_order(self, tmp_path, mini_corpus, monkeypatch):
        cfg = tmp_path / "cfg.txt"
        cfg.write_text("tiles-x=5\nclip-beta=2.0\n", encoding="utf-8")
        monkeypatch.setenv("LEAFLITE_TILES_X", "3")
        run_dir = tmp_path / "run"
        assert main(["enhance", str(mini_corpus), str(tmp_path / "o"),
                     "--config", str(cfg), "--run-dir", str(run_dir)]) == 0
        resolved = dict(
            line.split("=", 1)
            for line in (run_dir / "config.txt").read_text().splitlines()
        )
        assert resolved["tiles-x"] == "3"      # env beats config file
        assert resolved["clip-beta"] == "2.0"  # file beats default
        assert resolved["tiles-y"] == "7"      # default


class TestSplitCommand:
    def test_writes_manifest(self, tmp_path, mini_corpus):
        manifest = tmp_path / "m.tsv"
        code = main(["split", str(mini_corpus), "--seed", "5",
                     "--manifest", str(manifest), "--run-dir", str(tmp_path / "run")])
        assert code == 0
        lines = manifest.read_text().splitlines()
        assert len(lines) == 21
        assert all(len(line.split("\t")) == 3 for line in lines)

    def test_missing_corpus_exit_3(self, tmp_path):
        code = main(["split", str(tmp_path / "nope"), "--run-dir", str(tmp_path / "run")])
        assert code == 3


@pytest.fixture(scope="module")
def trained(tmp_path_factory, mini_corpus, backbone_file):
    base = tmp_path_factory.mktemp("pipeline")
    enhanced = base / "enhanced"
    assert main(["enhance", str(mini_corpus), str(enhanced),
                 "--run-dir", str(base / "run-enhance")]) == 0
    manifest = base / "manifest.tsv"
    assert main(["split", str(enhanced), "--seed", "3",
                 "--manifest", str(manifest),
                 "--run-dir", str(base / "run-split")]) == 0
    run_dir = base / "run-train"
    code = main(["train", "--corpus", str(enhanced), "--manifest", str(manifest),
                 "--backbone", str(backbone_file), "--batch-size", "8",
                 "--max-epochs", "2", "--initial-lr", "1e-3", "--seed", "1",
                 "--run-dir", str(run_dir)])
    assert code == 0
    return base, enhanced, manifest, run_dir / "bundle"


class TestPipeline:
    def test_train_outputs(self, trained):
        base, _, _, bundle = trained
        history = (base / "run-train" / "history.csv").read_text().splitlines()
        assert history[0].startswith("epoch,")
        assert len(history) == 3  # header + 2 epochs
        assert (bundle / "backbone.lwts").is_file()
        assert (bundle / "head.lwts").is_file()
        assert (bundle / "bundle.txt").is_file()

    def test_eval_loads_checkpoint(self, trained, tmp_path):
        base, enhanced, manifest, bundle = trained
        run_dir = tmp_path / "run-eval"
        code = main(["eval", "--bundle", str(bundle), "--corpus", str(enhanced),
                     "--manifest", str(manifest), "--runs", "2", "--batch-size", "8",
                     "--no-augment", "--run-dir", str(run_dir)])
        assert code == 0
        report = (run_dir / "report.txt").read_text()
        assert "accuracy_percent=" in report
        assert "accuracy_std=0.000000" in report  # augmentation off
        assert (run_dir / "roc.csv").read_text().startswith("class_id,fpr,tpr")

    def test_infer_prints_probabilities(self, trained, capsys):
        base, enhanced, manifest, bundle = trained
        image = next((enhanced / "a_spot").glob("*.png"))
        code = main(["infer", "--bundle", str(bundle), str(image),
                     "--run-dir", str(base / "run-infer")])
        assert code == 0
        out = capsys.readouterr().out
        assert "class_name=" in out
        probs = [float(line.split("=")[1]) for line in out.splitlines()
                 if line.startswith("p[")]
        assert len(probs) == 3
        assert sum(probs) == pytest.approx(1.0, abs=1e-5)

    def test_analyze_reports_cost(self, trained, tmp_path, capsys):
        *_, bundle = trained
        run_dir = tmp_path / "run-analyze"
        code = main(["analyze", "--bundle", str(bundle), "--run-dir", str(run_dir)])
        assert code == 0
        out = capsys.readouterr().out
        # 3-class head: canonical 2436234 minus (64*10+10) plus (64*3+3)
        assert "total_params=2435779" in out.replace(" ", "")
        cost = (run_dir / "cost.txt").read_text()
        assert "flops_published=4871558" in cost
        assert (run_dir / "cost.csv").read_text().startswith("layer,kind,params,macs")

    def test_gradcam_writes_pngs(self, trained, tmp_path):
        base, enhanced, _, bundle = trained
        image = next((enhanced / "b_mold").glob("*.png"))
        run_dir = tmp_path / "run-gradcam"
        code = main(["gradcam", "--bundle", str(bundle), str(image),
                     "--target-class", "1", "--run-dir", str(run_dir)])
        assert code == 0
        assert (run_dir / "heatmap.png").is_file()
        assert (run_dir / "overlay.png").is_file()

    def test_train_deterministic_across_runs(self, trained, mini_corpus, backbone_file, tmp_path):
        base, enhanced, manifest, _ = trained
        histories = []
        for name in ("d1", "d2"):
            run_dir = tmp_path / name
            assert main(["train", "--corpus", str(enhanced), "--manifest", str(manifest),
                         "--backbone", str(backbone_file), "--batch-size", "8",
                         "--max-epochs", "2", "--seed", "9",
                         "--run-dir", str(run_dir)]) == 0
            histories.append((run_dir / "history.csv").read_bytes())
        assert histories[0] == histories[1]

    def test_train_deterministic_across_processes(self, trained, backbone_file, tmp_path):
        # different interpreter hash seeds must not change the history
        import subprocess
        import sys

        base, enhanced, manifest, _ = trained
        histories = []
        for name, hash_seed in (("p1", "1"), ("p2", "2")):
            run_dir = tmp_path / name
            env = dict(os.environ, PYTHONHASHSEED=hash_seed)
            proc = subprocess.run(
                [sys.executable, "-m", "leaflite.cli", "train",
                 "--corpus", str(enhanced), "--manifest", str(manifest),
                 "--backbone", str(backbone_file), "--batch-size", "8",
                 "--max-epochs", "2", "--seed", "9", "--run-dir", str(run_dir)],
                env=env, capture_output=True, text=True,
            )
            assert proc.returncode == 0, proc.stderr
            histories.append((run_dir / "history.csv").read_bytes())
        assert histories[0] == histories[1]


class TestMiscCommands:
    def test_init_backbone(self, tmp_path):
        out = tmp_path / "bb.lwts"
        code = main(["init-backbone", "--seed", "4", "--out", str(out),
                     "--run-dir", str(tmp_path / "run")])
        assert code == 0
        from leaflite.model import load_backbone

        assert load_backbone(out, build_mobilenet_v2())

    def test_augment_preview_panels(self, tmp_path):
        img = np.random.default_rng(5).integers(0, 256, (40, 40, 3), dtype=np.uint8)
        save_image(img, tmp_path / "leaf.png")
        run_dir = tmp_path / "run"
        code = main(["augment-preview", str(tmp_path / "leaf.png"),
                     "--seed", "2", "--run-dir", str(run_dir)])
        assert code == 0
        panels = sorted(p.name for p in run_dir.glob("*.png"))
        assert panels == ["a-input.png", "b-height-shift.png", "c-width-shift.png",
                          "d-rotation.png", "e-shearing.png", "f-horizontal-flip.png"]

    def test_bad_bundle_exit_3(self, tmp_path):
        code = main(["analyze", "--bundle", str(tmp_path / "missing"),
                     "--run-dir", str(tmp_path / "run")])
        assert code == 3

    def test_corrupt_weight_file_exit_4(self, tmp_path, mini_corpus):
        manifest = tmp_path / "m.tsv"
        assert main(["split", str(mini_corpus), "--manifest", str(manifest),
                     "--run-dir", str(tmp_path / "r")]) == 0
        bad = tmp_path / "bad.lwts"
        bad.write_bytes(b"garbage")
        code = main(["train", "--corpus", str(mini_corpus), "--manifest", str(manifest),
                     "--backbone", str(bad), "--max-epochs", "1",
                     "--run-dir", str(tmp_path / "run")])
        assert code == 4

    def test_usage_error_exit_2(self):
        with pytest.raises(SystemExit) as exc:
            main(["train"])  # missing required flags
        assert exc.value.code == 2

    def test_help_annotates_published_defaults(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["train", "--help"])
        assert exc.value.code == 0
        out = capsys.readouterr().out
        assert "[published default: 16]" in out
        assert "[published default: 1e-05]" in out or "[published default: 1e-5]" in out
        assert "[published default: 10]" in out
