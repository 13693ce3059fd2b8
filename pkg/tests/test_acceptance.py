"""Acceptance suite: one test per criterion, each printing a PASS line
with its runtime. Run with `pytest tests/test_acceptance.py -v -s`."""

import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import pytest

import oracles
from leaflite import analysis as AN
from leaflite import evaluation as E
from leaflite import imageproc as IP
from leaflite import tensor as T
from leaflite.augment import stream_for
from leaflite.cli import main
from leaflite.model import (
    HeadParams,
    build_mobilenet_v2,
    forward_features,
    init_head,
    propagate_shapes,
    random_weight_store,
)
from leaflite.train import TrainConfig, cross_entropy, fit, head_backward
from leaflite.weights_io import write_weights
from leaflite.model import forward_head


@contextmanager
def criterion(name, budget_seconds=None):
    start = time.monotonic()
    try:
        yield
    except BaseException:
        print(f"ACCEPTANCE {name}: FAIL ({time.monotonic() - start:.1f}s)")
        raise
    elapsed = time.monotonic() - start
    if budget_seconds is not None:
        assert elapsed < budget_seconds, f"{name} exceeded {budget_seconds}s ({elapsed:.1f}s)"
    print(f"ACCEPTANCE {name}: PASS ({elapsed:.1f}s)")


def rel_close(got, want, tol=1e-5):
    got = np.asarray(got, np.float64)
    want = np.asarray(want, np.float64)
    return np.all(np.abs(got - want) <= tol * np.maximum(np.abs(want), 1.0))


def test_kernel_oracle_suite():
    """conv2d, depthwise, batchnorm, dense, softmax, pooling vs nested-loop
    oracles on 100 randomized small shapes each, 1e-5 relative."""
    with criterion("kernel-oracles", budget_seconds=60):
        rng = np.random.default_rng(2024)
        for _ in range(100):
            n = int(rng.integers(1, 3))
            h, w = int(rng.integers(3, 9)), int(rng.integers(3, 9))
            cin, cout = int(rng.integers(1, 5)), int(rng.integers(1, 5))
            k = int(rng.choice([1, 3]))
            stride = int(rng.choice([1, 2]))
            padding = "same" if (h < k or w < k) else str(rng.choice(["same", "valid"]))
            x = rng.normal(size=(n, h, w, cin)).astype(np.float32)

            kern = rng.normal(size=(k, k, cin, cout)).astype(np.float32)
            assert rel_close(T.conv2d(x, kern, stride=stride, padding=padding),
                             oracles.conv2d_ref(x, kern, stride=stride, padding=padding))

            dw = rng.normal(size=(3, 3, cin)).astype(np.float32)
            assert rel_close(T.depthwise_conv2d(x, dw, stride=stride),
                             oracles.depthwise_ref(x, dw, stride=stride))

            gamma = rng.normal(size=cin).astype(np.float32)
            beta = rng.normal(size=cin).astype(np.float32)
            mean = rng.normal(size=cin).astype(np.float32)
            var = rng.uniform(0, 2, size=cin).astype(np.float32)
            assert np.allclose(T.batchnorm(x, gamma, beta, mean, var, 1e-3),
                               oracles.batchnorm_ref(x, gamma, beta, mean, var, 1e-3),
                               atol=1e-4, rtol=1e-4)

            assert np.allclose(T.global_avg_pool(x), oracles.global_avg_pool_ref(x),
                               atol=1e-6)

            f, u = int(rng.integers(1, 9)), int(rng.integers(1, 9))
            xf = rng.normal(size=(3, f)).astype(np.float32)
            wf = rng.normal(size=(f, u)).astype(np.float32)
            bf = rng.normal(size=u).astype(np.float32)
            assert rel_close(T.dense(xf, wf, bf), oracles.dense_ref(xf, wf, bf))
            assert np.allclose(T.softmax(xf), oracles.softmax_ref(xf), atol=1e-6)


def test_gradient_check():
    """Every head parameter gradient vs central differences (step 1e-3)
    within 1e-2 relative on a random 16-sample batch."""
    with criterion("gradient-check", budget_seconds=60):
        rng = np.random.default_rng(69)
        head = init_head(5, in_dim=12, hidden1=8, hidden2=6, classes=4, dropout_rate=0.5)
        for f in head.__dataclass_fields__:
            if f != "dropout_rate":
                setattr(head, f, getattr(head, f).astype(np.float64))
        x = rng.normal(size=(16, 12))
        labels = rng.integers(0, 4, size=16)
        mask_seed = 99

        def loss():
            probs, _ = forward_head(head, x, mode="train", rng=stream_for(mask_seed),
                                    update_running=False)
            return cross_entropy(probs, labels)

        _, cache = forward_head(head, x, mode="train", rng=stream_for(mask_seed),
                                update_running=False)
        assert min(np.abs(cache["z1"]).min(), np.abs(cache["z2"]).min()) > 2e-2
        grads = head_backward(head, cache, labels)
        h = 1e-3
        for name in HeadParams.TRAINABLE:
            param = getattr(head, name)
            fd = np.zeros_like(param)
            it = np.nditer(param, flags=["multi_index"])
            while not it.finished:
                idx = it.multi_index
                orig = param[idx]
                param[idx] = orig + h
                up = loss()
                param[idx] = orig - h
                down = loss()
                param[idx] = orig
                fd[idx] = (up - down) / (2 * h)
                it.iternext()
            np.testing.assert_allclose(grads[name], fd, rtol=1e-2, atol=1e-8,
                                       err_msg=name)


# Integer confusion matrix realizing the published per-class test rows:
# row sums are the per-class sample counts; off-diagonal mass solves the
# supply/demand system implied by rounding TP = recall * N and
# FP = TP * (1 - precision) / precision.
TABLE_CM = np.array([
    [423, 2, 0, 0, 0, 0, 0, 0, 0, 0],
    [1, 191, 8, 0, 0, 0, 0, 0, 0, 0],
    [0, 1, 380, 0, 0, 0, 0, 0, 0, 0],
    [0, 2, 0, 188, 0, 0, 0, 0, 0, 0],
    [0, 0, 0, 0, 351, 3, 0, 0, 0, 0],
    [0, 0, 0, 0, 2, 333, 0, 0, 0, 0],
    [0, 0, 0, 0, 1, 2, 277, 0, 0, 1],
    [0, 0, 0, 0, 0, 0, 2, 1069, 0, 0],
    [0, 0, 0, 0, 0, 0, 0, 0, 74, 0],
    [0, 0, 0, 0, 0, 0, 0, 0, 0, 318],
])

TABLE_ROWS = {
    # class: (count, precision, recall, f1)
    0: (425, 0.9976, 0.9953, 0.9965),
    1: (200, 0.9745, 0.9550, 0.9646),
    2: (381, 0.9794, 0.9974, 0.9883),
    3: (190, 1.0000, 0.9895, 0.9947),
    4: (354, 0.9915, 0.9915, 0.9915),
    5: (335, 0.9852, 0.9940, 0.9896),
    6: (281, 0.9928, 0.9858, 0.9893),
    7: (1071, 1.0000, 0.9981, 0.9991),
    8: (74, 1.0000, 1.0000, 1.0000),
    9: (318, 0.9969, 1.0000, 0.9984),
}


def test_metric_fidelity():
    """Accuracy/precision/recall/F1 implementations reproduce the published
    per-class rows from a realizing confusion matrix, 5e-4 tolerance."""
    with criterion("metric-fidelity"):
        cm = TABLE_CM
        precision = E.precision_per_class(cm)
        recall = E.recall_per_class(cm)
        f1 = E.f1_per_class(cm)
        for c, (count, p, r, f) in TABLE_ROWS.items():
            assert cm[c].sum() == count
            assert abs(precision[c] - p) <= 5e-4, f"class {c} precision"
            assert abs(recall[c] - r) <= 5e-4, f"class {c} recall"
            assert abs(f1[c] - f) <= 5e-4, f"class {c} f1"
        # Mosaic Virus: perfect row with 74 samples
        assert precision[8] == recall[8] == f1[8] == 1.0
        # Early Blight hits the published values within reconstruction noise
        assert abs(precision[1] - 0.9745) <= 5e-4
        assert abs(recall[1] - 0.9550) <= 5e-4
        # macro values mirror the published summary figures
        assert abs(E.macro_precision(cm) - 0.9918) <= 5e-4
        assert abs(E.macro_recall(cm) - 0.9907) <= 5e-4
        assert abs(E.macro_f1(cm) - 0.9912) <= 5e-4
        assert abs(E.accuracy(cm) - 99.30) <= 0.05


def test_cost_accounting(tmp_path):
    """flops = 2 x params exactly; ~4.87 MFLOPs and ~9.60 MB within 10%;
    backbone within 2% of 2.28 M parameters."""
    with criterion("cost-accounting"):
        graph = build_mobilenet_v2()
        head = init_head(0)
        report = AN.cost_report(graph, head)
        assert report.flops_published == 2 * report.total_params
        assert abs(report.mflops_published - 4.87) / 4.87 <= 0.10
        backbone = AN.parameter_count(graph)
        assert abs(backbone - 2_280_000) / 2_280_000 <= 0.02

        from leaflite.model import save_bundle

        store = random_weight_store(graph, 1, calibrate=False)
        save_bundle(tmp_path / "bundle", store, head, [f"c{i}" for i in range(10)])
        size_mb = AN.model_size(tmp_path / "bundle")
        assert abs(size_mb - 9.60) / 9.60 <= 0.10


def test_architecture_shape():
    """256x256x3 -> 8x8x1280 -> 1280-d pooled; exactly 17 bottlenecks;
    residual adds only at stride-1 equal-channel blocks."""
    with criterion("architecture-shape"):
        graph = build_mobilenet_v2()
        assert len(graph.blocks) == 17
        shapes = propagate_shapes(graph)
        assert shapes[-1][1] == (8, 8, 1280)
        for b in graph.blocks:
            assert b.use_residual == (b.stride == 1 and b.cin == b.cout)
        store = random_weight_store(graph, 0, calibrate=False)
        feats = forward_features(graph, store, np.zeros((1, 256, 256, 3), np.float32))
        assert feats.shape == (1, 1280)


def test_clahe_properties():
    """Constant fixed point (+-1) at representative intensities, per-tile
    clip bound, color round-trip <= 1 level on all 256 grays."""
    with criterion("clahe-properties", budget_seconds=60):
        for v in (0, 64, 128, 192, 255):
            img = np.full((70, 70, 3), v, np.uint8)
            out = IP.clahe(img)
            assert np.abs(out.astype(int) - img.astype(int)).max() <= 1, f"constant {v}"

        rng = np.random.default_rng(0)
        img = rng.integers(0, 256, size=(70, 70, 3), dtype=np.uint8)
        params = IP.ClaheParams()
        lab = IP.rgb_to_hunter_lab(img)
        maps, row_edges, col_edges = IP.clahe_tile_mappings(lab.L, params)
        idx = np.rint(lab.L / 100.0 * (params.bins - 1)).astype(int).clip(0, params.bins - 1)
        for ti in range(params.tiles_y):
            for tj in range(params.tiles_x):
                tile = idx[row_edges[ti]:row_edges[ti + 1], col_edges[tj]:col_edges[tj + 1]]
                hist = np.bincount(tile.ravel(), minlength=params.bins).astype(float)
                clip = params.clip_beta * tile.size / params.bins
                excess = np.clip(hist - clip, 0, None).sum()
                clipped = IP.clip_histogram(hist, clip)
                assert clipped.max() <= clip + excess / params.bins + 1e-9
                assert clipped.sum() == pytest.approx(tile.size)

        levels = np.arange(256, dtype=np.uint8)
        gray = np.stack([levels] * 3, axis=-1).reshape(16, 16, 3)
        rt = IP.hunter_lab_to_rgb(IP.rgb_to_hunter_lab(gray))
        assert np.abs(rt.astype(int) - gray.astype(int)).max() <= 1


def test_training_protocol_state_machine():
    """Non-improving run: LR x0.1 after 4 patient epochs, stop after 10;
    separable 3-class set reaches >= 95% val accuracy before early stop."""
    with criterion("training-protocol", budget_seconds=300):
        head = init_head(11, in_dim=4, hidden1=3, hidden2=3, classes=2, dropout_rate=0.0)
        rng = np.random.default_rng(12)
        x = rng.normal(size=(8, 4)).astype(np.float32)
        y = np.zeros(8, dtype=int)

        def batches(epoch):
            yield x, y

        cfg = TrainConfig(batch_size=8, max_epochs=100, initial_lr=1e-12, seed=1)
        _, history = fit(head, batches, batches, cfg)
        assert len(history.records) == 11  # stop after 10 patient epochs
        lrs = [r.lr for r in history.records]
        assert lrs[4] == pytest.approx(1e-12)      # decay happens AT epoch 5
        assert lrs[5] == pytest.approx(1e-13)      # ... so epoch 6 runs decayed
        assert lrs[9] == pytest.approx(1e-14)

        rng = np.random.default_rng(15)
        centers = (np.eye(3, 12) - 1 / 12) * 3.0
        labels = np.arange(60) % 3
        feats = (centers[labels] + rng.normal(scale=0.4, size=(60, 12))).astype(np.float32)
        head = init_head(16, in_dim=12, hidden1=8, hidden2=6, classes=3, dropout_rate=0.2)
        cfg = TrainConfig(batch_size=16, max_epochs=100, initial_lr=3e-2, seed=3)

        def train_batches(epoch):
            for s in range(0, 60, 16):
                yield feats[s:s + 16], labels[s:s + 16]

        def val_batches(epoch):
            yield feats[:30], labels[:30]

        _, history = fit(head, train_batches, val_batches, cfg)
        assert len(history.records) < 100
        assert max(r.val_acc for r in history.records) >= 0.95


def test_end_to_end_desk_pipeline(synthetic_corpus, tmp_path):
    """enhance -> split -> train -> eval -> analyze -> gradcam on the
    60-image synthetic corpus; deterministic under a fixed seed;
    repeated_eval with augmentation off yields std = 0."""
    with criterion("desk-pipeline"):
        base = tmp_path
        enhanced = base / "enhanced"
        assert main(["enhance", str(synthetic_corpus), str(enhanced),
                     "--run-dir", str(base / "r-enhance")]) == 0
        assert len(list(enhanced.rglob("*.png"))) == 60

        manifest = base / "manifest.tsv"
        assert main(["split", str(enhanced), "--seed", "11",
                     "--manifest", str(manifest),
                     "--run-dir", str(base / "r-split")]) == 0

        backbone = base / "backbone.lwts"
        write_weights(random_weight_store(build_mobilenet_v2(), 13), backbone)

        histories = []
        for run in ("t1", "t2"):
            assert main(["train", "--corpus", str(enhanced), "--manifest", str(manifest),
                         "--backbone", str(backbone), "--batch-size", "8",
                         "--max-epochs", "2", "--initial-lr", "1e-3", "--seed", "17",
                         "--run-dir", str(base / run)]) == 0
            histories.append((base / run / "history.csv").read_bytes())
        assert histories[0] == histories[1]  # deterministic under fixed seed
        bundle = base / "t1" / "bundle"

        eval_dir = base / "r-eval"
        assert main(["eval", "--bundle", str(bundle), "--corpus", str(enhanced),
                     "--manifest", str(manifest), "--runs", "2", "--batch-size", "8",
                     "--no-augment", "--base-seed", "19",
                     "--run-dir", str(eval_dir)]) == 0
        report = (eval_dir / "report.txt").read_text()
        assert "accuracy_std=0.000000" in report  # aug off: zero spread

        assert main(["analyze", "--bundle", str(bundle),
                     "--run-dir", str(base / "r-analyze")]) == 0
        cost = (base / "r-analyze" / "cost.txt").read_text()
        assert "flops_published=" in cost

        image = next((enhanced / "alpha").rglob("*.png"))
        assert main(["gradcam", "--bundle", str(bundle), str(image),
                     "--target-class", "0", "--run-dir", str(base / "r-gradcam")]) == 0
        assert (base / "r-gradcam" / "overlay.png").is_file()


def test_export_parity(tmp_path):
    """[SECONDARY] Engine features match golden activations from the
    exporter on >= 5 fixtures: max-abs < 1e-3, mean-abs < 1e-4; the
    export -> load round trip resolves every parameter name."""
    export = pytest.importorskip("leaflite_export",
                                 reason="secondary exporter not installed")
    with criterion("export-parity"):
        out = tmp_path / "export"
        result = export.export_backbone(out, weights="random", seed=5)
        graph = build_mobilenet_v2()
        from leaflite.model import load_backbone
        from leaflite.weights_io import load_weights

        store = load_backbone(result.weights_path, graph)  # resolves all names

        goldens = load_weights(result.golden_path)
        n_fixtures = sum(1 for name in goldens if name.endswith(".input"))
        assert n_fixtures >= 5
        for i in range(n_fixtures):
            x = goldens[f"fixture{i:02d}.input"][None, ...]
            want = goldens[f"fixture{i:02d}.feature"]
            got = forward_features(graph, store, x)[0]
            diff = np.abs(got - want)
            assert diff.max() < 1e-3, f"fixture {i} max {diff.max()}"
            assert diff.mean() < 1e-4, f"fixture {i} mean {diff.mean()}"
