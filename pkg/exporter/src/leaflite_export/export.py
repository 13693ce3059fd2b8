"""Export MobileNetV2 weights from the Keras model zoo into the engine's
portable format, and dump golden activation fixtures for parity testing.

The engine's canonical parameter names are mapped onto Keras layer names;
the mapping must cover the whole graph, and an unmapped layer is a hard
failure. Fixture inputs are already normalized to [-1, 1] so the parity
comparison isolates the convolution kernels from any preprocessing.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import lwts

os.environ.setdefault("TF_CPP_MIN_LOG_LEVEL", "3")

INPUT_SIDE = 256
FEATURE_DIM = 1280
N_FIXTURES = 5

# (engine unit, keras conv layer, keras bn layer, depthwise?)
def _unit_table():
    units = [("stem", "Conv1", "bn_Conv1", False)]
    units.append(("block00.depthwise", "expanded_conv_depthwise",
                  "expanded_conv_depthwise_BN", True))
    units.append(("block00.project", "expanded_conv_project",
                  "expanded_conv_project_BN", False))
    for i in range(1, 17):
        units.append((f"block{i:02d}.expand", f"block_{i}_expand",
                      f"block_{i}_expand_BN", False))
        units.append((f"block{i:02d}.depthwise", f"block_{i}_depthwise",
                      f"block_{i}_depthwise_BN", True))
        units.append((f"block{i:02d}.project", f"block_{i}_project",
                      f"block_{i}_project_BN", False))
    units.append(("top", "Conv_1", "Conv_1_bn", False))
    return units


class ExportError(RuntimeError):
    pass


@dataclass
class ExportResult:
    weights_path: Path
    golden_path: Path
    manifest_path: Path
    mapping_path: Path
    source: str


def _build_model(weights: str, seed: int):
    import tensorflow as tf

    zoo_weights = "imagenet" if weights == "imagenet" else None
    try:
        model = tf.keras.applications.MobileNetV2(
            input_shape=(INPUT_SIDE, INPUT_SIDE, 3), include_top=False,
            weights=zoo_weights, alpha=1.0, pooling="avg",
        )
    except Exception as exc:
        raise ExportError(
            f"cannot build zoo model with weights={weights!r}: {exc}"
        ) from exc
    if weights == "random":
        _seed_weights(model, seed)
    return model, tf.__version__


def _seed_weights(model, seed: int) -> None:
    """Deterministic numpy-seeded weights, independent of TF's own RNG.

    Kernels use fan-in scaling so activations stay alive through the
    depth; BN statistics start at identity.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    for engine_name, conv_name, bn_name, depthwise in _unit_table():
        conv = model.get_layer(conv_name)
        kernel = conv.get_weights()[0]
        fan_in = kernel.shape[0] * kernel.shape[1] * (1 if depthwise else kernel.shape[2])
        limit = np.sqrt(6.0 / fan_in)
        conv.set_weights([rng.uniform(-limit, limit, size=kernel.shape).astype(np.float32)])
        bn = model.get_layer(bn_name)
        c = bn.get_weights()[0].shape[0]
        bn.set_weights([
            np.ones(c, np.float32), np.zeros(c, np.float32),
            np.zeros(c, np.float32), np.ones(c, np.float32),
        ])


def _collect_tensors(model) -> tuple[dict[str, np.ndarray], list[tuple[str, str]]]:
    tensors: dict[str, np.ndarray] = {}
    mapping: list[tuple[str, str]] = []
    missing: list[str] = []
    for engine_name, conv_name, bn_name, depthwise in _unit_table():
        try:
            conv = model.get_layer(conv_name)
            bn = model.get_layer(bn_name)
        except ValueError:
            missing.append(f"{conv_name}/{bn_name} -> {engine_name}")
            continue
        kernel = conv.get_weights()[0]
        if depthwise:
            if kernel.shape[-1] != 1:
                raise ExportError(f"{conv_name}: depth multiplier != 1")
            kernel = kernel[:, :, :, 0]
        tensors[f"{engine_name}.conv.kernel"] = kernel.astype(np.float32)
        gamma, beta, mean, var = bn.get_weights()
        tensors[f"{engine_name}.bn.gamma"] = gamma.astype(np.float32)
        tensors[f"{engine_name}.bn.beta"] = beta.astype(np.float32)
        tensors[f"{engine_name}.bn.mean"] = mean.astype(np.float32)
        tensors[f"{engine_name}.bn.variance"] = var.astype(np.float32)
        mapping.append((conv_name, f"{engine_name}.conv"))
        mapping.append((bn_name, f"{engine_name}.bn"))
    if missing:
        raise ExportError("unmapped zoo layers: " + ", ".join(missing))
    return tensors, mapping


def make_fixture_inputs(seed: int = 0, count: int = N_FIXTURES) -> np.ndarray:
    """Deterministic normalized inputs: smooth color fields plus texture,
    spanning the engine's full [-1, 1] input range."""
    rng = np.random.Generator(np.random.PCG64(seed))
    fixtures = np.empty((count, INPUT_SIDE, INPUT_SIDE, 3), np.float32)
    yy, xx = np.mgrid[0:INPUT_SIDE, 0:INPUT_SIDE].astype(np.float32) / INPUT_SIDE
    for i in range(count):
        fx, fy = rng.uniform(1.0, 6.0, size=2)
        phase = rng.uniform(0, 2 * np.pi, size=3)
        base = np.stack(
            [np.sin(2 * np.pi * (fx * xx + fy * yy) + p) for p in phase], axis=-1
        )
        noise = rng.uniform(-0.4, 0.4, size=base.shape)
        fixtures[i] = np.clip(0.6 * base + noise, -1.0, 1.0)
    return fixtures


def dump_golden(model, path, seed: int = 0, count: int = N_FIXTURES) -> dict[str, str]:
    """Write fixture inputs with their pooled features; returns the
    input-hash index recorded in the manifest."""
    inputs = make_fixture_inputs(seed, count)
    features = model.predict(inputs, verbose=0).astype(np.float32)
    if features.shape != (count, FEATURE_DIM):
        raise ExportError(f"unexpected feature shape {features.shape}")
    tensors: dict[str, np.ndarray] = {}
    hashes: dict[str, str] = {}
    for i in range(count):
        tensors[f"fixture{i:02d}.input"] = inputs[i]
        tensors[f"fixture{i:02d}.feature"] = features[i]
        hashes[f"fixture{i:02d}"] = hashlib.sha256(inputs[i].tobytes()).hexdigest()
    lwts.write(tensors, path)
    return hashes


def export_backbone(output_dir, weights: str = "imagenet", seed: int = 0,
                    fixture_seed: int = 0) -> ExportResult:
    """Write backbone.lwts, goldens.lwts, manifest.txt and mapping.csv."""
    if weights not in ("imagenet", "random"):
        raise ExportError(f"weights must be 'imagenet' or 'random', got {weights!r}")
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    model, tf_version = _build_model(weights, seed)

    tensors, mapping = _collect_tensors(model)
    weights_path = out / "backbone.lwts"
    lwts.write(tensors, weights_path)

    golden_path = out / "goldens.lwts"
    hashes = dump_golden(model, golden_path, seed=fixture_seed)

    mapping_path = out / "mapping.csv"
    with open(mapping_path, "w", encoding="utf-8", newline="") as fh:
        fh.write("zoo_layer,engine_name\n")
        for zoo, engine in mapping:
            fh.write(f"{zoo},{engine}\n")

    source = f"keras-applications/MobileNetV2 alpha=1.0 (tensorflow {tf_version})"
    manifest_path = out / "manifest.txt"
    lines = [
        "format=leaflite-export-v1",
        f"source={source}",
        f"weights={weights}",
        f"seed={seed}",
        f"fixture_seed={fixture_seed}",
        f"input_side={INPUT_SIDE}",
        f"feature_dim={FEATURE_DIM}",
        f"tensor_count={len(tensors)}",
    ]
    lines += [f"golden_sha256_{k}={v}" for k, v in sorted(hashes.items())]
    manifest_path.write_text("\n".join(lines) + "\n", encoding="utf-8")

    return ExportResult(weights_path=weights_path, golden_path=golden_path,
                        manifest_path=manifest_path, mapping_path=mapping_path,
                        source=source)
