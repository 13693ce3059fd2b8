"""MobileNetV2 graph, weight resolution, feature extraction, classifier head.

The backbone is frozen: batch normalization always uses the stored running
statistics and no gradient ever flows through convolution layers. Only the
head (BN -> Dense 128/ReLU -> Dropout -> Dense 64/ReLU -> BN -> Dense 10
-> softmax) is trainable.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import FormatError, InputError, NumericError, ShapeError, WeightFormatError
from .imageproc import ClaheParams, clahe, load_image, to_input_tensor
from .weights_io import load_weights, write_weights

BN_EPS = 1e-3
BN_MOMENTUM = 0.99


@dataclass(frozen=True)
class BottleneckSpec:
    expansion: int
    out_channels: int
    repeats: int
    first_stride: int


# Canonical width-1.0 configuration: (expansion, channels, repeats, stride).
MOBILENET_V2_BOTTLENECKS = (
    BottleneckSpec(1, 16, 1, 1),
    BottleneckSpec(6, 24, 2, 2),
    BottleneckSpec(6, 32, 3, 2),
    BottleneckSpec(6, 64, 4, 2),
    BottleneckSpec(6, 96, 3, 1),
    BottleneckSpec(6, 160, 3, 2),
    BottleneckSpec(6, 320, 1, 1),
)


@dataclass(frozen=True)
class ConvUnit:
    """Convolution + BN (+ optional ReLU6). Backbone convs carry no bias."""

    name: str
    kernel: int
    cin: int
    cout: int
    stride: int
    depthwise: bool
    activation: str  # "relu6" | "linear"

    @property
    def param_names(self):
        base = f"{self.name}.conv.kernel"
        return [base] + [f"{self.name}.bn.{p}" for p in ("gamma", "beta", "mean", "variance")]

    @property
    def kernel_shape(self):
        k = self.kernel
        return (k, k, self.cin) if self.depthwise else (k, k, self.cin, self.cout)


@dataclass(frozen=True)
class Block:
    index: int
    cin: int
    cout: int
    stride: int
    expansion: int
    expand: ConvUnit | None  # absent when expansion == 1
    depthwise: ConvUnit
    project: ConvUnit

    @property
    def use_residual(self):
        return self.stride == 1 and self.cin == self.cout


@dataclass(frozen=True)
class ModelGraph:
    input_side: int
    stem: ConvUnit
    blocks: tuple[Block, ...]
    top: ConvUnit
    feature_dim: int

    @property
    def conv_units(self) -> list[ConvUnit]:
        units = [self.stem]
        for b in self.blocks:
            if b.expand is not None:
                units.append(b.expand)
            units.extend([b.depthwise, b.project])
        units.append(self.top)
        return units

    @property
    def parameter_names(self) -> list[str]:
        names: list[str] = []
        for u in self.conv_units:
            names.extend(u.param_names)
        return names


def build_mobilenet_v2(input_side: int = 256) -> ModelGraph:
    """17-bottleneck MobileNetV2 feature extractor ending in 1280 channels."""
    stem = ConvUnit("stem", 3, 3, 32, 2, False, "relu6")
    blocks: list[Block] = []
    cin = 32
    idx = 0
    for spec in MOBILENET_V2_BOTTLENECKS:
        for r in range(spec.repeats):
            stride = spec.first_stride if r == 0 else 1
            hidden = cin * spec.expansion
            prefix = f"block{idx:02d}"
            expand = None
            if spec.expansion != 1:
                expand = ConvUnit(f"{prefix}.expand", 1, cin, hidden, 1, False, "relu6")
            dw = ConvUnit(f"{prefix}.depthwise", 3, hidden, hidden, stride, True, "relu6")
            project = ConvUnit(f"{prefix}.project", 1, hidden, spec.out_channels, 1, False, "linear")
            blocks.append(Block(idx, cin, spec.out_channels, stride, spec.expansion, expand, dw, project))
            cin = spec.out_channels
            idx += 1
    top = ConvUnit("top", 1, cin, 1280, 1, False, "relu6")
    return ModelGraph(input_side=input_side, stem=stem, blocks=tuple(blocks), top=top, feature_dim=1280)


def propagate_shapes(graph: ModelGraph) -> list[tuple[str, tuple[int, int, int]]]:
    """(unit name, output (h, w, c)) down the graph for a single image."""
    h = w = graph.input_side
    shapes = []
    for u in graph.conv_units:
        h = T.conv_output_size(h, u.kernel, u.stride, "same")
        w = T.conv_output_size(w, u.kernel, u.stride, "same")
        shapes.append((u.name, (h, w, u.cout)))
    return shapes


def resolve_weights(graph: ModelGraph, store: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Check that the store covers the graph; verify declared shapes."""
    missing = [n for n in graph.parameter_names if n not in store]
    if missing:
        raise WeightFormatError(
            "missing", "weight store is missing: " + ", ".join(sorted(missing))
        )
    for u in graph.conv_units:
        k = store[f"{u.name}.conv.kernel"]
        if tuple(k.shape) != u.kernel_shape:
            raise ShapeError(f"{u.name}: kernel shape {k.shape} != declared {u.kernel_shape}")
        for p in ("gamma", "beta", "mean", "variance"):
            arr = store[f"{u.name}.bn.{p}"]
            if arr.shape != (u.cout,):
                raise ShapeError(f"{u.name}.bn.{p}: shape {arr.shape} != ({u.cout},)")
    return store


def load_backbone(path, graph: ModelGraph) -> dict[str, np.ndarray]:
    return resolve_weights(graph, load_weights(path))


def random_weight_store(graph: ModelGraph, seed: int, calibrate: bool = True) -> dict[str, np.ndarray]:
    """Deterministic random backbone for fixtures and desk-scale runs.

    With calibrate=True the BN running statistics are set to the actual
    per-channel moments of each conv's output on a seeded reference batch,
    so activations stay well-scaled through the full depth instead of
    decaying or saturating; the resulting features respond to input
    structure the way a properly initialized BN network does.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    store: dict[str, np.ndarray] = {}
    for u in graph.conv_units:
        shape = u.kernel_shape
        receptive = u.kernel * u.kernel
        fan_in = receptive * (1 if u.depthwise else u.cin)
        limit = np.sqrt(6.0 / fan_in)
        store[f"{u.name}.conv.kernel"] = rng.uniform(-limit, limit, size=shape).astype(np.float32)
        store[f"{u.name}.bn.gamma"] = np.ones(u.cout, np.float32)
        store[f"{u.name}.bn.beta"] = np.zeros(u.cout, np.float32)
        store[f"{u.name}.bn.mean"] = np.zeros(u.cout, np.float32)
        store[f"{u.name}.bn.variance"] = np.ones(u.cout, np.float32)
    if calibrate:
        _calibrate_bn_stats(graph, store, rng)
    return store


def _calibrate_bn_stats(graph: ModelGraph, store, rng) -> None:
    """Set BN mean/variance to each conv's output moments on a smooth
    random reference batch (mixed low-frequency blobs and pixel noise)."""
    side = graph.input_side
    coarse = rng.uniform(-1.0, 1.0, size=(2, side // 16, side // 16, 3)).astype(np.float32)
    from .imageproc import resize_bilinear

    smooth = np.stack([resize_bilinear(c, side, side) for c in coarse])
    x = np.clip(smooth + rng.uniform(-0.3, 0.3, size=smooth.shape).astype(np.float32), -1, 1)

    def run_calibrated(x, unit):
        if unit.depthwise:
            pre = T.depthwise_conv2d(x, store[f"{unit.name}.conv.kernel"], stride=unit.stride)
        else:
            pre = T.conv2d(x, store[f"{unit.name}.conv.kernel"], stride=unit.stride)
        mean = pre.mean(axis=(0, 1, 2))
        var = np.maximum(pre.var(axis=(0, 1, 2)), 1e-4)
        store[f"{unit.name}.bn.mean"] = mean.astype(np.float32)
        store[f"{unit.name}.bn.variance"] = var.astype(np.float32)
        out = T.batchnorm(pre, store[f"{unit.name}.bn.gamma"], store[f"{unit.name}.bn.beta"],
                          mean, var, eps=BN_EPS)
        return T.relu6(out) if unit.activation == "relu6" else out

    x = run_calibrated(x, graph.stem)
    for b in graph.blocks:
        y = x
        if b.expand is not None:
            y = run_calibrated(y, b.expand)
        y = run_calibrated(y, b.depthwise)
        y = run_calibrated(y, b.project)
        x = T.residual_add(x, y) if b.use_residual else y
    run_calibrated(x, graph.top)


def _run_unit(x, unit: ConvUnit, store):
    if unit.depthwise:
        x = T.depthwise_conv2d(x, store[f"{unit.name}.conv.kernel"], stride=unit.stride)
    else:
        x = T.conv2d(x, store[f"{unit.name}.conv.kernel"], stride=unit.stride)
    x = T.batchnorm(
        x,
        store[f"{unit.name}.bn.gamma"],
        store[f"{unit.name}.bn.beta"],
        store[f"{unit.name}.bn.mean"],
        store[f"{unit.name}.bn.variance"],
        eps=BN_EPS,
    )
    return T.relu6(x) if unit.activation == "relu6" else x


def forward_feature_map(graph: ModelGraph, store, batch) -> np.ndarray:
    """Final conv activation map (N, s/32, s/32, 1280) before pooling."""
    batch = np.asarray(batch, dtype=np.float32)
    expected = (graph.input_side, graph.input_side, 3)
    if batch.ndim != 4 or batch.shape[1:] != expected:
        raise ShapeError(f"expected input (N, {expected[0]}, {expected[1]}, 3), got {batch.shape}")
    x = _run_unit(batch, graph.stem, store)
    for b in graph.blocks:
        y = x
        if b.expand is not None:
            y = _run_unit(y, b.expand, store)
        y = _run_unit(y, b.depthwise, store)
        y = _run_unit(y, b.project, store)
        x = T.residual_add(x, y) if b.use_residual else y
    return _run_unit(x, graph.top, store)


def forward_features(graph: ModelGraph, store, batch) -> np.ndarray:
    """Pooled 1280-d features for a batch of normalized inputs."""
    fmap = forward_feature_map(graph, store, batch)
    return T.global_avg_pool(fmap).reshape(fmap.shape[0], graph.feature_dim)


@dataclass
class HeadParams:
    """Trainable classifier parameters; dims default to the 1280/128/64/10
    configuration."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w_out: np.ndarray
    b_out: np.ndarray
    bn1_gamma: np.ndarray
    bn1_beta: np.ndarray
    bn1_mean: np.ndarray
    bn1_var: np.ndarray
    bn2_gamma: np.ndarray
    bn2_beta: np.ndarray
    bn2_mean: np.ndarray
    bn2_var: np.ndarray
    dropout_rate: float = 0.5

    TRAINABLE = ("bn1_gamma", "bn1_beta", "w1", "b1", "w2", "b2",
                 "bn2_gamma", "bn2_beta", "w_out", "b_out")

    @property
    def in_dim(self):
        return self.w1.shape[0]

    @property
    def classes(self):
        return self.w_out.shape[1]

    def copy(self) -> "HeadParams":
        return replace(
            self, **{f: getattr(self, f).copy() for f in self.__dataclass_fields__ if f != "dropout_rate"}
        )

    def to_tensors(self) -> dict[str, np.ndarray]:
        return {f"head.{name}": getattr(self, name) for name in self.__dataclass_fields__
                if name != "dropout_rate"}

    @classmethod
    def from_tensors(cls, tensors: dict[str, np.ndarray], dropout_rate: float = 0.5) -> "HeadParams":
        fields = [f for f in cls.__dataclass_fields__ if f != "dropout_rate"]
        missing = [f"head.{f}" for f in fields if f"head.{f}" not in tensors]
        if missing:
            raise WeightFormatError("missing", "head store is missing: " + ", ".join(missing))
        return cls(**{f: np.asarray(tensors[f"head.{f}"], np.float32) for f in fields},
                   dropout_rate=dropout_rate)


def init_head(seed: int, in_dim: int = 1280, hidden1: int = 128, hidden2: int = 64,
              classes: int = 10, dropout_rate: float = 0.5) -> HeadParams:
    rng = np.random.Generator(np.random.PCG64(seed))

    def glorot(fan_in, fan_out):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(np.float32)

    return HeadParams(
        w1=glorot(in_dim, hidden1), b1=np.zeros(hidden1, np.float32),
        w2=glorot(hidden1, hidden2), b2=np.zeros(hidden2, np.float32),
        w_out=glorot(hidden2, classes), b_out=np.zeros(classes, np.float32),
        bn1_gamma=np.ones(in_dim, np.float32), bn1_beta=np.zeros(in_dim, np.float32),
        bn1_mean=np.zeros(in_dim, np.float32), bn1_var=np.ones(in_dim, np.float32),
        bn2_gamma=np.ones(hidden2, np.float32), bn2_beta=np.zeros(hidden2, np.float32),
        bn2_mean=np.zeros(hidden2, np.float32), bn2_var=np.ones(hidden2, np.float32),
        dropout_rate=dropout_rate,
    )


def _batch_stats(x):
    mu = x.mean(axis=0)
    var = ((x - mu) ** 2).mean(axis=0)
    return mu, var


def forward_head(head: HeadParams, features, mode: str = "infer",
                 rng: np.random.Generator | None = None, update_running: bool = True):
    """Head forward pass.

    infer: dropout off, BN uses running statistics; returns (probs, None).
    train: dropout mask drawn from rng, BN uses batch statistics (and by
    default updates the running ones); returns (probs, cache) where cache
    feeds head_backward.
    """
    x = np.asarray(features, dtype=np.float32)
    if x.ndim != 2 or x.shape[1] != head.in_dim:
        raise ShapeError(f"features {x.shape} incompatible with head input dim {head.in_dim}")
    if mode not in ("infer", "train"):
        raise ValueError(f"unknown mode {mode!r}")
    train = mode == "train"
    n = x.shape[0]
    if train and n < 2:
        raise NumericError("train-mode batch normalization needs batch size >= 2 "
                           "(running-variance estimator is undefined at size 1)")

    if train:
        mu1, var1 = _batch_stats(x)
    else:
        mu1, var1 = head.bn1_mean, head.bn1_var
    inv1 = 1.0 / np.sqrt(var1 + np.float32(BN_EPS))
    xhat1 = (x - mu1) * inv1
    y1 = head.bn1_gamma * xhat1 + head.bn1_beta

    z1 = T.dense(y1, head.w1, head.b1)
    a1 = T.relu(z1)

    if train and head.dropout_rate > 0.0:
        if rng is None:
            raise ValueError("train mode with dropout needs a random stream")
        keep = (rng.random(a1.shape) >= head.dropout_rate).astype(np.float32)
        mask = keep / np.float32(1.0 - head.dropout_rate)
    else:
        mask = np.ones_like(a1)
    d1 = a1 * mask

    z2 = T.dense(d1, head.w2, head.b2)
    a2 = T.relu(z2)

    if train:
        mu2, var2 = _batch_stats(a2)
    else:
        mu2, var2 = head.bn2_mean, head.bn2_var
    inv2 = 1.0 / np.sqrt(var2 + np.float32(BN_EPS))
    xhat2 = (a2 - mu2) * inv2
    y2 = head.bn2_gamma * xhat2 + head.bn2_beta

    logits = T.dense(y2, head.w_out, head.b_out)
    probs = T.softmax(logits)

    if not train:
        return probs, None

    if update_running:
        m = np.float32(BN_MOMENTUM)
        bessel = n / (n - 1.0)
        dt = head.bn1_mean.dtype
        head.bn1_mean = (m * head.bn1_mean + (1 - m) * mu1).astype(dt)
        head.bn1_var = (m * head.bn1_var + (1 - m) * var1 * bessel).astype(dt)
        head.bn2_mean = (m * head.bn2_mean + (1 - m) * mu2).astype(dt)
        head.bn2_var = (m * head.bn2_var + (1 - m) * var2 * bessel).astype(dt)

    cache = {
        "x": x, "mu1": mu1, "var1": var1, "inv1": inv1, "xhat1": xhat1,
        "z1": z1, "a1": a1, "mask": mask, "d1": d1, "z2": z2, "a2": a2,
        "mu2": mu2, "var2": var2, "inv2": inv2, "xhat2": xhat2,
        "probs": probs,
    }
    return probs, cache


@dataclass
class ModelBundle:
    graph: ModelGraph
    weights: dict[str, np.ndarray]
    head: HeadParams
    class_names: list[str]
    apply_clahe: bool = True
    clahe_params: ClaheParams = field(default_factory=ClaheParams)

    def preprocess(self, img) -> np.ndarray:
        if self.apply_clahe:
            img = clahe(img, self.clahe_params)
        return to_input_tensor(img, self.graph.input_side)


BACKBONE_FILE = "backbone.lwts"
HEAD_FILE = "head.lwts"
BUNDLE_MANIFEST = "bundle.txt"


def save_bundle(directory, weights: dict[str, np.ndarray], head: HeadParams,
                class_names: list[str], apply_clahe: bool = True,
                clahe_params: ClaheParams = ClaheParams(), input_side: int = 256) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_weights(weights, d / BACKBONE_FILE)
    write_weights(head.to_tensors(), d / HEAD_FILE)
    lines = [
        "format=leaflite-bundle-v1",
        f"input_side={input_side}",
        "class_names=" + ",".join(class_names),
        f"apply_clahe={int(apply_clahe)}",
        f"clahe_tiles_x={clahe_params.tiles_x}",
        f"clahe_tiles_y={clahe_params.tiles_y}",
        f"clahe_clip_beta={clahe_params.clip_beta}",
        f"clahe_bins={clahe_params.bins}",
        f"dropout_rate={head.dropout_rate}",
    ]
    (d / BUNDLE_MANIFEST).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_bundle(directory) -> ModelBundle:
    d = Path(directory)
    manifest_path = d / BUNDLE_MANIFEST
    if not manifest_path.is_file():
        raise InputError(f"bundle manifest {manifest_path} not found")
    kv: dict[str, str] = {}
    for line in manifest_path.read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise FormatError(f"{manifest_path}: malformed line {line!r}")
        key, value = line.split("=", 1)
        kv[key] = value
    if kv.get("format") != "leaflite-bundle-v1":
        raise FormatError(f"{manifest_path}: unknown bundle format {kv.get('format')!r}")

    graph = build_mobilenet_v2(input_side=int(kv.get("input_side", 256)))
    weights = load_backbone(d / BACKBONE_FILE, graph)
    head = HeadParams.from_tensors(load_weights(d / HEAD_FILE),
                                   dropout_rate=float(kv.get("dropout_rate", 0.5)))
    params = ClaheParams(
        tiles_x=int(kv.get("clahe_tiles_x", 7)),
        tiles_y=int(kv.get("clahe_tiles_y", 7)),
        clip_beta=float(kv.get("clahe_clip_beta", 3.0)),
        bins=int(kv.get("clahe_bins", 256)),
    )
    return ModelBundle(
        graph=graph,
        weights=weights,
        head=head,
        class_names=kv["class_names"].split(","),
        apply_clahe=bool(int(kv.get("apply_clahe", 1))),
        clahe_params=params,
    )


def predict(image_path, bundle: ModelBundle):
    """(class_id, class_name, probabilities); argmax ties break to the
    lowest class id."""
    img = load_image(image_path)
    t = bundle.preprocess(img)
    feats = forward_features(bundle.graph, bundle.weights, t)
    probs, _ = forward_head(bundle.head, feats, mode="infer")
    class_id = int(np.argmax(probs[0]))
    return class_id, bundle.class_names[class_id], probs[0]
