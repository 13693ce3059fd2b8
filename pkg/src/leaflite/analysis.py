"""Model cost accounting and GradCAM heatmaps.

Two operation counts are reported side by side: the published-comparison
FLOPs convention, which is exactly twice the total parameter count, and
true multiply-accumulate counts from shape propagation. Parameter totals
include batch-norm running statistics (2C trainable + 2C running per BN),
matching how serialized model size relates to the published parameter
figures.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InputError
from .imageproc import resize_bilinear
from .model import (
    HeadParams,
    ModelBundle,
    ModelGraph,
    forward_feature_map,
    propagate_shapes,
)


@dataclass(frozen=True)
class CostRow:
    name: str
    kind: str  # conv | depthwise | bn | dense
    params: int
    macs: int


@dataclass
class CostReport:
    rows: list[CostRow] = field(default_factory=list)

    @property
    def total_params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def total_macs(self) -> int:
        return sum(r.macs for r in self.rows)

    @property
    def flops_published(self) -> int:
        # the published tables' FLOPs column is 2x the parameter column
        return 2 * self.total_params

    @property
    def mflops_published(self) -> float:
        return self.flops_published / 1e6


def _head_rows(head: HeadParams) -> list[CostRow]:
    in_dim, h1 = head.w1.shape
    h2, classes = head.w_out.shape
    return [
        CostRow("head.bn1", "bn", 4 * in_dim, 0),
        CostRow("head.dense1", "dense", in_dim * h1 + h1, in_dim * h1),
        CostRow("head.dense2", "dense", h1 * h2 + h2, h1 * h2),
        CostRow("head.bn2", "bn", 4 * h2, 0),
        CostRow("head.out", "dense", h2 * classes + classes, h2 * classes),
    ]


def cost_report(graph: ModelGraph, head: HeadParams | None = None) -> CostReport:
    """Per-layer parameter and MAC accounting via shape propagation."""
    shapes = dict(propagate_shapes(graph))
    rows: list[CostRow] = []
    for u in graph.conv_units:
        h, w, _ = shapes[u.name]
        k2 = u.kernel * u.kernel
        if u.depthwise:
            params = k2 * u.cin
            macs = k2 * u.cin * h * w
            kind = "depthwise"
        else:
            params = k2 * u.cin * u.cout  # backbone convs carry no bias
            macs = k2 * u.cin * u.cout * h * w
            kind = "conv"
        rows.append(CostRow(f"{u.name}.conv", kind, params, macs))
        rows.append(CostRow(f"{u.name}.bn", "bn", 4 * u.cout, 0))
    if head is not None:
        rows.extend(_head_rows(head))
    return CostReport(rows=rows)


def parameter_count(graph: ModelGraph, head: HeadParams | None = None) -> int:
    return cost_report(graph, head).total_params


def flops_published(graph: ModelGraph, head: HeadParams | None = None) -> int:
    return cost_report(graph, head).flops_published


def true_macs(graph: ModelGraph, head: HeadParams | None = None) -> int:
    return cost_report(graph, head).total_macs


def model_size(bundle_path) -> float:
    """Serialized size in MB (2^20 bytes); a directory sums its files."""
    p = Path(bundle_path)
    if p.is_file():
        size = p.stat().st_size
    elif p.is_dir():
        size = sum(f.stat().st_size for f in sorted(p.rglob("*")) if f.is_file())
    else:
        raise InputError(f"bundle path {bundle_path} does not exist")
    return size / 2**20


def format_cost_table(report: CostReport, size_mb: float | None = None) -> str:
    width = max(len(r.name) for r in report.rows) + 2
    lines = [f"{'Layer':<{width}}{'Kind':<11}{'Params':>12}{'MACs':>14}"]
    for r in report.rows:
        lines.append(f"{r.name:<{width}}{r.kind:<11}{r.params:>12}{r.macs:>14}")
    lines.append("")
    lines.append(f"total_params={report.total_params}")
    lines.append(f"flops_published={report.flops_published}")
    lines.append(f"mflops_published={report.mflops_published:.4f}")
    lines.append(f"total_macs={report.total_macs}")
    if size_mb is not None:
        lines.append(f"model_size_mb={size_mb:.4f}")
    return "\n".join(lines) + "\n"


def cost_csv(report: CostReport, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("layer,kind,params,macs\n")
        for r in report.rows:
            fh.write(f"{r.name},{r.kind},{r.params},{r.macs}\n")


@dataclass
class Heatmap:
    raw: np.ndarray      # target-layer grid, normalized to [0, 1]
    values: np.ndarray   # upsampled to the input side, [0, 1]
    overlay: np.ndarray  # uint8 RGB blend over the input image


def _head_input_gradient(head: HeadParams, features: np.ndarray, class_id: int) -> np.ndarray:
    """d logit[class_id] / d features in infer mode (running BN stats)."""
    from .tensor import dense, relu

    x = np.asarray(features, dtype=np.float32)
    inv1 = 1.0 / np.sqrt(head.bn1_var + np.float32(1e-3))
    y1 = head.bn1_gamma * (x - head.bn1_mean) * inv1 + head.bn1_beta
    z1 = dense(y1, head.w1, head.b1)
    a1 = relu(z1)
    z2 = dense(a1, head.w2, head.b2)
    a2 = relu(z2)
    inv2 = 1.0 / np.sqrt(head.bn2_var + np.float32(1e-3))

    d_y2 = np.broadcast_to(head.w_out[:, class_id], a2.shape)
    d_a2 = d_y2 * head.bn2_gamma * inv2
    d_z2 = d_a2 * (z2 > 0)
    d_a1 = d_z2 @ head.w2.T
    d_z1 = d_a1 * (z1 > 0)
    d_y1 = d_z1 @ head.w1.T
    return d_y1 * head.bn1_gamma * inv1


def _heat_colormap(values: np.ndarray) -> np.ndarray:
    """Black -> red -> yellow -> white ramp for values in [0, 1]."""
    v = np.clip(values, 0.0, 1.0)
    r = np.clip(3.0 * v, 0.0, 1.0)
    g = np.clip(3.0 * v - 1.0, 0.0, 1.0)
    b = np.clip(3.0 * v - 2.0, 0.0, 1.0)
    return (np.stack([r, g, b], axis=-1) * 255.0).astype(np.uint8)


def gradcam(img: np.ndarray, bundle: ModelBundle, class_id: int,
            blend: float = 0.5) -> Heatmap:
    """Class-activation heatmap over the final conv feature map.

    Channel weights are the spatial means of d logit[class]/d activation,
    obtained analytically through the global average pool (uniform 1/HW
    factor) and the head backward pass; the map is ReLU(sum_k alpha_k A_k)
    normalized to [0, 1] and bilinearly upsampled.
    """
    if not 0 <= class_id < len(bundle.class_names):
        raise InputError(f"target class {class_id} outside 0..{len(bundle.class_names) - 1}")
    t = bundle.preprocess(img)
    fmap = forward_feature_map(bundle.graph, bundle.weights, t)[0]  # (h, w, C)
    h, w, _ = fmap.shape
    feats = fmap.mean(axis=(0, 1), keepdims=False)[None, :]
    grad = _head_input_gradient(bundle.head, feats, class_id)[0]
    alpha = grad / (h * w)
    cam = np.maximum(fmap @ alpha, 0.0)
    peak = cam.max()
    if peak > 0:
        cam = cam / peak
    side = bundle.graph.input_side
    values = np.clip(resize_bilinear(cam.astype(np.float32), side, side), 0.0, 1.0)
    base = resize_bilinear(np.asarray(img, np.float32), side, side)
    overlay = np.clip(
        (1.0 - blend) * base + blend * _heat_colormap(values).astype(np.float32), 0, 255
    ).astype(np.uint8)
    return Heatmap(raw=cam.astype(np.float32), values=values.astype(np.float32), overlay=overlay)
