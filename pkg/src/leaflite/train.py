"""Classifier-head training: Adam on categorical cross-entropy with
patience-based LR decay, early stopping, and best-checkpoint retention.

Schedule defaults follow the training protocol: batch size 16, at most
1000 epochs, initial learning rate 1e-5, an epoch counts as "patient"
when validation accuracy improves by no more than 1e-4, the learning rate
decays by 0.1 after every 4 consecutive patient epochs, and training
stops after 10.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import dataset as D
from .augment import AugmentConfig, random_augment, stream_for
from .errors import NumericError
from .imageproc import load_image, to_input_tensor
from .model import HeadParams, forward_features, forward_head

# Stream scope tags: 0/1/2 are the dataset splits, 3 is dropout.
_SPLIT_TAG = {D.TRAIN: 0, D.VAL: 1, D.TEST: 2}
_DROPOUT_TAG = 3


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    max_epochs: int = 1000
    initial_lr: float = 1e-5
    min_delta: float = 1e-4
    early_stop_patience: int = 10
    lr_patience: int = 4
    lr_factor: float = 0.1
    dropout_rate: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if min(self.batch_size, self.max_epochs, self.early_stop_patience, self.lr_patience) < 1:
            raise ValueError("batch_size, max_epochs and patiences must be positive")
        if not 0.0 < self.lr_factor < 1.0:
            raise ValueError("lr_factor must lie in (0, 1)")
        if self.initial_lr <= 0 or self.min_delta <= 0:
            raise ValueError("initial_lr and min_delta must be positive")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float
    lr: float
    patient: bool
    checkpoint: bool


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "train_acc", "val_loss", "val_acc", "lr", "patient"])
            for r in self.records:
                w.writerow([r.epoch, repr(r.train_loss), repr(r.train_acc), repr(r.val_loss),
                            repr(r.val_acc), repr(r.lr), int(r.patient)])


def cross_entropy(probs, labels) -> float:
    """Mean -log p(correct class), probabilities floored at 1e-12."""
    probs = np.asarray(probs)
    labels = np.asarray(labels)
    picked = probs[np.arange(len(labels)), labels]
    return float(-np.mean(np.log(np.maximum(picked, 1e-12))))


def head_backward(head: HeadParams, cache: dict, labels) -> dict[str, np.ndarray]:
    """Gradients of the mean cross-entropy for every trainable head tensor.

    Uses the combined softmax + cross-entropy gradient (probs - onehot)/N
    and the full batch-statistics backward pass for both BN layers.
    """
    labels = np.asarray(labels)
    probs = cache["probs"]
    n = probs.shape[0]
    if len(labels) != n:
        raise ValueError(f"cache batch {n} != labels {len(labels)}")

    d_logits = probs.copy()
    d_logits[np.arange(n), labels] -= 1.0
    d_logits /= n

    y2 = head.bn2_gamma * cache["xhat2"] + head.bn2_beta
    g_w_out = y2.T @ d_logits
    g_b_out = d_logits.sum(axis=0)
    d_y2 = d_logits @ head.w_out.T

    g_bn2_gamma = (d_y2 * cache["xhat2"]).sum(axis=0)
    g_bn2_beta = d_y2.sum(axis=0)
    d_xhat2 = d_y2 * head.bn2_gamma
    d_a2 = (cache["inv2"] / n) * (
        n * d_xhat2 - d_xhat2.sum(axis=0) - cache["xhat2"] * (d_xhat2 * cache["xhat2"]).sum(axis=0)
    )

    d_z2 = d_a2 * (cache["z2"] > 0)
    g_w2 = cache["d1"].T @ d_z2
    g_b2 = d_z2.sum(axis=0)
    d_d1 = d_z2 @ head.w2.T

    d_a1 = d_d1 * cache["mask"]
    d_z1 = d_a1 * (cache["z1"] > 0)
    y1 = head.bn1_gamma * cache["xhat1"] + head.bn1_beta
    g_w1 = y1.T @ d_z1
    g_b1 = d_z1.sum(axis=0)
    d_y1 = d_z1 @ head.w1.T

    g_bn1_gamma = (d_y1 * cache["xhat1"]).sum(axis=0)
    g_bn1_beta = d_y1.sum(axis=0)

    return {
        "bn1_gamma": g_bn1_gamma, "bn1_beta": g_bn1_beta,
        "w1": g_w1, "b1": g_b1, "w2": g_w2, "b2": g_b2,
        "bn2_gamma": g_bn2_gamma, "bn2_beta": g_bn2_beta,
        "w_out": g_w_out, "b_out": g_b_out,
    }


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-7

    @classmethod
    def for_params(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls(m={k: np.zeros_like(p) for k, p in params.items()},
                   v={k: np.zeros_like(p) for k, p in params.items()})


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState, lr: float) -> None:
    """One Adam update, in place on the parameter arrays."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for k, p in params.items():
        g = grads[k]
        state.m[k] = b1 * state.m[k] + (1.0 - b1) * g
        state.v[k] = b2 * state.v[k] + (1.0 - b2) * g * g
        m_hat = state.m[k] / bc1
        v_hat = state.v[k] / bc2
        p -= (lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.dtype)


def _run_split(head, batches, train_mode, dropout_rng, state=None, lr=None):
    total_loss = 0.0
    correct = 0
    count = 0
    for batch_idx, (x, y) in enumerate(batches):
        y = np.asarray(y)
        if train_mode:
            probs, cache = forward_head(head, x, mode="train", rng=dropout_rng)
        else:
            probs, _ = forward_head(head, x, mode="infer")
        loss = cross_entropy(probs, y)
        if not np.isfinite(loss):
            raise NumericError(f"non-finite loss on batch {batch_idx} "
                               f"(size {len(y)}, labels {np.unique(y).tolist()})")
        if train_mode:
            grads = head_backward(head, cache, y)
            params = {k: getattr(head, k) for k in HeadParams.TRAINABLE}
            adam_step(params, grads, state, lr)
        total_loss += loss * len(y)
        correct += int((probs.argmax(axis=1) == y).sum())
        count += len(y)
    return total_loss / count, correct / count


def fit(head: HeadParams, train_batches, val_batches, cfg: TrainConfig):
    """Core training loop over feature-batch streams.

    train_batches(epoch) and val_batches(epoch) yield (features, labels)
    pairs; epochs are numbered from 1. Returns (best_head, history).
    """
    params = {k: getattr(head, k) for k in HeadParams.TRAINABLE}
    state = AdamState.for_params(params)
    dropout_rng = stream_for(cfg.seed, _DROPOUT_TAG)

    history = TrainHistory()
    lr = cfg.initial_lr
    best_acc = -np.inf
    best_head = head.copy()
    lr_counter = 0
    stop_counter = 0

    for epoch in range(1, cfg.max_epochs + 1):
        epoch_lr = lr
        train_loss, train_acc = _run_split(head, train_batches(epoch), True, dropout_rng,
                                           state=state, lr=lr)
        val_loss, val_acc = _run_split(head, val_batches(epoch), False, None)

        significant = (val_acc - best_acc) > cfg.min_delta
        if significant:
            best_acc = val_acc
            best_head = head.copy()
            lr_counter = 0
            stop_counter = 0
        else:
            lr_counter += 1
            stop_counter += 1
            if lr_counter >= cfg.lr_patience:
                lr *= cfg.lr_factor
                lr_counter = 0
        history.records.append(EpochRecord(epoch, train_loss, train_acc, val_loss, val_acc,
                                           epoch_lr, not significant, significant))
        if stop_counter >= cfg.early_stop_patience:
            break
    return best_head, history


def corpus_feature_batches(graph, weights, index, assignment, split, epoch,
                           cfg: TrainConfig, aug_cfg: AugmentConfig | None,
                           batch_size: int | None = None):
    """Stream (features, labels) for a split: load, augment, embed.

    Augmentation streams are split per (seed, split, epoch, entry), so the
    result is independent of iteration scheduling. Validation and test
    streams pass epoch 0 for a run-stable signal.
    """
    entry_pos = {e.path: i for i, e in enumerate(index.entries)}
    stream_epoch = epoch if split == D.TRAIN else 0
    for batch in D.batch_iter(index, assignment, split, batch_size or cfg.batch_size,
                              epoch, cfg.seed):
        imgs = []
        labels = []
        for path, class_id in batch:
            img = load_image(f"{index.root}/{path}")
            if aug_cfg is not None:
                rng = stream_for(cfg.seed, _SPLIT_TAG[split], stream_epoch, entry_pos[path])
                img = random_augment(img, aug_cfg, rng)
            imgs.append(to_input_tensor(img, graph.input_side)[0])
            labels.append(class_id)
        feats = forward_features(graph, weights, np.stack(imgs))
        yield feats, np.asarray(labels)


def train_head(graph, weights, head: HeadParams, index, assignment,
               cfg: TrainConfig, aug_cfg: AugmentConfig | None = AugmentConfig()):
    """Train on the TRAIN split with early stopping against VAL.

    The corpus behind `index` is expected to be CLAHE-enhanced already;
    augmentation happens at runtime on top of it.
    """

    def train_batches(epoch):
        return corpus_feature_batches(graph, weights, index, assignment, D.TRAIN, epoch,
                                      cfg, aug_cfg)

    def val_batches(epoch):
        return corpus_feature_batches(graph, weights, index, assignment, D.VAL, epoch,
                                      cfg, aug_cfg)

    return fit(head, train_batches, val_batches, cfg)
