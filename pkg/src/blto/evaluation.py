"""Downstream evaluation: weighted kNN prediction, backdoor metrics,
normalized centroid similarity, per-epoch monitoring, and embedding export."""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .augment import AugmentationPipeline, normalize, sample_views
from .data import LabeledImageSet
from .models import EncoderStack, encode
from .objectives import alignment_loss, uniformity_loss
from .utils import derive_seed


@dataclass
class MetricsRecord:
    """One ledger row per training epoch."""

    epoch: int
    ba: float
    asr: float
    asr_all: float
    s_n: float
    alignment: float
    uniformity: float
    train_loss: float = float("nan")

    FIELDS = ("epoch", "ba", "asr", "asr_all", "s_n", "alignment", "uniformity", "train_loss")

    def as_row(self) -> list[str]:
        return [str(self.epoch)] + [
            format(getattr(self, name), ".10g") for name in self.FIELDS[1:]
        ]


@dataclass
class CentroidTable:
    class_centroids: np.ndarray  # [num_classes, d]
    backdoor_centroid: np.ndarray  # [d]
    target_class: int


def featurize(
    stack: EncoderStack,
    images: np.ndarray,
    norm: tuple[tuple[float, ...], tuple[float, ...]],
    batch_size: int = 256,
) -> np.ndarray:
    """Encoder embeddings of raw [0, 1] images (normalized, eval mode, no grad)."""
    mean, std = norm
    outs = []
    with torch.no_grad():
        for start in range(0, images.shape[0], batch_size):
            x = torch.from_numpy(images[start : start + batch_size])
            outs.append(encode(stack, normalize(x, mean, std)).numpy())
    if not outs:
        return np.zeros((0, stack.embed_dim), dtype=np.float32)
    return np.concatenate(outs, axis=0)


def _l2_normalize(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.maximum(norms, 1e-12)


def knn_predict(
    memory_features: np.ndarray,
    memory_labels: np.ndarray,
    query_features: np.ndarray,
    k: int = 200,
    temperature: float = 0.1,
    num_classes: int | None = None,
) -> np.ndarray:
    """Weighted k-nearest-neighbor vote by cosine similarity.

    Each of the k nearest memory points votes for its label with weight
    exp(similarity / temperature).
    """
    if memory_features.shape[0] == 0:
        raise ValueError("memory must be non-empty")
    if k > memory_features.shape[0]:
        warnings.warn(
            f"k={k} larger than memory size {memory_features.shape[0]}; clamping"
        )
        k = memory_features.shape[0]
    n_classes = num_classes or int(memory_labels.max()) + 1

    mem = _l2_normalize(memory_features.astype(np.float64))
    query = _l2_normalize(query_features.astype(np.float64))
    sims = query @ mem.T
    top_idx = np.argsort(-sims, axis=1)[:, :k]
    top_sims = np.take_along_axis(sims, top_idx, axis=1)
    top_labels = memory_labels[top_idx]
    weights = np.exp(top_sims / temperature)

    scores = np.zeros((query.shape[0], n_classes), dtype=np.float64)
    for c in range(n_classes):
        scores[:, c] = np.where(top_labels == c, weights, 0.0).sum(axis=1)
    return scores.argmax(axis=1).astype(np.int64)


def compute_ba(
    stack: EncoderStack,
    clean_test: LabeledImageSet,
    memory: LabeledImageSet,
    norm: tuple,
    k: int = 200,
    temperature: float = 0.1,
) -> float:
    """Accuracy on intact test inputs with a clean-memory kNN predictor."""
    if len(clean_test) == 0:
        raise ValueError("test set must be non-empty")
    mem_feats = featurize(stack, memory.images, norm)
    preds = knn_predict(
        mem_feats, memory.labels, featurize(stack, clean_test.images, norm),
        k=k, temperature=temperature, num_classes=memory.num_classes,
    )
    return float((preds == clean_test.labels).mean())


def compute_asr(
    stack: EncoderStack,
    triggered_images: np.ndarray,
    true_labels: np.ndarray,
    memory: LabeledImageSet,
    target: int,
    norm: tuple,
    k: int = 200,
    temperature: float = 0.1,
    exclude_target_class: bool = True,
) -> float:
    """Fraction of triggered inputs predicted as the target class.

    Ground-truth target-class inputs are excluded by default so a merely
    accurate model does not inflate the rate.
    """
    if triggered_images.shape[0] == 0:
        raise ValueError("triggered test set must be non-empty")
    mem_feats = featurize(stack, memory.images, norm)
    preds = knn_predict(
        mem_feats, memory.labels, featurize(stack, triggered_images, norm),
        k=k, temperature=temperature, num_classes=memory.num_classes,
    )
    if exclude_target_class:
        mask = true_labels != target
        if not mask.any():
            raise ValueError("no non-target-class samples to evaluate")
        preds, _ = preds[mask], true_labels[mask]
    return float((preds == target).mean())


def centroid_table(
    stack: EncoderStack,
    train_set: LabeledImageSet,
    triggered_images: np.ndarray,
    target: int,
    norm: tuple,
    per_class_cap: int = 512,
) -> CentroidTable:
    """Per-class embedding centroids from the clean training set plus the
    centroid of trigger-injected images."""
    if triggered_images.shape[0] == 0:
        raise ValueError("triggered set must be non-empty")
    centroids = []
    for c in range(train_set.num_classes):
        idx = np.flatnonzero(train_set.labels == c)[:per_class_cap]
        if idx.size == 0:
            raise ValueError(f"class {c} has no samples in the training set")
        centroids.append(featurize(stack, train_set.images[idx], norm).mean(axis=0))
    backdoor = featurize(stack, triggered_images, norm).mean(axis=0)
    return CentroidTable(np.stack(centroids), backdoor, target)


def normalized_similarity_from_centroids(table: CentroidTable) -> float:
    """Cosine to the target centroid over the mean cosine to all centroids."""
    bd = table.backdoor_centroid.astype(np.float64)
    bd_norm = np.linalg.norm(bd)
    if bd_norm == 0:
        raise ValueError("backdoor centroid has zero norm")
    sims = []
    for c in table.class_centroids.astype(np.float64):
        c_norm = np.linalg.norm(c)
        if c_norm == 0:
            raise ValueError("class centroid has zero norm")
        sims.append(float(bd @ c / (bd_norm * c_norm)))
    sims = np.asarray(sims)
    mean_sim = sims.mean()
    if mean_sim == 0:
        raise ValueError("mean centroid similarity is zero; ratio undefined")
    return float(sims[table.target_class] / mean_sim)


def normalized_similarity(
    stack: EncoderStack,
    train_set: LabeledImageSet,
    triggered_images: np.ndarray,
    target: int,
    norm: tuple,
    per_class_cap: int = 512,
) -> float:
    table = centroid_table(stack, train_set, triggered_images, target, norm, per_class_cap)
    return normalized_similarity_from_centroids(table)


@dataclass
class MonitorContext:
    """Fixed evaluation inputs reused across epochs of one victim run."""

    memory: LabeledImageSet
    clean_test: LabeledImageSet
    triggered_test_images: np.ndarray
    test_labels: np.ndarray
    sn_train: LabeledImageSet
    sn_triggered_images: np.ndarray
    backdoored_images: np.ndarray
    victim_aug: AugmentationPipeline
    target_class: int
    norm: tuple
    knn_k: int = 200
    knn_temperature: float = 0.1
    per_class_cap: int = 512
    eval_seed: int = 0


def build_monitor_context(
    train_set: LabeledImageSet,
    test_set: LabeledImageSet,
    trigger_fn: Callable[[np.ndarray], np.ndarray],
    target: int,
    victim_aug: AugmentationPipeline,
    norm: tuple,
    backdoored_images: np.ndarray | None = None,
    monitor_cap: int = 512,
    knn_k: int = 200,
    knn_temperature: float = 0.1,
    per_class_cap: int = 512,
    eval_seed: int = 0,
) -> MonitorContext:
    """Precompute the triggered copies used by every per-epoch evaluation.

    ``trigger_fn`` maps raw images to their trigger-injected versions (identity
    for the no-attack arm). ``backdoored_images`` are the poisoned samples
    actually present in the training set; alignment/uniformity are tracked on
    them.
    """
    triggered_test = trigger_fn(test_set.images)
    sn_subset = train_set.images[:monitor_cap]
    sn_triggered = trigger_fn(sn_subset)
    if backdoored_images is None or backdoored_images.shape[0] == 0:
        backdoored_images = sn_triggered[: min(128, sn_triggered.shape[0])]
    return MonitorContext(
        memory=train_set,
        clean_test=test_set,
        triggered_test_images=triggered_test,
        test_labels=test_set.labels,
        sn_train=train_set,
        sn_triggered_images=sn_triggered,
        backdoored_images=backdoored_images,
        victim_aug=victim_aug,
        target_class=target,
        norm=norm,
        knn_k=knn_k,
        knn_temperature=knn_temperature,
        per_class_cap=per_class_cap,
        eval_seed=eval_seed,
    )


def monitor_epoch(stack: EncoderStack, ctx: MonitorContext, epoch: int) -> MetricsRecord:
    """Evaluate one epoch: kNN metrics, normalized similarity, and the
    alignment/uniformity pair on the backdoored samples."""
    mem_feats = featurize(stack, ctx.memory.images, ctx.norm)
    clean_preds = knn_predict(
        mem_feats, ctx.memory.labels, featurize(stack, ctx.clean_test.images, ctx.norm),
        k=ctx.knn_k, temperature=ctx.knn_temperature, num_classes=ctx.memory.num_classes,
    )
    ba = float((clean_preds == ctx.clean_test.labels).mean())

    trig_preds = knn_predict(
        mem_feats, ctx.memory.labels, featurize(stack, ctx.triggered_test_images, ctx.norm),
        k=ctx.knn_k, temperature=ctx.knn_temperature, num_classes=ctx.memory.num_classes,
    )
    asr_all = float((trig_preds == ctx.target_class).mean())
    mask = ctx.test_labels != ctx.target_class
    asr = float((trig_preds[mask] == ctx.target_class).mean()) if mask.any() else asr_all

    s_n = normalized_similarity(
        stack, ctx.sn_train, ctx.sn_triggered_images, ctx.target_class,
        ctx.norm, ctx.per_class_cap,
    )

    views = sample_views(
        ctx.victim_aug,
        torch.from_numpy(ctx.backdoored_images),
        derive_seed(ctx.eval_seed, "monitor-views", epoch),
    )
    with torch.no_grad():
        emb1 = encode(stack, views.view1)
        emb2 = encode(stack, views.view2)
        align = float(alignment_loss(emb1, emb2))
        unif = float(uniformity_loss(torch.cat([emb1, emb2], dim=0)))

    return MetricsRecord(
        epoch=epoch, ba=ba, asr=asr, asr_all=asr_all, s_n=s_n,
        alignment=align, uniformity=unif,
    )


def write_metrics(
    records: list[MetricsRecord], path: str | Path, run_id: str, config_hash: str
) -> Path:
    """Append-only metrics ledger; one row per epoch plus run identity columns."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(MetricsRecord.FIELDS) + ["run_id", "config_hash"])
        for rec in records:
            writer.writerow(rec.as_row() + [run_id, config_hash])
    return path


def read_metrics(path: str | Path) -> list[MetricsRecord]:
    records = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            records.append(
                MetricsRecord(
                    epoch=int(row["epoch"]),
                    ba=float(row["ba"]),
                    asr=float(row["asr"]),
                    asr_all=float(row["asr_all"]),
                    s_n=float(row["s_n"]),
                    alignment=float(row["alignment"]),
                    uniformity=float(row["uniformity"]),
                    train_loss=float(row.get("train_loss", "nan")),
                )
            )
    return records


def export_embeddings(
    stack: EncoderStack,
    clean_set: LabeledImageSet,
    triggered_images: np.ndarray,
    triggered_labels: np.ndarray,
    path: str | Path,
    norm: tuple,
) -> Path:
    """Write embeddings + labels + poisoned flags with a 2-D PCA projection.

    One row per clean sample followed by one per triggered sample; suitable
    for external cluster plotting.
    """
    clean_emb = featurize(stack, clean_set.images, norm)
    trig_emb = featurize(stack, triggered_images, norm)
    emb = np.concatenate([clean_emb, trig_emb], axis=0)
    labels = np.concatenate([clean_set.labels, triggered_labels])
    poisoned = np.concatenate(
        [np.zeros(len(clean_set), dtype=np.int64), np.ones(trig_emb.shape[0], dtype=np.int64)]
    )

    centered = emb.astype(np.float64) - emb.mean(axis=0, dtype=np.float64)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    components = vt[:2]
    # Fix the SVD sign ambiguity for reproducible files.
    for i in range(components.shape[0]):
        j = int(np.abs(components[i]).argmax())
        if components[i, j] < 0:
            components[i] = -components[i]
    pca = centered @ components.T

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    dim = emb.shape[1]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["id", "label", "poisoned"] + [f"e{i}" for i in range(dim)] + ["pca0", "pca1"]
        )
        for idx in range(emb.shape[0]):
            writer.writerow(
                [idx, int(labels[idx]), int(poisoned[idx])]
                + [format(v, ".8g") for v in emb[idx]]
                + [format(v, ".8g") for v in pca[idx]]
            )
    return path
