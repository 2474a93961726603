"""Victim-side contrastive pretraining on a (possibly poisoned) dataset.

The victim only ever sees the poisoned dataset export; it never touches the
trigger generator, matching the data-poisoning threat model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from .augment import AugmentationPipeline, sample_views, victim_pipeline
from .data import LabeledImageSet
from .evaluation import MetricsRecord
from .models import EncoderStack, init_encoder
from .objectives import CL_METHODS, ClObjectiveConfig, ContrastiveLearner
from .utils import TrainingDiverged, derive_seed


@dataclass
class VictimConfig:
    method: str = "simclr"
    arch_tag: str = "tiny-conv"
    embed_dim: int = 64
    epochs: int = 100
    batch_size: int = 64
    base_lr: float = 0.06
    final_lr: float = 0.0
    momentum: float = 0.9
    weight_decay: float = 5e-4
    include_blur: bool = False
    temperature: float = 0.2
    ema_momentum: float = 0.99
    simsiam_halved: bool = False
    seed: int = 0

    def __post_init__(self) -> None:
        if self.method not in CL_METHODS:
            raise ValueError(f"method must be one of {CL_METHODS}, got {self.method!r}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 2:
            raise ValueError(f"batch_size must be >= 2, got {self.batch_size}")

    def objective(self) -> ClObjectiveConfig:
        return ClObjectiveConfig(
            method=self.method,
            temperature=self.temperature,
            ema_momentum=self.ema_momentum,
            simsiam_halved=self.simsiam_halved,
        )


def _epoch_lr(cfg: VictimConfig, epoch: int) -> float:
    # Cosine decay from base to final over the configured epochs.
    progress = epoch / max(cfg.epochs, 1)
    return cfg.final_lr + 0.5 * (cfg.base_lr - cfg.final_lr) * (1.0 + math.cos(math.pi * progress))


def train_victim(
    dataset: LabeledImageSet,
    cfg: VictimConfig,
    monitor: Callable[[EncoderStack, int], MetricsRecord] | None = None,
    pipeline: AugmentationPipeline | None = None,
    norm: tuple | None = None,
) -> tuple[EncoderStack, list[MetricsRecord]]:
    """Train an encoder with the configured CL method, monitoring per epoch.

    Raises :class:`TrainingDiverged` (carrying the partial ledger) if the
    loss becomes non-finite.
    """
    if len(dataset) == 0:
        raise ValueError("training dataset must be non-empty")
    if pipeline is None:
        if norm is None:
            pipeline = victim_pipeline(dataset.image_size, include_blur=cfg.include_blur)
        else:
            pipeline = victim_pipeline(
                dataset.image_size, include_blur=cfg.include_blur, mean=norm[0], std=norm[1]
            )

    stack = init_encoder(cfg.arch_tag, cfg.embed_dim, derive_seed(cfg.seed, "victim-init"))
    learner = ContrastiveLearner(stack, cfg.objective())
    optimizer = torch.optim.SGD(
        stack.parameters(), lr=cfg.base_lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay
    )
    images = torch.from_numpy(dataset.images)

    records: list[MetricsRecord] = []
    for epoch in range(cfg.epochs):
        lr = _epoch_lr(cfg, epoch)
        for group in optimizer.param_groups:
            group["lr"] = lr

        rng = np.random.default_rng(derive_seed(cfg.seed, "victim-perm", epoch))
        order = rng.permutation(len(dataset))
        learner.train(True)
        epoch_losses = []
        for step, start in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            if idx.size < 2:
                continue  # batch-norm needs at least two samples
            views = sample_views(
                pipeline, images[idx], derive_seed(cfg.seed, "victim-aug", epoch, step)
            )
            loss = learner.loss(views)
            if not torch.isfinite(loss):
                raise TrainingDiverged(
                    f"victim loss non-finite at epoch {epoch} step {step}", records
                )
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            learner.after_step()
            epoch_losses.append(float(loss.detach()))

        if monitor is not None:
            record = monitor(stack, epoch)
            record.train_loss = float(np.mean(epoch_losses)) if epoch_losses else float("nan")
            records.append(record)
    return stack, records


def mix_datasets(
    primary: LabeledImageSet, extra: LabeledImageSet, ratio: float, seed: int = 0
) -> LabeledImageSet:
    """Mix two datasets so the primary makes up ``ratio`` of the output.

    Uses as many samples as the ratio and the two pools allow. Extra-set
    labels are shifted past the primary classes so label ranges stay valid.
    """
    if primary.images.shape[1:] != extra.images.shape[1:]:
        raise ValueError(
            f"image shape mismatch: {primary.images.shape[1:]} vs {extra.images.shape[1:]}"
        )
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"ratio must be in [0, 1], got {ratio}")
    if ratio == 1.0:
        return primary.subset(np.arange(len(primary)))
    if ratio == 0.0:
        return extra.subset(np.arange(len(extra)))

    total = int(min(len(primary) / ratio, len(extra) / (1.0 - ratio)))
    n_primary = int(round(ratio * total))
    n_extra = total - n_primary

    rng = np.random.default_rng(seed)
    p_idx = rng.choice(len(primary), size=n_primary, replace=False)
    e_idx = rng.choice(len(extra), size=n_extra, replace=False)

    images = np.concatenate([primary.images[p_idx], extra.images[e_idx]], axis=0)
    labels = np.concatenate(
        [primary.labels[p_idx], extra.labels[e_idx] + primary.num_classes], axis=0
    )
    order = rng.permutation(total)
    class_names = list(primary.class_names) + [f"extra_{n}" for n in extra.class_names]
    return LabeledImageSet(images[order], labels[order], class_names, split_tag=primary.split_tag)
