"""Interleaved inner (surrogate CL) / outer (trigger generator) optimization
with periodic surrogate re-initialization."""

from __future__ import annotations

import csv
import dataclasses
import json
import math
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .augment import AugmentationPipeline, attacker_pipeline, sample_view, sample_views
from .data import ReferenceSplit
from .models import EncoderStack, TriggerGenerator, init_encoder, make_generator, reinit_encoder
from .objectives import ClObjectiveConfig, ContrastiveLearner
from .poisoning import apply_trigger, project_linf
from .utils import TrainingDiverged, derive_seed

ABLATION_MODES = ("full", "no_inner", "no_outer")


@dataclass
class BltoConfig:
    """All bi-level hyperparameters.

    One outer iteration rebuilds the backdoored dataset, runs ``inner_steps``
    surrogate updates, then ``outer_steps`` generator updates. The surrogate
    is re-initialized every ``reinit_every`` iterations to keep the trigger
    effective across training stages rather than against one converged
    encoder.
    """

    outer_iterations: int = 200
    inner_steps: int = 5
    outer_steps: int = 5
    inner_lr: float = 0.03
    outer_lr: float = 1e-3
    reinit_every: int = 20
    inner_method: ClObjectiveConfig = field(default_factory=ClObjectiveConfig)
    batch_size: int = 64
    epsilon: float = 8 / 255
    seed: int = 0
    arch_tag: str = "tiny-conv"
    embed_dim: int = 64
    generator_arch: str = "desk"
    inner_momentum: float = 0.9
    project_in_outer: bool = True

    def __post_init__(self) -> None:
        if min(self.outer_iterations, self.inner_steps, self.outer_steps) < 0:
            raise ValueError("iteration and step counts must be >= 0")
        if self.inner_lr <= 0 or self.outer_lr <= 0:
            raise ValueError("learning rates must be > 0")
        if not 0.0 < self.epsilon <= 1.0:
            raise ValueError(f"epsilon must be in (0, 1], got {self.epsilon}")
        if self.reinit_every < 1:
            raise ValueError("reinit_every must be >= 1")


@dataclass
class BltoTraceRow:
    iteration: int
    inner_loss: float
    outer_similarity: float
    reinit: bool
    wall_clock: float


@dataclass
class BltoTrace:
    rows: list[BltoTraceRow] = field(default_factory=list)
    inner_step_count: int = 0
    outer_step_count: int = 0
    reinit_count: int = 0

    def __len__(self) -> int:
        return len(self.rows)

    def save(self, path: str | Path) -> Path:
        """Deterministic ledger (trace.csv) plus a timing sidecar.

        Wall-clock goes to the sidecar only, so reruns of the same config
        produce bit-identical ledgers.
        """
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["iteration", "inner_loss", "outer_similarity", "reinit"])
            for row in self.rows:
                writer.writerow(
                    [
                        row.iteration,
                        format(row.inner_loss, ".10g"),
                        format(row.outer_similarity, ".10g"),
                        int(row.reinit),
                    ]
                )
        with open(path.parent / "timing.json", "w") as fh:
            json.dump(
                {"per_iteration_seconds": [row.wall_clock for row in self.rows]}, fh, indent=2
            )
        return path


@contextmanager
def _frozen(module: torch.nn.Module):
    states = [p.requires_grad for p in module.parameters()]
    was_training = module.training
    module.eval()
    for p in module.parameters():
        p.requires_grad_(False)
    try:
        yield
    finally:
        for p, s in zip(module.parameters(), states):
            p.requires_grad_(s)
        module.train(was_training)


def inner_step(
    stack: EncoderStack,
    batch: torch.Tensor,
    cfg: BltoConfig,
    pipeline: AugmentationPipeline,
    seed: int = 0,
    optimizer: torch.optim.Optimizer | None = None,
    learner: ContrastiveLearner | None = None,
    lr: float | None = None,
) -> float:
    """One surrogate CL update on a backdoored batch; the generator is untouched."""
    if optimizer is None:
        optimizer = torch.optim.SGD(
            stack.parameters(), lr=cfg.inner_lr, momentum=cfg.inner_momentum
        )
    if learner is None:
        learner = ContrastiveLearner(stack, cfg.inner_method)
    if lr is not None:
        for group in optimizer.param_groups:
            group["lr"] = lr

    stack.train(True)
    views = sample_views(pipeline, batch, seed)
    loss = learner.loss(views)
    if not torch.isfinite(loss):
        raise TrainingDiverged(f"inner CL loss is non-finite: {float(loss.detach())}")
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    learner.after_step()
    return float(loss.detach())


def outer_step(
    gen: TriggerGenerator,
    stack: EncoderStack,
    clean_batch: torch.Tensor,
    reference_batch: torch.Tensor,
    cfg: BltoConfig,
    pipeline: AugmentationPipeline,
    seed: int = 0,
    optimizer: torch.optim.Optimizer | None = None,
) -> float:
    """One generator update ascending the embedding similarity between
    triggered clean data and augmented reference data; the surrogate is frozen."""
    if optimizer is None:
        optimizer = torch.optim.Adam(gen.parameters(), lr=cfg.outer_lr)

    gen.train(True)
    with _frozen(stack):
        perturbed = gen(clean_batch)
        if cfg.project_in_outer:
            perturbed = project_linf(clean_batch, perturbed, cfg.epsilon)
        view_trig, _ = sample_view(pipeline, perturbed, derive_seed(seed, "t1"))
        feats_trig = stack.backbone(view_trig)
        with torch.no_grad():
            view_ref, _ = sample_view(pipeline, reference_batch, derive_seed(seed, "t2"))
            feats_ref = stack.backbone(view_ref)

        trig_n = torch.nn.functional.normalize(feats_trig, dim=-1)
        ref_n = torch.nn.functional.normalize(feats_ref, dim=-1)
        similarity = (trig_n @ ref_n.t()).mean()
        if not torch.isfinite(similarity):
            raise TrainingDiverged(f"outer similarity is non-finite: {float(similarity)}")

        optimizer.zero_grad()
        (-similarity).backward()
        optimizer.step()
    return float(similarity.detach())


def _cosine_lr(base: float, step: int, total: int) -> float:
    if total <= 0:
        return base
    return 0.5 * base * (1.0 + math.cos(math.pi * min(step, total) / total))


def run_blto(
    split: ReferenceSplit,
    cfg: BltoConfig,
    pipeline: AugmentationPipeline | None = None,
) -> tuple[TriggerGenerator, BltoTrace]:
    """Full alternating optimization; returns the trained generator and trace.

    Deterministic given (split, cfg): all batch sampling, augmentation draws,
    and (re-)initializations derive from ``cfg.seed``.
    """
    if pipeline is None:
        pipeline = attacker_pipeline(split.clean_pool.image_size)

    gen = make_generator(cfg.generator_arch, cfg.epsilon, derive_seed(cfg.seed, "gen-init"))
    stack = init_encoder(cfg.arch_tag, cfg.embed_dim, derive_seed(cfg.seed, "enc-init", 0))
    inner_opt = torch.optim.SGD(stack.parameters(), lr=cfg.inner_lr, momentum=cfg.inner_momentum)
    outer_opt = torch.optim.Adam(gen.parameters(), lr=cfg.outer_lr)
    learner = ContrastiveLearner(stack, cfg.inner_method)

    clean_images = torch.from_numpy(split.clean_pool.images)
    ref_images = torch.from_numpy(split.reference_set.images)
    n_clean, n_ref = clean_images.shape[0], ref_images.shape[0]
    total_inner = cfg.outer_iterations * cfg.inner_steps
    inner_step_count = 0
    reinit_count = 0

    trace = BltoTrace()
    for iteration in range(cfg.outer_iterations):
        start = time.monotonic()
        did_reinit = False
        if iteration > 0 and iteration % cfg.reinit_every == 0 and cfg.inner_steps > 0:
            reinit_count += 1
            stack = reinit_encoder(stack, derive_seed(cfg.seed, "enc-init", reinit_count))
            inner_opt = torch.optim.SGD(
                stack.parameters(), lr=cfg.inner_lr, momentum=cfg.inner_momentum
            )
            learner = ContrastiveLearner(stack, cfg.inner_method)
            did_reinit = True

        # Backdoored pool is rebuilt from the current generator every iteration.
        if n_ref > 0 and cfg.inner_steps > 0:
            poisoned_ref = apply_trigger(gen, ref_images, cfg.epsilon)
            d_b = torch.cat([clean_images, poisoned_ref], dim=0)
        else:
            d_b = clean_images

        rng = np.random.default_rng(derive_seed(cfg.seed, "batches", iteration))
        inner_losses = []
        for k in range(cfg.inner_steps):
            idx = rng.choice(d_b.shape[0], size=min(cfg.batch_size, d_b.shape[0]), replace=False)
            lr = _cosine_lr(cfg.inner_lr, inner_step_count, total_inner)
            inner_losses.append(
                inner_step(
                    stack, d_b[idx], cfg, pipeline,
                    seed=derive_seed(cfg.seed, "inner-aug", iteration, k),
                    optimizer=inner_opt, learner=learner, lr=lr,
                )
            )
            inner_step_count += 1

        outer_sims = []
        for j in range(cfg.outer_steps):
            clean_idx = rng.choice(n_clean, size=min(cfg.batch_size, n_clean), replace=False)
            ref_idx = rng.choice(n_ref, size=min(cfg.batch_size, n_ref), replace=False)
            outer_sims.append(
                outer_step(
                    gen, stack, clean_images[clean_idx], ref_images[ref_idx], cfg, pipeline,
                    seed=derive_seed(cfg.seed, "outer-aug", iteration, j),
                    optimizer=outer_opt,
                )
            )

        trace.rows.append(
            BltoTraceRow(
                iteration=iteration,
                inner_loss=float(np.mean(inner_losses)) if inner_losses else float("nan"),
                outer_similarity=float(np.mean(outer_sims)) if outer_sims else float("nan"),
                reinit=did_reinit,
                wall_clock=time.monotonic() - start,
            )
        )
        trace.inner_step_count += len(inner_losses)
        trace.outer_step_count += len(outer_sims)
    trace.reinit_count = reinit_count
    return gen, trace


def ablation_mode(cfg: BltoConfig, mode: str) -> BltoConfig:
    """Zero out one optimization level: ``no_inner`` freezes the random
    surrogate (outer only); ``no_outer`` leaves the generator random."""
    if mode not in ABLATION_MODES:
        raise ValueError(f"mode must be one of {ABLATION_MODES}, got {mode!r}")
    if mode == "no_inner":
        return dataclasses.replace(cfg, inner_steps=0)
    if mode == "no_outer":
        return dataclasses.replace(cfg, outer_steps=0)
    return dataclasses.replace(cfg)
