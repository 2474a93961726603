"""Backdoored dataset construction: budget-projected trigger injection,
poisoning bookkeeping, and the fixed-patch baseline."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .data import LabeledImageSet, ReferenceSplit, load_image_dir, save_image_dir
from .models import TriggerGenerator, generate

ATTACK_KINDS = ("blto", "patch", "none")


@dataclass
class PoisonManifest:
    """Which samples of a dataset were poisoned, and how."""

    poisoned_indices: list[int]
    target_class: int
    epsilon: float
    poisoning_rate: float
    attack_kind: str = "blto"

    def __post_init__(self) -> None:
        if self.attack_kind not in ATTACK_KINDS:
            raise ValueError(f"attack_kind must be one of {ATTACK_KINDS}, got {self.attack_kind!r}")


@dataclass
class PatchSpec:
    """Fixed high-contrast corner patch; a non-optimized baseline trigger."""

    size: int = 5
    values: tuple[float, float] = (0.0, 1.0)
    corner: str = "lower-right"


def project_linf(original, perturbed, epsilon: float):
    """Clip ``perturbed`` into the L-inf ball of ``original``, then into [0, 1].

    Accepts matching numpy arrays or torch tensors; the torch path is
    differentiable and is what the trigger optimization trains through.
    """
    if original.shape != perturbed.shape:
        raise ValueError(f"shape mismatch: {tuple(original.shape)} vs {tuple(perturbed.shape)}")
    if epsilon < 0:
        raise ValueError(f"epsilon must be >= 0, got {epsilon}")
    if isinstance(original, torch.Tensor):
        out = torch.max(torch.min(perturbed, original + epsilon), original - epsilon)
        return out.clamp(0.0, 1.0)
    out = np.clip(perturbed, original - epsilon, original + epsilon)
    return np.clip(out, 0.0, 1.0)


def _snap_delta_to_grid(original: torch.Tensor, perturbed: torch.Tensor, epsilon: float) -> torch.Tensor:
    # Deployed poison lives in 8-bit image files: quantize the perturbation to
    # the 1/255 grid and shrink the budget to the nearest grid multiple so the
    # bound survives the round trip exactly.
    grid_eps = np.floor(epsilon * 255.0 + 1e-9) / 255.0
    delta = torch.round((perturbed - original) * 255.0) / 255.0
    delta = delta.clamp(-grid_eps, grid_eps)
    out = (original + delta).clamp(0.0, 1.0)
    # Canonicalize to the exact float a saved-then-reloaded 8-bit image yields.
    return torch.round(out * 255.0) / 255.0


def apply_trigger(gen: TriggerGenerator, images, epsilon: float | None = None, batch_size: int = 256):
    """Deployable trigger injection: generate, project into the budget, snap to
    the pixel grid. Accepts numpy [N, C, H, W] or torch tensors and returns
    the same type."""
    eps = gen.epsilon if epsilon is None else float(epsilon)
    is_numpy = isinstance(images, np.ndarray)
    batch_all = torch.from_numpy(images) if is_numpy else images
    outs = []
    was_training = gen.training
    gen.eval()
    try:
        with torch.no_grad():
            for start in range(0, batch_all.shape[0], batch_size):
                x = batch_all[start : start + batch_size]
                raw = generate(gen, x)
                outs.append(_snap_delta_to_grid(x, project_linf(x, raw, eps), eps))
    finally:
        gen.train(was_training)
    out = torch.cat(outs, dim=0) if outs else batch_all[:0]
    return out.numpy() if is_numpy else out


def trigger_difference(gen: TriggerGenerator, images, epsilon: float | None = None):
    """Absolute difference between backdoored and original images."""
    triggered = apply_trigger(gen, images, epsilon)
    return np.abs(triggered - images) if isinstance(images, np.ndarray) else (triggered - images).abs()


def _rebuild(split: ReferenceSplit, reference_images: np.ndarray) -> LabeledImageSet:
    total = split.total_size
    shape = (total,) + split.clean_pool.images.shape[1:]
    images = np.zeros(shape, dtype=np.float32)
    labels = np.zeros(total, dtype=np.int64)
    images[split.clean_indices] = split.clean_pool.images
    labels[split.clean_indices] = split.clean_pool.labels
    images[split.reference_indices] = reference_images
    labels[split.reference_indices] = split.reference_set.labels
    return LabeledImageSet(images, labels, list(split.clean_pool.class_names), split_tag="train")


def rebuild_dataset(split: ReferenceSplit) -> LabeledImageSet:
    """Reassemble the original dataset in source order (the no-attack case)."""
    return _rebuild(split, split.reference_set.images)


def no_attack_manifest(split: ReferenceSplit) -> PoisonManifest:
    return PoisonManifest([], split.target_class, 0.0, 0.0, attack_kind="none")


def poison_with_generator(
    gen: TriggerGenerator, split: ReferenceSplit, epsilon: float | None = None
) -> tuple[LabeledImageSet, PoisonManifest]:
    """Backdoored dataset: reference images carry the projected trigger, all
    labels stay truthful (clean-label poisoning)."""
    eps = gen.epsilon if epsilon is None else float(epsilon)
    poisoned_ref = apply_trigger(gen, split.reference_set.images, eps)
    dataset = _rebuild(split, poisoned_ref)
    manifest = PoisonManifest(
        poisoned_indices=[int(i) for i in split.reference_indices],
        target_class=split.target_class,
        epsilon=eps,
        poisoning_rate=split.poisoning_rate,
        attack_kind="blto",
    )
    return dataset, manifest


def _paste_patch(images: np.ndarray, spec: PatchSpec) -> np.ndarray:
    n, c, h, w = images.shape
    s = spec.size
    if s == 0:
        return images.copy()
    if s < 0 or s > min(h, w):
        raise ValueError(f"patch size {s} does not fit a {h}x{w} image")
    ii, jj = np.mgrid[0:s, 0:s]
    patch = np.where((ii + jj) % 2 == 0, spec.values[1], spec.values[0]).astype(np.float32)
    out = images.copy()
    if spec.corner == "lower-right":
        out[:, :, h - s :, w - s :] = patch
    elif spec.corner == "upper-left":
        out[:, :, :s, :s] = patch
    else:
        raise ValueError(f"unknown corner {spec.corner!r}")
    return out


def poison_with_patch(
    split: ReferenceSplit, patch_spec: PatchSpec | None = None
) -> tuple[LabeledImageSet, PoisonManifest]:
    """Fixed-patch baseline: paste the patch onto every reference image."""
    spec = patch_spec or PatchSpec()
    patched = _paste_patch(split.reference_set.images, spec)
    dataset = _rebuild(split, patched)
    manifest = PoisonManifest(
        poisoned_indices=[int(i) for i in split.reference_indices],
        target_class=split.target_class,
        epsilon=1.0,
        poisoning_rate=split.poisoning_rate,
        attack_kind="patch",
    )
    return dataset, manifest


def export_poisoned(
    dataset: LabeledImageSet,
    manifest: PoisonManifest,
    out_dir: str | Path,
    header_extra: dict | None = None,
) -> Path:
    """Write the poisoned dataset as PNGs plus a per-row poisoning manifest."""
    out = Path(out_dir)
    save_image_dir(dataset, out)
    poisoned = set(manifest.poisoned_indices)
    with open(out / "poison_manifest.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", "label", "poisoned", "attack_kind", "epsilon", "poisoning_rate"])
        for idx in range(len(dataset)):
            writer.writerow(
                [
                    idx,
                    int(dataset.labels[idx]),
                    int(idx in poisoned),
                    manifest.attack_kind,
                    format(manifest.epsilon, ".10g"),
                    format(manifest.poisoning_rate, ".10g"),
                ]
            )
    header = {
        "attack_kind": manifest.attack_kind,
        "target_class": manifest.target_class,
        "epsilon": manifest.epsilon,
        "poisoning_rate": manifest.poisoning_rate,
        "num_images": len(dataset),
        "num_poisoned": len(manifest.poisoned_indices),
    }
    header.update(header_extra or {})
    with open(out / "header.json", "w") as fh:
        json.dump(header, fh, indent=2, sort_keys=True)
    return out


def load_poisoned(in_dir: str | Path) -> tuple[LabeledImageSet, PoisonManifest]:
    """Load a poisoned dataset export (images + poisoning manifest)."""
    root = Path(in_dir)
    dataset = load_image_dir(root, split_tag="train")
    poisoned_indices: list[int] = []
    attack_kind, epsilon, rate = "none", 0.0, 0.0
    with open(root / "poison_manifest.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            attack_kind = row["attack_kind"]
            epsilon = float(row["epsilon"])
            rate = float(row["poisoning_rate"])
            if int(row["poisoned"]):
                poisoned_indices.append(int(row["index"]))
    header = {}
    header_path = root / "header.json"
    if header_path.is_file():
        header = json.loads(header_path.read_text())
    manifest = PoisonManifest(
        poisoned_indices=poisoned_indices,
        target_class=int(header.get("target_class", 0)),
        epsilon=epsilon,
        poisoning_rate=rate,
        attack_kind=attack_kind,
    )
    return dataset, manifest
