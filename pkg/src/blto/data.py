"""Dataset ingestion, synthetic data generation, and the clean/reference split."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

CIFAR10_CLASSES = (
    "airplane", "automobile", "bird", "cat", "deer",
    "dog", "frog", "horse", "ship", "truck",
)

_CIFAR_RECORD_BYTES = 1 + 3 * 32 * 32
_CIFAR_BATCH_RECORDS = 10_000


class IngestionError(RuntimeError):
    """Raised when dataset files are missing or malformed."""


@dataclass
class LabeledImageSet:
    """Images as float32 [N, C, H, W] in [0, 1] with integer labels.

    Pixel values are kept on the 1/255 grid by every construction path in
    this package so that 8-bit image export round-trips bit-exactly.
    """

    images: np.ndarray
    labels: np.ndarray
    class_names: list[str]
    split_tag: str = "train"

    def __post_init__(self) -> None:
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be [N, C, H, W], got shape {self.images.shape}")
        if self.images.shape[0] != self.labels.shape[0]:
            raise ValueError(
                f"images ({self.images.shape[0]}) and labels ({self.labels.shape[0]}) "
                "must have equal leading dimension"
            )
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ValueError("pixel values must lie in [0, 1]")
        n_classes = len(self.class_names)
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= n_classes):
            raise ValueError(f"labels must lie in [0, {n_classes})")
        if self.split_tag not in ("train", "test"):
            raise ValueError(f"split_tag must be 'train' or 'test', got {self.split_tag!r}")

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def image_size(self) -> int:
        return self.images.shape[-1]

    def subset(self, indices: np.ndarray) -> "LabeledImageSet":
        indices = np.asarray(indices, dtype=np.int64)
        return LabeledImageSet(
            images=self.images[indices].copy(),
            labels=self.labels[indices].copy(),
            class_names=list(self.class_names),
            split_tag=self.split_tag,
        )


@dataclass
class ReferenceSplit:
    """Clean pool plus the target-class reference images the attacker controls.

    ``reference_indices``/``clean_indices`` record each sample's position in
    the source dataset so a poisoned dataset can be rebuilt in source order.
    """

    clean_pool: LabeledImageSet
    reference_set: LabeledImageSet
    target_class: int
    target_name: str
    reference_indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    clean_indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self) -> None:
        self.reference_indices = np.asarray(self.reference_indices, dtype=np.int64)
        self.clean_indices = np.asarray(self.clean_indices, dtype=np.int64)
        if len(self.reference_set) and not np.all(self.reference_set.labels == self.target_class):
            raise ValueError("every reference label must equal target_class")
        overlap = np.intersect1d(self.reference_indices, self.clean_indices)
        if overlap.size:
            raise ValueError(f"clean pool and reference set share source indices: {overlap[:5]}")

    @property
    def total_size(self) -> int:
        return len(self.clean_pool) + len(self.reference_set)

    @property
    def poisoning_rate(self) -> float:
        return len(self.reference_set) / max(self.total_size, 1)


def reference_count_for_rate(rate: float, dataset_size: int) -> int:
    """Number of reference images implied by a poisoning rate on a dataset."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"poisoning rate must be in [0, 1], got {rate}")
    return int(round(rate * dataset_size))


def _read_cifar_batch(path: Path) -> tuple[np.ndarray, np.ndarray]:
    if not path.is_file():
        raise IngestionError(f"missing CIFAR-10 batch file: {path}")
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0 or raw.size % _CIFAR_RECORD_BYTES != 0:
        raise IngestionError(
            f"corrupt CIFAR-10 batch file {path}: size {raw.size} is not a "
            f"multiple of the {_CIFAR_RECORD_BYTES}-byte record"
        )
    records = raw.reshape(-1, _CIFAR_RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    if labels.max(initial=0) > 9:
        raise IngestionError(f"corrupt CIFAR-10 batch file {path}: label byte out of range")
    images = records[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return images, labels


def load_cifar10(root_path: str | Path, split: str = "train") -> LabeledImageSet:
    """Load CIFAR-10 from the standard binary batch files.

    Each record is 1 label byte followed by 3072 pixel bytes (1024 per
    channel, row-major). Accepts either the batch directory itself or a
    root containing ``cifar-10-batches-bin``.
    """
    if split not in ("train", "test"):
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")
    root = Path(root_path)
    if (root / "cifar-10-batches-bin").is_dir():
        root = root / "cifar-10-batches-bin"
    if not root.is_dir():
        raise IngestionError(f"CIFAR-10 directory not found: {root}")

    if split == "train":
        batch_files = [root / f"data_batch_{i}.bin" for i in range(1, 6)]
    else:
        batch_files = [root / "test_batch.bin"]

    parts = [_read_cifar_batch(p) for p in batch_files]
    images = np.concatenate([p[0] for p in parts], axis=0)
    labels = np.concatenate([p[1] for p in parts], axis=0)
    return LabeledImageSet(images, labels, list(CIFAR10_CLASSES), split_tag=split)


def _hue_to_rgb(hue: float) -> np.ndarray:
    # Full-saturation HSV -> RGB for evenly spaced class colors.
    h = (hue % 1.0) * 6.0
    i = int(h)
    f = h - i
    p, q, t = 0.0, 1.0 - f, f
    table = [(1, t, p), (q, 1, p), (p, 1, t), (p, q, 1), (t, p, 1), (1, p, q)]
    return np.asarray(table[i % 6], dtype=np.float32)


def _shape_mask(kind: int, size: int, cy: float, cx: float, radius: float) -> np.ndarray:
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float32)
    dy, dx = ys - cy, xs - cx
    if kind == 0:  # disk
        return (dy * dy + dx * dx) <= radius * radius
    if kind == 1:  # square
        return (np.abs(dy) <= radius) & (np.abs(dx) <= radius)
    if kind == 2:  # plus
        arm = max(radius / 2.5, 1.0)
        return ((np.abs(dy) <= arm) & (np.abs(dx) <= radius)) | (
            (np.abs(dx) <= arm) & (np.abs(dy) <= radius)
        )
    # ring
    r2 = dy * dy + dx * dx
    return (r2 <= radius * radius) & (r2 >= (radius * 0.55) ** 2)


def make_synthetic_set(
    num_classes: int,
    per_class: int,
    image_size: int = 32,
    seed: int = 0,
    split_tag: str = "train",
) -> LabeledImageSet:
    """Generate a deterministic synthetic dataset of colored shapes.

    Class identity is carried by three cues with per-sample jitter: a
    geometric shape with a class hue, a weak noisy global tint, and a
    low-amplitude class parity pattern (a fixed per-class pixel-level sign
    field). The parity term keeps classes cleanly separable for a pixel-space
    nearest-centroid classifier, while being too high-frequency to survive
    crop resampling, so contrastively trained encoders must rely on the
    noisy shape/color cues and the resulting class margins stay small -- the
    regime where data-poisoning experiments are informative.
    """
    if num_classes < 2:
        raise ValueError(f"num_classes must be >= 2, got {num_classes}")
    if per_class < 2:
        raise ValueError(f"per_class must be >= 2, got {per_class}")
    if image_size < 8:
        raise ValueError(f"image_size must be >= 8, got {image_size}")

    rng = np.random.default_rng(seed)
    # Parity fields are a property of the task geometry, shared by every
    # split of the same (num_classes, image_size) family.
    parity_rng = np.random.default_rng(0x5EED ^ num_classes)
    parities = parity_rng.choice(
        [-1.0, 1.0], size=(num_classes, 3, image_size, image_size)
    ).astype(np.float32)

    n = num_classes * per_class
    images = np.zeros((n, 3, image_size, image_size), dtype=np.float32)
    labels = np.repeat(np.arange(num_classes, dtype=np.int64), per_class)
    coarse = max(image_size // 8, 2)

    for idx in range(n):
        k = int(labels[idx])

        base = rng.uniform(0.3, 0.6)
        texture = rng.uniform(-1.0, 1.0, size=(coarse, coarse)).astype(np.float32)
        texture = np.kron(texture, np.ones((image_size // coarse + 1,) * 2))
        texture = texture[:image_size, :image_size] * 0.12
        img = (base + texture)[None, :, :] * np.ones((3, 1, 1), dtype=np.float32)

        # Distractors: randomly colored, randomly shaped confounders.
        for _ in range(2):
            d_cy, d_cx = rng.uniform(0, image_size, size=2)
            d_radius = image_size * rng.uniform(0.08, 0.18)
            d_mask = _shape_mask(int(rng.integers(0, 4)), image_size, d_cy, d_cx, d_radius)
            d_color = rng.uniform(0.2, 1.0, size=3).astype(np.float32)
            img = np.where(d_mask[None, :, :], d_color[:, None, None], img)

        # Class object: shape kind and hue are class-coded; position, size,
        # hue jitter, and brightness vary per sample. Jitter scales with the
        # hue spacing so larger class counts stay separable.
        hue_sigma = 0.4 / num_classes
        jitter = image_size / 4.0
        cy = image_size / 2 + rng.uniform(-jitter, jitter)
        cx = image_size / 2 + rng.uniform(-jitter, jitter)
        radius = image_size * rng.uniform(0.12, 0.20)
        mask = _shape_mask(k % 4, image_size, cy, cx, radius)
        hue = (k / num_classes + rng.normal(0.0, hue_sigma)) % 1.0
        value = rng.uniform(0.45, 0.95)
        img = np.where(mask[None, :, :], (value * _hue_to_rgb(hue))[:, None, None], img)

        # Weak noisy class tint plus the class parity field; parity amplitude
        # grows with class count to offset the shrinking hue separation.
        class_dir = _hue_to_rgb(k / num_classes) - 0.5
        tint = 0.25 * class_dir + rng.normal(0.0, 0.4 / num_classes, size=3)
        img = img * (1.0 + tint[:, None, None])
        img = img + 0.0175 * np.sqrt(num_classes) * parities[k]

        img = img + rng.normal(0.0, 0.06, size=img.shape)
        images[idx] = np.clip(img, 0.0, 1.0)

    perm = rng.permutation(n)
    images, labels = images[perm], labels[perm]
    # Snap to the 8-bit grid so image-file export round-trips exactly.
    images = np.round(images * 255.0) / 255.0

    class_names = [f"class_{k}" for k in range(num_classes)]
    return LabeledImageSet(images.astype(np.float32), labels, class_names, split_tag=split_tag)


def split_reference(
    data: LabeledImageSet, target_class: int, reference_count: int
) -> ReferenceSplit:
    """Split off the first ``reference_count`` target-class images by index.

    Index-ordered selection keeps poisoning bookkeeping reproducible: the
    poisoned samples are always the lowest-indexed target-class images.
    """
    if not 0 <= target_class < data.num_classes:
        raise ValueError(f"target_class {target_class} out of range")
    if reference_count < 0:
        raise ValueError(f"reference_count must be >= 0, got {reference_count}")

    target_positions = np.flatnonzero(data.labels == target_class)
    if target_positions.size < reference_count:
        raise ValueError(
            f"need {reference_count} samples of class {target_class}, "
            f"dataset has {target_positions.size}"
        )
    ref_idx = target_positions[:reference_count]
    mask = np.ones(len(data), dtype=bool)
    mask[ref_idx] = False
    clean_idx = np.flatnonzero(mask)

    return ReferenceSplit(
        clean_pool=data.subset(clean_idx),
        reference_set=data.subset(ref_idx),
        target_class=target_class,
        target_name=data.class_names[target_class],
        reference_indices=ref_idx,
        clean_indices=clean_idx,
    )


def save_image_dir(data: LabeledImageSet, out_dir: str | Path) -> Path:
    """Export a dataset as lossless 8-bit PNGs plus a CSV manifest."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    rows = []
    for idx in range(len(data)):
        name = f"{idx:06d}.png"
        arr = np.round(data.images[idx] * 255.0).astype(np.uint8).transpose(1, 2, 0)
        Image.fromarray(arr, mode="RGB").save(out / "images" / name)
        rows.append((idx, int(data.labels[idx]), name))
    with open(out / "manifest.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", "label", "filename"])
        writer.writerows(rows)
    with open(out / "classes.txt", "w") as fh:
        fh.write("\n".join(data.class_names) + "\n")
    return out


def load_image_dir(in_dir: str | Path, split_tag: str = "train") -> LabeledImageSet:
    """Load a dataset previously written by :func:`save_image_dir`."""
    root = Path(in_dir)
    manifest = root / "manifest.csv"
    if not manifest.is_file():
        raise IngestionError(f"missing manifest file: {manifest}")
    images, labels = [], []
    with open(manifest, newline="") as fh:
        for row in csv.DictReader(fh):
            path = root / "images" / row["filename"]
            if not path.is_file():
                raise IngestionError(f"missing image file: {path}")
            arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
            images.append(arr.transpose(2, 0, 1))
            labels.append(int(row["label"]))
    classes_file = root / "classes.txt"
    if classes_file.is_file():
        class_names = classes_file.read_text().splitlines()
    else:
        class_names = [f"class_{k}" for k in range(max(labels) + 1)]
    return LabeledImageSet(
        np.stack(images), np.asarray(labels, dtype=np.int64), class_names, split_tag=split_tag
    )
