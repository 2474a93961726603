"""Stochastic view-sampling pipelines for attacker and victim training.

All operations are implemented as batched tensor maps so that gradients
propagate from the augmented views back to the input pixels; the trigger
generator is optimized through these views.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any

import torch
import torch.nn.functional as F

# Per-channel statistics of the full CIFAR-10 training set.
CIFAR10_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR10_STD = (0.2470, 0.2435, 0.2616)
# Synthetic sets are roughly centered; use symmetric constants.
SYNTHETIC_MEAN = (0.5, 0.5, 0.5)
SYNTHETIC_STD = (0.5, 0.5, 0.5)

_GRAY_WEIGHTS = (0.2989, 0.587, 0.114)


@dataclass(frozen=True)
class AugOp:
    kind: str
    params: dict[str, Any] = field(default_factory=dict)
    probability: float = 1.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.probability <= 1.0:
            raise ValueError(f"probability must be in [0, 1], got {self.probability}")


@dataclass(frozen=True)
class AugmentationPipeline:
    """Ordered augmentation ops; Normalize is always last."""

    ops: tuple[AugOp, ...]
    image_size: int

    def __post_init__(self) -> None:
        if not self.ops or self.ops[-1].kind != "normalize":
            raise ValueError("pipeline must end with a normalize op")
        for op in self.ops:
            if op.kind == "random_resized_crop":
                lo = op.params["scale"][0]
                if not 0.0 < lo <= 1.0:
                    raise ValueError(f"crop scale lower bound must be in (0, 1], got {lo}")

    @property
    def normalize(self) -> tuple[tuple[float, ...], tuple[float, ...]]:
        p = self.ops[-1].params
        return tuple(p["mean"]), tuple(p["std"])

    def describe(self) -> list[dict[str, Any]]:
        """Serializable op listing for experiment configs and run headers."""
        return [
            {"kind": op.kind, "params": dict(op.params), "probability": op.probability}
            for op in self.ops
        ]


@dataclass
class ViewPair:
    view1: torch.Tensor
    view2: torch.Tensor
    seed_record: dict[str, Any]


def blur_kernel_size(image_size: int) -> int:
    return image_size // 20 * 2 + 1


def custom_pipeline(
    image_size: int,
    mean: tuple[float, ...] = CIFAR10_MEAN,
    std: tuple[float, ...] = CIFAR10_STD,
    *,
    crop_scale: tuple[float, float] = (0.2, 1.0),
    crop_ratio: tuple[float, float] = (3.0 / 4.0, 4.0 / 3.0),
    flip_p: float = 0.5,
    jitter_p: float = 0.8,
    jitter: tuple[float, float, float, float] = (0.4, 0.4, 0.4, 0.1),
    gray_p: float = 0.2,
    blur_p: float | None = 0.5,
    blur_sigma: tuple[float, float] = (0.1, 2.0),
) -> AugmentationPipeline:
    """Build a pipeline with explicit knobs; ``blur_p=None`` omits the blur op."""
    if image_size < 8:
        raise ValueError(f"image_size must be >= 8, got {image_size}")
    ops = [
        AugOp("random_resized_crop", {"scale": crop_scale, "ratio": crop_ratio}),
        AugOp("horizontal_flip", {}, probability=flip_p),
        AugOp(
            "color_jitter",
            {
                "brightness": jitter[0],
                "contrast": jitter[1],
                "saturation": jitter[2],
                "hue": jitter[3],
            },
            probability=jitter_p,
        ),
        AugOp("grayscale", {}, probability=gray_p),
    ]
    if blur_p is not None:
        ops.append(
            AugOp(
                "gaussian_blur",
                {"kernel_size": blur_kernel_size(image_size), "sigma": blur_sigma},
                probability=blur_p,
            )
        )
    ops.append(AugOp("normalize", {"mean": tuple(mean), "std": tuple(std)}))
    return AugmentationPipeline(tuple(ops), image_size)


def attacker_pipeline(
    image_size: int,
    mean: tuple[float, ...] = CIFAR10_MEAN,
    std: tuple[float, ...] = CIFAR10_STD,
) -> AugmentationPipeline:
    """Trigger-optimization augmentations: crop, flip, jitter, grayscale, blur, normalize."""
    return custom_pipeline(image_size, mean, std)


def victim_pipeline(
    image_size: int,
    include_blur: bool = False,
    mean: tuple[float, ...] = CIFAR10_MEAN,
    std: tuple[float, ...] = CIFAR10_STD,
) -> AugmentationPipeline:
    """Victim-side augmentations; blur is off by default and can be appended."""
    return custom_pipeline(image_size, mean, std, blur_p=0.5 if include_blur else None)


def normalize(x: torch.Tensor, mean: tuple[float, ...], std: tuple[float, ...]) -> torch.Tensor:
    m = torch.as_tensor(mean, dtype=x.dtype, device=x.device).view(1, -1, 1, 1)
    s = torch.as_tensor(std, dtype=x.dtype, device=x.device).view(1, -1, 1, 1)
    return (x - m) / s


def denormalize(x: torch.Tensor, mean: tuple[float, ...], std: tuple[float, ...]) -> torch.Tensor:
    m = torch.as_tensor(mean, dtype=x.dtype, device=x.device).view(1, -1, 1, 1)
    s = torch.as_tensor(std, dtype=x.dtype, device=x.device).view(1, -1, 1, 1)
    return x * s + m


def _rand(gen: torch.Generator, *shape: int, dtype=torch.float32) -> torch.Tensor:
    return torch.rand(shape, generator=gen, dtype=dtype)


def _uniform(gen: torch.Generator, lo: float, hi: float, n: int, dtype) -> torch.Tensor:
    return _rand(gen, n, dtype=dtype) * (hi - lo) + lo


def _crop(x: torch.Tensor, op: AugOp, gen: torch.Generator, out_size: int, record: dict) -> torch.Tensor:
    b, _, h, w = x.shape
    lo, hi = op.params["scale"]
    rlo, rhi = op.params["ratio"]
    area = _uniform(gen, lo, hi, b, x.dtype) * (h * w)
    aspect = torch.exp(_uniform(gen, math.log(rlo), math.log(rhi), b, x.dtype))
    crop_w = torch.sqrt(area * aspect).clamp(max=float(w))
    crop_h = torch.sqrt(area / aspect).clamp(max=float(h))
    x0 = _rand(gen, b, dtype=x.dtype) * (w - crop_w)
    y0 = _rand(gen, b, dtype=x.dtype) * (h - crop_h)
    record["crop_box"] = torch.stack([x0, y0, crop_w, crop_h], dim=1)

    # Sample at output pixel centers inside the crop box (align_corners=False).
    steps = torch.arange(out_size, dtype=x.dtype) + 0.5
    xs = x0[:, None] + steps[None, :] * (crop_w / out_size)[:, None] - 0.5
    ys = y0[:, None] + steps[None, :] * (crop_h / out_size)[:, None] - 0.5
    xn = (2.0 * xs + 1.0) / w - 1.0
    yn = (2.0 * ys + 1.0) / h - 1.0
    grid = torch.stack(
        [xn[:, None, :].expand(b, out_size, out_size),
         yn[:, :, None].expand(b, out_size, out_size)],
        dim=-1,
    )
    return F.grid_sample(x, grid, mode="bilinear", padding_mode="border", align_corners=False)


def _flip(x: torch.Tensor, op: AugOp, gen: torch.Generator, record: dict) -> torch.Tensor:
    mask = _rand(gen, x.shape[0], dtype=x.dtype) < op.probability
    record["flip_mask"] = mask
    return torch.where(mask[:, None, None, None], x.flip(-1), x)


def _gray(x: torch.Tensor) -> torch.Tensor:
    w = torch.as_tensor(_GRAY_WEIGHTS, dtype=x.dtype, device=x.device).view(1, 3, 1, 1)
    return (x * w).sum(dim=1, keepdim=True)


def _rotation_about_gray_axis(theta: torch.Tensor) -> torch.Tensor:
    # Rodrigues rotation about (1,1,1)/sqrt(3); smooth everywhere, unlike the
    # HSV round-trip, so hue shifts keep a clean gradient path.
    a = 1.0 / math.sqrt(3.0)
    cos, sin = torch.cos(theta), torch.sin(theta)
    k = (1.0 - cos) * (a * a)
    rows = [
        torch.stack([cos + k, k - sin * a, k + sin * a], dim=-1),
        torch.stack([k + sin * a, cos + k, k - sin * a], dim=-1),
        torch.stack([k - sin * a, k + sin * a, cos + k], dim=-1),
    ]
    return torch.stack(rows, dim=-2)


def _color_jitter(x: torch.Tensor, op: AugOp, gen: torch.Generator, record: dict) -> torch.Tensor:
    b = x.shape[0]
    p = op.params
    apply_mask = _rand(gen, b, dtype=x.dtype) < op.probability
    brightness = _uniform(gen, max(0.0, 1 - p["brightness"]), 1 + p["brightness"], b, x.dtype)
    contrast = _uniform(gen, max(0.0, 1 - p["contrast"]), 1 + p["contrast"], b, x.dtype)
    saturation = _uniform(gen, max(0.0, 1 - p["saturation"]), 1 + p["saturation"], b, x.dtype)
    hue = _uniform(gen, -p["hue"], p["hue"], b, x.dtype)
    record["jitter"] = torch.stack(
        [apply_mask.to(x.dtype), brightness, contrast, saturation, hue], dim=1
    )

    out = (x * brightness[:, None, None, None]).clamp(0.0, 1.0)
    mean_gray = _gray(out).mean(dim=(2, 3), keepdim=True)
    out = (contrast[:, None, None, None] * out + (1 - contrast)[:, None, None, None] * mean_gray)
    out = out.clamp(0.0, 1.0)
    gray = _gray(out)
    out = (saturation[:, None, None, None] * out + (1 - saturation)[:, None, None, None] * gray)
    out = out.clamp(0.0, 1.0)
    rot = _rotation_about_gray_axis(hue * 2.0 * math.pi)
    out = torch.einsum("bij,bjhw->bihw", rot, out).clamp(0.0, 1.0)
    return torch.where(apply_mask[:, None, None, None], out, x)


def _grayscale(x: torch.Tensor, op: AugOp, gen: torch.Generator, record: dict) -> torch.Tensor:
    mask = _rand(gen, x.shape[0], dtype=x.dtype) < op.probability
    record["gray_mask"] = mask
    return torch.where(mask[:, None, None, None], _gray(x).expand_as(x), x)


def _gaussian_blur(x: torch.Tensor, op: AugOp, gen: torch.Generator, record: dict) -> torch.Tensor:
    b, c, h, w = x.shape
    k = int(op.params["kernel_size"])
    mask = _rand(gen, b, dtype=x.dtype) < op.probability
    lo, hi = op.params["sigma"]
    sigma = _uniform(gen, lo, hi, b, x.dtype)
    record["blur"] = torch.stack([mask.to(x.dtype), sigma], dim=1)
    if k <= 1:
        return x

    taps = torch.arange(k, dtype=x.dtype) - (k - 1) / 2.0
    kernel = torch.exp(-0.5 * (taps[None, :] / sigma[:, None]) ** 2)
    kernel = kernel / kernel.sum(dim=1, keepdim=True)
    weight = kernel[:, None, :].expand(b, c, k).reshape(b * c, 1, 1, k)

    pad = k // 2
    flat = x.reshape(1, b * c, h, w)
    flat = F.conv2d(F.pad(flat, (pad, pad, 0, 0), mode="reflect"), weight, groups=b * c)
    flat = F.conv2d(
        F.pad(flat, (0, 0, pad, pad), mode="reflect"),
        weight.reshape(b * c, 1, k, 1),
        groups=b * c,
    )
    blurred = flat.reshape(b, c, h, w)
    return torch.where(mask[:, None, None, None], blurred, x)


_OP_FNS = {
    "horizontal_flip": _flip,
    "color_jitter": _color_jitter,
    "grayscale": _grayscale,
    "gaussian_blur": _gaussian_blur,
}


def _apply_pipeline(
    pipeline: AugmentationPipeline, batch: torch.Tensor, gen: torch.Generator
) -> tuple[torch.Tensor, dict]:
    if batch.dim() != 4:
        raise ValueError(f"batch must be [B, C, H, W], got shape {tuple(batch.shape)}")
    if min(batch.shape[-2:]) < pipeline.image_size:
        raise ValueError(
            f"input spatial size {tuple(batch.shape[-2:])} smaller than crop "
            f"output {pipeline.image_size}"
        )
    record: dict[str, Any] = {}
    out = batch
    for op in pipeline.ops:
        if op.kind == "random_resized_crop":
            out = _crop(out, op, gen, pipeline.image_size, record)
        elif op.kind == "normalize":
            out = normalize(out, op.params["mean"], op.params["std"])
        else:
            out = _OP_FNS[op.kind](out, op, gen, record)
    return out, record


def sample_view(
    pipeline: AugmentationPipeline, batch: torch.Tensor, seed: int
) -> tuple[torch.Tensor, dict]:
    """One stochastic view; deterministic given (pipeline, batch, seed)."""
    gen = torch.Generator().manual_seed(int(seed) & 0x7FFFFFFFFFFFFFFF)
    return _apply_pipeline(pipeline, batch, gen)


def sample_views(pipeline: AugmentationPipeline, batch: torch.Tensor, seed: int) -> ViewPair:
    """Two independent stochastic views of the same batch."""
    gen = torch.Generator().manual_seed(int(seed) & 0x7FFFFFFFFFFFFFFF)
    view1, rec1 = _apply_pipeline(pipeline, batch, gen)
    view2, rec2 = _apply_pipeline(pipeline, batch, gen)
    return ViewPair(view1, view2, {"seed": seed, "view1": rec1, "view2": rec2})
