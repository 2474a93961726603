"""Encoder/projector/predictor stacks and the image-to-image trigger generator."""

from __future__ import annotations

import hashlib
import json
import struct
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import torch
from torch import nn

ENCODER_ARCHS = ("tiny-conv", "resnet18-style")
GENERATOR_ARCHS = ("full", "desk", "tiny")

_CKPT_MAGIC = b"BLTOCKPT"
_CKPT_VERSION = 1


@contextmanager
def _seeded(seed: int):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        yield


def _mlp_head(in_dim: int, hidden: int, out_dim: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Linear(in_dim, hidden, bias=False),
        nn.BatchNorm1d(hidden),
        nn.ReLU(inplace=True),
        nn.Linear(hidden, out_dim),
    )


class TinyConvBackbone(nn.Module):
    """Four conv layers with global average pooling; the desk-scale encoder."""

    def __init__(self, embed_dim: int = 64):
        super().__init__()
        c1 = max(2, embed_dim // 4)
        c2 = max(2, embed_dim // 2)
        widths = [c1, c2, embed_dim, embed_dim]
        strides = [2, 2, 2, 1]
        layers: list[nn.Module] = []
        in_c = 3
        for w, s in zip(widths, strides):
            layers += [nn.Conv2d(in_c, w, 3, stride=s, padding=1), nn.BatchNorm2d(w), nn.ReLU(inplace=True)]
            in_c = w
        self.features = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool2d(1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.pool(self.features(x)).flatten(1)


class _BasicBlock(nn.Module):
    def __init__(self, in_c: int, out_c: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_c, out_c, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_c)
        self.conv2 = nn.Conv2d(out_c, out_c, 3, stride=1, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_c)
        self.shortcut = nn.Sequential()
        if stride != 1 or in_c != out_c:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_c, out_c, 1, stride=stride, bias=False), nn.BatchNorm2d(out_c)
            )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = torch.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return torch.relu(out + self.shortcut(x))


class ResNet18Backbone(nn.Module):
    """CIFAR-style ResNet-18: 3x3 stem, no max-pool, 512-d output."""

    def __init__(self):
        super().__init__()
        self.stem = nn.Sequential(
            nn.Conv2d(3, 64, 3, stride=1, padding=1, bias=False),
            nn.BatchNorm2d(64),
            nn.ReLU(inplace=True),
        )
        stages = []
        in_c = 64
        for out_c, stride in [(64, 1), (128, 2), (256, 2), (512, 2)]:
            stages += [_BasicBlock(in_c, out_c, stride), _BasicBlock(out_c, out_c, 1)]
            in_c = out_c
        self.stages = nn.Sequential(*stages)
        self.pool = nn.AdaptiveAvgPool2d(1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.pool(self.stages(self.stem(x))).flatten(1)


class EncoderStack(nn.Module):
    """Backbone + projector + predictor with a shared embedding width."""

    def __init__(self, backbone: nn.Module, embed_dim: int, arch_tag: str):
        super().__init__()
        self.backbone = backbone
        self.projector = _mlp_head(embed_dim, embed_dim, embed_dim)
        self.predictor = _mlp_head(embed_dim, max(embed_dim // 4, 8), embed_dim)
        self.embed_dim = embed_dim
        self.arch_tag = arch_tag


def _build_backbone(arch_tag: str, embed_dim: int) -> nn.Module:
    if arch_tag == "tiny-conv":
        return TinyConvBackbone(embed_dim)
    if arch_tag == "resnet18-style":
        if embed_dim != 512:
            raise ValueError(f"resnet18-style backbone has embed_dim 512, got {embed_dim}")
        return ResNet18Backbone()
    raise ValueError(f"unknown arch_tag {arch_tag!r}; supported: {ENCODER_ARCHS}")


def init_encoder(arch_tag: str, embed_dim: int, seed: int) -> EncoderStack:
    """Fresh encoder stack; deterministic given (arch_tag, embed_dim, seed)."""
    with _seeded(seed):
        backbone = _build_backbone(arch_tag, embed_dim)
        stack = EncoderStack(backbone, embed_dim, arch_tag)
    return stack


def reinit_encoder(stack: EncoderStack, seed: int) -> EncoderStack:
    """Fresh parameters with the same architecture; used between attack rounds."""
    return init_encoder(stack.arch_tag, stack.embed_dim, seed)


def encode(stack: EncoderStack, batch: torch.Tensor, train_mode: bool = False) -> torch.Tensor:
    """Backbone embeddings for a batch; eval mode by default (no BN updates)."""
    if batch.dim() != 4 or batch.shape[1] != 3:
        raise ValueError(f"expected [B, 3, H, W] batch, got shape {tuple(batch.shape)}")
    if min(batch.shape[-2:]) < 8:
        raise ValueError(f"spatial size too small for backbone: {tuple(batch.shape[-2:])}")
    was_training = stack.training
    stack.train(train_mode)
    try:
        out = stack.backbone(batch)
    finally:
        stack.train(was_training)
    return out


def project_and_predict(stack: EncoderStack, embeddings: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Projected output with stop-gradient, and the predictor output with full gradients."""
    proj = stack.projector(embeddings)
    return proj.detach(), stack.predictor(proj)


class _ResBlock(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(width, width, 3, padding=1),
            nn.InstanceNorm2d(width),
            nn.ReLU(inplace=True),
            nn.Conv2d(width, width, 3, padding=1),
            nn.InstanceNorm2d(width),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.body(x)


_GEN_PLANS = {
    # width, down-blocks, residual blocks
    "full": (64, 2, 4),
    "desk": (32, 2, 4),
    "tiny": (2, 1, 1),
}


class TriggerGenerator(nn.Module):
    """Encoder-decoder perturbation network mapping images to images in [0, 1].

    The network is fully deterministic at inference; the perturbation budget
    ``epsilon`` is carried here but enforced by the poisoning stage.
    """

    def __init__(self, arch_tag: str = "desk", epsilon: float = 8 / 255):
        super().__init__()
        if arch_tag not in _GEN_PLANS:
            raise ValueError(f"unknown generator arch {arch_tag!r}; supported: {GENERATOR_ARCHS}")
        width, n_down, n_blocks = _GEN_PLANS[arch_tag]
        self.arch_tag = arch_tag
        self.epsilon = float(epsilon)
        self.down_factor = 2 ** n_down

        layers: list[nn.Module] = [
            nn.Conv2d(3, width, 3, padding=1), nn.InstanceNorm2d(width), nn.ReLU(inplace=True)
        ]
        c = width
        for _ in range(n_down):
            layers += [nn.Conv2d(c, c * 2, 3, stride=2, padding=1), nn.InstanceNorm2d(c * 2), nn.ReLU(inplace=True)]
            c *= 2
        layers += [_ResBlock(c) for _ in range(n_blocks)]
        for _ in range(n_down):
            layers += [
                nn.Upsample(scale_factor=2, mode="nearest"),
                nn.Conv2d(c, c // 2, 3, padding=1),
                nn.InstanceNorm2d(c // 2),
                nn.ReLU(inplace=True),
            ]
            c //= 2
        layers += [nn.Conv2d(c, 3, 1)]
        self.net = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.net(x))


def make_generator(arch_tag: str = "desk", epsilon: float = 8 / 255, seed: int = 0) -> TriggerGenerator:
    """Fresh trigger generator; deterministic given (arch_tag, seed)."""
    with _seeded(seed):
        gen = TriggerGenerator(arch_tag, epsilon)
    return gen


def generate(gen: TriggerGenerator, batch: torch.Tensor) -> torch.Tensor:
    """Raw generator output in [0, 1]; spatial shape preserved."""
    if batch.dim() != 4 or batch.shape[1] != 3:
        raise ValueError(f"expected [B, 3, H, W] batch, got shape {tuple(batch.shape)}")
    h, w = batch.shape[-2:]
    if h % gen.down_factor or w % gen.down_factor:
        raise ValueError(
            f"spatial size {(h, w)} must be divisible by the down-sampling factor {gen.down_factor}"
        )
    return gen(batch)


def param_checksum(module: nn.Module, include_buffers: bool = True) -> str:
    """SHA-256 over parameters (and, by default, buffers such as batch-norm
    running statistics); used for isolation assertions."""
    digest = hashlib.sha256()
    if include_buffers:
        items = module.state_dict().items()
    else:
        items = ((name, p.data) for name, p in module.named_parameters())
    for name, tensor in items:
        digest.update(name.encode())
        digest.update(tensor.detach().cpu().numpy().tobytes())
    return digest.hexdigest()


def save_checkpoint(module: nn.Module, path: str | Path, extra: dict | None = None) -> Path:
    """Write a self-describing checkpoint: JSON header + raw little-endian blobs.

    The byte stream is a pure function of the module state, so identical
    states produce identical files.
    """
    if isinstance(module, EncoderStack):
        kind = "encoder"
        meta = {"arch_tag": module.arch_tag, "embed_dim": module.embed_dim}
    elif isinstance(module, TriggerGenerator):
        kind = "generator"
        meta = {"arch_tag": module.arch_tag, "epsilon": module.epsilon}
    else:
        raise ValueError(f"unsupported module type {type(module).__name__}")

    state = module.state_dict()
    tensors = []
    blobs = []
    for name, tensor in state.items():
        arr = np.ascontiguousarray(tensor.detach().cpu().numpy())
        tensors.append({"name": name, "dtype": str(arr.dtype), "shape": list(arr.shape)})
        blobs.append(arr.tobytes())
    header = {
        "format_version": _CKPT_VERSION,
        "kind": kind,
        **meta,
        "tensors": tensors,
        "extra": extra or {},
    }
    header_bytes = json.dumps(header, sort_keys=True).encode()

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        for blob in blobs:
            fh.write(blob)
    return path


def load_checkpoint(path: str | Path) -> tuple[nn.Module, dict]:
    """Load a checkpoint written by :func:`save_checkpoint`."""
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(len(_CKPT_MAGIC))
        if magic != _CKPT_MAGIC:
            raise ValueError(f"not a checkpoint file: {path}")
        (header_len,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(header_len))
        if header["format_version"] != _CKPT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header['format_version']}")
        state = {}
        for spec in header["tensors"]:
            arr = np.frombuffer(
                fh.read(int(np.prod(spec["shape"], dtype=np.int64)) * np.dtype(spec["dtype"]).itemsize),
                dtype=spec["dtype"],
            ).reshape(spec["shape"])
            state[spec["name"]] = torch.from_numpy(arr.copy())

    if header["kind"] == "encoder":
        module: nn.Module = init_encoder(header["arch_tag"], header["embed_dim"], seed=0)
    elif header["kind"] == "generator":
        module = make_generator(header["arch_tag"], header["epsilon"], seed=0)
    else:
        raise ValueError(f"unknown checkpoint kind {header['kind']!r}")
    module.load_state_dict(state)
    return module, header.get("extra", {})
