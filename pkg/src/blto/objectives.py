"""Contrastive losses (siamese stop-gradient, NT-Xent, EMA-target) and the
alignment/uniformity diagnostics used to monitor backdoor behavior."""

from __future__ import annotations

import copy
import warnings
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .augment import ViewPair
from .models import EncoderStack, project_and_predict

CL_METHODS = ("simsiam", "simclr", "byol")

_zero_norm_events = 0


def zero_norm_count() -> int:
    """Number of zero-norm vectors seen by :func:`cosine_similarity` so far."""
    return _zero_norm_events


def reset_zero_norm_count() -> None:
    global _zero_norm_events
    _zero_norm_events = 0


@dataclass
class ClObjectiveConfig:
    method: str = "simsiam"
    temperature: float = 0.2
    ema_momentum: float = 0.99
    simsiam_halved: bool = False

    def __post_init__(self) -> None:
        if self.method not in CL_METHODS:
            raise ValueError(f"method must be one of {CL_METHODS}, got {self.method!r}")
        if self.temperature <= 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")
        if not 0.0 <= self.ema_momentum <= 1.0:
            raise ValueError(f"ema_momentum must be in [0, 1], got {self.ema_momentum}")


def cosine_similarity(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Row-wise cosine similarity in [-1, 1]; zero-norm rows map to 0."""
    global _zero_norm_events
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    denom = a.norm(dim=-1) * b.norm(dim=-1)
    degenerate = denom == 0
    if bool(degenerate.any()):
        _zero_norm_events += int(degenerate.sum())
        warnings.warn("cosine_similarity saw zero-norm vectors; similarity defined as 0")
    sim = (a * b).sum(dim=-1) / denom.clamp_min(1e-12)
    sim = torch.where(degenerate, torch.zeros_like(sim), sim)
    return sim.clamp(-1.0, 1.0)


def simsiam_pair_loss(
    p1: torch.Tensor, z2: torch.Tensor, p2: torch.Tensor, z1: torch.Tensor, halved: bool = False
) -> torch.Tensor:
    """Negative symmetric cosine between predictions and stop-gradiented projections."""
    loss = -(cosine_similarity(p1, z2).mean() + cosine_similarity(p2, z1).mean())
    return 0.5 * loss if halved else loss


def simsiam_loss(stack: EncoderStack, views: ViewPair, halved: bool = False) -> torch.Tensor:
    z1, p1 = project_and_predict(stack, stack.backbone(views.view1))
    z2, p2 = project_and_predict(stack, stack.backbone(views.view2))
    return simsiam_pair_loss(p1, z2, p2, z1, halved=halved)


def infonce_loss(embeddings: torch.Tensor, temperature: float = 0.2) -> torch.Tensor:
    """NT-Xent over 2B views; row i is paired with row i + B."""
    n = embeddings.shape[0]
    if n < 4 or n % 2:
        raise ValueError(f"need an even number of views >= 4, got {n}")
    half = n // 2
    z = F.normalize(embeddings, dim=-1)
    logits = (z @ z.t()) / temperature
    logits.fill_diagonal_(float("-inf"))
    targets = torch.cat(
        [torch.arange(half, n, device=z.device), torch.arange(0, half, device=z.device)]
    )
    return F.cross_entropy(logits, targets)


def byol_loss(p: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
    """Normalized MSE between online prediction and target projection: 2 - 2 cos."""
    return (2.0 - 2.0 * cosine_similarity(p, z)).mean()


@torch.no_grad()
def ema_update(target: torch.nn.Module, online: torch.nn.Module, momentum: float) -> None:
    """Exponential moving average: target <- m * target + (1 - m) * online."""
    if not 0.0 <= momentum <= 1.0:
        raise ValueError(f"momentum must be in [0, 1], got {momentum}")
    for t_param, o_param in zip(target.parameters(), online.parameters()):
        t_param.mul_(momentum).add_(o_param, alpha=1.0 - momentum)
    for t_buf, o_buf in zip(target.buffers(), online.buffers()):
        if t_buf.dtype.is_floating_point:
            t_buf.mul_(momentum).add_(o_buf, alpha=1.0 - momentum)
        else:
            t_buf.copy_(o_buf)


def alignment_loss(u: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Mean squared distance between L2-normalized positive pairs."""
    if u.shape != v.shape:
        raise ValueError(f"shape mismatch: {tuple(u.shape)} vs {tuple(v.shape)}")
    return (F.normalize(u, dim=-1) - F.normalize(v, dim=-1)).pow(2).sum(dim=-1).mean()


def uniformity_loss(x: torch.Tensor, t: float = 2.0) -> torch.Tensor:
    """Log mean Gaussian potential over distinct pairs of L2-normalized points.

    Always <= 0; equals 0 exactly when all points coincide.
    """
    if x.shape[0] < 2:
        raise ValueError("uniformity needs at least 2 points")
    z = F.normalize(x, dim=-1)
    sq_dists = torch.pdist(z).pow(2)
    return torch.logsumexp(-t * sq_dists, dim=0) - torch.log(
        torch.tensor(float(sq_dists.numel()), dtype=x.dtype)
    )


class ContrastiveLearner:
    """Loss machinery for one encoder stack under a configured CL method.

    BYOL keeps an EMA target copy of the stack; ``after_step`` must be called
    once per optimizer step to advance it.
    """

    def __init__(self, stack: EncoderStack, cfg: ClObjectiveConfig):
        self.stack = stack
        self.cfg = cfg
        self.target: EncoderStack | None = None
        if cfg.method == "byol":
            self.target = copy.deepcopy(stack)
            for param in self.target.parameters():
                param.requires_grad_(False)

    def loss(self, views: ViewPair) -> torch.Tensor:
        if self.cfg.method == "simsiam":
            return simsiam_loss(self.stack, views, halved=self.cfg.simsiam_halved)
        if self.cfg.method == "simclr":
            proj1 = self.stack.projector(self.stack.backbone(views.view1))
            proj2 = self.stack.projector(self.stack.backbone(views.view2))
            return infonce_loss(torch.cat([proj1, proj2], dim=0), self.cfg.temperature)
        assert self.target is not None
        p1 = self.stack.predictor(self.stack.projector(self.stack.backbone(views.view1)))
        p2 = self.stack.predictor(self.stack.projector(self.stack.backbone(views.view2)))
        with torch.no_grad():
            tz1 = self.target.projector(self.target.backbone(views.view1))
            tz2 = self.target.projector(self.target.backbone(views.view2))
        return byol_loss(p1, tz2) + byol_loss(p2, tz1)

    def after_step(self) -> None:
        if self.target is not None:
            ema_update(self.target, self.stack, self.cfg.ema_momentum)

    def train(self, mode: bool = True) -> None:
        self.stack.train(mode)
        if self.target is not None:
            self.target.train(mode)
