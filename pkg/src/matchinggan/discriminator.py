"""Matching discriminator and the adversarial / classification / matching losses."""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ShapeError, UsageError


@dataclass(frozen=True)
class DiscriminatorConfig:
    image_channels: int = 1
    channels: tuple = (64, 128, 256, 512, 1024)
    num_classes: int = 1

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if not self.channels:
            raise ShapeError("discriminator needs at least one stage")
        if self.num_classes < 1:
            raise UsageError("num_classes must be positive")

    @property
    def feature_dim(self) -> int:
        return self.channels[-1]


def init_discriminator(module: nn.Module) -> None:
    """He-normal convolutions, small Gaussian heads, zero biases.

    The trunk has no normalisation layers, so a fixed small std would shrink
    activations stage after stage.
    """
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
        elif isinstance(m, nn.Linear):
            nn.init.normal_(m.weight, 0.0, 0.02)
        else:
            continue
        if m.bias is not None:
            nn.init.zeros_(m.bias)


class ResBlock(nn.Module):
    """Pre-activation ("ReLU first") residual block."""

    def __init__(self, c_in, c_out):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.shortcut = nn.Conv2d(c_in, c_out, 1, bias=False) if c_in != c_out else None

    def forward(self, x):
        h = self.conv2(F.relu(self.conv1(F.relu(x))))
        s = x if self.shortcut is None else self.shortcut(x)
        return s + h


class DiscOutput(NamedTuple):
    score: torch.Tensor  # (N,)
    logits: torch.Tensor  # (N, C^s)
    features: torch.Tensor  # (N, F)


class MatchingDiscriminator(nn.Module):
    def __init__(self, cfg: DiscriminatorConfig = DiscriminatorConfig()):
        super().__init__()
        self.cfg = cfg
        ch = cfg.channels
        self.conv_in = nn.Conv2d(cfg.image_channels, ch[0], 3, padding=1)
        stages = []
        prev = ch[0]
        for k in ch:
            stages.append(nn.Sequential(ResBlock(prev, k), ResBlock(k, k)))
            prev = k
        self.stages = nn.ModuleList(stages)
        self.adv_head = nn.Linear(prev, 1)
        self.class_head = nn.Linear(prev, cfg.num_classes)
        init_discriminator(self)

    def extract_features(self, x: torch.Tensor) -> torch.Tensor:
        """Trunk output after the last pooling, i.e. the input of both heads."""
        if x.dim() != 4 or x.shape[1] != self.cfg.image_channels:
            raise ShapeError(
                f"discriminator expects (N, {self.cfg.image_channels}, H, W), got {tuple(x.shape)}"
            )
        h = self.conv_in(x)
        for stage in self.stages:
            h = stage(h)
            if min(h.shape[2:]) >= 2:
                h = F.avg_pool2d(h, 2)
        return h.mean(dim=(2, 3))

    def score(self, x: torch.Tensor) -> torch.Tensor:
        return self.adv_head(self.extract_features(x)).squeeze(-1)

    def classify(self, x: torch.Tensor) -> torch.Tensor:
        return self.class_head(self.extract_features(x))

    def forward(self, x: torch.Tensor) -> DiscOutput:
        f = self.extract_features(x)
        return DiscOutput(self.adv_head(f).squeeze(-1), self.class_head(f), f)


# --------------------------------------------------------------------------
# losses


def _as_tensor(values) -> torch.Tensor:
    t = values if isinstance(values, torch.Tensor) else torch.as_tensor(values, dtype=torch.float64)
    if t.numel() == 0:
        raise UsageError("score list is empty")
    return t


def hinge_d_loss(fake_scores, real_scores) -> torch.Tensor:
    """mean max(0, 1 + D(fake)) + mean max(0, 1 - D(real)).

    Real scores are averaged over every conditional image in the batch.
    """
    fake, real = _as_tensor(fake_scores), _as_tensor(real_scores)
    return F.relu(1.0 + fake).mean() + F.relu(1.0 - real).mean()


def adv_g_loss(fake_scores) -> torch.Tensor:
    return -_as_tensor(fake_scores).mean()


def classification_loss(logits: torch.Tensor, labels) -> torch.Tensor:
    """Cross-entropy, averaged over the batch; accepts a single logit vector too."""
    logits = torch.as_tensor(logits)
    labels = torch.as_tensor(labels, dtype=torch.long)
    if logits.dim() == 1:
        logits, labels = logits[None], labels.reshape(1)
    n_cls = logits.shape[-1]
    if labels.numel() and (labels.min() < 0 or labels.max() >= n_cls):
        raise UsageError(f"labels must lie in [0, {n_cls}), got {labels.tolist()}")
    return F.cross_entropy(logits, labels)


def feature_matching_loss(scores: torch.Tensor, cond_feats: torch.Tensor, fake_feat: torch.Tensor) -> torch.Tensor:
    """Per-element mean |sum_i a_i D^(x_i) - D^(x~)|, averaged over the batch.

    Shapes ``(B, K)``, ``(B, K, F)``, ``(B, F)``, or the same without ``B``.
    """
    scores, cond_feats, fake_feat = (torch.as_tensor(t) for t in (scores, cond_feats, fake_feat))
    if scores.dim() == 1:
        scores, cond_feats, fake_feat = scores[None], cond_feats[None], fake_feat[None]
    if cond_feats.shape[:2] != scores.shape or cond_feats.shape[-1] != fake_feat.shape[-1]:
        raise ShapeError(
            f"shape mismatch: scores {tuple(scores.shape)}, cond {tuple(cond_feats.shape)}, "
            f"fake {tuple(fake_feat.shape)}"
        )
    fused = (scores.unsqueeze(-1) * cond_feats).sum(dim=1)
    return (fused - fake_feat).abs().mean()
