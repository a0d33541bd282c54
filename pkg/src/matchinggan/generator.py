"""Matching generator.

A noise vector and K conditional images are projected into a common
matching space; softmax-normalised cosine similarities become interpolation
coefficients that blend the conditionals' multi-level encoder features, and a
UNet-style decoder turns the blended features into a new image.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .errors import NumericError, ShapeError, UsageError

COSINE_EPS = 1e-8


@dataclass(frozen=True)
class GeneratorConfig:
    image_channels: int = 1
    resolution: int = 32
    d_z: int = 128
    channels: tuple = (64, 64, 128, 128)
    layers_per_block: int = 4
    skip_connections: int = 2
    shared_encoder: bool = True
    coefficient_mode: str = "matched"
    dropout: float = 0.2

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if len(self.channels) != 4:
            raise ShapeError(f"encoder needs four block widths, got {self.channels}")
        if self.resolution % 16:
            raise ShapeError(f"resolution must be a multiple of 16, got {self.resolution}")
        if not 1 <= self.skip_connections <= 3:
            raise UsageError(f"skip_connections must be 1, 2 or 3, got {self.skip_connections}")
        if self.coefficient_mode not in ("matched", "random"):
            raise UsageError(f"unknown coefficient mode {self.coefficient_mode!r}")

    @property
    def embedding_dim(self) -> int:
        return self.channels[-1]


def init_weights(module: nn.Module, std: float = 0.02) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            nn.init.normal_(m.weight, 0.0, std)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


# --------------------------------------------------------------------------
# building blocks


class Composite(nn.Module):
    """leaky ReLU -> batch norm -> (optional 2x replicator) -> conv."""

    def __init__(self, c_in, c_out, stride=1, upsample=False):
        super().__init__()
        self.norm = nn.BatchNorm2d(c_in)
        self.upsample = upsample
        self.conv = nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1)

    def forward(self, x):
        x = self.norm(F.leaky_relu(x, 0.2))
        if self.upsample:
            x = F.interpolate(x, scale_factor=2, mode="nearest")
        return self.conv(x)


class EncoderBlock(nn.Module):
    """Residual stride-1 composites followed by one stride-2 composite."""

    def __init__(self, c_in, c_out, layers=4, dropout=0.2):
        super().__init__()
        self.inner = nn.ModuleList(
            Composite(c_in if i == 0 else c_out, c_out) for i in range(layers - 1)
        )
        self.down = Composite(c_out if layers > 1 else c_in, c_out, stride=2)
        self.drop = nn.Dropout(dropout)

    def forward(self, x):
        for i, layer in enumerate(self.inner):
            x = layer(x) if i == 0 else x + layer(x)
        return self.drop(self.down(x))


class DecoderBlock(nn.Module):
    """One 2x upscaling composite followed by residual stride-1 composites."""

    def __init__(self, c_in, c_out, layers=4, dropout=0.2):
        super().__init__()
        self.up = Composite(c_in, c_out, upsample=True)
        self.drop = nn.Dropout(dropout)
        self.inner = nn.ModuleList(Composite(c_out, c_out) for _ in range(layers - 1))

    def forward(self, x):
        x = self.drop(self.up(x))
        for layer in self.inner:
            x = x + layer(x)
        return x


class Encoder(nn.Module):
    """Four stride-2 blocks; returns every block output, shallowest first."""

    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        widths = (cfg.image_channels, *cfg.channels)
        self.blocks = nn.ModuleList(
            EncoderBlock(widths[i], widths[i + 1], cfg.layers_per_block, cfg.dropout)
            for i in range(4)
        )
        self.cfg = cfg

    def forward(self, x) -> list[torch.Tensor]:
        c = self.cfg.image_channels
        if x.dim() != 4 or x.shape[1] != c or x.shape[2] % 16 or x.shape[3] % 16:
            raise ShapeError(f"encoder expects (N, {c}, H, W) with H, W multiples of 16; got {tuple(x.shape)}")
        feats = []
        for block in self.blocks:
            x = block(x)
            feats.append(x)
        return feats


class Decoder(nn.Module):
    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        enc = cfg.channels
        dec = tuple(reversed(enc))
        L = cfg.skip_connections
        # skip level j (1..L) comes from encoder block 4-j+1; it meets decoder block j
        blocks = []
        prev = enc[-1]
        for b in range(4):
            c_in = prev + (enc[3 - b] if b < L else 0)
            blocks.append(DecoderBlock(c_in, dec[b], cfg.layers_per_block, cfg.dropout))
            prev = dec[b]
        self.blocks = nn.ModuleList(blocks)
        self.out = Composite(prev, cfg.image_channels)
        self.cfg = cfg

    def forward(self, fused: Sequence[torch.Tensor]) -> torch.Tensor:
        L = self.cfg.skip_connections
        if len(fused) != L + 1:
            raise ShapeError(f"decoder expects {L + 1} fused levels, got {len(fused)}")
        x = fused[0]
        for b, block in enumerate(self.blocks):
            if b < L:
                skip = fused[b + 1]
                if skip.shape[2:] != x.shape[2:]:
                    raise ShapeError(
                        f"skip level {b + 1} has spatial size {tuple(skip.shape[2:])}, "
                        f"decoder stage expects {tuple(x.shape[2:])}"
                    )
                x = torch.cat([x, skip], dim=1)
            x = block(x)
        return torch.tanh(self.out(x))


# --------------------------------------------------------------------------
# functional pieces


def similarity_scores(z_emb: torch.Tensor, cond_embs: torch.Tensor, eps: float = COSINE_EPS) -> torch.Tensor:
    """Softmax over K of the cosine similarity between noise and condition embeddings.

    ``z_emb`` is ``(..., d)`` and ``cond_embs`` is ``(..., K, d)``; the result is
    ``(..., K)`` and lies on the probability simplex.
    """
    if cond_embs.dim() < 2 or cond_embs.shape[-2] < 1:
        raise ShapeError("need at least one condition embedding")
    if z_emb.shape[-1] != cond_embs.shape[-1]:
        raise ShapeError(f"embedding dims differ: {z_emb.shape[-1]} vs {cond_embs.shape[-1]}")
    if torch.isnan(z_emb).any() or torch.isnan(cond_embs).any():
        raise NumericError("NaN in matching embeddings")
    z = z_emb.unsqueeze(-2)
    dot = (z * cond_embs).sum(-1)
    denom = z.norm(dim=-1).clamp_min(eps) * cond_embs.norm(dim=-1).clamp_min(eps)
    return torch.softmax(dot / denom, dim=-1)


def fuse_features(scores: torch.Tensor, pyramids: Sequence[torch.Tensor]) -> list[torch.Tensor]:
    """Blend per-conditional features with the interpolation coefficients.

    ``scores`` is ``(B, K)``; every pyramid level is ``(B, K, C, h, w)``.  Each
    fused level is ``sum_i scores[:, i] * level[:, i]`` with shape ``(B, C, h, w)``.
    """
    out = []
    for j, level in enumerate(pyramids):
        if level.shape[:2] != scores.shape:
            raise ShapeError(
                f"level {j} has leading shape {tuple(level.shape[:2])}, scores are {tuple(scores.shape)}"
            )
        w = scores.reshape(*scores.shape, *([1] * (level.dim() - 2)))
        out.append((w * level).sum(dim=1))
    return out


def mean_abs(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Per-element mean absolute difference over all but the leading dim."""
    return (a - b).abs().flatten(1).mean(dim=1)


def weighted_reconstruction_loss(scores: torch.Tensor, conditionals: torch.Tensor, generated: torch.Tensor) -> torch.Tensor:
    """Score-weighted L1 distance between the output and each conditional.

    Shapes: scores ``(B, K)``, conditionals ``(B, K, C, H, W)``, generated
    ``(B, C, H, W)``; unbatched inputs are accepted as well.  The L1 term uses
    the per-element mean, and the batch is averaged.
    """
    if scores.dim() == 1:
        scores, conditionals, generated = scores[None], conditionals[None], generated[None]
    if conditionals.shape[2:] != generated.shape[1:] or conditionals.shape[:2] != scores.shape:
        raise ShapeError(
            f"shape mismatch: scores {tuple(scores.shape)}, conditionals "
            f"{tuple(conditionals.shape)}, generated {tuple(generated.shape)}"
        )
    B, K = scores.shape
    dist = mean_abs(conditionals.flatten(0, 1), generated.repeat_interleave(K, dim=0)).view(B, K)
    return (scores * dist).sum(dim=1).mean()


def random_coefficients(k: int, generator: torch.Generator | None = None, batch: int | None = None) -> torch.Tensor:
    """Uniform(0, 1) draws normalised by their sum (random-coefficient ablation)."""
    if k < 1:
        raise UsageError(f"K must be >= 1, got {k}")
    shape = (k,) if batch is None else (batch, k)
    u = torch.rand(shape, generator=generator, dtype=torch.float64)
    # uniform draws can be exactly 0; keep the simplex strictly positive
    u = u.clamp_min(torch.finfo(torch.float64).tiny)
    return (u / u.sum(-1, keepdim=True)).float()


# --------------------------------------------------------------------------
# the generator module


class MatchingGenerator(nn.Module):
    def __init__(self, cfg: GeneratorConfig = GeneratorConfig()):
        super().__init__()
        self.cfg = cfg
        self.noise_embed = nn.Linear(cfg.d_z, cfg.embedding_dim)
        self.encoder = Encoder(cfg)  # E_psi
        # E_phi: the same module object when shared, so storage is shared too
        self.match_encoder = self.encoder if cfg.shared_encoder else Encoder(cfg)
        self.decoder = Decoder(cfg)
        init_weights(self)

    # -- pieces ----------------------------------------------------------

    def embed_noise(self, z: torch.Tensor) -> torch.Tensor:
        if z.shape[-1] != self.cfg.d_z:
            raise ShapeError(f"noise has dim {z.shape[-1]}, expected {self.cfg.d_z}")
        return self.noise_embed(z)

    def extract_feature_pyramid(self, x: torch.Tensor) -> list[torch.Tensor]:
        """Level 0 is the bottleneck; levels 1..L are the skip features, deepest first."""
        self._check_images(x)
        feats = self.encoder(x)
        return [feats[-1]] + [feats[3 - j] for j in range(self.cfg.skip_connections)]

    def embed_condition(self, x: torch.Tensor, bottleneck: torch.Tensor | None = None) -> torch.Tensor:
        """Spatial mean of the matching encoder's bottleneck feature."""
        if bottleneck is None or not self.cfg.shared_encoder:
            self._check_images(x)
            bottleneck = self.match_encoder(x)[-1]
        return bottleneck.mean(dim=(2, 3))

    def decode(self, fused: Sequence[torch.Tensor]) -> torch.Tensor:
        return self.decoder(fused)

    def _check_images(self, x):
        c = self.cfg.image_channels
        if x.dim() != 4 or x.shape[1] != c or x.shape[2] % 16 or x.shape[3] % 16:
            raise ShapeError(f"expected images (N, {c}, H, W) with H, W multiples of 16, got {tuple(x.shape)}")

    # -- composed forward ----------------------------------------------

    def forward(
        self,
        conditionals: torch.Tensor,
        z: torch.Tensor,
        coefficients: torch.Tensor | None = None,
        return_pyramids: bool = False,
    ):
        """Generate one image per episode.

        ``conditionals`` is ``(B, K, C, H, W)`` and ``z`` is ``(B, d_z)``.  In
        random-coefficient mode the caller supplies ``coefficients`` (B, K).
        Returns ``(images, scores)`` and optionally the per-conditional pyramids.
        """
        if conditionals.dim() != 5:
            raise ShapeError(f"conditionals must be (B, K, C, H, W), got {tuple(conditionals.shape)}")
        B, K = conditionals.shape[:2]
        if z.shape[0] != B:
            raise ShapeError(f"{z.shape[0]} noise vectors for {B} episodes")
        flat = conditionals.flatten(0, 1)
        levels = self.extract_feature_pyramid(flat)
        if self.cfg.coefficient_mode == "random":
            if coefficients is None:
                raise UsageError("random coefficient mode needs explicit coefficients")
            scores = coefficients.to(flat.dtype)
        else:
            cond_emb = self.embed_condition(flat, bottleneck=levels[0]).view(B, K, -1)
            scores = similarity_scores(self.embed_noise(z), cond_emb)
        pyramids = [lv.view(B, K, *lv.shape[1:]) for lv in levels]
        image = self.decode(fuse_features(scores, pyramids))
        if return_pyramids:
            return image, scores, pyramids
        return image, scores

    @torch.no_grad()
    def generate(
        self,
        z: torch.Tensor,
        conditionals: torch.Tensor,
        coefficients: torch.Tensor | None = None,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Single-episode generation, invariant to the order of the conditionals.

        Conditionals are processed in a canonical (content-sorted) order so the
        image is bitwise independent of how the caller ordered them; the scores
        are returned in the caller's order.
        """
        if conditionals.dim() != 4:
            raise ShapeError(f"conditionals must be (K, C, H, W), got {tuple(conditionals.shape)}")
        order = canonical_order(conditionals)
        inv = torch.empty_like(order)
        inv[order] = torch.arange(len(order))
        coeff = None if coefficients is None else coefficients[order][None]
        image, scores = self(conditionals[order][None], z.reshape(1, -1), coeff)
        return image[0], scores[0][inv]


def canonical_order(images: torch.Tensor) -> torch.Tensor:
    """Permutation sorting images by their raw bytes."""
    keys = [images[i].detach().cpu().contiguous().numpy().tobytes() for i in range(len(images))]
    return torch.as_tensor(sorted(range(len(keys)), key=keys.__getitem__), dtype=torch.long)


def sample_noise(batch: int, d_z: int, generator: torch.Generator | None = None) -> torch.Tensor:
    return torch.randn(batch, d_z, generator=generator)


def feature_shapes(cfg: GeneratorConfig, resolution: int | None = None) -> list[tuple]:
    """Expected pyramid level shapes (C, h, w), from stride arithmetic alone."""
    r = resolution or cfg.resolution
    sizes = [(cfg.channels[i], r >> (i + 1), r >> (i + 1)) for i in range(4)]
    return [sizes[3]] + [sizes[3 - j] for j in range(cfg.skip_connections)]

