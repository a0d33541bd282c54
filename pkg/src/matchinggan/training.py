"""Alternating adversarial optimisation, checkpoints and the per-epoch metric log."""
from __future__ import annotations

import hashlib
import io
import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .config import TrainConfig, from_mapping
from .data import CategorySplit, DatasetManifest, ImageStore, sample_episode_batch
from .discriminator import (
    MatchingDiscriminator,
    adv_g_loss,
    classification_loss,
    feature_matching_loss,
    hinge_d_loss,
)
from .errors import CheckpointError, DataError, TrainingError
from .generator import MatchingGenerator, random_coefficients, weighted_reconstruction_loss

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "matchinggan-checkpoint"
CHECKPOINT_VERSION = 1
LOSS_TERMS = ("l_d", "l_c_d", "total_d", "l_gd", "l_1", "l_c_g", "l_m", "total_g")


@dataclass
class LossBundle:
    l_d: float = 0.0
    l_gd: float = 0.0
    l_1: float = 0.0
    l_c_d: float = 0.0
    l_c_g: float = 0.0
    l_m: float = 0.0
    total_g: float = 0.0
    total_d: float = 0.0

    def recomputed_totals(self, lambda_r: float, lambda_m: float) -> tuple[float, float]:
        g = self.l_gd + lambda_r * self.l_1 + self.l_c_g + lambda_m * self.l_m
        return g, self.l_d + self.l_c_d

    def merge(self, other: dict) -> "LossBundle":
        for k, v in other.items():
            setattr(self, k, v)
        return self


@dataclass
class TrainState:
    config: TrainConfig
    generator: MatchingGenerator
    discriminator: MatchingDiscriminator
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    class_ids: list  # seen category id for each classifier output
    noise_rng: torch.Generator
    data_rng: np.random.Generator
    epoch: int = 0

    def labels_for(self, category_ids) -> torch.Tensor:
        index = {c: i for i, c in enumerate(self.class_ids)}
        try:
            return torch.as_tensor([index[int(c)] for c in category_ids], dtype=torch.long)
        except KeyError as exc:
            raise DataError(f"category {exc.args[0]} is not a seen category") from None


def build_state(config: TrainConfig, class_ids: Sequence[int]) -> TrainState:
    """Fresh models and optimisers; all randomness derives from ``config.seed``."""
    config.validate()
    torch.manual_seed(config.seed)
    gen = MatchingGenerator(config.generator_config())
    disc = MatchingDiscriminator(config.discriminator_config(len(class_ids)))
    # in random-coefficient mode the matching encoders take no part in training;
    # a shared E_phi is listed under "encoder." and stays trainable
    g_params = [p for n, p in gen.named_parameters()
                if config.coefficient_mode == "matched"
                or not n.startswith(("noise_embed.", "match_encoder."))]
    opt_g = torch.optim.Adam(g_params, lr=config.learning_rate, betas=config.betas)
    opt_d = torch.optim.Adam(disc.parameters(), lr=config.learning_rate, betas=config.betas)
    noise_rng = torch.Generator().manual_seed(config.seed + 1)
    data_rng = np.random.default_rng(config.seed)
    return TrainState(config, gen, disc, opt_g, opt_d, list(class_ids), noise_rng, data_rng)


def _check_finite(losses: dict) -> None:
    for name, value in losses.items():
        if not torch.isfinite(value).all():
            raise TrainingError(f"non-finite loss term {name} = {value.item()}", term=name)


def _coefficients(state: TrainState, batch: int, k: int):
    if state.config.coefficient_mode != "random":
        return None
    return random_coefficients(k, state.noise_rng, batch=batch)


def _clip(params, max_norm: float) -> None:
    if max_norm > 0:
        torch.nn.utils.clip_grad_norm_(params, max_norm)


def discriminator_step(state: TrainState, conditionals: torch.Tensor, labels: torch.Tensor,
                       z: torch.Tensor, coefficients: torch.Tensor | None = None) -> dict:
    """One update of the discriminator on ``l_d + l_c_d``; the generator is only read."""
    G, D = state.generator, state.discriminator
    B, K = conditionals.shape[:2]
    if coefficients is None:
        coefficients = _coefficients(state, B, K)
    G.train()
    D.train()
    with torch.no_grad():
        fake, _ = G(conditionals, z, coefficients)
    real = conditionals.flatten(0, 1)
    out = D(torch.cat([real, fake]))
    real_score, fake_score = out.score[: B * K], out.score[B * K:]
    losses = {
        "l_d": hinge_d_loss(fake_score, real_score),
        "l_c_d": classification_loss(out.logits[: B * K], labels.repeat_interleave(K)),
    }
    losses["total_d"] = losses["l_d"] + losses["l_c_d"]
    _check_finite(losses)
    state.opt_d.zero_grad(set_to_none=True)
    losses["total_d"].backward()
    _clip(D.parameters(), state.config.grad_clip)
    state.opt_d.step()
    return {k: v.item() for k, v in losses.items()}


def generator_losses(state: TrainState, conditionals, labels, z, coefficients=None) -> dict:
    """Forward pass of every generator-side term, with the graph kept for backward."""
    cfg = state.config
    G, D = state.generator, state.discriminator
    B, K = conditionals.shape[:2]
    fake, scores = G(conditionals, z, coefficients)
    out = D(fake)
    with torch.no_grad():
        cond_feats = D.extract_features(conditionals.flatten(0, 1)).view(B, K, -1)
    losses = {
        "l_gd": adv_g_loss(out.score),
        "l_1": weighted_reconstruction_loss(scores, conditionals, fake),
        "l_c_g": classification_loss(out.logits, labels),
        "l_m": feature_matching_loss(scores, cond_feats, out.features),
    }
    losses["total_g"] = (losses["l_gd"] + cfg.lambda_r * losses["l_1"]
                         + losses["l_c_g"] + cfg.lambda_m * losses["l_m"])
    return losses


def generator_step(state: TrainState, conditionals: torch.Tensor, labels: torch.Tensor,
                   z: torch.Tensor, coefficients: torch.Tensor | None = None) -> dict:
    """One update of the generator on the weighted generator objective; D is frozen."""
    G, D = state.generator, state.discriminator
    B, K = conditionals.shape[:2]
    if coefficients is None:
        coefficients = _coefficients(state, B, K)
    G.train()
    D.train()
    D.requires_grad_(False)
    try:
        losses = generator_losses(state, conditionals, labels, z, coefficients)
        _check_finite(losses)
        state.opt_g.zero_grad(set_to_none=True)
        losses["total_g"].backward()
    finally:
        D.requires_grad_(True)
    _clip(G.parameters(), state.config.grad_clip)
    state.opt_g.step()
    return {k: v.item() for k, v in losses.items()}


def parameter_digest(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in sorted(module.named_parameters()):
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


# --------------------------------------------------------------------------
# checkpoints


def state_payload(state: TrainState) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": state.config.to_dict(),
        "epoch": state.epoch,
        "class_ids": list(state.class_ids),
        "generator": state.generator.state_dict(),
        "discriminator": state.discriminator.state_dict(),
        "opt_g": state.opt_g.state_dict(),
        "opt_d": state.opt_d.state_dict(),
        "rng": {
            "torch": torch.get_rng_state(),
            "noise": state.noise_rng.get_state(),
            "data": json.dumps(state.data_rng.bit_generator.state, sort_keys=True),
        },
    }


def save_checkpoint(state: TrainState, path) -> Path:
    """Write atomically: a crash mid-write never clobbers the previous file.

    The bytes depend only on the state, not on the destination path.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # serialise in memory: a file target would stamp its own name into the archive
    buf = io.BytesIO()
    torch.save(state_payload(state), buf)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(buf.getvalue())
    os.replace(tmp, path)
    return path


def _read_payload(path) -> dict:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint {path} does not exist") from None
    except Exception as exc:  # torch raises a zoo of types on corrupt archives
        raise CheckpointError(f"checkpoint {path} is corrupt: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a MatchingGAN checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path} has checkpoint version {payload.get('version')}, expected {CHECKPOINT_VERSION}"
        )
    return payload


def _load_module(module: torch.nn.Module, saved: dict, what: str) -> None:
    own = module.state_dict()
    for name, tensor in own.items():
        if name not in saved:
            raise CheckpointError(f"{what}: array {name} missing from checkpoint")
        if tuple(saved[name].shape) != tuple(tensor.shape):
            raise CheckpointError(
                f"{what}: array {name} has shape {tuple(saved[name].shape)} in the checkpoint, "
                f"model expects {tuple(tensor.shape)}"
            )
    extra = sorted(set(saved) - set(own))
    if extra:
        raise CheckpointError(f"{what}: checkpoint array {extra[0]} has no counterpart in the model")
    module.load_state_dict(saved)


def restore_state(state: TrainState, payload: dict) -> TrainState:
    _load_module(state.generator, payload["generator"], "generator")
    _load_module(state.discriminator, payload["discriminator"], "discriminator")
    state.opt_g.load_state_dict(payload["opt_g"])
    state.opt_d.load_state_dict(payload["opt_d"])
    state.epoch = payload["epoch"]
    torch.set_rng_state(payload["rng"]["torch"])
    state.noise_rng.set_state(payload["rng"]["noise"])
    state.data_rng.bit_generator.state = json.loads(payload["rng"]["data"])
    return state


def load_checkpoint(path, into: TrainState | None = None) -> TrainState:
    """Rebuild a training state from disk, or load onto an existing one.

    Loading onto a state whose architecture differs raises CheckpointError
    naming the first mismatched array.
    """
    payload = _read_payload(path)
    if into is None:
        into = build_state(from_mapping(payload["config"]), payload["class_ids"])
    return restore_state(into, payload)


# --------------------------------------------------------------------------
# the loop


def load_dataset(config: TrainConfig) -> tuple[ImageStore, CategorySplit]:
    if not config.manifest or not config.split:
        raise DataError("config needs both 'manifest' and 'split' paths")
    manifest = DatasetManifest.load(config.manifest)
    split = CategorySplit.load(config.split)
    store = ImageStore(manifest, config.image_channels, config.resolution)
    return store, split


@dataclass
class FitResult:
    state: TrainState
    history: list = field(default_factory=list)  # one dict per epoch
    checkpoint: Path | None = None


class MetricLog:
    """Line-delimited ``{"epoch", "term", "value"}`` records."""

    def __init__(self, path=None):
        self.path = Path(path) if path else None
        self.records: list[dict] = []
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def log(self, epoch: int, term: str, value: float) -> None:
        rec = {"epoch": epoch, "term": term, "value": float(value)}
        self.records.append(rec)
        if self.path:
            with self.path.open("a") as fh:
                fh.write(json.dumps(rec) + "\n")


def validation_l1(state: TrainState, conditionals: torch.Tensor, z: torch.Tensor,
                  coefficients: torch.Tensor | None = None, chunk: int = 64) -> float:
    """Weighted reconstruction loss in inference mode; never touches parameters."""
    G = state.generator
    was_training = G.training
    G.eval()
    total = 0.0
    with torch.no_grad():
        for s in range(0, len(conditionals), chunk):
            c = None if coefficients is None else coefficients[s:s + chunk]
            fake, scores = G(conditionals[s:s + chunk], z[s:s + chunk], c)
            total += weighted_reconstruction_loss(scores, conditionals[s:s + chunk], fake).item() * len(fake)
    G.train(was_training)
    return total / len(conditionals)


def fit(config: TrainConfig, store: ImageStore | None = None, split: CategorySplit | None = None,
        out_dir=None, resume=None) -> FitResult:
    """Train for ``config.epochs`` epochs of alternating D/G steps.

    Each epoch logs the mean of every loss term plus the validation-seen
    weighted reconstruction loss (``val_l1``).  ``last.pt`` is rewritten after
    every good epoch; a non-finite loss aborts with it left intact.
    """
    config.validate()
    if store is None or split is None:
        store, split = load_dataset(config)
    seen = sorted(split.seen)
    if not seen:
        raise DataError("split has no seen categories")
    out_dir = Path(out_dir or config.out)
    ckpt_dir = out_dir / "checkpoints"
    state = build_state(config, seen)
    if resume:
        load_checkpoint(resume, into=state)
    log = MetricLog(out_dir / "metrics.jsonl")

    k, B = config.k, config.batch_episodes
    steps = config.steps_per_epoch or max(1, math.ceil(sum(store.count(c) for c in seen) / (B * k)))

    val_cats = sorted(split.validation_seen)
    val = None
    if val_cats and config.validation_episodes > 0:
        vrng = np.random.default_rng(config.seed + 2)
        vc, _ = sample_episode_batch(store, val_cats, k, config.validation_episodes, vrng)
        vgen = torch.Generator().manual_seed(config.seed + 3)
        vz = torch.randn(len(vc), config.d_z, generator=vgen)
        vcoef = (random_coefficients(k, vgen, batch=len(vc))
                 if config.coefficient_mode == "random" else None)
        val = (torch.from_numpy(vc), vz, vcoef)

    result = FitResult(state)
    last = ckpt_dir / "last.pt"
    for epoch in range(state.epoch + 1, config.epochs + 1):
        sums = dict.fromkeys(LOSS_TERMS, 0.0)
        n_d = n_g = 0
        for _ in range(steps):
            for _ in range(config.d_steps_per_g_step):
                cond, cats = sample_episode_batch(store, seen, k, B, state.data_rng)
                cond, labels = torch.from_numpy(cond), state.labels_for(cats)
                z = torch.randn(B, config.d_z, generator=state.noise_rng)
                for name, v in discriminator_step(state, cond, labels, z).items():
                    sums[name] += v
                n_d += 1
            cond, cats = sample_episode_batch(store, seen, k, B, state.data_rng)
            cond, labels = torch.from_numpy(cond), state.labels_for(cats)
            z = torch.randn(B, config.d_z, generator=state.noise_rng)
            for name, v in generator_step(state, cond, labels, z).items():
                sums[name] += v
            n_g += 1
        state.epoch = epoch
        record = {"epoch": epoch}
        for name in LOSS_TERMS:
            record[name] = sums[name] / (n_d if name in ("l_d", "l_c_d", "total_d") else n_g)
        if val is not None:
            record["val_l1"] = validation_l1(state, *val)
        for name, v in record.items():
            if name != "epoch":
                log.log(epoch, name, v)
        result.history.append(record)
        logger.info("epoch %d: %s", epoch,
                    " ".join(f"{k}={v:.4f}" for k, v in record.items() if k != "epoch"))
        save_checkpoint(state, last)
        if config.checkpoint_every and epoch % config.checkpoint_every == 0:
            save_checkpoint(state, ckpt_dir / f"epoch_{epoch:04d}.pt")
    result.checkpoint = last
    return result
