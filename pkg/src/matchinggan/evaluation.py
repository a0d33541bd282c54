"""Image banks for unseen categories and the protocols that score them.

The feature extractor is pluggable: anything with ``features(images)`` and
``posteriors(images)`` works.  The default is a compact residual classifier
pretrained on seen categories; its classification head is refit per protocol.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Mapping, Protocol, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import ImageStore
from .errors import DataError, ProtocolError
from .generator import MatchingGenerator, random_coefficients
from .metrics import fid_from_features, inception_score

DEFAULT_BANK_SIZE = 128
DEFAULT_AUGMENT_SIZE = 512
DEFAULT_EPISODES = 10


class FeatureExtractor(Protocol):
    def features(self, images: np.ndarray) -> np.ndarray: ...

    def posteriors(self, images: np.ndarray) -> np.ndarray: ...


@dataclass
class MetricReport:
    run_id: str
    metric: str
    value: float
    protocol: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


# --------------------------------------------------------------------------
# backbone


class _Block(nn.Module):
    def __init__(self, c_in, c_out):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(c_out)
        self.shortcut = nn.Conv2d(c_in, c_out, 1, bias=False) if c_in != c_out else nn.Identity()

    def forward(self, x):
        h = F.relu(self.bn1(self.conv1(x)))
        return F.relu(self.shortcut(x) + self.bn2(self.conv2(h)))


class ResidualClassifier(nn.Module):
    def __init__(self, in_channels: int, num_classes: int, widths=(16, 32, 64)):
        super().__init__()
        layers, prev = [], in_channels
        for w in widths:
            layers += [_Block(prev, w), nn.AvgPool2d(2)]
            prev = w
        self.trunk = nn.Sequential(*layers)
        self.head = nn.Linear(prev, num_classes)
        self.feature_dim = prev

    def features(self, x):
        return self.trunk(x).mean(dim=(2, 3))

    def forward(self, x):
        return self.head(self.features(x))


def _batched(fn, images: np.ndarray, batch: int = 256) -> np.ndarray:
    outs = []
    with torch.no_grad():
        for s in range(0, len(images), batch):
            outs.append(fn(torch.as_tensor(images[s:s + batch], dtype=torch.float32)).numpy())
    return np.concatenate(outs).astype(np.float64)


@dataclass
class LinearHead:
    """Multinomial logistic regression on fixed features."""

    weight: np.ndarray
    bias: np.ndarray
    mean: np.ndarray
    scale: np.ndarray

    def logits(self, feats: np.ndarray) -> np.ndarray:
        return ((feats - self.mean) / self.scale) @ self.weight.T + self.bias

    def posteriors(self, feats: np.ndarray) -> np.ndarray:
        z = self.logits(feats)
        z = z - z.max(axis=1, keepdims=True)
        p = np.exp(z)
        return p / p.sum(axis=1, keepdims=True)

    def predict(self, feats: np.ndarray) -> np.ndarray:
        # np.argmax breaks ties at the lowest class index
        return np.argmax(self.logits(feats), axis=1)


def fit_linear_head(feats: np.ndarray, labels: np.ndarray, num_classes: int,
                    weight_decay: float = 1e-3, iters: int = 200,
                    sample_weight: np.ndarray | None = None) -> LinearHead:
    """Full-batch L-BFGS on standardised features; deterministic for fixed inputs.

    ``sample_weight`` turns the loss into a weighted mean of per-sample
    cross-entropies.
    """
    feats = np.asarray(feats, dtype=np.float64)
    mean = feats.mean(axis=0)
    scale = feats.std(axis=0) + 1e-6
    x = torch.from_numpy((feats - mean) / scale)
    y = torch.as_tensor(labels, dtype=torch.long)
    sw = torch.ones(len(x), dtype=torch.float64) if sample_weight is None else \
        torch.as_tensor(sample_weight, dtype=torch.float64)
    w = torch.zeros(num_classes, x.shape[1], dtype=torch.float64, requires_grad=True)
    b = torch.zeros(num_classes, dtype=torch.float64, requires_grad=True)
    opt = torch.optim.LBFGS([w, b], lr=1.0, max_iter=iters, line_search_fn="strong_wolfe")

    def closure():
        opt.zero_grad()
        ce = F.cross_entropy(x @ w.T + b, y, reduction="none")
        loss = (ce * sw).sum() / sw.sum() + weight_decay * (w * w).sum()
        loss.backward()
        return loss

    opt.step(closure)
    return LinearHead(w.detach().numpy(), b.detach().numpy(), mean, scale)


class EvalBackbone:
    """Residual classifier pretrained on seen categories.

    ``features`` gives the pooled penultimate activations.  ``posteriors`` uses
    whichever head was last fitted with :meth:`fit_head` (the pretraining head
    until then).
    """

    def __init__(self, net: ResidualClassifier):
        self.net = net.eval()
        self.head: LinearHead | None = None

    @classmethod
    def pretrain(cls, store: ImageStore, categories: Sequence[int], epochs: int = 15,
                 seed: int = 0, widths=(16, 32, 64), lr: float = 2e-3, batch: int = 64) -> "EvalBackbone":
        cats = sorted(categories)
        if not cats:
            raise DataError("backbone pretraining needs at least one category")
        x = np.concatenate([store.images(c) for c in cats])
        y = np.concatenate([np.full(store.count(c), i) for i, c in enumerate(cats)])
        torch.manual_seed(seed)
        net = ResidualClassifier(x.shape[1], len(cats), widths)
        opt = torch.optim.Adam(net.parameters(), lr=lr)
        rng = np.random.default_rng(seed)
        xt, yt = torch.from_numpy(x), torch.from_numpy(y)
        net.train()
        for _ in range(epochs):
            order = rng.permutation(len(x))
            for s in range(0, len(x), batch):
                idx = torch.from_numpy(order[s:s + batch])
                xb = _shift(xt[idx], rng)
                loss = F.cross_entropy(net(xb), yt[idx])
                opt.zero_grad()
                loss.backward()
                opt.step()
        return cls(net)

    @property
    def feature_dim(self) -> int:
        return self.net.feature_dim

    def features(self, images: np.ndarray) -> np.ndarray:
        return _batched(self.net.features, np.asarray(images))

    def fit_head(self, images: np.ndarray, labels: np.ndarray, num_classes: int) -> LinearHead:
        self.head = fit_linear_head(self.features(images), labels, num_classes)
        return self.head

    def posteriors(self, images: np.ndarray) -> np.ndarray:
        if self.head is None:
            return _batched(lambda t: torch.softmax(self.net(t), dim=1), np.asarray(images))
        return self.head.posteriors(self.features(images))

    def state_dict(self) -> dict:
        return {"widths": [m.conv1.out_channels for m in self.net.trunk if isinstance(m, _Block)],
                "in_channels": self.net.trunk[0].conv1.in_channels,
                "num_classes": self.net.head.out_features,
                "net": self.net.state_dict()}

    @classmethod
    def from_state_dict(cls, state: dict) -> "EvalBackbone":
        net = ResidualClassifier(state["in_channels"], state["num_classes"], tuple(state["widths"]))
        net.load_state_dict(state["net"])
        return cls(net)


def _shift(x: torch.Tensor, rng: np.random.Generator, max_shift: int = 2) -> torch.Tensor:
    """Random translation by up to ``max_shift`` pixels, padding with the background."""
    dx, dy = rng.integers(-max_shift, max_shift + 1, size=2)
    pad = max_shift
    xp = F.pad(x, (pad, pad, pad, pad), value=-1.0)
    h, w = x.shape[2:]
    return xp[:, :, pad + dy: pad + dy + h, pad + dx: pad + dx + w]


# --------------------------------------------------------------------------
# generation


@dataclass
class ImageBank:
    images: dict  # category -> (count, C, H, W) float32 in [-1, 1]
    conditionals: dict  # category -> (count, K2) indices into the conditioning pool
    protocol: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return sum(len(v) for v in self.images.values())

    def stacked(self) -> tuple[np.ndarray, np.ndarray]:
        cats = sorted(self.images)
        x = np.concatenate([self.images[c] for c in cats])
        y = np.concatenate([np.full(len(self.images[c]), c) for c in cats])
        return x, y


def generate_bank(generator: MatchingGenerator, pools: ImageStore | Mapping[int, np.ndarray],
                  count: int, k2: int, seed: int, categories: Sequence[int] | None = None,
                  batch: int = 64) -> ImageBank:
    """``count`` images per category, each from fresh noise and a fresh K2-episode.

    ``pools`` supplies the conditioning images per category; the bank is a
    deterministic function of ``seed``.
    """
    store = pools if isinstance(pools, ImageStore) else ImageStore.from_arrays(pools)
    cats = sorted(categories if categories is not None else store.categories)
    for c in cats:
        if store.count(c) < k2:
            raise DataError(f"category {c} has {store.count(c)} images, fewer than K2={k2}")
    rng = np.random.default_rng(seed)
    noise = torch.Generator().manual_seed(seed)
    random_mode = generator.cfg.coefficient_mode == "random"
    was_training = generator.training
    generator.eval()
    images, conds = {}, {}
    try:
        for c in cats:
            pool = store.images(c)
            idx = np.stack([rng.choice(len(pool), size=k2, replace=False) for _ in range(count)])
            out = np.empty((count, *pool.shape[1:]), dtype=np.float32)
            for s in range(0, count, batch):
                sel = idx[s:s + batch]
                cond = torch.from_numpy(pool[sel])
                z = torch.randn(len(sel), generator.cfg.d_z, generator=noise)
                coef = random_coefficients(k2, noise, batch=len(sel)) if random_mode else None
                with torch.no_grad():
                    fake, _ = generator(cond, z, coef)
                out[s:s + len(sel)] = fake.numpy()
            images[c], conds[c] = out, idx
    finally:
        generator.train(was_training)
    return ImageBank(images, conds, {"count": count, "k2": k2, "seed": seed})


# --------------------------------------------------------------------------
# protocols


def _split_shots(store: ImageStore, cats: Sequence[int], shots: int, rng: np.random.Generator):
    train, test = {}, {}
    for c in cats:
        perm = rng.permutation(store.count(c))
        if store.count(c) < shots:
            raise ProtocolError(f"category {c} has {store.count(c)} images, fewer than {shots} shots")
        train[c] = store.images(c)[perm[:shots]]
        test[c] = store.images(c)[perm[shots:]]
    if sum(len(v) for v in test.values()) == 0:
        raise ProtocolError("empty test set: every image went to training")
    return train, test


def _classify(backbone: FeatureExtractor, train: dict, test: dict, extra: dict | None = None,
              balanced: bool = True) -> float:
    """Accuracy of a linear head trained on ``train`` plus ``extra`` images.

    With ``balanced`` the extra images of a category share the total weight
    of its real training images, so 512 generated images cannot outvote a
    handful of real ones.
    """
    cats = sorted(train)
    if len(cats) == 1:
        return 1.0
    label = {c: i for i, c in enumerate(cats)}
    xs, ys, ws = [], [], []
    for source in (train, extra or {}):
        for c, imgs in source.items():
            xs.append(imgs)
            ys.append(np.full(len(imgs), label[c]))
            share = len(train[c]) / len(imgs) if source is extra and balanced and len(imgs) else 1.0
            ws.append(np.full(len(imgs), share))
    x, y = np.concatenate(xs), np.concatenate(ys)
    head = fit_linear_head(backbone.features(x), y, len(cats), sample_weight=np.concatenate(ws))
    tx = np.concatenate([test[c] for c in cats])
    ty = np.concatenate([np.full(len(test[c]), label[c]) for c in cats])
    if len(tx) == 0:
        raise ProtocolError("empty test set")
    return float((head.predict(backbone.features(tx)) == ty).mean())


def lowdata_protocol(generator: MatchingGenerator | None, backbone: FeatureExtractor,
                     store: ImageStore, shots: int, augment: bool, seed: int,
                     k2: int = 3, n_generated: int = DEFAULT_AUGMENT_SIZE,
                     categories: Sequence[int] | None = None, balanced: bool = True) -> float:
    """Accuracy on held-out unseen images of a classifier trained on ``shots`` per category.

    With ``augment`` the training set also gets ``n_generated`` images per
    category, generated from that category's training shots only.  With
    ``balanced`` those images carry the weight of the real shots in total,
    otherwise each counts as one real image.
    """
    cats = sorted(categories if categories is not None else store.categories)
    rng = np.random.default_rng(seed)
    train, test = _split_shots(store, cats, shots, rng)
    extra = None
    if augment:
        if generator is None:
            raise ProtocolError("augmented protocol needs a generator")
        extra = generate_bank(generator, train, n_generated, min(k2, shots), seed + 1).images
    return _classify(backbone, train, test, extra, balanced)


@dataclass
class FewShotResult:
    mean_accuracy: float
    episode_accuracies: list


def fewshot_protocol(generator: MatchingGenerator, backbone: FeatureExtractor, store: ImageStore,
                     n_way: int, c_shot: int, seed: int, episodes: int = DEFAULT_EPISODES,
                     k2: int = 3, n_generated: int = DEFAULT_AUGMENT_SIZE,
                     augment: bool = True, balanced: bool = True) -> FewShotResult:
    cats = store.categories
    if len(cats) < n_way:
        raise ProtocolError(f"{n_way}-way episodes need {n_way} categories, have {len(cats)}")
    rng = np.random.default_rng(seed)
    accs = []
    for e in range(episodes):
        chosen = sorted(int(c) for c in rng.choice(cats, size=n_way, replace=False))
        ep_seed = int(rng.integers(2**31))
        accs.append(lowdata_protocol(generator, backbone, store, c_shot, augment, ep_seed,
                                     k2=k2, n_generated=n_generated, categories=chosen,
                                     balanced=balanced))
    return FewShotResult(float(np.mean(accs)), accs)


@dataclass
class FidIsResult:
    fid: float
    inception_score: float
    bank: ImageBank


def fid_is_protocol(generator: MatchingGenerator, backbone: EvalBackbone, store: ImageStore,
                    seed: int, count: int = DEFAULT_BANK_SIZE, k2: int = 3) -> FidIsResult:
    """FID against all real unseen images; IS from a head refit on those real images."""
    cats = store.categories
    bank = generate_bank(generator, store, count, k2, seed)
    real = np.concatenate([store.images(c) for c in cats])
    real_y = np.concatenate([np.full(store.count(c), i) for i, c in enumerate(cats)])
    fake, _ = bank.stacked()
    fid = fid_from_features(backbone.features(real), backbone.features(fake))
    backbone.fit_head(real, real_y, len(cats))
    return FidIsResult(fid, inception_score(backbone.posteriors(fake)), bank)
