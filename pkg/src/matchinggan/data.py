"""Datasets on disk, category splits and K-shot episode sampling.

Layout on disk is ``root/<category_name>/<image files>``.  Which files belong
to a category (after capping) lives in a manifest file; which categories are
seen / validation-seen / unseen lives in a separate split file, so a split is
a reproducible artifact rather than a directory move.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from PIL import Image

from .errors import ConfigError, DataError

IMAGE_SUFFIXES = (".png", ".bmp", ".gif", ".tif", ".tiff", ".jpg", ".jpeg")
MANIFEST_FORMAT = "matchinggan-manifest"
SPLIT_FORMAT = "matchinggan-split"
FORMAT_VERSION = 1
SPLIT_TAGS = ("seen", "validation_seen", "unseen")


# --------------------------------------------------------------------------
# pixel range


def normalize_image(raw) -> np.ndarray:
    """Map raw intensities in [0, 255] affinely onto [-1, 1] (float32)."""
    arr = np.asarray(raw, dtype=np.float64)
    if arr.size and (not np.all(np.isfinite(arr)) or arr.min() < 0 or arr.max() > 255):
        raise DataError(
            f"raw pixel values must lie in [0, 255], got [{arr.min()}, {arr.max()}]"
        )
    return (arr / 127.5 - 1.0).astype(np.float32)


def denormalize_image(pixels) -> np.ndarray:
    """Inverse of :func:`normalize_image`, quantized back to uint8."""
    arr = np.asarray(pixels, dtype=np.float64)
    return np.clip(np.rint((arr + 1.0) * 127.5), 0, 255).astype(np.uint8)


def load_image(path, channels: int = 1, resolution: int | None = None) -> np.ndarray:
    """Decode one raster file to a normalized ``(C, H, W)`` float32 array."""
    try:
        with Image.open(path) as img:
            img = img.convert("L" if channels == 1 else "RGB")
            if resolution is not None and img.size != (resolution, resolution):
                img = img.resize((resolution, resolution), Image.BILINEAR)
            arr = np.asarray(img, dtype=np.uint8)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot decode image {path}: {exc}") from exc
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = arr.transpose(2, 0, 1)
    return normalize_image(arr)


# --------------------------------------------------------------------------
# domain types


@dataclass(frozen=True)
class ImageSample:
    pixels: np.ndarray
    category_id: int
    source_path: str = ""

    def __post_init__(self):
        p = self.pixels
        if p.ndim != 3:
            raise DataError(f"pixels must be (C, H, W), got shape {p.shape}")
        if p.shape[1] % 16 or p.shape[2] % 16:
            raise DataError(f"height and width must be multiples of 16, got {p.shape[1:]}")
        if not np.all(np.isfinite(p)) or p.min() < -1.0 or p.max() > 1.0:
            raise DataError(f"pixels of {self.source_path or 'sample'} outside [-1, 1]")


@dataclass(frozen=True)
class Episode:
    conditionals: tuple
    category_id: int

    def __post_init__(self):
        if not self.conditionals:
            raise DataError("an episode needs at least one conditional image")
        object.__setattr__(self, "conditionals", tuple(self.conditionals))
        for s in self.conditionals:
            if s.category_id != self.category_id:
                raise DataError(
                    f"conditional from category {s.category_id} in episode of {self.category_id}"
                )
        paths = [s.source_path for s in self.conditionals if s.source_path]
        if len(paths) != len(set(paths)):
            raise DataError("duplicate source_path inside one episode")

    @property
    def K(self) -> int:
        return len(self.conditionals)

    def stack(self) -> np.ndarray:
        return np.stack([s.pixels for s in self.conditionals])


@dataclass(frozen=True)
class CategorySplit:
    seen: frozenset
    validation_seen: frozenset
    unseen: frozenset

    def __post_init__(self):
        for name in SPLIT_TAGS:
            object.__setattr__(self, name, frozenset(int(c) for c in getattr(self, name)))
        if self.seen & self.unseen or self.seen & self.validation_seen or (
            self.validation_seen & self.unseen
        ):
            raise ConfigError("category split sets must be pairwise disjoint")

    def sizes(self) -> tuple[int, int, int]:
        return len(self.seen), len(self.validation_seen), len(self.unseen)

    def to_dict(self, seed=None) -> dict:
        return {
            "format": SPLIT_FORMAT,
            "version": FORMAT_VERSION,
            "seed": seed,
            **{name: sorted(getattr(self, name)) for name in SPLIT_TAGS},
        }

    def save(self, path, seed=None) -> None:
        _write_json(path, self.to_dict(seed))

    @classmethod
    def load(cls, path) -> "CategorySplit":
        data = _read_json(path, SPLIT_FORMAT)
        return cls(**{name: data[name] for name in SPLIT_TAGS})


@dataclass(frozen=True)
class Category:
    id: int
    name: str
    files: tuple

    def to_dict(self) -> dict:
        return {"id": self.id, "name": self.name, "files": list(self.files)}


@dataclass(frozen=True)
class DatasetManifest:
    root: str
    categories: tuple
    cap: int | None = None
    seed: int = 0

    @property
    def category_ids(self) -> list[int]:
        return [c.id for c in self.categories]

    def category(self, category_id: int) -> Category:
        for c in self.categories:
            if c.id == category_id:
                return c
        raise DataError(f"unknown category id {category_id}")

    def paths(self, category_id: int) -> list[Path]:
        return [Path(self.root) / f for f in self.category(category_id).files]

    def to_dict(self) -> dict:
        return {
            "format": MANIFEST_FORMAT,
            "version": FORMAT_VERSION,
            "root": str(self.root),
            "cap": self.cap,
            "seed": self.seed,
            "categories": [c.to_dict() for c in self.categories],
        }

    def save(self, path) -> None:
        _write_json(path, self.to_dict())

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        data = _read_json(path, MANIFEST_FORMAT)
        cats = tuple(Category(int(c["id"]), c["name"], tuple(c["files"])) for c in data["categories"])
        return cls(data["root"], cats, data.get("cap"), data.get("seed", 0))


def _write_json(path, payload) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _read_json(path, expected_format):
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if data.get("format") != expected_format:
        raise DataError(f"{path} is not a {expected_format} file")
    if data.get("version") != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported version {data.get('version')}")
    return data


# --------------------------------------------------------------------------
# operations


def cap_category_samples(files: Sequence, cap: int, seed: int) -> list:
    """Keep at most ``cap`` files, drawn uniformly without replacement.

    The kept files retain their original relative order, so capping an
    already-capped list is the identity.
    """
    if cap < 1:
        raise ConfigError(f"cap must be >= 1, got {cap}")
    files = list(files)
    if not files:
        raise DataError("cannot cap an empty file list")
    if len(files) <= cap:
        return files
    keep = np.random.default_rng(seed).choice(len(files), size=cap, replace=False)
    return [files[i] for i in sorted(keep)]


def build_manifest(
    root, cap: int | None = None, seed: int = 0, verify: bool = True
) -> DatasetManifest:
    """Scan ``root/<category>/`` directories into a manifest.

    Category ids follow the sorted directory names.  With ``verify`` every
    file is opened once so that undecodable files fail here, not mid-training.
    """
    root = Path(root).resolve()
    if not root.is_dir():
        raise DataError(f"dataset root {root} is not a readable directory")
    cats = []
    for cid, d in enumerate(sorted(p for p in root.iterdir() if p.is_dir())):
        files = sorted(
            f.relative_to(root).as_posix()
            for f in d.iterdir()
            if f.suffix.lower() in IMAGE_SUFFIXES
        )
        if not files:
            raise DataError(f"category directory {d} holds no images")
        if cap is not None:
            files = cap_category_samples(files, cap, seed + cid)
        if verify:
            for f in files:
                try:
                    with Image.open(root / f) as img:
                        img.verify()
                except (OSError, ValueError) as exc:
                    raise DataError(f"cannot decode image {root / f}: {exc}") from exc
        cats.append(Category(cid, d.name, tuple(files)))
    if not cats:
        raise DataError(f"no category directories under {root}")
    return DatasetManifest(str(root), tuple(cats), cap, seed)


def split_categories(
    manifest: DatasetManifest | Sequence[int], counts: Sequence[int], seed: int
) -> CategorySplit:
    """Seeded random seen / validation-seen / unseen split with exact sizes."""
    ids = manifest.category_ids if isinstance(manifest, DatasetManifest) else list(manifest)
    counts = tuple(int(c) for c in counts)
    if len(counts) != 3 or min(counts) < 0:
        raise ConfigError(f"split needs three non-negative counts, got {counts}")
    if sum(counts) != len(ids):
        raise ConfigError(
            f"split counts sum to {sum(counts)} but the manifest has {len(ids)} categories"
        )
    order = np.random.default_rng(seed).permutation(sorted(ids))
    a, b = counts[0], counts[0] + counts[1]
    return CategorySplit(order[:a].tolist(), order[a:b].tolist(), order[b:].tolist())


class ImageStore:
    """Decoded images of a manifest, held in memory per category."""

    def __init__(
        self,
        manifest: DatasetManifest,
        channels: int = 1,
        resolution: int | None = None,
        categories: Iterable[int] | None = None,
    ):
        self.manifest = manifest
        self.channels = channels
        self.resolution = resolution
        wanted = manifest.category_ids if categories is None else sorted(set(categories))
        self._arrays: dict[int, np.ndarray] = {}
        self._paths: dict[int, list[str]] = {}
        for cid in wanted:
            paths = manifest.paths(cid)
            self._arrays[cid] = np.stack([load_image(p, channels, resolution) for p in paths])
            self._paths[cid] = [str(p) for p in paths]
        shapes = {a.shape[1:] for a in self._arrays.values()}
        if len(shapes) > 1:
            raise DataError(f"images of differing shapes in one store: {sorted(shapes)}")

    @classmethod
    def from_arrays(cls, arrays: Mapping[int, np.ndarray]) -> "ImageStore":
        """In-memory store, mainly for tests and generated banks."""
        self = cls.__new__(cls)
        self.manifest = None
        self._arrays = {int(k): np.asarray(v, dtype=np.float32) for k, v in arrays.items()}
        self._paths = {k: [f"mem://{k}/{i}" for i in range(len(v))] for k, v in self._arrays.items()}
        first = next(iter(self._arrays.values()))
        self.channels, self.resolution = first.shape[1], first.shape[2]
        return self

    @property
    def categories(self) -> list[int]:
        return sorted(self._arrays)

    @property
    def image_shape(self) -> tuple:
        return next(iter(self._arrays.values())).shape[1:]

    def images(self, category_id: int) -> np.ndarray:
        try:
            return self._arrays[category_id]
        except KeyError:
            raise DataError(f"category {category_id} is not loaded") from None

    def paths(self, category_id: int) -> list[str]:
        return self._paths[category_id]

    def count(self, category_id: int) -> int:
        return len(self.images(category_id))

    def sample(self, category_id: int, index: int) -> ImageSample:
        return ImageSample(self.images(category_id)[index], category_id, self.paths(category_id)[index])

    def subset(self, categories: Iterable[int]) -> "ImageStore":
        return ImageStore.from_arrays({c: self.images(c) for c in categories})


def _check_episode_sizes(store: ImageStore, categories: Sequence[int], k: int) -> None:
    if k < 1:
        raise ConfigError(f"K must be >= 1, got {k}")
    for c in categories:
        if store.count(c) < k:
            raise DataError(f"category {c} has {store.count(c)} images, fewer than K={k}")


def sample_episode(
    store: ImageStore, categories: Iterable[int], k: int, rng: np.random.Generator
) -> Episode:
    """One K-shot episode: a uniform category, then K distinct images of it."""
    cats = sorted(categories)
    if not cats:
        raise DataError("no categories to sample from")
    _check_episode_sizes(store, cats, k)
    cid = cats[rng.integers(len(cats))]
    idx = rng.choice(store.count(cid), size=k, replace=False)
    return Episode(tuple(store.sample(cid, int(i)) for i in idx), cid)


def sample_episode_batch(
    store: ImageStore,
    categories: Sequence[int],
    k: int,
    batch: int,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised sampler for training.

    Returns conditionals ``(batch, k, C, H, W)`` and category ids ``(batch,)``.
    Sampling is without replacement inside an episode and with replacement
    across episodes.
    """
    cats = sorted(categories)
    _check_episode_sizes(store, cats, k)
    chosen = np.asarray(cats)[rng.integers(len(cats), size=batch)]
    out = np.empty((batch, k, *store.image_shape), dtype=np.float32)
    for b, cid in enumerate(chosen):
        idx = rng.choice(store.count(int(cid)), size=k, replace=False)
        out[b] = store.images(int(cid))[idx]
    return out, chosen.astype(np.int64)
