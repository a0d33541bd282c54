import numpy as np
import pytest
import torch

from matchinggan.config import TrainConfig
from matchinggan.data import ImageStore, normalize_image
from matchinggan.synthetic import make_glyph_arrays

torch.set_num_threads(1)

# smallest architecture the stride plan admits: 8-channel blocks, 16x16 images
TINY = dict(
    resolution=16,
    d_z=8,
    gen_channels=(8, 8, 8, 8),
    layers_per_block=2,
    disc_channels=(8, 8),
    batch_episodes=4,
    validation_episodes=4,
    steps_per_epoch=2,
    checkpoint_every=0,
)


def tiny_config(**overrides) -> TrainConfig:
    return TrainConfig(**{**TINY, **overrides}).validate()


def glyph_store(n_categories=6, per_category=8, size=16, seed=0) -> ImageStore:
    arrays = make_glyph_arrays(n_categories, per_category, size, seed)
    return ImageStore.from_arrays({c: normalize_image(a[:, None]) for c, a in arrays.items()})


@pytest.fixture(scope="session")
def tiny_store():
    return glyph_store()


# --------------------------------------------------------------------------
# acceptance summary: one pass/fail line per criterion at the end of the run

ACCEPTANCE_KEY = pytest.StashKey[dict]()
ACCEPTANCE_CRITERIA = range(1, 9)


def pytest_configure(config):
    config.stash[ACCEPTANCE_KEY] = {}


@pytest.fixture
def acceptance(request):
    """``acceptance(n, ok, detail)`` records criterion ``n`` and returns ``ok``."""
    results = request.config.stash[ACCEPTANCE_KEY]

    def record(n: int, ok: bool, detail: str) -> bool:
        results[n] = (bool(ok), detail)
        return bool(ok)

    return record


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(ACCEPTANCE_KEY, {})
    if not results:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in ACCEPTANCE_CRITERIA:
        if n in results:
            ok, detail = results[n]
            terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
        else:
            terminalreporter.write_line(f"criterion {n}: FAIL  (not run, or errored before recording)")
