import json

import numpy as np
import pytest
import torch

from conftest import glyph_store
from matchinggan.errors import DataError, ProtocolError
from matchinggan.evaluation import (
    EvalBackbone,
    MetricReport,
    fewshot_protocol,
    fid_is_protocol,
    fit_linear_head,
    generate_bank,
    lowdata_protocol,
)
from matchinggan.generator import GeneratorConfig, MatchingGenerator
from matchinggan.metrics import fid_from_features


@pytest.fixture(scope="module")
def store():
    return glyph_store(n_categories=8, per_category=20, size=16, seed=1)


@pytest.fixture(scope="module")
def backbone(store):
    return EvalBackbone.pretrain(store, [0, 1, 2, 3, 4], epochs=4, seed=0)


@pytest.fixture(scope="module")
def generator():
    torch.manual_seed(0)
    return MatchingGenerator(GeneratorConfig(resolution=16, d_z=8, channels=(8, 8, 8, 8), layers_per_block=2))


def test_bank_size_and_determinism(generator, store):
    a = generate_bank(generator, store, 12, 3, seed=5, categories=[5, 6, 7])
    b = generate_bank(generator, store, 12, 3, seed=5, categories=[5, 6, 7])
    assert len(a) == 36
    assert all(np.array_equal(a.images[c], b.images[c]) for c in (5, 6, 7))
    x, y = a.stacked()
    assert x.shape == (36, 1, 16, 16) and list(np.unique(y)) == [5, 6, 7]
    c = generate_bank(generator, store, 12, 3, seed=6, categories=[5, 6, 7])
    assert not np.array_equal(a.images[5], c.images[5])


def test_bank_needs_enough_conditionals(generator, store):
    with pytest.raises(DataError):
        generate_bank(generator, {0: store.images(0)[:2]}, 4, 3, seed=0)


def test_bank_respects_training_mode(generator, store):
    generator.train()
    generate_bank(generator, store, 2, 3, seed=0, categories=[5])
    assert generator.training
    generator.eval()


def test_linear_head_separable():
    r = np.random.default_rng(0)
    x = np.concatenate([r.normal(-3, 1, (50, 4)), r.normal(3, 1, (50, 4))])
    y = np.repeat([0, 1], 50)
    head = fit_linear_head(x, y, 2)
    assert (head.predict(x) == y).mean() >= 0.98
    p = head.posteriors(x)
    assert np.allclose(p.sum(1), 1)


def _head_gradient(head, x, y, sw, weight_decay=1e-3):
    w = torch.tensor(head.weight, requires_grad=True)
    b = torch.tensor(head.bias, requires_grad=True)
    z = torch.from_numpy((x - head.mean) / head.scale) @ w.T + b
    ce = torch.nn.functional.cross_entropy(z, torch.as_tensor(y), reduction="none")
    loss = (ce * torch.as_tensor(sw)).sum() / sum(sw) + weight_decay * (w * w).sum()
    loss.backward()
    return max(w.grad.abs().max().item(), b.grad.abs().max().item())


def test_linear_head_sample_weights():
    r = np.random.default_rng(1)
    x = r.standard_normal((30, 3))
    y = r.integers(0, 3, 30)
    plain = fit_linear_head(x, y, 3)
    ones = fit_linear_head(x, y, 3, sample_weight=np.ones(30))
    assert np.abs(plain.logits(x) - ones.logits(x)).max() <= 1e-6
    w = np.ones(30)
    w[:5] = 10.0
    weighted = fit_linear_head(x, y, 3, sample_weight=w)
    # the weighted fit is a stationary point of the weighted objective only
    assert _head_gradient(weighted, x, y, w) <= 1e-5
    assert _head_gradient(weighted, x, y, np.ones(30)) > 1e-3


def test_lowdata_weighting_modes(generator, backbone, store):
    args = (generator, backbone, store.subset([5, 6, 7]), 5, True, 3)
    kw = dict(n_generated=64)
    bal = lowdata_protocol(*args, **kw)
    uni = lowdata_protocol(*args, **kw, balanced=False)
    assert 0.0 <= bal <= 1.0 and 0.0 <= uni <= 1.0
    assert bal == lowdata_protocol(*args, **kw, balanced=True)


def test_backbone_state_round_trip(backbone, store):
    clone = EvalBackbone.from_state_dict(backbone.state_dict())
    x = store.images(6)[:5]
    assert np.array_equal(clone.features(x), backbone.features(x))


def test_fid_within_category_below_between(backbone, store):
    r = np.random.default_rng(0)
    for _ in range(5):
        a, b = r.choice([5, 6, 7], size=2, replace=False)
        perm = r.permutation(20)
        fa = backbone.features(store.images(a))
        within = fid_from_features(fa[perm[:10]], fa[perm[10:]])
        between = fid_from_features(fa[perm[:10]], backbone.features(store.images(b))[perm[10:]])
        assert within < between


def test_lowdata_single_category_is_perfect(generator, backbone, store):
    assert lowdata_protocol(generator, backbone, store, 5, True, 0, n_generated=4, categories=[6]) == 1.0


def test_lowdata_accuracy_range_and_determinism(generator, backbone, store):
    args = (generator, backbone, store.subset([5, 6, 7]), 5)
    std = lowdata_protocol(*args, False, 3)
    aug = lowdata_protocol(*args, True, 3, n_generated=16)
    assert 0.0 <= std <= 1.0 and 0.0 <= aug <= 1.0
    assert std == lowdata_protocol(*args, False, 3)
    assert aug == lowdata_protocol(*args, True, 3, n_generated=16)


def test_lowdata_errors(generator, backbone, store):
    with pytest.raises(ProtocolError, match="empty test set"):
        lowdata_protocol(generator, backbone, store.subset([5, 6]), 20, False, 0)
    with pytest.raises(ProtocolError, match="fewer than"):
        lowdata_protocol(generator, backbone, store.subset([5, 6]), 21, False, 0)
    with pytest.raises(ProtocolError, match="needs a generator"):
        lowdata_protocol(None, backbone, store.subset([5, 6]), 5, True, 0)


def test_fewshot(generator, backbone, store):
    unseen = store.subset([5, 6, 7])
    one = fewshot_protocol(generator, backbone, unseen, 1, 3, 0, episodes=3, n_generated=4)
    assert one.mean_accuracy == 1.0 and one.episode_accuracies == [1.0] * 3
    res = fewshot_protocol(generator, backbone, unseen, 2, 3, 0, episodes=3, n_generated=4)
    assert len(res.episode_accuracies) == 3
    assert res.mean_accuracy == pytest.approx(np.mean(res.episode_accuracies))
    with pytest.raises(ProtocolError):
        fewshot_protocol(generator, backbone, unseen, 4, 3, 0)


def test_fid_is_protocol(generator, backbone, store):
    res = fid_is_protocol(generator, backbone, store.subset([5, 6, 7]), seed=0, count=16)
    assert res.fid >= 0
    assert 1.0 <= res.inception_score <= 3.0
    assert len(res.bank) == 48


def test_metric_report_json():
    rep = MetricReport("run", "fid", 1.5, {"seed": 0})
    assert json.loads(rep.to_json()) == {"run_id": "run", "metric": "fid", "value": 1.5, "protocol": {"seed": 0}}
