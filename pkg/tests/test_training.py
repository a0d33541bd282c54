import copy
import json

import numpy as np
import pytest
import torch

from conftest import tiny_config
from matchinggan.data import CategorySplit, sample_episode_batch
from matchinggan.errors import CheckpointError, TrainingError
from matchinggan.training import (
    LOSS_TERMS,
    LossBundle,
    build_state,
    discriminator_step,
    fit,
    generator_losses,
    generator_step,
    load_checkpoint,
    parameter_digest,
    save_checkpoint,
)

SEEN = [0, 1, 2, 3]
SPLIT = CategorySplit(SEEN, [4], [5])


def _batch(store, state, seed=0):
    cond, cats = sample_episode_batch(store, SEEN, state.config.k, state.config.batch_episodes,
                                      np.random.default_rng(seed))
    z = torch.randn(len(cond), state.config.d_z, generator=torch.Generator().manual_seed(seed))
    return torch.from_numpy(cond), state.labels_for(cats), z


def _zero_lr(opt):
    for g in opt.param_groups:
        g["lr"] = 0.0


def test_zero_learning_rate_is_a_no_op(tiny_store):
    state = build_state(tiny_config(), SEEN)
    _zero_lr(state.opt_d)
    _zero_lr(state.opt_g)
    before = parameter_digest(state.discriminator), parameter_digest(state.generator)
    d = discriminator_step(state, *_batch(tiny_store, state))
    g = generator_step(state, *_batch(tiny_store, state, 1))
    assert (parameter_digest(state.discriminator), parameter_digest(state.generator)) == before
    assert set(d) == {"l_d", "l_c_d", "total_d"}
    assert set(g) == {"l_gd", "l_1", "l_c_g", "l_m", "total_g"}
    assert all(np.isfinite(v) for v in {**d, **g}.values())


def test_steps_leave_the_other_player_untouched(tiny_store):
    state = build_state(tiny_config(), SEEN)
    g_before = parameter_digest(state.generator)
    d_before = parameter_digest(state.discriminator)
    discriminator_step(state, *_batch(tiny_store, state))
    assert parameter_digest(state.generator) == g_before
    assert parameter_digest(state.discriminator) != d_before
    d_after = parameter_digest(state.discriminator)
    generator_step(state, *_batch(tiny_store, state, 1))
    assert parameter_digest(state.discriminator) == d_after
    assert parameter_digest(state.generator) != g_before


def test_discriminator_overfits_fixed_batch(tiny_store):
    state = build_state(tiny_config(learning_rate=1e-3), SEEN)
    batch = _batch(tiny_store, state)
    losses = []
    for _ in range(50):
        torch.manual_seed(0)  # same dropout masks in the frozen generator
        losses.append(discriminator_step(state, *batch)["total_d"])
    assert losses[-1] < 0.5 * losses[0]


def test_loss_term_isolation(tiny_store):
    state = build_state(tiny_config(lambda_r=0.0, lambda_m=0.0), SEEN)
    D = state.discriminator
    torch.nn.init.zeros_(D.class_head.weight)
    torch.nn.init.zeros_(D.class_head.bias)
    batch = _batch(tiny_store, state)

    def grads(term):
        state.generator.zero_grad(set_to_none=True)
        torch.manual_seed(0)
        generator_losses(state, *batch)[term].backward()
        return [p.grad.clone() if p.grad is not None else torch.zeros_like(p)
                for p in state.generator.parameters()]

    for a, b in zip(grads("total_g"), grads("l_gd")):
        assert (a - b).abs().max() <= 1e-6


def test_loss_bundle_totals(tiny_store):
    cfg = tiny_config(lambda_r=0.3, lambda_m=2.0)
    state = build_state(cfg, SEEN)
    b = LossBundle().merge(discriminator_step(state, *_batch(tiny_store, state)))
    b.merge(generator_step(state, *_batch(tiny_store, state, 1)))
    g, d = b.recomputed_totals(cfg.lambda_r, cfg.lambda_m)
    assert abs(g - b.total_g) <= 1e-5 * max(1.0, abs(g))
    assert abs(d - b.total_d) <= 1e-6 * max(1.0, abs(d))


def test_non_finite_loss_names_the_term(tiny_store):
    state = build_state(tiny_config(), SEEN)
    cond, labels, z = _batch(tiny_store, state)
    with torch.no_grad():
        state.discriminator.adv_head.bias.fill_(float("inf"))
    with pytest.raises(TrainingError) as info:
        discriminator_step(state, cond, labels, z)
    assert info.value.term == "l_d"


def test_random_mode_freezes_matching_parameters(tiny_store):
    state = build_state(tiny_config(coefficient_mode="random", shared_encoder=False), SEEN)
    trained = {id(p) for g in state.opt_g.param_groups for p in g["params"]}
    names = [n for n, p in state.generator.named_parameters() if id(p) not in trained]
    assert names and all(n.startswith(("noise_embed.", "match_encoder.")) for n in names)
    generator_step(state, *_batch(tiny_store, state))


def test_checkpoint_round_trip(tiny_store, tmp_path):
    state = build_state(tiny_config(), SEEN)
    discriminator_step(state, *_batch(tiny_store, state))
    generator_step(state, *_batch(tiny_store, state, 1))
    state.generator.eval()
    x = torch.from_numpy(tiny_store.images(5)[:3])
    z = torch.randn(state.config.d_z)
    before, _ = state.generator.generate(z, x)
    save_checkpoint(state, tmp_path / "a.pt")
    save_checkpoint(state, tmp_path / "b.pt")
    assert (tmp_path / "a.pt").read_bytes() == (tmp_path / "b.pt").read_bytes()
    loaded = load_checkpoint(tmp_path / "a.pt")
    loaded.generator.eval()
    after, _ = loaded.generator.generate(z, x)
    assert torch.equal(before, after)
    assert parameter_digest(loaded.discriminator) == parameter_digest(state.discriminator)


def test_checkpoint_errors(tiny_store, tmp_path):
    state = build_state(tiny_config(), SEEN)
    path = save_checkpoint(state, tmp_path / "a.pt")
    other = build_state(tiny_config(gen_channels=(8, 8, 8, 16)), SEEN)
    with pytest.raises(CheckpointError, match="generator: array noise_embed.weight has shape"):
        load_checkpoint(path, into=other)
    with pytest.raises(CheckpointError, match="does not exist"):
        load_checkpoint(tmp_path / "missing.pt")
    (tmp_path / "bad.pt").write_bytes(b"garbage")
    with pytest.raises(CheckpointError, match="corrupt"):
        load_checkpoint(tmp_path / "bad.pt")
    payload = torch.load(path, weights_only=False)
    payload["version"] = 99
    torch.save(payload, tmp_path / "v.pt")
    with pytest.raises(CheckpointError, match="version 99"):
        load_checkpoint(tmp_path / "v.pt")


def test_fit_smoke_and_determinism(tiny_store, tmp_path):
    cfg = tiny_config(epochs=2, checkpoint_every=1)
    a = fit(cfg, tiny_store, SPLIT, out_dir=tmp_path / "a")
    b = fit(cfg, tiny_store, SPLIT, out_dir=tmp_path / "b")
    assert a.history == b.history
    assert (tmp_path / "a/metrics.jsonl").read_bytes() == (tmp_path / "b/metrics.jsonl").read_bytes()
    assert parameter_digest(a.state.generator) == parameter_digest(b.state.generator)
    recs = [json.loads(line) for line in (tmp_path / "a/metrics.jsonl").read_text().splitlines()]
    assert {r["term"] for r in recs} == set(LOSS_TERMS) | {"val_l1"}
    assert all(np.isfinite(r["value"]) for r in recs)
    assert (tmp_path / "a/checkpoints/epoch_0001.pt").exists()
    assert load_checkpoint(a.checkpoint).epoch == 2


def test_fit_on_two_categories(tmp_path):
    from conftest import glyph_store

    store = glyph_store(n_categories=2, per_category=6)
    res = fit(tiny_config(epochs=1), store, CategorySplit([0, 1], [], []), out_dir=tmp_path)
    assert load_checkpoint(res.checkpoint).epoch == 1
    assert "val_l1" not in res.history[0]


def test_resume_matches_uninterrupted_run(tiny_store, tmp_path):
    cfg = tiny_config(epochs=3)
    full = fit(cfg, tiny_store, SPLIT, out_dir=tmp_path / "full")
    part = fit(cfg.replace(epochs=1), tiny_store, SPLIT, out_dir=tmp_path / "part")
    resumed = fit(cfg, tiny_store, SPLIT, out_dir=tmp_path / "resumed", resume=part.checkpoint)
    assert [h["epoch"] for h in resumed.history] == [2, 3]
    assert resumed.history == full.history[1:]
    assert parameter_digest(resumed.state.generator) == parameter_digest(full.state.generator)


def test_validation_leaves_parameters_alone(tiny_store):
    from matchinggan.training import validation_l1

    state = build_state(tiny_config(), SEEN)
    cond, _, z = _batch(tiny_store, state)
    snapshot = copy.deepcopy(state.generator.state_dict())
    validation_l1(state, cond, z)
    assert all(torch.equal(v, state.generator.state_dict()[k]) for k, v in snapshot.items())
    assert state.generator.training
