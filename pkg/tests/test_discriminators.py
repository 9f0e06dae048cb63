"""Discriminator losses, gradients, rewards, and separation behavior."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from skillchain.discriminators import (
    GailDiscriminator,
    InitSetDiscriminator,
    combined_reward,
    gail_loss,
    gail_loss_from_scores,
    gail_reward_from_scores,
    initset_loss,
    initset_loss_from_scores,
    tsr_reward,
    update_gail,
    update_initset,
)

DIM = 6


def blobs(rng, n=64, sep=4.0):
    a = rng.standard_normal((n, DIM)) + sep / 2
    b = rng.standard_normal((n, DIM)) - sep / 2
    return a, b


def test_gail_loss_from_scores_values():
    # hand-computed: expert scores (1, 0) -> mean (0, 1) = 0.5;
    # agent scores (-1, 1) -> mean (0, 4) = 2.0
    loss = gail_loss_from_scores(np.array([1.0, 0.0]), np.array([-1.0, 1.0]))
    assert loss == pytest.approx(2.5)


def test_initset_loss_from_scores_values():
    loss = initset_loss_from_scores(np.array([1.0, 0.5]), np.array([0.0, 0.5]))
    assert loss == pytest.approx(0.25 / 2 + 0.25 / 2)


@pytest.mark.parametrize("which", ["gail", "initset"])
def test_loss_gradients_finite_differences(which):
    rng = np.random.default_rng(0)
    if which == "gail":
        disc = GailDiscriminator.create(DIM, 0, rng)
        fn = gail_loss
    else:
        disc = InitSetDiscriminator.create(DIM, 1, rng)
        fn = initset_loss
    xa, xb = blobs(rng, n=8, sep=1.0)
    _, grads = fn(disc, xa, xb)
    theta = disc.mlp.flat()
    h = 1e-5
    for i in rng.choice(theta.size, size=60, replace=False):
        ep = np.zeros_like(theta)
        ep[i] = h
        disc.mlp.set_flat(theta + ep)
        up, _ = fn(disc, xa, xb)
        disc.mlp.set_flat(theta - ep)
        dn, _ = fn(disc, xa, xb)
        disc.mlp.set_flat(theta)
        fd = (up - dn) / (2 * h)
        assert grads[i] == pytest.approx(fd, rel=1e-4, abs=1e-8)


def test_gail_training_separates_blobs():
    # 500 update steps on well-separated blobs drive the scores toward the
    # +1 / -1 targets and the imitation reward apart.
    rng = np.random.default_rng(1)
    disc = GailDiscriminator.create(DIM, 0, rng, lr=1e-3)
    expert, agent = blobs(rng, n=128)
    for _ in range(500):
        update_gail(disc, expert, agent)
    r_expert = gail_reward_from_scores(disc.score(expert)).mean()
    r_agent = gail_reward_from_scores(disc.score(agent)).mean()
    assert r_expert >= 0.8
    assert r_agent <= 0.2


def test_initset_training_separates_blobs():
    rng = np.random.default_rng(2)
    disc = InitSetDiscriminator.create(DIM, 1, rng, lr=1e-3)
    inits, terms = blobs(rng, n=128)
    for _ in range(500):
        update_initset(disc, inits, terms)
    assert disc.score(inits).mean() >= 0.8
    assert disc.score(terms).mean() <= 0.2


def test_update_reduces_loss():
    rng = np.random.default_rng(3)
    disc = GailDiscriminator.create(DIM, 0, rng, lr=1e-3)
    expert, agent = blobs(rng, n=64, sep=2.0)
    first = update_gail(disc, expert, agent)
    for _ in range(50):
        last = update_gail(disc, expert, agent)
    assert last < first


def test_gail_reward_bounds_and_shape():
    scores = np.array([-3.0, -1.0, 0.0, 1.0, 3.0])
    r = gail_reward_from_scores(scores)
    assert np.all((r >= 0.0) & (r <= 1.0))
    assert r[3] == 1.0          # f = 1 is maximally expert-like
    assert r[1] == 0.0          # f = -1 saturates at zero
    assert r[0] == 0.0          # clipped below


@given(st.floats(-10, 10))
@settings(max_examples=50, deadline=None)
def test_gail_reward_bounded_property(score):
    r = float(gail_reward_from_scores(np.array([score]))[0])
    assert 0.0 <= r <= 1.0


def test_initset_score_clipped():
    rng = np.random.default_rng(4)
    disc = InitSetDiscriminator.create(DIM, 1, rng)
    # force large raw outputs through the final bias
    flat = disc.mlp.flat()
    flat[-1] = 50.0
    disc.mlp.set_flat(flat)
    s = disc.score(rng.standard_normal((5, DIM)))
    assert np.all(s == 1.0)
    flat[-1] = -50.0
    disc.mlp.set_flat(flat)
    s = disc.score(rng.standard_normal((5, DIM)))
    assert np.all(s == 0.0)


def test_tsr_reward_gating():
    rng = np.random.default_rng(5)
    disc = InitSetDiscriminator.create(DIM, 1, rng)
    x = rng.standard_normal(DIM)
    # zero on non-terminal steps and for the last subtask (no successor)
    assert tsr_reward(disc, x, False) == 0.0
    assert tsr_reward(None, x, True) == 0.0
    # otherwise exactly the clipped initiation score
    expected = float(disc.score(x.reshape(1, -1))[0])
    assert tsr_reward(disc, x, True) == expected
    assert 0.0 <= tsr_reward(disc, x, True) <= 1.0


def test_combined_reward_weighting():
    assert combined_reward(2.0, 0.5, 0.1, 0.5, 0.5, 10000.0) == pytest.approx(
        0.5 * 2.0 + 0.5 * 0.5 + 10000.0 * 0.1)
    # lam3 = 0 reduces to the pretraining objective regardless of r_tsr
    assert combined_reward(1.0, 1.0, 0.73, 0.5, 0.5, 0.0) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        combined_reward(1.0, 1.0, 0.0, -0.1, 0.5, 0.0)


def test_empty_batches_rejected():
    rng = np.random.default_rng(6)
    disc = GailDiscriminator.create(DIM, 0, rng)
    with pytest.raises(ValueError):
        gail_loss(disc, np.zeros((0, DIM)), np.zeros((3, DIM)))
    idisc = InitSetDiscriminator.create(DIM, 1, rng)
    with pytest.raises(ValueError):
        initset_loss(idisc, np.zeros((3, DIM)), np.zeros((0, DIM)))
