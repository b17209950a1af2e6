"""Tests for the score matching objectives and training loop."""

import numpy as np
import pytest
from pydantic import ValidationError

from nckstein.distributions import GaussianMixture, perturb, sample, score
from nckstein.errors import DimensionError, TrainingError
from nckstein.networks import Activation, FeedforwardNet, Layer, NoiseConditioning
from nckstein.samplers import NoiseSchedule
from nckstein.score_learning import (
    Objective,
    TrainConfig,
    array_source,
    build_networks,
    dsm_loss,
    ncae_loss,
    ncsn_level_losses,
    ncsn_loss,
    score_matching_loss,
    train,
)

CONDITIONED = NoiseConditioning(method="concat_log_sigma")


def conditioned_net(d=2, hidden=(6,), seed=0):
    return FeedforwardNet.create([d + 1, *hidden, d], seed, conditioning=CONDITIONED)


def zero_net(d):
    return FeedforwardNet(
        [Layer(np.zeros((d, d + 1)), np.zeros(d), Activation.IDENTITY)], CONDITIONED
    )


def params_fd(net, loss_of_net, step=1e-6):
    flat = net.get_flat()
    shifted = net.copy()
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        shift = np.zeros_like(flat)
        shift[i] = step
        shifted.set_flat(flat + shift)
        plus = loss_of_net(shifted)
        shifted.set_flat(flat - shift)
        minus = loss_of_net(shifted)
        grad[i] = (plus - minus) / (2 * step)
    return grad


def batch(n=16, d=2, seed=0):
    return np.random.default_rng(seed).normal(size=(n, d))


SEEDS = range(10)


@pytest.mark.parametrize("seed", SEEDS)
def test_dsm_gradient(seed, rel_error):
    net = conditioned_net(seed=seed)
    x = batch(seed=seed)
    loss, grads = dsm_loss(net, x, 0.7, np.random.default_rng(seed))
    numeric = params_fd(net, lambda n: dsm_loss(n, x, 0.7, np.random.default_rng(seed))[0])
    assert rel_error(net.flatten(grads), numeric) < 1e-4
    assert loss > 0


@pytest.mark.parametrize("seed", SEEDS)
def test_ncsn_gradient(seed, rel_error):
    net = conditioned_net(hidden=(5, 4), seed=seed)
    schedule = NoiseSchedule.geometric(5.0, 0.5, 4)
    x = batch(seed=seed + 1)

    def loss(n):
        return ncsn_loss(n, x, schedule, np.random.default_rng(seed))

    _, grads = loss(net)
    numeric = params_fd(net, lambda n: loss(n)[0])
    assert rel_error(net.flatten(grads), numeric) < 1e-4


@pytest.mark.parametrize("seed", SEEDS)
def test_ncae_gradients(seed, rel_error):
    enc = FeedforwardNet.create([4, 5, 2], seed, conditioning=CONDITIONED)
    dec = FeedforwardNet.create([3, 5, 3], seed + 100, conditioning=CONDITIONED)
    schedule = NoiseSchedule.geometric(2.0, 0.5, 3)
    x = batch(d=3, seed=seed + 2)

    def loss(e, d):
        return ncae_loss(e, d, x, schedule, np.random.default_rng(seed + 4))

    _, enc_grads, dec_grads = loss(enc, dec)
    assert rel_error(enc.flatten(enc_grads), params_fd(enc, lambda e: loss(e, dec)[0])) < 1e-4
    assert rel_error(dec.flatten(dec_grads), params_fd(dec, lambda d: loss(enc, d)[0])) < 1e-4


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("kind", [Activation.SOFTPLUS, Activation.TANH])
def test_score_matching_gradient(kind, seed, rel_error):
    net = FeedforwardNet.create([3, 6, 3], seed, hidden_activation=kind)
    x = batch(d=3, seed=seed + 3)
    _, grads = score_matching_loss(net, x)
    numeric = params_fd(net, lambda n: score_matching_loss(n, x)[0])
    assert rel_error(net.flatten(grads), numeric) < 1e-4


def test_score_matching_trace_term():
    """For a linear score ``s(x) = A x`` the objective is ``tr A + mean |A x|^2 / 2``."""
    a = np.array([[-1.0, 0.3], [0.2, -2.0]])
    net = FeedforwardNet([Layer(a, np.zeros(2), Activation.IDENTITY)])
    x = batch(seed=4)
    loss, _ = score_matching_loss(net, x)
    expected = np.trace(a) + 0.5 * np.mean(np.sum((x @ a.T) ** 2, axis=1))
    assert loss == pytest.approx(expected, rel=1e-12)


def test_score_matching_at_true_standard_normal_score():
    """``s(x) = -x`` on standard normal data gives about ``-d / 2``."""
    d = 3
    net = FeedforwardNet([Layer(-np.eye(d), np.zeros(d), Activation.IDENTITY)])
    x = np.random.default_rng(5).standard_normal((200_000, d))
    loss, _ = score_matching_loss(net, x)
    assert loss == pytest.approx(-d + 0.5 * np.mean(np.sum(x**2, axis=1)), rel=1e-9)
    assert loss == pytest.approx(-d / 2, abs=0.02)


def test_score_matching_needs_square_net():
    with pytest.raises(DimensionError):
        score_matching_loss(conditioned_net(), batch())


def test_zero_network_losses():
    """With a zero score the sigma^2-weighted DSM loss is ``d / 2`` at every level."""
    schedule = NoiseSchedule.geometric(20.0, 1.0, 10)
    x = sample(GaussianMixture.from_components([(1.0, (0.0, 0.0), 1.0)]), 100_000, seed=0)
    losses = ncsn_level_losses(zero_net(2), x, schedule, np.random.default_rng(1))
    np.testing.assert_allclose(losses, 1.0, rtol=0.05)
    loss, _ = dsm_loss(zero_net(2), x[:1000], 3.0, np.random.default_rng(2))
    assert loss == pytest.approx(1.0 / 9.0, rel=0.1)


def test_ncae_identity_maps_in_zero_noise_limit():
    """Identity encoder and decoder leave only the injected noise, weighted by 1 / sigma^2."""
    enc = FeedforwardNet(
        [Layer(np.hstack([np.eye(2), np.zeros((2, 1))]), np.zeros(2), Activation.IDENTITY)],
        CONDITIONED,
    )
    dec = FeedforwardNet(
        [Layer(np.hstack([np.eye(2), np.zeros((2, 1))]), np.zeros(2), Activation.IDENTITY)],
        CONDITIONED,
    )
    x = batch(n=64, seed=5)
    schedule = NoiseSchedule((1e-8,))
    loss, _, _ = ncae_loss(enc, dec, x, schedule, np.random.default_rng(6))
    z = np.random.default_rng(6).standard_normal(x.shape)
    assert loss == pytest.approx(0.5 * np.mean(np.sum(z**2, axis=1)), rel=1e-6)


def test_build_networks_shapes():
    cfg = TrainConfig(hidden=[8, 8])
    assert build_networks(Objective.SM, 3, cfg)["score"].sizes == [3, 8, 8, 3]
    assert build_networks(Objective.NCSN, 3, cfg)["score"].sizes == [4, 8, 8, 3]
    nets = build_networks(Objective.NCAE, 8, cfg)
    assert nets["encoder"].sizes == [9, 8, 8, 2]
    assert nets["decoder"].sizes == [3, 8, 8, 8]
    with pytest.raises(DimensionError):
        build_networks(Objective.NCAE, 2, TrainConfig(bottleneck=3))


def test_learning_rate_steps_down():
    cfg = TrainConfig(steps=100, learning_rate=1e-3)
    assert cfg.learning_rate_at(0) == 1e-3
    assert cfg.learning_rate_at(49) == 1e-3
    assert cfg.learning_rate_at(50) == pytest.approx(3e-4)
    assert cfg.learning_rate_at(99) == pytest.approx(1e-4)
    assert TrainConfig(lr_decay=[]).learning_rate_at(10**6) == 1e-3
    with pytest.raises(ValidationError):
        TrainConfig(lr_decay=[(0.75, 0.1), (0.5, 0.3)])


def test_array_source_uses_full_set_for_large_batches():
    data = batch(n=5)
    draw = array_source(data)
    np.testing.assert_array_equal(draw(np.random.default_rng(0), 10), data)
    assert draw(np.random.default_rng(0), 3).shape == (3, 2)


def test_training_is_deterministic_and_checkpoints(tmp_path):
    cfg = TrainConfig(steps=30, batch_size=32, hidden=[8], sigma_max=2.0, sigma_min=0.5,
                      levels=3, checkpoint_every=10)
    data = array_source(batch(n=200, seed=8))
    first = train(Objective.NCSN, data, cfg, checkpoint_dir=tmp_path)
    second = train(Objective.NCSN, data, cfg)
    assert first.losses == second.losses
    assert len(first.losses) == 30
    assert (tmp_path / "score.ckpt").exists()
    assert (tmp_path / "score-20.ckpt").exists()
    loaded = FeedforwardNet.load(tmp_path / "score.ckpt")
    np.testing.assert_array_equal(loaded.get_flat(), first.nets["score"].get_flat())
    first.write_loss_curve(tmp_path / "loss.csv")
    lines = (tmp_path / "loss.csv").read_text().splitlines()
    assert lines[0] == "step,loss"
    assert len(lines) == 31


def test_nonfinite_loss_raises():
    data = array_source(np.full((10, 2), np.inf))
    with pytest.raises(TrainingError) as info:
        train(Objective.DSM, data, TrainConfig(steps=3, hidden=[4]))
    assert info.value.step == 0


def test_linear_score_matching_recovers_standard_normal():
    net = FeedforwardNet([Layer(np.zeros((2, 2)), np.zeros(2), Activation.IDENTITY)])
    data = array_source(batch(n=5000, seed=9))
    cfg = TrainConfig(steps=1500, batch_size=256, learning_rate=0.02, optimizer="adam")
    result = train(Objective.SM, data, cfg, nets={"score": net})
    weight = result.nets["score"].layers[0].weight
    assert np.abs(weight + np.eye(2)).max() < 0.1


@pytest.mark.slow
def test_dsm_learns_perturbed_gaussian_score():
    sigma = 0.1
    data = array_source(batch(n=10_000, d=1, seed=10))
    cfg = TrainConfig(steps=20_000, batch_size=128, learning_rate=1e-3, hidden=[32, 32],
                      sigma_max=sigma, sigma_min=sigma, levels=1)
    net = train(Objective.DSM, data, cfg).nets["score"]
    grid = np.linspace(-2.0, 2.0, 21)[:, None]
    learned = net.forward_conditioned(grid, sigma)
    assert np.abs(learned + grid / (1 + sigma**2)).max() < 0.1


@pytest.mark.slow
def test_ncsn_matches_analytic_score_on_toy_mixture():
    gm = GaussianMixture.from_components([(0.2, (-5.0, -5.0), 1.0), (0.8, (5.0, 5.0), 1.0)])
    data = array_source(sample(gm, 10_000, seed=0))
    cfg = TrainConfig(steps=20_000, batch_size=128, hidden=[64, 64], output_scale="denoiser")
    net = train(Objective.NCSN, data, cfg).nets["score"]
    axis = np.linspace(-8.0, 8.0, 20)
    grid = np.stack(np.meshgrid(axis, axis), axis=-1).reshape(-1, 2)
    sigma = cfg.schedule.sigma_min
    learned = net.forward_conditioned(grid, sigma)
    error = np.linalg.norm(learned - score(perturb(gm, sigma), grid), axis=1)
    assert error.mean() <= 0.3
