import math

import pytest
import torch

from advfusion.disentangle import (
    DisentangleSettings,
    NoiseSpec,
    disentangle_robust_features,
    init_target_latent,
    load_robust_feature,
    robustness_score,
    sample_bounded_noise,
    save_robust_feature,
)
from advfusion.exceptions import RobustFeatureRejected
from advfusion.seeding import derive_seed


def test_noise_spec_validation():
    with pytest.raises(ValueError):
        NoiseSpec(epsilon=-0.1)
    with pytest.raises(ValueError):
        NoiseSpec(epsilon=1.5)
    with pytest.raises(ValueError):
        NoiseSpec(n_samples=0)
    with pytest.raises(ValueError):
        NoiseSpec(mode="median")


def test_bounded_noise_zero_epsilon():
    out = sample_bounded_noise((3, 4, 4), epsilon=0.0, n=5, seed=0)
    assert torch.equal(out, torch.zeros(5, 3, 4, 4))


def test_bounded_noise_respects_bound():
    eps = 8 / 255
    out = sample_bounded_noise((3, 8, 8), epsilon=eps, n=1000, seed=1)
    assert float(out.abs().max()) <= eps
    # draws actually fill the ball rather than hugging the center
    assert float(out.abs().max()) > eps * 0.95


def test_bounded_noise_deterministic():
    a = sample_bounded_noise((2, 3, 3), epsilon=0.1, n=4, seed=7)
    b = sample_bounded_noise((2, 3, 3), epsilon=0.1, n=4, seed=7)
    assert torch.equal(a, b)


def test_init_target_latent_single_is_encode(tiny_codec, dataset):
    x = dataset.image(0)
    single = init_target_latent(x.unsqueeze(0), tiny_codec)
    with torch.no_grad():
        assert torch.allclose(single, tiny_codec.encode(x), atol=1e-7)


def test_init_target_latent_duplicates_match_single(tiny_codec, dataset):
    x = dataset.image(0)
    pair = init_target_latent(torch.stack([x, x]), tiny_codec)
    single = init_target_latent(x.unsqueeze(0), tiny_codec)
    assert torch.allclose(pair, single, atol=1e-6)


def test_init_target_latent_is_mean(tiny_codec, dataset):
    batch = torch.stack([dataset.image(i) for i in range(4)])
    got = init_target_latent(batch, tiny_codec)
    with torch.no_grad():
        manual = sum(tiny_codec.encode(batch[i]) for i in range(4)) / 4
    assert torch.allclose(got, manual, atol=1e-6)


def test_init_target_latent_rejects_empty(tiny_codec):
    with pytest.raises(ValueError):
        init_target_latent(torch.zeros(0, 3, 32, 32), tiny_codec)


def test_robustness_score_counting_contract(tiny_codec, tiny_ensemble):
    gen = torch.Generator().manual_seed(3)
    latent = torch.randn(*tiny_codec.latent_shape, generator=gen)
    spec = NoiseSpec(epsilon=8 / 255, n_samples=25)
    score = robustness_score(latent, 0, tiny_ensemble, tiny_codec, spec, seed=5)
    assert 0.0 <= score <= 1.0
    # the score is a survival count over exactly n_samples draws
    assert math.isclose(score * 25, round(score * 25), abs_tol=1e-9)


def test_robustness_score_recompute_bit_identical(tiny_codec, tiny_ensemble):
    gen = torch.Generator().manual_seed(4)
    latent = torch.randn(*tiny_codec.latent_shape, generator=gen)
    spec = NoiseSpec(epsilon=8 / 255, n_samples=40)
    a = robustness_score(latent, 2, tiny_ensemble, tiny_codec, spec, seed=9)
    b = robustness_score(latent, 2, tiny_ensemble, tiny_codec, spec, seed=9)
    assert a == b


def test_worst_case_never_above_expectation(tiny_codec, tiny_ensemble):
    gen = torch.Generator().manual_seed(5)
    for trial in range(3):
        latent = torch.randn(*tiny_codec.latent_shape, generator=gen)
        target = trial % 10
        exp = robustness_score(
            latent, target, tiny_ensemble, tiny_codec,
            NoiseSpec(epsilon=8 / 255, n_samples=30, mode="expectation"), seed=11,
        )
        worst = robustness_score(
            latent, target, tiny_ensemble, tiny_codec,
            NoiseSpec(epsilon=8 / 255, n_samples=30, mode="worst_case"), seed=11,
            worst_case_steps=3,
        )
        assert worst <= exp


def make_settings(**kw):
    base = dict(gamma=0.0, lr=5e-2, iterations=8, draws_per_step=2,
                early_stop_loss=1e-9, early_stop_patience=3)
    base.update(kw)
    return DisentangleSettings(**base)


def test_disentangle_reduces_loss(tiny_codec, tiny_ensemble, dataset):
    # epsilon=0 makes the objective deterministic, so a handful of Adam
    # steps must end below the starting loss
    exemplars = torch.stack([dataset.image(i) for i in range(3)])
    with torch.no_grad():
        lat0 = init_target_latent(exemplars, tiny_codec)
        initial = float(tiny_ensemble.ce_loss(
            torch.clamp(tiny_codec.decode(lat0).unsqueeze(0), 0.0, 1.0), 1))
    rf = disentangle_robust_features(
        1, exemplars, tiny_ensemble, tiny_codec,
        spec=NoiseSpec(epsilon=0.0, n_samples=5),
        settings=make_settings(iterations=12), seed=2,
    )
    assert rf.provenance["final_loss"] <= initial + 1e-6
    assert rf.target_class == 1
    assert rf.latent.shape == tiny_codec.latent_shape
    assert rf.provenance["iterations_run"] <= 12


def test_disentangle_bit_reproducible(tiny_codec, tiny_ensemble, dataset):
    exemplars = torch.stack([dataset.image(i) for i in range(2)])
    kwargs = dict(
        spec=NoiseSpec(epsilon=8 / 255, n_samples=5),
        settings=make_settings(), seed=derive_seed(0, "extract", 4),
    )
    a = disentangle_robust_features(4, exemplars, tiny_ensemble, tiny_codec, **kwargs)
    b = disentangle_robust_features(4, exemplars, tiny_ensemble, tiny_codec, **kwargs)
    assert torch.equal(a.latent, b.latent)
    assert a.robustness_score == b.robustness_score


def test_disentangle_invalid_target(tiny_codec, tiny_ensemble, dataset):
    exemplars = dataset.image(0).unsqueeze(0)
    with pytest.raises(ValueError):
        disentangle_robust_features(
            10, exemplars, tiny_ensemble, tiny_codec,
            spec=NoiseSpec(), settings=make_settings(iterations=1), seed=0,
        )


def test_disentangle_rejection_carries_score(tiny_codec, tiny_ensemble, dataset):
    # gamma=1.0 with huge noise against untrained models cannot be met;
    # aim away from whatever class the untrained ensemble already favors
    exemplars = dataset.image(0).unsqueeze(0)
    with torch.no_grad():
        favored = int(tiny_ensemble.consensus_labels(exemplars)[0])
    target = (favored + 5) % 10
    with pytest.raises(RobustFeatureRejected) as err:
        disentangle_robust_features(
            target, exemplars, tiny_ensemble, tiny_codec,
            spec=NoiseSpec(epsilon=0.5, n_samples=10),
            settings=make_settings(gamma=1.0, iterations=2), seed=0,
        )
    assert 0.0 <= err.value.achieved_score < 1.0
    assert err.value.threshold == 1.0


def test_loss_estimate_statistically_consistent(tiny_codec, tiny_ensemble, dataset):
    # a few-draw estimate of the noise-averaged loss must sit within two
    # standard errors of a 10x-draw estimate at the same latent
    exemplars = torch.stack([dataset.image(i) for i in range(2)])
    rf = disentangle_robust_features(
        6, exemplars, tiny_ensemble, tiny_codec,
        spec=NoiseSpec(epsilon=8 / 255, n_samples=5),
        settings=make_settings(), seed=3,
    )
    eps = 8 / 255
    shape = (tiny_codec.in_channels, tiny_codec.image_size, tiny_codec.image_size)

    def per_draw_losses(n, seed):
        noise = sample_bounded_noise(shape, eps, n, seed)
        with torch.no_grad():
            decoded = torch.clamp(tiny_codec.decode(rf.latent), 0.0, 1.0)
            batch = torch.clamp(decoded.unsqueeze(0) + noise, 0.0, 1.0)
            return [float(tiny_ensemble.ce_loss(batch[i : i + 1], 6)) for i in range(n)]

    small = per_draw_losses(20, seed=21)
    big = per_draw_losses(200, seed=22)
    mean_small = sum(small) / len(small)
    mean_big = sum(big) / len(big)
    var = sum((v - mean_small) ** 2 for v in small) / (len(small) - 1)
    se = (var / len(small)) ** 0.5
    assert abs(mean_small - mean_big) <= 2 * se + 1e-6


def test_save_load_roundtrip(tmp_path, tiny_codec, tiny_ensemble, dataset):
    exemplars = dataset.image(5).unsqueeze(0)
    rf = disentangle_robust_features(
        7, exemplars, tiny_ensemble, tiny_codec,
        spec=NoiseSpec(epsilon=0.0, n_samples=3),
        settings=make_settings(iterations=2), seed=1,
    )
    paths = save_robust_feature(tmp_path, rf)
    assert paths[0].name == "class_007.npz"
    loaded = load_robust_feature(paths[0])
    assert torch.equal(loaded.latent, rf.latent)
    assert loaded.target_class == 7
    assert loaded.robustness_score == pytest.approx(rf.robustness_score, abs=1e-6)
    assert loaded.gamma_threshold == rf.gamma_threshold
    assert loaded.provenance["seed"] == rf.provenance["seed"]
