import numpy as np
import pytest
import torch
from skimage.metrics import structural_similarity

from advfusion.exceptions import MetricUnavailable
from advfusion.images import LUMA_WEIGHTS
from advfusion.metrics import (
    MetricReport,
    l1_norm,
    perceptual_distance,
    ssim,
    tasr,
    total_variation,
)


def reference_ssim(a: torch.Tensor, b: torch.Tensor) -> float:
    """Independent implementation: skimage on the luma channel."""
    w = np.array(LUMA_WEIGHTS).reshape(3, 1, 1)
    ya = (a.numpy() * w).sum(axis=0)
    yb = (b.numpy() * w).sum(axis=0)
    return structural_similarity(
        ya, yb, data_range=1.0, gaussian_weights=True, sigma=1.5,
        win_size=11, use_sample_covariance=False,
    )


def test_ssim_matches_reference_random():
    gen = torch.Generator().manual_seed(7)
    for _ in range(3):
        a = torch.rand(3, 32, 32, generator=gen)
        b = torch.rand(3, 32, 32, generator=gen)
        assert abs(float(ssim(a, b)) - reference_ssim(a, b)) < 1e-5


def test_ssim_matches_reference_structured(dataset):
    a = dataset.image(0)
    b = dataset.image(1)
    assert abs(float(ssim(a, b)) - reference_ssim(a, b)) < 1e-5


def test_ssim_self_similarity(rand_image):
    assert float(ssim(rand_image, rand_image)) == pytest.approx(1.0, abs=1e-9)


def test_ssim_symmetry(rand_image):
    gen = torch.Generator().manual_seed(8)
    other = torch.rand_like(rand_image)
    _ = gen
    assert float(ssim(rand_image, other)) == pytest.approx(
        float(ssim(other, rand_image)), abs=1e-7
    )


def test_ssim_range_random():
    gen = torch.Generator().manual_seed(9)
    for _ in range(5):
        a = torch.rand(3, 16, 16, generator=gen)
        b = torch.rand(3, 16, 16, generator=gen)
        v = float(ssim(a, b))
        assert -1.0 <= v <= 1.0


def test_ssim_inverted_image_low(dataset):
    # A non-mid-gray image against its negative should score clearly low.
    x = dataset.image(0)
    assert float(ssim(x, 1 - x)) < 0.3


def test_ssim_shape_mismatch():
    with pytest.raises(ValueError):
        ssim(torch.rand(3, 16, 16), torch.rand(3, 8, 8))


def brute_force_tv(m: torch.Tensor) -> float:
    """Double-loop anisotropic TV over the last two dims."""
    total = 0.0
    arr = m.reshape(-1, m.shape[-2], m.shape[-1])
    for ch in arr:
        h, w = ch.shape
        for i in range(h):
            for j in range(w - 1):
                total += abs(float(ch[i, j + 1]) - float(ch[i, j]))
        for i in range(h - 1):
            for j in range(w):
                total += abs(float(ch[i + 1, j]) - float(ch[i, j]))
    return total


def brute_force_l1(m: torch.Tensor) -> float:
    total = 0.0
    for v in m.flatten().tolist():
        total += abs(v)
    return total


def test_tv_matches_brute_force_exactly():
    gen = torch.Generator().manual_seed(13)
    m = torch.rand(1, 4, 4, generator=gen)
    assert float(total_variation(m)) == pytest.approx(brute_force_tv(m), abs=1e-6)


def test_l1_matches_brute_force_exactly():
    gen = torch.Generator().manual_seed(14)
    m = torch.rand(1, 4, 4, generator=gen)
    assert float(l1_norm(m)) == pytest.approx(brute_force_l1(m), abs=1e-6)


def test_tv_constant_mask_is_zero():
    assert float(total_variation(torch.full((1, 8, 8), 0.37))) == 0.0


def test_tv_step_edge_analytic():
    # Single vertical step of magnitude d across height h has TV = h*d.
    m = torch.zeros(1, 6, 8)
    m[:, :, 4:] = 0.25
    assert float(total_variation(m)) == pytest.approx(6 * 0.25, abs=1e-6)


def test_tv_l1_absolutely_homogeneous():
    gen = torch.Generator().manual_seed(15)
    m = torch.rand(1, 5, 5, generator=gen) - 0.5
    for c in (-2.0, 0.5, 3.0):
        assert float(total_variation(c * m)) == pytest.approx(
            abs(c) * float(total_variation(m)), abs=1e-6
        )
        assert float(l1_norm(c * m)) == pytest.approx(
            abs(c) * float(l1_norm(m)), abs=1e-6
        )


def test_l1_all_ones_counts_pixels():
    assert float(l1_norm(torch.ones(1, 6, 7))) == pytest.approx(42.0, abs=1e-6)


def test_tasr_counts(tiny_ensemble, dataset):
    images = [dataset.image(i) for i in range(6)]
    preds = [int(tiny_ensemble.predict(x, "cnn_a").logits.argmax()) for x in images]
    # Choose targets to force exactly 2 hits out of 6.
    targets = [preds[0], preds[1]] + [(p + 1) % 10 for p in preds[2:]]
    rate = tasr(images, targets, tiny_ensemble, "cnn_a")
    assert rate == pytest.approx(2 / 6)


def test_tasr_empty_rejected(tiny_ensemble):
    with pytest.raises(ValueError):
        tasr([], [], tiny_ensemble, "cnn_a")


def test_perceptual_distance_unavailable(rand_image):
    with pytest.raises(MetricUnavailable):
        perceptual_distance(rand_image, rand_image, backend=None)


def test_metric_report_roundtrip(tmp_path):
    report = MetricReport(
        tasr_by_model={"cnn_a": 0.9, "cnn_c": 0.35},
        clean_accuracy_by_model={"cnn_a": 0.95},
        ssim_mean=0.81234,
        ssim_values=[0.8, 0.82],
        perceptual_mean=None,
        perceptual_backend="none",
        attack_count=2,
    )
    report.write(tmp_path / "m.json", tmp_path / "m.csv")
    assert (tmp_path / "m.json").exists()
    text = (tmp_path / "m.csv").read_text()
    assert "cnn_a" in text
    # JSON numbers carry 4 decimal places
    assert "0.8123" in (tmp_path / "m.json").read_text()
