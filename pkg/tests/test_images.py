import torch

from advfusion.images import from_uint8, load_png, luma, quantize, save_png, to_uint8


def test_quantize_lands_on_8bit_lattice(rand_image):
    q = quantize(rand_image)
    scaled = q * 255
    assert torch.allclose(scaled, scaled.round(), atol=1e-5)


def test_quantize_idempotent(rand_image):
    q = quantize(rand_image)
    assert torch.equal(quantize(q), q)


def test_quantize_clamps():
    x = torch.tensor([[[-0.5, 0.0], [1.0, 1.7]]])
    q = quantize(x)
    assert float(q.min()) == 0.0
    assert float(q.max()) == 1.0


def test_uint8_roundtrip(rand_image):
    q = quantize(rand_image)
    assert torch.equal(from_uint8(to_uint8(q)), q)


def test_png_roundtrip_exact(tmp_path, rand_image):
    # PNG is lossless on the 8-bit lattice; storage must not perturb attacks.
    q = quantize(rand_image)
    save_png(tmp_path / "x.png", q)
    assert torch.equal(load_png(tmp_path / "x.png"), q)


def test_luma_weights_sum_to_one():
    x = torch.ones(3, 4, 4)
    assert torch.allclose(luma(x), torch.ones(1, 4, 4), atol=1e-6)


def test_luma_single_channel_passthrough():
    x = torch.rand(1, 4, 4, generator=torch.Generator().manual_seed(0))
    assert torch.equal(luma(x), x)
