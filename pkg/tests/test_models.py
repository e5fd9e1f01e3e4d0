import pytest
import torch

from advfusion.exceptions import ConfigurationError, UnsupportedModelError
from advfusion.gradcam import gradcam
from advfusion.models import ARCHITECTURES, build_model, load_model, save_model


@pytest.mark.parametrize("arch", sorted(ARCHITECTURES))
def test_output_shape(arch):
    model = build_model(arch, class_count=7, in_channels=3, image_size=32, init_seed=0)
    out = model(torch.rand(2, 3, 32, 32, generator=torch.Generator().manual_seed(0)))
    assert out.shape == (2, 7)


def test_architectures_are_distinct():
    assert len(ARCHITECTURES) >= 3


def test_init_seed_reproducible():
    x = torch.rand(1, 3, 32, 32, generator=torch.Generator().manual_seed(1))
    a = build_model("cnn_a", class_count=5, image_size=32, init_seed=77)
    b = build_model("cnn_a", class_count=5, image_size=32, init_seed=77)
    a.eval(), b.eval()
    with torch.no_grad():
        assert torch.equal(a(x), b(x))


def test_unknown_architecture_rejected():
    with pytest.raises(ConfigurationError):
        build_model("resnet50", class_count=10)


def test_save_load_roundtrip(tmp_path):
    model = build_model("cnn_b", class_count=4, image_size=32, init_seed=3)
    model.eval()
    x = torch.rand(1, 3, 32, 32, generator=torch.Generator().manual_seed(2))
    with torch.no_grad():
        before = model(x)
    save_model(model, tmp_path / "m.pt", architecture="cnn_b", input_shape=(3, 32, 32),
               class_count=4, training_seed=3, metrics={"val_accuracy": 0.5})
    loaded, manifest = load_model(tmp_path / "m.pt")
    with torch.no_grad():
        after = loaded(x)
    assert torch.equal(before, after)
    assert manifest["architecture"] == "cnn_b"
    assert manifest["class_count"] == 4
    assert manifest["metrics"]["val_accuracy"] == 0.5


@pytest.mark.parametrize("arch", sorted(ARCHITECTURES))
def test_gradcam_shape_and_range(arch, dataset):
    model = build_model(arch, class_count=10, image_size=32, init_seed=9)
    model.eval()
    x = dataset.image(0)
    cam = gradcam(model, x, class_id=3)
    assert cam.shape == x.shape[-2:]
    assert float(cam.min()) >= 0.0
    assert float(cam.max()) <= 1.0


def test_gradcam_argmax_invariant_to_logit_scale(dataset):
    # Scaling the classifier head by a positive constant scales all CAM
    # weights together; the hottest location must not move.
    model = build_model("cnn_a", class_count=10, image_size=32, init_seed=9)
    model.eval()
    x = dataset.image(0)
    before = gradcam(model, x, class_id=2)
    head = model.head
    with torch.no_grad():
        head.weight.mul_(3.0)
        head.bias.mul_(3.0)
    after = gradcam(model, x, class_id=2)
    assert int(before.flatten().argmax()) == int(after.flatten().argmax())


def test_gradcam_rejects_model_without_conv_layer():
    class Flat(torch.nn.Module):
        def __init__(self):
            super().__init__()
            self.gradcam_layer = torch.nn.Linear(4, 4)

        def forward(self, x):
            return x.flatten(1)

    with pytest.raises(UnsupportedModelError):
        gradcam(Flat(), torch.rand(3, 2, 2), class_id=0)
