"""Shared fixtures: a small synthetic dataset and untrained model bundles.

Unit tests exercise mechanics (shapes, determinism, identities, gradients),
which do not need trained weights; everything here is built once per session
and kept deliberately tiny. The acceptance suite trains its own full-size
bundle in tests/test_acceptance.py.
"""

import pytest
import torch

torch.set_num_threads(1)

from advfusion.autoencoder import build_autoencoder
from advfusion.data import generate_shape_dataset, ingest_dataset
from advfusion.ensemble import ModelEnsemble
from advfusion.models import build_model
from advfusion.training import TrainSettings, train_autoencoder, train_classifier

IMAGE_SIZE = 32
CLASS_COUNT = 10


@pytest.fixture(scope="session")
def shape_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("shapes")
    generate_shape_dataset(root, per_class=10, image_size=IMAGE_SIZE, seed=11)
    return root


@pytest.fixture(scope="session")
def dataset(shape_root):
    return ingest_dataset(shape_root, image_size=IMAGE_SIZE, seed=3)


@pytest.fixture(scope="session")
def tiny_codec():
    return build_autoencoder(in_channels=3, latent_channels=8, image_size=IMAGE_SIZE, init_seed=5)


@pytest.fixture(scope="session")
def tiny_ensemble():
    models = {
        mid: build_model(mid, class_count=CLASS_COUNT, in_channels=3,
                         image_size=IMAGE_SIZE, init_seed=100 + i)
        for i, mid in enumerate(["cnn_a", "cnn_b"])
    }
    return ModelEnsemble(models, class_count=CLASS_COUNT)


@pytest.fixture(scope="session")
def trained_bundle(dataset):
    """Briefly trained codec + two-member ensemble on the tiny shape corpus.

    Good enough for gradient-direction tests (attention, saliency, fusion
    optimization trends); nowhere near the full-scale acceptance bundle.
    """
    codec = build_autoencoder(in_channels=3, latent_channels=8,
                              image_size=IMAGE_SIZE, init_seed=21)
    train_autoencoder(
        codec, dataset.images, dataset.splits["train"], dataset.splits["val"],
        TrainSettings(epochs=40, batch_size=16, lr=3e-3, seed=22), mae_budget=0.2,
    )
    models = {}
    for i, mid in enumerate(["cnn_a", "cnn_b"]):
        model = build_model(mid, class_count=CLASS_COUNT, in_channels=3,
                            image_size=IMAGE_SIZE, init_seed=30 + i)
        train_classifier(
            model, dataset.images, dataset.labels,
            dataset.splits["train"], dataset.splits["val"],
            TrainSettings(epochs=25, batch_size=16, lr=2e-3, seed=40 + i),
        )
        models[mid] = model
    return codec, ModelEnsemble(models, class_count=CLASS_COUNT)


@pytest.fixture()
def rand_image():
    gen = torch.Generator().manual_seed(42)
    return torch.rand(3, IMAGE_SIZE, IMAGE_SIZE, generator=gen)
