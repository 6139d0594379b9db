import numpy as np
import pytest

from src.blocks import BlockKind, InitScheme, MapKind
from src.config import DatasetConfig, EvalConfig, ModelConfig, TrainConfig
from src.data import load_splits, synth_dataset
from src.network import build_stack
from src.train import sgd_train


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def moons():
    return synth_dataset("moons", 96, 0.08, seed=0)


@pytest.fixture
def make_network():
    def make(kind=BlockKind.IN, depth=2, width=4, init=(0.2, 0.25), seed=0, in_features=2, num_classes=2, map=MapKind.DENSE):
        return build_stack(
            depth, width, kind, InitScheme(*init), seed, in_features=in_features, num_classes=num_classes, map=map
        )

    return make


@pytest.fixture(scope="session")
def small_model_cfg():
    return ModelConfig(kind=BlockKind.IN, depth=3, width=8, lambda_init=(0.2, 0.25))


@pytest.fixture(scope="session")
def small_train_cfg():
    return TrainConfig(
        epochs=30,
        batch_size=16,
        lr0=0.1,
        lr_drops=[(20, 10.0)],
        dataset=DatasetConfig(source="moons", n=160, noise_sd=0.08, seed=0),
        test_fraction=0.25,
    )


@pytest.fixture(scope="session")
def clean_eval_cfg():
    return EvalConfig(noise=[], attacks=[])


@pytest.fixture(scope="session")
def trained(small_model_cfg, small_train_cfg):
    """One short training run on moons, shared by the harness tests."""
    train_data, test_data = load_splits(small_train_cfg.dataset, small_train_cfg.test_fraction)
    run = sgd_train(small_model_cfg, small_train_cfg, train_data, seed=0)
    return run, test_data
