import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from critiq import data
from critiq.critiquing import BlenderConfig, train_blender
from critiq.model import MultimodalVae, TrainingConfig, train

TOY_SEED = 7
SIM_SEED = 5


@pytest.fixture(scope="session")
def toy_dataset():
    return data.generate_toy_dataset(200, 100, 20, 4, seed=TOY_SEED)


@pytest.fixture(scope="session")
def toy_config():
    return TrainingConfig.preset("toy")


@pytest.fixture(scope="session")
def trained_model(toy_dataset, toy_config):
    model = MultimodalVae(toy_dataset.n_items, toy_dataset.n_keyphrases, toy_config)
    history = train(model, toy_dataset, toy_config)
    model.training_history = history
    return model


@pytest.fixture(scope="session")
def blender_config():
    return BlenderConfig(margin=2.0, epochs=80, seed=0, restrict_top=None)


@pytest.fixture(scope="session")
def trained_gate(trained_model, toy_dataset, blender_config):
    gate, history = train_blender(trained_model, toy_dataset, blender_config)
    gate.training_history = history
    return gate


@pytest.fixture(scope="session")
def mini_dataset():
    """Smaller fixture for cheap structural tests."""
    return data.generate_toy_dataset(40, 30, 10, 3, seed=11)
