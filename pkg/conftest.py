import pytest
import torch

from qdavpr.adversarial import AdversarialHeads
from qdavpr.config import ExperimentConfig, ModelConfig
from qdavpr.core import QdaVPRModel
from qdavpr.data import ToyDataset, generate_toy_places
from qdavpr.train import Trainer
from tests.helpers import TINY_MODEL, TOY_PER_PLACE, TOY_PLACES, TOY_SIZE, tiny_experiment


def pytest_addoption(parser):
    parser.addoption(
        "--run-slow", action="store_true", default=False, help="run the end-to-end trainings"
    )


def pytest_collection_modifyitems(config, items):
    if config.getoption("--run-slow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --run-slow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def tiny_model_config() -> ModelConfig:
    return TINY_MODEL


@pytest.fixture
def tiny_model(tiny_model_config: ModelConfig) -> QdaVPRModel:
    return QdaVPRModel(tiny_model_config)


@pytest.fixture
def tiny_heads(tiny_model_config: ModelConfig) -> AdversarialHeads:
    return AdversarialHeads(
        dim=tiny_model_config.dim, blocks=tiny_model_config.blocks, seed=tiny_model_config.seed
    )


@pytest.fixture
def tiny_config() -> ExperimentConfig:
    return tiny_experiment()


@pytest.fixture
def toy_images() -> torch.Tensor:
    return torch.rand(4, 3, TOY_SIZE, TOY_SIZE, generator=torch.Generator().manual_seed(0))


@pytest.fixture(scope="session")
def toy_dataset() -> ToyDataset:
    # shared across the session, tests must not mutate the manifest or its cache
    return generate_toy_places(TOY_PLACES, TOY_PER_PLACE, TOY_SIZE, seed=0)


@pytest.fixture
def toy_on_disk(tmp_path) -> ToyDataset:
    return generate_toy_places(
        TOY_PLACES, TOY_PER_PLACE, TOY_SIZE, seed=0, out_dir=tmp_path / "toy"
    )


@pytest.fixture
def trainer(tiny_config: ExperimentConfig, toy_dataset: ToyDataset, tmp_path) -> Trainer:
    return Trainer(tiny_config, toy_dataset.manifest, output_dir=tmp_path / "run")
