import pytest
import torch

from drnet.config import preset
from drnet.data import MaterializedDataset, MiniRpmDataset, MiniRpmSpec
from drnet.model import DRNet

torch.set_num_threads(1)


@pytest.fixture
def micro_model():
    """Fresh seeded micro-scale model (function scope: tests may mutate it)."""
    torch.manual_seed(0)
    return DRNet(preset("micro"))


@pytest.fixture(scope="session")
def tiny_dataset():
    """Small rendered dataset shared by read-only tests."""
    spec = MiniRpmSpec(
        n_samples=12,
        seed=5,
        image_size=32,
        attributes=("size", "shade"),
        rules=("constant", "progression"),
    )
    return MaterializedDataset(MiniRpmDataset(spec, 0, 12, "train"))
