import numpy as np
import pytest
import torch

from batterysort.backbone import build_model
from batterysort.dataset import ClassCatalog
from batterysort.resnet import ArchSpec

# Two single-block stacks: enough structure for stage tests, fast on CPU.
TINY = ArchSpec("tiny", 8, (4, 8), (1, 1), stem_stride=4, expansion=2)


@pytest.fixture(autouse=True)
def _deterministic():
    torch.manual_seed(0)
    torch.set_num_threads(1)


@pytest.fixture
def catalog9():
    return ClassCatalog.from_names([f"type{i}" for i in range(9)])


@pytest.fixture
def tiny_source():
    return build_model(TINY, num_classes=5, seed=3)


def random_images(n, seed=0, size=244):
    rng = np.random.default_rng(seed)
    return rng.uniform(-1, 1, (n, size, size, 3)).astype(np.float32)
