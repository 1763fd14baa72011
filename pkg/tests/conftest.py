import numpy as np
import pytest
import torch

from spinelabel import phantom
from spinelabel.core import AnnotationSet, Volume, label_from_name


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def flat_volume():
    """All-air 40x32x24 volume at 2 mm."""
    return Volume(np.full((40, 32, 24), -1000.0, dtype=np.float32), (2.0, 2.0, 2.0))


@pytest.fixture(scope="session")
def lumbar_phantom():
    spec = phantom.PhantomSpec(n_vertebrae=5, start_label="L1", spacing_mm=20.0, seed=11)
    return phantom.generate_phantom(spec)


def annotation_from_names(positions: dict[str, tuple]) -> AnnotationSet:
    return AnnotationSet({label_from_name(n): tuple(map(float, p))
                          for n, p in positions.items()})


@pytest.fixture
def ann_builder():
    return annotation_from_names
