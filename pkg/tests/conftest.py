import os

import numpy as np
import pytest

os.environ.setdefault("G4D_PROGRESS", "false")
os.environ.setdefault("G4D_THREADS", "1")

from app.services.dataset.synthetic_service import SyntheticService, SyntheticSpec  # noqa: E402
from app.services.rasterizer_service import RasterizerService  # noqa: E402
from tests.helpers import pinhole_camera  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(7)


@pytest.fixture
def camera():
    return pinhole_camera()


@pytest.fixture(scope="session")
def tiny_spec():
    return SyntheticSpec(views=3, frames=3, instances=2, width=48, height=48, motion="translation", seed=3,
                         raw_dim=8, blobs_per_instance=20, background_grid=8)


@pytest.fixture(scope="session")
def tiny_dataset_dir(tmp_path_factory, tiny_spec):
    """A generated three-view, three-frame sequence shared by the read-only tests."""
    out = tmp_path_factory.mktemp("synthetic")
    SyntheticService(RasterizerService()).gen_synthetic(tiny_spec, out)
    return out
