import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from synth import write_idx_dataset  # noqa: E402

from mecaps.rng import Rng  # noqa: E402


@pytest.fixture
def rng():
    return Rng(12345, 0)


@pytest.fixture(scope="session")
def synth_data_dir(tmp_path_factory):
    """Synthetic digit dataset laid out as gzipped IDX files."""
    root = tmp_path_factory.mktemp("data")
    return write_idx_dataset(root, train_count=2048, test_count=512, seed=777)
