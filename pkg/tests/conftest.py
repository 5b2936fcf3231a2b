import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from cfr.volume_io import generate_dataset  # noqa: E402

torch.set_num_threads(2)


@pytest.fixture
def tiny_dataset(tmp_path):
    """Small 16x16x16 phantom dataset: 4 train (1 labeled) + 1 test volume."""
    return generate_dataset(
        tmp_path / "data",
        dims=(16, 16, 16),
        num_classes=2,
        n_train=4,
        n_test=1,
        m_labeled=1,
        seed=123,
        noise_sigma=0.1,
    )
