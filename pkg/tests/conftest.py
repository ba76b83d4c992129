import os
from pathlib import Path

import pytest

from recchains.data import generate_synthetic, parse_tab_format

ML100K = Path(os.environ.get("REC_ML100K", "/root/data/ml-100k/u.data"))


@pytest.fixture(scope="session")
def ml100k():
    if not ML100K.exists():
        pytest.skip(f"ML-100K not found at {ML100K} (set REC_ML100K)")
    return parse_tab_format(ML100K)


@pytest.fixture
def small_synth():
    return generate_synthetic(20, 20, 2, 0.3, 0.0, seed=3)
