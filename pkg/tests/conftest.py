import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from da2net.tensor import Rng


@pytest.fixture
def rng():
    return Rng(20240817)
