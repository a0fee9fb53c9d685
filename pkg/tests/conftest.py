import pytest

from avesformer.tensor import Rng


@pytest.fixture
def rng():
    return Rng(20240517)
