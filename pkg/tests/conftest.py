import os
from pathlib import Path

import numpy as np
import pytest

os.environ.setdefault("PDP_MNIST_DIR", "/root/data/mnist")


def mnist_present() -> bool:
    d = Path(os.environ["PDP_MNIST_DIR"])
    return any(d.glob("train-images*")) and any(d.glob("t10k-labels*"))


needs_mnist = pytest.mark.skipif(not mnist_present(), reason="MNIST IDX files not found under $PDP_MNIST_DIR")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
