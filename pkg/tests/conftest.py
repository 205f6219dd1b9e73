import numpy as np
import pytest

from clmark.imagecore import ImageTensor


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_image(rng, h=16, w=16, c=3) -> ImageTensor:
    return ImageTensor(rng.uniform(0.0, 1.0, size=(h, w, c)))


@pytest.fixture
def img16(rng):
    return random_image(rng)
