import numpy as np
import pytest

from wavaug.nn import ArchSpec, Classifier


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_model(norm="batch", seed=0, size=8, channels=1, classes=3):
    return Classifier(ArchSpec(in_channels=channels, image_size=size, widths=(2, 2), hidden=6,
                               num_classes=classes, norm=norm), seed=seed)
