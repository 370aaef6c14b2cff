import numpy as np

from iguane import example_volume
from iguane.blocks.normalization import whitestripe
from iguane.blocks.preprocessing import median_normalize

volume = example_volume()


def test_copy_volume():
    volume.a = 3
    volume_copy = volume.copy()
    volume_copy.a = 5
    assert volume_copy.a != volume.a
    assert id(volume.data) != id(volume_copy.data)
    assert id(volume.metadata) != id(volume_copy.metadata)


def test_pure_functions_do_not_mutate():
    data = volume.data.copy()
    median_normalize(volume)
    np.testing.assert_array_equal(volume.data, data)


def test_copy_white_stripe():
    normalized = whitestripe(volume)
    copied = normalized.copy()
    copied.white_stripe[:] = False
    assert normalized.white_stripe.any()
