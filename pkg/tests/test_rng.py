import numpy as np
import pytest

from chunkswarm import rng


def test_streams_reproducible_and_independent():
    a = rng.stream(5, rng.OVERLAY).random(4)
    assert np.array_equal(a, rng.stream(5, rng.OVERLAY).random(4))
    assert not np.array_equal(a, rng.stream(5, rng.SPRAY).random(4))
    assert not np.array_equal(a, rng.stream(6, rng.OVERLAY).random(4))
    assert not np.array_equal(rng.stream(5, 1, 0).random(2), rng.stream(5, 1, 1).random(2))


def test_derive_seed():
    s = rng.derive_seed(1, 2)
    assert s == rng.derive_seed(1, 2)
    assert 0 <= s < 2**63
    assert len({rng.derive_seed(1, i) for i in range(100)}) == 100


def test_negative_seed():
    with pytest.raises(ValueError):
        rng.stream(-1, rng.OVERLAY)
