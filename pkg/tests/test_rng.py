import numpy as np
import pytest

from scrfice import rng


def test_stream_is_reproducible_and_path_keyed():
    a = rng.stream(7, "cohort", 3).random(5)
    np.testing.assert_array_equal(a, rng.stream(7, "cohort", 3).random(5))
    assert not np.array_equal(a, rng.stream(7, "cohort", 4).random(5))
    assert not np.array_equal(a, rng.stream(8, "cohort", 3).random(5))


@pytest.mark.parametrize("n, size", [(0, 4), (1, 4), (8, 4), (9, 4)])
def test_blocks_cover(n, size):
    b = rng.blocks(n, size)
    covered = [i for s, e in b for i in range(s, e)]
    assert covered == list(range(n))


@pytest.mark.parametrize("threads", [1, 2, 5])
def test_map_ordered_keeps_order(threads):
    assert rng.map_ordered(lambda v: v * v, list(range(20)), threads) == [v * v for v in range(20)]


def test_resolve_threads():
    assert rng.resolve_threads(0) >= 1
    with pytest.raises(ValueError):
        rng.resolve_threads(-1)
