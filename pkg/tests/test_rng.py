import numpy as np
import pytest

from teacherguide.rng import StreamBank, TrajectoryRng, stream_for


def test_same_key_same_stream():
    a = stream_for(5, "init", 3).generator().standard_normal(4)
    b = stream_for(5, "init", 3).generator().standard_normal(4)
    np.testing.assert_array_equal(a, b)


def test_distinct_keys_distinct_streams():
    draws = {
        key: stream_for(*key).generator().standard_normal(3).tobytes()
        for key in [(5, "init", 3), (5, "init", 4), (6, "init", 3), (5, "renoise", 3)]
    }
    assert len(set(draws.values())) == 4


def test_block_split_invariance():
    whole = TrajectoryRng.range(1, 10).bank("init").standard_normal((10, 3))
    parts = [TrajectoryRng.range(1, n, start).bank("init").standard_normal((n, 3)) for start, n in [(0, 4), (4, 6)]]
    np.testing.assert_array_equal(whole, np.concatenate(parts))


def test_bank_shape_and_counter():
    bank = StreamBank(0, "ancestral", [0, 1, 2])
    bank.standard_normal((3, 2))
    bank.choice([1.0, 2.0], 3)
    assert bank.counter == 2
    with pytest.raises(ValueError):
        bank.standard_normal((4, 2))


def test_seed_range():
    with pytest.raises(ValueError):
        stream_for(-1, "init")
    with pytest.raises(ValueError):
        stream_for(2**64, "init")
    stream_for(2**64 - 1, "init").generator().random()
