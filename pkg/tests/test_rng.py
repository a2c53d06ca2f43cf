import numpy as np
import pytest

from core.rng import CounterRng


class TestCounterRng:

    def test_same_seed_and_stream_reproduce(self):
        a = CounterRng(7, "data").uniform((4, 5))
        b = CounterRng(7, "data").uniform((4, 5))
        np.testing.assert_array_equal(a, b)

    def test_streams_are_independent(self):
        a = CounterRng(7, "data").uniform(64)
        b = CounterRng(7, "noise").uniform(64)
        assert not np.array_equal(a, b)

    def test_consecutive_draws_differ(self):
        r = CounterRng(3)
        assert not np.array_equal(r.uniform(16), r.uniform(16))

    def test_fork_leaves_parent_untouched(self):
        parent = CounterRng(1, "train")
        before = parent.state()
        child = parent.fork("step", 3)
        assert parent.state() == before
        assert child.stream == "train/step/3"
        np.testing.assert_array_equal(child.normal(8), CounterRng(1, "train").fork("step", 3).normal(8))

    def test_state_round_trip_resumes_stream(self):
        r = CounterRng(11, "resume")
        r.uniform(5)
        saved = r.state()
        expected = r.normal((3, 3))
        np.testing.assert_array_equal(CounterRng.from_state(saved).normal((3, 3)), expected)

    def test_normal_moments(self):
        z = CounterRng(5, "moments").normal(100_000)
        assert abs(z.mean()) < 0.02
        assert abs(z.var() - 1.0) < 0.02

    def test_odd_normal_count(self):
        assert CounterRng(0).normal((3, 1)).shape == (3, 1)

    def test_uniform_range_and_dtype(self):
        u = CounterRng(2).uniform(1000, -3.0, -1.0, dtype=np.float32)
        assert u.dtype == np.float32
        assert u.min() >= -3.0 and u.max() <= -1.0

    def test_integers_in_range(self):
        k = CounterRng(9).integers(2, 6, 500)
        assert k.min() >= 2 and k.max() <= 5
        assert set(k.tolist()) == {2, 3, 4, 5}

    def test_permutation(self):
        p = CounterRng(4).permutation(20)
        assert sorted(p.tolist()) == list(range(20))

    def test_negative_seed_rejected(self):
        with pytest.raises(ValueError):
            CounterRng(-1)
