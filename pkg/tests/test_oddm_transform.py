import math

import numpy as np
import pytest

from oddm_hmim.dd_channel import ChannelPath, ChannelRealization, apply_channel, build_g_matrix
from oddm_hmim.oddm_transform import add_cp, dd_to_time, remove_cp, time_index, time_to_dd


def _rand_grid(rng, m, n):
    return rng.standard_normal((m, n)) + 1j * rng.standard_normal((m, n))


class TestDdToTime:
    def test_zeros(self):
        assert not np.any(dd_to_time(np.zeros((4, 8))))

    def test_doppler_impulse_spreads_over_delay_row(self):
        x = np.zeros((2, 2), dtype=complex)
        x[0, 0] = 1.0
        s = dd_to_time(x)
        row0 = time_index(0, np.arange(2), 2)
        assert np.allclose(s[row0], 1 / math.sqrt(2), atol=1e-15)
        assert np.allclose(np.delete(s, row0), 0)

    def test_delay_index_runs_fastest(self):
        x = np.zeros((4, 3), dtype=complex)
        x[2, 0] = math.sqrt(3)
        s = dd_to_time(x)
        assert np.flatnonzero(np.abs(s) > 1e-12).tolist() == [2, 6, 10]

    def test_roundtrip(self, rng):
        x = _rand_grid(rng, 32, 32)
        assert np.max(np.abs(time_to_dd(dd_to_time(x), 32, 32) - x)) < 1e-12

    def test_parseval(self, rng):
        r = rng.standard_normal(96) + 1j * rng.standard_normal(96)
        y = time_to_dd(r, 8, 12)
        assert np.vdot(r, r).real == pytest.approx(np.vdot(y, y).real, abs=1e-12)

    def test_noise_statistics_preserved(self, rng):
        var = 0.37
        z = math.sqrt(var / 2) * (rng.standard_normal(1 << 20) + 1j * rng.standard_normal(1 << 20))
        w = time_to_dd(z, 1024, 1024)
        assert abs(w.mean()) < 0.01
        assert np.mean(np.abs(w) ** 2) == pytest.approx(var, rel=0.03)

    def test_shape_errors(self):
        with pytest.raises(ValueError):
            dd_to_time(np.zeros(8))
        with pytest.raises(ValueError):
            time_to_dd(np.zeros(7), 2, 4)


class TestCyclicPrefix:
    def test_zero_length_is_identity(self, rng):
        s = rng.standard_normal(16)
        assert np.array_equal(add_cp(s, 0), s)
        assert np.array_equal(remove_cp(s, 0), s)

    def test_roundtrip(self, rng):
        s = rng.standard_normal(16) + 1j
        assert np.array_equal(remove_cp(add_cp(s, 3), 3), s)

    def test_too_long(self):
        with pytest.raises(ValueError):
            add_cp(np.zeros(4), 4)

    def test_linear_channel_on_cp_equals_cyclic_g(self, rng):
        m, n = 8, 4
        mn = m * n
        paths = [ChannelPath(complex(*rng.standard_normal(2)), l, k) for l, k in [(0, 1), (2, -1), (3, 0)]]
        ch = ChannelRealization(paths, m, n)
        s = rng.standard_normal(mn) + 1j * rng.standard_normal(mn)
        lm = ch.l_max
        tx = add_cp(s, lm)
        # linear time-varying convolution; absolute sample time t = i - lm
        rx = np.zeros(tx.size, dtype=complex)
        for i in range(lm, tx.size):
            t = i - lm
            for p in paths:
                rx[i] += p.gain * np.exp(2j * np.pi * p.doppler_idx * (t - p.delay_idx) / mn) * tx[i - p.delay_idx]
        expected = build_g_matrix(ch, dense=True) @ s
        assert np.max(np.abs(remove_cp(rx, lm) - expected)) < 1e-10
        assert np.max(np.abs(apply_channel(ch, s) - expected)) < 1e-12
