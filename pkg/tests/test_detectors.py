import itertools

import numpy as np
import pytest

from oddm_hmim.dd_channel import (
    ChannelPath,
    ChannelRealization,
    apply_channel,
    build_g_matrix,
    build_phi,
    build_subchannel,
    gen_channel,
    subchannels,
)
from oddm_hmim.detectors import (
    SicMmseState,
    detect_ml,
    detect_mmse_blockwise,
    detect_sicmmse,
    iterate_diagnostics,
    mmse_equalize,
    post_mmse_variance,
    sic_equalize_row,
)
from oddm_hmim.hmim_codec import HmimModem, ImBaselineConfig, ImModem
from oddm_hmim.hqc import int_to_bits
from oddm_hmim.oddm_transform import dd_to_time, time_to_dd

KMH_500 = 500 / 3.6


def _channel(rng, m, n, noise_var, taps=5):
    return gen_channel("uniform", KMH_500, 5e9, 15e3, m, n, rng, n_taps=taps, noise_var=noise_var)


def _transmit(modem, ch, rng):
    bits = rng.integers(0, 2, modem.bits_per_frame, dtype=np.uint8)
    s = dd_to_time(modem.modulate(bits))
    return bits, s, apply_channel(ch, s, rng)


class TestMl:
    def test_hypothesis_count(self, rng):
        modem = HmimModem.build(2, 2, 2, 2, 2, 1.4)
        ch = _channel(rng, 2, 2, 0.0, taps=2)
        res = detect_ml(np.zeros((2, 2)), ch, modem)
        assert res.diagnostics["hypotheses"] == 64

    def test_noiseless_recovery(self, rng):
        modem = HmimModem.build(2, 2, 2, 2, 2, 1.4)
        for _ in range(20):
            ch = _channel(rng, 2, 2, 0.0, taps=2)
            bits, _, r = _transmit(modem, ch, rng)
            assert np.array_equal(detect_ml(time_to_dd(r, 2, 2), ch, modem).bits, bits)

    def test_matches_independent_oracle(self, rng):
        modem = HmimModem.build(2, 2, 2, 2, 2, 1.4)
        all_bits = int_to_bits(np.arange(64), 6)
        frames = [modem.modulate(b) for b in all_bits]
        for _ in range(100):
            ch = _channel(rng, 2, 2, 0.3, taps=2)
            _, _, r = _transmit(modem, ch, rng)
            y = time_to_dd(r, 2, 2).ravel()
            costs = [np.sum(np.abs(y - build_phi(x, ch) @ ch.gains) ** 2) for x in frames]
            assert np.array_equal(detect_ml(y.reshape(2, 2), ch, modem).bits, all_bits[int(np.argmin(costs))])

    def test_refuses_large_frames(self, rng):
        modem = HmimModem.build(8, 8, 4)
        with pytest.raises(ValueError, match="mmse/sicmmse"):
            detect_ml(np.zeros((8, 8)), _channel(rng, 8, 8, 0.1), modem)

    def test_high_snr_is_error_free(self, rng):
        modem = HmimModem.build(2, 2, 2, 2, 2, 1.4)
        errors = 0
        for _ in range(50):
            ch = _channel(rng, 2, 2, 1e-6, taps=2)
            bits, _, r = _transmit(modem, ch, rng)
            errors += np.sum(detect_ml(time_to_dd(r, 2, 2), ch, modem).bits != bits)
        assert errors == 0


class TestMmse:
    def test_identity_channel_recovery(self, rng):
        modem = HmimModem.build(8, 8, 4, 4, 4, 1.1)
        ch = ChannelRealization([ChannelPath(1.0, 0, 0)], 8, 8, 1e-9)
        bits, _, r = _transmit(modem, ch, rng)
        assert np.array_equal(detect_mmse_blockwise(r, ch, modem).bits, bits)

    def test_matches_dense_filter_and_error_variance(self, rng):
        ch = _channel(rng, 8, 8, 0.2)
        g = build_g_matrix(ch, dense=True)
        r = rng.standard_normal(64) + 1j * rng.standard_normal(64)
        w = np.linalg.solve(g.conj().T @ g + 0.2 * np.eye(64), g.conj().T)
        mu = np.diag(w @ g).real
        s_t, mu_got, var = mmse_equalize(r, ch)
        assert np.max(np.abs(mu_got - mu)) < 1e-9
        assert np.max(np.abs(s_t - (w @ r) / mu)) < 1e-9
        # error covariance of the unbiased estimate, evaluated directly
        wu = w / mu[:, None]
        direct = np.sum(np.abs(wu @ g - np.eye(64)) ** 2, axis=1) + 0.2 * np.sum(np.abs(wu) ** 2, axis=1)
        assert np.max(np.abs(var - direct)) < 1e-9

    def test_post_mmse_variance(self):
        assert post_mmse_variance(0.5) == pytest.approx(1.0)
        assert post_mmse_variance(1.0, 2.0) == 0.0

    def test_hmim_se2_equals_4qam_decisions(self, rng):
        a = HmimModem.build(8, 8, 2, 2, 1, 1.0)
        b = HmimModem.build(8, 8, 4)
        for _ in range(10):
            ch = _channel(rng, 8, 8, 0.5)
            bits, _, r = _transmit(a, ch, rng)
            assert np.array_equal(detect_mmse_blockwise(r, ch, a).bits, detect_mmse_blockwise(r, ch, b).bits)

    def test_im_baseline(self, rng):
        modem = ImModem(8, 8, ImBaselineConfig(4, 3, 4))
        ch = _channel(rng, 8, 8, 1e-8)
        bits, _, r = _transmit(modem, ch, rng)
        assert np.array_equal(detect_mmse_blockwise(r, ch, modem).bits, bits)


def _sequential_row(r, ch, qs, s_hat, err_vars, es=1.0):
    """Per-sample reference: explicit cancellation and windowed MMSE, one q at a time."""
    out = []
    for q in qs:
        gq, s_idx, r_idx = build_subchannel(ch, q)
        lm = ch.l_max
        g0 = gq[:, lm]
        others = [i for i in range(2 * lm + 1) if i != lm]
        r_t = r[r_idx] - gq[:, others] @ s_hat[s_idx[others]]
        v = err_vars[s_idx].copy()
        v[lm] = es
        cov = gq @ np.diag(v) @ gq.conj().T + ch.noise_var * np.eye(lm + 1)
        w = g0.conj() @ np.linalg.inv(cov)
        mu = (w @ g0).real
        out.append((w @ r_t / mu, es * mu))
    return np.array(out)


class TestSicMmse:
    def test_batched_row_equals_sequential(self, rng):
        ch = _channel(rng, 8, 8, 0.1)
        r = rng.standard_normal(64) + 1j * rng.standard_normal(64)
        s_hat = 0.5 * (rng.standard_normal(64) + 1j * rng.standard_normal(64))
        err = rng.uniform(0.0, 1.0, 64)
        for m in range(8):
            qs = np.arange(8) * 8 + m
            s_t, mu, _ = sic_equalize_row(r, subchannels(ch, qs), qs, s_hat, err, ch.noise_var)
            ref = _sequential_row(r, ch, qs, s_hat, err)
            assert np.max(np.abs(s_t - ref[:, 0])) < 1e-12
            assert np.max(np.abs(mu - ref[:, 1].real)) < 1e-12

    def test_perfect_priors_leave_only_noise(self, rng):
        ch = _channel(rng, 8, 8, 0.1)
        s = rng.standard_normal(64) + 1j * rng.standard_normal(64)
        z = 0.3 * (rng.standard_normal(64) + 1j * rng.standard_normal(64))
        r = build_g_matrix(ch) @ s + z
        for q in range(64):
            gq, s_idx, r_idx = build_subchannel(ch, q)
            assert np.max(np.abs(r[r_idx] - gq @ s[s_idx] - z[r_idx])) < 1e-12
        # through the detector: the equalized symbol deviates only by filtered noise
        qs = np.arange(8) * 8 + 3
        s_t, _, _ = sic_equalize_row(r, subchannels(ch, qs), qs, s, np.zeros(64), 0.1)
        for i, q in enumerate(qs):
            gq, _, r_idx = build_subchannel(ch, q)
            g0 = gq[:, ch.l_max]
            v = np.zeros(gq.shape[1])
            v[ch.l_max] = 1.0
            w = np.linalg.solve(gq @ np.diag(v) @ gq.conj().T + 0.1 * np.eye(gq.shape[0]), g0)
            assert s_t[i] - s[q] == pytest.approx(np.vdot(w, z[r_idx]) / np.vdot(w, g0), abs=1e-12)

    def test_bias_in_unit_interval(self, rng):
        ch = _channel(rng, 16, 8, 0.05)
        r = rng.standard_normal(128) + 1j * rng.standard_normal(128)
        err = rng.uniform(0.0, 1.0, 128)
        qs = np.arange(128)
        _, mu, var = sic_equalize_row(r, subchannels(ch, qs), qs, np.zeros(128, complex), err, 0.05)
        assert np.all(mu > 0) and np.all(mu <= 1)
        assert np.all(var >= 0)

    def test_zero_prior_row_is_windowed_mmse(self, rng):
        ch = _channel(rng, 8, 8, 0.2)
        st = SicMmseState.initial(64)
        r = rng.standard_normal(64) + 1j * rng.standard_normal(64)
        qs = np.arange(8) * 8
        s_t, _, _ = sic_equalize_row(r, subchannels(ch, qs), qs, st.s_hat, st.err_vars, 0.2)
        for i, q in enumerate(qs):
            gq, _, r_idx = build_subchannel(ch, q)
            g0 = gq[:, ch.l_max]
            w = np.linalg.solve(gq @ gq.conj().T + 0.2 * np.eye(gq.shape[0]), g0)
            assert s_t[i] == pytest.approx(np.vdot(w, r[r_idx]) / np.vdot(w, g0), abs=1e-12)

    def test_single_tap_matches_mmse(self, rng):
        modem = HmimModem.build(8, 8, 4)
        for _ in range(10):
            ch = _channel(rng, 8, 8, 0.3, taps=1)
            _, _, r = _transmit(modem, ch, rng)
            sic = detect_sicmmse(r, ch, modem)
            assert sic.iterations_run == 1
            assert np.array_equal(sic.bits, detect_mmse_blockwise(r, ch, modem).bits)

    def test_identity_noiseless(self, rng):
        modem = HmimModem.build(8, 8, 4, 4, 4, 1.1)
        ch = ChannelRealization([ChannelPath(1.0, 0, 0)], 8, 8, 0.0)
        bits, _, r = _transmit(modem, ch, rng)
        res = detect_sicmmse(r, ch, modem)
        assert res.iterations_run == 1 and res.diagnostics["jitter"]
        assert np.array_equal(res.bits, bits)
        assert iterate_diagnostics(res)[-1] < 1e-9

    def test_requires_hmim(self, rng):
        modem = ImModem(8, 8, ImBaselineConfig(4, 3, 4))
        with pytest.raises(TypeError):
            detect_sicmmse(np.zeros(64), _channel(rng, 8, 8, 0.1), modem)

    def test_beats_mmse_at_14db(self, rng):
        modem = HmimModem.build(32, 32, 2, 2, 1, 1.0)
        nv = 1 / (2 * 10**1.4)
        err_mmse = err_sic = 0
        trends = []
        for _ in range(12):
            ch = _channel(rng, 32, 32, nv)
            bits, _, r = _transmit(modem, ch, rng)
            err_mmse += np.sum(detect_mmse_blockwise(r, ch, modem).bits != bits)
            res = detect_sicmmse(r, ch, modem)
            err_sic += np.sum(res.bits != bits)
            hist = [1.0] + iterate_diagnostics(res)
            trends.append(hist[-1] <= hist[0] and np.mean(np.diff(hist) <= 1e-9) >= 0.5)
        assert err_sic < err_mmse
        assert np.mean(trends) >= 0.9

    def test_state_resumes(self, rng):
        modem = HmimModem.build(8, 8, 4)
        ch = _channel(rng, 8, 8, 0.05)
        _, _, r = _transmit(modem, ch, rng)
        full = detect_sicmmse(r, ch, modem, n_ite=3, tol=0.0)
        st = SicMmseState.initial(64, n_ite=2)
        detect_sicmmse(r, ch, modem, n_ite=2, tol=0.0, state=st)
        st.n_ite = 3
        resumed = detect_sicmmse(r, ch, modem, n_ite=3, tol=0.0, state=st)
        assert np.array_equal(resumed.bits, full.bits)
        assert np.allclose(iterate_diagnostics(st), iterate_diagnostics(full), atol=1e-14)
