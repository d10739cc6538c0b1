"""On-grid doubly selective channels and their discrete ODDM operators.

Time-domain entries follow

    G[q, (q - l) mod MN] = sum_{k in K_l} h[l, k] exp(j 2 pi k (q - l) / MN)

with the unwrapped ``q - l`` in the phase, so CP samples see the Doppler
phase they would have had in time. DD-domain vectors are row-major:
entry ``(m, n)`` of a grid sits at ``m * N + n``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

__all__ = [
    "SPEED_OF_LIGHT",
    "EVA_DELAYS_NS",
    "EVA_POWERS_DB",
    "ChannelPath",
    "ChannelRealization",
    "max_doppler_hz",
    "gen_channel",
    "tap_table",
    "build_g_matrix",
    "build_subchannel",
    "subchannels",
    "apply_channel",
    "apply_channel_dd",
    "build_phi",
    "awgn",
    "dump_channel",
    "load_channel",
]

SPEED_OF_LIGHT = 3e8  # rounded, as is usual in link-level setups

# 3GPP TS 36.104 Extended Vehicular A.
EVA_DELAYS_NS = (0, 30, 150, 310, 370, 710, 1090, 1730, 2510)
EVA_POWERS_DB = (0.0, -1.5, -1.4, -3.6, -0.6, -9.1, -7.0, -12.0, -16.9)


@dataclass(frozen=True)
class ChannelPath:
    gain: complex
    delay_idx: int
    doppler_idx: int


@dataclass(frozen=True, eq=False)
class ChannelRealization:
    paths: tuple[ChannelPath, ...]
    m: int
    n: int
    noise_var: float = 0.0
    es: float = 1.0
    _taps: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "paths", tuple(self.paths))
        if not self.paths:
            raise ValueError("channel needs at least one path")
        if any(p.delay_idx < 0 or p.delay_idx >= self.m for p in self.paths):
            raise ValueError(f"path delays must lie in [0, M={self.m})")
        if self.noise_var < 0:
            raise ValueError("noise variance must be non-negative")

    @property
    def mn(self) -> int:
        return self.m * self.n

    @property
    def l_max(self) -> int:
        return max(p.delay_idx for p in self.paths)

    @property
    def delays(self) -> list[int]:
        return sorted({p.delay_idx for p in self.paths})

    @property
    def gains(self) -> np.ndarray:
        return np.array([p.gain for p in self.paths], dtype=complex)

    @property
    def geometry(self) -> list[tuple[int, int]]:
        return [(p.delay_idx, p.doppler_idx) for p in self.paths]

    @property
    def snr(self) -> float:
        return self.es / self.noise_var if self.noise_var > 0 else math.inf

    def with_noise(self, noise_var: float) -> "ChannelRealization":
        return ChannelRealization(self.paths, self.m, self.n, noise_var, self.es)

    def with_gains(self, gains) -> "ChannelRealization":
        paths = [ChannelPath(complex(g), p.delay_idx, p.doppler_idx) for g, p in zip(gains, self.paths)]
        return ChannelRealization(paths, self.m, self.n, self.noise_var, self.es)

    @property
    def taps(self) -> np.ndarray:
        if self._taps is None:
            object.__setattr__(self, "_taps", tap_table(self))
        return self._taps


def max_doppler_hz(ue_speed: float, carrier: float) -> float:
    return ue_speed / SPEED_OF_LIGHT * carrier


def _profile(profile: str, n_taps: int, m: int, subcarrier_spacing: float):
    if profile == "uniform":
        if not 1 <= n_taps <= m:
            raise ValueError(f"uniform profile needs 1 <= taps <= M, got {n_taps}")
        return np.arange(n_taps), np.full(n_taps, 1.0 / n_taps)
    if profile == "eva":
        resolution = 1.0 / (subcarrier_spacing * m)
        raw = np.rint(np.array(EVA_DELAYS_NS) * 1e-9 / resolution).astype(int)
        if raw.max() >= m:
            raise ValueError(
                f"EVA delay spread {EVA_DELAYS_NS[-1]} ns exceeds the frame's delay span "
                f"(M={m}, T/M={resolution * 1e9:.1f} ns)"
            )
        power = 10 ** (np.array(EVA_POWERS_DB) / 10)
        delays = np.unique(raw)
        merged = np.array([power[raw == d].sum() for d in delays])
        return delays, merged / merged.sum()
    raise ValueError(f"unknown delay profile {profile!r}")


def gen_channel(
    profile: str,
    ue_speed: float,
    carrier: float,
    subcarrier_spacing: float,
    m: int,
    n: int,
    rng: np.random.Generator,
    *,
    n_taps: int = 5,
    noise_var: float = 0.0,
) -> ChannelRealization:
    """Draw one realization: Rayleigh gains, Jakes Dopplers rounded to the grid.

    ``profile`` is ``"uniform"`` (taps at ``l = 0..n_taps-1``, equal power) or
    ``"eva"`` (EVA delays rounded to multiples of ``T/M``, colliding taps merged).
    ``ue_speed`` is in m/s.
    """
    delays, power = _profile(profile, n_taps, m, subcarrier_spacing)
    p = delays.size
    gains = np.sqrt(power / 2) * (rng.standard_normal(p) + 1j * rng.standard_normal(p))
    theta = rng.uniform(0.0, 2 * np.pi, p)
    nu = max_doppler_hz(ue_speed, carrier) * np.cos(theta)
    k = np.rint(nu * n / subcarrier_spacing).astype(int)
    paths = [ChannelPath(complex(g), int(l), int(kk)) for g, l, kk in zip(gains, delays, k)]
    return ChannelRealization(paths, m, n, noise_var)


def tap_table(ch: ChannelRealization) -> np.ndarray:
    """``taps[d, q]`` = time-varying gain of delay ``d`` at output sample ``q``."""
    q = np.arange(ch.mn)
    taps = np.zeros((ch.l_max + 1, ch.mn), dtype=complex)
    for p in ch.paths:
        taps[p.delay_idx] += p.gain * np.exp(2j * np.pi * p.doppler_idx * (q - p.delay_idx) / ch.mn)
    return taps


def build_g_matrix(ch: ChannelRealization, dense: bool = False):
    """Time-domain channel matrix (sparse CSR, or dense ndarray)."""
    mn = ch.mn
    q = np.arange(mn)
    delays = ch.delays
    rows = np.tile(q, len(delays))
    cols = np.concatenate([(q - d) % mn for d in delays])
    vals = np.concatenate([ch.taps[d] for d in delays])
    g = sp.csr_matrix((vals, (rows, cols)), shape=(mn, mn))
    return g.toarray() if dense else g


def _sub_entries(ch: ChannelRealization, q):
    lm = ch.l_max
    q = np.atleast_1d(q)
    l = np.arange(lm + 1)[:, None]
    dl = np.arange(-lm, lm + 1)[None, :]
    d = l - dl
    valid = (d >= 0) & (d <= lm)
    t = (q[:, None, None] + l[None]) % ch.mn
    vals = ch.taps[np.clip(d, 0, lm)[None], t]
    return np.where(valid[None], vals, 0)


def build_subchannel(ch: ChannelRealization, q: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Sub-channel ``G_q`` for sample ``q`` and the index maps of ``s_q`` and ``r_q``.

    Column ``dl + l_max`` is the truncated spreading vector of
    ``s[(q + dl) mod MN]``; the middle column belongs to ``s[q]`` itself.
    """
    if not 0 <= q < ch.mn:
        raise ValueError(f"q={q} outside [0, {ch.mn})")
    lm = ch.l_max
    gq = _sub_entries(ch, q)[0]
    s_idx = (q + np.arange(-lm, lm + 1)) % ch.mn
    r_idx = (q + np.arange(lm + 1)) % ch.mn
    return gq, s_idx, r_idx


def subchannels(ch: ChannelRealization, qs) -> np.ndarray:
    """Batched ``G_q`` for every index in ``qs``: shape ``(len(qs), L+1, 2L+1)``."""
    return _sub_entries(ch, np.asarray(qs))


def awgn(shape, noise_var: float, rng: np.random.Generator) -> np.ndarray:
    """Circular complex Gaussian samples with variance ``noise_var``."""
    scale = math.sqrt(noise_var / 2)
    return scale * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))


def apply_channel(ch: ChannelRealization, s: np.ndarray, rng: np.random.Generator | None = None) -> np.ndarray:
    """``r = G s + z`` in O(MN |L|); noise is skipped when ``rng`` is None or variance is 0."""
    s = np.asarray(s)
    if s.size != ch.mn:
        raise ValueError(f"sequence length {s.size} != MN = {ch.mn}")
    r = np.zeros(ch.mn, dtype=complex)
    for d in ch.delays:
        r += ch.taps[d] * np.roll(s, d)
    if rng is not None and ch.noise_var > 0:
        r += awgn(ch.mn, ch.noise_var, rng)
    return r


def _path_terms(m_delay: int, n_doppler: int, l: int, k: int):
    m = np.arange(m_delay)[:, None]
    n = np.arange(n_doppler)[None, :]
    shifted_n = (n - k) % n_doppler
    alpha = np.where(m >= l, 1.0 + 0j, np.exp(-2j * np.pi * shifted_n / n_doppler))
    phase = np.exp(2j * np.pi * (m - l) * k / (m_delay * n_doppler))
    src_m = np.broadcast_to((m - l) % m_delay, (m_delay, n_doppler))
    src_n = np.broadcast_to(shifted_n, (m_delay, n_doppler))
    return alpha * phase, src_m, src_n


def build_phi(x: np.ndarray, geometry) -> np.ndarray:
    """``Phi(X)`` with ``vec(Y) = Phi(X) h``; rows ``m*N + n``, one column per path.

    ``geometry`` is a ChannelRealization or a sequence of ``(l, k)`` pairs.
    """
    x = np.asarray(x)
    if isinstance(geometry, ChannelRealization):
        geometry = geometry.geometry
    m_delay, n_doppler = x.shape[-2:]
    cols = []
    for l, k in geometry:
        coef, src_m, src_n = _path_terms(m_delay, n_doppler, l, k)
        cols.append((coef * x[..., src_m, src_n]).reshape(x.shape[:-2] + (-1,)))
    return np.stack(cols, axis=-1)


def apply_channel_dd(ch: ChannelRealization, x: np.ndarray) -> np.ndarray:
    """Noiseless DD-domain output, evaluated path by path (CP phase included)."""
    x = np.asarray(x)
    y = np.zeros(x.shape, dtype=complex)
    for p in ch.paths:
        coef, src_m, src_n = _path_terms(ch.m, ch.n, p.delay_idx, p.doppler_idx)
        y += p.gain * coef * x[..., src_m, src_n]
    return y


def dump_channel(ch: ChannelRealization, path=None) -> str:
    """Text dump: header ``m n noise_var``, then ``l k re(h) im(h)`` per path."""
    lines = [f"# m={ch.m} n={ch.n} noise_var={ch.noise_var!r}"]
    lines += [f"{p.delay_idx} {p.doppler_idx} {p.gain.real!r} {p.gain.imag!r}" for p in ch.paths]
    text = "\n".join(lines) + "\n"
    if path is not None:
        Path(path).write_text(text)
    return text


def load_channel(text: str) -> ChannelRealization:
    header, *rows = [ln for ln in text.strip().splitlines() if ln.strip()]
    meta = dict(tok.split("=") for tok in header.lstrip("#").split())
    paths = []
    for row in rows:
        l, k, re, im = row.split()
        paths.append(ChannelPath(complex(float(re), float(im)), int(l), int(k)))
    return ChannelRealization(paths, int(meta["m"]), int(meta["n"]), float(meta["noise_var"]))
