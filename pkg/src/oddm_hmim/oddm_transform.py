"""Delay-Doppler <-> time-domain conversion for ODDM at symbol rate.

Each delay row of the ``M x N`` DD grid goes through a unitary N-point IDFT,
giving the delay-time grid ``X_dt``. The time sequence is its column-major
vectorization::

    s[n * M + m] = X_dt[m, n]

i.e. the delay index runs fastest inside each of the N staggered
multicarrier symbols. This is the ordering under which the time-domain
channel matrix and the DD-domain relation (with its CP phase term) agree.
"""

from __future__ import annotations

import numpy as np

__all__ = ["dd_to_time", "time_to_dd", "add_cp", "remove_cp", "time_index"]


def time_index(m, n, m_delay: int):
    """Time-sample index of DT grid entry ``(m, n)``."""
    return np.asarray(n) * m_delay + np.asarray(m)


def dd_to_time(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 2:
        raise ValueError(f"expected an M x N grid, got shape {x.shape}")
    x_dt = np.fft.ifft(x, axis=1, norm="ortho")
    return x_dt.ravel(order="F")


def time_to_dd(r: np.ndarray, m_delay: int, n_doppler: int) -> np.ndarray:
    r = np.asarray(r)
    if r.size != m_delay * n_doppler:
        raise ValueError(f"sequence length {r.size} != M*N = {m_delay * n_doppler}")
    x_dt = r.reshape(m_delay, n_doppler, order="F")
    return np.fft.fft(x_dt, axis=1, norm="ortho")


def add_cp(s: np.ndarray, l_max: int) -> np.ndarray:
    """Prepend the last ``l_max`` samples (frame-wise cyclic prefix)."""
    s = np.asarray(s)
    if not 0 <= l_max < s.size:
        raise ValueError(f"CP length {l_max} must be in [0, {s.size})")
    return np.concatenate([s[s.size - l_max:], s])


def remove_cp(r: np.ndarray, l_max: int) -> np.ndarray:
    r = np.asarray(r)
    if not 0 <= l_max < r.size - l_max:
        raise ValueError(f"CP length {l_max} too long for {r.size} samples")
    return r[l_max:]
