"""Frame detectors: exhaustive ML, linear MMSE + block ML, soft SIC-MMSE."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, lapack

from .dd_channel import ChannelRealization, apply_channel_dd, build_g_matrix, subchannels
from .hmim_codec import HmimModem, demap_block_hard
from .hqc import int_to_bits
from .map_estimator import BlockObservation, posterior, soft_statistics
from .oddm_transform import time_to_dd

__all__ = [
    "DetectionResult",
    "SicMmseState",
    "ML_HYPOTHESIS_CAP",
    "dd_operator",
    "detect_ml",
    "mmse_equalize",
    "detect_mmse_blockwise",
    "post_mmse_variance",
    "sic_equalize_row",
    "detect_sicmmse",
    "iterate_diagnostics",
]

ML_HYPOTHESIS_CAP = 1 << 20


@dataclass
class DetectionResult:
    bits: np.ndarray
    symbol_pmfs: np.ndarray | None = None
    mode_pmfs: np.ndarray | None = None
    iterations_run: int = 1
    diagnostics: dict = field(default_factory=dict)


@dataclass
class SicMmseState:
    s_hat: np.ndarray
    err_vars: np.ndarray
    iteration: int = 0
    n_ite: int = 10
    history: list = field(default_factory=list)

    @classmethod
    def initial(cls, mn: int, es: float = 1.0, n_ite: int = 10) -> "SicMmseState":
        return cls(np.zeros(mn, dtype=complex), np.full(mn, float(es)), 0, n_ite)


def dd_operator(ch: ChannelRealization) -> np.ndarray:
    """Dense ``H`` with ``Y.ravel() == H @ X.ravel()`` (noiseless)."""
    mn = ch.mn
    basis = np.eye(mn, dtype=complex).reshape(mn, ch.m, ch.n)
    return apply_channel_dd(ch, basis).reshape(mn, mn).T


def _frame_hypotheses(modem):
    """Every valid frame as block-index digits and flattened symbols, cached on the modem."""
    cached = getattr(modem, "_ml_hypotheses", None)
    if cached is not None:
        return cached
    blk_syms, _ = modem.block_hypotheses()
    n_blocks = modem.bits_per_frame // modem.bits_per_block
    total = blk_syms.shape[0] ** n_blocks
    if total > ML_HYPOTHESIS_CAP:
        raise ValueError(
            f"ML needs {total} frame hypotheses (cap {ML_HYPOTHESIS_CAP}); "
            "use a smaller frame or the mmse/sicmmse detectors"
        )
    digits = np.stack(np.unravel_index(np.arange(total), (blk_syms.shape[0],) * n_blocks), axis=-1)
    frames = blk_syms[digits].reshape(total, -1)
    modem._ml_hypotheses = (digits, frames)
    return digits, frames


def detect_ml(y: np.ndarray, ch: ChannelRealization, modem) -> DetectionResult:
    """Exhaustive ML over every valid frame.

    Frames are enumerated in order of their bit string read as an integer;
    ties resolve to the first one.
    """
    digits, frames = _frame_hypotheses(modem)
    h = dd_operator(ch)
    resid = np.asarray(y).ravel()[None, :] - frames @ h.T
    cost = np.einsum("ij,ij->i", resid.real, resid.real) + np.einsum("ij,ij->i", resid.imag, resid.imag)
    best = int(np.argmin(cost))
    bits = int_to_bits(digits[best], modem.bits_per_block).ravel()
    return DetectionResult(bits, diagnostics={"hypotheses": frames.shape[0], "metric": float(cost[best])})


def post_mmse_variance(mu, es: float = 1.0) -> np.ndarray:
    """Error variance of the unbiased MMSE estimate given its bias ``mu``."""
    mu = np.asarray(mu, dtype=float)
    return es * (1.0 - mu) / mu


def _variance_floor(es: float) -> float:
    return 1e-12 * es


def mmse_equalize(r: np.ndarray, ch: ChannelRealization):
    """Unbiased frame-wide linear MMSE estimate of ``s`` from ``r``.

    Solves ``(G^H G + (sigma^2/E_s) I) s = G^H r`` through a Cholesky factor;
    the biases ``mu = diag(W G) = 1 - (sigma^2/E_s) diag(A^-1)`` come from the
    inverse triangular factor. Returns ``(s_tilde, mu, var)`` per time sample.
    """
    es, nv = ch.es, ch.noise_var
    g = build_g_matrix(ch)
    reg = nv / es if nv > 0 else 1e-12
    gh = g.conj().T
    a = (gh @ g).toarray()
    a[np.diag_indices_from(a)] += reg
    chol, info = lapack.zpotrf(a, lower=1)
    if info != 0:
        raise np.linalg.LinAlgError(f"MMSE normal matrix is not positive definite (info={info})")
    s_raw = cho_solve((chol, True), gh @ np.asarray(r, dtype=complex))
    l_inv, info = lapack.ztrtri(chol, lower=1)
    if info != 0:
        raise np.linalg.LinAlgError(f"singular Cholesky factor (info={info})")
    diag_inv = np.einsum("ij,ij->j", np.tril(l_inv).conj(), np.tril(l_inv)).real
    mu = np.clip(1.0 - reg * diag_inv, 1e-300, 1.0)
    return s_raw / mu, mu, post_mmse_variance(mu, es)


def _row_average(var_t: np.ndarray, m: int, n: int) -> np.ndarray:
    rows = var_t.reshape(m, n, order="F").mean(axis=1)
    return np.repeat(rows[:, None], n, axis=1)


def detect_mmse_blockwise(r: np.ndarray, ch: ChannelRealization, modem) -> DetectionResult:
    """Linear MMSE in the time domain, then block-wise ML in the DD domain.

    Each DD symbol is weighted by the average post-MMSE variance of its
    delay row.
    """
    s_t, mu, var_t = mmse_equalize(r, ch)
    x_tilde = time_to_dd(s_t, ch.m, ch.n)
    var_dd = np.maximum(_row_average(var_t, ch.m, ch.n), _variance_floor(ch.es))
    bits = modem.detect_blocks(x_tilde, var_dd)
    return DetectionResult(bits, diagnostics={"mean_mu": float(mu.mean()), "x_tilde": x_tilde, "var": var_dd})


def sic_equalize_row(
    r: np.ndarray,
    g_row: np.ndarray,
    qs: np.ndarray,
    s_hat: np.ndarray,
    err_vars: np.ndarray,
    noise_var: float,
    es: float = 1.0,
):
    """Cancel interference and MMSE-filter the samples ``qs`` of one delay row.

    ``g_row[i]`` is the sub-channel of ``qs[i]``. The samples in one row never
    interfere with each other, so the batch equals the sequential result.
    Returns ``(s_tilde, mu, var)``.
    """
    mn = r.size
    lm = g_row.shape[1] - 1
    s_idx = (qs[:, None] + np.arange(-lm, lm + 1)) % mn
    r_idx = (qs[:, None] + np.arange(lm + 1)) % mn
    g0 = g_row[:, :, lm]
    r_tilde = r[r_idx] - np.einsum("nij,nj->ni", g_row, s_hat[s_idx]) + g0 * s_hat[qs][:, None]
    v = err_vars[s_idx].copy()
    v[:, lm] = es
    cov = np.einsum("nij,nj,nkj->nik", g_row, v, g_row.conj())
    jitter = noise_var if noise_var > 0 else 1e-12 * es
    cov[:, np.arange(lm + 1), np.arange(lm + 1)] += jitter
    x = np.linalg.solve(cov, g0[..., None])[..., 0]
    gain = np.einsum("ni,ni->n", g0.conj(), x).real
    mu = np.clip(es * gain, 1e-300, 1.0)
    s_tilde = np.einsum("ni,ni->n", x.conj(), r_tilde) / gain
    return s_tilde, mu, post_mmse_variance(mu, es)


def detect_sicmmse(
    r: np.ndarray,
    ch: ChannelRealization,
    modem: HmimModem,
    n_ite: int = 10,
    tol: float = 1e-6,
    state: SicMmseState | None = None,
) -> DetectionResult:
    """Iterative soft SIC-MMSE with block MAP feedback.

    Delay rows are processed in order ``m = 0..M-1``. For each row the N time
    samples ``q = n*M + m`` are equalized against the current priors, moved to
    the DD domain, passed through the block MAP estimator, and their a
    posteriori means (back in time domain) and row-averaged variances replace
    the priors before the next row. Stops after ``n_ite`` passes or once the
    mean error variance changes by less than ``tol``.
    """
    if not isinstance(modem, HmimModem):
        raise TypeError("SIC-MMSE needs an HMIM modem (it relies on the block MAP estimator)")
    m_delay, n_dop, es, nv = ch.m, ch.n, ch.es, ch.noise_var
    c = modem.c
    nb = modem.n_block
    r = np.asarray(r, dtype=complex)
    st = state if state is not None else SicMmseState.initial(ch.mn, es, n_ite)
    g_all = subchannels(ch, np.arange(ch.mn))
    sym_pmfs = np.empty((m_delay, n_dop // nb, nb, c.q1_order, c.q2_order))
    mode_pmfs = np.empty((m_delay, n_dop // nb, c.q2_order))
    n_range = np.arange(n_dop)
    prev = float(np.mean(st.err_vars))
    seconds = []
    while st.iteration < n_ite:
        t0 = time.perf_counter()
        for m in range(m_delay):
            qs = n_range * m_delay + m
            s_t, _, var_t = sic_equalize_row(r, g_all[qs], qs, st.s_hat, st.err_vars, nv, es)
            x_tilde = np.fft.fft(s_t, norm="ortho").reshape(-1, nb)
            var_dd = max(float(var_t.mean()), _variance_floor(es))
            post = posterior(BlockObservation(x_tilde, var_dd, c))
            mean, var = soft_statistics(post, c)
            sym_pmfs[m] = post.symbol_pmfs
            mode_pmfs[m] = post.mode_pmf
            st.s_hat[qs] = np.fft.ifft(mean.ravel(), norm="ortho")
            st.err_vars[qs] = float(var.mean())
        st.iteration += 1
        seconds.append(time.perf_counter() - t0)
        cur = float(np.mean(st.err_vars))
        st.history.append(cur)
        # without inter-symbol interference the priors never enter the filters
        if abs(prev - cur) < tol or ch.l_max == 0:
            break
        prev = cur
    bits = demap_block_hard(sym_pmfs, mode_pmfs, c).ravel()
    return DetectionResult(
        bits,
        symbol_pmfs=sym_pmfs,
        mode_pmfs=mode_pmfs,
        iterations_run=st.iteration,
        diagnostics={"mean_err_var": list(st.history), "iteration_seconds": seconds,
                     "jitter": nv <= 0},
    )


def iterate_diagnostics(state_or_result) -> list[float]:
    """Per-iteration mean a posteriori error variance."""
    if isinstance(state_or_result, SicMmseState):
        return list(state_or_result.history)
    return list(state_or_result.diagnostics["mean_err_var"])
