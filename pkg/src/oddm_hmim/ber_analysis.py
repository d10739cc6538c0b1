"""ML error-rate prediction for small ODDM-HMIM frames.

Every ordered pair of valid frames contributes its approximate unconditional
pairwise error probability (uniform path powers ``1/P``) weighted by the
number of differing bits. Only feasible for tiny frames (``M = N = 2``).
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import erfc

from .dd_channel import build_phi
from .hmim_codec import FrameConfig, HmimModem
from .hqc import ConstellationInfeasibleError, build_hqc, int_to_bits

__all__ = [
    "PairwiseTerm",
    "q_function",
    "gamma_matrix",
    "pairwise_term",
    "conditional_pep",
    "unconditional_pep",
    "enumerate_frames",
    "average_ber",
    "average_ber_ensemble",
    "search_rho",
    "write_analysis_csv",
    "PAIR_CAP",
]

PAIR_CAP = 10_000_000
RANK_RTOL = 1e-9


@dataclass(frozen=True)
class PairwiseTerm:
    gamma_matrix: np.ndarray
    eigenvalues: np.ndarray
    rank: int
    bit_errors: int


def q_function(x):
    """Gaussian tail probability."""
    return 0.5 * erfc(np.asarray(x) / math.sqrt(2))


def gamma_matrix(x, x_hat, geometry) -> np.ndarray:
    d = build_phi(x_hat, geometry) - build_phi(x, geometry)
    return d.conj().T @ d


def _rank_and_product(eigs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Rank (eigs > 1e-9 * max) and product of the retained eigenvalues, batched."""
    lam_max = eigs.max(axis=-1, keepdims=True)
    keep = eigs > RANK_RTOL * lam_max
    rank = keep.sum(axis=-1)
    prod = np.where(keep, eigs, 1.0).prod(axis=-1)
    return rank, prod


def pairwise_term(x, x_hat, geometry, bits=None, bits_hat=None) -> PairwiseTerm:
    g = gamma_matrix(x, x_hat, geometry)
    eigs = np.linalg.eigvalsh(g)
    rank, _ = _rank_and_product(eigs[None])
    errors = int(np.sum(np.asarray(bits) != np.asarray(bits_hat))) if bits is not None else 0
    return PairwiseTerm(g, eigs, int(rank[0]), errors)


def conditional_pep(x, x_hat, h, gamma: float, geometry) -> float:
    """Pairwise error probability for a known gain vector ``h``."""
    d = (build_phi(x_hat, geometry) - build_phi(x, geometry)) @ np.asarray(h)
    return float(q_function(math.sqrt(gamma / 2 * float(np.vdot(d, d).real))))


def _upep(rank, prod, n_paths: int, gamma: float):
    rank = np.asarray(rank, dtype=float)
    return 1.0 / (12 * (gamma / (4 * n_paths)) ** rank * prod) + 1.0 / (4 * (gamma / (3 * n_paths)) ** rank * prod)


def unconditional_pep(x, x_hat, n_paths: int, gamma: float, geometry=None, eigenvalues=None) -> float:
    """High-SNR approximation of the PEP averaged over Rayleigh gains of power ``1/P``.

    Pass either the frame pair with its path ``geometry`` or precomputed
    ``eigenvalues`` of the pair's Gram matrix.
    """
    if eigenvalues is None:
        eigenvalues = np.linalg.eigvalsh(gamma_matrix(x, x_hat, geometry))
    rank, prod = _rank_and_product(np.asarray(eigenvalues, dtype=float)[None])
    if rank[0] == 0:
        raise ValueError("identical frames: the pairwise term is undefined")
    return float(_upep(rank, prod, n_paths, gamma)[0])


def enumerate_frames(cfg: FrameConfig) -> tuple[np.ndarray, np.ndarray]:
    """Every valid frame ``(V, M, N)`` with its bits ``(V, B)``, in bit-value order."""
    modem = HmimModem(cfg)
    total_bits = cfg.bits_per_frame
    v = 1 << total_bits
    if v * v > PAIR_CAP:
        raise ValueError(f"{v} frames give {v * (v - 1)} pairs, above the cap of {PAIR_CAP}")
    bits = int_to_bits(np.arange(v), total_bits)
    frames = np.stack([modem.modulate(b) for b in bits])
    return frames, bits


def _pair_spectra(frames: np.ndarray, geometry, rows_per_chunk: int = 64) -> np.ndarray:
    """Eigenvalues of every pair's Gram matrix, ``[i, j]`` for ``X_hat = frames[j]``."""
    phi = build_phi(frames, geometry)  # (V, MN, P)
    v, p = phi.shape[0], phi.shape[-1]
    out = np.empty((v, v, p))
    for i0 in range(0, v, rows_per_chunk):
        diff = phi[None, :] - phi[i0:i0 + rows_per_chunk, None]
        gram = np.einsum("ijkp,ijkq->ijpq", diff.conj(), diff)
        out[i0:i0 + rows_per_chunk] = np.linalg.eigvalsh(gram)
    return out


def average_ber(cfg: FrameConfig, n_paths: int, geometry, gamma) -> np.ndarray | float:
    """Union-style BER estimate for one path geometry; ``gamma`` may be an array."""
    if len(geometry) != n_paths:
        raise ValueError("geometry must list one (l, k) pair per path")
    frames, bits = enumerate_frames(cfg)
    v = frames.shape[0]
    eigs = _pair_spectra(frames, geometry)
    rank, prod = _rank_and_product(eigs)
    errors = (bits[:, None, :] != bits[None, :, :]).sum(axis=-1)
    off = ~np.eye(v, dtype=bool)
    if np.any(rank[off] == 0):
        raise ValueError("two distinct frames are indistinguishable under this geometry")
    gammas = np.atleast_1d(np.asarray(gamma, dtype=float))
    out = np.array([
        float(np.sum(_upep(rank[off], prod[off], n_paths, g) * errors[off])) / (cfg.bits_per_frame * v)
        for g in gammas
    ])
    return out if np.ndim(gamma) else float(out[0])


def average_ber_ensemble(cfg: FrameConfig, geometries, gamma) -> np.ndarray | float:
    """Mean of :func:`average_ber` over a list of path geometries."""
    geos = [tuple(map(tuple, g)) for g in geometries]
    uniq = {}
    for g in geos:
        uniq[g] = uniq.get(g, 0) + 1
    total = sum(
        count * np.asarray(average_ber(cfg, len(g), list(g), gamma)) for g, count in uniq.items()
    )
    out = total / len(geos)
    return out if np.ndim(gamma) else float(out)


def search_rho(
    m: int,
    n: int,
    n_block: int,
    q1: int,
    q2: int,
    geometries,
    gamma_ref: float,
    rho_grid,
) -> float:
    """Grid point minimizing the predicted BER at ``gamma_ref`` (ties: smaller rho)."""
    best_rho, best_val = None, math.inf
    for rho in sorted(float(x) for x in rho_grid):
        try:
            c = build_hqc(q1, q2, rho)
        except ConstellationInfeasibleError as exc:
            warnings.warn(f"skipping rho={rho}: {exc}")
            continue
        val = average_ber_ensemble(FrameConfig(m, n, n_block, c), geometries, gamma_ref)
        if val < best_val:
            best_rho, best_val = rho, val
    if best_rho is None:
        raise ConstellationInfeasibleError("no feasible rho on the grid")
    return best_rho


def write_analysis_csv(path, gamma_db, values) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["gamma_db", "analytical_ber"])
        for g, v in zip(gamma_db, values):
            w.writerow([f"{g:g}", f"{v:.6e}"])
