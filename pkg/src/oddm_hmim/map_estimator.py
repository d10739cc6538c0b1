"""Block-wise MAP estimation of HMIM blocks under Gaussian noise.

The factor graph of a block is a star: one mode variable joined to ``N_b``
symbol variables, each with its own observation. Sum-product on that tree is
exact, so the per-symbol and per-mode marginals below are the true posteriors
of the Gaussian model, computed in ``O(N_b Q1 Q2)``.

Every function accepts arbitrary leading batch axes; the block axis is the
last axis of the observation.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .hqc import Constellation

__all__ = [
    "BlockObservation",
    "BlockPosterior",
    "symbol_likelihoods",
    "mode_messages",
    "extrinsic_messages",
    "posterior",
    "soft_statistics",
]


@dataclass(frozen=True, eq=False)
class BlockObservation:
    x_tilde: np.ndarray  # (..., N_b)
    noise_vars: np.ndarray  # broadcastable to x_tilde
    constellation: Constellation
    prior_mode: np.ndarray | None = None  # (Q2,) or (..., Q2)

    def __post_init__(self):
        x = np.asarray(self.x_tilde, dtype=complex)
        v = np.broadcast_to(np.asarray(self.noise_vars, dtype=float), x.shape)
        if np.any(v <= 0):
            raise ValueError("noise variances must be positive")
        object.__setattr__(self, "x_tilde", x)
        object.__setattr__(self, "noise_vars", v)
        if self.prior_mode is not None:
            p = np.asarray(self.prior_mode, dtype=float)
            if p.shape[-1] != self.constellation.q2_order or np.any(p < 0):
                raise ValueError("mode prior must be a non-negative vector over Q2 modes")
            if not np.allclose(p.sum(axis=-1), 1.0, atol=1e-12):
                raise ValueError("mode prior must sum to 1")
            object.__setattr__(self, "prior_mode", p)


@dataclass(frozen=True, eq=False)
class BlockPosterior:
    symbol_pmfs: np.ndarray  # (..., N_b, Q1, Q2)
    mode_pmf: np.ndarray  # (..., Q2)


def _normalize_log(logp: np.ndarray, axes) -> np.ndarray:
    """Normalize log-weights over ``axes`` into probabilities (all -inf -> uniform)."""
    peak = np.max(logp, axis=axes, keepdims=True)
    dead = ~np.isfinite(peak)
    logp = np.where(dead, 0.0, logp - np.where(dead, 0.0, peak))
    p = np.exp(logp)
    return p / p.sum(axis=axes, keepdims=True)


def _log_likelihoods(obs: BlockObservation, counter: Counter | None = None) -> np.ndarray:
    pts = obs.constellation.points
    d = np.abs(obs.x_tilde[..., None, None] - pts) ** 2
    if counter is not None:
        counter["likelihood"] += d.size
    logl = -d / obs.noise_vars[..., None, None]
    return logl - logsumexp(logl, axis=(-2, -1), keepdims=True)


def symbol_likelihoods(obs: BlockObservation, counter: Counter | None = None) -> np.ndarray:
    """Normalized symbol likelihoods over the HQC, shape ``(..., N_b, Q1, Q2)``."""
    return np.exp(_log_likelihoods(obs, counter))


def mode_messages(xi: np.ndarray) -> np.ndarray:
    """Mode likelihood each symbol sends to the mode node: sum over ``q1``."""
    return np.asarray(xi).sum(axis=-2)


def _log_prior(prior_mode, q2: int) -> np.ndarray:
    if prior_mode is None:
        return np.zeros(q2)
    with np.errstate(divide="ignore"):
        return np.log(prior_mode)


def _leave_one_out(log_u: np.ndarray) -> np.ndarray:
    """``sum_{n' != n} log_u[n']`` along axis -2, exact with ``-inf`` factors."""
    neg = np.isneginf(log_u)
    zeros = neg.sum(axis=-2, keepdims=True)
    finite_sum = np.where(neg, 0.0, log_u).sum(axis=-2, keepdims=True)
    own = np.where(neg, 0.0, log_u)
    out = finite_sum - own
    # One zero factor: only the entry holding it sees a finite product.
    blocked = (zeros >= 2) | ((zeros == 1) & ~neg)
    return np.where(blocked, -np.inf, out)


def extrinsic_messages(u: np.ndarray, prior_mode=None) -> np.ndarray:
    """Message from the mode node back to each symbol, shape ``(..., N_b, Q2)``."""
    u = np.asarray(u, dtype=float)
    with np.errstate(divide="ignore"):
        log_u = np.log(u)
    log_v = _leave_one_out(log_u) + _log_prior(prior_mode, u.shape[-1])[..., None, :]
    return _normalize_log(log_v, -1)


def posterior(obs: BlockObservation, counter: Counter | None = None) -> BlockPosterior:
    """Exact symbol and mode marginals of one or many HMIM blocks.

    ``counter["likelihood"]`` (if given) is incremented by the number of
    point-distance evaluations, ``N_b * Q1 * Q2`` per block.
    """
    log_xi = _log_likelihoods(obs, counter)
    log_u = logsumexp(log_xi, axis=-2)  # (..., N_b, Q2)
    log_prior = _log_prior(obs.prior_mode, obs.constellation.q2_order)
    log_v = _leave_one_out(log_u) + log_prior[..., None, :]
    sym = _normalize_log(log_xi + log_v[..., None, :], (-2, -1))
    mode = _normalize_log(log_u.sum(axis=-2) + log_prior, -1)
    return BlockPosterior(sym, mode)


def soft_statistics(post: BlockPosterior, c: Constellation) -> tuple[np.ndarray, np.ndarray]:
    """A posteriori mean and error variance of every symbol."""
    p = post.symbol_pmfs
    mean = np.einsum("...ab,ab->...", p, c.points)
    var = np.einsum("...ab,...ab->...", p, np.abs(c.points - mean[..., None, None]) ** 2)
    return mean, np.maximum(var, 0.0)
