"""HMIM bit mapping, frame assembly and the conventional IM baseline.

Bit order inside a block group is fixed: the ``b2 = log2(Q2)`` mode bits come
first, then ``N_b`` chunks of ``log2(Q1)`` QAM bits, one per symbol in Doppler
order. Groups are laid out delay-major: group ``g`` sits at delay
``m = g // (N / N_b)`` and block ``beta = g % (N / N_b)``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from .hqc import Constellation, bits_to_int, build_hqc, int_to_bits, qam_lattice

__all__ = [
    "FrameConfig",
    "Frame",
    "split_bits",
    "map_block",
    "demap_block_hard",
    "assemble_frame",
    "disassemble_frame",
    "ImBaselineConfig",
    "map_im_baseline",
    "demap_im_baseline",
    "HmimModem",
    "ImModem",
    "write_golden",
    "read_golden",
]


@dataclass(frozen=True, eq=False)
class FrameConfig:
    m_delay: int
    n_doppler: int
    n_block: int
    constellation: Constellation

    def __post_init__(self):
        if min(self.m_delay, self.n_doppler, self.n_block) < 1:
            raise ValueError("M, N and N_b must all be >= 1")
        if self.n_doppler % self.n_block:
            raise ValueError(f"N={self.n_doppler} is not a multiple of N_b={self.n_block}")

    @property
    def b1(self) -> int:
        return self.n_block * self.constellation.bits_q1

    @property
    def b2(self) -> int:
        return self.constellation.bits_q2

    @property
    def bits_per_block(self) -> int:
        return self.b1 + self.b2

    @property
    def blocks_per_row(self) -> int:
        return self.n_doppler // self.n_block

    @property
    def n_blocks(self) -> int:
        return self.m_delay * self.blocks_per_row

    @property
    def bits_per_frame(self) -> int:
        return self.n_blocks * self.bits_per_block

    @property
    def se(self) -> float:
        return self.constellation.bits_q1 + self.constellation.bits_q2 / self.n_block


@dataclass(frozen=True, eq=False)
class Frame:
    symbols: np.ndarray  # (M, N) complex
    modes: np.ndarray  # (M, N / N_b) int
    q1: np.ndarray  # (M, N) base-point index per symbol


def split_bits(bits, cfg: FrameConfig) -> np.ndarray:
    """Split a frame's bits into ``(MN/N_b, B_b)`` groups."""
    bits = np.asarray(bits, dtype=np.uint8).ravel()
    if bits.size != cfg.bits_per_frame:
        raise ValueError(f"expected {cfg.bits_per_frame} bits, got {bits.size}")
    return bits.reshape(cfg.n_blocks, cfg.bits_per_block)


def _split_group(groups: np.ndarray, c: Constellation, n_block: int):
    b2 = c.bits_q2
    mode = bits_to_int(groups[..., :b2])
    chunks = groups[..., b2:].reshape(groups.shape[:-1] + (n_block, c.bits_q1))
    return mode, bits_to_int(chunks)


def _join_group(mode: np.ndarray, q1: np.ndarray, c: Constellation) -> np.ndarray:
    mb = int_to_bits(mode, c.bits_q2)
    qb = int_to_bits(q1, c.bits_q1)
    qb = qb.reshape(qb.shape[:-2] + (-1,))
    return np.concatenate([mb, qb], axis=-1).astype(np.uint8)


def map_block(group, c: Constellation, n_block: int) -> tuple[np.ndarray, int]:
    """Map one group of ``B_b`` bits to ``(N_b symbols, mode)``."""
    group = np.asarray(group, dtype=np.uint8)
    if group.size != c.bits_q2 + n_block * c.bits_q1:
        raise ValueError(f"group has {group.size} bits, expected {c.bits_q2 + n_block * c.bits_q1}")
    mode, q1 = _split_group(group, c, n_block)
    return c.points[q1, mode], int(mode)


def demap_block_hard(pmf_symbols, pmf_mode, c: Constellation) -> np.ndarray:
    """Hard bits from block posteriors.

    ``pmf_symbols`` has shape ``(..., N_b, Q1, Q2)`` (or flattened last axis
    ``Q1*Q2``) and ``pmf_mode`` ``(..., Q2)``. The mode is the argmax of the
    mode PMF; each symbol takes the argmax inside that mode's column. Ties go
    to the lowest index.
    """
    pmf_mode = np.asarray(pmf_mode)
    pmf_symbols = np.asarray(pmf_symbols)
    pmf_symbols = pmf_symbols.reshape(pmf_symbols.shape[: pmf_mode.ndim] + (c.q1_order, c.q2_order))
    mode = np.argmax(pmf_mode, axis=-1)
    idx = np.broadcast_to(mode[..., None, None, None], pmf_symbols.shape[:-2] + (c.q1_order, 1))
    column = np.take_along_axis(pmf_symbols, idx, axis=-1)[..., 0]
    q1 = np.argmax(column, axis=-1)
    return _join_group(mode, q1, c)


def assemble_frame(groups, cfg: FrameConfig) -> Frame:
    groups = np.asarray(groups, dtype=np.uint8).reshape(cfg.n_blocks, cfg.bits_per_block)
    c = cfg.constellation
    mode, q1 = _split_group(groups, c, cfg.n_block)
    modes = mode.reshape(cfg.m_delay, cfg.blocks_per_row)
    q1 = q1.reshape(cfg.m_delay, cfg.n_doppler)
    symbols = c.points[q1, np.repeat(modes, cfg.n_block, axis=1)]
    return Frame(symbols, modes, q1)


def disassemble_frame(frame: Frame, cfg: FrameConfig) -> np.ndarray:
    mode = frame.modes.reshape(cfg.n_blocks)
    q1 = frame.q1.reshape(cfg.n_blocks, cfg.n_block)
    return _join_group(mode, q1, cfg.constellation).ravel()


@dataclass(frozen=True)
class ImBaselineConfig:
    """Conventional IM: ``K_b`` of ``N_b`` positions carry ``Q``-QAM symbols."""

    n_block: int
    k_active: int
    qam_order: int

    def __post_init__(self):
        if not 1 <= self.k_active <= self.n_block:
            raise ValueError(f"need 1 <= K_b <= N_b, got K_b={self.k_active}, N_b={self.n_block}")
        qam_lattice(self.qam_order)

    @property
    def index_bits(self) -> int:
        return int(math.floor(math.log2(math.comb(self.n_block, self.k_active))))

    @property
    def qam_bits(self) -> int:
        return int(math.log2(self.qam_order))

    @property
    def bits_per_block(self) -> int:
        return self.index_bits + self.k_active * self.qam_bits

    @property
    def se(self) -> float:
        return self.bits_per_block / self.n_block

    @cached_property
    def patterns(self) -> np.ndarray:
        """Usable activation patterns in lexicographic (combinadic) order."""
        combos = list(itertools.combinations(range(self.n_block), self.k_active))
        return np.array(combos[: 1 << self.index_bits], dtype=np.int64)

    @cached_property
    def alphabet(self) -> np.ndarray:
        """Active-symbol alphabet, scaled so the block energy averages 1 per slot."""
        pts = qam_lattice(self.qam_order)
        pts = pts / math.sqrt(float(np.mean(np.abs(pts) ** 2)))
        return pts * math.sqrt(self.n_block / self.k_active)


def map_im_baseline(group, cfg: ImBaselineConfig) -> np.ndarray:
    """Map ``(..., bits_per_block)`` bits to ``(..., N_b)`` symbols."""
    group = np.asarray(group, dtype=np.uint8)
    if group.shape[-1] != cfg.bits_per_block:
        raise ValueError(f"group has {group.shape[-1]} bits, expected {cfg.bits_per_block}")
    rank = bits_to_int(group[..., : cfg.index_bits])
    q = bits_to_int(group[..., cfg.index_bits:].reshape(group.shape[:-1] + (cfg.k_active, cfg.qam_bits)))
    out = np.zeros(group.shape[:-1] + (cfg.n_block,), dtype=complex)
    np.put_along_axis(out, cfg.patterns[rank], cfg.alphabet[q], axis=-1)
    return out


def demap_im_baseline(x_tilde, cfg: ImBaselineConfig, noise_var=1.0) -> np.ndarray:
    """Block-wise ML demapper (inverse of :func:`map_im_baseline`).

    Exact joint ML over all patterns and QAM values; it factorizes per pattern
    into per-slot minima.
    """
    x = np.asarray(x_tilde)
    w = 1.0 / np.broadcast_to(np.asarray(noise_var, dtype=float), x.shape)
    d = np.abs(x[..., None] - cfg.alphabet) ** 2 * w[..., None]  # (..., N_b, Q)
    best_q = np.argmin(d, axis=-1)
    best_d = np.take_along_axis(d, best_q[..., None], axis=-1)[..., 0]
    idle = np.abs(x) ** 2 * w
    pats = cfg.patterns  # (P, K)
    active = np.zeros((pats.shape[0], cfg.n_block), dtype=bool)
    np.put_along_axis(active, pats, True, axis=1)
    cost = np.where(active, best_d[..., None, :], idle[..., None, :]).sum(axis=-1)  # (..., P)
    rank = np.argmin(cost, axis=-1)
    q = np.take_along_axis(best_q, pats[rank], axis=-1)
    bits = [int_to_bits(rank, cfg.index_bits), int_to_bits(q, cfg.qam_bits).reshape(q.shape[:-1] + (-1,))]
    return np.concatenate(bits, axis=-1).astype(np.uint8)


class HmimModem:
    """Frame-level HMIM transmitter plus the block-wise ML demapper.

    With ``Q2 == 1`` and ``N_b == 1`` this is plain QAM ODDM.
    """

    kind = "hmim"

    def __init__(self, cfg: FrameConfig):
        self.cfg = cfg
        self.c = cfg.constellation
        self.m = cfg.m_delay
        self.n = cfg.n_doppler
        self.n_block = cfg.n_block
        self.bits_per_block = cfg.bits_per_block
        self.bits_per_frame = cfg.bits_per_frame
        self.se = cfg.se

    @classmethod
    def build(cls, m: int, n: int, q1: int, q2: int = 1, n_block: int = 1, rho: float = 1.0):
        return cls(FrameConfig(m, n, n_block, build_hqc(q1, q2, rho)))

    def modulate(self, bits) -> np.ndarray:
        return assemble_frame(split_bits(bits, self.cfg), self.cfg).symbols

    def _blocks(self, a) -> np.ndarray:
        a = np.broadcast_to(np.asarray(a), (self.m, self.n))
        return a.reshape(self.m, self.cfg.blocks_per_row, self.n_block)

    def detect_blocks(self, x_tilde, noise_var=1.0) -> np.ndarray:
        """Block-wise ML given per-symbol Gaussian error variances."""
        x = self._blocks(x_tilde)
        w = 1.0 / self._blocks(np.asarray(noise_var, dtype=float))
        d = np.abs(x[..., None, None] - self.c.points) ** 2 * w[..., None, None]  # (M, B, Nb, Q1, Q2)
        best_q1 = np.argmin(d, axis=-2)  # (M, B, Nb, Q2)
        best = np.min(d, axis=-2).sum(axis=-2)  # (M, B, Q2)
        mode = np.argmin(best, axis=-1)
        q1 = np.take_along_axis(best_q1, mode[..., None, None], axis=-1)[..., 0]
        return _join_group(mode, q1, self.c).ravel()

    def block_hypotheses(self) -> tuple[np.ndarray, np.ndarray]:
        """All valid blocks: ``(symbols (H, N_b), bits (H, B_b))`` in bit-value order."""
        h = 1 << self.bits_per_block
        bits = int_to_bits(np.arange(h), self.bits_per_block)
        mode, q1 = _split_group(bits, self.c, self.n_block)
        return self.c.points[q1, mode[:, None]], bits


class ImModem:
    """Frame-level conventional IM (ODDM-IM baseline)."""

    kind = "im"

    def __init__(self, m: int, n: int, cfg: ImBaselineConfig):
        if n % cfg.n_block:
            raise ValueError(f"N={n} is not a multiple of N_b={cfg.n_block}")
        self.cfg = cfg
        self.m = m
        self.n = n
        self.n_block = cfg.n_block
        self.bits_per_block = cfg.bits_per_block
        self.bits_per_frame = m * (n // cfg.n_block) * cfg.bits_per_block
        self.se = cfg.se

    def modulate(self, bits) -> np.ndarray:
        bits = np.asarray(bits, dtype=np.uint8)
        if bits.size != self.bits_per_frame:
            raise ValueError(f"expected {self.bits_per_frame} bits, got {bits.size}")
        groups = bits.reshape(-1, self.bits_per_block)
        return map_im_baseline(groups, self.cfg).reshape(self.m, self.n)

    def detect_blocks(self, x_tilde, noise_var=1.0) -> np.ndarray:
        x = np.asarray(x_tilde).reshape(-1, self.n_block)
        v = np.broadcast_to(np.asarray(noise_var, dtype=float), (self.m, self.n)).reshape(-1, self.n_block)
        return demap_im_baseline(x, self.cfg, v).ravel()

    def block_hypotheses(self) -> tuple[np.ndarray, np.ndarray]:
        h = 1 << self.bits_per_block
        bits = int_to_bits(np.arange(h), self.bits_per_block)
        return map_im_baseline(bits, self.cfg), bits


def write_golden(path, seed: int, modem: HmimModem, bits, symbols) -> None:
    """Golden vector: header line with seed/config, then bits, then symbols."""
    c = modem.c
    lines = [
        f"# seed={seed} m={modem.m} n={modem.n} nb={modem.n_block} q1={c.q1_order} q2={c.q2_order} rho={c.rho!r}",
        "".join(map(str, np.asarray(bits, dtype=np.uint8).ravel())),
    ]
    lines += [f"{float(s.real)!r} {float(s.imag)!r}" for s in np.asarray(symbols).ravel()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_golden(path) -> tuple[dict, np.ndarray, np.ndarray]:
    header, bitline, *rows = Path(path).read_text().strip().splitlines()
    meta = dict(tok.split("=") for tok in header.lstrip("#").split())
    meta = {k: (float(v) if k == "rho" else int(v)) for k, v in meta.items()}
    bits = np.array([int(b) for b in bitline], dtype=np.uint8)
    syms = np.array([complex(*map(float, r.split())) for r in rows])
    return meta, bits, syms.reshape(meta["m"], meta["n"])
