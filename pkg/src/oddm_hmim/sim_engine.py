"""Monte Carlo BER runner: Eb/N0 sweeps with deterministic per-frame seeding.

Every frame draws its bits, channel and noise from its own generator,
``default_rng([seed, point_key, frame_index])``, where ``point_key`` is derived
from the Eb/N0 value. Frames are grouped into fixed-size chunks and the stop
rule is checked only at chunk boundaries, in chunk order, so the result does
not depend on the number of worker processes.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import time
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .dd_channel import ChannelPath, ChannelRealization, apply_channel, gen_channel
from .detectors import DetectionResult, detect_ml, detect_mmse_blockwise, detect_sicmmse
from .hmim_codec import HmimModem, ImBaselineConfig, ImModem
from .oddm_transform import dd_to_time, time_to_dd

__all__ = [
    "DETECTORS",
    "PROFILES",
    "SystemSpec",
    "SimConfig",
    "PointResult",
    "SimResult",
    "ebn0_to_snr",
    "build_modem",
    "draw_channel",
    "simulate_frame",
    "frame_geometries",
    "run_point",
    "run_sweep",
    "merge_results",
    "config_hash",
    "write_csv",
    "write_metadata",
    "metadata_text",
    "CSV_COLUMNS",
    "point_row",
    "default_workers",
    "with_overrides",
]

DETECTORS = ("ml", "mmse", "sicmmse")
PROFILES = ("uniform", "eva", "identity")
CSV_COLUMNS = ["ebn0_db", "frames", "bit_errors", "frame_errors", "ber", "fer", "seconds"]
VERSION = "0.1.0"


@dataclass(frozen=True)
class SystemSpec:
    """Modulation scheme of one curve: ``kind`` is ``"hmim"`` or ``"im"``."""

    kind: str = "hmim"
    m: int = 32
    n: int = 32
    q1: int = 4
    q2: int = 1
    n_block: int = 1
    rho: float = 1.0
    k_active: int = 0  # IM baseline only
    qam_order: int = 4  # IM baseline only

    def __post_init__(self):
        if self.kind not in ("hmim", "im"):
            raise ValueError(f"system kind must be 'hmim' or 'im', got {self.kind!r}")
        if self.m < 1 or self.n < 1:
            raise ValueError("frame dimensions must be positive")


@dataclass(frozen=True)
class SimConfig:
    system: SystemSpec = field(default_factory=SystemSpec)
    detector: str | Callable = "mmse"
    n_ite: int = 10
    tol: float = 1e-6
    profile: str = "uniform"
    n_taps: int = 5
    ue_speed_kmh: float = 500.0
    carrier_hz: float = 5e9
    subcarrier_spacing_hz: float = 15e3
    ebn0_db: tuple = (10.0,)
    min_frame_errors: int = 100
    max_frames: int = 100_000
    chunk_frames: int = 16
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "ebn0_db", tuple(float(x) for x in np.atleast_1d(self.ebn0_db)))
        if not self.ebn0_db:
            raise ValueError("Eb/N0 grid is empty")
        if self.min_frame_errors < 1:
            raise ValueError("min_frame_errors must be >= 1")
        if self.max_frames < 1 or self.chunk_frames < 1:
            raise ValueError("max_frames and chunk_frames must be >= 1")
        if self.profile not in PROFILES:
            raise ValueError(f"unknown channel profile {self.profile!r}; choose from {PROFILES}")
        if self.profile == "uniform" and not 1 <= self.n_taps <= self.system.m:
            raise ValueError(f"uniform profile needs 1 <= n_taps <= M = {self.system.m}")
        if not callable(self.detector):
            if self.detector not in DETECTORS:
                raise ValueError(f"unknown detector {self.detector!r}; choose from {DETECTORS}")
            if self.detector == "sicmmse" and self.system.kind != "hmim":
                raise ValueError("the sicmmse detector needs an HMIM system (block MAP feedback)")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ebn0_db"] = list(self.ebn0_db)
        if callable(self.detector):
            d["detector"] = getattr(self.detector, "__qualname__", repr(self.detector))
        return d


@dataclass(frozen=True)
class PointResult:
    ebn0_db: float
    frames: int
    bit_errors: int
    frame_errors: int
    bits_per_frame: int
    seconds: float
    capped: bool  # stopped by max_frames before reaching min_frame_errors
    error_histogram: tuple = ()  # sorted (bit errors in a frame, number of such frames), errored frames only

    def frame_error_moments(self) -> tuple[float, float]:
        """Mean and variance of the per-frame bit-error count."""
        k = np.array([e for e, _ in self.error_histogram], dtype=float)
        c = np.array([n for _, n in self.error_histogram], dtype=float)
        mean = float(np.sum(k * c)) / self.frames
        return mean, float(np.sum(k * k * c)) / self.frames - mean**2

    @property
    def ber(self) -> float:
        return self.bit_errors / (self.frames * self.bits_per_frame)

    @property
    def fer(self) -> float:
        return self.frame_errors / self.frames


@dataclass
class SimResult:
    points: list
    meta: dict

    def point(self, ebn0_db: float) -> PointResult:
        for p in self.points:
            if p.ebn0_db == float(ebn0_db):
                return p
        raise KeyError(ebn0_db)

    @property
    def ber(self) -> np.ndarray:
        return np.array([p.ber for p in self.points])


def ebn0_to_snr(ebn0_db, se: float):
    """``gamma = E_s / sigma^2 = SE * Eb/N0`` (linear); CP energy is not counted."""
    return se * 10 ** (np.asarray(ebn0_db, dtype=float) / 10)


def build_modem(spec: SystemSpec):
    if spec.kind == "hmim":
        return HmimModem.build(spec.m, spec.n, spec.q1, spec.q2, spec.n_block, spec.rho)
    return ImModem(spec.m, spec.n, ImBaselineConfig(spec.n_block, spec.k_active, spec.qam_order))


def draw_channel(cfg: SimConfig, rng: np.random.Generator, noise_var: float) -> ChannelRealization:
    s = cfg.system
    if cfg.profile == "identity":
        return ChannelRealization([ChannelPath(1.0 + 0j, 0, 0)], s.m, s.n, noise_var)
    return gen_channel(
        cfg.profile, cfg.ue_speed_kmh / 3.6, cfg.carrier_hz, cfg.subcarrier_spacing_hz,
        s.m, s.n, rng, n_taps=cfg.n_taps, noise_var=noise_var,
    )


def _detect(cfg: SimConfig, r: np.ndarray, ch: ChannelRealization, modem) -> np.ndarray:
    det = cfg.detector
    if callable(det):
        out = det(r, ch, modem)
    elif det == "ml":
        out = detect_ml(time_to_dd(r, ch.m, ch.n), ch, modem)
    elif det == "mmse":
        out = detect_mmse_blockwise(r, ch, modem)
    else:
        out = detect_sicmmse(r, ch, modem, n_ite=cfg.n_ite, tol=cfg.tol)
    return out.bits if isinstance(out, DetectionResult) else np.asarray(out)


def simulate_frame(cfg: SimConfig, modem, noise_var: float, rng: np.random.Generator) -> int:
    """One transmission; returns the number of bit errors."""
    bits = rng.integers(0, 2, modem.bits_per_frame, dtype=np.uint8)
    x = modem.modulate(bits)
    ch = draw_channel(cfg, rng, noise_var)
    r = apply_channel(ch, dd_to_time(x), rng)
    rx = _detect(cfg, r, ch, modem)
    if rx.size != bits.size:
        raise ValueError(f"detector returned {rx.size} bits, expected {bits.size}")
    return int(np.count_nonzero(rx != bits))


def frame_geometries(cfg: SimConfig, ebn0_db: float, count: int) -> list:
    """Path geometries of the first ``count`` simulated frames at ``ebn0_db``.

    Replays each frame's random stream up to its channel draw, so an analysis
    can average over exactly the ensemble the simulation used.
    """
    modem = build_modem(cfg.system)
    noise_var = 1.0 / float(ebn0_to_snr(ebn0_db, modem.se))
    key = _point_key(float(ebn0_db))
    out = []
    for f in range(count):
        rng = np.random.default_rng([cfg.seed, key, f])
        rng.integers(0, 2, modem.bits_per_frame, dtype=np.uint8)
        out.append(draw_channel(cfg, rng, noise_var).geometry)
    return out


def _point_key(ebn0_db: float) -> int:
    # millidecibel resolution, shifted to stay non-negative for SeedSequence
    return int(round(ebn0_db * 1000)) + 1_000_000


def _run_chunk(cfg: SimConfig, ebn0_db: float, start: int, count: int, modem=None):
    modem = modem if modem is not None else build_modem(cfg.system)
    noise_var = 1.0 / float(ebn0_to_snr(ebn0_db, modem.se))
    key = _point_key(ebn0_db)
    hist = Counter()
    for f in range(start, start + count):
        e = simulate_frame(cfg, modem, noise_var, np.random.default_rng([cfg.seed, key, f]))
        if e:
            hist[e] += 1
    return count, hist


def _chunks(cfg: SimConfig):
    start = 0
    while start < cfg.max_frames:
        count = min(cfg.chunk_frames, cfg.max_frames - start)
        yield start, count
        start += count


def run_point(cfg: SimConfig, ebn0_db: float, workers: int = 1, pool=None) -> PointResult:
    """Simulate one Eb/N0 point until ``min_frame_errors`` or ``max_frames``.

    The result is identical for any ``workers``; extra chunks computed ahead
    of the stop decision are discarded.
    """
    ebn0_db = float(ebn0_db)
    modem = build_modem(cfg.system)
    frames = 0
    hist = Counter()

    def take(n, h):
        nonlocal frames
        frames += n
        hist.update(h)
        return sum(hist.values()) >= cfg.min_frame_errors

    wall = time.perf_counter()
    if workers <= 1 and pool is None:
        for start, count in _chunks(cfg):
            if take(*_run_chunk(cfg, ebn0_db, start, count, modem)):
                break
    else:
        own = pool is None
        pool = pool or ProcessPoolExecutor(workers)
        try:
            window, done = [], False
            depth = 2 * max(workers, 1)
            for start, count in _chunks(cfg):
                window.append(pool.submit(_run_chunk, cfg, ebn0_db, start, count))
                if len(window) >= depth and take(*window.pop(0).result()):
                    done = True
                    break
            while window and not done:
                done = take(*window.pop(0).result())
            for fut in window:
                fut.cancel()
        finally:
            if own:
                pool.shutdown(wait=True, cancel_futures=True)
    frame_err = sum(hist.values())
    return PointResult(
        ebn0_db, frames, sum(k * n for k, n in hist.items()), frame_err, modem.bits_per_frame,
        time.perf_counter() - wall, capped=frame_err < cfg.min_frame_errors,
        error_histogram=tuple(sorted(hist.items())),
    )


def config_hash(cfg: SimConfig) -> str:
    d = cfg.to_dict()
    d.pop("ebn0_db")  # the grid does not change any point's result
    blob = json.dumps(d, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _meta(cfg: SimConfig) -> dict:
    return {"config_hash": config_hash(cfg), "seed": cfg.seed, "version": VERSION, "config": cfg.to_dict()}


def default_workers() -> int:
    """Worker count from ``ODDM_HMIM_THREADS`` (default 1)."""
    return max(1, int(os.environ.get("ODDM_HMIM_THREADS", "1")))


def run_sweep(cfg: SimConfig, workers: int | None = None) -> SimResult:
    workers = default_workers() if workers is None else workers
    pool = ProcessPoolExecutor(workers) if workers > 1 else None
    try:
        points = [run_point(cfg, e, workers, pool) for e in cfg.ebn0_db]
    finally:
        if pool is not None:
            pool.shutdown(wait=True, cancel_futures=True)
    return SimResult(sorted(points, key=lambda p: p.ebn0_db), _meta(cfg))


def merge_results(*results: SimResult) -> SimResult:
    """Combine sweeps of the same configuration run over disjoint grids."""
    hashes = {r.meta["config_hash"] for r in results}
    if len(hashes) != 1:
        raise ValueError("cannot merge results of different configurations")
    points = sorted((p for r in results for p in r.points), key=lambda p: p.ebn0_db)
    grid = [p.ebn0_db for p in points]
    if len(set(grid)) != len(grid):
        raise ValueError("overlapping Eb/N0 grids")
    meta = dict(results[0].meta)
    meta["config"] = dict(meta["config"], ebn0_db=grid)
    return SimResult(points, meta)


def point_row(p: PointResult) -> list[str]:
    return [f"{p.ebn0_db:g}", str(p.frames), str(p.bit_errors), str(p.frame_errors),
            f"{p.ber:.6e}", f"{p.fer:.6e}", f"{p.seconds:.3f}"]


def write_csv(result: SimResult, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for p in result.points:
            w.writerow(point_row(p))


def metadata_text(result: SimResult) -> str:
    """Human-readable ``key: value`` run metadata."""
    meta = result.meta
    lines = [
        f"config_hash: {meta['config_hash']}",
        f"seed: {meta['seed']}",
        f"version: {meta['version']}",
        f"capped_points: {[p.ebn0_db for p in result.points if p.capped]}",
        "config: " + json.dumps(meta["config"], sort_keys=True),
    ]
    return "\n".join(lines) + "\n"


def write_metadata(result: SimResult, path) -> None:
    Path(path).write_text(metadata_text(result))


def with_overrides(cfg: SimConfig, **kw) -> SimConfig:
    """Copy of ``cfg`` with the non-None keyword overrides applied."""
    return replace(cfg, **{k: v for k, v in kw.items() if v is not None})
