"""Command-line front end: recipes, BER sweeps, analytical curves and self-tests.

Recipes are JSON documents (or the names of built-in presets)::

    {
      "name": "fig4",
      "seed": 1,
      "ebn0_db": [0, 5, 10] | {"start": 0, "stop": 10, "step": 5},
      "channel": {"profile": "uniform", "n_taps": 5, "ue_speed_kmh": 500,
                  "carrier_hz": 5e9, "subcarrier_spacing_hz": 15e3},
      "stop": {"min_frame_errors": 100, "max_frames": 100000, "chunk_frames": 16},
      "systems": [{"label": "hmim", "kind": "hmim", "m": 32, "n": 32, "q1": 4,
                   "q2": 4, "n_block": 4, "rho": 1.1, "detector": "mmse"}],
      "analysis": {"geometry_draws": 20, "rho_grid": [1.0, 1.1], "rho_gamma_db": 15}
    }

Exit codes: 0 ok, 2 configuration error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import ber_analysis
from .hmim_codec import FrameConfig
from .hqc import ConstellationInfeasibleError, build_hqc, check_invariants, load_table
from .sim_engine import (
    CSV_COLUMNS,
    DETECTORS,
    PROFILES,
    SimConfig,
    SystemSpec,
    default_workers,
    ebn0_to_snr,
    frame_geometries,
    point_row,
    run_sweep,
    build_modem,
    metadata_text,
)

__all__ = ["PRESETS", "RecipeError", "load_recipe", "validate_recipe", "recipe_configs", "main"]

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

_CHANNEL_500 = {
    "profile": "uniform", "n_taps": 5, "ue_speed_kmh": 500.0,
    "carrier_hz": 5e9, "subcarrier_spacing_hz": 15e3,
}


def _hmim(label, m, n, q1, q2=1, nb=1, rho=1.0, detector="mmse"):
    return {"label": label, "kind": "hmim", "m": m, "n": n, "q1": q1, "q2": q2,
            "n_block": nb, "rho": rho, "detector": detector}


def _im(label, m, n, nb, k, qam, detector="mmse"):
    return {"label": label, "kind": "im", "m": m, "n": n, "n_block": nb, "k_active": k,
            "qam_order": qam, "detector": detector}


def _table_i(m, n, detector, which=("hmim", "oddm", "im")):
    rows = []
    if "hmim" in which:
        rows += [_hmim("hmim-se2", m, n, 2, 2, 1, 1.0, detector),
                 _hmim("hmim-se2.5", m, n, 4, 4, 4, 1.1, detector),
                 _hmim("hmim-se3", m, n, 4, 4, 2, 1.1, detector)]
    if "oddm" in which:
        rows += [_hmim("oddm-4qam", m, n, 4, detector=detector),
                 _hmim("oddm-8qam", m, n, 8, detector=detector)]
    if "im" in which:
        rows += [_im("im-se2", m, n, 4, 3, 4, detector), _im("im-se2.5", m, n, 4, 2, 16, detector)]
    return rows


PRESETS = {
    "fig4": {
        "name": "fig4",
        "seed": 4,
        "ebn0_db": {"start": 0, "stop": 30, "step": 5},
        "channel": dict(_CHANNEL_500, n_taps=2),
        "stop": {"min_frame_errors": 100, "max_frames": 2_000_000, "chunk_frames": 256},
        "systems": [_hmim("hmim-se1.5", 2, 2, 2, 2, 2, 1.4, "ml")],
        "analysis": {"geometry_draws": 20, "rho_grid": [1.0, 1.1, 1.2, 1.3, 1.4, 1.5, 1.6, 1.8, 2.0],
                     "rho_gamma_db": 15.0},
    },
    "fig5": {
        "name": "fig5",
        "seed": 5,
        "ebn0_db": {"start": 0, "stop": 20, "step": 2},
        "channel": dict(_CHANNEL_500),
        "stop": {"min_frame_errors": 100, "max_frames": 20_000, "chunk_frames": 8},
        "systems": _table_i(32, 32, "mmse"),
    },
    "fig6-small": {
        "name": "fig6-small",
        "seed": 6,
        "ebn0_db": {"start": 0, "stop": 16, "step": 2},
        "channel": dict(_CHANNEL_500),
        "stop": {"min_frame_errors": 100, "max_frames": 20_000, "chunk_frames": 8},
        "systems": _table_i(32, 32, "mmse", ("hmim",)) + [
            dict(s, label=s["label"] + "-sic") for s in _table_i(32, 32, "sicmmse", ("hmim",))
        ],
    },
    "fig6-large": {
        "name": "fig6-large",
        "seed": 7,
        "ebn0_db": {"start": 0, "stop": 12, "step": 2},
        "channel": dict(_CHANNEL_500, profile="eva"),
        "stop": {"min_frame_errors": 100, "max_frames": 2_000, "chunk_frames": 4},
        "systems": [dict(s, label=s["label"] + "-sic") for s in _table_i(256, 32, "sicmmse", ("hmim",))],
    },
    # tiny frames carrying the reference HMIM blocks, for the rho search
    "table1-rho": {
        "name": "table1-rho",
        "seed": 1,
        "ebn0_db": [15.0],
        "channel": dict(_CHANNEL_500, n_taps=1),
        "stop": {"min_frame_errors": 100, "max_frames": 1000, "chunk_frames": 16},
        "systems": [_hmim("hmim-se2.5", 1, 4, 4, 4, 4, 1.1, "ml"), _hmim("hmim-se3", 1, 2, 4, 4, 2, 1.1, "ml")],
        "analysis": {"geometry": [[0, 0], [0, 1]], "rho_grid": [0.8, 0.9, 1.0, 1.1, 1.2, 1.3, 1.4, 1.6, 2.0],
                     "rho_gamma_db": 30.0},
    },
}


class RecipeError(ValueError):
    """Invalid recipe; the message starts with the offending key path."""


_SCHEMA = {
    "name": str,
    "seed": int,
    "ebn0_db": (list, dict),
    "channel": {
        "profile": str, "n_taps": int, "ue_speed_kmh": (int, float),
        "carrier_hz": (int, float), "subcarrier_spacing_hz": (int, float),
    },
    "stop": {"min_frame_errors": int, "max_frames": int, "chunk_frames": int},
    "systems": [{
        "label": str, "kind": str, "m": int, "n": int, "q1": int, "q2": int, "n_block": int,
        "rho": (int, float), "k_active": int, "qam_order": int, "detector": str,
        "n_ite": int, "tol": (int, float),
    }],
    "analysis": {
        "gamma_db": list, "geometry_draws": int, "geometry": list,
        "rho_grid": list, "rho_gamma_db": (int, float),
    },
}
_REQUIRED = ("ebn0_db", "systems")


def _check(node, schema, path: str) -> None:
    if isinstance(schema, dict):
        if not isinstance(node, dict):
            raise RecipeError(f"{path or '<root>'}: expected a mapping")
        for key, value in node.items():
            sub = f"{path}.{key}" if path else key
            if key not in schema:
                raise RecipeError(f"{sub}: unknown key (allowed: {', '.join(sorted(schema))})")
            _check(value, schema[key], sub)
    elif isinstance(schema, list):
        if not isinstance(node, list) or not node:
            raise RecipeError(f"{path}: expected a non-empty list")
        for i, item in enumerate(node):
            _check(item, schema[0], f"{path}[{i}]")
    else:
        if isinstance(node, bool) or not isinstance(node, schema):
            raise RecipeError(f"{path}: wrong type {type(node).__name__}")


def _grid(spec, path="ebn0_db") -> list[float]:
    if isinstance(spec, dict):
        extra = set(spec) - {"start", "stop", "step"}
        if extra or len(spec) != 3:
            raise RecipeError(f"{path}: a range needs exactly start, stop and step")
        start, stop, step = (float(spec[k]) for k in ("start", "stop", "step"))
        return parse_range(f"{start}:{stop}:{step}", path)
    try:
        grid = [float(x) for x in spec]
    except (TypeError, ValueError):
        raise RecipeError(f"{path}: expected numbers") from None
    if not grid:
        raise RecipeError(f"{path}: empty Eb/N0 grid")
    return grid


def parse_range(text: str, path: str = "--ebn0") -> list[float]:
    """``a:b:step`` (inclusive of ``b``) or a single value."""
    try:
        parts = [float(x) for x in text.split(":")]
    except ValueError:
        raise RecipeError(f"{path}: cannot parse {text!r}") from None
    if len(parts) == 1:
        return parts
    if len(parts) != 3 or parts[2] <= 0 or parts[1] < parts[0]:
        raise RecipeError(f"{path}: expected a:b:step with step > 0 and b >= a")
    a, b, step = parts
    count = int(math.floor((b - a) / step + 1e-9)) + 1
    return [round(a + i * step, 9) for i in range(count)]


def validate_recipe(recipe: dict) -> dict:
    _check(recipe, _SCHEMA, "")
    for key in _REQUIRED:
        if key not in recipe:
            raise RecipeError(f"{key}: missing required key")
    _grid(recipe["ebn0_db"])
    for i, s in enumerate(recipe["systems"]):
        det = s.get("detector", "mmse")
        if det not in DETECTORS:
            raise RecipeError(f"systems[{i}].detector: must be one of {DETECTORS}")
        for key in ("m", "n", "q1"):
            if s.get("kind", "hmim") == "hmim" and key not in s:
                raise RecipeError(f"systems[{i}].{key}: missing required key")
    prof = recipe.get("channel", {}).get("profile", "uniform")
    if prof not in PROFILES:
        raise RecipeError(f"channel.profile: must be one of {PROFILES}")
    return recipe


def load_recipe(name_or_path: str) -> dict:
    """A preset name or a path to a JSON recipe, validated."""
    if name_or_path in PRESETS:
        return copy.deepcopy(PRESETS[name_or_path])
    path = Path(name_or_path)
    if not path.exists():
        raise RecipeError(f"recipe: {name_or_path!r} is neither a preset ({', '.join(PRESETS)}) nor a file")
    try:
        recipe = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise RecipeError(f"recipe: invalid JSON ({exc})") from None
    return validate_recipe(recipe)


def dump_recipe(recipe: dict) -> str:
    return json.dumps(recipe, indent=2, sort_keys=True) + "\n"


def apply_overrides(recipe: dict, args) -> dict:
    r = copy.deepcopy(recipe)
    if getattr(args, "seed", None) is not None:
        r["seed"] = args.seed
    if getattr(args, "ebn0", None):
        r["ebn0_db"] = parse_range(args.ebn0)
    stop = r.setdefault("stop", {})
    if getattr(args, "max_frames", None) is not None:
        stop["max_frames"] = args.max_frames
    if getattr(args, "min_frame_errors", None) is not None:
        stop["min_frame_errors"] = args.min_frame_errors
    if getattr(args, "detector", None):
        for s in r["systems"]:
            s["detector"] = args.detector
    return validate_recipe(r)


def recipe_configs(recipe: dict) -> list[tuple[str, SimConfig]]:
    """One ``(label, SimConfig)`` per system; constellation errors surface here."""
    grid = _grid(recipe["ebn0_db"])
    ch = dict(_CHANNEL_500, **recipe.get("channel", {}))
    stop = recipe.get("stop", {})
    out = []
    for i, s in enumerate(recipe["systems"]):
        s = dict(s)
        label = s.pop("label", f"system{i}")
        det = s.pop("detector", "mmse")
        n_ite = s.pop("n_ite", 10)
        tol = s.pop("tol", 1e-6)
        try:
            spec = SystemSpec(**s)
            if spec.kind == "hmim":
                build_hqc(spec.q1, spec.q2, spec.rho)
            cfg = SimConfig(
                system=spec, detector=det, n_ite=n_ite, tol=tol, ebn0_db=tuple(grid),
                seed=recipe.get("seed", 0), **ch, **stop,
            )
        except ConstellationInfeasibleError as exc:
            raise ConstellationInfeasibleError(f"systems[{i}] ({label}): {exc}") from None
        except (TypeError, ValueError) as exc:
            raise RecipeError(f"systems[{i}] ({label}): {exc}") from None
        out.append((label, cfg))
    return out


def _analysis_geometries(recipe: dict, cfg: SimConfig) -> list:
    a = recipe.get("analysis", {})
    if "geometry" in a:
        return [[tuple(p) for p in a["geometry"]]]
    return frame_geometries(cfg, cfg.ebn0_db[0], a.get("geometry_draws", 20))


def _analytical(recipe: dict, cfg: SimConfig, gamma) -> np.ndarray:
    s = cfg.system
    if s.kind != "hmim":
        raise RecipeError("analysis: only HMIM systems have an analytical BER")
    frame = FrameConfig(s.m, s.n, s.n_block, build_hqc(s.q1, s.q2, s.rho))
    return np.atleast_1d(ber_analysis.average_ber_ensemble(frame, _analysis_geometries(recipe, cfg), gamma))


def _write_rows(path, header, rows) -> None:
    fh = open(path, "w", newline="") if path else sys.stdout
    try:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    finally:
        if path:
            fh.close()


def cmd_run(args) -> int:
    recipe = apply_overrides(load_recipe(args.recipe), args)
    configs = recipe_configs(recipe)
    with_analysis = "analysis" in recipe
    header = ["system"] + CSV_COLUMNS + (["analytical_ber"] if with_analysis else [])
    rows, meta = [], []
    for label, cfg in configs:
        t0 = time.perf_counter()
        try:
            res = run_sweep(cfg, args.threads)
        except Exception as exc:  # noqa: BLE001 - any failed point fails the run
            print(f"runtime failure in {label}: {type(exc).__name__}: {exc}", file=sys.stderr)
            return EXIT_RUNTIME
        extra = []
        if with_analysis:
            extra = _analytical(recipe, cfg, ebn0_to_snr(cfg.ebn0_db, build_modem(cfg.system).se))
        for i, p in enumerate(res.points):
            rows.append([label] + point_row(p) + ([f"{extra[i]:.6e}"] if with_analysis else []))
        meta.append(f"[{label}]\n" + metadata_text(res))
        if args.verbose:
            print(f"{label}: {len(res.points)} points in {time.perf_counter() - t0:.1f} s", file=sys.stderr)
    _write_rows(args.out, header, rows)
    if args.out:
        Path(str(args.out) + ".meta.txt").write_text("\n".join(meta))
    return EXIT_OK


def cmd_analyze(args) -> int:
    recipe = apply_overrides(load_recipe(args.recipe), args)
    configs = [(l, c) for l, c in recipe_configs(recipe) if c.system.kind == "hmim"]
    if not configs:
        raise RecipeError("systems: the analysis needs at least one HMIM system")
    a = recipe.get("analysis", {})
    if args.rho_search:
        gamma_db = args.gamma_db if args.gamma_db is not None else a.get("rho_gamma_db", 15.0)
        grid = a.get("rho_grid", [1.0, 1.1, 1.2, 1.3, 1.4, 1.5])
        rows = []
        for label, cfg in configs:
            s = cfg.system
            geos = _analysis_geometries(recipe, cfg)
            best = ber_analysis.search_rho(s.m, s.n, s.n_block, s.q1, s.q2, geos, 10 ** (gamma_db / 10), grid)
            for rho in grid:
                try:
                    frame = FrameConfig(s.m, s.n, s.n_block, build_hqc(s.q1, s.q2, rho))
                except ConstellationInfeasibleError:
                    continue
                val = ber_analysis.average_ber_ensemble(frame, geos, 10 ** (gamma_db / 10))
                rows.append([label, f"{rho:g}", f"{val:.6e}", f"{s.rho:g}", "*" if rho == best else ""])
        _write_rows(args.out, ["system", "rho", "predicted_ber", "configured_rho", "best"], rows)
        return EXIT_OK
    label, cfg = configs[0]
    if args.gamma_db is not None:
        print(f"{_analytical(recipe, cfg, 10 ** (args.gamma_db / 10))[0]:.6e}")
        return EXIT_OK
    gamma_db = np.array(a.get("gamma_db") or [10 * math.log10(g) for g in ebn0_to_snr(cfg.ebn0_db, build_modem(cfg.system).se)])
    values = _analytical(recipe, cfg, 10 ** (gamma_db / 10))
    if args.out:
        ber_analysis.write_analysis_csv(args.out, [round(g, 6) for g in gamma_db], values)
    else:
        _write_rows(None, ["gamma_db", "analytical_ber"],
                    [[f"{g:g}", f"{v:.6e}"] for g, v in zip(np.round(gamma_db, 6), values)])
    return EXIT_OK


def _suite_map(rng) -> float:
    import itertools

    from .map_estimator import BlockObservation, posterior

    worst = 0.0
    for q, nb in itertools.product([(2, 2), (4, 4)], [1, 2, 3]):
        c = build_hqc(*q, 1.3)
        for _ in range(20):
            x = c.points[rng.integers(c.q1_order, size=nb), rng.integers(c.q2_order)]
            x = x + 0.4 * (rng.standard_normal(nb) + 1j * rng.standard_normal(nb))
            v = rng.uniform(0.05, 1.0, nb)
            post = posterior(BlockObservation(x, v, c))
            joint = np.zeros((c.q2_order,) + (c.q1_order,) * nb)
            for b in range(c.q2_order):
                for idx in itertools.product(range(c.q1_order), repeat=nb):
                    joint[(b,) + idx] = np.exp(-np.sum(np.abs(x - c.points[list(idx), b]) ** 2 / v))
            joint /= joint.sum()
            mode = joint.reshape(c.q2_order, -1).sum(axis=1)
            worst = max(worst, float(np.max(np.abs(post.mode_pmf - mode))))
            for n in range(nb):
                axes = tuple(1 + k for k in range(nb) if k != n)
                marg = joint.sum(axis=axes).T  # (Q1, Q2)
                worst = max(worst, float(np.max(np.abs(post.symbol_pmfs[n] - marg))))
    return worst


def _random_channel(rng, m, n):
    from .dd_channel import gen_channel

    return gen_channel("uniform", 500 / 3.6, 5e9, 15e3, m, n, rng, n_taps=5)


def _suite_domains(rng) -> float:
    from .dd_channel import apply_channel_dd, build_g_matrix
    from .oddm_transform import dd_to_time, time_to_dd

    worst = 0.0
    for _ in range(50):
        ch = _random_channel(rng, 8, 8)
        x = rng.standard_normal((8, 8)) + 1j * rng.standard_normal((8, 8))
        y = time_to_dd(build_g_matrix(ch) @ dd_to_time(x), 8, 8)
        worst = max(worst, float(np.max(np.abs(y - apply_channel_dd(ch, x)))))
    return worst


def _suite_subchannels(rng) -> float:
    from .dd_channel import build_g_matrix, build_subchannel

    worst = 0.0
    for _ in range(20):
        ch = _random_channel(rng, 8, 8)
        s = rng.standard_normal(64) + 1j * rng.standard_normal(64)
        r = build_g_matrix(ch) @ s
        for q in range(64):
            gq, s_idx, r_idx = build_subchannel(ch, q)
            worst = max(worst, float(np.max(np.abs(gq @ s[s_idx] - r[r_idx]))))
    return worst


SELFTEST_SUITES = [
    ("MAP vs enumeration", _suite_map, 1e-10),
    ("DD vs time operator", _suite_domains, 1e-9),
    ("sub vs full channel", _suite_subchannels, 1e-12),
]


def cmd_selftest(args) -> int:
    rng = np.random.default_rng(args.seed if args.seed is not None else 0)
    ok = True
    if args.table:
        c = load_table(args.table)  # parse errors name the violated invariant
        bad = check_invariants(c)
        print(f"{'FAIL' if bad else 'PASS'} constellation table {args.table}" + (f": {', '.join(bad)}" if bad else ""))
        ok &= not bad
    for name, fn, tol in SELFTEST_SUITES:
        err = fn(rng)
        passed = err <= tol
        ok &= passed
        line = f"{'PASS' if passed else 'FAIL'} {name}"
        if args.verbose:
            line += f" (max error {err:.2e}, tolerance {tol:.0e})"
        print(line)
    return EXIT_OK if ok else EXIT_RUNTIME


def cmd_preset(args) -> int:
    if args.name not in PRESETS:
        raise RecipeError(f"preset: unknown name {args.name!r}; choose from {', '.join(PRESETS)}")
    text = dump_recipe(PRESETS[args.name])
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="oddm-hmim", description="ODDM-HMIM BER simulation toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    def recipe_args(sp):
        sp.add_argument("recipe_pos", nargs="?", metavar="RECIPE", help="preset name or JSON file")
        sp.add_argument("--recipe", help="preset name or JSON file")
        sp.add_argument("--out", help="output CSV path (default: stdout)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--ebn0", help="Eb/N0 grid in dB, a:b:step or a single value")
        sp.add_argument("--detector", choices=DETECTORS)
        sp.add_argument("--max-frames", type=_positive_int)
        sp.add_argument("--min-frame-errors", type=_positive_int)
        sp.add_argument("-v", "--verbose", action="store_true")

    run = sub.add_parser("run", help="simulate a recipe")
    recipe_args(run)
    run.add_argument("--threads", type=_positive_int, default=default_workers(),
                     help="worker processes (default: $ODDM_HMIM_THREADS or 1)")
    run.set_defaults(func=cmd_run)

    ana = sub.add_parser("analyze", help="analytical ML BER without simulation")
    recipe_args(ana)
    ana.add_argument("--gamma-db", type=float, help="evaluate a single SNR and print one number")
    ana.add_argument("--rho-search", action="store_true", help="report predicted BER over the recipe's rho grid")
    ana.set_defaults(func=cmd_analyze)

    st = sub.add_parser("selftest", help="run the oracle-equivalence suites")
    st.add_argument("--table", help="also validate a constellation table file")
    st.add_argument("--seed", type=int)
    st.add_argument("-v", "--verbose", action="store_true")
    st.set_defaults(func=cmd_selftest)

    pr = sub.add_parser("preset", help="print a built-in recipe as JSON")
    pr.add_argument("name")
    pr.add_argument("--out")
    pr.set_defaults(func=cmd_preset)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command in ("run", "analyze"):
        if args.recipe and args.recipe_pos:
            parser.error("give the recipe either positionally or with --recipe, not both")
        args.recipe = args.recipe or args.recipe_pos
        if not args.recipe:
            parser.error("a recipe is required")
    try:
        return args.func(args)
    except (RecipeError, ValueError, OSError) as exc:
        # constellation and schema errors both derive from ValueError
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
