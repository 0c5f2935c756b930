"""Batch experiment driver.

Every run reads a flat ``key = value`` configuration (optional), applies
command-line overrides, validates the parameters the experiment needs,
writes its CSV/JSON/field outputs into ``--out`` and a ``manifest.json``.
Exit status: 0 success, 2 validation error, 3 resolution/stage/divergence.
"""

from __future__ import annotations

import argparse
import json
import math
import platform
import sys
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .errors import MaciError, ValidationError

KINDS = ("step-verify", "stage-slope", "nk-run", "ma-roundtrip", "density-demo", "energy-scan")


# --------------------------------------------------------------------------
# configuration


@dataclass
class ExperimentConfig:
    kind: str | None = None
    d: int | None = None
    k: int | None = None
    n: int | None = None
    margin: int | None = None
    sigma: tuple | None = None
    alpha: float | None = None
    beta: float | None = None
    eps: float | None = None
    gamma: tuple | None = None
    hs: tuple | None = None
    seed: int | None = None
    out: str | None = None


_INT = ("d", "k", "n", "margin", "seed")
_FLOAT = ("alpha", "beta", "eps")
_LIST = ("sigma", "gamma", "hs")
KEYS = tuple(f.name for f in fields(ExperimentConfig))


def _convert(key: str, raw: str):
    raw = raw.strip()
    try:
        if key in _INT:
            return int(raw)
        if key in _FLOAT:
            return float(raw)
        if key in _LIST:
            vals = tuple(float(p) for p in raw.split(",") if p.strip())
            if not vals:
                raise ValueError
            return vals
    except ValueError:
        kind = "an integer" if key in _INT else "a number" if key in _FLOAT else "a comma-separated list of numbers"
        raise ValidationError(f"config key '{key}' expects {kind}, got '{raw}'") from None
    if not raw:
        raise ValidationError(f"config key '{key}' is empty")
    return raw


def parse_text(text: str, source: str = "<config>") -> ExperimentConfig:
    """Strict parse of ``key = value`` lines; ``#`` comments; ``[kind]`` names the experiment."""
    values: dict = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            key, raw = "kind", line[1:-1]
        elif "=" in line:
            key, raw = (p.strip() for p in line.split("=", 1))
        else:
            raise ValidationError(f"{source}:{lineno}: expected 'key = value', got '{line}'")
        if key not in KEYS:
            raise ValidationError(f"{source}:{lineno}: unknown key '{key}'")
        if key in values:
            raise ValidationError(f"{source}:{lineno}: duplicate key '{key}'")
        values[key] = _convert(key, raw)
    return ExperimentConfig(**values)


def parse_config(path) -> ExperimentConfig:
    p = Path(path)
    if not p.is_file():
        raise ValidationError(f"config file not found: {path}")
    return parse_text(p.read_text(), str(p))


def _fmt_value(val) -> str:
    if isinstance(val, tuple):
        return ",".join(repr(float(x)) for x in val)
    if isinstance(val, float):
        return repr(val)
    return str(val)


def serialize(cfg: ExperimentConfig) -> str:
    """Canonical text form: set keys only, in field order."""
    return "".join(f"{key} = {_fmt_value(val)}\n" for key, val in asdict(cfg).items() if val is not None)


def merge(base: ExperimentConfig, override: ExperimentConfig) -> ExperimentConfig:
    vals = asdict(base)
    for key, val in asdict(override).items():
        if val is not None:
            vals[key] = val
    return ExperimentConfig(**vals)


# kind -> (required keys, defaults)
SCHEMA = {
    "step-verify": ((), dict(d=2, k=1, n=128, margin=6, seed=0)),
    "stage-slope": (("d", "k"), dict(n=128, margin=24, sigma=(2.0, 4.0, 8.0, 16.0), beta=1.0, seed=0)),
    "nk-run": (("d", "k"), dict(n=128, margin=24, sigma=(8.0,), beta=1.0, seed=0)),
    "ma-roundtrip": (("d",), dict(n=128, margin=12, seed=0)),
    "density-demo": (("d", "k"), dict(n=128, margin=24, eps=0.05, alpha=0.1, seed=0)),
    "energy-scan": (("d", "k"), dict(n=48, margin=64, gamma=(0.4, 2.0, 5.0), hs=(0.2, 0.1, 0.05, 0.025),
                                     alpha=0.1, seed=0)),
}


def complete(cfg: ExperimentConfig) -> ExperimentConfig:
    """Check the keys the experiment needs and fill its defaults."""
    if cfg.kind is None:
        raise ValidationError("config is missing 'kind'")
    if cfg.kind not in SCHEMA:
        raise ValidationError(f"unknown experiment kind '{cfg.kind}'; expected one of {', '.join(KINDS)}")
    required, defaults = SCHEMA[cfg.kind]
    missing = [key for key in required if getattr(cfg, key) is None]
    if missing:
        raise ValidationError(f"{cfg.kind}: missing required field(s): {', '.join(missing)}")
    vals = asdict(cfg)
    for key, val in defaults.items():
        if vals[key] is None:
            vals[key] = val
    if vals["out"] is None:
        vals["out"] = f"runs/{cfg.kind}"
    out = ExperimentConfig(**vals)
    for key in ("d", "k", "n"):
        val = getattr(out, key)
        if val is not None and val < 1:
            raise ValidationError(f"'{key}' must be positive, got {val}")
    if out.margin is not None and out.margin < 0:
        raise ValidationError("'margin' must be non-negative")
    return out


# --------------------------------------------------------------------------
# experiments


def _fit(xs, ys) -> float:
    return float(np.polyfit(np.log(xs), np.log(ys), 1)[0])


def _dump_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def run_step_verify(cfg: ExperimentConfig, out: Path) -> dict:
    from .corrugation import StepSpec, corrugation_step, spiral_step, step_residual
    from .fields import Domain, constant, sample, sup_norm, vector, write_norms_csv

    if cfg.d != 2:
        raise ValidationError("step-verify runs on d = 2")
    rows = []
    for kind in ("corrugation", "spiral"):
        for n in (cfg.n, 2 * cfg.n):
            dom = Domain.box(2, n, cfg.margin)
            if kind == "spiral":
                v = sample(dom, lambda x, y: [x**2, x * y], vector(2))
                a = sample(dom, lambda x, y: np.cos(2 * np.pi * x))
                s = StepSpec(a, [1.0, 0.0], [1.0, 0.0], 8 * np.pi, [0.0, 1.0])
                step = spiral_step
            else:
                v = sample(dom, lambda x, y: [x**2] + [0 * x] * (cfg.k - 1), vector(cfg.k))
                a = sample(dom, lambda x, y: np.sin(2 * np.pi * y))
                s = StepSpec(a, [0.6, 0.8], [1.0] + [0.0] * (cfg.k - 1), 8 * np.pi)
                step = corrugation_step
            w = constant(dom, [0.0, 0.0], vector(2))
            v2, w2 = step(v, w, s)
            rows.append({"step": kind, "n": n, "residual": sup_norm(step_residual(v, w, v2, w2, s))})
    write_norms_csv(out / "residuals.csv", rows, ["step", "n", "residual"])
    slopes = {kind: math.log(rows[2 * i + 1]["residual"] / rows[2 * i]["residual"]) / math.log(2)
              for i, kind in enumerate(("corrugation", "spiral"))}
    _dump_json(out / "result.json", {"slopes": slopes})
    return {"slopes": slopes}


def stage_test_data(d: int, k: int, n: int, margin: int):
    """Oscillating v in its first component, A = (1/2) grad v^T grad v + 0.05 Id, w = 0."""
    from .corrugation import vk_form
    from .fields import Domain, GridField, constant, sample, vector

    dom = Domain.box(d, n, margin)
    v = sample(dom, lambda *x: [0.1 * np.sin(2 * np.pi * x[0])] + [0 * x[0]] * (k - 1), vector(k))
    w = constant(dom, [0.0] * d, vector(d))
    A = vk_form(v, w)
    eye = np.array([1.0 if i == j else 0.0 for i in range(d) for j in range(i, d)])
    A = GridField(dom, A.shape, A.data + 0.05 * eye.reshape((-1,) + (1,) * d))
    return v, w, A


def run_stage_slope(cfg: ExperimentConfig, out: Path) -> dict:
    from .fields import write_norms_csv
    from .matdecomp import dstar
    from .stage import stage_corrugation_zoom

    if len(cfg.sigma) < 2:
        raise ValidationError("stage-slope needs at least two sigma values")
    v, w, A = stage_test_data(cfg.d, cfg.k, cfg.n, cfg.margin)
    rows = []
    for s in cfg.sigma:
        _, _, rep = stage_corrugation_zoom(v, w, A, sigma=s, beta=cfg.beta)
        rows.append({"sigma": float(s), "hess_v": rep.hess_v, "hess_w": rep.hess_w, "deficit": rep.D_tilde_norm,
                     "lam_max": rep.lambdas[-1], "identity_residual": rep.identity_residual / rep.D_norm})
    write_norms_csv(out / "stage.csv", rows)
    res = {"slope": _fit(cfg.sigma, [r["hess_v"] for r in rows]),
           "deficit_slope": _fit(cfg.sigma, [r["deficit"] for r in rows]),
           "expected": dstar(cfg.d) / cfg.k, "max_identity_residual": max(r["identity_residual"] for r in rows)}
    _dump_json(out / "result.json", res)
    return res


def run_nk(cfg: ExperimentConfig, out: Path) -> dict:
    from .fields import dump_field
    from .iteration import NKParams, alpha_bound, nash_kuiper
    from .matdecomp import dstar

    g = dstar(cfg.d) / cfg.k
    alpha = cfg.alpha if cfg.alpha is not None else 0.8 * alpha_bound(cfg.d, cfg.k, cfg.beta)
    params = NKParams(alpha, cfg.beta, g, sigma=cfg.sigma[0])
    v, w, A = stage_test_data(cfg.d, cfg.k, cfg.n, cfg.margin)
    try:
        vn, wn, trace = nash_kuiper(v, w, A, params)
    except MaciError as exc:
        tr = getattr(exc, "trace", None)
        if tr is not None:
            tr.to_csv(out / "trace.csv")
        raise
    trace.to_csv(out / "trace.csv")
    dump_field(vn, out / "v.fld")
    dump_field(wn, out / "w.fld")
    res = {"stopped": trace.stopped, "stages": len(trace.rows) - 1, "final_deficit": trace.deficits[-1],
           "decay_ratio": trace.decay_ratio(), "target_ratio": params.sigma ** (-params.delta_exp / 2)}
    _dump_json(out / "result.json", res)
    return res


def roundtrip_data(dom):
    """Smooth non-polynomial A0 (so the quadrature error is visible under refinement)."""
    from .fields import GridField, symmatrix

    X = dom.mesh()
    d = dom.d
    if d == 2:
        x, y = X
        comps = [np.sin(2 * x + y), np.cos(x * y), np.exp(0.5 * x - y)]
    else:
        comps = [np.sin((c + 1) * X[c % d] + X[(c + 1) % d]) for c in range(d * (d + 1) // 2)]
    return GridField(dom, symmatrix(d), np.stack(comps))


def run_ma_roundtrip(cfg: ExperimentConfig, out: Path) -> dict:
    from .fields import Domain, dump_field, sup_norm, write_norms_csv
    from .masystem import c2_operator, invert_c2

    if cfg.d < 2:
        raise ValidationError("ma-roundtrip needs d >= 2")
    rows = []
    for n in (cfg.n, 2 * cfg.n):
        dom = Domain.box(cfg.d, n, cfg.margin)
        F = c2_operator(roundtrip_data(dom))
        A = invert_c2(F)
        rows.append({"n": n, "roundtrip": sup_norm(c2_operator(A) - F), "scale": sup_norm(F)})
        if n == cfg.n:
            dump_field(A, out / "A.fld")
    write_norms_csv(out / "roundtrip.csv", rows)
    res = {"roundtrip": rows[0]["roundtrip"], "refined": rows[1]["roundtrip"],
           "gain": rows[0]["roundtrip"] / max(rows[1]["roundtrip"], 1e-300)}
    _dump_json(out / "result.json", res)
    return res


def run_density(cfg: ExperimentConfig, out: Path) -> dict:
    from .fields import Domain, constant, dump_field, vector
    from .masystem import curvature_field, weak_ma_solve

    if cfg.d != 2:
        raise ValidationError("density-demo runs on d = 2")
    dom = Domain.box(2, cfg.n, cfg.margin)
    F = curvature_field(dom, {((0, 1), (0, 1)): -1.0})
    vt = constant(dom, [0.0] * cfg.k, vector(cfg.k))
    kw = {"sigma": cfg.sigma[0]} if cfg.sigma else {}
    vn, wn, rep = weak_ma_solve(F, vt, cfg.eps, cfg.alpha, **kw)
    dump_field(vn, out / "v.fld")
    dump_field(wn, out / "w.fld")
    res = {"C": rep.C, "target_dist": rep.target_dist, "vk_residual": rep.vk_residual}
    _dump_json(out / "result.json", res)
    return res


def run_energy_scan(cfg: ExperimentConfig, out: Path) -> dict:
    from .fields import Domain
    from .films import FilmConfig, reference_prestrain, scaling_scan, solve_prestrain_vk, write_scan

    if (cfg.d, cfg.k) != (2, 1):
        raise ValidationError("energy-scan uses the built-in prestrain with d = 2, k = 1")
    dom = Domain.box(2, cfg.n, cfg.margin)
    S, v = reference_prestrain(dom)
    film = FilmConfig(2, 1, cfg.gamma[0], S, hs=tuple(cfg.hs), alpha=cfg.alpha, v_hint=v)
    sol = solve_prestrain_vk(S, cfg.alpha, 2, v)
    results = scaling_scan(film, gammas=list(cfg.gamma), solution=sol)
    write_scan(results, out / "energies.csv", out / "fit.json")
    return {"slopes": {repr(r.gamma): r.slope for r in results},
            "predicted": {repr(r.gamma): r.predicted for r in results}}


RUNNERS = {
    "step-verify": run_step_verify,
    "stage-slope": run_stage_slope,
    "nk-run": run_nk,
    "ma-roundtrip": run_ma_roundtrip,
    "density-demo": run_density,
    "energy-scan": run_energy_scan,
}


def run(cfg: ExperimentConfig) -> tuple:
    """Execute a validated config. Returns (exit status, result dict or error message)."""
    try:
        cfg = complete(cfg)
    except ValidationError as exc:
        return exc.exit_code, str(exc)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"config": serialize(cfg), "versions": {"maci": __version__, "python": platform.python_version(),
                                                       "numpy": np.__version__, "scipy": scipy.__version__}}
    t0 = time.perf_counter()
    np.random.seed(cfg.seed)
    try:
        result, status = RUNNERS[cfg.kind](cfg, out), 0
    except MaciError as exc:
        result, status = f"{type(exc).__name__}: {exc}", exc.exit_code
    manifest.update(status=status, seconds=time.perf_counter() - t0,
                    result=result if status == 0 else {"error": result})
    _dump_json(out / "manifest.json", manifest)
    return status, result


# --------------------------------------------------------------------------
# command line


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="maci", description="Convex integration experiments")
    sub = p.add_subparsers(dest="kind", required=True)
    for kind in KINDS:
        s = sub.add_parser(kind)
        s.add_argument("--config")
        for key in ("d", "k", "n", "seed", "margin"):
            s.add_argument(f"--{key}")
        for key in ("sigma", "alpha", "beta", "eps", "gamma", "hs", "out"):
            s.add_argument(f"--{key}")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        base = parse_config(args.config) if args.config else ExperimentConfig()
        if base.kind is not None and base.kind != args.kind:
            raise ValidationError(f"config names kind '{base.kind}' but the command is '{args.kind}'")
        flags = {key: _convert(key, val) for key, val in vars(args).items()
                 if key not in ("config", "kind") and val is not None}
        cfg = merge(base, ExperimentConfig(kind=args.kind, **flags))
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    status, result = run(cfg)
    if status == 0:
        print(json.dumps(result, sort_keys=True))
    else:
        print(f"error: {result}", file=sys.stderr)
    return status


if __name__ == "__main__":
    sys.exit(main())
