"""Batch front end: parse a JSON run configuration, dispatch, write artifacts.

Commands
--------
riccati-solve   solve the backward Riccati system for a raw affine model
portfolio       solve a utility problem (value, strategy, optional price/hedge)
price           indifference prices: variance swaps (exponential) or
                change-of-numeraire values (power)
verify          Monte Carlo / residual audits: transform | martingale | drift-match
simulate        dump simulated paths to CSV

Flags: --config PATH, --out DIR, --seed N, --paths N, --steps N, --threads N,
--format {csv,json}.  Exit codes: 0 pass, 2 configuration error, 3 numerical
failure (blow-up or cross-check), 4 verification FAIL.

Configuration schema (version 1)
--------------------------------
Top level: ``schema_version`` (int, required), ``model``, ``horizon`` (float),
and per-command sections.  Matrices are row-major nested arrays; symmetric
slots are symmetrized on input with a warning when the asymmetry exceeds
1e-12.  All floating-point output is printed with 17 significant digits and
JSON keys are emitted in sorted order, so identical configurations and seeds
produce byte-identical payloads.

``model``: {"kind": "heston" | "bns" | "raw-affine", ...}
  heston:     alpha, b, drift_h, eta, rho, r0, [ordinary_exponential]
  bns:        lambda0, drift_h, b_jump, atoms: [{xi, weight}], eta, r0
  raw-affine: alpha, b, drift: {h} | {betas}, [m_atoms: [{xi, weight}]],
              [mu_atoms: [{xi, u}]], [trunc_radius]
``utility``: {"kind": "power" | "exponential", "gamma": g}
``endowment``: {a, sigma, o1, o2, [strike]} or
               {"variance_swap": {"asset": i, "strike": K}}
``numeraire``: {o1, o2, o3} (power change-of-numeraire legs)
``generator``: constant generator coefficients for riccati-solve
               (c_zz, c_zsqrtx, c_x, c_y, c_t, c_hzhz, c_hzz, c_hzsqrtx,
               a, sigma, o1, o2); time-dependent or jump coefficients are not
               representable in configuration files.
``terminal``: {"u": matrix, "v": float}
``solver``: {"steps", "method": "rk4" | "rk45" | "block-exp", "blowup_norm"}
``verification``: {"which": "transform" | "martingale" | "drift-match",
                   "paths", "seed", "steps", "u": matrix, "n_perturbed",
                   "samples"}
``simulate``: {"paths", "steps", "seed"}
``x_values``: list of wealth levels for value-function samples
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import affine_model, bsde, portfolio, riccati, simulator
from .affine_model import (
    AffineParams,
    BlowUpError,
    ConstantJumps,
    GeneralFormDrift,
    HFormDrift,
    LinearJumps,
    solve_transform,
    validate_admissibility,
)
from .bsde import classify_ratio, orient_ratio
from .portfolio import (
    BnsModel,
    EndowmentSpec,
    HestonModel,
    heston_power_numeraire_value,
    make_preset,
)
from .riccati import GeneratorCoeffs, RiccatiBlowUpError, solve_block_exp, solve_rk, validate_assumptions
from .simulator import BnsJumpSpec, CorrelationSpec, bns_functionals, heston_functionals, mean_stderr
from .symcone import symmetrize

SCHEMA_VERSION = 1

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_VERIFY_FAIL = 4


class ConfigError(ValueError):
    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


# -- deterministic serialization ------------------------------------------------------


def _fmt_float(x: float) -> str:
    if x != x:
        return "NaN"
    if x in (float("inf"), float("-inf")):
        return '"Infinity"' if x > 0 else '"-Infinity"'
    return format(float(x), ".17g")


def dump_json(obj, indent: int = 0) -> str:
    """Deterministic JSON: sorted keys, floats at 17 significant digits."""
    pad = "  " * indent
    pad_in = "  " * (indent + 1)
    if obj is None:
        return "null"
    if isinstance(obj, bool):
        return "true" if obj else "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return _fmt_float(float(obj))
    if isinstance(obj, str):
        out = obj.replace("\\", "\\\\").replace('"', '\\"').replace("\n", "\\n")
        return f'"{out}"'
    if isinstance(obj, np.ndarray):
        return dump_json(obj.tolist(), indent)
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        inner = ",\n".join(pad_in + dump_json(v, indent + 1) for v in obj)
        return "[\n" + inner + "\n" + pad + "]"
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = []
        for k in sorted(obj):
            items.append(pad_in + f'"{k}": ' + dump_json(obj[k], indent + 1))
        return "{\n" + ",\n".join(items) + "\n" + pad + "}"
    raise TypeError(f"cannot serialize {type(obj)!r}")


def write_json(path: str, obj) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dump_json(obj) + "\n")


def write_csv(path: str, header, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(format(float(x), ".17g") for x in row) + "\n")


# -- config parsing -------------------------------------------------------------------


class _Parser:
    def __init__(self, cfg: dict):
        self.cfg = cfg
        self.errors: list[str] = []
        self.warnings: list[str] = []

    def fail(self, msg: str) -> None:
        self.errors.append(msg)

    def require(self, section: dict, key: str, path: str):
        if key not in section:
            self.fail(f"missing '{path}.{key}'" if path else f"missing '{key}'")
            return None
        return section[key]

    def number(self, section, key, path, default=None, positive=False):
        if key not in section:
            if default is not None:
                return default
            self.fail(f"missing '{path}.{key}'")
            return 0.0
        try:
            v = float(section[key])
        except (TypeError, ValueError):
            self.fail(f"'{path}.{key}' must be a number")
            return 0.0
        if positive and v <= 0:
            self.fail(f"'{path}.{key}' must be > 0")
        return v

    def matrix(self, section, key, path, d=None, symmetric=False, default=None):
        if key not in section:
            if default is not None:
                return default
            self.fail(f"missing matrix '{path}.{key}'")
            return np.zeros((d or 1, d or 1))
        try:
            arr = np.array(section[key], dtype=float)
        except (TypeError, ValueError):
            self.fail(f"'{path}.{key}' is not a numeric matrix")
            return np.zeros((d or 1, d or 1))
        if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
            self.fail(f"'{path}.{key}' must be square, got shape {arr.shape}")
            return np.zeros((d or 1, d or 1))
        if d is not None and arr.shape[0] != d:
            self.fail(f"'{path}.{key}' must be {d}x{d}")
            return np.zeros((d, d))
        if symmetric:
            asym = float(np.max(np.abs(arr - arr.T))) if arr.size else 0.0
            if asym > 1e-12:
                self.warnings.append(f"symmetrized '{path}.{key}' (asymmetry {asym:.3e})")
            arr = symmetrize(arr)
        return arr

    def vector(self, section, key, path, d=None):
        if key not in section:
            self.fail(f"missing vector '{path}.{key}'")
            return np.zeros(d or 1)
        arr = np.atleast_1d(np.array(section[key], dtype=float))
        if d is not None and arr.shape != (d,):
            self.fail(f"'{path}.{key}' must have length {d}")
            return np.zeros(d)
        return arr


def load_config(path: str) -> dict:
    import json

    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def parse_model(p: _Parser):
    cfg = p.require(p.cfg, "model", "")
    if cfg is None:
        return None
    kind = cfg.get("kind")
    if kind not in ("heston", "bns", "raw-affine"):
        p.fail("'model.kind' must be heston | bns | raw-affine")
        return None
    try:
        if kind == "heston":
            alpha = p.matrix(cfg, "alpha", "model", symmetric=True)
            d = alpha.shape[0]
            params = AffineParams(
                alpha=alpha,
                b=p.matrix(cfg, "b", "model", d=d, symmetric=True),
                drift=HFormDrift(p.matrix(cfg, "drift_h", "model", d=d)),
            )
            return HestonModel(
                params=params,
                eta=p.vector(cfg, "eta", "model", d=d),
                corr=CorrelationSpec(p.vector(cfg, "rho", "model", d=d)),
                r0=p.matrix(cfg, "r0", "model", d=d, symmetric=True),
                ordinary_exponential=bool(cfg.get("ordinary_exponential", False)),
            )
        if kind == "bns":
            lam = p.matrix(cfg, "lambda0", "model", symmetric=True)
            d = lam.shape[0]
            atoms_cfg = cfg.get("atoms", [])
            if atoms_cfg:
                atoms = ConstantJumps.from_atoms(
                    [(p.matrix(a, "xi", f"model.atoms[{i}]", d=d, symmetric=True),
                      p.number(a, "weight", f"model.atoms[{i}]", positive=True))
                     for i, a in enumerate(atoms_cfg)]
                )
            else:
                atoms = ConstantJumps.empty(d)
            spec = BnsJumpSpec(
                lam=lam,
                lam_op=HFormDrift(p.matrix(cfg, "drift_h", "model", d=d)),
                b_j=p.matrix(cfg, "b_jump", "model", d=d, symmetric=True),
                m_j=atoms,
            )
            return BnsModel(
                spec=spec,
                eta=p.vector(cfg, "eta", "model", d=d),
                r0=p.matrix(cfg, "r0", "model", d=d, symmetric=True),
                ordinary_exponential=bool(cfg.get("ordinary_exponential", False)),
            )
        alpha = p.matrix(cfg, "alpha", "model", symmetric=True)
        d = alpha.shape[0]
        drift_cfg = cfg.get("drift", {})
        if "h" in drift_cfg:
            drift = HFormDrift(p.matrix(drift_cfg, "h", "model.drift", d=d))
        elif "betas" in drift_cfg:
            drift = GeneralFormDrift(np.array(drift_cfg["betas"], dtype=float))
        else:
            p.fail("'model.drift' needs 'h' or 'betas'")
            drift = HFormDrift(np.zeros((d, d)))
        m_atoms = cfg.get("m_atoms", [])
        m = (
            ConstantJumps.from_atoms(
                [(p.matrix(a, "xi", f"model.m_atoms[{i}]", d=d, symmetric=True),
                  p.number(a, "weight", f"model.m_atoms[{i}]", positive=True))
                 for i, a in enumerate(m_atoms)]
            )
            if m_atoms
            else ConstantJumps.empty(d)
        )
        mu_atoms = cfg.get("mu_atoms", [])
        mu = (
            LinearJumps.from_atoms(
                [(p.matrix(a, "xi", f"model.mu_atoms[{i}]", d=d, symmetric=True),
                  p.matrix(a, "u", f"model.mu_atoms[{i}]", d=d, symmetric=True))
                 for i, a in enumerate(mu_atoms)]
            )
            if mu_atoms
            else LinearJumps.empty(d)
        )
        return AffineParams(alpha=alpha, b=p.matrix(cfg, "b", "model", d=d, symmetric=True),
                            drift=drift, m=m, mu=mu,
                            trunc_radius=p.number(cfg, "trunc_radius", "model", default=1.0))
    except (ValueError, TypeError) as exc:
        p.fail(f"model construction failed: {exc}")
        return None


def parse_generator(p: _Parser, d: int) -> GeneratorCoeffs:
    cfg = p.cfg.get("generator", {})
    kw = {}
    for key in ("c_zz", "c_zsqrtx", "c_x", "c_hzhz", "c_hzz", "c_hzsqrtx", "a", "sigma", "o1", "o2"):
        if key in cfg:
            kw[key] = p.matrix(cfg, key, "generator", d=d)
    for key in ("c_y", "c_t"):
        if key in cfg:
            kw[key] = p.number(cfg, key, "generator")
    unknown = set(cfg) - {"c_zz", "c_zsqrtx", "c_x", "c_hzhz", "c_hzz", "c_hzsqrtx",
                          "a", "sigma", "o1", "o2", "c_y", "c_t"}
    if unknown:
        p.fail(f"unknown generator keys: {sorted(unknown)}")
    return GeneratorCoeffs.build(d, **kw)


def parse_endowment(p: _Parser, d: int, horizon: float):
    cfg = p.cfg.get("endowment")
    if cfg is None:
        return EndowmentSpec.zero(d), 0, 0.0
    if "variance_swap" in cfg:
        vs = cfg["variance_swap"]
        asset = int(vs.get("asset", 0))
        strike = p.number(vs, "strike", "endowment.variance_swap", default=0.0)
        if not 0 <= asset <= d:
            p.fail("'endowment.variance_swap.asset' out of range")
            asset = 0
        return EndowmentSpec.variance_swap(asset, d, horizon, strike), asset, strike
    z = np.zeros((d, d))
    endow = EndowmentSpec(
        a=p.matrix(cfg, "a", "endowment", d=d, default=z),
        sigma=p.matrix(cfg, "sigma", "endowment", d=d, default=z),
        o1=p.matrix(cfg, "o1", "endowment", d=d, default=z),
        o2=p.matrix(cfg, "o2", "endowment", d=d, default=z),
        strike=p.number(cfg, "strike", "endowment", default=0.0),
    )
    return endow, 0, endow.strike


def _finish_parse(p: _Parser):
    for w in p.warnings:
        print(f"warning: {w}", file=sys.stderr)
    if p.errors:
        raise ConfigError(p.errors)


def _check_schema(p: _Parser):
    v = p.cfg.get("schema_version")
    if v != SCHEMA_VERSION:
        p.fail(f"schema_version must be {SCHEMA_VERSION}, got {v!r}")


# -- commands ---------------------------------------------------------------------------


def _solver_opts(cfg: dict, args) -> dict:
    solver = dict(cfg.get("solver", {}))
    if args.steps:
        solver["steps"] = args.steps
    solver.setdefault("steps", 2000)
    solver.setdefault("method", "rk4")
    solver.setdefault("blowup_norm", 1e8)
    return solver


def cmd_riccati_solve(cfg: dict, args) -> int:
    p = _Parser(cfg)
    _check_schema(p)
    model = parse_model(p)
    horizon = p.number(cfg, "horizon", "", positive=True)
    if not isinstance(model, AffineParams):
        p.fail("riccati-solve requires model.kind = raw-affine")
        _finish_parse(p)
    coeffs = parse_generator(p, model.d)
    term = cfg.get("terminal", {})
    u = p.matrix(term, "u", "terminal", d=model.d, symmetric=True, default=np.zeros((model.d, model.d)))
    v = p.number(term, "v", "terminal", default=0.0)
    solver = _solver_opts(cfg, args)
    _finish_parse(p)

    summary = {"method": solver["method"], "horizon": horizon, "blow_up": None}
    try:
        if solver["method"] == "block-exp":
            sol = solve_block_exp(model, coeffs, horizon, steps=int(solver["steps"]))
        else:
            sol = solve_rk(model, coeffs, u, v, horizon, steps=int(solver["steps"]),
                           method=solver["method"], blowup_norm=float(solver["blowup_norm"]))
    except BlowUpError as exc:
        summary["blow_up"] = {"time": exc.time, "norm": exc.norm, "bound": exc.bound}
        write_json(os.path.join(args.out, "riccati_summary.json"), summary)
        print(f"blow-up detected at t={exc.time:.6g}", file=sys.stderr)
        return EXIT_NUMERICAL

    report = validate_assumptions(model, coeffs, T=horizon)
    summary["assumptions"] = {name: bool(c.passed) for name, c in report.checks.items()}
    summary["terminal_v"] = v
    summary["gamma0"] = sol.gammas[0]
    summary["w0"] = float(sol.w[0])
    if args.format == "json":
        summary["grid"] = sol.grid
        summary["w"] = sol.w
        summary["gammas"] = sol.gammas
    else:
        sol.to_csv(os.path.join(args.out, "riccati_solution.csv"))
    write_json(os.path.join(args.out, "riccati_summary.json"), summary)
    print(f"riccati-solve: {solver['method']} on [0, {horizon:g}], "
          f"gamma(0) trace = {np.trace(sol.gammas[0]):.6g}")
    return EXIT_OK


def _parse_utility(p: _Parser):
    cfg = p.require(p.cfg, "utility", "")
    if cfg is None:
        return None, 0.0
    kind = cfg.get("kind")
    if kind not in ("power", "exponential"):
        p.fail("'utility.kind' must be power | exponential")
        return None, 0.0
    gamma = p.number(cfg, "gamma", "utility", positive=True)
    if kind == "power" and not 0.0 < gamma < 1.0:
        p.fail("'utility.gamma' must lie in (0, 1) for power utility")
    return kind, gamma


def _build_preset(cfg: dict, args, steps_override=None):
    p = _Parser(cfg)
    _check_schema(p)
    model = parse_model(p)
    horizon = p.number(cfg, "horizon", "", positive=True)
    kind, gamma = _parse_utility(p)
    if isinstance(model, AffineParams):
        p.fail("portfolio commands need model.kind heston or bns")
        _finish_parse(p)
    endow, swap_asset, strike = parse_endowment(p, model.d if model else 1, horizon)
    solver = _solver_opts(cfg, args)
    if steps_override:
        solver["steps"] = steps_override
    _finish_parse(p)
    try:
        preset = make_preset(
            "config", model, kind, gamma, horizon, steps=int(solver["steps"]),
            endow=endow if not swap_asset else None, swap_asset=swap_asset, strike=strike,
        )
    except (RiccatiBlowUpError, BlowUpError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        raise
    return preset, cfg


def cmd_portfolio(cfg: dict, args) -> int:
    try:
        preset, _ = _build_preset(cfg, args)
    except (RiccatiBlowUpError, BlowUpError):
        return EXIT_NUMERICAL
    except RuntimeError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    solve = preset.solve
    xs = [float(x) for x in cfg.get("x_values", [0.5, 1.0, 2.0])]
    out = {
        "kind": solve.kind,
        "gamma": solve.gamma,
        "horizon": solve.horizon,
        "value_at": {format(x, ".17g"): solve.value_at(x) for x in xs},
        "price": solve.price,
        "diagnostics": {k: v for k, v in solve.diagnostics.items()
                        if isinstance(v, (int, float, str, dict))},
    }
    grid = solve.riccati.grid
    pis = solve.strategy_grid(grid)
    write_json(os.path.join(args.out, "portfolio.json"), out)
    d = pis.shape[1]
    write_csv(
        os.path.join(args.out, "strategy.csv"),
        ["t"] + [f"pi_{i}" for i in range(d)],
        np.column_stack([grid, pis]),
    )
    if solve.hedge is not None:
        hs = solve.hedge_grid(grid)
        write_csv(
            os.path.join(args.out, "hedge.csv"),
            ["t"] + [f"delta_{i}" for i in range(d)],
            np.column_stack([grid, hs]),
        )
    print(f"portfolio: {solve.kind} V(1) = {solve.value_at(1.0):.10g}"
          + (f", price = {solve.price:.10g}" if solve.price is not None else ""))
    return EXIT_OK


def cmd_price(cfg: dict, args) -> int:
    p = _Parser(cfg)
    _check_schema(p)
    model = parse_model(p)
    horizon = p.number(cfg, "horizon", "", positive=True)
    kind, gamma = _parse_utility(p)
    numeraire = cfg.get("numeraire")
    if kind == "power":
        if numeraire is None:
            p.fail("power-utility pricing needs a 'numeraire' section (o1, o2, o3)")
            _finish_parse(p)
        if not isinstance(model, HestonModel):
            p.fail("numeraire values require the heston model")
            _finish_parse(p)
        d = model.d
        o1 = p.matrix(numeraire, "o1", "numeraire", d=d)
        o2 = p.matrix(numeraire, "o2", "numeraire", d=d)
        o3 = p.matrix(numeraire, "o3", "numeraire", d=d)
        x = float(cfg.get("x_values", [1.0])[0])
        solver = _solver_opts(cfg, args)
        _finish_parse(p)
        value = heston_power_numeraire_value(model, gamma, o1, o2, o3, horizon, x,
                                             steps=int(solver["steps"]))
        write_json(os.path.join(args.out, "price.json"),
                   {"kind": "numeraire", "x": x, "price": value})
        print(f"price: numeraire value p({x:g}) = {value:.10g}")
        return EXIT_OK
    _finish_parse(p)
    try:
        preset, _ = _build_preset(cfg, args)
    except (RiccatiBlowUpError, BlowUpError):
        return EXIT_NUMERICAL
    solve = preset.solve
    price = 0.0 if solve.price is None else solve.price
    payload = {"kind": "variance_swap", "price": price}
    write_json(os.path.join(args.out, "price.json"), payload)
    if solve.hedge is not None:
        grid = solve.riccati.grid
        hs = solve.hedge_grid(grid)
        write_csv(os.path.join(args.out, "hedge.csv"),
                  ["t"] + [f"delta_{i}" for i in range(hs.shape[1])],
                  np.column_stack([grid, hs]))
    print(f"price: variance swap p = {price:.10g}")
    return EXIT_OK


def _verify_transform(cfg: dict, args, p: _Parser) -> tuple[dict, bool]:
    model = parse_model(p)
    horizon = p.number(cfg, "horizon", "", positive=True)
    ver = cfg.get("verification", {})
    n_paths = args.paths or int(ver.get("paths", 100000))
    seed = args.seed if args.seed is not None else int(ver.get("seed", 0))
    n_steps = args.steps or int(ver.get("steps", 500))
    if isinstance(model, AffineParams):
        params, r0 = model, p.matrix(cfg.get("model", {}), "r0", "model", d=model.d, symmetric=True)
    elif isinstance(model, HestonModel):
        params, r0 = model.params, model.r0
    else:
        params, r0 = model.spec.affine_params(), model.r0
    u = p.matrix(ver, "u", "verification", d=params.d, symmetric=True,
                 default=0.5 * np.eye(params.d))
    _finish_parse(p)

    exact = solve_transform(params, u, horizon, steps=2000).laplace(r0)
    if params.m.n:
        fn = bns_functionals(
            BnsJumpSpec(lam=np.zeros((params.d,) * 2), lam_op=params.drift,
                        b_j=params.b, m_j=params.m),
            r0, np.zeros(params.d), horizon, n_steps, np.zeros((1, params.d)), n_paths, seed,
            threads=args.threads,
        )
    else:
        fn = heston_functionals(
            params, r0, CorrelationSpec(np.zeros(params.d)), np.zeros(params.d),
            horizon, n_steps, np.zeros((1, params.d)), n_paths, seed, threads=args.threads,
        )
    vals = np.exp(-np.einsum("ij,bij->b", u, fn.r_terminal))
    mc, se = mean_stderr(vals)
    ok = abs(float(mc) - exact) <= 3.0 * float(se)
    report = {
        "which": "transform", "exact": exact, "mc": float(mc), "stderr": float(se),
        "abs_error": abs(float(mc) - exact), "paths": n_paths, "steps": n_steps, "seed": seed,
        "pass": bool(ok),
    }
    return report, ok


def _verify_martingale(cfg: dict, args, p: _Parser) -> tuple[dict, bool]:
    ver = cfg.get("verification", {})
    n_paths = args.paths or int(ver.get("paths", 100000))
    seed = args.seed if args.seed is not None else int(ver.get("seed", 0))
    n_steps = args.steps or int(ver.get("steps", 500))
    n_pert = int(ver.get("n_perturbed", 8))
    preset, _ = _build_preset(cfg, args)
    strategies = [preset.opt_strategy_grid(n_steps)]
    strategies += preset.perturbed_strategies(n_steps)[:n_pert]
    means, ses, l0 = preset.audit_strategies(strategies, n_paths=n_paths, seed=seed,
                                             n_steps=n_steps, threads=args.threads)
    rows = []
    ok = True
    for i in range(len(strategies)):
        ratio, se = orient_ratio(float(means[i]), float(ses[i]), l0)
        verdict = classify_ratio(ratio, se)
        name = "optimal" if i == 0 else f"perturbed_{i}"
        rows.append({"strategy": name, "ratio": ratio, "stderr": se, "verdict": verdict})
        if i == 0:
            ok = ok and verdict == "MARTINGALE"
        else:
            ok = ok and verdict in ("MARTINGALE", "SUPERMARTINGALE_OK")
    report = {"which": "martingale", "paths": n_paths, "steps": n_steps, "seed": seed,
              "results": rows, "pass": bool(ok)}
    return report, ok


def _verify_drift_match(cfg: dict, args, p: _Parser) -> tuple[dict, bool]:
    ver = cfg.get("verification", {})
    n_samples = int(ver.get("samples", 50))
    seed = args.seed if args.seed is not None else int(ver.get("seed", 0))
    preset, _ = _build_preset(cfg, args)
    stats = bsde.drift_match_stats(preset.bsde_eval(), n_samples=n_samples, seed=seed)
    ok = stats["max_rel_residual"] <= 1e-6
    report = {"which": "drift-match", "samples": n_samples, "seed": seed,
              "max_abs_residual": stats["max_abs_residual"],
              "max_rel_residual": stats["max_rel_residual"], "pass": bool(ok)}
    return report, ok


def cmd_verify(cfg: dict, args) -> int:
    p = _Parser(cfg)
    _check_schema(p)
    which = cfg.get("verification", {}).get("which")
    if which not in ("transform", "martingale", "drift-match"):
        p.fail("'verification.which' must be transform | martingale | drift-match")
        try:
            _finish_parse(p)
        except ConfigError as exc:
            print(f"configuration error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
    try:
        if which == "transform":
            report, ok = _verify_transform(cfg, args, p)
        elif which == "martingale":
            report, ok = _verify_martingale(cfg, args, p)
        else:
            report, ok = _verify_drift_match(cfg, args, p)
    except (RiccatiBlowUpError, BlowUpError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    write_json(os.path.join(args.out, "verify.json"), report)
    print(f"verify[{which}]: {'PASS' if ok else 'FAIL'}")
    if which == "transform":
        print(f"  exact {report['exact']:.8g}  mc {report['mc']:.8g} "
              f"(se {report['stderr']:.3g}, err {report['abs_error']:.3g})")
    elif which == "martingale":
        for row in report["results"]:
            print(f"  {row['strategy']:<12} ratio {row['ratio']:.6f} "
                  f"(se {row['stderr']:.2g})  {row['verdict']}")
    else:
        print(f"  max residual {report['max_abs_residual']:.3g} "
              f"(relative {report['max_rel_residual']:.3g})")
    return EXIT_OK if ok else EXIT_VERIFY_FAIL


def cmd_simulate(cfg: dict, args) -> int:
    p = _Parser(cfg)
    _check_schema(p)
    model = parse_model(p)
    horizon = p.number(cfg, "horizon", "", positive=True)
    sim = cfg.get("simulate", {})
    n_paths = args.paths or int(sim.get("paths", 8))
    seed = args.seed if args.seed is not None else int(sim.get("seed", 0))
    n_steps = args.steps or int(sim.get("steps", 100))
    _finish_parse(p)

    if isinstance(model, HestonModel):
        stream = simulator.simulate_wishart(model.params, model.r0, model.corr, model.eta_eff,
                                            horizon, n_steps, n_paths, seed)
    elif isinstance(model, BnsModel):
        stream = simulator.simulate_bns(model.spec, model.r0, model.eta_eff,
                                        horizon, n_steps, n_paths, seed)
    else:
        print("simulate requires model.kind heston or bns", file=sys.stderr)
        return EXIT_CONFIG
    d = model.d
    iu = list(zip(*np.triu_indices(d)))
    header = (["path", "t"] + [f"r_{i}{j}" for i, j in iu] + [f"n_{i}" for i in range(d)]
              + [f"o_{i}{j}" for i, j in iu])
    rows = []
    offset = 0
    for bundle in stream:
        for b in range(bundle.r.shape[0]):
            for k, t in enumerate(bundle.times):
                rows.append(
                    [offset + b, t]
                    + [bundle.r[b, k, i, j] for i, j in iu]
                    + list(bundle.n_log[b, k])
                    + [bundle.o[b, k, i, j] for i, j in iu]
                )
        offset += bundle.r.shape[0]
    write_csv(os.path.join(args.out, "paths.csv"), header, rows)
    print(f"simulate: wrote {n_paths} paths x {n_steps} steps")
    return EXIT_OK


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="affinebsde",
        description="Riccati/BSDE solvers and Monte Carlo verification for affine volatility models",
    )
    parser.add_argument("command", choices=["riccati-solve", "portfolio", "price", "verify", "simulate"])
    parser.add_argument("--config", required=True, help="JSON run configuration")
    parser.add_argument("--out", default=".", help="output directory")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--paths", type=int, default=None)
    parser.add_argument("--steps", type=int, default=None)
    parser.add_argument("--threads", type=int, default=1)
    parser.add_argument("--format", choices=["csv", "json"], default="csv")
    args = parser.parse_args(argv)

    try:
        cfg = load_config(args.config)
    except (OSError, ValueError) as exc:
        print(f"configuration error: cannot read config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    os.makedirs(args.out, exist_ok=True)

    dispatch = {
        "riccati-solve": cmd_riccati_solve,
        "portfolio": cmd_portfolio,
        "price": cmd_price,
        "verify": cmd_verify,
        "simulate": cmd_simulate,
    }
    try:
        return dispatch[args.command](cfg, args)
    except ConfigError as exc:
        for e in exc.errors:
            print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
