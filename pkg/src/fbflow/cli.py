"""Command line front end: config validation, pipelines and artifacts.

Every artifact embeds the hash of the config that produced it; with
--reference-mode the wall-clock fields are zeroed so reruns are bitwise
identical.
"""

import argparse
import hashlib
import json
import os
import re
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .domain import DataTriple, Domain, Field, NormKind, Trace, build_grid, norm
from .linearfb import CoefficientSet, LinearProblem, solve_linear
from .ortho import _cached_basis, decompose, ell_direct, ell_dual
from .profiles import get_profile, singular_profile
from . import nonlinear, verify


# ----------------------------------------------------------------------
# expression grammar


class ExprError(ValueError):
    def __init__(self, message, pos):
        super().__init__(f"parse error: {message} at position {pos}")
        self.pos = pos


_TOKEN = re.compile(
    r"\s*(?:(?P<num>\d+\.\d*(?:[eE][+-]?\d+)?|\.\d+(?:[eE][+-]?\d+)?"
    r"|\d+(?:[eE][+-]?\d+)?)|(?P<name>[A-Za-z_]+)|(?P<op>[-+*/^()]))"
)

_FUNCS = {"sin": np.sin, "cos": np.cos, "exp": np.exp}
_CONSTS = {"pi": np.pi, "e": np.e}


def _tokenize(text):
    tokens = []
    pos = 0
    while pos < len(text):
        if not text[pos:].strip():
            break
        m = _TOKEN.match(text, pos)
        if m is None or m.end() == m.start():
            at = pos + len(text[pos:]) - len(text[pos:].lstrip())
            raise ExprError(f"unexpected character {text[at]!r}", at)
        start = m.end() - len((m.group("num") or m.group("name") or m.group("op")))
        if m.group("num"):
            tokens.append(("num", float(m.group("num")), start))
        elif m.group("name"):
            tokens.append(("name", m.group("name"), start))
        else:
            tokens.append(("op", m.group("op"), start))
        pos = m.end()
    tokens.append(("end", None, len(text)))
    return tokens


class _Parser:
    """Recursive-descent parser for +,-,*,/,^, sin/cos/exp, pi/e, x, y."""

    def __init__(self, text):
        self.tokens = _tokenize(text)
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def take(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect_op(self, op):
        kind, val, pos = self.peek()
        if kind != "op" or val != op:
            raise ExprError(f"expected {op!r}", pos)
        return self.take()

    def parse(self):
        node = self.expr()
        kind, val, pos = self.peek()
        if kind != "end":
            raise ExprError(f"unexpected {val!r}", pos)
        return node

    def expr(self):
        node = self.term()
        while True:
            kind, val, _ = self.peek()
            if kind == "op" and val in "+-":
                self.take()
                node = ("bin", val, node, self.term())
            else:
                return node

    def term(self):
        node = self.unary()
        while True:
            kind, val, _ = self.peek()
            if kind == "op" and val in "*/":
                self.take()
                node = ("bin", val, node, self.unary())
            else:
                return node

    def unary(self):
        kind, val, pos = self.peek()
        if kind == "op" and val == "-":
            self.take()
            return ("neg", self.unary())
        return self.power()

    def power(self):
        base = self.atom()
        kind, val, _ = self.peek()
        if kind == "op" and val == "^":
            self.take()
            return ("bin", "^", base, self.unary())
        return base

    def atom(self):
        kind, val, pos = self.take()
        if kind == "num":
            return ("num", val)
        if kind == "name":
            if val in _FUNCS:
                self.expect_op("(")
                arg = self.expr()
                self.expect_op(")")
                return ("call", val, arg)
            if val in _CONSTS:
                return ("num", _CONSTS[val])
            if val in ("x", "y"):
                return ("var", val)
            raise ExprError(f"unknown name {val!r}", pos)
        if kind == "op" and val == "(":
            node = self.expr()
            self.expect_op(")")
            return node
        what = "end of input" if kind == "end" else repr(val)
        raise ExprError(f"expected a value, got {what}", pos)


def _eval_node(node, x, y):
    op = node[0]
    if op == "num":
        return node[1]
    if op == "var":
        return x if node[1] == "x" else y
    if op == "neg":
        return -_eval_node(node[1], x, y)
    if op == "call":
        return _FUNCS[node[1]](_eval_node(node[2], x, y))
    _, sym, a, b = node
    lhs = _eval_node(a, x, y)
    rhs = _eval_node(b, x, y)
    if sym == "+":
        return lhs + rhs
    if sym == "-":
        return lhs - rhs
    if sym == "*":
        return lhs * rhs
    if sym == "/":
        return lhs / rhs
    return lhs**rhs


def compile_expression(text):
    """Parse once, return an evaluator usable on scalars or arrays."""
    ast = _Parser(text).parse()
    return lambda x, y: _eval_node(ast, x, y)


def expression_eval(expr: str, x: float, y: float) -> float:
    return float(compile_expression(expr)(x, y))


# ----------------------------------------------------------------------
# config schema


class ConfigError(ValueError):
    pass


_KINDS = (
    "linear-shear",
    "linear-general",
    "nonlinear",
    "dual",
    "profiles",
    "decompose",
    "verify",
)

_TOP_KEYS = {
    "kind", "domain", "grid", "data", "coefficients", "tolerances",
    "out", "studies", "levels", "k",
}
_SECTION_KEYS = {
    "domain": {"x0", "x1"},
    "grid": {"nx", "ny", "grading"},
    "data": {"f", "delta0", "delta1"},
    "coefficients": {"alpha", "gamma1", "gamma2"},
    "tolerances": {"tol", "maxit", "eta"},
}
_NEEDS_GRID = {"linear-shear", "linear-general", "nonlinear", "dual", "decompose"}
_NEEDS_DATA = {"linear-shear", "linear-general", "nonlinear", "dual"}
_STUDIES = ("linear", "nonlinear", "symmetry", "dichotomy")


def _reject_unknown(section, mapping, allowed):
    for key in mapping:
        if key not in allowed:
            where = f"{section}.{key}" if section else key
            raise ConfigError(f"unknown config key: {where}")


def validate_config(raw: dict) -> dict:
    """Schema-check a config dict; returns it unchanged when valid."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    _reject_unknown("", raw, _TOP_KEYS)
    kind = raw.get("kind")
    if kind not in _KINDS:
        raise ConfigError(
            f"missing or invalid field: kind (expected one of {', '.join(_KINDS)})"
        )
    for name, allowed in _SECTION_KEYS.items():
        if name in raw:
            if not isinstance(raw[name], dict):
                raise ConfigError(f"field {name} must be an object")
            _reject_unknown(name, raw[name], allowed)
    if kind in _NEEDS_GRID:
        for req in ("domain", "grid"):
            if req not in raw:
                raise ConfigError(f"missing required field: {req}")
        for req in ("nx", "ny"):
            if req not in raw["grid"]:
                raise ConfigError(f"missing required field: grid.{req}")
        for req in ("x0", "x1"):
            if req not in raw["domain"]:
                raise ConfigError(f"missing required field: domain.{req}")
    if kind in _NEEDS_DATA and "data" not in raw:
        raise ConfigError("missing required field: data")
    if kind == "linear-general" and "coefficients" not in raw:
        raise ConfigError("missing required field: coefficients")
    if "studies" in raw:
        bad = [s for s in raw["studies"] if s not in _STUDIES]
        if bad:
            raise ConfigError(f"unknown study: {bad[0]}")
    if "k" in raw and raw["k"] not in (0, 1):
        raise ConfigError("field k must be 0 or 1")
    return raw


def _config_hash(raw: dict) -> str:
    canon = json.dumps(raw, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


def _load_config(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}")
    return validate_config(raw)


# ----------------------------------------------------------------------
# artifact writers


def _write_field_csv(path, field, cfg_hash):
    grid = field.grid
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# config:{cfg_hash}\n")
        fh.write("x,y,value\n")
        for i, xv in enumerate(grid.x):
            for j, yv in enumerate(grid.y):
                fh.write(f"{float(xv)!r},{float(yv)!r},{float(field.values[i, j])!r}\n")


def _write_report(path, payload, cfg_hash):
    payload = dict(payload)
    payload["config_hash"] = cfg_hash
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(payload, sort_keys=True, indent=2))
        fh.write("\n")


# ----------------------------------------------------------------------
# pipelines


def _build_grid(cfg):
    dom = Domain(float(cfg["domain"]["x0"]), float(cfg["domain"]["x1"]))
    gs = cfg["grid"]
    return build_grid(dom, int(gs["nx"]), int(gs["ny"]), gs.get("grading"))


def _build_triple(cfg, grid) -> DataTriple:
    data = cfg.get("data", {})
    fspec = data.get("f", "0")
    if isinstance(fspec, dict):
        _reject_unknown("data.f", fspec, {"singular_corner"})
        corner = fspec.get("singular_corner")
        if corner not in (0, 1):
            raise ConfigError("data.f.singular_corner must be 0 or 1")
        f = singular_profile(corner, grid).source
    else:
        X, Y = grid.meshgrid()
        f = Field(grid, np.broadcast_to(
            np.asarray(compile_expression(fspec)(X, Y), dtype=float), grid.shape
        ).copy())
    yp = grid.y[grid.iy0:]
    ym = grid.y[: grid.iy0 + 1]
    dom = grid.domain
    d0 = compile_expression(data.get("delta0", "0"))(dom.x0, yp)
    d1 = compile_expression(data.get("delta1", "0"))(dom.x1, ym)
    return DataTriple(
        f,
        Trace(grid, "sigma0", np.broadcast_to(np.asarray(d0, dtype=float), yp.shape).copy()),
        Trace(grid, "sigma1", np.broadcast_to(np.asarray(d1, dtype=float), ym.shape).copy()),
    )


def _build_coefficients(cfg, grid) -> CoefficientSet:
    if cfg["kind"] == "linear-shear":
        return CoefficientSet.shear(grid)
    spec = cfg["coefficients"]
    X, Y = grid.meshgrid()
    fields = {}
    for name in ("alpha", "gamma1", "gamma2"):
        vals = compile_expression(spec.get(name, "1" if name == "alpha" else "0"))(X, Y)
        fields[name] = Field(grid, np.broadcast_to(np.asarray(vals, dtype=float), grid.shape).copy())
    try:
        return CoefficientSet(
            fields["alpha"], fields["gamma1"], fields["gamma2"], provenance="config"
        )
    except ValueError as exc:
        raise ConfigError(f"invalid coefficients: {exc}")


def _tol(cfg, name, default):
    return cfg.get("tolerances", {}).get(name, default)


def _run_linear(cfg, out, cfg_hash, reference_mode):
    grid = _build_grid(cfg)
    triple = _build_triple(cfg, grid)
    coeffs = _build_coefficients(cfg, grid)
    u, stats = solve_linear(LinearProblem(coeffs, triple))
    _write_field_csv(os.path.join(out, "solution.csv"), u, cfg_hash)
    report = {
        "kind": cfg["kind"],
        "grid": {"nx": grid.nx, "ny": grid.ny},
        "residual_inf": stats.residual_inf,
        "n_unknowns": stats.n_unknowns,
        "factor_time_ms": 0.0 if reference_mode else stats.factor_time_ms,
        "solution_l2": norm(u, NormKind.L2),
    }
    _write_report(os.path.join(out, "report.json"), report, cfg_hash)
    return 0


def _run_nonlinear(cfg, out, cfg_hash, reference_mode):
    grid = _build_grid(cfg)
    triple = _build_triple(cfg, grid)
    basis = _cached_basis(grid)
    log_path = os.path.join(out, "iteration.jsonl")
    if os.path.exists(log_path):
        os.remove(log_path)
    u, nu0, nu1, state = nonlinear.nonlinear_solve(
        triple,
        tol=float(_tol(cfg, "tol", 1e-9)),
        maxit=int(_tol(cfg, "maxit", 12)),
        eta=float(_tol(cfg, "eta", 0.05)),
        basis=basis,
        log=log_path,
    )
    _write_field_csv(os.path.join(out, "solution.csv"), u, cfg_hash)
    report = {
        "kind": "nonlinear",
        "status": state.status,
        "iterations": state.n,
        "nu0": nu0,
        "nu1": nu1,
        "residual_l2": state.residual_l2,
        "diff_history": state.diff_history,
    }
    _write_report(os.path.join(out, "report.json"), report, cfg_hash)
    return 0


def _run_dual(cfg, out, cfg_hash, reference_mode):
    grid = _build_grid(cfg)
    triple = _build_triple(cfg, grid)
    coeffs = CoefficientSet.shear(grid)
    report = {"kind": "dual", "grid": {"nx": grid.nx, "ny": grid.ny}}
    for j in (0, 1):
        report[f"ell{j}_dual"] = ell_dual(j, triple, coeffs)
        report[f"ell{j}_direct"] = ell_direct(j, triple, coeffs)
    _write_report(os.path.join(out, "report.json"), report, cfg_hash)
    return 0


def _run_profiles(cfg, out, cfg_hash, reference_mode):
    k = int(cfg.get("k", 0))
    pf = get_profile(k)
    with open(os.path.join(out, f"profile{k}.csv"), "w", encoding="utf-8") as fh:
        fh.write(f"# config:{cfg_hash}\n")
        fh.write("t,G,Gprime\n")
        for t, gv, gp in zip(pf.t, pf.G, pf.Gp):
            fh.write(f"{float(t)!r},{float(gv)!r},{float(gp)!r}\n")
    report = {
        "kind": "profiles",
        "k": k,
        "lam": pf.lam,
        "ode_residual": pf.ode_residual,
        "G_left_end": float(pf(pf.t_left)),
        "G_right_end": float(pf(pf.t_right)),
        "G_at_zero": float(pf(0.0)),
    }
    _write_report(os.path.join(out, "report.json"), report, cfg_hash)
    return 0


def _run_decompose(cfg, out, cfg_hash, reference_mode):
    grid = _build_grid(cfg)
    if "data" in cfg:
        triple = _build_triple(cfg, grid)
    else:
        triple = DataTriple(
            singular_profile(0, grid).source,
            Trace.zeros(grid, "sigma0"),
            Trace.zeros(grid, "sigma1"),
        )
    dec = decompose(triple)
    _write_field_csv(os.path.join(out, "u_reg.csv"), dec.u_reg, cfg_hash)
    report = {"kind": "decompose", "c0": dec.c0, "c1": dec.c1}
    report.update(dec.report)
    _write_report(os.path.join(out, "report.json"), report, cfg_hash)
    return 0


def _study_linear(cfg):
    dom = Domain(0.0, 1.0)
    grading = {"kind": "corner", "q": 1.0, "fraction": 0.25}
    levels = cfg.get("levels", [65, 97, 129])
    grids = [build_grid(dom, n, n, grading) for n in levels]
    return "study_linear", verify.run_manufactured(verify.shear_linear_case(), grids)


def _study_nonlinear(cfg):
    dom = Domain(0.0, 1.0)
    levels = cfg.get("levels", [65, 97, 129])
    grids = [build_grid(dom, n, n, None) for n in levels]
    return "study_nonlinear", verify.run_manufactured(verify.nonlinear_case(1e-2), grids)


def _study_symmetry(cfg):
    dom = Domain(0.0, 1.0)
    grid = build_grid(dom, 65, 65, None)
    X, Y = grid.meshgrid()
    yp = grid.y[grid.iy0:]
    ym = grid.y[: grid.iy0 + 1]
    triple = DataTriple(
        Field(grid, np.sin(np.pi * X) * Y * (1 - Y**2) * (0.7 + 0.3 * X)),
        Trace(grid, "sigma0", yp**2 * (1 - yp)),
        Trace(grid, "sigma1", -(ym**2) * (1 + ym)),
    )
    gap = verify.symmetry_check(triple)
    report = verify.StudyReport(
        name="symmetry",
        levels=[{"nx": 65, "ny": 65, "sup_gap": gap}],
        orders={},
        target=1e-12,
        passed=bool(gap <= 1e-12),
    )
    return "study_symmetry", report


def _study_dichotomy(cfg):
    dom = Domain(0.0, 1.0)
    grading = {"kind": "corner", "q": 1.0, "fraction": 0.25}
    levels = cfg.get("levels", [129, 193, 257])
    grids = [build_grid(dom, n, n, grading) for n in levels]
    return "study_dichotomy", verify.dichotomy_experiment(grids)


_STUDY_RUNNERS = {
    "linear": _study_linear,
    "nonlinear": _study_nonlinear,
    "symmetry": _study_symmetry,
    "dichotomy": _study_dichotomy,
}


def _thread_cap() -> int:
    raw = os.environ.get("FBFLOW_THREADS", "1")
    try:
        cap = int(raw)
    except ValueError:
        raise ConfigError(f"FBFLOW_THREADS must be an integer, got {raw!r}")
    if cap < 1:
        raise ConfigError("FBFLOW_THREADS must be >= 1")
    return cap


def _run_verify(cfg, out, cfg_hash, reference_mode):
    names = cfg.get("studies", list(_STUDIES))
    runners = [_STUDY_RUNNERS[name] for name in names]
    cap = 1 if reference_mode else _thread_cap()
    if cap > 1:
        with ThreadPoolExecutor(max_workers=cap) as pool:
            results = list(pool.map(lambda fn: fn(cfg), runners))
    else:
        results = [fn(cfg) for fn in runners]
    all_passed = True
    for fname, report in results:
        all_passed &= bool(report.passed)
        path = os.path.join(out, f"{fname}.json")
        payload = json.loads(report.to_json())
        _write_report(path, payload, cfg_hash)
        if report.levels and "l2" in report.levels[0]:
            report.to_csv(os.path.join(out, f"{fname}.csv"))
    summary = {"kind": "verify", "studies": list(names), "passed": bool(all_passed)}
    _write_report(os.path.join(out, "report.json"), summary, cfg_hash)
    return 0 if all_passed else 2


_PIPELINES = {
    "linear-shear": _run_linear,
    "linear-general": _run_linear,
    "nonlinear": _run_nonlinear,
    "dual": _run_dual,
    "profiles": _run_profiles,
    "decompose": _run_decompose,
    "verify": _run_verify,
}

_SUBCOMMAND_KINDS = {
    "solve-linear": ("linear-shear", "linear-general"),
    "solve-nonlinear": ("nonlinear",),
    "dual": ("dual",),
    "profiles": ("profiles",),
    "decompose": ("decompose",),
    "verify": ("verify",),
}


def run(cfg: dict, out_dir=None, reference_mode=False) -> int:
    """Execute a validated config; returns the process exit status."""
    cfg_hash = _config_hash(cfg)
    out = out_dir or cfg.get("out") or "fbflow-out"
    os.makedirs(out, exist_ok=True)
    try:
        return _PIPELINES[cfg["kind"]](cfg, out, cfg_hash, reference_mode)
    except ExprError as exc:
        raise ConfigError(str(exc))
    except (np.linalg.LinAlgError, FloatingPointError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="fbflow",
        description="Forward-backward degenerate parabolic solver pipelines",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _SUBCOMMAND_KINDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="path to a JSON run config")
        p.add_argument("--out", default=None, help="output directory override")
        p.add_argument(
            "--reference-mode",
            action="store_true",
            help="single worker, zeroed timings, bitwise-reproducible artifacts",
        )
    args = parser.parse_args(argv)
    try:
        cfg = _load_config(args.config)
        allowed = _SUBCOMMAND_KINDS[args.command]
        if cfg["kind"] not in allowed:
            raise ConfigError(
                f"config kind {cfg['kind']!r} does not match subcommand "
                f"{args.command!r} (expected {' or '.join(allowed)})"
            )
        return run(cfg, out_dir=args.out, reference_mode=args.reference_mode)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
