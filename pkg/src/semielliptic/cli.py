"""Batch front end: ``semielliptic <command> --config run.json [flags]``.

Commands write one CSV table (header row first) to --out or stdout.
Exit codes: 0 success, 2 invalid configuration, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
from dataclasses import asdict, dataclass, field, fields
import io
import json
import math
import os
import sys
import time
from typing import Optional

import numpy as np

from . import montecarlo as mc
from . import oracle, scheme
from .models import ModelError, hoermander_rank, invariant_subspace, model_from_config
from .payoffs import PayoffError, payoff_from_config
from .transport import FlowBlowUp

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


class ConfigError(ValueError):
    def __init__(self, path: str, msg: str):
        super().__init__(f"{path}: {msg}")
        self.path = path


@dataclass
class SchemeConfig:
    rho_candidates: list = field(default_factory=lambda: [1.0, 0.5, 0.25])
    T0: Optional[float] = None
    diff_nodes: int = 41
    comp_nodes: int = 21
    width: float = 5.0
    L_max: int = 8
    tol: float = 1e-8
    time_nodes: int = 8
    sweep: list = field(default_factory=list)  # [[rho, T0], ...] for series-study


@dataclass
class MCConfig:
    paths: int = 100_000
    seed: int = 0
    corrections: int = 0


@dataclass
class RunConfig:
    model: dict
    payoff: dict = field(default_factory=lambda: {"name": "constant", "value": 1.0})
    T: float = 1.0
    x0: Optional[list] = None
    scheme: SchemeConfig = field(default_factory=SchemeConfig)
    mc: MCConfig = field(default_factory=MCConfig)
    coords: list = field(default_factory=lambda: [0])
    ladder: list = field(default_factory=lambda: [2.0 ** -k for k in range(3, 8)])
    points: list = field(default_factory=list)
    depth: int = 0
    out: Optional[str] = None

    # serialization -----------------------------------------------------
    def to_dict(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        if not isinstance(raw, dict):
            raise ConfigError("<root>", "config must be a JSON object")
        if "model" not in raw:
            raise ConfigError("model", "missing key")
        known = {f.name for f in fields(cls)}
        extra = set(raw) - known
        if extra:
            raise ConfigError(sorted(extra)[0], "unknown key")
        kw = dict(raw)
        kw["scheme"] = _sub(SchemeConfig, raw.get("scheme", {}), "scheme")
        kw["mc"] = _sub(MCConfig, raw.get("mc", {}), "mc")
        return cls(**kw)

    @classmethod
    def loads(cls, text: str) -> "RunConfig":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError("<root>", f"invalid JSON: {exc.msg} (line {exc.lineno})") from None
        return cls.from_dict(raw)

    # validation --------------------------------------------------------
    def validate(self) -> None:
        if not isinstance(self.model, dict) or "model_kind" not in self.model:
            raise ConfigError("model.model_kind", "missing key")
        if not isinstance(self.payoff, dict) or "name" not in self.payoff:
            raise ConfigError("payoff.name", "missing key")
        _positive("T", self.T, allow_zero=True)
        s, m = self.scheme, self.mc
        if not s.rho_candidates:
            raise ConfigError("scheme.rho_candidates", "empty list")
        for i, r in enumerate(s.rho_candidates):
            if not (isinstance(r, (int, float)) and 0 < r <= 1):
                raise ConfigError(f"scheme.rho_candidates[{i}]", f"must lie in (0, 1], got {r!r}")
        if s.T0 is not None:
            _positive("scheme.T0", s.T0)
        for name in ("diff_nodes", "comp_nodes"):
            v = getattr(s, name)
            if not (isinstance(v, int) and v >= 5):
                raise ConfigError(f"scheme.{name}", f"need an integer >= 5, got {v!r}")
        _positive("scheme.width", s.width)
        if not (isinstance(s.L_max, int) and s.L_max >= 0):
            raise ConfigError("scheme.L_max", f"need a nonnegative integer, got {s.L_max!r}")
        _positive("scheme.tol", s.tol, allow_zero=True)
        if not (isinstance(s.time_nodes, int) and s.time_nodes >= 2 and s.time_nodes % 2 == 0):
            raise ConfigError("scheme.time_nodes", f"need an even integer >= 2, got {s.time_nodes!r}")
        for i, pair in enumerate(s.sweep):
            if not (isinstance(pair, (list, tuple)) and len(pair) == 2 and 0 < pair[0] <= 1 and pair[1] > 0):
                raise ConfigError(f"scheme.sweep[{i}]", f"need [rho in (0,1], T0 > 0], got {pair!r}")
        if not (isinstance(m.paths, int) and m.paths >= 1):
            raise ConfigError("mc.paths", f"need a positive integer, got {m.paths!r}")
        if not (isinstance(m.seed, int) and 0 <= m.seed < 2 ** 64):
            raise ConfigError("mc.seed", f"need an unsigned 64-bit integer, got {m.seed!r}")
        if m.corrections not in (0, 1):
            raise ConfigError("mc.corrections", "must be 0 or 1")
        if not (isinstance(self.depth, int) and self.depth >= 0):
            raise ConfigError("depth", f"need a nonnegative integer, got {self.depth!r}")
        for i, dt in enumerate(self.ladder):
            _positive(f"ladder[{i}]", dt)

    # builders ----------------------------------------------------------
    def build(self):
        try:
            model = model_from_config(self.model)
        except KeyError as exc:
            raise ConfigError(f"model.{exc.args[0]}", "missing key") from None
        except ModelError as exc:
            raise ConfigError("model", str(exc)) from None
        try:
            payoff = payoff_from_config(self.payoff, model)
        except KeyError as exc:
            raise ConfigError(f"payoff.{exc.args[0]}", "missing key") from None
        except PayoffError as exc:
            raise ConfigError("payoff", str(exc)) from None
        if self.x0 is not None:
            x0 = np.asarray(self.x0, dtype=float)
        elif "z0" in model.params:
            x0 = np.asarray(model.params["z0"], dtype=float)
        else:
            x0 = np.zeros(model.n)
        if x0.shape != (model.n,):
            raise ConfigError("x0", f"need {model.n} coordinates, got {list(np.shape(x0))}")
        for i, c in enumerate(self.coords):
            if not (isinstance(c, int) and 0 <= c < model.n):
                raise ConfigError(f"coords[{i}]", f"coordinate out of range for n={model.n}")
        return model, payoff, x0


def _sub(cls, raw, path):
    if not isinstance(raw, dict):
        raise ConfigError(path, "must be an object")
    known = {f.name for f in fields(cls)}
    for k in raw:
        if k not in known:
            raise ConfigError(f"{path}.{k}", "unknown key")
    return cls(**raw)


def _positive(path, v, allow_zero=False):
    ok = isinstance(v, (int, float)) and math.isfinite(v) and (v >= 0 if allow_zero else v > 0)
    if not ok:
        raise ConfigError(path, f"must be {'nonnegative' if allow_zero else 'positive'}, got {v!r}")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return v


def _grid(cfg: RunConfig, model, x0, horizon):
    s = cfg.scheme
    return scheme.GridSpec.around(model, x0, horizon, s.diff_nodes, s.comp_nodes, s.width)


def _plan(cfg: RunConfig, model, payoff, grid):
    """Pick (rho, T0, n_steps) with n_steps * rho * T0 = T."""
    s = cfg.scheme
    T0 = s.T0 if s.T0 is not None else cfg.T
    if len(s.rho_candidates) == 1:
        rho = float(s.rho_candidates[0])
    else:
        rho = scheme.select_rho(model, payoff, grid, s.rho_candidates, T0=T0, time_nodes=s.time_nodes)
    n = cfg.T / (rho * T0)
    if not math.isclose(n, round(n), rel_tol=1e-9) or round(n) < 1:
        raise ConfigError("scheme.T0", f"T={cfg.T} is not a whole number of steps rho*T0={rho * T0}")
    return rho, T0, int(round(n))


def cmd_price(cfg: RunConfig, threads: int = 1):
    model, payoff, x0 = cfg.build()
    if cfg.T == 0:
        v = float(payoff(x0))
        return ("method", "value", "std_error", "paths", "seed", "rho", "T0", "n_steps", "truncation_level",
                "ratio", "term_norms"), [("scheme", v, 0.0, "", "", "", "", 0, 0, 0.0, ""),
                                         ("mc", v, 0.0, cfg.mc.paths, cfg.mc.seed, "", "", "", "", "", "")]
    grid = _grid(cfg, model, x0, cfg.T)
    rho, T0, n_steps = _plan(cfg, model, payoff, grid)
    sols = scheme.time_march(model, payoff, cfg.T, n_steps, scheme.DilatationParams(rho, T0), grid,
                             cfg.scheme.L_max, cfg.scheme.tol, time_nodes=cfg.scheme.time_nodes)
    last = sols[-1]
    norms = ";".join(_fmt(v) for v in last.term_norms)
    header = ("method", "value", "std_error", "paths", "seed", "rho", "T0", "n_steps", "truncation_level",
              "ratio", "term_norms")
    rows = [("scheme", last.value_at(x0), 0.0, "", "", rho, T0, n_steps, last.truncation_level, last.ratio, norms)]
    est = mc.price_first_order(model, payoff, cfg.T, x0, cfg.mc.paths, cfg.mc.seed, threads=threads)
    rows.append(("mc_first_order", est.value, est.std_error, est.paths, est.seed, "", "", "", "", "", ""))
    if cfg.mc.corrections and n_steps == 1:
        m_rho = scheme.dilatate(model, rho)
        corr = mc.correction_term(m_rho, 1, mc.GridTermEvaluator(model, sols[0], 0), T0, x0,
                                  cfg.mc.paths, cfg.mc.seed, threads=threads)
        se = math.hypot(est.std_error, corr.std_error)
        rows.append(("mc_corrected", est.value + corr.value, se, est.paths, est.seed, "", "", "", "", "", ""))
    return header, rows


def cmd_greeks(cfg: RunConfig, threads: int = 1):
    model, payoff, x0 = cfg.build()
    if not cfg.T > 0:
        raise ConfigError("T", "greeks need T > 0")
    p, seed = cfg.mc.paths, cfg.mc.seed
    header = ("estimator", "coord", "value", "std_error", "variance", "paths", "seed")
    rows = []
    for c in cfg.coords:
        a = mc.delta_naive(model, payoff, cfg.T, x0, c, p, seed, threads=threads)
        b = mc.delta_controlled(model, payoff, None, cfg.T, x0, c, p, seed, threads=threads)
        # FD on the fixed-seed first-order price: common random numbers by construction
        pricer = lambda x: mc.price_first_order(model, payoff, cfg.T, x, p, seed, threads=threads).value  # noqa: E731
        fd = oracle.fd_greek(pricer, x0, c)
        rows += [("naive", c, a.value, a.std_error, a.variance, p, seed),
                 ("controlled", c, b.value, b.std_error, b.variance, p, seed),
                 ("fd", c, fd, "", "", p, seed)]
    return header, rows


def cmd_series_study(cfg: RunConfig, threads: int = 1):
    model, payoff, x0 = cfg.build()
    sweep = cfg.scheme.sweep
    if not sweep:
        raise ConfigError("scheme.sweep", "empty sweep")
    header = ("rho", "T0", "term", "norm", "ratio", "truncation_level")
    rows = []
    for rho, T0 in sweep:
        grid = _grid(cfg, model, x0, rho * T0)
        sol = scheme.run_series(model, payoff, scheme.DilatationParams(rho, T0), grid, cfg.scheme.L_max,
                                cfg.scheme.tol, time_nodes=cfg.scheme.time_nodes, fail_ratio=False)
        if not sol.term_norms:
            rows.append((rho, T0, 0, 0.0, sol.ratio, 0))
        for i, v in enumerate(sol.term_norms, start=1):
            rows.append((rho, T0, i, v, sol.ratio, sol.truncation_level))
    return header, rows


def cmd_order_study(cfg: RunConfig, threads: int = 1):
    model, _, x0 = cfg.build()
    if not cfg.T > 0:
        raise ConfigError("T", "order study needs T > 0")
    if len(cfg.ladder) < 3:
        raise ConfigError("ladder", "need at least 3 step sizes")
    if model.exact_solution is None:
        raise ConfigError("model.model_kind", f"{model.name!r} has no pathwise exact solution")
    res = oracle.strong_order(model, x0, cfg.T, cfg.ladder, cfg.mc.paths, cfg.mc.seed)
    rows = [("error", dt, e) for dt, e in zip(res.dts, res.errors)] + [("gamma", "", res.gamma)]
    return ("kind", "dt", "value"), rows


def cmd_rank(cfg: RunConfig, threads: int = 1):
    model, _, x0 = cfg.build()
    pts = [np.asarray(p, dtype=float) for p in cfg.points] or [x0]
    for i, p in enumerate(pts):
        if p.shape != (model.n,):
            raise ConfigError(f"points[{i}]", f"need {model.n} coordinates")
    rows = [("rank", i, ";".join(_fmt(float(v)) for v in p), hoermander_rank(model, p, cfg.depth))
            for i, p in enumerate(pts)]
    basis = invariant_subspace(model, pts, cfg.depth)
    rows.append(("invariant_dim", "", "", basis.shape[1]))
    return ("kind", "point", "x", "value"), rows


COMMANDS = {
    "price": cmd_price,
    "greeks": cmd_greeks,
    "series-study": cmd_series_study,
    "order-study": cmd_order_study,
    "rank": cmd_rank,
}


def write_csv(header, rows, stream) -> None:
    w = csv.writer(stream, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="semielliptic", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", required=True, help="JSON run configuration")
    ap.add_argument("--out", help="CSV output path (default: stdout)")
    ap.add_argument("--seed", type=int, help="override mc.seed")
    ap.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    ap.add_argument("--paths", type=int, help="override mc.paths")
    ap.add_argument("--rho", type=float, help="fix rho instead of probing candidates")
    ap.add_argument("--t0", type=float, help="override scheme.T0")
    ap.add_argument("--tol", type=float, help="override scheme.tol")
    return ap


def load_config(args) -> RunConfig:
    try:
        with open(args.config, encoding="utf-8") as fh:
            cfg = RunConfig.loads(fh.read())
    except OSError as exc:
        raise ConfigError("--config", str(exc)) from None
    except TypeError as exc:
        raise ConfigError("<root>", str(exc)) from None
    if args.seed is not None:
        cfg.mc.seed = args.seed
    if args.paths is not None:
        cfg.mc.paths = args.paths
    if args.rho is not None:
        cfg.scheme.rho_candidates = [args.rho]
    if args.t0 is not None:
        cfg.scheme.T0 = args.t0
    if args.tol is not None:
        cfg.scheme.tol = args.tol
    if args.out is not None:
        cfg.out = args.out
    if args.threads < 1:
        raise ConfigError("--threads", f"need a positive integer, got {args.threads}")
    cfg.validate()
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args)
        t = time.perf_counter()
        header, rows = COMMANDS[args.command](cfg, threads=args.threads)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (scheme.SeriesDivergence, FloatingPointError, FlowBlowUp, np.linalg.LinAlgError,
            scheme.GridError, PayoffError, ValueError) as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    buf = io.StringIO()
    write_csv(header, rows, buf)
    if cfg.out:
        with open(cfg.out, "w", encoding="utf-8", newline="") as fh:
            fh.write(buf.getvalue())
    else:
        sys.stdout.write(buf.getvalue())
    print(f"{args.command}: {len(rows)} rows in {time.perf_counter() - t:.2f}s", file=sys.stderr)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
