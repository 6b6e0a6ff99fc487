"""Scenario files: a model section plus an ordered list of checks.

A scenario is YAML::

    name: chain_reference
    seed: 7
    model: {kind: chain, preset: reference3, n_steps: 60}
    checks:
      - {check: mixing, n_configs: 200}
      - {check: eta, T: 40}

Each check writes ``<k>_<check>.csv`` files (``repr`` floats, LF line
endings) and a JSON verdict. Output depends only on the scenario and seed.
"""

from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import yaml

from . import diffusion as dif
from .birth_death import BirthDeathModel, quenched_analysis, rate_fit, verify_segment_bound
from .errors import ConfigurationError, FKCError
from .eta import (
    eigen_residual,
    eta_extract,
    q_kernel_build,
    q_mixing_check,
    ratio_convergence_check,
    uniqueness_check,
)
from .measure import Measure, StateSpace
from .mixing import SLACK_TOL, Coefficients, contraction_sweep, mixing_report
from .models import PRESETS as CHAIN_PRESETS
from .models import REFERENCE_QUENCHED, birth_death_from_dict, two_state_ctmc
from .semigroup import discrete_chain_model
from .smc import replicates

SCENARIO_DIR = Path(__file__).with_name("scenarios")


class ScenarioParseError(ConfigurationError):
    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        where = f" (line {line}, column {column})" if line is not None else ""
        super().__init__(message + where)
        self.line = line
        self.column = column


def _rows_csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    return buf.getvalue()


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    return obj


@dataclass
class CheckResult:
    check: str
    status: str  # "pass" | "fail" | "inconclusive"
    summary: dict = field(default_factory=dict)
    csv: dict = field(default_factory=dict)
    failures: list = field(default_factory=list)
    warnings: list = field(default_factory=list)

    def verdict(self) -> dict:
        return _jsonable(
            {
                "check": self.check,
                "status": self.status,
                "summary": self.summary,
                "failures": self.failures,
                "warnings": self.warnings,
            }
        )


@dataclass
class Context:
    seed: int
    tolerance_scale: float = 1.0
    workers: int = 1

    def slack_tol(self, p) -> float:
        return float(p.get("slack_tol", SLACK_TOL)) * self.tolerance_scale

    def sigmas(self, p) -> float:
        return float(p.get("sigmas", 3.0)) * self.tolerance_scale


# models ------------------------------------------------------------------------


def build_model(section: dict, horizon=None):
    """Return ``(kind, object)`` where object is a model, a BirthDeathModel or a DiffusionSpec."""
    if not isinstance(section, dict) or "kind" not in section:
        raise ConfigurationError("model section needs a 'kind' (chain, ctmc, birth_death or diffusion)")
    kind = section["kind"]
    if kind == "chain":
        n_steps = int(horizon if horizon is not None else section.get("n_steps", 60))
        if "transition" in section:
            p = np.asarray(section["transition"], dtype=float)
            g = np.asarray(section.get("survival", np.ones(p.shape[0])), dtype=float)
            space = StateSpace(section.get("labels", list(range(p.shape[0]))))
            return kind, discrete_chain_model(space, n_steps, p, g, name=section.get("name", "chain"))
        preset = section.get("preset", "reference3")
        if preset not in CHAIN_PRESETS:
            raise ConfigurationError(f"unknown chain preset {preset!r}; known: {sorted(CHAIN_PRESETS)}")
        return kind, CHAIN_PRESETS[preset](n_steps=n_steps)
    if kind == "ctmc":
        h = float(horizon if horizon is not None else section.get("horizon", 5.0))
        return kind, two_state_ctmc(float(section.get("kappa", -1.0)), h, float(section.get("step", 0.25)))
    if kind == "birth_death":
        cfg = {**REFERENCE_QUENCHED, **{k: v for k, v in section.items() if k != "kind"}}
        if horizon is not None:
            cfg["horizon"] = float(horizon)
        bd, qc = birth_death_from_dict(cfg)
        bd.quenched_config = qc
        return kind, bd
    if kind == "diffusion":
        preset = section.get("preset", "reference")
        if preset not in dif.PRESETS:
            raise ConfigurationError(f"unknown diffusion preset {preset!r}; known: {sorted(dif.PRESETS)}")
        kw = {"dt": float(section.get("dt", 1e-3)), "horizon": float(horizon if horizon is not None else section.get("horizon", 10.0))}
        if "bins" in section:
            kw["bins"] = tuple(float(b) for b in section["bins"])
        return kind, dif.PRESETS[preset](**kw)
    raise ConfigurationError(f"unknown model kind {kind!r}")


def _finite_model(kind, obj):
    if kind == "birth_death":
        return obj.model
    if kind in ("chain", "ctmc"):
        return obj
    raise ConfigurationError(f"check needs a finite-state model, got {kind!r}")


# finite-state checks ---------------------------------------------------------------


def check_mixing(kind, obj, p, ctx: Context) -> CheckResult:
    model = _finite_model(kind, obj)
    coeffs = Coefficients(model)
    rep = mixing_report(model, coefficients=coeffs)
    rep.records = contraction_sweep(model, int(p.get("n_configs", 200)), int(p.get("seed", ctx.seed)), coeffs, ctx.workers)
    tol = ctx.slack_tol(p)
    fails = [f"s={s}: d'={dp!r} d={d!r}" for s, d, dp in zip(rep.indices, rep.d, rep.d_prime) if not 0 <= dp <= d <= 1]
    fails += [
        f"(s={r.s},t={r.t},T={r.T}) slack_k={r.slack_k!r} slack_phi={r.slack_phi!r}"
        for r in rep.records
        if min(r.slack_k, r.slack_phi) < -tol
    ]
    min_slack = min(min(r.slack_k, r.slack_phi) for r in rep.records) if rep.records else float("nan")
    warn = [] if all(rep.stabilized_d) else ["some coefficients did not stabilize within the grid"]
    return CheckResult(
        "mixing",
        "fail" if fails else "pass",
        {"model": model.name, "n_configs": len(rep.records), "min_slack": min_slack, "min_d": min(rep.d), "tolerance": tol},
        {"coefficients": rep.coefficients_csv(), "records": rep.records_csv()},
        fails,
        warn,
    )


def check_eta(kind, obj, p, ctx: Context) -> CheckResult:
    model = _finite_model(kind, obj)
    T = min(int(p.get("T", 40)), model.n_steps)
    x0 = int(p.get("x0", 0))
    tol = float(p.get("residual_tol", 1e-9)) * ctx.tolerance_scale
    eta = eta_extract(model, T, x0)
    worst, rows = 0.0, []
    for s in range(T + 1):
        r = max(eigen_residual(model, eta, s, t) for t in range(s, T + 1))
        rows.append((s, r))
        worst = max(worst, r)
    fails = [] if worst <= tol else [f"eigen residual {worst!r} above {tol!r}"]
    summary = {"T": T, "x0": x0, "max_residual": worst, "convergence": eta.convergence, "tolerance": tol}
    files = {"eta": eta.to_csv(model.space.labels), "residual": _rows_csv(["s", "max_residual"], rows)}
    if p.get("uniqueness", False):
        rng = np.random.default_rng([int(p.get("seed", ctx.seed)), 4])
        fb = rng.uniform(0.1, 5.0, model.n)
        Ts = [t for t in p.get("uniqueness_T", [10, 20, 40]) if t <= model.n_steps]
        seq = [uniqueness_check(model, t, np.ones(model.n), fb) for t in Ts]
        files["uniqueness"] = _rows_csv(["T", "discrepancy"], zip(Ts, seq))
        summary["uniqueness"] = seq
        if not all(a > b for a, b in zip(seq, seq[1:])) or not seq or seq[-1] > float(p.get("uniqueness_tol", 1e-6)):
            fails.append(f"uniqueness discrepancies {seq} not decreasing to the tolerance")
    return CheckResult("eta", "fail" if fails else "pass", summary, files, fails)


def check_qproc(kind, obj, p, ctx: Context) -> CheckResult:
    model = _finite_model(kind, obj)
    T = min(int(p.get("T", model.n_steps)), model.n_steps)
    qk = q_kernel_build(model, eta_extract(model, T))
    coeffs = Coefficients(model)
    rng = np.random.default_rng(int(p.get("seed", ctx.seed)))
    rows, fails = [], []
    tol = ctx.slack_tol(p)
    for _ in range(int(p.get("n_configs", 100))):
        s = int(rng.integers(0, T))
        t = int(rng.integers(s, T + 1))
        x, y = (int(v) for v in rng.integers(0, model.n, 2))
        r = q_mixing_check(qk, coeffs, s, t, x, y)
        rows.append((s, t, x, y, r.lhs, r.bound, r.slack))
        if r.slack < -tol:
            fails.append(f"(s={s},t={t},x={x},y={y}) slack={r.slack!r}")
    row_err = qk.max_row_error()
    if row_err > float(p.get("row_tol", 1e-10)):
        fails.append(f"Q-process rows off by {row_err!r}")
    return CheckResult(
        "qproc",
        "fail" if fails else "pass",
        {"T": T, "max_row_error": row_err, "min_slack": min(r[-1] for r in rows) if rows else float("nan"), "tolerance": tol},
        {"records": _rows_csv(["s", "t", "x", "y", "tv", "bound", "slack"], rows)},
        fails,
    )


def check_ratio(kind, obj, p, ctx: Context) -> CheckResult:
    model = _finite_model(kind, obj)
    coeffs = Coefficients(model)
    rng = np.random.default_rng(int(p.get("seed", ctx.seed)))
    n, u = model.n_steps, model.unit
    rows, fails, inconclusive = [], [], 0
    tol = ctx.slack_tol(p)
    for _ in range(int(p.get("n_configs", 100))):
        s = int(rng.integers(0, n - u + 1))
        t = int(rng.integers(s + u, n + 1))
        v = int(rng.integers(t, n + 1))
        x, y = (int(k) for k in rng.integers(0, model.n, 2))
        r = ratio_convergence_check(model, s, x, y, t, v, coeffs)
        rows.append((s, x, y, t, v, r.lhs, r.bound, r.slack, r.status))
        if r.status == "inconclusive":
            inconclusive += 1
        elif r.slack < -tol:
            fails.append(f"(s={s},x={x},y={y},t={t},u={v}) slack={r.slack!r}")
    ok = [r[7] for r in rows if r[8] == "ok"]
    status = "fail" if fails else ("inconclusive" if not ok else "pass")
    warn = [f"{inconclusive} configurations without a usable t1"] if inconclusive else []
    return CheckResult(
        "ratio",
        status,
        {"n_configs": len(rows), "min_slack": min(ok) if ok else float("nan"), "inconclusive": inconclusive},
        {"records": _rows_csv(["s", "x", "y", "t", "u", "lhs", "bound", "slack", "status"], rows)},
        fails,
        warn,
    )


def check_smc(kind, obj, p, ctx: Context) -> CheckResult:
    model = _finite_model(kind, obj)
    s = int(p.get("s", 0))
    t = min(int(p.get("t", 20)), model.n_steps)
    x0 = int(p.get("x0", 0))
    mu = Measure.dirac(model.space, index=x0)
    rep = replicates(
        model, mu, s, t, int(p.get("particles", 10_000)), int(p.get("replicates", 200)),
        p.get("scheme", "multinomial"), int(p.get("seed", ctx.seed)), ctx.workers,
    )
    k = ctx.sigmas(p)
    fails = []
    if not rep.normalizer_within(k):
        fails.append(f"normalizer mean {rep.mean!r} vs exact {rep.exact_normalizer!r} (se {rep.se!r})")
    if not rep.phi_within(k):
        fails.append(f"phi mean {rep.phi_mean.tolist()} vs exact {rep.exact_phi.tolist()}")
    return CheckResult(
        "smc",
        "fail" if fails else "pass",
        {
            "s": s, "t": t, "particles": int(p.get("particles", 10_000)), "replicates": rep.normalizers.size,
            "scheme": p.get("scheme", "multinomial"), "mean": rep.mean, "se": rep.se,
            "exact": rep.exact_normalizer, "z": rep.z_score, "phi_mean": rep.phi_mean, "phi_exact": rep.exact_phi,
        },
        {"replicates": rep.to_csv()},
        fails,
    )


def check_quenched(kind, obj, p, ctx: Context) -> CheckResult:
    if kind != "birth_death":
        raise ConfigurationError("quenched check needs a birth_death model")
    bd: BirthDeathModel = obj
    rep = quenched_analysis(bd, bd.quenched_config)
    model = bd.model
    mu1 = Measure.dirac(bd.space, 1)
    mu2 = Measure.dirac(bd.space, bd.spec.n_max)
    rec = verify_segment_bound(bd, rep, mu1, mu2, 0, model.n_steps)
    fit = rate_fit(bd, rep)
    fails = []
    tol = ctx.slack_tol(p)
    if rec.status == "inconclusive":
        status = "inconclusive"
    else:
        if not rec.c_prime > 0:
            fails.append(f"segment coefficient c'={rec.c_prime!r} not positive")
        if rec.slack < -tol:
            fails.append(f"segment product bound slack {rec.slack!r}")
        r2_min = float(p.get("r2_min", 0.9))
        if not (fit.slope < 0 and fit.r2 >= r2_min):
            fails.append(f"log-TV fit slope={fit.slope!r} r2={fit.r2!r} (need negative slope, r2 >= {r2_min})")
        status = "fail" if fails else "pass"
    seg_rows = [(a, b, d) for (a, b), d in zip(rec.segments, rec.segment_d)]
    return CheckResult(
        "quenched",
        status,
        {
            "A": rep.A, "t0": rep.t0, "gamma_one": rep.gamma_one, "gamma_F": rep.gamma_F, "lam": rep.lam,
            "lam_admissible": rep.lam_admissible, "c_prime": rec.c_prime, "tv": rec.lhs, "bound": rec.bound,
            "slack": rec.slack, "slope": fit.slope, "r2": fit.r2, "tail_mass": rep.tail_mass,
            "J_lambda": rep.sets.J_lambda, "J_b": rep.sets.J_b,
        },
        {
            "segments": _rows_csv(["start", "end", "d"], seg_rows),
            "rate_fit": _rows_csv(["N", "log_tv"], zip(fit.n_values, fit.log_tv)),
            "s_table": _rows_csv(["n", "S_n"], sorted(rep.s_table.items())),
        },
        fails,
        list(rep.warnings),
    )


# diffusion checks ----------------------------------------------------------------------


def _diffusion(kind, obj) -> dif.DiffusionSpec:
    if kind != "diffusion":
        raise ConfigurationError("diffusion checks need a diffusion model")
    return obj


def check_survival(kind, obj, p, ctx: Context) -> CheckResult:
    spec = _diffusion(kind, obj)
    if spec.name != "brownian":
        raise ConfigurationError("the survival check has a closed form only for the brownian preset")
    x, t = float(p.get("x", 0.5)), float(p.get("t", 0.5))
    n = int(p.get("n_paths", 100_000))
    dts = [float(d) for d in p.get("dts", [spec.dt])]
    k = ctx.sigmas(p)
    rows, fails = [], []
    for i, dt in enumerate(dts):
        r = dif.brownian_survival_check(x, t, dt, n, int(p.get("seed", ctx.seed)) + i, ctx.workers)
        rows.append((dt, r.estimate, r.se, r.exact, r.bias, r.allowance))
        if abs(r.bias) > k * r.se + r.allowance:
            fails.append(f"dt={dt}: |bias|={abs(r.bias)!r} above {k} se + allowance")
    if len(rows) >= 2:
        (_, _, se1, _, b1, _), (_, _, se2, _, b2, _) = rows[0], rows[1]
        if b2 > 0.5 * b1 + k * math.hypot(se2, 0.5 * se1):
            fails.append(f"bias did not halve: {b1!r} -> {b2!r}")
    return CheckResult(
        "survival",
        "fail" if fails else "pass",
        {"x": x, "t": t, "n_paths": n, "bias": [r[4] for r in rows], "se": [r[2] for r in rows]},
        {"survival": _rows_csv(["dt", "estimate", "se", "exact", "bias", "allowance"], rows)},
        fails,
    )


def check_small_x(kind, obj, p, ctx: Context) -> CheckResult:
    spec = _diffusion(kind, obj)
    xs = [float(x) for x in p.get("xs", [2.0**-k for k in range(1, 7)])]
    r = dif.check_small_x_bound(spec, float(p.get("t1", 1.0)), xs, int(p.get("n_paths", 20_000)), int(p.get("seed", ctx.seed)), workers=ctx.workers)
    fails = [] if r.passed else [f"A={r.A!r}, violations at {r.violations}"]
    warn = [f"log-log slope {r.loglog_slope:.3f} suggests p(x)/x grows as x -> 0"] if r.nonlinear else []
    return CheckResult(
        "small_x",
        "fail" if fails else "pass",
        {"A": r.A, "slope": r.loglog_slope, "slope_se": r.slope_se, "t1": r.t1},
        {"small_x": _rows_csv(["x", "p", "se"], zip(r.xs, r.p, r.se))},
        fails,
        warn,
    )


def check_escape(kind, obj, p, ctx: Context) -> CheckResult:
    spec = _diffusion(kind, obj)
    s_grid = [float(s) for s in p.get("s_grid", [0.0, math.pi / 2, math.pi, 3 * math.pi / 2])]
    xs = [float(x) for x in p.get("xs", [0.1, 0.2])]
    r = dif.check_escape_bound(
        spec, s_grid, xs, float(p.get("t1", 1.0)), float(p.get("eps", 0.1)),
        int(p.get("n_paths", 5000)), int(p.get("seed", ctx.seed)), ctx.workers,
    )
    rows = [(c.s, c.x, c.survivors, c.estimate, c.se, c.status) for c in r.cells]
    inconclusive = [c for c in r.cells if c.status != "ok"]
    if math.isnan(r.worst):
        status, fails = "inconclusive", []
    else:
        fails = [] if r.passed else [f"worst lower bound {r.worst_lower!r} not positive"]
        status = "fail" if fails else "pass"
    return CheckResult(
        "escape",
        status,
        {"worst": r.worst, "worst_lower": r.worst_lower, "eps": r.eps, "t1": r.t1},
        {"escape": _rows_csv(["s", "x", "survivors", "estimate", "se", "status"], rows)},
        fails,
        [f"{len(inconclusive)} cells without survivors"] if inconclusive else [],
    )


def check_tv(kind, obj, p, ctx: Context) -> CheckResult:
    spec = _diffusion(kind, obj)
    c = dif.tv_decay_curve(
        spec, float(p.get("s", 0.0)), float(p.get("x", 0.2)), float(p.get("y", 3.0)),
        [float(t) for t in p.get("t_list", [1, 2, 4, 8])], int(p.get("n_paths", 20_000)),
        int(p.get("seed", ctx.seed)), p.get("bins"), method=p.get("method", "fv"),
    )
    r2_min = float(p.get("r2_min", 0.8))
    if len(c.points) < 2:
        status, fails = "inconclusive", []
    else:
        fails = [] if (c.slope < 0 and c.r2 >= r2_min) else [f"slope={c.slope!r} r2={c.r2!r}"]
        status = "fail" if fails else "pass"
    return CheckResult("tv", status, {"slope": c.slope, "r2": c.r2, "points": len(c.points)}, {"tv": c.to_csv()}, fails)


CHECKS: dict[str, Callable] = {
    "mixing": check_mixing,
    "eta": check_eta,
    "qproc": check_qproc,
    "ratio": check_ratio,
    "smc": check_smc,
    "quenched": check_quenched,
    "survival": check_survival,
    "small_x": check_small_x,
    "escape": check_escape,
    "tv": check_tv,
}


# parsing and running ----------------------------------------------------------------------


@dataclass
class Scenario:
    name: str
    seed: int
    model: dict
    checks: list
    out: str | None = None
    tolerance_scale: float = 1.0


def parse_scenario(text: str, source: str = "<string>") -> Scenario:
    try:
        obj = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = mark.line + 1 if mark is not None else None
        col = mark.column + 1 if mark is not None else None
        raise ScenarioParseError(f"{source}: {getattr(exc, 'problem', None) or exc}", line, col) from None
    if not isinstance(obj, dict):
        raise ScenarioParseError(f"{source}: top level must be a mapping")
    for key in ("seed", "model", "checks"):
        if key not in obj:
            raise ScenarioParseError(f"{source}: missing required key {key!r}")
    if not isinstance(obj["seed"], int):
        raise ScenarioParseError(f"{source}: seed must be an explicit integer")
    checks = obj["checks"]
    if not isinstance(checks, list) or not checks:
        raise ScenarioParseError(f"{source}: checks must be a nonempty list")
    for c in checks:
        if not isinstance(c, dict) or c.get("check") not in CHECKS:
            name = c.get("check") if isinstance(c, dict) else c
            raise ScenarioParseError(f"{source}: unknown check {name!r}; known: {sorted(CHECKS)}")
    return Scenario(
        str(obj.get("name", Path(source).stem)),
        int(obj["seed"]),
        dict(obj["model"]),
        [dict(c) for c in checks],
        obj.get("out"),
        float(obj.get("tolerance_scale", 1.0)),
    )


def load_scenario(path) -> Scenario:
    path = Path(path)
    if not path.exists():
        shipped = SCENARIO_DIR / (path.name if path.suffix else path.name + ".yaml")
        if shipped.exists():
            path = shipped
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigurationError(f"cannot read scenario {path}: {exc}") from None
    return parse_scenario(text, str(path))


@dataclass
class RunResult:
    scenario: str
    results: list
    out_dir: Path | None

    @property
    def failed(self) -> list:
        return [r for r in self.results if r.status == "fail"]

    @property
    def exit_code(self) -> int:
        return 1 if self.failed else 0


def run_scenario(
    sc: Scenario,
    out_dir=None,
    *,
    seed: int | None = None,
    horizon=None,
    tolerance_scale: float | None = None,
    overrides: dict | None = None,
    workers: int = 1,
    log: Callable[[str], None] | None = None,
) -> RunResult:
    """Run every check in order; write CSV and JSON artifacts when ``out_dir`` is set."""
    ctx = Context(
        sc.seed if seed is None else seed,
        sc.tolerance_scale * (1.0 if tolerance_scale is None else tolerance_scale),
        workers,
    )
    kind, obj = build_model(sc.model, horizon)
    out = Path(out_dir) if out_dir is not None else (Path(sc.out) if sc.out else None)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    results = []
    for k, params in enumerate(sc.checks):
        params = {**params, **(overrides or {})}
        name = params["check"]
        t0 = time.perf_counter()
        try:
            res = CHECKS[name](kind, obj, params, ctx)
        except FKCError as exc:
            res = CheckResult(name, "fail", {}, {}, [f"{type(exc).__name__}: {exc}"])
        results.append(res)
        if log:
            log(f"{k}_{name}: {res.status} ({time.perf_counter() - t0:.1f}s)")
            for w in res.warnings:
                log(f"  warning: {w}")
            for f in res.failures:
                log(f"  failed: {f}")
        if out is not None:
            for label, text in res.csv.items():
                with open(out / f"{k}_{name}_{label}.csv", "w", newline="\n") as fh:
                    fh.write(text)
            with open(out / f"{k}_{name}.json", "w", newline="\n") as fh:
                json.dump(res.verdict(), fh, indent=1, sort_keys=True)
                fh.write("\n")
    if out is not None:
        summary = {"scenario": sc.name, "seed": ctx.seed, "checks": [r.verdict() for r in results]}
        with open(out / "verdict.json", "w", newline="\n") as fh:
            json.dump(_jsonable(summary), fh, indent=1, sort_keys=True)
            fh.write("\n")
    return RunResult(sc.name, results, out)
