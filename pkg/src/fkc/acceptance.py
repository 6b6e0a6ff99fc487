"""The acceptance suite: one function per criterion, each returning a verdict.

``scale`` multiplies every Monte Carlo sample size (paths, particles);
smaller values widen the confidence intervals without changing the
tolerances expressed in standard errors.
"""

from __future__ import annotations

import filecmp
import math
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import diffusion as dif
from .birth_death import (
    first_passage_levels,
    hitting_exp_moment,
    polynomial_rates,
    quenched_analysis,
    rate_fit,
    s_series,
    verify_segment_bound,
)
from .eta import (
    eigen_residual,
    eta_extract,
    q_kernel_build,
    q_mixing_check,
    ratio_convergence_check,
    uniqueness_check,
)
from .measure import Measure
from .mixing import SLACK_TOL, Coefficients, contraction_sweep, mixing_report
from .models import PRESETS, reference_chain, reference_quenched, two_state_ctmc
from .scenario import load_scenario, run_scenario
from .smc import replicates


@dataclass
class Criterion:
    cid: int
    title: str
    run: Callable
    time_limit: float | None = None


@dataclass
class Verdict:
    cid: int
    title: str
    passed: bool
    detail: str
    seconds: float
    time_limit: float | None = None

    @property
    def within_time(self) -> bool:
        return self.time_limit is None or self.seconds <= self.time_limit

    def line(self) -> str:
        tag = "PASS" if self.passed and self.within_time else "FAIL"
        lim = f"/{self.time_limit:.0f}s" if self.time_limit else ""
        return f"[{tag}] {self.cid:2d} {self.title}: {self.detail} ({self.seconds:.1f}s{lim})"


def _n(base: int, scale: float, floor: int = 100) -> int:
    return max(floor, int(round(base * scale)))


def _quenched():
    return reference_quenched()


def c01_contraction(scale=1.0):
    worst = []
    for model in (reference_chain(60), _quenched()[0].model):
        recs = contraction_sweep(model, 200, 1, Coefficients(model))
        worst.append(min(min(r.slack_k, r.slack_phi) for r in recs))
    return min(worst) >= -SLACK_TOL, f"min slack chain={worst[0]:.3g}, birth-death={worst[1]:.3g}"


def shipped_models():
    out = [f(n_steps=40) for f in PRESETS.values()]
    out.append(two_state_ctmc())
    out.append(_quenched()[0].model)
    return out


def c02_ordering(scale=1.0):
    bad, count = [], 0
    for m in shipped_models():
        rep = mixing_report(m)
        count += len(rep.indices)
        bad += [f"{m.name}@{s}" for s, d, dp in zip(rep.indices, rep.d, rep.d_prime) if not 0.0 <= dp <= d <= 1.0]
    return not bad, f"{count} indices checked, {len(bad)} violations" + (f": {bad[:3]}" if bad else "")


def c03_eigen(scale=1.0):
    worst = 0.0
    for f in PRESETS.values():
        m = f(n_steps=40)
        eta = eta_extract(m, 40)
        for s in range(41):
            for t in range(s, 41):
                worst = max(worst, eigen_residual(m, eta, s, t))
    return worst <= 1e-9, f"max residual {worst:.3g}"


def c04_uniqueness(scale=1.0):
    m = reference_chain(40)
    fb = np.random.default_rng(2).uniform(0.1, 5.0, 3)
    seq = [uniqueness_check(m, T, np.ones(3), fb) for T in (10, 20, 40)]
    ok = seq[0] > seq[1] > seq[2] and seq[2] <= 1e-6
    return ok, "discrepancies " + ", ".join(f"{v:.3g}" for v in seq)


def c05_qprocess(scale=1.0):
    m = reference_chain(60)
    qk = q_kernel_build(m, eta_extract(m, 60))
    coeffs = Coefficients(m)
    rng = np.random.default_rng(3)
    worst = math.inf
    for _ in range(100):
        s = int(rng.integers(0, 60))
        t = int(rng.integers(s, 61))
        x, y = (int(v) for v in rng.integers(0, 3, 2))
        worst = min(worst, q_mixing_check(qk, coeffs, s, t, x, y).slack)
    err = qk.max_row_error()
    return err <= 1e-10 and worst >= -SLACK_TOL, f"row error {err:.2g}, min slack {worst:.3g}"


def c06_ratio(scale=1.0):
    m = reference_chain(60)
    c = Coefficients(m)
    rng = np.random.default_rng(5)
    worst, inconclusive = math.inf, 0
    for _ in range(100):
        s = int(rng.integers(0, 55))
        t = int(rng.integers(s + 1, 61))
        u = int(rng.integers(t, 61))
        x, y = (int(v) for v in rng.integers(0, 3, 2))
        r = ratio_convergence_check(m, s, x, y, t, u, c)
        if r.status == "inconclusive":
            inconclusive += 1
        else:
            worst = min(worst, r.slack)
    return worst >= -SLACK_TOL and inconclusive == 0, f"min slack {worst:.3g}, inconclusive {inconclusive}"


FAVORABLE = polynomial_rates(1.0, 1.0, 0.5)


def c07_s_series(scale=1.0):
    n_max, ns = 30, list(range(2, 9))
    n_paths = _n(10_000, scale)
    hits = first_passage_levels(FAVORABLE, n_max, [n - 1 for n in ns], n_paths, seed=17)
    worst = 0.0
    for c, n in enumerate(ns):
        r = s_series(FAVORABLE, n, n_max)
        h = hits[:, c]
        se = h.std(ddof=1) / math.sqrt(h.size)
        worst = max(worst, abs(h.mean() - r.value) / (3 * (se + r.tail)))
    return worst <= 1.0, f"worst |S - MC| / 3(SE + tail) = {worst:.3f}"


def c08_exp_moment(scale=1.0):
    xs, F = [4, 10, 30], [1, 2, 3]
    n_paths = _n(10_000, scale)
    worst = 0.0
    for lam in (0.5, 1.0):
        ex = hitting_exp_moment(FAVORABLE, lam, F, xs, n_max=30)
        mc = hitting_exp_moment(FAVORABLE, lam, F, xs, n_max=30, method="mc", n_paths=n_paths, seed=11)
        for e, m in zip(ex, mc):
            worst = max(worst, abs(e.value - m.value) / m.se)
    return worst <= 3.0, f"worst deviation {worst:.2f} SE"


def c09_quenched(scale=1.0):
    bd, cfg = _quenched()
    rep = quenched_analysis(bd, cfg)
    m = bd.model
    rec = verify_segment_bound(bd, rep, Measure.dirac(bd.space, 1), Measure.dirac(bd.space, bd.spec.n_max), 0, m.n_steps)
    fit = rate_fit(bd, rep)
    ok = rec.status == "ok" and rec.c_prime > 0 and rec.slack >= -SLACK_TOL and fit.slope < 0 and fit.r2 >= 0.9
    return ok, (
        f"{len(rec.segments)} segments, c'={rec.c_prime:.3g}, slack {rec.slack:.3g}, "
        f"slope {fit.slope:.3g}, R2 {fit.r2:.3f}"
    )


def c10_brownian(scale=1.0):
    n = _n(100_000, scale, 1000)
    r1 = dif.brownian_survival_check(0.5, 0.5, 1e-3, n, 101)
    r2 = dif.brownian_survival_check(0.5, 0.5, 1e-4, n, 102)
    halved = r2.bias <= 0.5 * r1.bias + 3 * math.hypot(r2.se, 0.5 * r1.se)
    return r1.passed and r2.passed and halved, f"bias {r1.bias:.4f} -> {r2.bias:.4f} (se {r1.se:.4f})"


def c11_small_x(scale=1.0):
    spec = dif.reference_spec(1e-3)
    r = dif.check_small_x_bound(spec, 1.0, [2.0**-k for k in range(1, 7)], _n(20_000, scale), 5)
    return r.passed, f"A={r.A:.3f}, log-log slope {r.loglog_slope:.3f}"


def c12_smc(scale=1.0):
    m = reference_chain(20)
    rep = replicates(m, Measure.dirac(m.space, index=0), 0, 20, _n(10_000, scale), 200, "multinomial", 7)
    ok = rep.normalizer_within(3.0) and rep.phi_within(3.0)
    zphi = np.max(np.abs(rep.phi_mean - rep.exact_phi) / rep.phi_se)
    return ok, f"normalizer z={rep.z_score:.2f}, worst phi z={zphi:.2f}"


DETERMINISM_SCENARIOS = ("chain_reference", "quenched_reference", "negative_control")


def c13_determinism(scale=1.0):
    diffs = []
    with tempfile.TemporaryDirectory() as tmp:
        for name in DETERMINISM_SCENARIOS:
            sc = load_scenario(name)
            a, b = Path(tmp) / name / "a", Path(tmp) / name / "b"
            run_scenario(sc, a)
            run_scenario(sc, b)
            files = sorted(p.name for p in a.glob("*.csv"))
            _, mismatch, errors = filecmp.cmpfiles(a, b, files, shallow=False)
            diffs += [f"{name}/{f}" for f in mismatch + errors]
        # diffusion engine on a cut-down run
        spec = dif.reference_spec(1e-3, horizon=2.0)
        runs = [dif.tv_decay_curve(spec, 0.0, 0.2, 3.0, [0.5, 1.0], 2000, 9).to_csv() for _ in range(2)]
        if runs[0] != runs[1]:
            diffs.append("diffusion tv curve")
    return not diffs, "all CSV byte-identical" if not diffs else f"differences: {diffs}"


CRITERIA = [
    Criterion(1, "contraction bound, 200 configs on chain and birth-death", c01_contraction, 30.0),
    Criterion(2, "coefficient ordering d' <= d in [0, 1]", c02_ordering),
    Criterion(3, "eigen-relation residual <= 1e-9 (T = 40)", c03_eigen),
    Criterion(4, "uniqueness discrepancy decreasing to <= 1e-6", c04_uniqueness),
    Criterion(5, "Q-process rows stochastic and mixing slack", c05_qprocess),
    Criterion(6, "weight-ratio bound over 100 configs", c06_ratio),
    Criterion(7, "S_n against MC hitting times", c07_s_series, 60.0),
    Criterion(8, "exponential hitting moment exact vs MC", c08_exp_moment),
    Criterion(9, "random-environment segment bound and rate fit", c09_quenched),
    Criterion(10, "Brownian survival gate", c10_brownian, 120.0),
    Criterion(11, "small-x survival bound on the reference diffusion", c11_small_x),
    Criterion(12, "particle normalizer unbiased, flow within 3 SE", c12_smc),
    Criterion(13, "byte-identical re-runs", c13_determinism),
]


def run_criterion(c: Criterion, scale: float = 1.0) -> Verdict:
    t0 = time.perf_counter()
    try:
        ok, detail = c.run(scale)
    except Exception as exc:  # a crash is a failed criterion, not a crashed suite
        ok, detail = False, f"{type(exc).__name__}: {exc}"
    return Verdict(c.cid, c.title, bool(ok), detail, time.perf_counter() - t0, c.time_limit)


def verify_all(only=None, scale: float = 1.0, log: Callable[[str], None] | None = print) -> list[Verdict]:
    out = []
    for c in CRITERIA:
        if only and c.cid not in only:
            continue
        v = run_criterion(c, scale)
        if log:
            log(v.line())
        out.append(v)
    return out
