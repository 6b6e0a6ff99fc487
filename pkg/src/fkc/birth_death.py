"""Penalized birth-death chains with alternating phases in a quenched environment.

States are ``1..n_max`` (index ``n - 1``); the chain is reflected at 1
(``d_1 = 0``) and truncated at ``n_max`` (birth rate forced to 0 there).
Time alternates between unfavorable intervals ``[s_j, sigma_j)`` and
favorable intervals ``[sigma_j, s_{j+1})``. The penalization is
``exp(int kappa(u, X_u) du)`` with ``kappa`` bounded.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from .errors import ConfigurationError
from .measure import Measure, StateSpace, TimeGrid, tv_distance
from .mixing import SLACK_TOL, segment_coefficients
from .semigroup import PenalizedModel, ctmc_model, phi

log = logging.getLogger(__name__)

RateFn = Callable[[np.ndarray], np.ndarray]


# rates ---------------------------------------------------------------------


@dataclass(frozen=True)
class PhaseRates:
    """Time-homogeneous rates for one phase, as vectorized functions of n >= 1.

    ``death(1)`` is forced to 0 whatever the function returns. The optional
    ``modulation(t)`` multiplies both birth and death rates.
    """

    birth: RateFn
    death: RateFn
    kappa: RateFn = lambda n: np.zeros(np.shape(n))
    modulation: Callable[[float], float] | None = None
    name: str = "phase"
    params: dict = field(default_factory=dict, compare=False)

    def tables(self, n_max: int, t: float | None = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """``(b, d, kappa)`` over ``n = 1..n_max`` with the boundary rules applied."""
        n = np.arange(1, n_max + 1, dtype=float)
        b = np.asarray(self.birth(n), dtype=float).copy()
        d = np.asarray(self.death(n), dtype=float).copy()
        k = np.broadcast_to(np.asarray(self.kappa(n), dtype=float), n.shape).copy()
        d[0] = 0.0
        b[-1] = 0.0
        if self.modulation is not None and t is not None:
            f = float(self.modulation(t))
            b, d = b * f, d * f
        return b, d, k

    def raw_rates(self, n: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Untruncated rates (only the reflection ``d_1 = 0`` applied)."""
        n = np.asarray(n, dtype=float)
        b = np.asarray(self.birth(n), dtype=float)
        d = np.where(n == 1, 0.0, np.asarray(self.death(n), dtype=float))
        return b, d

    def generator(self, n_max: int, t: float | None = None, penalized: bool = False) -> np.ndarray:
        b, d, k = self.tables(n_max, t)
        gen = np.diag(b[:-1], 1) + np.diag(d[1:], -1)
        gen -= np.diag(b + d)
        if penalized:
            gen += np.diag(k)
        return gen

    def validate(self, n_max: int) -> None:
        n = np.arange(1, n_max + 1, dtype=float)
        b, d = self.raw_rates(n)
        if np.any(~np.isfinite(b)) or np.any(~np.isfinite(d)):
            raise ConfigurationError(f"{self.name}: non-finite rates")
        if np.any(b <= 0):
            raise ConfigurationError(f"{self.name}: birth rates must be positive")
        if np.any(d[1:] <= 0):
            raise ConfigurationError(f"{self.name}: death rates must be positive for n >= 2")
        k = np.asarray(self.kappa(n), dtype=float)
        if np.any(~np.isfinite(k)):
            raise ConfigurationError(f"{self.name}: kappa must be bounded")


def _killing_at_one(c: float) -> RateFn:
    return lambda n: np.where(np.asarray(n) == 1, -float(c), 0.0)


def polynomial_rates(a1: float, delta: float, a2: float, kill: float = 0.0, name="polynomial") -> PhaseRates:
    """``d_n = a1 (n-1)^(1+delta)``, ``b_n = a2 n``; killing at rate ``kill`` in state 1."""
    if a1 <= 0 or delta <= 0 or a2 <= 0:
        raise ConfigurationError("polynomial preset needs a1, delta, a2 > 0")
    return PhaseRates(
        birth=lambda n: a2 * np.asarray(n, dtype=float),
        death=lambda n: a1 * (np.asarray(n, dtype=float) - 1.0) ** (1.0 + delta),
        kappa=_killing_at_one(kill),
        name=name,
        params={"preset": "polynomial", "a1": a1, "delta": delta, "a2": a2, "kill": kill},
    )


def linear_rates(birth: float, death: float, kill: float = 0.0, name="linear") -> PhaseRates:
    """``b_n = birth * n``, ``d_n = death * (n-1)``."""
    if birth <= 0 or death <= 0:
        raise ConfigurationError("linear preset needs positive coefficients")
    return PhaseRates(
        birth=lambda n: birth * np.asarray(n, dtype=float),
        death=lambda n: death * (np.asarray(n, dtype=float) - 1.0),
        kappa=_killing_at_one(kill),
        name=name,
        params={"preset": "linear", "birth": birth, "death": death, "kill": kill},
    )


def table_rates(birth: Sequence[float], death: Sequence[float], kappa=None, name="table") -> PhaseRates:
    """Explicit per-state tables for ``n = 1..len(birth)``."""
    b = np.asarray(birth, dtype=float)
    d = np.asarray(death, dtype=float)
    k = np.zeros_like(b) if kappa is None else np.asarray(kappa, dtype=float)
    if not (b.shape == d.shape == k.shape):
        raise ConfigurationError("rate tables must have equal lengths")

    def pick(arr):
        def f(n):
            idx = np.asarray(n, dtype=int) - 1
            if np.any(idx >= arr.size):
                raise ConfigurationError(f"{name}: table has {arr.size} entries")
            return arr[idx]

        return f

    return PhaseRates(pick(b), pick(d), pick(k), name=name, params={"preset": "table", "size": int(b.size)})


@dataclass(frozen=True)
class BDRateSpec:
    """Unfavorable rates plus one favorable family per cycle (cycled if shorter)."""

    unfavorable: PhaseRates
    favorable: tuple
    n_max: int

    def __init__(self, unfavorable: PhaseRates, favorable, n_max: int):
        fav = tuple(favorable) if isinstance(favorable, (list, tuple)) else (favorable,)
        if not fav:
            raise ConfigurationError("need at least one favorable rate family")
        if n_max < 2:
            raise ConfigurationError("n_max must be at least 2")
        object.__setattr__(self, "unfavorable", unfavorable)
        object.__setattr__(self, "favorable", fav)
        object.__setattr__(self, "n_max", int(n_max))
        for p in (unfavorable, *fav):
            p.validate(n_max)

    def favorable_family(self, j: int) -> PhaseRates:
        return self.favorable[j % len(self.favorable)]

    def kappa_sup(self) -> float:
        return max(float(np.abs(p.tables(self.n_max)[2]).max()) for p in (self.unfavorable, *self.favorable))


# environment ----------------------------------------------------------------


_DIST_PARAMS = {
    "exponential": {"mean"},
    "shifted_exponential": {"shift", "mean"},
    "deterministic": {"value"},
    "uniform": {"low", "high"},
}


@dataclass(frozen=True)
class Distribution:
    kind: str
    params: dict

    def __post_init__(self):
        if self.kind not in _DIST_PARAMS:
            raise ConfigurationError(f"unsupported distribution {self.kind!r}")
        missing = _DIST_PARAMS[self.kind] - set(self.params)
        if missing:
            raise ConfigurationError(f"{self.kind} needs parameters {sorted(missing)}")
        p = self.params
        ok = {
            "exponential": lambda: p["mean"] > 0,
            "shifted_exponential": lambda: p["shift"] >= 0 and p["mean"] > 0,
            "deterministic": lambda: p["value"] > 0,
            "uniform": lambda: 0 <= p["low"] < p["high"],
        }[self.kind]()
        if not ok:
            raise ConfigurationError(f"{self.kind} parameters {p} do not give a law on (0, inf)")

    @classmethod
    def from_dict(cls, obj: dict) -> "Distribution":
        obj = dict(obj)
        kind = obj.pop("kind", None)
        if kind is None:
            raise ConfigurationError("distribution needs a 'kind'")
        return cls(kind, {k: float(v) for k, v in obj.items()})

    @property
    def mean(self) -> float:
        p = self.params
        return {
            "exponential": lambda: p["mean"],
            "shifted_exponential": lambda: p["shift"] + p["mean"],
            "deterministic": lambda: p["value"],
            "uniform": lambda: 0.5 * (p["low"] + p["high"]),
        }[self.kind]()

    @property
    def std(self) -> float:
        p = self.params
        return {
            "exponential": lambda: p["mean"],
            "shifted_exponential": lambda: p["mean"],
            "deterministic": lambda: 0.0,
            "uniform": lambda: (p["high"] - p["low"]) / math.sqrt(12),
        }[self.kind]()

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        p = self.params
        if self.kind == "exponential":
            out = rng.exponential(p["mean"], size)
        elif self.kind == "shifted_exponential":
            out = p["shift"] + rng.exponential(p["mean"], size)
        elif self.kind == "deterministic":
            out = np.full(size, p["value"])
        else:
            out = rng.uniform(p["low"], p["high"], size)
        # a zero draw has probability zero but would break the epochs
        return np.maximum(out, np.finfo(float).tiny)

    def to_dict(self) -> dict:
        return {"kind": self.kind, **self.params}


@dataclass(frozen=True)
class EnvironmentTrace:
    """Realized phase lengths ``u_j`` (unfavorable) and ``v_j`` (favorable)."""

    u: np.ndarray
    v: np.ndarray
    seed: int | None = None
    dist: dict | None = None

    def __post_init__(self):
        u = np.asarray(self.u, dtype=float).copy()
        v = np.asarray(self.v, dtype=float).copy()
        if u.shape != v.shape or u.ndim != 1 or u.size == 0:
            raise ConfigurationError("u and v must be equal-length nonempty sequences")
        if np.any(u <= 0) or np.any(v <= 0):
            raise ConfigurationError("phase lengths must be positive")
        u.setflags(write=False)
        v.setflags(write=False)
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "v", v)

    @property
    def count(self) -> int:
        return self.u.size

    @property
    def s(self) -> np.ndarray:
        """Starts of the unfavorable phases, ``s_0 = 0``."""
        return np.concatenate([[0.0], np.cumsum(self.u + self.v)[:-1]])

    @property
    def sigma(self) -> np.ndarray:
        """Starts of the favorable phases."""
        return self.s + self.u

    @property
    def end(self) -> float:
        return float(np.sum(self.u + self.v))

    def edges(self) -> np.ndarray:
        """Every phase switch after time 0, in order."""
        out = np.empty(2 * self.count)
        out[0::2] = self.sigma
        out[1::2] = self.s + self.u + self.v
        return out

    def phase_at(self, t: float) -> tuple[int, bool]:
        """``(cycle j, favorable?)`` for the phase containing time ``t``."""
        if not 0 <= t < self.end:
            raise ConfigurationError(f"time {t} outside the environment trace [0, {self.end})")
        e = self.edges()
        k = int(np.searchsorted(e, t, side="right"))
        return k // 2, bool(k % 2)

    @classmethod
    def homogeneous(cls, favorable: bool, length: float) -> "EnvironmentTrace":
        """A trace that stays in one phase over ``[0, length)``."""
        tiny = 1e-300
        if favorable:
            return cls([tiny], [length])
        return cls([length], [tiny])


def sample_environment(u_dist, v_dist, count: int, seed: int) -> EnvironmentTrace:
    """I.i.d. phase lengths; ``u`` and ``v`` use separate streams of ``seed``."""
    if count < 1:
        raise ValueError("count must be positive")
    u_dist = u_dist if isinstance(u_dist, Distribution) else Distribution.from_dict(u_dist)
    v_dist = v_dist if isinstance(v_dist, Distribution) else Distribution.from_dict(v_dist)
    u = u_dist.sample(np.random.default_rng([seed, 0]), count)
    v = v_dist.sample(np.random.default_rng([seed, 1]), count)
    return EnvironmentTrace(u, v, seed, {"U": u_dist.to_dict(), "V": v_dist.to_dict()})


# model ------------------------------------------------------------------------


class BirthDeathModel:
    """A :class:`PenalizedModel` together with the rates and trace behind it."""

    def __init__(self, spec: BDRateSpec, env: EnvironmentTrace, mesh: TimeGrid, name="birth_death"):
        if mesh.origin != 0.0:
            raise ConfigurationError("birth-death meshes start at time 0")
        if mesh.horizon > env.end + 1e-12:
            raise ConfigurationError(
                f"mesh horizon {mesh.horizon} exceeds the environment trace end {env.end:.6g}"
            )
        mesh.unit  # the mesh must divide one time unit
        self.spec = spec
        self.env = env
        self.mesh = mesh
        self.space = StateSpace.range(spec.n_max, start=1)
        self._edges = env.edges()
        cuts = self._edges[self._edges < mesh.horizon]
        self.model: PenalizedModel = ctmc_model(
            self.space,
            mesh,
            lambda t: self.generator(t),
            lambda t: self.kappa(t),
            breakpoints=cuts,
            name=name,
        )

    def rates_at(self, t: float) -> PhaseRates:
        j, fav = self.env.phase_at(t)
        return self.spec.favorable_family(j) if fav else self.spec.unfavorable

    def generator(self, t: float) -> np.ndarray:
        return self.rates_at(t).generator(self.spec.n_max, t)

    def kappa(self, t: float) -> np.ndarray:
        return self.rates_at(t).tables(self.spec.n_max, t)[2]

    def state_index(self, n: int) -> int:
        return self.space.index(n)


def build_bd_model(spec: BDRateSpec, env: EnvironmentTrace, mesh: TimeGrid, name="birth_death") -> BirthDeathModel:
    """Exact step kernels for the truncated, penalized birth-death chain.

    Mesh intervals are cut at every phase switch, so phase epochs need not
    lie on the mesh.
    """
    return BirthDeathModel(spec, env, mesh, name)


# coming down from infinity -------------------------------------------------------


@dataclass(frozen=True)
class SeriesResult:
    n: int
    value: float
    tail: float
    truncation: int
    status: str  # "ok" | "diverged"


def _s_all(b: np.ndarray, d: np.ndarray) -> np.ndarray:
    """``S_n`` for ``n = 2..N`` from untruncated rates at ``1..N``.

    Cell ``(m, l)`` with ``2 <= m <= l <= N`` is
    ``prod_{i=m}^{l-1} b_i / prod_{i=m}^{l} d_i``; everything is summed
    in the log domain.
    """
    N = b.size
    with np.errstate(divide="ignore"):
        lb = np.log(b)
        ld = np.log(d)
    ld[0] = 0.0  # d_1 never enters a cell with m >= 2
    B = np.concatenate([[0.0], np.cumsum(lb)])  # B[k] = sum_{i<=k} log b_i
    D = np.concatenate([[0.0], np.cumsum(ld)])
    k = np.arange(2, N + 1)
    G = B[k - 1] - D[k]  # depends on l
    H = B[k - 1] - D[k - 1]  # depends on m
    inner = np.logaddexp.accumulate(G[::-1])[::-1]  # logsumexp over l >= m
    outer = np.logaddexp.accumulate((inner - H)[::-1])[::-1]
    return np.exp(outer)


def s_series(rates: PhaseRates | BDRateSpec, n: int, truncation: int | None = None, j: int = 0) -> SeriesResult:
    """Truncated ``S_n`` with a tail estimate from doubling the truncation.

    ``S_n`` is the expected time for the chain started at the truncation
    level to first reach ``n - 1``. ``status`` is ``"diverged"`` when the
    doubled truncation changes the sum by more than its own size or
    overflows.
    """
    if isinstance(rates, BDRateSpec):
        truncation = rates.n_max if truncation is None else truncation
        rates = rates.favorable_family(j)
    if truncation is None:
        raise ValueError("truncation level required")
    if not 2 <= n <= truncation:
        raise ValueError(f"need 2 <= n <= truncation, got n={n}, truncation={truncation}")
    b, d = rates.raw_rates(np.arange(1, truncation + 1))
    value = float(_s_all(b, d)[n - 2])
    try:
        b2, d2 = rates.raw_rates(np.arange(1, 2 * truncation + 1))
        bigger = float(_s_all(b2, d2)[n - 2])
        tail = bigger - value
    except ConfigurationError:
        # explicit tables cannot be extended
        tail = float("nan")
    diverged = not np.isfinite(value) or (np.isfinite(tail) and tail > value) or not np.isfinite(tail) and np.isinf(tail)
    return SeriesResult(n, value, tail, truncation, "diverged" if diverged else "ok")


@dataclass
class ComingDownReport:
    n: list[int]
    sup_s: list[float]
    argsup_j: list[int]
    statuses: list[str]
    decreasing: bool
    final: float
    diverged: bool


def check_coming_down(spec: BDRateSpec, n_range: Sequence[int], j_range: Sequence[int]) -> ComingDownReport:
    """``sup_j S_n^j`` over the given ranges, with monotonicity and status flags."""
    sups, args, statuses = [], [], []
    for n in n_range:
        results = [s_series(spec, n, j=j) for j in j_range]
        vals = [r.value for r in results]
        k = int(np.argmax(vals))
        sups.append(vals[k])
        args.append(int(j_range[k]))
        statuses.append("diverged" if any(r.status == "diverged" for r in results) else "ok")
    dec = all(b < a for a, b in zip(sups, sups[1:]))
    return ComingDownReport(list(n_range), sups, args, statuses, dec, sups[-1], "diverged" in statuses)


# simulation -------------------------------------------------------------------


def _rate_tables(spec: BDRateSpec, env: EnvironmentTrace):
    """Phase switch times and one rate row per interval between them.

    Interval ``k`` is ``[edges[k-1], edges[k])`` (with ``edges[-1] = 0``)
    and belongs to cycle ``k // 2``, favorable when ``k`` is odd. Time
    after the trace end reuses the last row.
    """
    edges = env.edges()
    bs, ds = [], []
    for k in range(edges.size + 1):
        j, fav = min(k, edges.size - 1) // 2, bool(min(k, edges.size - 1) % 2)
        ph = spec.favorable_family(j) if fav else spec.unfavorable
        b, d, _ = ph.tables(spec.n_max)
        bs.append(b)
        ds.append(d)
    return edges, np.array(bs), np.array(ds)


def _gillespie(edges, btab, dtab, x, t, done, rng, t_max, on_step=None):
    """Advance ``(x, t)`` until ``done(x)`` holds or ``t >= t_max``.

    ``x`` holds state indices (0-based), ``btab``/``dtab`` have one row per
    interval between the sorted switch times ``edges`` (``edges.size + 1``
    rows). Crossing a switch without jumping is exact by memorylessness.
    Returns the stopping times (``nan`` if censored).
    """
    stops = np.append(np.asarray(edges, dtype=float), np.inf)
    out = np.full(x.size, np.nan)
    fin0 = done(x)
    out[fin0] = t[fin0]
    active = np.flatnonzero(~fin0)
    while active.size:
        xa, ta = x[active], t[active]
        ph = np.searchsorted(stops, ta, side="right")
        b = btab[ph, xa]
        d = dtab[ph, xa]
        total = b + d
        wait = rng.exponential(1.0, active.size) / total
        next_stop = stops[ph]
        cross = ta + wait >= next_stop
        up = rng.random(active.size) * total < b
        tn = np.where(cross, next_stop, ta + wait)
        xn = np.where(cross, xa, np.where(up, xa + 1, xa - 1))
        x[active], t[active] = xn, tn
        if on_step is not None:
            on_step(active, xn, tn)
        fin = done(xn)
        out[active[fin]] = tn[fin]
        active = active[~fin & (tn < t_max)]
    return out


def first_passage_levels(
    rates: PhaseRates,
    n_max: int,
    levels: Sequence[int],
    n_paths: int,
    seed: int,
    start: int | None = None,
    t_max: float = 1e6,
) -> np.ndarray:
    """First times the homogeneous chain started at ``start`` reaches each level.

    Returns an array ``(n_paths, len(levels))``. Levels must lie below the
    start; since jumps are +-1, first reaching ``<= k`` is hitting ``k``.
    """
    start = n_max if start is None else start
    levels = np.asarray(levels, dtype=int)
    if np.any(levels >= start) or np.any(levels < 1):
        raise ValueError("levels must lie in [1, start)")
    b, d, _ = rates.tables(n_max)
    rng = np.random.default_rng(seed)
    x = np.full(n_paths, start - 1)
    t = np.zeros(n_paths)
    hits = np.full((n_paths, levels.size), np.nan)
    lowest = levels.min() - 1

    def record(idx, xn, tn):
        for c, lev in enumerate(levels):
            fresh = (xn == lev - 1) & np.isnan(hits[idx, c])
            hits[idx[fresh], c] = tn[fresh]

    _gillespie(np.empty(0), b[None], d[None], x, t, lambda s: s <= lowest, rng, t_max, record)
    return hits


@dataclass(frozen=True)
class HittingEstimate:
    x: int
    value: float
    se: float
    method: str
    status: str  # "ok" | "moment-infinite" | "censored"


def _exact_moment(phase: PhaseRates, n_max: int, lam: float, F: np.ndarray):
    gen = phase.generator(n_max)
    inF = np.zeros(n_max, dtype=bool)
    inF[F - 1] = True
    c = ~inF
    if not c.any():
        return np.ones(n_max), "ok", float("inf")
    Lcc = gen[np.ix_(c, c)]
    rhs = -gen[np.ix_(c, inF)].sum(axis=1)
    # moments are finite iff lam is below the decay rate of the chain killed on F
    decay = float(-np.max(np.linalg.eigvals(Lcc).real))
    u = np.ones(n_max)
    if lam >= decay:
        u[c] = np.inf
        return u, "moment-infinite", decay
    try:
        sol = np.linalg.solve(Lcc + lam * np.eye(c.sum()), rhs)
    except np.linalg.LinAlgError:
        u[c] = np.inf
        return u, "moment-infinite", decay
    if np.any(sol <= 0):
        u[c] = np.inf
        return u, "moment-infinite", decay
    u[c] = sol
    return u, "ok", decay


def hitting_exp_moment(
    target: PhaseRates | BirthDeathModel,
    lam: float,
    F: Sequence[int],
    xs: Sequence[int],
    *,
    t_start: float = 0.0,
    method: str = "exact",
    n_max: int | None = None,
    n_paths: int = 10_000,
    seed: int = 0,
    t_max: float = 1e4,
) -> list[HittingEstimate]:
    """``E_{t,x}(exp(lam (T_F - t)))`` for each start ``x`` in ``xs`` (unpenalized chain).

    ``exact`` solves ``(L + lam I) u = 0`` off ``F`` with ``u = 1`` on ``F``
    for the homogeneous rates in force at ``t_start``. ``mc`` simulates the
    (possibly phase-switching) chain from ``t_start`` and reports the sample
    mean with its standard error.
    """
    if lam < 0:
        raise ValueError("lam must be nonnegative")
    F = np.unique(np.asarray(F, dtype=int))
    if isinstance(target, BirthDeathModel):
        spec, env, phase = target.spec, target.env, target.rates_at(t_start)
        n_max = spec.n_max
    else:
        spec, env, phase = None, None, target
        if n_max is None:
            raise ValueError("n_max required with bare phase rates")
    if F.size == 0 or F.min() < 1 or F.max() > n_max:
        raise ValueError("F must be a nonempty subset of 1..n_max")
    xs = [int(x) for x in xs]
    if method == "exact":
        u, status, _ = _exact_moment(phase, n_max, lam, F)
        return [HittingEstimate(x, float(u[x - 1]), 0.0, "exact", "ok" if x in F else status) for x in xs]
    if method != "mc":
        raise ValueError(f"unknown method {method!r}")
    if env is None:
        b, d, _ = phase.tables(n_max)
        edges, btab, dtab = np.empty(0), b[None], d[None]
    else:
        edges, btab, dtab = _rate_tables(spec, env)
    inF = np.zeros(n_max, dtype=bool)
    inF[F - 1] = True
    out = []
    for c, x in enumerate(xs):
        rng = np.random.default_rng([seed, c])
        xx = np.full(n_paths, x - 1)
        tt = np.full(n_paths, float(t_start))
        times = _gillespie(edges, btab, dtab, xx, tt, lambda s: inF[s], rng, t_start + t_max) - t_start
        if np.any(np.isnan(times)):
            out.append(HittingEstimate(x, float("inf"), float("nan"), "mc", "censored"))
            continue
        w = np.exp(lam * times)
        out.append(HittingEstimate(x, float(w.mean()), float(w.std(ddof=1) / math.sqrt(n_paths)), "mc", "ok"))
    return out


# constants -----------------------------------------------------------------------


def t0_compute(A: float, gamma1: float) -> int:
    """``ceil(log A / log(1/gamma1))``; near-integer ratios are not bumped up by roundoff."""
    if not 0 < gamma1 < 1:
        raise ValueError("gamma1 must lie in (0, 1)")
    if not A >= 1:
        raise ValueError("A must be at least 1")
    r = math.log(A) / math.log(1.0 / gamma1)
    k = round(r)
    if abs(r - k) <= 1e-9 * max(1.0, abs(r)):
        return int(k)
    return int(math.ceil(r))


def c_lambda(env: EnvironmentTrace, j: int, lam: float, n_max: int) -> float:
    """``max_{n <= n_max} (1/n) sum_{l=1}^n (lam u_{j+l} - log(v_{j+l-1}) / 2)``."""
    if n_max < 1:
        raise ValueError("n_max must be at least 1")
    if j < 0 or j + n_max >= env.count:
        raise ValueError(f"c_lambda needs u up to index {j + n_max}; trace has {env.count}")
    terms = lam * env.u[j + 1 : j + n_max + 1] - 0.5 * np.log(env.v[j : j + n_max])
    avgs = np.cumsum(terms) / np.arange(1, n_max + 1)
    return float(avgs.max())


def count_good_units(times: np.ndarray, s: float, t: float, t0: int) -> int:
    """``Card{k integer in [s, t - t0 - 2] : times meet [k, k+1)}``."""
    lo, hi = math.ceil(s - 1e-12), math.floor(t - t0 - 2 + 1e-12)
    if hi < lo or len(times) == 0:
        return 0
    ks = np.unique(np.floor(np.asarray(times)).astype(int))
    return int(np.count_nonzero((ks >= lo) & (ks <= hi)))


@dataclass
class PhaseSets:
    lam: float
    bound: float
    t0: int
    b: float
    c_values: list[float]
    J_lambda: list[int]
    T_set: list[float]
    J_b: list[int]
    T_b: list[float]

    def n_count(self, s: float, t: float) -> int:
        return count_good_units(np.asarray(self.T_b), s, t, self.t0)


def phase_sets(env: EnvironmentTrace, lam: float, bound: float, t0: int, b: float, horizon_n: int) -> PhaseSets:
    """Good cycles ``J_lambda``, their favorable epochs, and the spaced subset ``J_b``.

    ``C_{lam,j}`` is evaluated for every ``j`` whose running averages fit in
    the trace with ``horizon_n`` terms.
    """
    sigma = env.sigma
    js = [j for j in range(env.count) if j + horizon_n < env.count]
    cs = [c_lambda(env, j, lam, horizon_n) for j in js]
    J = [j for j, c in zip(js, cs) if c <= bound]
    Jb = []
    for j in J:
        gaps = sigma[J] - sigma[j]
        if np.any((gaps >= t0 + 2) & (gaps <= t0 + b)):
            Jb.append(j)
    return PhaseSets(
        lam, bound, t0, b, cs, J, [float(sigma[j]) for j in J], Jb, [float(sigma[j]) for j in Jb]
    )


@dataclass
class Irreducibility:
    gamma_F: float
    rho: dict
    gamma_one: float
    sampled_starts: list[int]
    certified: bool = False  # sampled minima, not infima over all s


def irreducibility_constants(
    model: PenalizedModel,
    F: Sequence[int],
    s_samples: Sequence[int],
    rho_states: Sequence[int] | None = None,
) -> Irreducibility:
    """Sampled ``gamma_F``, ``gamma_{{x}}`` for the first state and ``rho_x``.

    ``F`` and ``rho_states`` are state indices (0-based). Probabilities are
    those of the unpenalized chain; ``s_samples`` are grid indices with a
    full time unit after them.
    """
    F = list(F)
    if not F:
        raise ValueError("F must be nonempty")
    base = model.base()
    u = model.unit
    starts = [int(s) for s in s_samples if s + u <= model.n_steps]
    if not starts:
        raise ValueError("no sampled start leaves a full time unit on the grid")
    rho_states = list(range(model.n)) if rho_states is None else list(rho_states)
    gF, g1 = np.inf, np.inf
    rho = {x: 1.0 for x in rho_states}
    for s in starts:
        p = base.product(s, s + u)
        gF = min(gF, float(p[np.ix_(F, F)].min()))
        g1 = min(g1, float(p[0, 0]))
        for k in range(1, u + 1):
            pk = base.product(s, s + k)
            for x in rho_states:
                rho[x] = min(rho[x], float(pk[x, x]))
    return Irreducibility(gF, rho, g1, starts)


# quenched analysis -------------------------------------------------------------------


@dataclass
class QuenchedConfig:
    lam: float
    F: list[int]
    bound: float
    b: float
    horizon_n: int = 10


@dataclass
class QuenchedReport:
    s_table: dict
    A: float
    lam: float
    lam_admissible: bool
    F: list[int]
    t0: int
    gamma_F: float
    gamma_one: float
    rho: dict
    kappa_sup: float
    sets: PhaseSets
    segments: list[tuple[int, int]] = field(default_factory=list)
    segment_d: list[float] = field(default_factory=list)
    c_prime: float = float("nan")
    tail_mass: float = float("nan")
    tail_flag: bool = False
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["s_table"] = {str(k): v for k, v in self.s_table.items()}
        out["rho"] = {str(k): v for k, v in self.rho.items()}
        return out


def tail_mass(bd: BirthDeathModel, indices: Sequence[int] | None = None, start: int = 1) -> float:
    """Largest mass of ``Phi_{0,t}(delta_start)`` above ``0.9 n_max`` over grid times."""
    model = bd.model
    cut = 0.9 * bd.spec.n_max
    high = np.array([lab > cut for lab in bd.space.labels])
    w = np.zeros(model.n)
    w[bd.state_index(start)] = 1.0
    worst = float(w[high].sum())
    for k in range(model.n_steps):
        w = w @ model.kernel(k)
        w /= w.sum()
        worst = max(worst, float(w[high].sum()))
    return worst


def segments_for(bd: BirthDeathModel, report_sets: PhaseSets, t0: int, s: int, t: int) -> list[tuple[int, int]]:
    """Greedy non-overlapping segments ``[sigma_j, sigma_j + t0 + 1]`` inside ``[s, t]``."""
    grid = bd.mesh
    u = grid.unit
    segs = []
    last = s
    for sig in report_sets.T_b:
        if sig > grid.horizon:
            break
        a = grid.index(min(sig, grid.horizon), mode="ceil")
        b = a + (t0 + 1) * u
        if a >= last and b <= t:
            segs.append((a, b))
            last = b
    return segs


def quenched_analysis(bd: BirthDeathModel, config: QuenchedConfig, n_table: Sequence[int] = range(2, 9)) -> QuenchedReport:
    """Every constant of the quenched setting for one realized trace.

    ``A`` is the supremum over states of the favorable-phase exponential
    moment (exact linear solve on the homogeneous favorable rates), taken
    over the distinct favorable families in use.
    """
    spec = bd.spec
    warnings = []
    model = bd.model
    irr = irreducibility_constants(
        model,
        [bd.state_index(x) for x in config.F],
        range(0, model.n_steps - model.unit + 1),
        rho_states=[bd.state_index(1)],
    )
    A = 1.0
    for fam in spec.favorable:
        u, status, _ = _exact_moment(fam, spec.n_max, config.lam, np.asarray(config.F))
        if status != "ok":
            raise ConfigurationError(f"lambda={config.lam} exceeds the favorable decay rate: moment infinite")
        A = max(A, float(u.max()))
    ksup = spec.kappa_sup()
    admissible = config.lam > ksup + math.log(1.0 / irr.gamma_one)
    if not admissible:
        warnings.append(
            f"lambda={config.lam} not above ||kappa|| + log(1/gamma_1) = {ksup + math.log(1 / irr.gamma_one):.4g}"
        )
    else:
        warnings.append("lambda admissibility uses a sampled gamma_1 estimate")
    t0 = t0_compute(A, irr.gamma_one)
    sets = phase_sets(bd.env, config.lam, config.bound, t0, config.b, config.horizon_n)
    s_table = {n: s_series(spec, n).value for n in n_table if n <= spec.n_max}
    tm = tail_mass(bd)
    if tm > 1e-6:
        warnings.append(f"tail mass above 0.9 n_max reaches {tm:.3g}")
    rep = QuenchedReport(
        s_table, A, config.lam, admissible, list(config.F), t0, irr.gamma_F, irr.gamma_one,
        {bd.space.labels[k]: v for k, v in irr.rho.items()}, ksup, sets,
        tail_mass=tm, tail_flag=tm > 1e-6, warnings=warnings,
    )
    segs = segments_for(bd, sets, t0, 0, model.n_steps)
    if segs:
        res = segment_coefficients(model, segs)
        rep.segments, rep.segment_d = segs, res.d
        rep.c_prime = float(min(res.d))
    return rep


@dataclass
class SegmentBoundRecord:
    s: int
    t: int
    segments: list[tuple[int, int]]
    segment_d: list[float]
    c_prime: float
    lhs: float
    bound: float
    slack: float
    status: str  # "ok" | "fail" | "inconclusive"

    @property
    def passed(self) -> bool:
        return self.status != "fail"


def verify_segment_bound(bd: BirthDeathModel, report: QuenchedReport, mu1: Measure, mu2: Measure, s: int, t: int) -> SegmentBoundRecord:
    """Segment-product bound on ``[s, t]`` for the good epochs of the trace."""
    model = bd.model
    if not 0 <= s <= t <= model.n_steps:
        raise ValueError("need 0 <= s <= t <= grid end")
    segs = segments_for(bd, report.sets, report.t0, s, t)
    lhs = tv_distance(phi(model, mu1, s, t), phi(model, mu2, s, t))
    if not segs:
        return SegmentBoundRecord(s, t, [], [], float("nan"), lhs, 2.0, 2.0 - lhs, "inconclusive")
    res = segment_coefficients(model, segs)
    c_prime = float(min(res.d))
    bound = 2.0 * res.product
    slack = bound - lhs
    ok = c_prime > 0 and slack >= -SLACK_TOL
    return SegmentBoundRecord(s, t, segs, res.d, c_prime, lhs, bound, slack, "ok" if ok else "fail")


@dataclass
class RateFit:
    n_values: list[int]
    log_tv: list[float]
    slope: float
    intercept: float
    r2: float


def rate_fit(bd: BirthDeathModel, report: QuenchedReport, s: int = 0, floor: float = 1e-11) -> RateFit:
    """Linear fit of ``log TV(Phi_{s,t}(delta_1), Phi_{s,t}(delta_nmax))`` against ``N_{b,s,t}``.

    Integer times ``t`` are used; points where TV has reached the roundoff
    floor are dropped.
    """
    model = bd.model
    u = model.unit
    lo = Measure.dirac(bd.space, 1)
    hi = Measure.dirac(bd.space, bd.spec.n_max)
    w1, w2 = lo.weights.copy(), hi.weights.copy()
    ns, ys = [], []
    for k in range(s, model.n_steps):
        q = model.kernel(k)
        w1 = w1 @ q
        w1 /= w1.sum()
        w2 = w2 @ q
        w2 /= w2.sum()
        if (k + 1 - s) % u == 0:
            tv = float(np.abs(w1 - w2).sum())
            if tv <= floor:
                break
            ns.append(report.sets.n_count(bd.mesh.time(s), bd.mesh.time(k + 1)))
            ys.append(math.log(tv))
    if len(set(ns)) < 2:
        return RateFit(ns, ys, float("nan"), float("nan"), float("nan"))
    fit = stats.linregress(ns, ys)
    return RateFit(ns, ys, float(fit.slope), float(fit.intercept), float(fit.rvalue**2))
