"""Coupling measures, Dobrushin-type coefficients and contraction checks.

The coefficients are infima over ``t >= 0`` in their definition; here they
are taken over grid times ``t <= horizon`` (default: up to the end of the
grid). A capped infimum can only be larger than the true one, which makes
product bounds smaller. Every check below only ever compares against
horizons that the cap covers, so the bounds stay valid.
"""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .measure import Measure, measure_min, tv_distance
from .semigroup import PenalizedModel, k_operator, phi

SLACK_TOL = 1e-9


@dataclass(frozen=True)
class CoefficientEstimate:
    """Capped infimum plus diagnostics for one coefficient."""

    value: float
    horizon: int
    stabilized: bool
    nu_mass: float
    argmin_time: int


def _pairs(n: int) -> tuple[np.ndarray, np.ndarray]:
    if n == 1:
        return np.array([0]), np.array([0])
    i, j = np.triu_indices(n, k=1)
    return i, j


def _weight_columns(model: PenalizedModel, at: int, horizon: int) -> np.ndarray:
    """Columns ``E_{at,x}(Z_{at,at+t}) / max_x`` for ``t = 0..horizon``."""
    cols = np.empty((model.n, horizon + 1))
    m = np.eye(model.n)
    cols[:, 0] = 1.0
    for step in range(horizon):
        m = m @ model.kernel(at + step)
        m /= m.max()
        h = m.sum(axis=1)
        cols[:, step + 1] = h / h.max()
    return cols


def _stabilized(running: np.ndarray) -> bool:
    last = len(running) - 1
    if last < 4:
        return False
    return bool(running[-1] == running[int(math.ceil(0.75 * last))])


def _estimates(model: PenalizedModel, laws: np.ndarray, at: int, horizon: int | None):
    """Pair and uniform coefficients for conditional laws landing at ``at``.

    Pair minima and the all-state minimum go through one einsum so that
    ``d' <= d`` holds exactly: rows are compared element by element with an
    identical summation order.
    """
    cap = model.n_steps - at if horizon is None else min(horizon, model.n_steps - at)
    if cap < 0:
        raise ValueError(f"time index {at} beyond grid end {model.n_steps}")
    i, j = _pairs(model.n)
    nus = np.vstack([np.minimum(laws[i], laws[j]), laws.min(axis=0)[None, :]])
    cols = _weight_columns(model, at, cap)
    ratios = np.einsum("pk,kt->pt", nus, cols)
    pair_curve = ratios[:-1].min(axis=0)
    uni_curve = ratios[-1]
    pair_run = np.minimum.accumulate(pair_curve)
    uni_run = np.minimum.accumulate(uni_curve)
    pair = CoefficientEstimate(
        float(min(max(pair_run[-1], 0.0), 1.0)),
        cap,
        _stabilized(pair_run),
        float(ratios[:-1, 0].min()),
        int(np.argmin(pair_curve)),
    )
    uni = CoefficientEstimate(
        float(min(max(uni_run[-1], 0.0), 1.0)),
        cap,
        _stabilized(uni_run),
        float(ratios[-1, 0]),
        int(np.argmin(uni_curve)),
    )
    return pair, uni


def _check_coefficient_index(model: PenalizedModel, s: int) -> None:
    if s < model.unit or s > model.n_steps:
        raise ValueError(
            f"coefficients need origin + 1 <= s <= horizon; got index {s} (unit={model.unit})"
        )


def coupling_measure(model: PenalizedModel, s: int, x1: int, x2: int) -> Measure:
    """``min(Phi_{s-1,s}(delta_x1), Phi_{s-1,s}(delta_x2))`` (states by index)."""
    _check_coefficient_index(model, s)
    laws = model.conditional_laws(s - model.unit, s)
    return measure_min(Measure(model.space, laws[x1]), Measure(model.space, laws[x2]))


def minorization_measure(model: PenalizedModel, s: int) -> Measure:
    """``nu_s = min_x Phi_{s-1,s}(delta_x)``."""
    _check_coefficient_index(model, s)
    laws = model.conditional_laws(s - model.unit, s)
    return Measure(model.space, laws.min(axis=0))


def pair_coefficient(model: PenalizedModel, s: int, horizon: int | None = None) -> CoefficientEstimate:
    """``d_s`` capped at ``horizon`` grid steps."""
    _check_coefficient_index(model, s)
    laws = model.conditional_laws(s - model.unit, s)
    return _estimates(model, laws, s, horizon)[0]


def uniform_coefficient(model: PenalizedModel, s: int, horizon: int | None = None) -> CoefficientEstimate:
    """``d'_s`` capped at ``horizon`` grid steps."""
    _check_coefficient_index(model, s)
    laws = model.conditional_laws(s - model.unit, s)
    return _estimates(model, laws, s, horizon)[1]


def contraction_bound(d_values: Iterable[float]) -> float:
    """``prod (1 - d)``; the empty product is 1."""
    out = 1.0
    for d in d_values:
        if not 0.0 <= d <= 1.0:
            raise ValueError(f"coefficient {d} outside [0, 1]")
        out *= 1.0 - d
    return out


class Coefficients:
    """Lazily computed ``d_s`` / ``d'_s`` for one model and horizon cap."""

    def __init__(self, model: PenalizedModel, horizon: int | None = None):
        self.model = model
        self.horizon = horizon
        self._pair: dict[int, CoefficientEstimate] = {}
        self._uniform: dict[int, CoefficientEstimate] = {}

    def _fill(self, s: int) -> None:
        if s not in self._pair:
            _check_coefficient_index(self.model, s)
            laws = self.model.conditional_laws(s - self.model.unit, s)
            self._pair[s], self._uniform[s] = _estimates(self.model, laws, s, self.horizon)

    def pair(self, s: int) -> CoefficientEstimate:
        self._fill(s)
        return self._pair[s]

    def uniform(self, s: int) -> CoefficientEstimate:
        self._fill(s)
        return self._uniform[s]

    def d(self, s: int) -> float:
        return self.pair(s).value

    def d_prime(self, s: int) -> float:
        return self.uniform(s).value

    def product_indices(self, s: int, t: int) -> list[int]:
        """Indices ``t - k*unit`` for ``k = 0 .. floor((t-s)/unit) - 1``."""
        u = self.model.unit
        return [t - k * u for k in range((t - s) // u)]

    def product(self, s: int, t: int) -> float:
        return contraction_bound(self.d(v) for v in self.product_indices(s, t))

    def computed(self) -> list[int]:
        return sorted(self._pair)


@dataclass
class ContractionRecord:
    s: int
    t: int
    T: int
    lhs_k: float
    bound_k: float
    slack_k: float
    lhs_phi: float
    bound_phi: float
    slack_phi: float

    @property
    def passed(self) -> bool:
        return min(self.slack_k, self.slack_phi) >= -SLACK_TOL


@dataclass
class MixingReport:
    """Per-time-index coefficient table plus verification records."""

    model_name: str
    unit: int
    horizon: int | None
    indices: list[int]
    nu_mass: list[float]
    nu_pair_min_mass: list[float]
    d: list[float]
    d_prime: list[float]
    stabilized_d: list[bool]
    stabilized_d_prime: list[bool]
    records: list[ContractionRecord] = field(default_factory=list)

    def product(self, s: int, t: int) -> float:
        """``prod (1 - d_{t - k})`` from the tabulated coefficients."""
        pos = {v: k for k, v in enumerate(self.indices)}
        return contraction_bound(self.d[pos[t - k * self.unit]] for k in range((t - s) // self.unit))

    def invariant_violations(self) -> list[str]:
        bad = []
        for k, s in enumerate(self.indices):
            if not 0.0 <= self.d_prime[k] <= self.d[k] <= 1.0:
                bad.append(f"s={s}: d'={self.d_prime[k]!r}, d={self.d[k]!r}")
            if not 0.0 <= self.nu_mass[k] <= self.nu_pair_min_mass[k] <= 1.0 + 1e-12:
                bad.append(f"s={s}: nu masses out of order")
        for r in self.records:
            if not r.passed:
                bad.append(f"record (s={r.s},t={r.t},T={r.T}) slack below tolerance")
        return bad

    def to_json(self) -> str:
        obj = asdict(self)
        return json.dumps(obj, indent=1, sort_keys=True)

    def coefficients_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["index", "nu_mass", "nu_pair_min_mass", "d", "d_prime", "stabilized_d", "stabilized_d_prime"])
        for k, s in enumerate(self.indices):
            w.writerow(
                [
                    s,
                    repr(self.nu_mass[k]),
                    repr(self.nu_pair_min_mass[k]),
                    repr(self.d[k]),
                    repr(self.d_prime[k]),
                    int(self.stabilized_d[k]),
                    int(self.stabilized_d_prime[k]),
                ]
            )
        return buf.getvalue()

    def records_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        names = list(ContractionRecord.__dataclass_fields__)
        w.writerow(names)
        for r in self.records:
            w.writerow([repr(v) if isinstance(v, float) else v for v in astuple_record(r)])
        return buf.getvalue()


def astuple_record(r: ContractionRecord) -> tuple:
    return tuple(getattr(r, f) for f in ContractionRecord.__dataclass_fields__)


def mixing_report(
    model: PenalizedModel,
    horizon: int | None = None,
    coefficients: Coefficients | None = None,
) -> MixingReport:
    """Coefficients at every index ``s >= unit`` of the grid."""
    coeffs = coefficients or Coefficients(model, horizon)
    idx = list(range(model.unit, model.n_steps + 1))
    pairs = [coeffs.pair(s) for s in idx]
    unis = [coeffs.uniform(s) for s in idx]
    return MixingReport(
        model_name=model.name,
        unit=model.unit,
        horizon=coeffs.horizon,
        indices=idx,
        nu_mass=[u.nu_mass for u in unis],
        nu_pair_min_mass=[p.nu_mass for p in pairs],
        d=[p.value for p in pairs],
        d_prime=[u.value for u in unis],
        stabilized_d=[p.stabilized for p in pairs],
        stabilized_d_prime=[u.stabilized for u in unis],
    )


@dataclass(frozen=True)
class SegmentResult:
    segments: list[tuple[int, int]]
    d: list[float]
    d_prime: list[float]
    product: float


def segment_coefficients(
    model: PenalizedModel,
    segments: Sequence[tuple[int, int]],
    horizon: int | None = None,
) -> SegmentResult:
    """Coefficients ``d_{s_i,t_i}`` over variable-length segments.

    Requires ``s_0 < t_0 <= s_1 < t_1 <= ...`` (grid indices). The coupling
    measure of a segment is the minimum of ``Phi_{s_i,t_i}(delta_x)`` and the
    weight ratios are evaluated from ``t_i`` onwards.
    """
    prev_end = -1
    for a, b in segments:
        if not a < b or a < prev_end:
            raise ValueError(f"segments must satisfy s_0 < t_0 <= s_1 < ...; got {list(segments)}")
        prev_end = b
    ds, dps = [], []
    for a, b in segments:
        laws = model.conditional_laws(a, b)
        p, u = _estimates(model, laws, b, horizon)
        ds.append(p.value)
        dps.append(u.value)
    return SegmentResult(list(map(tuple, segments)), ds, dps, contraction_bound(ds))


def verify_contraction(
    model: PenalizedModel,
    mu1: Measure,
    mu2: Measure,
    s: int,
    t: int,
    T: int,
    coefficients: Coefficients | None = None,
) -> ContractionRecord:
    """Compare both sides of the K- and Phi-contraction bounds."""
    if not (0 <= s and s + model.unit <= t <= T <= model.n_steps):
        raise ValueError(f"need s + 1 <= t <= T on the grid; got s={s}, t={t}, T={T}")
    coeffs = coefficients or Coefficients(model)
    if coeffs.horizon is not None and coeffs.horizon < T - s:
        raise ValueError("coefficient horizon does not cover T - s")
    prod = coeffs.product(s, t)
    lhs_k = tv_distance(k_operator(model, mu1, s, t, T), k_operator(model, mu2, s, t, T))
    bound_k = prod * tv_distance(mu1, mu2)
    lhs_phi = tv_distance(phi(model, mu1, s, t), phi(model, mu2, s, t))
    bound_phi = 2.0 * prod
    return ContractionRecord(s, t, T, lhs_k, bound_k, bound_k - lhs_k, lhs_phi, bound_phi, bound_phi - lhs_phi)


def random_probability(rng: np.random.Generator, n: int) -> np.ndarray:
    """Dirichlet(1) draw, occasionally a Dirac, so sweeps hit extremes."""
    if rng.random() < 0.25:
        w = np.zeros(n)
        w[rng.integers(n)] = 1.0
        return w
    return rng.dirichlet(np.ones(n))


def random_triple(rng: np.random.Generator, model: PenalizedModel) -> tuple[int, int, int]:
    u, n = model.unit, model.n_steps
    s = int(rng.integers(0, n - u + 1))
    t = int(rng.integers(s + u, n + 1))
    T = int(rng.integers(t, n + 1))
    return s, t, T


def contraction_sweep(
    model: PenalizedModel,
    n_configs: int,
    seed: int,
    coefficients: Coefficients | None = None,
    workers: int = 1,
) -> list[ContractionRecord]:
    """Random ``(mu1, mu2, s, t, T)`` configurations, drawn up front."""
    rng = np.random.default_rng(seed)
    coeffs = coefficients or Coefficients(model)
    configs = []
    for _ in range(n_configs):
        mu1 = Measure(model.space, random_probability(rng, model.n))
        mu2 = Measure(model.space, random_probability(rng, model.n))
        configs.append((mu1, mu2, *random_triple(rng, model)))
    # coefficients are filled once, before any parallel reads
    needed = {v for _, _, s, t, _ in configs for v in coeffs.product_indices(s, t)}
    for v in sorted(needed):
        coeffs.pair(v)

    def one(cfg):
        return verify_contraction(model, *cfg, coefficients=coeffs)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(one, configs))
    return [one(c) for c in configs]
