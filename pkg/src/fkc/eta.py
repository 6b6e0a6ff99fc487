"""The eigenfunction eta and the Q-process (the flow conditioned on never dying).

``eta`` is represented by its finite-terminal proxy

    eta_s^(T)(x) = E_{s,x}(Z_{s,T}) / E_{0,x0}(Z_{0,T}),

which satisfies ``Q_{s,t} eta_t = eta_s`` exactly for every ``s <= t <= T``.
Convergence in ``T`` is reported as a diagnostic, not extrapolated.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import HypothesisViolation, ModelDegeneracy
from .measure import Measure, tv_distance
from .mixing import SLACK_TOL, Coefficients
from .semigroup import PenalizedModel, log_backward_weight


def _backward_family(model: PenalizedModel, T: int) -> tuple[np.ndarray, np.ndarray]:
    """Scaled ``h_s = Q_{s,T} 1`` for ``s = 0..T`` with their log scales."""
    h = np.ones(model.n)
    vals = np.empty((T + 1, model.n))
    logs = np.empty(T + 1)
    vals[T], logs[T] = h, 0.0
    log_c = 0.0
    for k in range(T - 1, -1, -1):
        h = model.kernel(k) @ h
        m = h.max()
        if not m > 0:
            raise HypothesisViolation(f"backward weight vanished at step {k}")
        h = h / m
        log_c += float(np.log(m))
        vals[k], logs[k] = h, log_c
    return vals, logs


def _eta_values(model: PenalizedModel, T: int, x0: int) -> np.ndarray:
    vals, logs = _backward_family(model, T)
    denom = vals[0, x0]
    if not denom > 0:
        raise HypothesisViolation(f"E_(0,x0)(Z_(0,{T})) = 0")
    scale = np.exp(logs - logs[0]) / denom
    out = vals * scale[:, None]
    if np.any(out <= 0):
        raise HypothesisViolation("eta proxy is not strictly positive")
    return out


@dataclass(frozen=True)
class EtaFamily:
    """Finite-terminal eta proxy on grid indices ``0..T``.

    Attributes
    ----------
    values : ndarray, shape (T + 1, n)
        ``values[s, x] = eta_s^(T)(x)``.
    change : ndarray
        ``sup_x |eta_s^(T) - eta_s^(T - delta)| / eta_s^(T)(x0)`` for
        ``s = 0..T - delta``.
    """

    x0: int
    T: int
    delta: int
    values: np.ndarray
    change: np.ndarray

    def at(self, s: int) -> np.ndarray:
        return self.values[s]

    @property
    def convergence(self) -> float:
        """Change at ``s = 0``."""
        return float(self.change[0]) if self.change.size else float("nan")

    @property
    def sup_norms(self) -> np.ndarray:
        return self.values.max(axis=1)

    def to_csv(self, labels=None) -> str:
        labels = list(labels) if labels is not None else list(range(self.values.shape[1]))
        lines = ["index," + ",".join(str(l) for l in labels)]
        for s, row in enumerate(self.values):
            lines.append(f"{s}," + ",".join(repr(float(v)) for v in row))
        return "\n".join(lines) + "\n"


def eta_extract(model: PenalizedModel, T: int, x0: int = 0, delta: int | None = None) -> EtaFamily:
    """Build the eta proxy with terminal index ``T`` and reference state ``x0``.

    ``delta`` (default one time unit) sets the terminal shift used by the
    convergence diagnostic.
    """
    model._check_order(0, T)
    delta = model.unit if delta is None else delta
    values = _eta_values(model, T, x0)
    if 0 < delta <= T:
        prev = _eta_values(model, T - delta, x0)
        diff = np.abs(values[: T - delta + 1] - prev).max(axis=1)
        change = diff / values[: T - delta + 1, x0]
    else:
        change = np.empty(0)
    values.setflags(write=False)
    return EtaFamily(x0, T, delta, values, change)


def eigen_residual(model: PenalizedModel, eta: EtaFamily, s: int, t: int) -> float:
    """``max_x |Q_{s,t} eta_t - eta_s|(x) / eta_s(x)``."""
    if not 0 <= s <= t <= eta.T:
        raise ValueError(f"need 0 <= s <= t <= T={eta.T}; got s={s}, t={t}")
    m, log_c = model.scaled_product(s, t)
    lhs = (m @ eta.values[t]) * np.exp(log_c)
    return float(np.max(np.abs(lhs - eta.values[s]) / eta.values[s]))


@dataclass
class RatioRecord:
    s: int
    x: int
    y: int
    t: int
    u: int
    lhs: float
    bound: float
    slack: float
    constant: float
    t1: int | None
    status: str

    @property
    def passed(self) -> bool:
        return self.status == "inconclusive" or self.slack >= -SLACK_TOL


def _weight_ratio(model, s, t, x, y):
    h, _ = log_backward_weight(model, s, t)
    return h[x] / h[y]


def ratio_constant(model: PenalizedModel, coeffs: Coefficients, s: int, y: int, t_max: int):
    """``C_{s,y} = 2 sup_z E_{s,z} Z_{s,t1} / (d'_{t1} E_{s,y} Z_{s,t1})``.

    Returns ``(C, t1)`` or ``(inf, None)`` when no ``t1 <= t_max`` has
    ``d'_{t1} > 0``.
    """
    for t1 in range(s + model.unit, t_max + 1):
        dp = coeffs.d_prime(t1)
        if dp > 0:
            h, _ = log_backward_weight(model, s, t1)
            return 2.0 * h.max() / (dp * h[y]), t1
    return float("inf"), None


def ratio_convergence_check(
    model: PenalizedModel,
    s: int,
    x: int,
    y: int,
    t: int,
    u: int,
    coefficients: Coefficients | None = None,
) -> RatioRecord:
    """Compare the weight-ratio increment between ``t`` and ``u`` to its bound."""
    if not (s + model.unit <= t <= u <= model.n_steps):
        raise ValueError(f"need s + 1 <= t <= u <= horizon; got s={s}, t={t}, u={u}")
    coeffs = coefficients or Coefficients(model)
    lhs = abs(_weight_ratio(model, s, t, x, y) - _weight_ratio(model, s, u, x, y))
    const, t1 = ratio_constant(model, coeffs, s, y, t)
    if t1 is None:
        return RatioRecord(s, x, y, t, u, lhs, float("inf"), float("inf"), const, None, "inconclusive")
    best = float("inf")
    for v in range(t1, t + 1):
        dp = coeffs.d_prime(v)
        if dp > 0:
            best = min(best, coeffs.product(s, v) / dp)
    bound = const * best
    return RatioRecord(s, x, y, t, u, lhs, bound, bound - lhs, const, t1, "ok")


def uniqueness_check(
    model: PenalizedModel,
    T: int,
    f_a,
    f_b,
    window: tuple[int, int] = (0, 5),
    x0: int = 0,
) -> float:
    """Distance between two backward solutions after normalizing at ``x0``.

    Runs ``f_s = Q_{s,T} f_T`` from both terminal vectors and returns the
    largest ``|f_s^a(x)/f_s^a(x0) - f_s^b(x)/f_s^b(x0)|`` over ``s`` in the
    window (clipped to ``[0, T]``) and all states.
    """
    f_a = np.asarray(f_a, dtype=float)
    f_b = np.asarray(f_b, dtype=float)
    for f in (f_a, f_b):
        if f.shape != (model.n,) or not np.all(np.isfinite(f)) or np.any(f <= 0):
            raise ValueError("terminal vectors must be finite and strictly positive")
    lo, hi = max(window[0], 0), min(window[1], T)
    worst = 0.0
    a, b = f_a / f_a[x0], f_b / f_b[x0]
    for k in range(T - 1, lo - 1, -1):
        q = model.kernel(k)
        a = q @ a
        b = q @ b
        a, b = a / a[x0], b / b[x0]
        if k <= hi:
            worst = max(worst, float(np.abs(a - b).max()))
    if lo == T:
        worst = float(np.abs(a - b).max())
    return worst


class QProcessKernel:
    """Doob transform of the step kernels by the eta proxy."""

    def __init__(self, model: PenalizedModel, eta: EtaFamily):
        self.model = model
        self.eta = eta
        self._steps: dict[int, np.ndarray] = {}

    @property
    def n_steps(self) -> int:
        return self.eta.T

    def _tilt(self, m: np.ndarray, u: int) -> np.ndarray:
        tilted = m * self.eta.values[u][None, :]
        rows = tilted.sum(axis=1)
        if np.any(~(rows > 0)):
            raise ModelDegeneracy(f"Q-process normalizer vanished at index {u}")
        return tilted / rows[:, None]

    def step(self, s: int) -> np.ndarray:
        """``p~(s, x; s+1, y)``."""
        if not 0 <= s < self.n_steps:
            raise IndexError(f"step {s} outside [0, {self.n_steps})")
        out = self._steps.get(s)
        if out is None:
            out = self._tilt(self.model.kernel(s), s + 1)
            out.setflags(write=False)
            self._steps[s] = out
        return out

    def direct(self, s: int, u: int) -> np.ndarray:
        """Multi-step kernel built in one go from ``Q_{s,u}`` and ``eta_u``."""
        if not 0 <= s <= u <= self.n_steps:
            raise ValueError(f"need 0 <= s <= u <= {self.n_steps}")
        m, _ = self.model.scaled_product(s, u)
        return self._tilt(m, u)

    def composed(self, s: int, u: int) -> np.ndarray:
        out = np.eye(self.model.n)
        for k in range(s, u):
            out = out @ self.step(k)
        return out

    def propagate(self, x: int, s: int, t: int) -> np.ndarray:
        w = np.zeros(self.model.n)
        w[x] = 1.0
        for k in range(s, t):
            w = w @ self.step(k)
        return w

    def max_row_error(self) -> float:
        return max(float(np.abs(self.step(k).sum(axis=1) - 1).max()) for k in range(self.n_steps))


def q_kernel_build(model: PenalizedModel, eta: EtaFamily) -> QProcessKernel:
    qk = QProcessKernel(model, eta)
    for k in range(eta.T):
        qk.step(k)
    return qk


@dataclass
class QMixingRecord:
    s: int
    t: int
    x: int
    y: int
    lhs: float
    bound: float
    slack: float

    @property
    def passed(self) -> bool:
        return self.slack >= -SLACK_TOL


def q_mixing_check(qk: QProcessKernel, coefficients, s: int, t: int, x: int, y: int) -> QMixingRecord:
    """TV between the Q-process laws from ``x`` and ``y`` against ``2 prod(1 - d)``.

    ``coefficients`` is anything with a ``product(s, t)`` method
    (:class:`~fkc.mixing.Coefficients` or a :class:`~fkc.mixing.MixingReport`).
    """
    if not 0 <= s <= t <= qk.n_steps:
        raise ValueError(f"need 0 <= s <= t <= {qk.n_steps}")
    space = qk.model.space
    lhs = tv_distance(Measure(space, qk.propagate(x, s, t)), Measure(space, qk.propagate(y, s, t)))
    bound = 2.0 * coefficients.product(s, t)
    return QMixingRecord(s, t, x, y, lhs, bound, bound - lhs)


def surrogate_condition(coefficients: Coefficients, indices) -> tuple[bool, float]:
    """Whether ``min d'_s > 0`` over ``indices`` (a sufficient condition for eta)."""
    lo = min(coefficients.d_prime(v) for v in indices)
    return lo > 0, lo
