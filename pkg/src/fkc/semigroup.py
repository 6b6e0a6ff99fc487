"""Exact propagation of penalized (Feynman-Kac) flows on finite spaces.

A :class:`PenalizedModel` is a sequence of nonnegative step kernels
``Q_k(x, y) = E_{t_k,x}(Z_{t_k,t_{k+1}} 1{X_{t_{k+1}} = y})``. Everything
else (the normalized flow, backward weights, the look-ahead operator K) is
linear algebra on products of these kernels. Products are kept in scaled
form ``(M, log c)`` with ``Q = c * M`` and ``max(M) = 1`` so that long
horizons with killing neither underflow nor overflow.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from scipy.linalg import expm

from .errors import HypothesisViolation, StructuralError
from .measure import Measure, StateSpace, TimeGrid

KernelFn = Callable[[int], np.ndarray]


def _scaled_matmul(a, la, b, lb):
    c = a @ b
    m = c.max()
    if m > 0:
        c /= m
        return c, la + lb + float(np.log(m))
    return c, -np.inf


class PenalizedModel:
    """State space, time grid and per-step penalized kernels.

    Parameters
    ----------
    space : StateSpace
    grid : TimeGrid
    step_kernel : callable
        ``step_kernel(k)`` returns the nonnegative matrix for grid step
        ``[t_k, t_{k+1}]``.
    base_kernel : callable, optional
        The unpenalized Markov kernel of X for the same step. Needed by
        irreducibility estimates.
    """

    def __init__(
        self,
        space: StateSpace,
        grid: TimeGrid,
        step_kernel: KernelFn,
        *,
        base_kernel: KernelFn | None = None,
        name: str = "model",
    ):
        self.space = space
        self.grid = grid
        self.name = name
        self._step_kernel = step_kernel
        self._base_kernel = base_kernel
        self._kernels: dict[int, np.ndarray] = {}
        self._blocks: dict[tuple[int, int], tuple[np.ndarray, float]] = {}
        self._base_model: PenalizedModel | None = None

    @property
    def n(self) -> int:
        return self.space.size

    @property
    def n_steps(self) -> int:
        return self.grid.n_steps

    @property
    def unit(self) -> int:
        return self.grid.unit

    @property
    def has_base(self) -> bool:
        return self._base_kernel is not None

    def kernel(self, k: int) -> np.ndarray:
        """Step kernel ``Q_k``, validated against the positivity hypothesis."""
        cached = self._kernels.get(k)
        if cached is not None:
            return cached
        if not 0 <= k < self.n_steps:
            raise IndexError(f"step {k} outside grid with {self.n_steps} steps")
        q = np.array(self._step_kernel(k), dtype=float)
        if q.shape != (self.n, self.n):
            raise ValueError(f"kernel {k} has shape {q.shape}, expected {(self.n, self.n)}")
        if not np.all(np.isfinite(q)):
            raise HypothesisViolation(f"kernel {k} has non-finite entries")
        # expm round-off can leave -1e-17 entries
        q[(q < 0) & (q > -1e-13)] = 0.0
        if np.any(q < 0):
            raise ValueError(f"kernel {k} has negative entries")
        if np.any(q.sum(axis=1) <= 0):
            raise HypothesisViolation(f"kernel {k} has a row with zero expected weight")
        q.setflags(write=False)
        self._kernels[k] = q
        return q

    def base(self) -> "PenalizedModel":
        """The same chain without penalization (Z = 1)."""
        if self._base_kernel is None:
            raise ValueError(f"model {self.name!r} carries no unpenalized kernel")
        if self._base_model is None:
            self._base_model = PenalizedModel(
                self.space, self.grid, self._base_kernel, name=self.name + ":base"
            )
        return self._base_model

    # products ------------------------------------------------------------

    def _block(self, level: int, i: int) -> tuple[np.ndarray, float]:
        key = (level, i)
        hit = self._blocks.get(key)
        if hit is not None:
            return hit
        if level == 0:
            q = self.kernel(i)
            m = q.max()
            out = (q / m, float(np.log(m)))
        else:
            a, la = self._block(level - 1, 2 * i)
            b, lb = self._block(level - 1, 2 * i + 1)
            out = _scaled_matmul(a, la, b, lb)
        # concurrent writers store identical values
        self._blocks[key] = out
        return out

    def scaled_product(self, s: int, t: int) -> tuple[np.ndarray, float]:
        """``(M, log c)`` with ``Q_{s,t} = c * M``, built from dyadic blocks."""
        self._check_order(s, t)
        if s == t:
            return np.eye(self.n), 0.0
        result = None
        p = s
        while p < t:
            level = 0
            while p % (2 ** (level + 1)) == 0 and p + 2 ** (level + 1) <= t:
                level += 1
            blk, lb = self._block(level, p >> level)
            if result is None:
                result = (blk.copy(), lb)
            else:
                result = _scaled_matmul(result[0], result[1], blk, lb)
            p += 2**level
        return result

    def product(self, s: int, t: int) -> np.ndarray:
        m, log_c = self.scaled_product(s, t)
        return m * np.exp(log_c)

    def conditional_laws(self, s: int, t: int) -> np.ndarray:
        """Matrix whose row x is ``Phi_{s,t}(delta_x)``."""
        m, _ = self.scaled_product(s, t)
        rows = m.sum(axis=1)
        if np.any(rows <= 0):
            raise HypothesisViolation(f"zero expected weight on [{s}, {t}]")
        return m / rows[:, None]

    def _check_order(self, s: int, t: int) -> None:
        if s > t:
            raise ValueError(f"need s <= t, got s={s}, t={t}")
        if s < 0 or t > self.n_steps:
            raise ValueError(f"[{s}, {t}] outside grid [0, {self.n_steps}]")


# builders -----------------------------------------------------------------


def discrete_chain_model(
    space: StateSpace,
    n_steps: int,
    transition: np.ndarray | KernelFn,
    survival: np.ndarray | Callable[[int], np.ndarray] | None = None,
    *,
    name: str = "chain",
) -> PenalizedModel:
    """Discrete-time chain with a per-step multiplicative weight.

    ``Q_k(x, y) = P_k(x, y) * g_k(y)`` where ``g_k`` is the weight collected
    on arrival (a survival probability for killed chains, ``exp(kappa)`` for
    potentials). ``g`` may also be a full matrix ``g_k(x, y)``.
    """
    grid = TimeGrid(0.0, 1.0, float(n_steps))

    def p_of(k):
        return np.asarray(transition(k) if callable(transition) else transition, dtype=float)

    def g_of(k):
        if survival is None:
            return 1.0
        g = np.asarray(survival(k) if callable(survival) else survival, dtype=float)
        return g[None, :] if g.ndim == 1 else g

    return PenalizedModel(
        space, grid, lambda k: p_of(k) * g_of(k), base_kernel=p_of, name=name
    )


def ctmc_model(
    space: StateSpace,
    grid: TimeGrid,
    generator: Callable[[float], np.ndarray],
    potential: Callable[[float], np.ndarray] | None = None,
    *,
    breakpoints: Sequence[float] = (),
    name: str = "ctmc",
) -> PenalizedModel:
    """Continuous-time chain with exp-integral penalization.

    Rates and potential are treated as constant on every piece of a mesh
    interval cut at ``breakpoints`` and evaluated at the piece midpoint;
    each piece contributes ``expm((L + diag(kappa)) * length)``.
    """
    cuts = np.sort(np.asarray(breakpoints, dtype=float))
    cache: dict[tuple, np.ndarray] = {}

    def piece(t_mid, dt, penalized):
        gen = np.asarray(generator(t_mid), dtype=float)
        if penalized and potential is not None:
            gen = gen + np.diag(np.asarray(potential(t_mid), dtype=float))
        key = (gen.tobytes(), round(dt, 14))
        out = cache.get(key)
        if out is None:
            out = expm(gen * dt)
            cache[key] = out
        return out

    def pieces(k):
        a, b = grid.time(k), grid.time(k + 1)
        inner = cuts[(cuts > a + 1e-12) & (cuts < b - 1e-12)]
        edges = np.concatenate([[a], inner, [b]])
        return list(zip(edges[:-1], edges[1:]))

    def make(penalized):
        def kernel(k):
            out = None
            for lo, hi in pieces(k):
                e = piece(0.5 * (lo + hi), hi - lo, penalized)
                out = e if out is None else out @ e
            return out

        return kernel

    return PenalizedModel(space, grid, make(True), base_kernel=make(False), name=name)


# flow operations -----------------------------------------------------------


def log_propagate(model: PenalizedModel, mu: Measure, s: int, t: int) -> tuple[np.ndarray, float]:
    """Return ``(Phi_{s,t}(mu) weights, log E_{s,mu}(Z_{s,t}))``.

    Renormalizes after each step and accumulates the log-mass separately.
    """
    model._check_order(s, t)
    if mu.space != model.space:
        raise StructuralError("measure and model use different state spaces")
    mass = mu.total_mass
    if mass <= 0:
        raise ValueError("cannot propagate a zero measure")
    w = mu.weights / mass
    log_mass = float(np.log(mass))
    for k in range(s, t):
        w = w @ model.kernel(k)
        m = w.sum()
        if m <= 0:
            raise HypothesisViolation(f"expected weight vanished at step {k}")
        w = w / m
        log_mass += float(np.log(m))
    return w, log_mass


def propagate_unnormalized(model: PenalizedModel, mu: Measure, s: int, t: int) -> Measure:
    """``mu^T Q_{s,t}``; total mass is ``E_{s,mu}(Z_{s,t})``."""
    w, log_mass = log_propagate(model, mu, s, t)
    return Measure(model.space, w * np.exp(log_mass))


def phi(model: PenalizedModel, mu: Measure, s: int, t: int) -> Measure:
    """Normalized Feynman-Kac flow ``Phi_{s,t}(mu)``."""
    w, _ = log_propagate(model, mu, s, t)
    return Measure(model.space, w)


def log_backward_weight(model: PenalizedModel, t: int, T: int) -> tuple[np.ndarray, float]:
    """``(h / c, log c)`` where ``h(x) = E_{t,x}(Z_{t,T})`` and ``c = max h``."""
    model._check_order(t, T)
    h = np.ones(model.n)
    log_c = 0.0
    for k in range(T - 1, t - 1, -1):
        h = model.kernel(k) @ h
        m = h.max()
        if m <= 0:
            raise HypothesisViolation(f"backward weight vanished at step {k}")
        h = h / m
        log_c += float(np.log(m))
    if np.any(h <= 0):
        raise HypothesisViolation(f"E_(t,x)(Z_(t,T)) = 0 for some x (t={t}, T={T})")
    return h, log_c


def backward_weight(model: PenalizedModel, t: int, T: int) -> np.ndarray:
    """``h_t(x) = E_{t,x}(Z_{t,T})`` for every state x."""
    h, log_c = log_backward_weight(model, t, T)
    return h * np.exp(log_c)


def k_operator(model: PenalizedModel, mu: Measure, s: int, t: int, T: int) -> Measure:
    """``mu K^T_{s,t}``: law of X_t reweighted by the whole of ``Z_{s,T}``.

    Each start x contributes the row-normalized ``Q_{s,t}(x, .) h_t^T(.)``;
    rows are then mixed linearly by ``mu``.
    """
    if not s <= t <= T:
        raise ValueError(f"need s <= t <= T, got {s}, {t}, {T}")
    m, _ = model.scaled_product(s, t)
    h, _ = log_backward_weight(model, t, T)
    tilted = m * h[None, :]
    rows = tilted.sum(axis=1)
    if np.any(rows <= 0):
        raise HypothesisViolation("zero look-ahead weight for some starting state")
    tilted /= rows[:, None]
    return Measure(model.space, mu.weights @ tilted)
