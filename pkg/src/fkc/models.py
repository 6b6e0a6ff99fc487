"""Small shipped models used by tests, scenarios and the acceptance suite."""

from __future__ import annotations

import numpy as np

from .measure import StateSpace, TimeGrid
from .semigroup import PenalizedModel, ctmc_model, discrete_chain_model

_P_A = np.array([[0.8, 0.15, 0.05], [0.1, 0.8, 0.1], [0.05, 0.15, 0.8]])
_P_B = np.array([[0.5, 0.3, 0.2], [0.25, 0.5, 0.25], [0.2, 0.3, 0.5]])


def reference_transition(k: int) -> np.ndarray:
    a = 0.5 * (1.0 + np.sin(2 * np.pi * k / 7))
    return (1 - a) * _P_A + a * _P_B


def reference_survival(k: int) -> np.ndarray:
    return np.array(
        [
            1.0,
            0.85 + 0.1 * np.cos(2 * np.pi * k / 5),
            0.55 + 0.25 * np.sin(2 * np.pi * k / 3),
        ]
    )


def reference_chain(n_steps: int = 60) -> PenalizedModel:
    """Three-state time-inhomogeneous chain with state-dependent killing.

    Transitions blend two stochastic matrices with period 7; survival
    weights on arrival oscillate with periods 5 and 3, so neither X nor Z
    is periodic with a short period.
    """
    return discrete_chain_model(
        StateSpace(["a", "b", "c"]),
        n_steps,
        reference_transition,
        reference_survival,
        name="reference3",
    )


def two_state_substochastic(n_steps: int = 60) -> PenalizedModel:
    """Homogeneous two-state chain killed at state-dependent rates."""
    p = np.array([[0.7, 0.3], [0.4, 0.6]])
    g = np.array([0.9, 0.6])
    return discrete_chain_model(StateSpace(["0", "1"]), n_steps, p, g, name="two_state")


def two_state_substochastic_matrix() -> np.ndarray:
    return np.array([[0.7, 0.3], [0.4, 0.6]]) * np.array([0.9, 0.6])[None, :]


def rows_equal_chain(pi=(0.2, 0.5, 0.3), n_steps: int = 20) -> PenalizedModel:
    """Every row equals ``pi``: forgets its start after one step."""
    pi = np.asarray(pi, dtype=float)
    p = np.tile(pi, (pi.size, 1))
    return discrete_chain_model(StateSpace.range(pi.size), n_steps, p, name="rows_equal")


def identity_chain(n: int = 3, n_steps: int = 20) -> PenalizedModel:
    """Chain that never moves; no mixing at all."""
    return discrete_chain_model(StateSpace.range(n), n_steps, np.eye(n), name="identity")


def two_state_ctmc(kappa: float = -1.0, horizon: float = 5.0, step: float = 0.25) -> PenalizedModel:
    """Two-state jump process with a constant potential ``kappa``."""
    gen = np.array([[-1.0, 1.0], [2.0, -2.0]])
    return ctmc_model(
        StateSpace.range(2),
        TimeGrid(0.0, step, horizon),
        lambda t: gen,
        lambda t: np.full(2, kappa),
        name="two_state_ctmc",
    )


def shifted_reference_chain(c: float, n_steps: int = 60) -> PenalizedModel:
    """Reference chain with every step weight multiplied by ``exp(c)``."""
    return discrete_chain_model(
        StateSpace(["a", "b", "c"]),
        n_steps,
        reference_transition,
        lambda k: np.exp(c) * reference_survival(k),
        name=f"reference3+{c}",
    )


PRESETS = {
    "reference3": reference_chain,
    "two_state": two_state_substochastic,
    "rows_equal": rows_equal_chain,
    "identity": identity_chain,
}


# birth-death presets ---------------------------------------------------------

REFERENCE_QUENCHED = {
    "n_max": 30,
    "favorable": {"preset": "polynomial", "a1": 1.0, "delta": 1.0, "a2": 0.5, "kill": 0.5},
    "unfavorable": {"preset": "linear", "birth": 0.3, "death": 0.5, "kill": 0.5},
    "U": {"kind": "exponential", "mean": 1.0},
    "V": {"kind": "shifted_exponential", "shift": 0.5, "mean": 1.0},
    "cycles": 40,
    "seed": 2024,
    "mesh_per_unit": 4,
    "horizon": 40.0,
    "quenched": {"lam": 1.5, "F": [1, 2, 3], "bound": 3.0, "b": 6.0, "horizon_n": 10},
}


def phase_from_dict(obj: dict):
    from .birth_death import linear_rates, polynomial_rates, table_rates
    from .errors import ConfigurationError

    obj = dict(obj)
    preset = obj.pop("preset", None)
    try:
        if preset == "polynomial":
            return polynomial_rates(**obj)
        if preset == "linear":
            return linear_rates(**obj)
        if preset == "table":
            return table_rates(**obj)
    except TypeError as exc:
        raise ConfigurationError(f"bad parameters for rate preset {preset!r}: {exc}") from None
    raise ConfigurationError(f"unknown rate preset {preset!r}")


def birth_death_from_dict(cfg: dict):
    """``(BirthDeathModel, QuenchedConfig)`` from a plain configuration dict."""
    from .birth_death import BDRateSpec, QuenchedConfig, build_bd_model, sample_environment

    fav = cfg["favorable"]
    fav = [phase_from_dict(f) for f in fav] if isinstance(fav, list) else phase_from_dict(fav)
    spec = BDRateSpec(phase_from_dict(cfg["unfavorable"]), fav, int(cfg["n_max"]))
    env = sample_environment(cfg["U"], cfg["V"], int(cfg["cycles"]), int(cfg["seed"]))
    mesh = TimeGrid(0.0, 1.0 / int(cfg["mesh_per_unit"]), float(cfg["horizon"]))
    bd = build_bd_model(spec, env, mesh, name=cfg.get("name", "birth_death"))
    q = dict(cfg.get("quenched", {}))
    qc = QuenchedConfig(
        lam=float(q.get("lam", 1.5)),
        F=[int(x) for x in q.get("F", [1, 2, 3])],
        bound=float(q.get("bound", 3.0)),
        b=float(q.get("b", 6.0)),
        horizon_n=int(q.get("horizon_n", 10)),
    )
    return bd, qc


def reference_quenched(**overrides):
    cfg = {**REFERENCE_QUENCHED, **overrides}
    return birth_death_from_dict(cfg)
