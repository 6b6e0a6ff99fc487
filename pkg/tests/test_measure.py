import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fkc.errors import StructuralError
from fkc.measure import Measure, StateSpace, TimeGrid, measure_min, tv_distance

S2 = StateSpace(["x", "y"])
S3 = StateSpace.range(3)


def test_tv_examples():
    assert tv_distance(Measure.dirac(S2, "x"), Measure.dirac(S2, "x")) == 0.0
    assert tv_distance(Measure.dirac(S2, "x"), Measure.dirac(S2, "y")) == 2.0
    assert tv_distance(Measure(S2, [0.5, 0.5]), Measure(S2, [0.75, 0.25])) == 0.5


def test_min_examples():
    assert measure_min(Measure.dirac(S2, "x"), Measure.dirac(S2, "y")).total_mass == 0.0
    mu = Measure(S2, [0.3, 0.7])
    assert np.array_equal(measure_min(mu, mu).weights, mu.weights)
    out = measure_min(Measure(S2, [0.5, 0.5]), Measure(S2, [0.25, 0.75]))
    assert out.weights.tolist() == [0.25, 0.5]


def test_mismatched_spaces():
    with pytest.raises(StructuralError):
        tv_distance(Measure.uniform(S2), Measure.uniform(S3))
    with pytest.raises(StructuralError):
        measure_min(Measure.uniform(S2), Measure.uniform(S3))


def test_invalid_weights():
    with pytest.raises(ValueError):
        Measure(S2, [-0.1, 1.1])
    with pytest.raises(ValueError):
        Measure(S2, [np.nan, 1.0])
    with pytest.raises(ValueError):
        StateSpace(["a", "a"])


probs = st.lists(st.floats(0.0, 1.0), min_size=4, max_size=4).filter(lambda w: sum(w) > 1e-3)


def _prob(w):
    w = np.asarray(w)
    return Measure(StateSpace.range(4), w / w.sum())


@settings(max_examples=200, deadline=None)
@given(probs, probs, probs)
def test_tv_is_a_metric(a, b, c):
    a, b, c = _prob(a), _prob(b), _prob(c)
    assert tv_distance(a, b) == tv_distance(b, a)
    assert tv_distance(a, c) <= tv_distance(a, b) + tv_distance(b, c) + 1e-12
    assert tv_distance(a, a) == 0.0
    assert tv_distance(a, b) <= 2.0 + 1e-12
    if tv_distance(a, b) == 0.0:
        assert np.array_equal(a.weights, b.weights)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(0, 10**6), min_size=5, max_size=5),
       st.lists(st.integers(0, 10**6), min_size=5, max_size=5))
def test_min_overlap_identity(a, b):
    # dyadic weights keep every sum exact
    a = np.array(a, dtype=float) / 2**20
    b = np.array(b, dtype=float) / 2**20
    space = StateSpace.range(5)
    m = measure_min(Measure(space, a), Measure(space, b))
    assert m.total_mass == (a.sum() + b.sum() - np.abs(a - b).sum()) / 2
    assert np.all(m.weights <= a) and np.all(m.weights <= b)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 1e6, allow_subnormal=True), min_size=1, max_size=6))
def test_csv_and_json_round_trip_bit_exact(w):
    mu = Measure(StateSpace.range(len(w)), w)
    back = Measure.from_csv(mu.to_csv())
    assert back.space == mu.space
    assert back.weights.tobytes() == mu.weights.tobytes()
    back = Measure.from_json(mu.to_json())
    assert back.weights.tobytes() == mu.weights.tobytes()


def test_time_grid():
    g = TimeGrid(0.0, 0.1, 3.0)
    assert g.n_steps == 30
    assert g.unit == 10
    assert g.index(1.0) == 10
    assert g.index(0.95, mode="ceil") == 10
    with pytest.raises(ValueError):
        TimeGrid(0.0, 0.7, 1.0)
    with pytest.raises(ValueError):
        TimeGrid(0.0, 0.3, 0.9).unit
    with pytest.raises(ValueError):
        TimeGrid(1.0, 0.5, 0.0)
