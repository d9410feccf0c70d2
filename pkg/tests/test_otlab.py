import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from gpot.otlab import (
    TransportReport,
    displacement_cost,
    displacement_stderr,
    exact_discrete_ot,
    matching_agreement,
)


def brute_force_ot(x, y):
    """Minimum mean squared cost over all n! permutations."""
    cost = ((x[:, None, :] - y[None, :, :]) ** 2).sum(-1)
    n = len(x)
    best, best_perm, ties = math.inf, None, 0
    for perm in itertools.permutations(range(n)):
        c = cost[np.arange(n), perm].mean()
        if c < best:
            best, best_perm, ties = c, np.array(perm), 0
        elif c == best:
            ties += 1
    return best, best_perm, ties == 0


def test_displacement_cost_trivial_maps():
    x = np.random.default_rng(0).normal(size=(100, 3))
    assert displacement_cost(lambda p: p, x) == 0.0
    c = np.array([0.5, -1.0, 2.0])
    assert displacement_cost(lambda p: p + c, x) == pytest.approx(float(c @ c), rel=1e-14)
    assert displacement_stderr(lambda p: p + c, x) == pytest.approx(0.0, abs=1e-14)


def test_one_dimensional_translation_equals_w2():
    m = 1.7
    x = np.random.default_rng(1).normal(size=500)
    assert displacement_cost(lambda p: p + m, x) == pytest.approx(m * m, rel=1e-12)


def test_displacement_rejects_bad_samples():
    with pytest.raises(ValueError):
        displacement_cost(lambda p: p, np.zeros((0, 2)))
    with pytest.raises(ValueError):
        displacement_cost(lambda p: p, np.array([[np.nan, 0.0]]))


def test_identical_sets_give_zero_and_identity():
    x = np.random.default_rng(2).normal(size=(40, 2))
    cost, perm = exact_discrete_ot(x, x)
    assert cost == 0.0
    np.testing.assert_array_equal(perm, np.arange(40))


def test_assignment_matches_brute_force():
    rng = np.random.default_rng(3)
    for trial in range(100):
        n = 2 + trial % 6  # 2..7
        d = 1 + trial % 3
        x, y = rng.normal(size=(n, d)), rng.normal(size=(n, d))
        cost, perm = exact_discrete_ot(x, y)
        best, best_perm, unique = brute_force_ot(x, y)
        assert cost == best
        if unique:
            np.testing.assert_array_equal(perm, best_perm)


def test_one_dimensional_matching_is_monotone():
    rng = np.random.default_rng(4)
    for n in (5, 7, 500):
        x, y = rng.normal(size=n), rng.normal(size=n) + 1.0
        _, perm = exact_discrete_ot(x, y)
        order_x, order_y = np.argsort(x), np.argsort(y)
        np.testing.assert_array_equal(perm[order_x], order_y)


def test_assignment_errors():
    with pytest.raises(ValueError):
        exact_discrete_ot(np.zeros((3, 2)), np.zeros((4, 2)))
    with pytest.raises(ValueError):
        exact_discrete_ot(np.zeros((4097, 1)), np.zeros((4097, 1)))


@given(st.integers(2, 30), st.integers(0, 10_000))
def test_lower_bound_over_permutation_maps(n, seed):
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=(n, 2)), rng.normal(size=(n, 2))
    cost, _ = exact_discrete_ot(x, y)
    for _ in range(5):
        sigma = rng.permutation(n)
        assert cost <= displacement_cost(lambda p: y[sigma], x) + 1e-12


@given(
    arrays(np.float64, (12, 2), elements=st.floats(-10, 10)),
    arrays(np.float64, (12, 2), elements=st.floats(-10, 10)),
    arrays(np.float64, (2,), elements=st.floats(-100, 100)),
)
def test_translation_equivariance(x, y, shift):
    c0, _ = exact_discrete_ot(x, y)
    c1, _ = exact_discrete_ot(x + shift, y + shift)
    assert abs(c0 - c1) < 1e-10 * max(1.0, c0)


def test_agreement_extremes():
    rng = np.random.default_rng(5)
    x, y = rng.normal(size=(50, 2)), rng.normal(size=(50, 2))
    _, perm = exact_discrete_ot(x, y)
    assert matching_agreement(lambda p: y[perm], x, y) == 1.0
    constant = matching_agreement(lambda p: np.zeros_like(p), x, y)
    assert constant <= 1 / 50


def test_agreement_uses_given_permutation():
    x = np.array([[0.0], [1.0]])
    y = np.array([[0.0], [1.0]])
    swapped = np.array([1, 0])
    assert matching_agreement(lambda p: p, x, y, perm=swapped) == 0.0
    assert matching_agreement(lambda p: p, x, y) == 1.0


def test_report_json_round_trip(tmp_path):
    rep = TransportReport(1.2, 2.5, 0.3, 1.0, 0.4, 2000, 7, ot_cost_stderr=0.01)
    back = TransportReport.from_json(rep.to_json())
    assert back == rep
    rep.save(tmp_path / "r.json")
    assert json.loads((tmp_path / "r.json").read_text())["sample_count"] == 2000


def test_report_validation():
    with pytest.raises(ValueError):
        TransportReport(-1.0, 0, 0, 0, 0.5, 1, 0)
    with pytest.raises(ValueError):
        TransportReport(1.0, 0, 0, 0, 1.5, 1, 0)
    data = TransportReport(1.0, 0, 0, 0, 0.5, 1, 0).to_dict()
    data["extra"] = 1
    with pytest.raises(ValueError):
        TransportReport.from_dict(data)
    del data["extra"], data["seed"]
    with pytest.raises(ValueError):
        TransportReport.from_dict(data)
