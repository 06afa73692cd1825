import itertools
from math import factorial

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from thnse.quadrature import DEFAULT_DEGREE, default_rule, simplex_moment, simplex_rule


@pytest.mark.parametrize("dim", [2, 3])
def test_default_rule_exact_for_all_monomials(dim):
    rule = default_rule(dim)
    assert rule.degree == DEFAULT_DEGREE[dim]
    worst = 0.0
    for a in itertools.product(range(rule.degree + 1), repeat=dim):
        if sum(a) > rule.degree:
            continue
        q = np.sum(rule.weights * np.prod(rule.points ** np.array(a), axis=1))
        worst = max(worst, abs(q - simplex_moment(a)) / simplex_moment(a))
    assert worst < 1e-12


@pytest.mark.parametrize("dim", [2, 3])
def test_weights_positive_points_inside(dim):
    rule = default_rule(dim)
    assert np.all(rule.weights > 0)
    assert rule.weights.sum() == pytest.approx(1 / factorial(dim), rel=1e-14)
    assert np.all(rule.points > 0) and np.all(rule.points.sum(axis=1) < 1)


def test_moment_values():
    assert simplex_moment((0, 0)) == pytest.approx(0.5)
    assert simplex_moment((1, 0)) == pytest.approx(1 / 6)
    assert simplex_moment((1, 1, 1)) == pytest.approx(1 / 720)


@settings(max_examples=40, deadline=None)
@given(st.sampled_from([2, 3]), st.integers(0, 9), st.data())
def test_rule_exact_up_to_its_degree(dim, degree, data):
    rule = simplex_rule(dim, degree)
    parts = data.draw(st.lists(st.integers(0, degree), min_size=dim, max_size=dim)
                      .filter(lambda a: sum(a) <= degree))
    q = np.sum(rule.weights * np.prod(rule.points ** np.array(parts), axis=1))
    assert q == pytest.approx(simplex_moment(parts), rel=1e-11)


def test_rules_are_cached_and_comparable():
    assert simplex_rule(2, 8) is simplex_rule(2, 8)
    assert default_rule(2).same_as(simplex_rule(2, 8))
    assert not simplex_rule(2, 8).same_as(simplex_rule(2, 9))
