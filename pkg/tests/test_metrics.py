import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from modiqa.metrics import UndefinedCorrelationError, krocc, logistic4, logistic_fit, plcc, srocc


def pearson_oracle(x, y):
    n = len(x)
    mx, my = sum(x) / n, sum(y) / n
    cov = sum((a - mx) * (b - my) for a, b in zip(x, y))
    vx = sum((a - mx) ** 2 for a in x)
    vy = sum((b - my) ** 2 for b in y)
    return cov / math.sqrt(vx * vy)


def rank_oracle(x):
    """Average rank by counting: 1 + #smaller + (#equal - 1) / 2."""
    return [1 + sum(b < a for b in x) + (sum(b == a for b in x) - 1) / 2 for a in x]


def kendall_oracle(x, y):
    n = len(x)
    c = d = tx = ty = 0
    for i in range(n):
        for j in range(i + 1, n):
            sx = (x[i] > x[j]) - (x[i] < x[j])
            sy = (y[i] > y[j]) - (y[i] < y[j])
            if sx == 0:
                tx += 1
            if sy == 0:
                ty += 1
            if sx * sy > 0:
                c += 1
            elif sx * sy < 0:
                d += 1
    n0 = n * (n - 1) / 2
    return (c - d) / math.sqrt((n0 - tx) * (n0 - ty))


def random_vectors(rng, n):
    x = rng.integers(0, max(3, n // 2), n).astype(float)  # many ties
    y = x + rng.integers(-3, 4, n)
    if rng.random() < 0.5:
        x = x + rng.standard_normal(n)
    return x.tolist(), y.tolist()


class TestExamples:
    def test_srocc(self):
        assert srocc([1, 2, 3], [10, 20, 30]) == pytest.approx(1.0)
        assert srocc([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0)

    def test_krocc(self):
        assert krocc([1, 2, 3], [1, 3, 2]) == pytest.approx(1 / 3)
        assert krocc([4, 1, 7], [4, 1, 7]) == 1.0

    def test_plcc(self):
        x = np.array([0.5, 1.0, 3.0, -2.0])
        assert plcc(x, 2 * x + 1) == pytest.approx(1.0)
        assert plcc(x, -x) == pytest.approx(-1.0)

    def test_srocc_tied_ranks(self):
        assert rank_oracle([1, 2, 2, 3]) == [1, 2.5, 2.5, 4]
        x, y = [1, 2, 2, 3], [1, 3, 2, 4]
        assert srocc(x, y) == pytest.approx(pearson_oracle(rank_oracle(x), rank_oracle(y)), abs=1e-12)

    @pytest.mark.parametrize("fn", [plcc, srocc, krocc])
    def test_constant_input(self, fn):
        with pytest.raises(UndefinedCorrelationError):
            fn([1.0, 1.0, 1.0], [1.0, 2.0, 3.0])

    @pytest.mark.parametrize("fn", [plcc, srocc, krocc])
    def test_too_short(self, fn):
        with pytest.raises(UndefinedCorrelationError):
            fn([1.0], [2.0])


class TestOracles:
    def test_against_direct_definitions(self, rng):
        for _ in range(200):
            n = int(rng.integers(2, 101))
            x, y = random_vectors(rng, n)
            if len(set(x)) < 2 or len(set(y)) < 2:
                continue
            assert abs(plcc(x, y) - pearson_oracle(x, y)) <= 1e-12
            assert abs(srocc(x, y) - pearson_oracle(rank_oracle(x), rank_oracle(y))) <= 1e-12
            assert abs(krocc(x, y) - kendall_oracle(x, y)) <= 1e-12

    def test_monotone_invariance(self, rng):
        x, y = rng.standard_normal((2, 60))
        x[::7] = x[0]
        for f in (np.exp, lambda v: v**3, lambda v: 5 * v - 2, np.arctan):
            assert srocc(f(x), y) == srocc(x, y)
            assert krocc(f(x), y) == krocc(x, y)


class TestLogisticFit:
    def test_recovers_generator(self, rng):
        s = np.sort(rng.uniform(-3, 3, 60))
        beta = (2.0, 1.5, 0.3, 1.0)
        fit = logistic_fit(s, logistic4(s, *beta))
        assert fit.residual < 1e-6
        np.testing.assert_allclose(fit.mapped, logistic4(s, *beta), atol=1e-6)

    def test_linear_relation_never_hurts(self, rng):
        s = rng.uniform(0, 1, 80)
        t = 3 * s + 0.1 * rng.standard_normal(80)
        fit = logistic_fit(s, t)
        assert plcc(fit.mapped, t) >= plcc(s, t) - 1e-9

    def test_preserves_ranks(self, rng):
        s = rng.standard_normal(50)
        t = np.tanh(s) + 0.2 * rng.standard_normal(50)
        params, mapped = logistic_fit(s, t)
        assert params[0] * params[1] > 0
        assert srocc(mapped, t) == pytest.approx(srocc(s, t), abs=1e-12)

    def test_too_few_points(self):
        with pytest.raises(ValueError):
            logistic_fit([1, 2, 3, 4], [1, 2, 3, 4])

    def test_constant_predictions(self):
        with pytest.raises(UndefinedCorrelationError):
            logistic_fit([1.0] * 6, [1, 2, 3, 4, 5, 6])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 5), st.integers(0, 5)), min_size=2, max_size=30))
def test_coefficients_bounded(pairs):
    x = [float(a) for a, _ in pairs]
    y = [float(b) for _, b in pairs]
    if len(set(x)) < 2 or len(set(y)) < 2:
        return
    for fn in (plcc, srocc, krocc):
        assert -1.0 <= fn(x, y) <= 1.0
    assert krocc(x, y) == pytest.approx(kendall_oracle(x, y), abs=1e-12)
