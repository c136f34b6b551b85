import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from modiqa import autodiff as ad
from modiqa.autodiff import ContractError, DimensionError, Parameter
from modiqa.losses import RANK_EPS, batch_rank_loss, mae_loss, pairwise_rank_loss, total_loss


def double_loop(pred, target, eps=RANK_EPS, reduction="mean"):
    terms = [pairwise_rank_loss(pred[i], pred[j], target[i], target[j], eps) for i, j in itertools.combinations(range(len(pred)), 2)]
    return sum(terms) / (len(terms) if reduction == "mean" else 1)


class TestMAE:
    def test_examples(self):
        assert float(mae_loss([1.0, 2.0], [1.0, 2.0]).data) == 0.0
        assert float(mae_loss([0.0], [2.0]).data) == 2.0

    def test_oracle(self, rng):
        p, t = rng.standard_normal((2, 40))
        assert float(mae_loss(p, t).data) == pytest.approx(np.mean(np.abs(p - t)), abs=1e-12)

    def test_length_mismatch(self):
        with pytest.raises(DimensionError):
            mae_loss([1.0, 2.0], [1.0])


class TestPairwise:
    def test_agreement_is_zero(self):
        assert pairwise_rank_loss(2, 1, 2, 1, 1e-6) == 0.0

    def test_disagreement(self):
        assert pairwise_rank_loss(1, 2, 2, 1, 1e-6) == pytest.approx(1 / (1 + 1e-6), rel=1e-15)

    def test_target_tie(self):
        assert pairwise_rank_loss(5.0, -3.0, 0.7, 0.7, 1e-6) == 0.0

    @pytest.mark.parametrize("dp", [-2.0, -0.5, 0.0, 0.5, 2.0])
    @pytest.mark.parametrize("dt", [-1.0, -0.1, 0.0, 0.1, 1.0])
    def test_sign_grid(self, dp, dt):
        loss = pairwise_rank_loss(dp, 0.0, dt, 0.0, 1e-6)
        if dt == 0 or dp == 0 or np.sign(dp) == np.sign(dt):
            assert loss == 0.0
        else:
            assert loss > 0.0
            assert loss == -dt * dp / (abs(dt) + 1e-6)

    def test_eps_must_be_positive(self):
        with pytest.raises(ContractError):
            pairwise_rank_loss(1, 2, 2, 1, 0.0)


class TestBatch:
    def test_ordered_batch(self):
        assert float(batch_rank_loss([0.1, 0.5, 0.9], [0.0, 0.4, 1.0]).data) == 0.0

    def test_three_terms(self):
        pred, target = [3.0, 2.0, 1.0], [1.0, 2.0, 3.0]
        # every pair is inverted; the pair gaps are 1, 2 and 1 on both sides
        expected = sum(d * d / (d + 1e-6) for d in (1.0, 2.0, 1.0))
        assert float(batch_rank_loss(pred, target, reduction="sum").data) == pytest.approx(expected, rel=1e-12)
        assert float(batch_rank_loss(pred, target).data) == pytest.approx(expected / 3, rel=1e-12)

    def test_double_loop_oracle(self, rng):
        for _ in range(1000):
            n = int(rng.integers(2, 21))
            pred = rng.standard_normal(n)
            target = np.round(rng.random(n), 1)  # rounding produces ties
            for reduction in ("mean", "sum"):
                got = float(batch_rank_loss(pred, target, reduction=reduction).data)
                assert abs(got - double_loop(pred, target, reduction=reduction)) <= 1e-12

    def test_shift_invariance(self, rng):
        pred, target = rng.standard_normal((2, 12))
        a = float(batch_rank_loss(pred, target).data)
        b = float(batch_rank_loss(pred + 7.5, target).data)
        assert a == pytest.approx(b, abs=1e-12)

    def test_needs_two(self):
        with pytest.raises(ContractError):
            batch_rank_loss([1.0], [1.0])

    def test_gradient(self, rng):
        pred, target = rng.standard_normal(8), rng.random(8)
        p = Parameter(pred.copy())
        ad.backward(batch_rank_loss(p, target))
        h = 1e-6
        num = np.zeros(8)
        for i in range(8):
            e = np.zeros(8)
            e[i] = h
            num[i] = (double_loop(pred + e, target) - double_loop(pred - e, target)) / (2 * h)
        np.testing.assert_allclose(p.grad, num, atol=1e-8)


class TestTotal:
    def test_exact_predictions(self):
        assert float(total_loss([0.2, 0.8, 0.5], [0.2, 0.8, 0.5]).data) == 0.0

    def test_offset_order_preserving(self):
        target = np.array([0.1, 0.4, 0.9])
        assert float(total_loss(target + 0.3, target).data) == pytest.approx(0.3, rel=1e-12)

    def test_sum_of_parts(self, rng):
        pred, target = rng.standard_normal(10), rng.random(10)
        expected = np.mean(np.abs(pred - target)) + double_loop(pred, target)
        assert float(total_loss(pred, target).data) == pytest.approx(expected, abs=1e-12)

    def test_single_sample_is_mae(self):
        assert float(total_loss([0.3], [0.5]).data) == pytest.approx(0.2)


@settings(max_examples=100, deadline=None)
@given(
    st.lists(st.tuples(st.floats(-5, 5), st.floats(0, 1)), min_size=2, max_size=20),
    st.floats(-100, 100),
)
def test_rank_term_nonnegative_and_shift_invariant(pairs, c):
    pred = np.array([p for p, _ in pairs])
    target = np.array([t for _, t in pairs])
    a = float(batch_rank_loss(pred, target).data)
    assert a >= 0
    assert abs(float(batch_rank_loss(pred + c, target).data) - a) <= 1e-9 * (1 + abs(c))
