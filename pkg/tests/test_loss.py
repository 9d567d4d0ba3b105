import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from uscrl.errors import ConfigError
from uscrl.loss import (LOSS_KINDS, LossSpec, default_clip, loss_grad,
                        loss_value, score_vector, scores_from_reps,
                        tuple_losses)
from uscrl.tuples import enumerate_all_tuples

from conftest import make_pool, rand_linear
from naive_ref import naive_loss, naive_scores

# Frozen high-precision reference values (50-digit arithmetic, rounded to
# the nearest float64).
LN2 = 0.6931471805599453
LOGI_1_M1 = 1.4076059644443804          # log(1 + e^-1 + e^1)
GRAD_1 = -0.09003057317038046           # -e^-1 / (1 + e^-1 + e)
GRAD_M1 = -0.6652409557748219           # -e    / (1 + e^-1 + e)
CLIP_K2 = 4.394449154672439             # 4 ln 3
CLIP_K1 = 2.772588722239781             # 4 ln 2
LOGI_HALF = 0.4740769841801067          # log(1 + e^-0.5)

RELTOL = 1e-13


class TestDefaults:
    def test_default_clip(self):
        assert default_clip(2) == pytest.approx(CLIP_K2, rel=RELTOL)
        assert default_clip(1) == pytest.approx(CLIP_K1, rel=RELTOL)

    def test_spec_validation(self):
        with pytest.raises(ConfigError):
            LossSpec(kind="huber")
        with pytest.raises(ConfigError):
            LossSpec(clip=0.0)
        with pytest.raises(ConfigError):
            LossSpec(kind="hinge", margin=0.0)
        with pytest.raises(ConfigError):
            LossSpec(kind="hinge", clip=math.inf)

    def test_eta_and_bound(self):
        assert LossSpec().eta == 1.0
        assert LossSpec(kind="hinge", clip=3.0).eta == 1.0
        assert LossSpec(clip=2.5).bound == 2.5
        assert LossSpec().bound == math.inf
        assert LossSpec(kind="hinge", clip=7.0, margin=2.0).bound == 7.0


class TestLogistic:
    def test_zero_scores(self):
        spec = LossSpec()
        assert loss_value(spec, np.zeros(1)) == pytest.approx(LN2, rel=RELTOL)
        # k zero-scores give log(1 + k)
        assert loss_value(spec, np.zeros(3)) == pytest.approx(math.log(4.0),
                                                              rel=RELTOL)

    def test_reference_value(self):
        spec = LossSpec()
        assert loss_value(spec, np.array([1.0, -1.0])) == pytest.approx(
            LOGI_1_M1, rel=RELTOL)

    def test_reference_gradient(self):
        g = loss_grad(LossSpec(), np.array([1.0, -1.0]))
        assert g[0] == pytest.approx(GRAD_1, rel=1e-12)
        assert g[1] == pytest.approx(GRAD_M1, rel=1e-12)

    def test_single_negative(self):
        assert loss_value(LossSpec(), np.array([0.5])) == pytest.approx(
            LOGI_HALF, rel=RELTOL)

    def test_extreme_scores_stable(self):
        spec = LossSpec()
        big = loss_value(spec, np.array([-800.0, 3.0]))
        assert math.isfinite(big)
        assert big == pytest.approx(800.0, rel=1e-12)  # dominated by e^800
        tiny = loss_value(spec, np.array([800.0, 900.0]))
        assert 0.0 <= tiny < 1e-300

    def test_gradient_matches_finite_differences(self):
        spec = LossSpec()
        rng = np.random.default_rng(0)
        v = rng.normal(size=(20, 4))
        g = loss_grad(spec, v)
        h = 1e-6
        for i in range(v.shape[0]):
            for j in range(v.shape[1]):
                vp, vm = v[i].copy(), v[i].copy()
                vp[j] += h
                vm[j] -= h
                fd = (loss_value(spec, vp) - loss_value(spec, vm)) / (2 * h)
                assert g[i, j] == pytest.approx(fd, rel=1e-5, abs=1e-9)


class TestHinge:
    def test_values(self):
        spec = LossSpec(kind="hinge", clip=10.0, margin=1.0)
        assert loss_value(spec, np.array([1.0, -1.0])) == 2.0
        assert loss_value(spec, np.array([2.0, 3.0])) == 0.0
        assert loss_value(spec, np.array([0.25])) == 0.75

    def test_margin(self):
        spec = LossSpec(kind="hinge", clip=10.0, margin=2.5)
        assert loss_value(spec, np.array([2.0, 4.0])) == 0.5

    def test_gradient_routes_to_first_minimum(self):
        spec = LossSpec(kind="hinge", clip=10.0)
        g = loss_grad(spec, np.array([1.0, -1.0]))
        np.testing.assert_array_equal(g, [0.0, -1.0])
        # tie: weight goes to the first minimal coordinate
        g = loss_grad(spec, np.array([-1.0, -1.0]))
        np.testing.assert_array_equal(g, [-1.0, 0.0])
        # inactive hinge: zero everywhere
        g = loss_grad(spec, np.array([2.0, 3.0]))
        np.testing.assert_array_equal(g, [0.0, 0.0])


class TestClipping:
    @pytest.mark.parametrize("kind", LOSS_KINDS)
    def test_values_clipped(self, kind):
        spec = LossSpec(kind=kind, clip=1.0)
        v = np.array([-5.0, -6.0])
        assert loss_value(spec, v) == 1.0

    @pytest.mark.parametrize("kind", LOSS_KINDS)
    def test_gradient_zero_in_clip_region(self, kind):
        spec = LossSpec(kind=kind, clip=1.0)
        g = loss_grad(spec, np.array([-5.0, -6.0]))
        np.testing.assert_array_equal(g, [0.0, 0.0])

    def test_gradient_nonzero_below_clip(self):
        spec = LossSpec(clip=5.0)
        g = loss_grad(spec, np.array([0.0, 0.0]))
        assert np.all(g < 0)


class TestBatchConsistency:
    @pytest.mark.parametrize("kind", LOSS_KINDS)
    def test_batch_equals_rowwise(self, kind):
        spec = LossSpec(kind=kind, clip=3.0)
        rng = np.random.default_rng(1)
        v = rng.normal(size=(17, 3))
        batch = loss_value(spec, v)
        rows = np.array([loss_value(spec, v[i]) for i in range(17)])
        np.testing.assert_allclose(batch, rows, rtol=0, atol=0)
        gb = loss_grad(spec, v)
        gr = np.stack([loss_grad(spec, v[i]) for i in range(17)])
        np.testing.assert_array_equal(gb, gr)

    def test_matches_naive_loss(self):
        rng = np.random.default_rng(2)
        for kind in LOSS_KINDS:
            spec = LossSpec(kind=kind, clip=2.0, margin=1.5)
            for _ in range(50):
                v = rng.normal(size=3)
                got = loss_value(spec, v)
                want = naive_loss(kind, v, clip=2.0, margin=1.5)
                assert got == pytest.approx(want, rel=1e-14, abs=1e-300)


class TestScores:
    def test_scores_from_reps_matches_naive(self):
        rng = np.random.default_rng(3)
        reps = rng.normal(size=(10, 4))
        anchors = np.array([0, 2])
        positives = np.array([1, 3])
        negatives = np.array([[4, 5], [6, 7]])
        got = scores_from_reps(reps, anchors, positives, negatives)
        for b in range(2):
            want = naive_scores(reps, anchors[b], positives[b], negatives[b])
            np.testing.assert_allclose(got[b], want, rtol=1e-14)

    def test_score_vector_matches(self, toy_pool, toy_model):
        ts = enumerate_all_tuples(toy_pool, k=1)
        t = ts[5]
        v = score_vector(toy_model, toy_pool, t)
        reps = toy_model.forward(toy_pool.x)
        want = naive_scores(reps, t.anchor, t.positive, t.negatives)
        np.testing.assert_allclose(v, want, rtol=1e-14)

    def test_tuple_losses_matches_direct(self, toy_pool, toy_model):
        spec = LossSpec(clip=default_clip(1))
        ts = enumerate_all_tuples(toy_pool, k=1)
        got = tuple_losses(toy_model, toy_pool, ts.anchors, ts.positives,
                           ts.negatives, spec)
        reps = toy_model.forward(toy_pool.x)
        want = [naive_loss("logistic",
                           naive_scores(reps, t.anchor, t.positive, t.negatives),
                           clip=spec.clip)
                for t in ts]
        np.testing.assert_allclose(got, want, rtol=1e-13)


score_vecs = hnp.arrays(np.float64, st.integers(1, 5),
                        elements=st.floats(-50, 50))


@st.composite
def vec_pairs(draw):
    u = draw(score_vecs)
    w = draw(hnp.arrays(np.float64, u.shape, elements=st.floats(-50, 50)))
    return u, w


class TestInvariants:
    @given(score_vecs, st.sampled_from(LOSS_KINDS))
    @settings(max_examples=80, deadline=None)
    def test_range(self, v, kind):
        spec = LossSpec(kind=kind, clip=3.0)
        val = loss_value(spec, v)
        assert 0.0 <= val <= 3.0

    @given(vec_pairs(), st.sampled_from(LOSS_KINDS))
    @settings(max_examples=80, deadline=None)
    def test_sup_norm_lipschitz(self, pair, kind):
        # eta = 1: |l(u) - l(v)| <= max_i |u_i - v_i|
        u, w = pair
        spec = LossSpec(kind=kind, clip=5.0)
        lhs = abs(loss_value(spec, u) - loss_value(spec, w))
        assert lhs <= np.max(np.abs(u - w)) + 1e-9

    @given(score_vecs, st.sampled_from(LOSS_KINDS),
           st.integers(0, 4), st.floats(0.01, 5.0))
    @settings(max_examples=80, deadline=None)
    def test_nonincreasing_per_coordinate(self, v, kind, j, bump):
        spec = LossSpec(kind=kind, clip=6.0)
        j = j % v.shape[0]
        v2 = v.copy()
        v2[j] += bump
        assert loss_value(spec, v2) <= loss_value(spec, v) + 1e-12
