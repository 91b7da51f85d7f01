"""Transduction math: closed forms, view-collapse identities, mass monotonicity."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mct.encoder import VIEWS, view_by_name
from mct.episodes import Episode, SyntheticSpec, gen_synthetic
from mct.errors import ContractError
from mct.metric import MetricSpec
from mct.transduce import (
    check_confidence,
    confidence,
    init_from_embeddings,
    init_prototypes,
    mct_infer,
    predict_labels,
    semi_infer,
    soft_kmeans,
    update_prototypes,
)

EUCLID = MetricSpec.euclid()


def palindromize(ep: Episode) -> Episode:
    """Widen inputs to x ++ reverse(x), making every row reversal-invariant."""

    def sym(a):
        return None if a is None else np.concatenate([a, a[:, ::-1]], axis=1)

    return Episode(
        ways=ep.ways, shots=ep.shots,
        support_x=sym(ep.support_x), support_y=ep.support_y,
        query_x=sym(ep.query_x), query_y=ep.query_y,
        unlabeled_x=sym(ep.unlabeled_x),
        support_g=ep.support_g, query_g=ep.query_g,
    )


def synth_episode(seed=0, ways=5, shots=1, queries=15, dim=16, spread=4.0, std=1.0,
                  unlabeled=0):
    spec = SyntheticSpec(input_dim=dim, class_spread=spread, within_std=std)
    ep, oracle = gen_synthetic(spec, ways, shots, queries, seed, unlabeled=unlabeled)
    return ep, oracle


class TestInitPrototypes:
    def test_one_shot_prototype_is_the_support_point(self):
        ep, _ = synth_episode(shots=1)
        protos = init_prototypes(ep, None, (VIEWS[0],))
        np.testing.assert_array_equal(protos.by_view["full"], ep.support_x)
        assert protos.step == 0

    def test_opposite_points_average_to_zero(self):
        a = np.array([[1.0, -2.0], [-1.0, 2.0]])
        protos = init_from_embeddings(a, [1, 1], ways=1)
        np.testing.assert_array_equal(protos, np.zeros((1, 2)))

    def test_collapsed_views_share_prototypes(self):
        ep, _ = synth_episode(dim=8)
        protos = init_prototypes(palindromize(ep), None, VIEWS)
        base = protos.by_view["full"]
        for name in ("drop", "aug", "aug_drop"):
            np.testing.assert_array_equal(protos.by_view[name], base)

    def test_multi_shot_mean(self):
        emb = np.array([[0.0, 0.0], [2.0, 4.0], [10.0, 0.0], [10.0, 2.0]])
        protos = init_from_embeddings(emb, [1, 1, 2, 2], ways=2)
        np.testing.assert_array_equal(protos, [[1.0, 2.0], [10.0, 1.0]])

    def test_missing_class_rejected(self):
        with pytest.raises(ContractError):
            init_from_embeddings(np.ones((2, 3)), [1, 1], ways=2)


class TestConfidence:
    def test_equidistant_prototypes_give_uniform(self):
        q = np.zeros((1, 2))
        protos = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]])
        conf = confidence(q, protos, EUCLID)
        np.testing.assert_allclose(conf, np.full((1, 4), 0.25), rtol=0, atol=1e-15)

    def test_gap_closed_form(self):
        # query on P_1, the other C-1 prototypes at squared distance gap
        gap, C = 2.0, 4
        q = np.zeros((1, 3))
        protos = np.zeros((C, 3))
        for c in range(1, C):
            protos[c] = 0.0
            protos[c, c % 3] = np.sqrt(gap)
        conf = confidence(q, protos, EUCLID)
        expected = 1.0 / (1.0 + (C - 1) * np.exp(-gap))
        np.testing.assert_allclose(conf[0, 0], expected, rtol=1e-14)

    def test_two_class_log_two_gap(self):
        q = np.zeros((1, 2))
        protos = np.array([[0.0, 0.0], [np.sqrt(np.log(2.0)), 0.0]])
        conf = confidence(q, protos, EUCLID)
        np.testing.assert_allclose(conf[0], [2.0 / 3.0, 1.0 / 3.0], rtol=1e-14)

    def test_rows_sum_to_one_under_learned_metric(self):
        rng = np.random.default_rng(0)
        conf = confidence(
            rng.normal(size=(40, 6)) + 0.1,
            rng.normal(size=(5, 6)) + 0.1,
            MetricSpec.instance(6, rng),
        )
        check_confidence(conf, 5)


class TestUpdatePrototypes:
    def test_zero_mass_keeps_support_mean(self):
        emb_s = np.array([[0.0, 0.0], [4.0, 2.0]])
        emb_q = np.array([[100.0, 100.0]])
        conf = np.array([[0.0, 0.0]])
        out = update_prototypes(emb_s, [1, 2], 2, emb_q, conf)
        np.testing.assert_array_equal(out, emb_s)

    def test_hard_assignment_limit(self):
        emb_s = np.array([[0.0], [10.0]])
        emb_q = np.array([[2.0], [8.0], [4.0]])
        conf = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]])
        out = update_prototypes(emb_s, [1, 2], 2, emb_q, conf)
        np.testing.assert_allclose(out, [[2.0], [9.0]], rtol=1e-15)

    def test_half_confidence_closed_form(self):
        # one support at 0, one query at v with weight 1/2: (0 + v/2)/(3/2) = v/3
        v = np.array([3.0, -6.0, 9.0])
        out = update_prototypes(
            np.zeros((1, 3)), [1], 1, v[None, :], np.array([[0.5]])
        )
        np.testing.assert_allclose(out[0], v / 3.0, rtol=1e-15)

    def test_mass_pulls_prototype_toward_query(self):
        rng = np.random.default_rng(1)
        emb_s = rng.normal(size=(3, 4))
        emb_q = rng.normal(size=(6, 4))
        conf = np.abs(rng.normal(size=(6, 3)))
        conf /= conf.sum(axis=1, keepdims=True)
        base = update_prototypes(emb_s, [1, 2, 3], 3, emb_q, conf)
        bumped = conf.copy()
        bumped[2, 0] += 0.1
        moved = update_prototypes(emb_s, [1, 2, 3], 3, emb_q, bumped)
        direction = emb_q[2] - base[0]
        assert np.dot(moved[0] - base[0], direction) > 0.0

    def test_translation_equivariance(self):
        rng = np.random.default_rng(2)
        emb_s = rng.normal(size=(4, 5))
        emb_q = rng.normal(size=(7, 5))
        conf = np.abs(rng.normal(size=(7, 2)))
        conf /= conf.sum(axis=1, keepdims=True)
        v = np.array([3.0, -1.0, 0.5, 2.0, -2.0])
        base = update_prototypes(emb_s, [1, 1, 2, 2], 2, emb_q, conf)
        shifted = update_prototypes(emb_s + v, [1, 1, 2, 2], 2, emb_q + v, conf)
        np.testing.assert_allclose(shifted, base + v, rtol=0, atol=1e-9)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ContractError):
            update_prototypes(np.ones((2, 3)), [1, 2], 2, np.ones((4, 3)), np.ones((3, 2)))


class TestSoftKmeans:
    def test_t_zero_is_inductive(self):
        ep, _ = synth_episode(seed=3)
        protos = init_prototypes(ep, None, (VIEWS[0],)).by_view["full"]
        direct = confidence(ep.query_x, protos, EUCLID)
        np.testing.assert_array_equal(soft_kmeans(ep, None, VIEWS[0], EUCLID, 0), direct)

    def test_t_one_matches_manual_chain(self):
        ep, _ = synth_episode(seed=4)
        protos = init_prototypes(ep, None, (VIEWS[0],)).by_view["full"]
        q0 = confidence(ep.query_x, protos, EUCLID)
        p1 = update_prototypes(ep.support_x, ep.support_y, ep.ways, ep.query_x, q0)
        q1 = confidence(ep.query_x, p1, EUCLID)
        np.testing.assert_array_equal(soft_kmeans(ep, None, VIEWS[0], EUCLID, 1), q1)

    def test_negative_t_rejected(self):
        ep, _ = synth_episode()
        with pytest.raises(ContractError):
            soft_kmeans(ep, None, VIEWS[0], EUCLID, -1)

    @settings(deadline=None, max_examples=15)
    @given(st.integers(min_value=0, max_value=2**31 - 1), st.integers(min_value=0, max_value=10))
    def test_property_rows_sum_to_one_at_every_depth(self, seed, T):
        ep, _ = synth_episode(seed=seed, queries=6)
        conf = soft_kmeans(ep, None, VIEWS[0], EUCLID, T)
        check_confidence(conf, ep.ways)


class TestMctInfer:
    def test_singleton_view_is_soft_kmeans_bitwise(self):
        ep, _ = synth_episode(seed=5)
        for T in (0, 3):
            np.testing.assert_array_equal(
                mct_infer(ep, None, (VIEWS[0],), EUCLID, T),
                soft_kmeans(ep, None, VIEWS[0], EUCLID, T),
            )

    def test_collapsed_views_match_single_view(self):
        ep, _ = synth_episode(seed=6, dim=8)
        sym = palindromize(ep)
        ens = mct_infer(sym, None, VIEWS, EUCLID, 10)
        solo = soft_kmeans(sym, None, VIEWS[0], EUCLID, 10)
        np.testing.assert_allclose(ens, solo, rtol=0, atol=1e-12)

    def test_two_view_ensemble_is_exact_mean(self):
        ep, _ = synth_episode(seed=7, dim=8)
        views = (view_by_name("full"), view_by_name("aug"))
        ens = mct_infer(ep, None, views, EUCLID, 0)
        p = soft_kmeans(ep, None, views[0], EUCLID, 0)
        r = soft_kmeans(ep, None, views[1], EUCLID, 0)
        np.testing.assert_array_equal(ens, (p + r) / 2.0)

    def test_rows_sum_to_one(self):
        ep, _ = synth_episode(seed=8)
        check_confidence(mct_infer(ep, None, VIEWS, EUCLID, 10), ep.ways)

    def test_empty_views_rejected(self):
        ep, _ = synth_episode()
        with pytest.raises(ContractError):
            mct_infer(ep, None, (), EUCLID, 1)


class TestSemiInfer:
    def test_needs_unlabeled(self):
        ep, _ = synth_episode()
        with pytest.raises(ContractError):
            semi_infer(ep, None, EUCLID)

    def test_saturated_support_copy_is_fixed_point(self):
        # classes so far apart that soft assignments are exactly one-hot:
        # re-feeding the support leaves 1-shot prototypes exactly in place
        spec = SyntheticSpec(input_dim=4, class_spread=100.0, within_std=0.0)
        base, _ = gen_synthetic(spec, 3, 1, 2, rng_seed=9)
        ep = Episode(
            ways=3, shots=1,
            support_x=base.support_x, support_y=base.support_y,
            query_x=base.query_x, query_y=base.query_y,
            unlabeled_x=np.array(base.support_x),
        )
        protos, u_conf, q_conf = semi_infer(ep, None, EUCLID)
        np.testing.assert_array_equal(protos.by_view["full"], ep.support_x)
        np.testing.assert_array_equal(u_conf, np.eye(3))
        assert protos.step == 1

    def test_floor_masking_all_keeps_initial_prototypes(self):
        ep, _ = synth_episode(seed=10, unlabeled=4)
        protos, u_conf, _ = semi_infer(ep, None, EUCLID, conf_floor=1.1)
        init = init_prototypes(ep, None, (VIEWS[0],)).by_view["full"]
        np.testing.assert_array_equal(protos.by_view["full"], init)
        check_confidence(u_conf, ep.ways)  # returned confidences stay soft

    def test_refinement_moves_prototypes(self):
        ep, _ = synth_episode(seed=11, unlabeled=10)
        protos, _, q_conf = semi_infer(ep, None, EUCLID)
        init = init_prototypes(ep, None, (VIEWS[0],)).by_view["full"]
        assert np.abs(protos.by_view["full"] - init).max() > 1e-9
        check_confidence(q_conf, ep.ways)


class TestPredictLabels:
    def test_argmax_plus_one(self):
        conf = np.array([[0.1, 0.7, 0.2], [0.9, 0.05, 0.05]])
        np.testing.assert_array_equal(predict_labels(conf), [2, 1])

    def test_tie_goes_to_lowest_class(self):
        np.testing.assert_array_equal(predict_labels(np.array([[0.5, 0.5]])), [1])

    def test_transduction_beats_induction_on_one_friendly_seed(self):
        # a single spot check; the statistical version over 1000 episodes
        # lives in the acceptance suite
        ep, _ = synth_episode(seed=1234, queries=15)
        t0 = np.mean(predict_labels(soft_kmeans(ep, None, VIEWS[0], EUCLID, 0)) == ep.query_y)
        t10 = np.mean(predict_labels(soft_kmeans(ep, None, VIEWS[0], EUCLID, 10)) == ep.query_y)
        assert t10 >= t0
