"""Metric definitions: closed-form anchors, scaler calibration, gradients."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mct import numkit as nk
from mct.errors import ContractError, DomainError
from mct.metric import METRIC_KINDS, MetricSpec, ScalerParams, distance, pairwise, scaler_eval


def zero_scaler(in_dim, hidden=32, b2=0.0, alpha=0.0, beta=0.0):
    return ScalerParams(
        w1=np.zeros((in_dim, hidden)),
        b1=np.zeros(hidden),
        w2=np.zeros((hidden, 1)),
        b2=np.full(1, b2),
        alpha=np.asarray(alpha),
        beta=np.asarray(beta),
    )


def unit_scaler(in_dim):
    """g identically 1: sigmoid driven to exactly 0, beta = 0."""
    return zero_scaler(in_dim, b2=-1000.0)


def all_specs(dim, seed=0):
    rng = np.random.default_rng(seed)
    return [
        MetricSpec.euclid(),
        MetricSpec.scaled(7.5),
        MetricSpec.instance(dim, rng),
        MetricSpec.pair(dim, rng),
    ]


class TestScalerEval:
    def test_zero_network_gives_three_halves(self):
        g = scaler_eval(zero_scaler(4), np.ones(4))
        assert g == 1.5

    def test_saturated_low_approaches_one(self):
        g = scaler_eval(zero_scaler(4, b2=-1000.0), np.ones(4))
        assert g == 1.0

    def test_range_interval(self):
        rng = np.random.default_rng(0)
        scaler = ScalerParams.init(6, rng)
        feats = rng.normal(size=(200, 6))
        g = scaler_eval(scaler, feats)
        lo, hi = np.exp(0.0), np.exp(0.0) + np.exp(0.0)
        assert np.all(g > lo) and np.all(g < hi)

    def test_calibration_shifts_range(self):
        scaler = zero_scaler(3, alpha=1.0, beta=-1.0)
        g = scaler_eval(scaler, np.zeros(3))
        assert g == pytest.approx(np.exp(1.0) * 0.5 + np.exp(-1.0), rel=1e-15)

    def test_alpha_gradient_at_zero_point(self):
        tape = nk.Tape()
        g = scaler_eval(zero_scaler(4), np.ones(4), tape)
        grads = nk.grad(tape, g)
        alpha = tape.named_params["metric.scaler.alpha"]
        np.testing.assert_allclose(grads[alpha], 0.5, rtol=1e-15)

    def test_batch_column_shape(self):
        g = scaler_eval(zero_scaler(4), np.ones((7, 4)))
        assert g.shape == (7, 1)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ContractError):
            scaler_eval(zero_scaler(4), np.ones(5))


class TestMetricSpecValidation:
    def test_kind_parameter_pairing(self):
        with pytest.raises(ContractError):
            MetricSpec(kind="euclid", s=1.0)
        with pytest.raises(ContractError):
            MetricSpec(kind="scaled")
        with pytest.raises(ContractError):
            MetricSpec(kind="instance")
        with pytest.raises(ContractError):
            MetricSpec(kind="pair", s=2.0, scaler=zero_scaler(8))
        with pytest.raises(ContractError):
            MetricSpec(kind="cosine")

    def test_kinds_enumerated(self):
        assert METRIC_KINDS == ("euclid", "scaled", "instance", "pair")


class TestDistanceAnchors:
    def test_identical_nonzero_input_is_zero_for_every_kind(self):
        a = np.array([0.3, -1.2, 0.4, 2.0])
        for spec in all_specs(4):
            assert distance(spec, a, a) == 0.0

    def test_euclid_squared(self):
        d = distance(MetricSpec.euclid(), np.array([1.0, 0.0]), np.array([0.0, 1.0]))
        assert d == 2.0

    def test_scaled_unit_difference(self):
        a = np.array([2.0, 5.0, -1.0])
        b = a.copy()
        b[0] -= 1.0
        assert distance(MetricSpec.scaled(7.5), a, b) == 7.5

    def test_instance_with_unit_g_on_basis_vectors(self):
        spec = MetricSpec(kind="instance", scaler=unit_scaler(3))
        e1 = np.array([1.0, 0.0, 0.0])
        e2 = np.array([0.0, 1.0, 0.0])
        assert distance(spec, e1, e2) == 2.0

    def test_instance_zero_network_shrinks_by_g_squared(self):
        spec = MetricSpec(kind="instance", scaler=zero_scaler(3))
        e1 = np.array([1.0, 0.0, 0.0])
        e2 = np.array([0.0, 1.0, 0.0])
        np.testing.assert_allclose(distance(spec, e1, e2), 2.0 / 1.5**2, rtol=1e-15)

    def test_fresh_instance_distance_within_sigmoid_interval(self):
        # both g's live in (1, 2), so the rescaled basis gap lands in (1/2, 2)
        rng = np.random.default_rng(3)
        spec = MetricSpec.instance(3, rng)
        e1 = np.array([1.0, 0.0, 0.0])
        e2 = np.array([0.0, 1.0, 0.0])
        d = distance(spec, e1, e2)
        assert 2.0 / 4.0 < d < 2.0

    def test_pair_zero_network(self):
        spec = MetricSpec(kind="pair", scaler=zero_scaler(6))
        e1 = np.array([1.0, 0.0, 0.0])
        e2 = np.array([0.0, 1.0, 0.0])
        np.testing.assert_allclose(distance(spec, e1, e2), 2.0 / 1.5**2, rtol=1e-15)

    def test_normalized_kinds_ignore_positive_scaling_with_constant_g(self):
        spec = MetricSpec(kind="instance", scaler=unit_scaler(4))
        rng = np.random.default_rng(1)
        a, b = rng.normal(size=4), rng.normal(size=4)
        base = distance(spec, a, b)
        for lam in (0.5, 3.0, 250.0):
            np.testing.assert_allclose(distance(spec, lam * a, b), base, rtol=1e-12)

    def test_zero_norm_rejected_for_normalized_kinds(self):
        for spec in all_specs(3)[2:]:
            with pytest.raises(DomainError):
                distance(spec, np.zeros(3), np.ones(3))

    def test_euclid_accepts_zero_vectors(self):
        assert distance(MetricSpec.euclid(), np.zeros(3), np.zeros(3)) == 0.0

    @settings(deadline=None, max_examples=30)
    @given(st.integers(min_value=0, max_value=2**31 - 1))
    def test_property_nonnegative_and_self_zero(self, seed):
        rng = np.random.default_rng(seed)
        a = rng.normal(size=5) + 0.1
        b = rng.normal(size=5) + 0.1
        for spec in all_specs(5, seed=seed):
            d = distance(spec, a, b)
            assert d >= 0.0
            assert distance(spec, a, a) == 0.0


class TestPairwise:
    def test_shape_and_consistency_with_single(self):
        rng = np.random.default_rng(2)
        A = rng.normal(size=(4, 6))
        B = rng.normal(size=(3, 6))
        for spec in all_specs(6):
            D = pairwise(spec, A, B)
            assert D.shape == (4, 3)
            for i in range(4):
                for j in range(3):
                    np.testing.assert_allclose(
                        D[i, j], distance(spec, A[i], B[j]), rtol=1e-12
                    )

    def test_pair_kind_is_order_sensitive_in_general(self):
        # the shared g sees (query, prototype) concatenation as written;
        # no symmetrization is applied
        rng = np.random.default_rng(5)
        spec = MetricSpec.pair(4, rng)
        a, b = rng.normal(size=4), rng.normal(size=4)
        assert distance(spec, a, b) != distance(spec, b, a)

    def test_diagonal_exactly_zero(self):
        rng = np.random.default_rng(6)
        A = rng.normal(size=(5, 4))
        for spec in all_specs(4):
            np.testing.assert_array_equal(np.diag(pairwise(spec, A, A)), np.zeros(5))

    def test_width_mismatch_rejected(self):
        with pytest.raises(ContractError):
            pairwise(MetricSpec.euclid(), np.ones((2, 3)), np.ones((2, 4)))


class TestMetricGradients:
    def rel_err(self, a, b, floor=1e-4):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
        return np.max(np.abs(a - b) / denom)

    def check_input_gradient(self, spec, seed=0):
        rng = np.random.default_rng(seed)
        a0 = rng.normal(size=(2, 4)) + 0.2
        b0 = rng.normal(size=(3, 4)) + 0.2
        w = rng.normal(size=(2, 3))

        def f(a_flat):
            D = pairwise(spec, a_flat.reshape(2, 4), b0)
            return float((D * w).sum())

        tape = nk.Tape()
        a = tape.param(a0.copy(), name="a")
        loss = nk.asum(nk.mul(pairwise(spec, a, b0, tape), w))
        an = nk.grad(tape, loss)[a].reshape(-1)

        x = a0.reshape(-1).copy()
        fd = np.zeros_like(x)
        for i in range(x.size):
            orig = x[i]
            x[i] = orig + 1e-6
            hi = f(x)
            x[i] = orig - 1e-6
            lo = f(x)
            x[i] = orig
            fd[i] = (hi - lo) / 2e-6
        assert self.rel_err(an, fd) < 1e-4

    def test_input_gradients_all_kinds(self):
        for spec in all_specs(4, seed=11):
            self.check_input_gradient(spec, seed=12)

    def test_scaler_parameter_gradients(self):
        rng = np.random.default_rng(13)
        spec = MetricSpec.instance(4, rng)
        a0 = rng.normal(size=(2, 4)) + 0.1
        b0 = rng.normal(size=(2, 4)) + 0.1

        tape = nk.Tape()
        loss = nk.mean(pairwise(spec, a0, b0, tape))
        grads = nk.grad(tape, loss)
        named = tape.named_params

        base = spec.scaler.to_named()
        for key in ("metric.scaler.alpha", "metric.scaler.w2"):
            target = base[key]
            fd = np.zeros_like(np.atleast_1d(target), dtype=np.float64).reshape(-1)
            flatness = np.asarray(target, dtype=np.float64).reshape(-1)
            for i in range(flatness.size):
                bumped = {k: np.array(v, dtype=np.float64) for k, v in base.items()}
                bv = bumped[key].reshape(-1)
                bv[i] += 1e-6
                hi = float(np.mean(pairwise(
                    MetricSpec(kind="instance", scaler=ScalerParams.from_named(bumped)),
                    a0, b0)))
                bv[i] -= 2e-6
                lo = float(np.mean(pairwise(
                    MetricSpec(kind="instance", scaler=ScalerParams.from_named(bumped)),
                    a0, b0)))
                fd[i] = (hi - lo) / 2e-6
            an = grads[named[key]].reshape(-1)
            assert self.rel_err(an, fd) < 1e-4
