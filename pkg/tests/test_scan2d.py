import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ecmamba.autodiff import ContractError, Tape, Tensor, backward, gradcheck, ops
from ecmamba.scan2d import (ActivationResponseMap, DeformAggregation, ScanOrder, apply_order,
                            composed_deform_aggregate, cross_scan_orders, feature_aware_order,
                            modulated_deform_aggregate, raster_order, unapply_order)


def brute_counts(H, W, K=3):
    """Hits per token from a K×K window slid over every position, ignoring samples off the grid."""
    counts = np.zeros((H, W))
    r = K // 2
    for h in range(H):
        for w in range(W):
            for dy in range(-r, r + 1):
                for dx in range(-r, r + 1):
                    if 0 <= h + dy < H and 0 <= w + dx < W:
                        counts[h + dy, w + dx] += 1
    return counts


def regular_grid_inputs(B, C, H, W, K=3, mod=1.0):
    return (np.zeros((B, 2 * K * K, H, W)), np.full((B, K * K, H, W), mod))


def is_bijection(order, n):
    return np.array_equal(np.sort(order.forward), np.arange(n)) and np.array_equal(
        order.inverse[order.forward], np.arange(n))


class TestFixedOrders:
    def test_raster(self):
        o = raster_order(2, 2)
        assert o.forward.tolist() == [0, 1, 2, 3]
        assert o.inverse.tolist() == [0, 1, 2, 3]

    def test_cross_scan(self):
        row, col, rrow, rcol = cross_scan_orders(2, 2)
        assert col.forward.tolist() == [0, 2, 1, 3]
        assert rrow.forward.tolist() == row.forward[::-1].tolist()
        assert rcol.forward.tolist() == [3, 1, 2, 0]

    @pytest.mark.parametrize("H,W", [(1, 5), (4, 1)])
    def test_cross_scan_degenerate(self, H, W):
        row, col = cross_scan_orders(H, W)[:2]
        assert row.forward.tolist() == col.forward.tolist()

    @given(st.integers(1, 9), st.integers(1, 9))
    def test_bijections(self, H, W):
        for o in [raster_order(H, W)] + cross_scan_orders(H, W):
            assert is_bijection(o, H * W)

    def test_bad_grid(self):
        with pytest.raises(ContractError):
            raster_order(0, 3)

    def test_non_permutation_rejected(self):
        with pytest.raises(ContractError):
            ScanOrder.from_forward([0, 0, 1])


class TestFeatureAwareOrder:
    def test_example(self):
        arm = ActivationResponseMap(np.array([[[3.0, 1.0], [2.0, 2.0]]]), 4)
        assert feature_aware_order(arm).forward.tolist() == [0, 2, 3, 1]

    def test_uniform_is_raster(self):
        arm = ActivationResponseMap(np.full((1, 3, 4), 0.7), 12)
        assert feature_aware_order(arm).forward.tolist() == list(range(12))

    @given(st.integers(0, 2**16), st.integers(1, 6), st.integers(1, 6), st.floats(1e-3, 1e3))
    def test_properties(self, seed, H, W, scale):
        rng = np.random.default_rng(seed)
        # coarse values so ties occur
        freq = rng.integers(0, 4, (2, H, W)).astype(float)
        arm = ActivationResponseMap(freq, H * W)
        for b in range(2):
            o = feature_aware_order(arm, b)
            assert is_bijection(o, H * W)
            gathered = freq[b].reshape(-1)[o.forward]
            assert (np.diff(gathered) <= 0).all()
            # ties keep raster order
            for v in np.unique(gathered):
                idx = o.forward[gathered == v]
                assert (np.diff(idx) > 0).all()
            scaled = feature_aware_order(ActivationResponseMap(freq * scale, H * W), b)
            assert np.array_equal(scaled.forward, o.forward)
            assert np.array_equal(feature_aware_order(arm, b).forward, o.forward)


class TestApplyOrder:
    def test_round_trip_exact(self, rng):
        x = Tensor(rng.standard_normal((3, 4, 5, 6)))
        orders = [ScanOrder.from_forward(rng.permutation(30)) for _ in range(3)]
        back = unapply_order(apply_order(x, orders), orders, 5, 6)
        assert np.array_equal(back.data, x.data)

    def test_raster_is_reshape(self, rng):
        x = rng.standard_normal((2, 3, 4, 5))
        seq = apply_order(Tensor(x), raster_order(4, 5)).data
        assert np.array_equal(seq, x.reshape(2, 3, 20).transpose(0, 2, 1))

    def test_sum_gradient_is_ones(self, rng):
        x = Tensor(rng.standard_normal((2, 3, 4, 4)), requires_grad=True)
        order = ScanOrder.from_forward(rng.permutation(16))
        with Tape() as tape:
            loss = ops.sum(apply_order(x, order))
        backward(loss, tape)
        np.testing.assert_array_equal(x.grad, np.ones(x.shape))

    def test_round_trip_gradcheck(self, rng):
        x = Tensor(rng.standard_normal((2, 2, 3, 3)))
        orders = [ScanOrder.from_forward(rng.permutation(9)) for _ in range(2)]
        w = rng.standard_normal((2, 9, 2))
        fn = lambda: ops.sum(ops.mul(ops.square(apply_order(x, orders)), w))  # noqa: E731
        assert gradcheck(fn, [x], max_probes=None) < 1e-4

    def test_length_mismatch(self, rng):
        with pytest.raises(ContractError):
            apply_order(Tensor(np.zeros((1, 2, 3, 3))), raster_order(2, 4))
        with pytest.raises(ContractError):
            unapply_order(Tensor(np.zeros((1, 9, 2))), raster_order(3, 3), 2, 4)


class TestDeformAggregate:
    @pytest.mark.parametrize("size", [3, 4, 5, 6])
    def test_activation_map_oracle(self, rng, size):
        x = Tensor(rng.standard_normal((1, 2, size, size)))
        off, mod = regular_grid_inputs(1, 2, size, size)
        _, arm = modulated_deform_aggregate(x, Tensor(off), Tensor(mod), Tensor(rng.standard_normal((2, 9))), 3)
        assert arm.positions_counted == size * size
        assert np.array_equal(arm.counts[0], brute_counts(size, size))
        assert np.array_equal(arm.freq[0], brute_counts(size, size) / (size * size))

    def test_four_by_four_values(self, rng):
        off, mod = regular_grid_inputs(1, 1, 4, 4)
        _, arm = modulated_deform_aggregate(Tensor(np.ones((1, 1, 4, 4))), Tensor(off), Tensor(mod),
                                            Tensor(np.ones((1, 9))), 3)
        assert arm.freq[0, 0, 0] == 4 / 16 and arm.freq[0, 0, 1] == 6 / 16 and arm.freq[0, 1, 1] == 9 / 16

    def test_regular_grid_symmetry(self, rng):
        off, mod = regular_grid_inputs(1, 1, 5, 7, mod=0.3)
        _, arm = modulated_deform_aggregate(Tensor(rng.random((1, 1, 5, 7))), Tensor(off), Tensor(mod),
                                            Tensor(np.ones((1, 9))), 3)
        f = arm.freq[0]
        np.testing.assert_allclose(f, f[::-1], atol=1e-15)
        np.testing.assert_allclose(f, f[:, ::-1], atol=1e-15)

    def test_zero_modulation(self, rng):
        off = rng.standard_normal((2, 18, 5, 5))
        out, arm = modulated_deform_aggregate(Tensor(rng.standard_normal((2, 3, 5, 5))), Tensor(off),
                                              Tensor(np.zeros((2, 9, 5, 5))), Tensor(rng.standard_normal((3, 9))), 3)
        assert not out.data.any() and not arm.freq.any()

    def test_matches_plain_convolution(self, rng):
        B, C, H, W = 2, 3, 6, 5
        x, wt = rng.standard_normal((B, C, H, W)), rng.standard_normal((C, 9))
        off, mod = regular_grid_inputs(B, C, H, W)
        out, _ = modulated_deform_aggregate(Tensor(x), Tensor(off), Tensor(mod), Tensor(wt), 3)
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        ref = np.zeros_like(x)
        for k in range(9):
            dy, dx = divmod(k, 3)
            ref += wt[None, :, k, None, None] * xp[:, :, dy:dy + H, dx:dx + W]
        assert np.abs(out.data - ref).max() < 1e-12

    @pytest.mark.parametrize("mode", ["modulated", "incidence"])
    def test_fused_matches_composed(self, rng, mode):
        x = Tensor(rng.standard_normal((2, 3, 6, 5)))
        off = Tensor(rng.standard_normal((2, 18, 6, 5)) * 1.5)
        mod = Tensor(rng.random((2, 9, 6, 5)))
        wt = Tensor(rng.standard_normal((3, 9)))
        a, arm_a = modulated_deform_aggregate(x, off, mod, wt, 3, count_mode=mode)
        b, arm_b = composed_deform_aggregate(x, off, mod, wt, 3, count_mode=mode)
        np.testing.assert_allclose(a.data, b.data, atol=1e-12)
        np.testing.assert_allclose(arm_a.freq, arm_b.freq, atol=1e-12)

    def test_incidence_ignores_modulation(self, rng):
        x = Tensor(rng.standard_normal((1, 2, 4, 4)))
        off = Tensor(rng.standard_normal((1, 18, 4, 4)))
        wt = Tensor(np.ones((2, 9)))
        _, a = modulated_deform_aggregate(x, off, Tensor(np.full((1, 9, 4, 4), 0.2)), wt, 3, count_mode="incidence")
        _, b = modulated_deform_aggregate(x, off, Tensor(np.full((1, 9, 4, 4), 0.9)), wt, 3, count_mode="incidence")
        np.testing.assert_allclose(a.freq, b.freq)

    @given(st.integers(0, 2**16))
    def test_arm_nonnegative(self, seed):
        rng = np.random.default_rng(seed)
        _, arm = modulated_deform_aggregate(Tensor(rng.standard_normal((1, 1, 4, 5))),
                                            Tensor(rng.standard_normal((1, 18, 4, 5)) * 3),
                                            Tensor(rng.random((1, 9, 4, 5))), Tensor(np.ones((1, 9))), 3)
        assert (arm.freq >= 0).all()

    def test_gradcheck_fused(self, rng):
        x = Tensor(rng.standard_normal((2, 3, 5, 4)))
        off = Tensor(rng.standard_normal((2, 18, 5, 4)) * 1.5)
        mod = Tensor(rng.random((2, 9, 5, 4)))
        wt = Tensor(rng.standard_normal((3, 9)))
        fn = lambda: ops.sum(ops.square(modulated_deform_aggregate(x, off, mod, wt, 3)[0]))  # noqa: E731
        assert gradcheck(fn, [x, off, mod, wt], max_probes=None) < 1e-4

    def test_gradcheck_module(self, rng):
        d = DeformAggregation(3, rng, dtype=np.float64)
        d.offset_weight.data[:] = rng.standard_normal(d.offset_weight.shape) * 0.3
        d.mod_weight.data[:] = rng.standard_normal(d.mod_weight.shape) * 0.3
        x = Tensor(rng.standard_normal((1, 3, 5, 5)))
        fn = lambda: ops.sum(ops.square(d(x)[0]))  # noqa: E731
        assert gradcheck(fn, [x, d.offset_weight, d.mod_weight, d.weight]) < 1e-4

    def test_even_kernel_rejected(self, rng):
        with pytest.raises(ContractError):
            modulated_deform_aggregate(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 32, 4, 4))),
                                       Tensor(np.zeros((1, 16, 4, 4))), Tensor(np.zeros((1, 16))), 4)

    def test_module_starts_on_regular_grid(self, rng):
        d = DeformAggregation(2, rng, dtype=np.float64)
        _, arm = d(Tensor(rng.standard_normal((1, 2, 4, 4))))
        # modulation is sigmoid(0) = 0.5 everywhere before training
        np.testing.assert_allclose(arm.counts[0], 0.5 * brute_counts(4, 4))
