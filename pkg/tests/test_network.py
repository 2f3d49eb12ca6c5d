import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ecmamba.autodiff import ContractError, Tensor, gradcheck, no_grad, ops
from ecmamba.network import (ECMM, EFF, ECMamba, ModelConfig, RetinexMambaBlock, RetinexSS2D, RmbConfig,
                             mixup)

F64 = np.float64


def zero_params(module, biases_only=False):
    for name, p in module.named_parameters():
        if not biases_only or name.endswith("bias"):
            p.data[:] = 0


def conv_params(c_in, c_out, k, groups=1):
    return c_out * (c_in // groups) * k * k + c_out


def expected_parameter_count(cfg: ModelConfig) -> int:
    """Independent tally of the architecture's trainable scalars."""
    g, N, K, e = cfg.guide, cfg.state_dim, cfg.kernel_size, cfg.eff_expand
    KK = K * K

    def rmb(d):
        ss2d = (conv_params(d, d, 1) + conv_params(d, d, 3, groups=d) + conv_params(g, d, 1)
                + conv_params(d, 2 * KK, K) + conv_params(d, KK, K) + d * KK
                + (2 * N + 1) * d + (2 * N + 1) + d + d + d * N
                + conv_params(d, d, 1) + conv_params(d, d, 1))
        if cfg.scan_strategy == "cross":
            ss2d += 3 * ((2 * N + 1) * d + (2 * N + 1) + d + d + d * N)
        return 4 * d + ss2d + conv_params(d, e * d, 1) + conv_params(e * d, d, 1)

    c = cfg.base_dim
    ecmm = (conv_params(3, c, 3) + rmb(c) + conv_params(c, 2 * c, 4) + rmb(2 * c)
            + (2 * c * c * 4 + c) + 1 + rmb(c) + conv_params(c, 3, 3))
    estimator = (conv_params(4, g, 1) + conv_params(g, g, 5, groups=g) + 2 * conv_params(g, 3, 1)
                 + conv_params(g, g, 1))
    return estimator + 2 * ecmm


class TestShapesAndIdentities:
    def test_desk_parameter_count(self):
        counts = {ECMamba(ModelConfig(), seed=s).num_parameters() for s in (0, 1, 2)}
        assert counts == {expected_parameter_count(ModelConfig())}
        assert counts == {31782}

    @pytest.mark.parametrize("strategy", ["raster", "cross"])
    def test_parameter_count_other_strategies(self, strategy):
        cfg = ModelConfig(scan_strategy=strategy)
        assert ECMamba(cfg).num_parameters() == expected_parameter_count(cfg)

    @given(st.integers(1, 6), st.integers(1, 4), st.integers(1, 3))
    def test_ss2d_shape(self, dim, state, half):
        rng = np.random.default_rng(dim * 10 + state)
        layer = RetinexSS2D(RmbConfig(dim, 3, state), rng, F64)
        x = Tensor(rng.standard_normal((2, dim, 2 * half, 4)))
        out = layer(x, Tensor(rng.standard_normal((2, 3, 2 * half, 4))))
        assert out.shape == x.shape

    def test_ss2d_zero_input(self, rng):
        layer = RetinexSS2D(RmbConfig(4, 4), rng, F64)
        zero_params(layer, biases_only=True)
        out = layer(Tensor(np.zeros((1, 4, 4, 4))), Tensor(rng.standard_normal((1, 4, 4, 4))))
        assert not out.data.any()

    def test_ss2d_spatial_mismatch(self, rng):
        layer = RetinexSS2D(RmbConfig(4, 4), rng, F64)
        with pytest.raises(ContractError):
            layer(Tensor(np.zeros((1, 4, 4, 4))), Tensor(np.zeros((1, 4, 2, 2))))

    def test_eff_zero_and_pointwise(self, rng):
        eff = EFF(3, 2, rng, F64)
        zero_params(eff, biases_only=True)
        assert not eff(Tensor(np.zeros((1, 3, 4, 4)))).data.any()
        x = rng.standard_normal((1, 3, 4, 4))
        y = x.copy()
        y[0, :, 2, 1] += 1.0
        diff = np.abs(eff(Tensor(x)).data - eff(Tensor(y)).data).sum(axis=1)[0]
        assert diff[2, 1] > 0
        diff[2, 1] = 0
        assert not diff.any()

    def test_rmb_zero_weights_is_identity(self, rng):
        block = RetinexMambaBlock(RmbConfig(4, 4), rng, F64)
        zero_params(block)
        x = rng.standard_normal((1, 4, 4, 6))
        out = block(Tensor(x), Tensor(rng.standard_normal((1, 4, 4, 6))))
        assert np.array_equal(out.data, x)

    def test_mixup_limits(self, rng):
        a, b = rng.standard_normal((2, 1, 2, 3, 3))
        np.testing.assert_allclose(mixup(Tensor(a), Tensor(b), Tensor(np.zeros(1))).data, 0.5 * (a + b), atol=1e-15)
        np.testing.assert_allclose(mixup(Tensor(a), Tensor(b), Tensor(np.array([40.0]))).data, a, atol=1e-15)

    def test_ecmm_shape_and_odd_rejection(self, rng):
        net = ECMM(ModelConfig(base_dim=4, state_dim=2), rng, F64)
        out = net(Tensor(rng.random((2, 3, 6, 8))), Tensor(rng.standard_normal((2, 4, 6, 8))))
        assert out.shape == (2, 3, 6, 8)
        with pytest.raises(ContractError, match="even"):
            net(Tensor(rng.random((1, 3, 5, 8))), Tensor(rng.standard_normal((1, 4, 5, 8))))

    def test_zero_branches_give_squared_input(self, rng):
        model = ECMamba(ModelConfig(base_dim=4, state_dim=4), seed=3, dtype=F64)
        for branch in (model.branch_r, model.branch_l):
            zero_params(branch.conv_out)
        img = rng.random((2, 3, 6, 6))
        out = model(Tensor(img))
        ref = img * img * out.R_bar.data * out.L_bar.data
        assert np.abs(out.I_out.data - ref).max() < 1e-12
        assert np.array_equal(out.R_out.data, out.R_prime.data)

    def test_model_outputs(self, rng):
        model = ECMamba(ModelConfig(base_dim=4, state_dim=4), dtype=F64)
        out = model(Tensor(rng.random((1, 3, 8, 8))), keep_arms=True)
        for t in (out.I_out, out.R_out, out.L_out, out.R_prime, out.L_prime, out.R_bar, out.L_bar):
            assert t.shape == (1, 3, 8, 8)
        assert len(out.arms) == 6  # three blocks per branch

    def test_deterministic_forward(self, rng):
        img = rng.random((1, 3, 8, 8)).astype(np.float32)
        a = ECMamba(ModelConfig(), seed=5)(Tensor(img)).I_out.data
        b = ECMamba(ModelConfig(), seed=5)(Tensor(img)).I_out.data
        assert a.tobytes() == b.tobytes()

    def test_strategy_swap_changes_output_not_contracts(self, rng):
        img = Tensor(rng.random((1, 3, 8, 8)))
        outs = {}
        for s in ("fa", "raster", "cross"):
            with no_grad():
                outs[s] = ECMamba(ModelConfig(base_dim=4, scan_strategy=s), seed=0, dtype=F64)(img).I_out.data
            assert outs[s].shape == (1, 3, 8, 8) and np.isfinite(outs[s]).all()
        assert not np.array_equal(outs["fa"], outs["raster"])

    def test_bad_config(self):
        with pytest.raises(ContractError):
            ModelConfig(scan_strategy="zigzag")
        with pytest.raises(ContractError):
            ModelConfig(kernel_size=4)


def _perturb(module, rng, scale=0.3):
    # move deformable predictors off zero so offsets and modulation vary
    for name, p in module.named_parameters():
        if "offset_weight" in name or "mod_weight" in name:
            p.data[:] = rng.standard_normal(p.shape) * scale


class TestGradients:
    def test_ss2d_gradcheck(self, rng):
        layer = RetinexSS2D(RmbConfig(4, 4, 4), rng, F64)
        _perturb(layer, rng)
        x, fc = Tensor(rng.standard_normal((1, 4, 6, 6))), Tensor(rng.standard_normal((1, 4, 6, 6)))
        w = rng.standard_normal((1, 4, 6, 6))
        fn = lambda: ops.sum(ops.mul(layer(x, fc), w))  # noqa: E731
        targets = [x, fc, layer.in_proj.weight, layer.deform.offset_weight, layer.deform.weight,
                   layer.ssms[0].A_log, layer.ssms[0].proj.x_weight, layer.gate_proj.weight]
        assert gradcheck(fn, targets) < 1e-4

    def test_eff_gradcheck(self, rng):
        eff = EFF(3, 2, rng, F64)
        x = Tensor(rng.standard_normal((1, 3, 4, 4)))
        fn = lambda: ops.sum(ops.square(eff(x)))  # noqa: E731
        assert gradcheck(fn, [x, eff.fc1.weight, eff.fc2.weight, eff.fc1.bias]) < 1e-4

    def test_rmb_gradcheck(self, rng):
        block = RetinexMambaBlock(RmbConfig(4, 4, 4), rng, F64)
        _perturb(block, rng)
        x, fc = Tensor(rng.standard_normal((1, 4, 4, 4))), Tensor(rng.standard_normal((1, 4, 4, 4)))
        w = rng.standard_normal((1, 4, 4, 4))
        fn = lambda: ops.sum(ops.mul(block(x, fc), w))  # noqa: E731
        targets = [x, fc, block.norm1.weight, block.ss2d.out_proj.weight, block.eff.fc1.weight]
        assert gradcheck(fn, targets) < 1e-4

    def test_full_model_gradcheck(self, rng):
        model = ECMamba(ModelConfig(base_dim=4, state_dim=4), seed=1, dtype=F64)
        _perturb(model, rng)
        img = Tensor(rng.random((1, 3, 8, 8)))
        w = rng.standard_normal((1, 3, 8, 8))
        fn = lambda: ops.sum(ops.mul(model(img).I_out, w))  # noqa: E731
        targets = [img, model.estimator.depthwise.weight, model.branch_r.theta, model.branch_l.up.weight,
                   model.branch_r.mid.ss2d.deform.offset_weight, model.branch_l.enc.ss2d.ssms[0].A_log]
        assert gradcheck(fn, targets, max_probes=24) < 1e-3
