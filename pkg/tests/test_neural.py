import numpy as np
import pytest

from downgen import autodiff as ad
from downgen.autodiff import Tensor, backward
from downgen.nets import (
    ArchConfig,
    DivergenceError,
    as_leaves,
    collect_grads,
    denoiser_arch,
    denoiser_forward,
    film,
    fourier_embed,
    fourier_features,
    init_params,
    load_checkpoint,
    precond_coeffs,
    save_checkpoint,
    truncated_normal,
    unet_forward,
    velocity_arch,
    velocity_forward,
)
from downgen.optim import OptimizerState, Schedule, adam_step, global_norm

from gradcheck import finite_diff_grads, rel_error


def small_velocity_setup(seed=0, b=2, hw=4, v=2):
    arch = velocity_arch(v, levels=(4, 8))
    rng = np.random.default_rng(seed)
    params = init_params(rng, arch)
    yhat = rng.standard_normal((b, hw, hw, v))
    tau = rng.uniform(0.1, 0.9, b)
    mean = rng.standard_normal((b, hw, hw, v))
    std = 0.5 + rng.random((b, hw, hw, v))
    return arch, params, yhat, tau, mean, std


class TestFourierEmbed:
    def test_zero_input_features(self):
        feats = fourier_features(0.0, 5)
        np.testing.assert_array_equal(feats[0, :5], 1.0)
        np.testing.assert_array_equal(feats[0, 5:], 0.0)

    def test_deterministic(self):
        arch = ArchConfig(in_channels=2, out_channels=2, embed_freqs=4, embed_dim=8)
        params = init_params(np.random.default_rng(1), arch)
        a = fourier_embed(as_leaves(params), np.array([0.3, 0.7]), arch).data
        b = fourier_embed(as_leaves(params), np.array([0.3, 0.7]), arch).data
        np.testing.assert_array_equal(a, b)

    def test_gradient_check(self):
        arch = ArchConfig(in_channels=2, out_channels=2, embed_freqs=3, embed_dim=4)
        full = init_params(np.random.default_rng(2), arch)
        # randomize the dense weights under test (init is partly zero elsewhere)
        rng = np.random.default_rng(3)
        sub = {k: rng.standard_normal(full[k].shape) * 0.3
               for k in full if k.startswith("embed/")}

        def run(arrs):
            merged = dict(full)
            merged.update(arrs)
            leaves = as_leaves(merged)
            out = fourier_embed(leaves, np.array([0.25, 0.6]), arch)
            return ad.mean(ad.square(out)), leaves

        loss, leaves = run(sub)
        backward(loss)
        analytic = {k: leaves[k].grad for k in sub}
        numeric = finite_diff_grads(lambda a: float(run(a)[0].data), sub)
        assert rel_error(analytic, numeric) < 1e-5


class TestFilm:
    def test_identity_at_zero_init(self):
        arch = ArchConfig(in_channels=2, out_channels=2, embed_freqs=4, embed_dim=8,
                          levels=(4, 8))
        params = init_params(np.random.default_rng(4), arch)
        leaves = as_leaves(params)
        x = np.random.default_rng(5).standard_normal((2, 3, 3, 4))
        e = fourier_embed(leaves, np.array([0.2, 0.8]), arch)
        out = film(Tensor(x), e, leaves, "res0")
        np.testing.assert_array_equal(out.data, x)

    def test_affine_definition(self):
        rng = np.random.default_rng(6)
        arch = ArchConfig(in_channels=2, out_channels=2, embed_freqs=4, embed_dim=8,
                          levels=(4, 8))
        params = init_params(rng, arch)
        params["res0/film_scale/w"] = rng.standard_normal(params["res0/film_scale/w"].shape)
        params["res0/film_shift/b"] = rng.standard_normal(params["res0/film_shift/b"].shape)
        leaves = as_leaves(params)
        e = fourier_embed(leaves, np.array([0.5]), arch)
        scale = e.data @ params["res0/film_scale/w"] + params["res0/film_scale/b"]
        shift = e.data @ params["res0/film_shift/w"] + params["res0/film_shift/b"]
        x = rng.standard_normal((1, 2, 2, 4))
        out = film(Tensor(x), e, leaves, "res0")
        expect = (1.0 + scale[0]) * x + shift[0]
        np.testing.assert_allclose(out.data, expect, atol=1e-12)

    def test_gradient_check(self):
        rng = np.random.default_rng(7)
        arch = ArchConfig(in_channels=2, out_channels=2, embed_freqs=3, embed_dim=4,
                          levels=(4, 8))
        full = init_params(rng, arch)
        sub = {k: rng.standard_normal(full[k].shape) * 0.2
               for k in full if k.startswith("res0/film") or k.startswith("embed/")}
        x = rng.standard_normal((2, 2, 2, 4))

        def run(arrs):
            merged = dict(full)
            merged.update(arrs)
            leaves = as_leaves(merged)
            e = fourier_embed(leaves, np.array([0.3, 0.9]), arch)
            return ad.mean(ad.square(film(Tensor(x), e, leaves, "res0"))), leaves

        loss, leaves = run(sub)
        backward(loss)
        analytic = {k: leaves[k].grad for k in sub}
        numeric = finite_diff_grads(lambda a: float(run(a)[0].data), sub)
        assert rel_error(analytic, numeric) < 1e-5


class TestVelocityForward:
    def test_zero_final_layer_gives_zero_velocity(self):
        arch, params, yhat, tau, mean, std = small_velocity_setup()
        out = velocity_forward(as_leaves(params), yhat, tau, mean, std, arch)
        np.testing.assert_array_equal(out.data, 0.0)

    def test_batch_permutation_equivariance(self):
        arch, params, yhat, tau, mean, std = small_velocity_setup(seed=8, b=3)
        rng = np.random.default_rng(9)
        for k in params:
            params[k] = params[k] + rng.standard_normal(params[k].shape) * 0.05
        out = velocity_forward(as_leaves(params), yhat, tau, mean, std, arch).data
        perm = np.array([2, 0, 1])
        out_p = velocity_forward(as_leaves(params), yhat[perm], tau[perm],
                                 mean[perm], std[perm], arch).data
        np.testing.assert_allclose(out_p, out[perm], atol=1e-12)

    def test_gradient_check_on_squared_norm(self):
        arch, params, yhat, tau, mean, std = small_velocity_setup(seed=10)
        rng = np.random.default_rng(11)
        for k in params:
            params[k] = params[k] + rng.standard_normal(params[k].shape) * 0.05
        # probe a representative subset of tensors (full check is the acceptance test)
        names = ["in/conv/w", "res0/film_scale/w", "down1/conv/w", "out/conv/w",
                 "cond_vec/dense/w", "embed/dense0/w", "ures0/conv2/b"]
        sub = {k: params[k] for k in names}

        def run(arrs):
            merged = dict(params)
            merged.update(arrs)
            leaves = as_leaves(merged)
            out = velocity_forward(leaves, yhat, tau, mean, std, arch)
            return ad.mean(ad.square(out)), leaves

        loss, leaves = run(sub)
        backward(loss)
        analytic = {k: leaves[k].grad for k in sub}
        numeric = finite_diff_grads(lambda a: float(run(a)[0].data), sub)
        assert rel_error(analytic, numeric) < 1e-4


class TestDenoiserForward:
    def test_precond_coefficients_at_unit_sigma(self):
        c_skip, c_out, c_in, c_noise = precond_coeffs(np.array([1.0]))
        assert abs(c_skip[0] - 0.5) < 1e-15
        assert abs(c_out[0] - 1.0 / np.sqrt(2.0)) < 1e-15
        assert abs(c_in[0] - 1.0 / np.sqrt(2.0)) < 1e-15
        assert abs(c_noise[0]) < 1e-15

    def test_precond_identities(self):
        sigma = np.logspace(-4, np.log10(80.0), 37)
        c_skip, c_out, c_in, c_noise = precond_coeffs(sigma)
        np.testing.assert_allclose(c_in ** 2 * (1 + sigma ** 2), 1.0, atol=1e-12)
        np.testing.assert_allclose(c_out ** 2 * (1 + sigma ** 2), sigma ** 2, rtol=1e-12)
        np.testing.assert_allclose(c_skip * (1 + sigma ** 2), 1.0, atol=1e-12)
        np.testing.assert_allclose(c_noise, 0.25 * np.log(sigma), atol=1e-12)

    def test_large_sigma_limits(self):
        c_skip, c_out, _, _ = precond_coeffs(np.array([1e6]))
        assert c_skip[0] < 1e-6
        assert abs(c_out[0] - 1.0) < 1e-6

    def test_zero_network_returns_skip_scaled_input(self):
        v, t = 2, 3
        arch = denoiser_arch(v, t, levels=(4, 8))
        params = init_params(np.random.default_rng(12), arch)
        rng = np.random.default_rng(13)
        z = rng.standard_normal((2, t, 4, 4, v))
        sigma = np.array([1.0, 3.0])
        out = denoiser_forward(as_leaves(params), z, sigma, None, arch).data
        c_skip = 1.0 / (1.0 + sigma ** 2)
        np.testing.assert_allclose(out, c_skip[:, None, None, None, None] * z, atol=1e-12)

    def test_nonpositive_sigma_rejected(self):
        arch = denoiser_arch(1, 2, levels=(4, 8))
        params = init_params(np.random.default_rng(14), arch)
        z = np.zeros((1, 2, 4, 4, 1))
        with pytest.raises(ValueError):
            denoiser_forward(as_leaves(params), z, np.array([0.0]), None, arch)

    def test_gradient_check(self):
        v, t = 1, 2
        arch = denoiser_arch(v, t, levels=(4, 8), )
        rng = np.random.default_rng(15)
        params = init_params(rng, arch)
        for k in params:
            params[k] = params[k] + rng.standard_normal(params[k].shape) * 0.05
        z = rng.standard_normal((2, t, 4, 4, v))
        cond = rng.standard_normal((2, t, 4, 4, v))
        sigma = np.array([0.5, 2.0])
        names = ["in/conv/w", "out/conv/w", "res1/film_shift/w", "embed/dense1/w"]
        sub = {k: params[k] for k in names}

        def run(arrs):
            merged = dict(params)
            merged.update(arrs)
            leaves = as_leaves(merged)
            out = denoiser_forward(leaves, z, sigma, cond, arch)
            return ad.mean(ad.square(out)), leaves

        loss, leaves = run(sub)
        backward(loss)
        analytic = {k: leaves[k].grad for k in sub}
        numeric = finite_diff_grads(lambda a: float(run(a)[0].data), sub)
        assert rel_error(analytic, numeric) < 1e-4


class TestAdam:
    def test_zero_grads_leave_params_unchanged(self):
        params = {"a": np.ones(3), "b": np.full((2, 2), 2.0)}
        before = {k: v.copy() for k, v in params.items()}
        state = OptimizerState(Schedule(peak_lr=0.1, warmup_steps=1, total_steps=10))
        adam_step(params, state, {k: np.zeros_like(v) for k, v in params.items()})
        for k in params:
            np.testing.assert_array_equal(params[k], before[k])

    def test_global_norm_clipping_scale(self):
        grads = {"a": np.array([6.0])}
        assert abs(global_norm(grads) - 6.0) < 1e-12
        params = {"a": np.array([0.0])}
        state = OptimizerState(Schedule(peak_lr=1.0, warmup_steps=1, total_steps=10),
                               clip_norm=0.6)
        adam_step(params, state, grads)
        # after clipping the effective grad is 0.6 = 6.0 * 0.1; Adam normalizes
        # magnitude away, so instead check the stored first moment
        assert abs(state.m["a"][0] - 0.1 * 0.6) < 1e-12

    def test_quadratic_bowl_convergence(self):
        rng = np.random.default_rng(16)
        target = rng.standard_normal(5)
        params = {"x": np.zeros(5)}
        state = OptimizerState(Schedule(peak_lr=0.05, end_lr=1e-4, warmup_steps=50,
                                        total_steps=2000))
        for _ in range(2000):
            grads = {"x": 2.0 * (params["x"] - target)}
            adam_step(params, state, grads)
        assert np.abs(params["x"] - target).max() < 1e-3

    def test_non_finite_grads_rejected(self):
        params = {"a": np.zeros(2)}
        state = OptimizerState(Schedule())
        with pytest.raises(DivergenceError):
            adam_step(params, state, {"a": np.array([np.nan, 0.0])})

    def test_schedule_shape(self):
        sched = Schedule(peak_lr=1e-3, end_lr=1e-6, warmup_steps=100, total_steps=1000)
        assert sched.lr_at(0) == pytest.approx(1e-5)
        assert sched.lr_at(99) == pytest.approx(1e-3)
        assert sched.lr_at(100) == pytest.approx(1e-3)
        assert sched.lr_at(999) == pytest.approx(1e-6, rel=1e-2)
        lrs = [sched.lr_at(s) for s in range(100, 1000)]
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))


class TestDeterminismAndCheckpoint:
    def test_training_loop_determinism(self):
        def run():
            arch, params, yhat, tau, mean, std = small_velocity_setup(seed=17)
            state = OptimizerState(Schedule(peak_lr=1e-3, warmup_steps=2, total_steps=20))
            target = np.zeros_like(yhat)
            for _ in range(20):
                leaves = as_leaves(params)
                out = velocity_forward(leaves, yhat, tau, mean, std, arch)
                loss = ad.mean(ad.square(out - Tensor(target + 1.0)))
                backward(loss)
                adam_step(params, state, collect_grads(leaves, params))
            return params

        a = run()
        b = run()
        for k in a:
            assert a[k].tobytes() == b[k].tobytes()

    def test_checkpoint_round_trip(self, tmp_path):
        arch, params, *_ = small_velocity_setup(seed=18)
        meta = {"arch": arch.to_json(), "step": 7}
        save_checkpoint(tmp_path / "ckpt", params, meta)
        arrays, meta2 = load_checkpoint(tmp_path / "ckpt")
        assert meta2["step"] == 7
        assert ArchConfig.from_json(meta2["arch"]) == arch
        assert set(arrays) == set(params)
        for k in params:
            assert arrays[k].tobytes() == params[k].tobytes()

    def test_truncated_normal_bounds(self):
        rng = np.random.default_rng(19)
        x = truncated_normal(rng, (2000,), std=0.02)
        assert np.abs(x).max() <= 0.04 + 1e-12
        assert 0.01 < x.std() < 0.03


class TestUnetShapes:
    def test_output_shape_matches_out_channels(self):
        arch = ArchConfig(in_channels=5, out_channels=3, levels=(4, 8, 16))
        params = init_params(np.random.default_rng(20), arch)
        leaves = as_leaves(params)
        x = Tensor(np.random.default_rng(21).standard_normal((2, 8, 8, 5)))
        e = fourier_embed(leaves, np.array([0.1, 0.2]), arch)
        out = unet_forward(leaves, x, e, arch)
        assert out.shape == (2, 8, 8, 3)
