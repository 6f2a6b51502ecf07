"""Feature extractor geometry and forward/backward consistency."""
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from partpool import backbone
from partpool.config import BackboneConfig
from partpool.errors import ConfigError


def small_cfg(**kw):
    base = dict(stages=((4, 2), (6, 2)), halve_last_downsample=False,
                input_size=(16, 8))
    base.update(kw)
    return BackboneConfig(**base)


class TestGeometry:
    def test_reference_geometry_keeps_double_rows(self):
        # the production-scale shape: 384x128 input, downsample 16 instead of
        # 32, leaving a 24x8 activation map
        cfg = BackboneConfig(stages=((8, 2), (16, 2), (32, 2), (64, 2), (64, 2)),
                             halve_last_downsample=True, input_size=(384, 128))
        assert cfg.total_downsample() == 16
        assert backbone.output_shape(cfg) == (24, 8, 64)

    def test_full_rate_would_halve_again(self):
        cfg = BackboneConfig(stages=((8, 2), (16, 2), (32, 2), (64, 2), (64, 2)),
                             halve_last_downsample=False, input_size=(384, 128))
        assert backbone.output_shape(cfg) == (12, 4, 64)

    def test_default_toy_geometry(self):
        cfg = BackboneConfig()
        assert cfg.input_size == (48, 16)
        assert backbone.output_shape(cfg) == (12, 4, 64)

    def test_indivisible_input_rejected_before_compute(self):
        cfg = small_cfg(input_size=(18, 8))  # 18 % 4 != 0
        with pytest.raises(ConfigError):
            backbone.output_shape(cfg)
        params, buffers = backbone.init_params(small_cfg(), np.random.default_rng(0))
        with pytest.raises(ConfigError):
            backbone.forward(np.zeros((1, 18, 8, 3)), cfg, params, buffers, train=False)

    def test_halve_needs_a_downsampling_last_stage(self):
        with pytest.raises(ConfigError):
            BackboneConfig(stages=((4, 2), (6, 1)), halve_last_downsample=True,
                           input_size=(16, 8)).validate()

    @given(h_mult=st.integers(1, 6), w_mult=st.integers(1, 6))
    def test_output_shape_matches_forward(self, h_mult, w_mult):
        cfg = small_cfg(input_size=(4 * h_mult, 4 * w_mult))
        params, buffers = backbone.init_params(cfg, np.random.default_rng(0))
        x = np.random.default_rng(1).standard_normal((2, 4 * h_mult, 4 * w_mult, 3))
        t, _, _ = backbone.forward(x, cfg, params, buffers, train=False)
        assert t.shape == (2,) + backbone.output_shape(cfg)


class TestForward:
    def test_train_updates_running_stats_eval_does_not(self):
        cfg = small_cfg()
        params, buffers = backbone.init_params(cfg, np.random.default_rng(0))
        x = np.random.default_rng(1).standard_normal((3, 16, 8, 3))
        _, _, new_train = backbone.forward(x, cfg, params, buffers, train=True)
        _, _, new_eval = backbone.forward(x, cfg, params, buffers, train=False)
        changed = [k for k in buffers
                   if not np.array_equal(new_train[k], buffers[k])]
        assert changed  # momentum update moved the running stats
        for k in buffers:
            np.testing.assert_array_equal(new_eval[k], buffers[k])

    def test_eval_with_batch_stats_override(self):
        # train-style normalization without touching the running estimates
        cfg = small_cfg()
        params, buffers = backbone.init_params(cfg, np.random.default_rng(0))
        x = np.random.default_rng(1).standard_normal((3, 16, 8, 3))
        t_train, _, _ = backbone.forward(x, cfg, params, buffers, train=True)
        t_override, _, new_buf = backbone.forward(
            x, cfg, params, buffers, train=True, use_batch_stats=False)
        t_eval, _, _ = backbone.forward(x, cfg, params, buffers, train=False)
        np.testing.assert_allclose(t_override, t_eval)
        for k in buffers:
            np.testing.assert_array_equal(new_buf[k], buffers[k])
        assert not np.allclose(t_train, t_eval)

    def test_finite_on_constant_input(self):
        cfg = small_cfg()
        params, buffers = backbone.init_params(cfg, np.random.default_rng(0))
        x = np.full((2, 16, 8, 3), 0.5)
        t, _, _ = backbone.forward(x, cfg, params, buffers, train=True)
        assert np.all(np.isfinite(t))


class TestBackward:
    def test_gradient_matches_finite_differences(self):
        from gradcheck import max_rel_err, numeric_grad
        cfg = small_cfg(stages=((4, 2),), input_size=(8, 4))
        params, buffers = backbone.init_params(cfg, np.random.default_rng(0))
        rng = np.random.default_rng(2)
        x = rng.standard_normal((2, 8, 4, 3))
        proj = rng.standard_normal(backbone.output_shape(cfg))

        def loss_fn():
            t, _, _ = backbone.forward(x, cfg, params, buffers, train=True)
            return float((t * proj).sum())

        t, caches, _ = backbone.forward(x, cfg, params, buffers, train=True)
        grads, dx = backbone.backward(np.broadcast_to(proj, t.shape).copy(), caches)
        for name in params:
            num = numeric_grad(loss_fn, params[name])
            assert max_rel_err(grads[name], num) < 1e-4, name

        def loss_x():
            t, _, _ = backbone.forward(x, cfg, params, buffers, train=True)
            return float((t * proj).sum())

        num_dx = numeric_grad(loss_x, x)
        assert max_rel_err(dx, num_dx) < 1e-4
