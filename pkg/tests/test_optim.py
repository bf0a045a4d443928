import numpy as np
import pytest

from prl.optim import OptimizerConfig, Parameter, adam_step, zero_grads


def make_param(value, grad=None):
    p = Parameter("p", np.asarray(value, dtype=np.float64))
    if grad is not None:
        p.value.grad = np.asarray(grad, dtype=np.float64)
    return p


class TestAdamStep:
    def test_zero_gradient_zero_decay_is_noop(self):
        p = make_param([1.0, -2.0], grad=[0.0, 0.0])
        adam_step([p], OptimizerConfig(learning_rate=0.1, weight_decay=0.0))
        np.testing.assert_array_equal(p.data, [1.0, -2.0])
        assert p.step_count == 1

    def test_first_step_magnitude(self):
        # g=1, lr=0.1, no decay: bias correction makes the first step
        # lr / (1 + epsilon).
        p = make_param([0.0], grad=[1.0])
        adam_step([p], OptimizerConfig(learning_rate=0.1, weight_decay=0.0))
        np.testing.assert_allclose(p.data, [-0.1 / (1.0 + 1e-8)], rtol=1e-12)

    def test_clip_makes_large_gradients_equivalent(self):
        a = make_param([0.5], grad=[5.0])
        b = make_param([0.5], grad=[1.0])
        config = OptimizerConfig(learning_rate=0.01, grad_clip=1.0)
        adam_step([a], config)
        adam_step([b], config)
        np.testing.assert_array_equal(a.data, b.data)
        np.testing.assert_array_equal(a.adam_m, b.adam_m)
        np.testing.assert_array_equal(a.adam_v, b.adam_v)

    def test_decoupled_weight_decay_shrinks_value(self):
        p = make_param([2.0], grad=[0.0])
        adam_step([p], OptimizerConfig(learning_rate=0.1, weight_decay=0.5))
        np.testing.assert_allclose(p.data, [2.0 - 0.1 * 0.5 * 2.0])

    def test_missing_gradient_treated_as_zero(self):
        p = make_param([3.0])
        adam_step([p], OptimizerConfig(learning_rate=0.1, weight_decay=0.0))
        np.testing.assert_array_equal(p.data, [3.0])

    def test_bit_reproducible_across_runs(self):
        def run():
            rng = np.random.default_rng(42)
            p = make_param(rng.standard_normal((4, 3)))
            config = OptimizerConfig(learning_rate=1e-3)
            for _ in range(25):
                p.value.grad = rng.standard_normal((4, 3)) * 3.0
                adam_step([p], config)
                p.zero_grad()
            return p.data.copy(), p.adam_m.copy(), p.adam_v.copy()

        first, second = run(), run()
        for a, b in zip(first, second):
            np.testing.assert_array_equal(a, b)


class TestParameter:
    def test_moments_zero_initialized_and_congruent(self):
        p = make_param(np.ones((2, 5)))
        assert p.adam_m.shape == p.adam_v.shape == (2, 5)
        assert not p.adam_m.any() and not p.adam_v.any()
        assert p.step_count == 0

    def test_zero_grads_helper(self):
        p = make_param([1.0], grad=[1.0])
        zero_grads([p])
        assert p.grad is None


class TestOptimizerConfig:
    def test_defaults(self):
        config = OptimizerConfig(learning_rate=1e-3)
        assert config.beta1 == 0.9 and config.beta2 == 0.999
        assert config.epsilon == 1e-8
        assert config.weight_decay == 1e-4 and config.grad_clip == 1.0

    @pytest.mark.parametrize("kwargs", [
        {"learning_rate": -1.0},
        {"learning_rate": 1e-3, "beta1": 1.0},
        {"learning_rate": 1e-3, "grad_clip": 0.0},
        {"learning_rate": 1e-3, "weight_decay": -0.1},
    ])
    def test_rejects_bad_values(self, kwargs):
        with pytest.raises(ValueError):
            OptimizerConfig(**kwargs)
