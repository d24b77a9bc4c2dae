import numpy as np
import pytest

from udalm.optim import AdamW, NumericalError


class TestAdamW:
    def test_quadratic_bowl(self):
        target = np.array([1.5, -2.0, 0.25])
        w = {"w": np.zeros(3)}
        opt = AdamW(lr=0.1, weight_decay=0.0)
        for _ in range(500):
            opt.step(w, {"w": 2 * (w["w"] - target)})
        np.testing.assert_allclose(w["w"], target, atol=1e-6)

    def test_decoupled_decay_with_zero_gradient(self):
        w = {"w": np.array([2.0, -4.0])}
        opt = AdamW(lr=0.1, weight_decay=0.5)
        for k in range(1, 4):
            opt.step(w, {"w": np.zeros(2)})
            np.testing.assert_allclose(w["w"], np.array([2.0, -4.0]) * (1 - 0.05) ** k, rtol=1e-15)

    def test_first_step_is_sign_scaled(self):
        g = np.array([0.3, -1e-3, 50.0])
        w = {"w": np.zeros(3)}
        AdamW(lr=0.01, weight_decay=0.0).step(w, {"w": g})
        np.testing.assert_allclose(w["w"], -0.01 * np.sign(g), rtol=1e-4)

    def test_non_finite_gradient_names_tensor(self):
        w = {"a": np.zeros(2), "layer0.q_w": np.zeros(2)}
        with pytest.raises(NumericalError, match="layer0.q_w"):
            AdamW(lr=0.1).step(w, {"a": np.ones(2), "layer0.q_w": np.array([1.0, np.nan])})
        np.testing.assert_array_equal(w["a"], 0.0)

    def test_only_given_tensors_move(self):
        w = {"a": np.ones(2), "b": np.ones(2)}
        AdamW(lr=0.1, weight_decay=0.1).step(w, {"a": np.ones(2)})
        np.testing.assert_array_equal(w["b"], 1.0)
