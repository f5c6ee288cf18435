import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from speechseek.cif import WeightPredictor, fire, mae_length_loss, scale_weights
from speechseek.errors import ConfigError, DegenerateWeightsError
from speechseek.gradcheck import grad_check
from speechseek.tensor import Tensor


def predictor(dim=8, seed=3):
    return WeightPredictor(dim, np.random.default_rng(seed), dtype=np.float64)


# -- weight prediction ------------------------------------------------------


def test_predicted_weights_in_unit_interval(rng):
    p = predictor()
    for t in (1, 4, 17):
        alpha = p(Tensor(rng.normal(size=(t, 8)))).data
        assert alpha.shape == (t,)
        assert np.all(alpha >= 0.0) and np.all(alpha <= 1.0)


def test_zero_parameters_give_half_everywhere(rng):
    p = predictor()
    for param in p.named_parameters().values():
        param.data = np.zeros_like(param.data)
    alpha = p(Tensor(rng.normal(size=(5, 8)))).data
    np.testing.assert_allclose(alpha, np.full(5, 0.5))


def test_weight_predictor_gradient(rng):
    p = predictor(dim=4)

    def f(x):
        return (p(x) ** 2).sum()

    assert grad_check(f, [rng.normal(size=(5, 4))], eps=1e-4) < 1e-3


# -- scaling and length loss -------------------------------------------------


def test_scale_weights_simple():
    scaled = scale_weights(Tensor(np.array([0.5, 0.5])), 2)
    np.testing.assert_allclose(scaled.data, [1.0, 1.0])


def test_scale_weights_fixed_point():
    alpha = np.array([0.3, 0.7, 1.0])
    scaled = scale_weights(Tensor(alpha), 2)
    np.testing.assert_allclose(scaled.data, alpha, rtol=1e-15)


def test_scale_weights_rejects_zero_mass():
    with pytest.raises(DegenerateWeightsError):
        scale_weights(Tensor(np.zeros(3)), 2)


def test_mae_loss_values():
    assert mae_length_loss(Tensor(np.array([1.0, 1.0])), 2).item() == 0.0
    # the worked example's weights sum to 2.0
    alpha = Tensor(np.array([0.8, 0.3, 0.4, 0.4, 0.1]))
    assert mae_length_loss(alpha, 3).item() == pytest.approx(1.0)


def test_mae_loss_gradient_is_sign(rng):
    alpha = rng.uniform(0.1, 0.9, size=6)
    n = 3
    expected_sign = np.sign(alpha.sum() - n)

    t = Tensor(alpha, requires_grad=True)
    mae_length_loss(t, n).backward()
    np.testing.assert_allclose(t.grad, np.full(6, expected_sign))
    assert grad_check(lambda a: mae_length_loss(a, n), [alpha]) < 1e-3


# -- firing -------------------------------------------------------------------


def test_fire_worked_example_token_count_and_weights(rng):
    h = rng.normal(size=(5, 4))
    alpha = np.array([0.8, 0.3, 0.4, 0.4, 0.1])
    result = fire(Tensor(h), Tensor(alpha), threshold=1.0)
    assert result.fired_count == 2
    e1 = 0.8 * h[0] + 0.2 * h[1]
    e2 = 0.1 * h[1] + 0.4 * h[2] + 0.4 * h[3] + 0.1 * h[4]
    np.testing.assert_allclose(result.embeddings.data[0], e1, atol=1e-9)
    np.testing.assert_allclose(result.embeddings.data[1], e2, atol=1e-9)
    assert all(result.complete)


def test_fire_unit_weights_copy_frames(rng):
    h = rng.normal(size=(3, 4))
    result = fire(Tensor(h), Tensor(np.ones(3)), threshold=1.0)
    assert result.fired_count == 3
    np.testing.assert_allclose(result.embeddings.data, h, atol=1e-12)


def test_fire_zero_weights_fire_nothing(rng):
    result = fire(Tensor(rng.normal(size=(4, 3))), Tensor(np.zeros(4)))
    assert result.fired_count == 0
    assert result.embeddings.shape == (0, 3)


def test_fire_tail_modes(rng):
    h = rng.normal(size=(3, 2))
    alpha = Tensor(np.array([0.3, 0.2, 0.2]))  # residue 0.7 >= beta/2
    assert fire(h_t := Tensor(h.copy()), alpha, tail="round").fired_count == 1
    assert fire(Tensor(h), alpha, tail="drop").fired_count == 0
    small = Tensor(np.array([0.1, 0.1, 0.1]))  # residue 0.3 < beta/2
    assert fire(Tensor(h), small, tail="round").fired_count == 0


def test_fire_rejects_bad_arguments(rng):
    h = Tensor(rng.normal(size=(3, 2)))
    with pytest.raises(ConfigError):
        fire(h, Tensor(np.ones(3)), threshold=0.0)
    with pytest.raises(ConfigError):
        fire(h, Tensor(np.ones(3)), tail="pad")


def _conservation_and_monotonicity(alpha: np.ndarray, threshold: float = 1.0):
    t = len(alpha)
    h = np.random.default_rng(0).normal(size=(t, 3))
    result = fire(Tensor(h), Tensor(alpha), threshold=threshold, tail="round")
    last_max = -1
    for alloc, complete in zip(result.allocations, result.complete):
        weights = [w for _, w in alloc]
        frames = [f for f, _ in alloc]
        if complete:
            assert abs(sum(weights) - threshold) < 1e-6
        assert min(frames) >= last_max  # boundary frame may repeat
        last_max = max(frames)
        # every token's weighted sum matches its allocation
    return result


@settings(max_examples=150, deadline=None)
@given(st.lists(st.floats(min_value=0.0, max_value=1.0, allow_nan=False), min_size=1, max_size=40))
def test_fire_conservation_and_monotonicity_property(alpha_list):
    _conservation_and_monotonicity(np.array(alpha_list, dtype=np.float64))


@settings(max_examples=150, deadline=None)
@given(st.lists(st.floats(min_value=1e-3, max_value=1.0, allow_nan=False), min_size=2, max_size=40),
       st.integers(min_value=1, max_value=20))
def test_scaled_fire_count_equals_target_property(alpha_list, n_target):
    alpha = Tensor(np.array(alpha_list, dtype=np.float64))
    scaled = scale_weights(alpha, n_target)
    h = Tensor(np.zeros((len(alpha_list), 2)))
    result = fire(h, scaled, tail="round")
    assert result.fired_count == n_target


def test_fire_count_law_against_weight_mass(rng):
    for _ in range(200):
        t = int(rng.integers(1, 30))
        alpha = rng.uniform(0.0, 1.0, size=t)
        result = fire(Tensor(np.zeros((t, 2))), Tensor(alpha), tail="drop")
        assert result.fired_count == int(alpha.sum() / 1.0 + 1e-12)


def _safe_fire_point(rng, t=6, margin=1e-3):
    """Random (h, alpha) whose partial sums stay away from firing boundaries."""
    while True:
        alpha = rng.uniform(0.05, 0.95, size=t)
        run = 0.0
        ok = True
        for a in alpha:
            run += a
            frac = run % 1.0
            if min(frac, 1.0 - frac) < margin:
                ok = False
                break
        total = alpha.sum()
        residue = total % 1.0
        if ok and abs(residue - 0.5) > margin:
            return rng.normal(size=(t, 3)), alpha


def test_fire_gradient_at_non_boundary_points(rng):
    probe = Tensor(np.array([[1.0, -0.5, 2.0]])).T  # fixed projection to a scalar

    for _ in range(3):
        h, alpha = _safe_fire_point(rng)

        def f(h_t, alpha_t):
            result = fire(h_t, alpha_t, tail="round")
            return (result.embeddings @ probe).sum()

        assert grad_check(f, [h, alpha], eps=1e-5) < 1e-3


def test_scaled_fire_gradient(rng):
    h, alpha = _safe_fire_point(rng)

    def f(h_t, alpha_t):
        result = fire(h_t, scale_weights(alpha_t, 3), tail="round")
        return (result.embeddings ** 2).sum()

    assert grad_check(f, [h, alpha], eps=1e-5) < 1e-3
