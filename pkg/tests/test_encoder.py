import numpy as np
import pytest

from speechseek.encoder import TransformerEncoder, pool, positional_encoding
from speechseek.errors import ConfigError, ShapeError
from speechseek.gradcheck import grad_check
from speechseek.tensor import Tensor


def make_encoder(in_dim=6, dim=16, layers=1, posenc=True, seed=3, conv=False):
    return TransformerEncoder(in_dim=in_dim, dim=dim, n_layers=layers, n_heads=2,
                              ff_dim=24, rng=np.random.default_rng(seed),
                              dtype=np.float64, use_posenc=posenc, conv_branch=conv)


def test_output_shape_matches_frames():
    enc = make_encoder(in_dim=6, dim=32)
    out = enc(Tensor(np.random.default_rng(0).normal(size=(9, 6))))
    assert out.shape == (9, 32)


def test_zero_layer_encoder_is_input_projection():
    enc = make_encoder(in_dim=6, dim=16, layers=0, posenc=False)
    x = np.random.default_rng(1).normal(size=(5, 6))
    out = enc(Tensor(x))
    np.testing.assert_allclose(out.data, x @ enc.in_proj.data)


def test_feature_dim_mismatch_raises():
    enc = make_encoder(in_dim=6)
    with pytest.raises(ShapeError):
        enc(Tensor(np.zeros((4, 7))))


def test_head_divisibility_enforced():
    with pytest.raises(ConfigError):
        TransformerEncoder(in_dim=4, dim=10, n_layers=1, n_heads=4, ff_dim=8,
                           rng=np.random.default_rng(0))


def test_same_path_for_any_row_count():
    enc = make_encoder(in_dim=16, dim=16)
    for rows in (1, 5, 11):
        out = enc(Tensor(np.random.default_rng(rows).normal(size=(rows, 16))))
        assert out.shape == (rows, 16)


def test_permutation_equivariance_without_positions(rng):
    enc = make_encoder(in_dim=16, dim=16, layers=2, posenc=False)
    x = rng.normal(size=(7, 16))
    perm = rng.permutation(7)
    out = enc(Tensor(x)).data
    out_perm = enc(Tensor(x[perm])).data
    np.testing.assert_allclose(out_perm, out[perm], atol=1e-9)


def test_positional_encoding_breaks_equivariance(rng):
    enc = make_encoder(in_dim=16, dim=16, layers=1, posenc=True)
    x = rng.normal(size=(6, 16))
    perm = np.array([3, 1, 5, 0, 2, 4])
    out = enc(Tensor(x)).data
    out_perm = enc(Tensor(x[perm])).data
    assert not np.allclose(out_perm, out[perm], atol=1e-6)


def test_forward_deterministic(rng):
    enc = make_encoder()
    x = rng.normal(size=(4, 6))
    np.testing.assert_array_equal(enc(Tensor(x)).data, enc(Tensor(x)).data)


def test_positional_encoding_values():
    pe = positional_encoding(4, 6)
    assert pe.shape == (4, 6)
    np.testing.assert_allclose(pe[0, 0], 0.0)
    np.testing.assert_allclose(pe[0, 1], 1.0)
    np.testing.assert_allclose(pe[1, 0], np.sin(1.0))


def test_encoder_gradient_vs_finite_differences(rng):
    enc = make_encoder(in_dim=4, dim=8, layers=1)

    def f(x):
        return (enc(x) ** 2).sum()

    err = grad_check(f, [rng.normal(size=(3, 4))], eps=1e-4)
    assert err < 1e-3


def test_encoder_parameter_gradients_vs_finite_differences(rng):
    enc = make_encoder(in_dim=4, dim=8, layers=1, conv=True)
    x = rng.normal(size=(3, 4))
    # give the conv branch non-trivial taps so its gradient is exercised
    enc.blocks[0].conv.taps.data = rng.normal(0.0, 0.1, size=(3, 8))

    def loss() -> float:
        return (enc(Tensor(x)) ** 2).sum().item()

    out = (enc(Tensor(x)) ** 2).sum()
    enc.zero_grad()
    out.backward()

    block = enc.blocks[0]
    params = [enc.in_proj, block.attn.wq, block.attn.bo, block.ff.w1,
              block.ln1.gain, block.conv.taps]
    eps = 1e-5
    coord_rng = np.random.default_rng(0)
    for p in params:
        analytic = p.grad.reshape(-1)
        flat = p.data.reshape(-1)
        for i in coord_rng.integers(0, flat.size, size=min(6, flat.size)):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = loss()
            flat[i] = orig - eps
            f_minus = loss()
            flat[i] = orig
            fd = (f_plus - f_minus) / (2 * eps)
            assert abs(analytic[i] - fd) / max(abs(analytic[i]), abs(fd), 1e-4) < 1e-3


# -- pooling -------------------------------------------------------------


def test_pool_mean_of_identical_rows_is_that_row():
    row = np.array([1.0, -2.0, 3.0])
    reps = Tensor(np.stack([row, row]))
    np.testing.assert_allclose(pool(reps, "mean").data, row)


def test_pool_cls_is_row_zero(rng):
    reps = Tensor(rng.normal(size=(4, 5)))
    np.testing.assert_array_equal(pool(reps, "cls").data, reps.data[0])


def test_pool_mean_of_opposite_rows_is_zero(rng):
    r = rng.normal(size=5)
    reps = Tensor(np.stack([r, -r]))
    np.testing.assert_allclose(pool(reps, "mean").data, np.zeros(5), atol=1e-15)


def test_pool_rejects_empty_and_unknown_mode():
    with pytest.raises(ShapeError):
        pool(Tensor(np.zeros((0, 4))), "mean")
    with pytest.raises(ConfigError):
        pool(Tensor(np.zeros((2, 4))), "max")
