import numpy as np
import pytest

from spotground.errors import ConsistencyError, NumericError, ShapeError
from spotground.nn import (
    AdamState,
    EncoderConfig,
    adam_step,
    bce_plus_l2,
    cross_entropy_soft,
    encoder_backward,
    encoder_forward,
    encoder_forward_batch,
    grad_check,
    grounding_grad_check,
    init_encoder_params,
    positional_encoding,
    spotting_grad_check,
)

SMALL = EncoderConfig(input_dim=6, output_dim=5, model_dim=16, num_layers=2,
                      num_heads=2, hidden_dim=24, dropout_p=0.0)


def _zero_params(config):
    rng = np.random.default_rng(0)
    return {k: np.zeros_like(v) for k, v in init_encoder_params(config, rng).items()}


class TestPositionalEncoding:
    def test_row_zero_alternates(self):
        pe = positional_encoding(3, 8)
        np.testing.assert_array_equal(pe[0], [0, 1, 0, 1, 0, 1, 0, 1])

    def test_scalar_values(self):
        pe = positional_encoding(4, 2)
        np.testing.assert_allclose(pe[1], [np.sin(1.0), np.cos(1.0)], atol=1e-12)
        np.testing.assert_allclose(pe[1], [0.84147, 0.54030], atol=1e-5)

    def test_range(self):
        pe = positional_encoding(512, 64)
        assert pe.min() >= -1.0 and pe.max() <= 1.0

    def test_odd_dim_rejected(self):
        with pytest.raises(ShapeError):
            positional_encoding(4, 3)


class TestForward:
    def test_zero_weights_zero_logits(self, rng):
        params = _zero_params(SMALL)
        x = rng.normal(size=(4, SMALL.input_dim))
        logits, _ = encoder_forward(params, SMALL, x)
        np.testing.assert_array_equal(logits, np.zeros(SMALL.output_dim))

    def test_eval_mode_deterministic(self, rng):
        params = init_encoder_params(SMALL, np.random.default_rng(1))
        x = rng.normal(size=(5, SMALL.input_dim))
        a, _ = encoder_forward(params, SMALL, x)
        b, _ = encoder_forward(params, SMALL, x)
        assert a.tobytes() == b.tobytes()

    def test_attention_rows_sum_to_one(self, rng):
        params = init_encoder_params(SMALL, np.random.default_rng(2))
        x = rng.normal(size=(2, 9, SMALL.input_dim))
        _, cache = encoder_forward_batch(params, SMALL, x)
        for rec in cache["layers"]:
            sums = rec["attn"].sum(axis=-1)
            np.testing.assert_allclose(sums, 1.0, atol=1e-9)

    def test_layernorm_unit_statistics(self, rng):
        # with row variance >> eps the normalized variance sits within 1e-6 of 1
        from spotground.nn import _layernorm_forward

        x = rng.normal(0.0, 50.0, size=(3, 7, 16))
        _, xhat, _ = _layernorm_forward(x, np.ones(16), np.zeros(16))
        np.testing.assert_allclose(xhat.mean(axis=-1), 0.0, atol=1e-9)
        np.testing.assert_allclose(xhat.var(axis=-1), 1.0, atol=1e-6)

    def test_layernorm_row_statistics_in_network(self, rng):
        # activations have O(1) row variance, so eps = 1e-5 shows up at ~1e-5
        params = init_encoder_params(SMALL, np.random.default_rng(3))
        x = rng.normal(size=(2, 6, SMALL.input_dim))
        _, cache = encoder_forward_batch(params, SMALL, x)
        for rec in cache["layers"]:
            for key in ("ln1", "ln2"):
                xhat, _ = rec[key]
                np.testing.assert_allclose(xhat.mean(axis=-1), 0.0, atol=1e-9)
                np.testing.assert_allclose(xhat.var(axis=-1), 1.0, atol=1e-4)

    def test_nan_input_raises_named_numeric_error(self):
        params = init_encoder_params(SMALL, np.random.default_rng(4))
        x = np.zeros((3, SMALL.input_dim))
        x[1, 2] = np.nan
        with pytest.raises(NumericError, match="input projection"):
            encoder_forward(params, SMALL, x)

    def test_shape_mismatch(self):
        params = init_encoder_params(SMALL, np.random.default_rng(5))
        with pytest.raises(ShapeError):
            encoder_forward(params, SMALL, np.zeros((3, SMALL.input_dim + 1)))

    def test_dropout_needs_rng(self):
        config = EncoderConfig(input_dim=4, output_dim=2, model_dim=8, num_layers=1,
                               num_heads=1, hidden_dim=8, dropout_p=0.5)
        params = init_encoder_params(config, np.random.default_rng(6))
        with pytest.raises(ShapeError):
            encoder_forward(params, config, np.zeros((3, 4)), train_mode=True)


def test_hand_computed_single_head_trace():
    """Independent step-by-step recomputation of a tiny forward pass."""
    config = EncoderConfig(input_dim=2, output_dim=2, model_dim=2, num_layers=1,
                           num_heads=1, hidden_dim=2, dropout_p=0.0)
    p = {
        "in.w": np.array([[0.10, 0.20], [0.30, -0.10]]),
        "in.b": np.array([0.05, -0.05]),
        "layer0.attn.wq": np.array([[0.20, -0.10], [0.10, 0.30]]),
        "layer0.attn.bq": np.array([0.01, 0.02]),
        "layer0.attn.wk": np.array([[-0.30, 0.20], [0.20, 0.10]]),
        "layer0.attn.wv": np.array([[0.40, 0.10], [-0.20, 0.20]]),
        "layer0.attn.bv": np.array([-0.02, 0.04]),
        "layer0.attn.wo": np.array([[0.30, -0.20], [0.10, 0.50]]),
        "layer0.attn.bo": np.array([0.02, -0.03]),
        "layer0.ln1.g": np.array([1.10, 0.90]),
        "layer0.ln1.b": np.array([0.01, -0.02]),
        "layer0.ffn.w1": np.array([[0.50, -0.30], [0.20, 0.40]]),
        "layer0.ffn.b1": np.array([0.10, -0.10]),
        "layer0.ffn.w2": np.array([[0.30, 0.20], [-0.10, 0.60]]),
        "layer0.ffn.b2": np.array([0.05, 0.00]),
        "layer0.ln2.g": np.array([0.95, 1.05]),
        "layer0.ln2.b": np.array([-0.01, 0.02]),
        "out.w": np.array([[0.70, -0.40], [0.20, 0.30]]),
        "out.b": np.array([0.10, -0.20]),
    }
    x = np.array([[1.0, 0.0], [0.0, 1.0]])

    # by-hand pipeline, scalar by scalar
    scale_embed = np.sqrt(2.0)
    pe = np.array([[np.sin(0.0), np.cos(0.0)], [np.sin(1.0), np.cos(1.0)]])
    h0 = (x @ p["in.w"] + p["in.b"]) * scale_embed + pe

    q = h0 @ p["layer0.attn.wq"] + p["layer0.attn.bq"]
    k = h0 @ p["layer0.attn.wk"]
    v = h0 @ p["layer0.attn.wv"] + p["layer0.attn.bv"]
    scores = q @ k.T / np.sqrt(2.0)
    attn = np.empty_like(scores)
    for i in range(2):
        row = np.exp(scores[i] - scores[i].max())
        attn[i] = row / row.sum()
    y = (attn @ v) @ p["layer0.attn.wo"] + p["layer0.attn.bo"]

    def ln(mat, g, b):
        out = np.empty_like(mat)
        for i in range(mat.shape[0]):
            mu = mat[i].mean()
            var = mat[i].var()
            out[i] = (mat[i] - mu) / np.sqrt(var + 1e-5) * g + b
        return out

    h1 = ln(h0 + y, p["layer0.ln1.g"], p["layer0.ln1.b"])
    f = np.maximum(h1 @ p["layer0.ffn.w1"] + p["layer0.ffn.b1"], 0.0)
    f = f @ p["layer0.ffn.w2"] + p["layer0.ffn.b2"]
    h2 = ln(h1 + f, p["layer0.ln2.g"], p["layer0.ln2.b"])
    expected = h2.mean(axis=0) @ p["out.w"] + p["out.b"]

    logits, _ = encoder_forward(p, config, x)
    np.testing.assert_allclose(logits, expected, atol=1e-12)


class TestBackward:
    def test_zero_upstream_gives_zero_grads(self, rng):
        params = init_encoder_params(SMALL, np.random.default_rng(7))
        x = rng.normal(size=(4, SMALL.input_dim))
        _, cache = encoder_forward(params, SMALL, x)
        grads = encoder_backward(cache, np.zeros(SMALL.output_dim))
        for name, g in grads.items():
            assert np.all(g == 0.0), name

    def test_final_bias_grad_equals_upstream(self, rng):
        params = init_encoder_params(SMALL, np.random.default_rng(8))
        x = rng.normal(size=(4, SMALL.input_dim))
        _, cache = encoder_forward(params, SMALL, x)
        upstream = rng.normal(size=SMALL.output_dim)
        grads = encoder_backward(cache, upstream)
        np.testing.assert_allclose(grads["out.b"], upstream, atol=1e-12)

    def test_mismatched_upstream_raises(self, rng):
        params = init_encoder_params(SMALL, np.random.default_rng(9))
        _, cache = encoder_forward(params, SMALL, rng.normal(size=(4, SMALL.input_dim)))
        with pytest.raises(ConsistencyError):
            encoder_backward(cache, np.zeros(SMALL.output_dim + 1))

    def test_bogus_cache_raises(self):
        with pytest.raises(ConsistencyError):
            encoder_backward({"x": None}, np.zeros(3))


class TestGradCheck:
    def test_quadratic_toy_loss_is_exact(self):
        params = {"w": np.array([1.0, -2.0, 0.5])}

        def loss_fn(p, want_grads):
            loss = float((p["w"] ** 2).sum())
            return loss, {"w": 2.0 * p["w"]} if want_grads else None

        err = grad_check(params, loss_fn, trials=20, h=1e-5)
        assert err < 1e-9

    def test_spotting_head_small(self):
        assert spotting_grad_check(trials=40, seed=1) < 1e-5

    def test_grounding_head_small(self):
        assert grounding_grad_check(trials=40, seed=1) < 1e-5


class TestEdgeShapes:
    def test_single_position_sequence(self, rng):
        config = EncoderConfig(input_dim=4, output_dim=3, model_dim=8, num_layers=2,
                               num_heads=1, hidden_dim=8, dropout_p=0.0)
        params = init_encoder_params(config, np.random.default_rng(0))
        logits, cache = encoder_forward(params, config, rng.normal(size=(1, 4)))
        assert logits.shape == (3,)
        grads = encoder_backward(cache, np.ones(3))
        assert all(np.all(np.isfinite(g)) for g in grads.values())

    def test_head_width_one(self, rng):
        config = EncoderConfig(input_dim=2, output_dim=2, model_dim=4, num_layers=1,
                               num_heads=4, hidden_dim=2, dropout_p=0.0)
        params = init_encoder_params(config, np.random.default_rng(2))
        logits, _ = encoder_forward(params, config, rng.normal(size=(5, 2)))
        assert np.all(np.isfinite(logits))

    def test_gradients_through_dropout(self):
        # reseeding inside the closure fixes the masks, so central
        # differences see the same stochastic network every call
        config = EncoderConfig(input_dim=5, output_dim=4, model_dim=8, num_layers=2,
                               num_heads=2, hidden_dim=12, dropout_p=0.3)
        params = init_encoder_params(config, np.random.default_rng(3))
        x = np.random.default_rng(4).normal(size=(2, 6, 5))
        targets = np.zeros((2, 4))
        targets[:, 2] = 1.0

        def loss_fn(p, want_grads):
            drop_rng = np.random.default_rng(99)
            logits, cache = encoder_forward_batch(p, config, x, train_mode=True,
                                                  rng=drop_rng)
            loss, dlogits = cross_entropy_soft(logits, targets)
            if not want_grads:
                return loss, None
            return loss, encoder_backward(cache, dlogits)

        assert grad_check(params, loss_fn, trials=50, rng=np.random.default_rng(5)) < 1e-5


class TestLosses:
    def test_cross_entropy_uniform(self):
        logits = np.zeros((1, 4))
        target = np.array([[0.0, 1.0, 0.0, 0.0]])
        loss, dlogits = cross_entropy_soft(logits, target)
        assert loss == pytest.approx(np.log(4.0))
        np.testing.assert_allclose(dlogits, (np.full((1, 4), 0.25) - target))

    def test_bce_at_half_is_ln2(self):
        outputs = np.array([[0.0, 0.3]])
        loss, _ = bce_plus_l2(outputs, [1.0], [0.3])
        assert loss == pytest.approx(np.log(2.0))

    def test_negative_label_ignores_offset(self):
        loss_a, _ = bce_plus_l2(np.array([[0.2, 0.9]]), [0.0], [0.0])
        loss_b, _ = bce_plus_l2(np.array([[0.2, -5.0]]), [0.0], [0.0])
        assert loss_a == pytest.approx(loss_b)


class TestAdam:
    def test_zero_gradients_leave_params_unchanged(self):
        params = {"w": np.array([1.0, -1.0])}
        state = AdamState.for_params(params)
        adam_step(params, {"w": np.zeros(2)}, state, lr=0.1)
        np.testing.assert_array_equal(params["w"], [1.0, -1.0])
        assert state.step == 1

    def test_first_step_magnitude_is_lr(self):
        params = {"w": np.array([0.0])}
        state = AdamState.for_params(params)
        adam_step(params, {"w": np.array([1.0])}, state, lr=0.1)
        assert params["w"][0] == pytest.approx(-0.1, rel=1e-6)

    def test_converges_on_quadratic(self):
        params = {"w": np.array([1.0])}
        state = AdamState.for_params(params)
        for _ in range(200):
            adam_step(params, {"w": 2.0 * params["w"]}, state, lr=0.1)
        assert abs(params["w"][0]) < 0.05

    def test_nonfinite_gradient_rejected(self):
        params = {"w": np.array([0.0])}
        state = AdamState.for_params(params)
        with pytest.raises(NumericError):
            adam_step(params, {"w": np.array([np.inf])}, state, lr=0.1)
