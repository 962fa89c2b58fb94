import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mtcdetect import autodiff as ad
from mtcdetect.autodiff import Tensor
from mtcdetect.errors import DimensionError, ParameterError, StateError
from mtcdetect.signal import SimulationSetup, generate_batch, sample_covariance
from mtcdetect.training import weighted_bce_loss
from mtcdetect.transformer import (HTConfig, auto_chunk, HTParams, buffer_names, decode, embed_features, encoder_layer, forward,
                                   initial_embedding, normalize_inputs, parameter_shapes, predict)

from _util import calibrated_params, complex_normal, gradient_errors, tiny_config


@pytest.fixture(scope="module")
def model():
    return calibrated_params(tiny_config(layers=2), pilot_len=3, n_devices=7)


def instance(rng, n, lp, m=8):
    B = complex_normal(rng, (lp, n))
    labels = rng.uniform(size=n) < 0.3
    Y = B[:, labels] @ complex_normal(rng, (int(labels.sum()), m)) + complex_normal(rng, (lp, m), 0.1)
    return B, sample_covariance(Y)


# ---------------------------------------------------------------- features and embedding


def test_embed_features_example():
    B = np.array([[1 + 2j], [3 - 1j]])
    dev, sig = embed_features(B, np.zeros((2, 2)))
    assert dev[0].tolist() == [1.0, 3.0, 2.0, -1.0]
    assert sig.shape == (8,)


def test_embed_features_real_pilots_and_identity_covariance():
    rng = np.random.default_rng(0)
    dev, sig = embed_features(rng.standard_normal((3, 4)).astype(complex), np.eye(3))
    assert not dev[:, 3:].any()
    expected = np.zeros(18)
    expected[[0, 4, 8]] = 1.0  # diagonal of the column-major real plane
    assert np.array_equal(sig, expected)


def test_embed_features_uses_column_major_vec():
    C = np.array([[1, 2 + 1j], [3, 4]])
    _, sig = embed_features(np.zeros((2, 1)), C)
    assert sig.tolist() == [1, 3, 2, 4, 0, 0, 1, 0]


def test_embed_features_shape_check():
    with pytest.raises(DimensionError):
        embed_features(np.zeros((3, 4)), np.zeros((2, 2)))


def test_zero_features_give_biases():
    params = HTParams.initialize(tiny_config(), 2, seed=1)
    X = initial_embedding((np.zeros((3, 4)), np.zeros(8)), params).data[0]
    assert np.array_equal(X[:3], np.tile(params["embed.B.b"].data, (3, 1)))
    assert np.array_equal(X[3], params["embed.Y.b"].data)


def test_initial_embedding_matches_dense_oracle():
    rng = np.random.default_rng(2)
    params = HTParams.initialize(tiny_config(), 3, seed=2)
    B, C = instance(rng, 5, 3)
    B[:, 4] = B[:, 1]
    dev, sig = embed_features(B, C)
    X = initial_embedding((dev, sig), params).data[0]
    Wb, bb = params["embed.B.W"].data, params["embed.B.b"].data
    Wy, by = params["embed.Y.W"].data, params["embed.Y.b"].data
    for n in range(5):
        np.testing.assert_allclose(X[n], Wb @ dev[n] + bb, atol=1e-12, rtol=0)
    np.testing.assert_allclose(X[5], Wy @ sig + by, atol=1e-12, rtol=0)
    assert np.array_equal(X[1], X[4])  # shared parameters


def test_initial_embedding_rejects_wrong_width():
    params = HTParams.initialize(tiny_config(), 3, seed=0)
    with pytest.raises(ParameterError):
        initial_embedding((np.zeros((2, 4)), np.zeros(8)), params)


def test_normalisation_makes_forward_scale_free(model):
    rng = np.random.default_rng(3)
    B, C = instance(rng, 7, 3)
    B2, C2 = normalize_inputs(B, C)
    assert np.mean(np.abs(B2) ** 2) == pytest.approx(1.0)
    p = forward(B, C, model).data
    scaled = forward(B * 3e-7, C * 9e-14, model).data
    np.testing.assert_allclose(scaled, p, atol=1e-9)


# ---------------------------------------------------------------- encoder and decoder


def test_attention_rows_are_stochastic(model):
    rng = np.random.default_rng(4)
    B, C = instance(rng, 7, 3)
    weights = []
    forward(B, C, model, attention=weights)
    assert len(weights) == 3  # two encoder layers and the decoder
    for w in weights:
        np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-12)
        assert np.all(w >= 0)


def test_zero_compatibility_gives_uniform_attention():
    params = HTParams.initialize(tiny_config(), 2, seed=5)
    for name, t in params.tensors.items():
        if name.startswith("enc.0.mha.Y") or name.startswith(("enc.0.mha.B.q", "enc.0.mha.B.k")):
            t.data[:] = 0.0
    rng = np.random.default_rng(5)
    B, C = instance(rng, 1, 2)
    X = initial_embedding(embed_features(B, C), params)
    weights = []
    encoder_layer(0, X, params, mode="train", update_stats=False, attention=weights)
    np.testing.assert_allclose(weights[0], 0.5, atol=1e-15)


def test_self_exclusion_flag_masks_the_diagonal():
    params = calibrated_params(tiny_config(attend_self=False), 2, n_devices=4)
    rng = np.random.default_rng(6)
    B, C = instance(rng, 4, 2)
    weights = []
    forward(B, C, params, attention=weights)
    enc = weights[0]
    assert np.all(np.diagonal(enc, axis1=1, axis2=2) == 0.0)
    np.testing.assert_allclose(enc.sum(axis=-1), 1.0, atol=1e-12)


def test_encoder_layer_is_equivariant(model):
    rng = np.random.default_rng(7)
    B, C = instance(rng, 7, 3)
    perm = rng.permutation(7)
    X = initial_embedding(embed_features(B, C), model)
    Xp = initial_embedding(embed_features(B[:, perm], C), model)
    out = encoder_layer(0, X, model).data[0]
    outp = encoder_layer(0, Xp, model).data[0]
    np.testing.assert_allclose(outp[:7], out[perm], atol=1e-9)
    np.testing.assert_allclose(outp[7], out[7], atol=1e-9)


def test_decoder_bounds_and_zero_output_weight(model):
    rng = np.random.default_rng(8)
    X = Tensor(rng.standard_normal((2, 5, 8)) * 50)
    P = decode(X, model).data
    lo, hi = 1 / (1 + np.exp(10.0)), 1 / (1 + np.exp(-10.0))
    assert np.all((P >= lo) & (P <= hi))
    params = model.copy()
    params["dec.out.W"].data[:] = 0.0
    assert np.all(decode(X, params).data == 0.5)


def test_identical_components_get_identical_probabilities(model):
    rng = np.random.default_rng(9)
    X = rng.standard_normal((1, 4, 8))
    X[0, 2] = X[0, 0]
    P = decode(Tensor(X), model).data[0]
    assert P[0] == P[2]


# ---------------------------------------------------------------- forward


def test_inference_needs_statistics():
    params = HTParams.initialize(tiny_config(), 2, seed=0)
    B, C = instance(np.random.default_rng(10), 3, 2)
    with pytest.raises(StateError):
        forward(B, C, params)
    forward(B, C, params, mode="train")
    assert params.bn_updates == 1
    assert forward(B, C, params).shape == (3,)


def test_forward_checks_pilot_length_and_mode(model):
    B, C = instance(np.random.default_rng(11), 3, 4)
    with pytest.raises(DimensionError):
        forward(B, C, model)
    with pytest.raises(ParameterError):
        forward(B, C, model, mode="eval")


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 12), st.integers(0, 2**31))
def test_forward_is_permutation_equivariant(n, seed):
    params = _shared_model()
    rng = np.random.default_rng(seed)
    B, C = instance(rng, n, 3)
    perm = rng.permutation(n)
    p = forward(B, C, params).data
    pp = forward(B[:, perm], C, params).data
    assert np.max(np.abs(pp - p[perm])) < 1e-9


_CACHE = {}


def _shared_model():
    if "m" not in _CACHE:
        _CACHE["m"] = calibrated_params(tiny_config(layers=2), pilot_len=3, n_devices=7)
    return _CACHE["m"]


def test_any_device_count_and_antenna_count(model):
    rng = np.random.default_rng(12)
    for n, m in ((1, 1), (7, 8), (35, 64)):
        B, C = instance(rng, n, 3, m)
        p = forward(B, C, model).data
        assert p.shape == (n,)
        assert np.all((p > 0) & (p < 1))


def test_output_depends_on_received_signal_only_through_covariance(model):
    rng = np.random.default_rng(13)
    B = complex_normal(rng, (3, 5))
    Y = complex_normal(rng, (3, 6))
    U, _ = np.linalg.qr(complex_normal(rng, (6, 6)))  # Y U U^H Y^H = Y Y^H
    Y2 = Y @ U
    np.testing.assert_allclose(sample_covariance(Y2), sample_covariance(Y), atol=1e-14)
    p1 = forward(B, sample_covariance(Y), model).data
    p2 = forward(B, sample_covariance(Y2), model).data
    np.testing.assert_allclose(p1, p2, atol=1e-9)


def test_parameter_count_is_independent_of_n_and_m():
    cfg = tiny_config()
    counts = set()
    for n, m in ((5, 4), (40, 64)):
        p = calibrated_params(cfg, 2, n_devices=n)
        counts.add(p.count())
        assert set(p.tensors) == set(parameter_shapes(cfg, 2))
    assert len(counts) == 1


def test_parameter_count_formula():
    cfg, lp = HTConfig(), 8
    d, dp, df, T, L = 128, 32, 512, 8, 5
    embed = d * 2 * lp + d + d * 2 * lp * lp + d
    per_layer = 2 * (4 * T * dp * d + df * d + df + d * df + d + 4 * d)
    dec = T * dp * d * 5 + T * d * dp + d * d
    assert HTParams.initialize(cfg, lp).count() == embed + L * per_layer + dec


def test_batch_norm_running_statistics():
    params = HTParams.initialize(tiny_config(), 2, seed=3)
    setup = SimulationSetup(n_devices=4, pilot_len=2, m_antennas=4)
    batch, _ = generate_batch(setup, 5, seed=1)
    before = {k: v.copy() for k, v in params.buffers.items()}
    forward(batch.B, batch.C, params, mode="train", update_stats=False)
    assert all(np.array_equal(before[k], params.buffers[k]) for k in before)
    assert params.bn_updates == 0
    forward(batch.B, batch.C, params, mode="train")
    assert sorted(params.buffers) == sorted(buffer_names(params.config))
    changed = [k for k in before if not np.array_equal(before[k], params.buffers[k])]
    assert len(changed) == len(before)
    # momentum 0.1 from mean 0 / var 1
    for k in changed:
        if k.endswith("running_var"):
            assert np.all(params.buffers[k] >= 0.9 - 1e-12)


def test_predict_matches_forward_and_handles_empty(model):
    setup = SimulationSetup(n_devices=7, pilot_len=3, m_antennas=8)
    batch, _ = generate_batch(setup, 10, seed=4)
    full = forward(batch.B, batch.C, model).data
    np.testing.assert_allclose(predict(batch.B, batch.C, model, chunk=3), full, atol=1e-12)
    assert predict(batch.B[:0], batch.C[:0], model).shape == (0, 7)


@pytest.mark.parametrize("mode", ["train", "inference"])
def test_end_to_end_gradient_matches_finite_differences(mode):
    params = calibrated_params(tiny_config(), 2, n_devices=3, seed=5)
    setup = SimulationSetup(n_devices=3, pilot_len=2, m_antennas=4)
    batch, _ = generate_batch(setup, 4, seed=6)
    batch.labels[:, 0] = 1
    tensors = params.parameters()

    def loss():
        P = forward(batch.B, batch.C, params, mode=mode, update_stats=False)
        return weighted_bce_loss(P, batch.labels, 0.1)

    errors = gradient_errors(loss, tensors)
    worst = max(errors, key=errors.get)
    assert errors[worst] < 1e-4, (worst, errors[worst])


def test_config_validation_and_round_trip():
    with pytest.raises(ParameterError):
        HTConfig(layers=0)
    with pytest.raises(ParameterError):
        HTConfig(c_clip=0.0)
    cfg = HTConfig.desk()
    assert HTConfig.from_dict(cfg.to_dict()) == cfg


def test_params_reject_wrong_shapes():
    params = HTParams.initialize(tiny_config(), 2)
    tensors = dict(params.tensors)
    tensors["dec.out.W"] = Tensor(np.zeros((3, 3)))
    with pytest.raises(ParameterError):
        HTParams(params.config, 2, tensors, params.buffers)
    del tensors["dec.out.W"]
    with pytest.raises(ParameterError):
        HTParams(params.config, 2, tensors, params.buffers)


def test_copy_is_independent(model):
    clone = model.copy()
    clone["dec.out.W"].data[0, 0] += 1.0
    assert clone["dec.out.W"].data[0, 0] != model["dec.out.W"].data[0, 0]
    assert ad.tsum(clone["dec.out.W"]).item() != ad.tsum(model["dec.out.W"]).item()


def test_auto_chunk_bounds_attention_memory():
    assert auto_chunk(1, 8) == 64
    assert auto_chunk(100, 4) == (1 << 18) // (4 * 101**2)
    assert auto_chunk(5000, 8) == 1
    for n in (10, 100, 300):
        assert auto_chunk(n, 4) * 4 * (n + 1) ** 2 <= 1 << 18 or auto_chunk(n, 4) == 1
