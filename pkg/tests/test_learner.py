import json

import numpy as np
import pytest
from scipy.special import expit

from core.errors import (
    DegenerateDatasetError,
    ModelFormatError,
    ModelShapeError,
    ModelTruncatedError,
    ModelVersionError,
    SpecMismatchError,
)
from core.learner import (
    TENSOR_ORDER,
    AdamOptimizer,
    Dataset,
    ModelParams,
    ModelSpec,
    TrainConfig,
    accuracy,
    bce_loss,
    gradients,
    init_model,
    load_model,
    loss_and_gradients,
    persist_model,
    predict,
    predict_batch,
    restore_model,
    save_model,
    split_dataset,
    split_indices,
    train,
)


def toy_dataset(m=200, seed=0, spec=ModelSpec()):
    rng = np.random.default_rng(seed)
    labels = (np.arange(m) % 2).astype(float)
    sign = np.where(labels == 1, 1.0, -1.0)[:, None, None, None]
    features = sign + 0.3 * rng.normal(size=(m,) + spec.input_shape)
    return Dataset(features, labels)


@pytest.mark.parametrize("k_len,expected", [(1, 85), (2, 105), (3, 125), (4, 145), (5, 165)])
def test_parameter_count(k_len, expected):
    spec = ModelSpec(k_len=k_len)
    assert spec.n_params() == expected
    assert init_model(spec, 0).n_params == expected


def test_three_node_model_has_wider_convolution():
    spec = ModelSpec(aggregation_nodes=(0, 1, 2))
    assert spec.input_shape == (5, 3, 3)
    assert spec.n_params() == 125 + 8


def test_invalid_specs():
    with pytest.raises(ValueError):
        ModelSpec(fc_sizes=(4, 5, 2))
    with pytest.raises(ValueError):
        ModelSpec(k_len=1, conv_kernel=4)
    with pytest.raises(ValueError):
        ModelSpec(aggregation_nodes=())


def test_hand_computed_forward_pass():
    spec = ModelSpec(conv_filters=1, conv_kernel=1, fc_sizes=(1, 1, 1), k_len=1)
    tensors = {name: np.ones(shape) for name, shape in spec.tensor_shapes().items()}
    for name in ("conv_b", "fc1_b", "fc2_b", "out_b"):
        tensors[name] = np.zeros(spec.tensor_shapes()[name])
    params = ModelParams(spec, tensors)
    x = np.full(spec.input_shape, 0.1)
    assert predict(params, x) == pytest.approx(expit(0.9))
    x[0, 0, 0] = -5.0
    assert predict(params, x) == pytest.approx(expit(0.8))


def random_spec(rng):
    k_len = int(rng.integers(1, 5))
    n_nodes = int(rng.integers(1, 4))
    return ModelSpec(conv_filters=int(rng.integers(1, 4)), conv_kernel=int(rng.integers(1, k_len + 3)),
                     fc_sizes=(int(rng.integers(1, 6)), int(rng.integers(1, 6)), 1), k_len=k_len,
                     aggregation_nodes=tuple(range(n_nodes)))


def numeric_gradients(params, x, y, h=1e-6):
    out = {}
    for name in TENSOR_ORDER:
        tensor = params.tensors[name]
        numeric = np.zeros_like(tensor)
        for idx in np.ndindex(tensor.shape):
            saved = tensor[idx]
            tensor[idx] = saved + h
            up = bce_loss(predict_batch(params, x), y)
            tensor[idx] = saved - h
            down = bce_loss(predict_batch(params, x), y)
            tensor[idx] = saved
            numeric[idx] = (up - down) / (2 * h)
        out[name] = numeric
    return out


def test_gradients_match_finite_differences():
    rng = np.random.default_rng(4)
    for draw in range(20):
        spec = random_spec(rng)
        params = init_model(spec, draw)
        for name in ("conv_b", "fc1_b", "fc2_b", "out_b"):
            params.tensors[name] = 0.1 * rng.normal(size=params.tensors[name].shape)
        batch = int(rng.integers(1, 9))
        x = rng.normal(size=(batch,) + spec.input_shape)
        y = rng.integers(0, 2, size=batch).astype(float)
        _, grads = loss_and_gradients(params, x, y)
        numeric = numeric_gradients(params, x, y)
        for name in TENSOR_ORDER:
            np.testing.assert_allclose(grads[name], numeric[name], rtol=1e-4, atol=1e-6,
                                       err_msg=f"draw {draw}: {name}")


def test_zero_weights_predict_one_half():
    spec = ModelSpec(aggregation_nodes=(0, 1))
    params = ModelParams(spec, {name: np.zeros(shape) for name, shape in spec.tensor_shapes().items()})
    x = np.random.default_rng(0).normal(size=(5,) + spec.input_shape)
    np.testing.assert_array_equal(predict_batch(params, x), 0.5)


def test_duplicated_batch_keeps_gradients():
    spec = ModelSpec()
    params = init_model(spec, 2)
    rng = np.random.default_rng(5)
    x = rng.normal(size=(4,) + spec.input_shape)
    y = np.array([1.0, 0.0, 0.0, 1.0])
    loss, grads = loss_and_gradients(params, x, y)
    loss2, grads2 = loss_and_gradients(params, np.concatenate([x, x]), np.concatenate([y, y]))
    assert loss2 == pytest.approx(loss, rel=1e-12)
    for name in TENSOR_ORDER:
        np.testing.assert_allclose(grads2[name], grads[name], rtol=1e-10, atol=1e-15, err_msg=name)


def test_output_bias_gradient_is_mean_residual():
    spec = ModelSpec()
    params = init_model(spec, 6)
    rng = np.random.default_rng(6)
    x = rng.normal(size=(7,) + spec.input_shape)
    y = rng.integers(0, 2, size=7).astype(float)
    _, grads = loss_and_gradients(params, x, y)
    assert grads["out_b"][0] == pytest.approx(np.mean(predict_batch(params, x) - y), abs=1e-14)

    params.tensors["out_w"] = np.zeros_like(params.tensors["out_w"])
    params.tensors["out_b"] = np.array([0.7])
    np.testing.assert_allclose(predict_batch(params, x), expit(0.7), rtol=1e-15)


def test_wide_model_fits_parameter_cap():
    spec = ModelSpec(conv_filters=10, fc_sizes=(10, 20, 1))
    assert spec.n_params() == 10 * 3 + 3 * 10 * 10 + 10 + 4 * 10 * 20 + 20 + 20 + 1
    assert spec.n_params() <= 4000



def test_predictions_are_probabilities():
    spec = ModelSpec()
    params = init_model(spec, 1)
    probs = predict_batch(params, np.random.default_rng(0).normal(scale=100, size=(20,) + spec.input_shape))
    assert np.all((probs > 0) & (probs < 1))


def test_wrong_input_shape():
    params = init_model(ModelSpec(), 0)
    with pytest.raises(ValueError):
        predict(params, np.zeros((4, 3, 1)))


def test_bce_loss():
    assert bce_loss([0.5, 0.5], [1, 0]) == pytest.approx(np.log(2))
    assert np.isfinite(bce_loss([0.0, 1.0], [1, 0]))
    with pytest.raises(ValueError):
        bce_loss([], [])


def test_adam_first_step_moves_by_learning_rate():
    spec = ModelSpec()
    params = init_model(spec, 0)
    before = {k: v.copy() for k, v in params.tensors.items()}
    grads = {k: np.full_like(v, 2.0) for k, v in params.tensors.items()}
    AdamOptimizer(params, lr=0.01).step(params, grads)
    for name in TENSOR_ORDER:
        np.testing.assert_allclose(before[name] - params.tensors[name], 0.01, rtol=1e-6)


def test_split_indices_partition():
    train_idx, val_idx, test_idx = split_indices(100, (0.75, 0.15, 0.10), 5)
    assert (len(train_idx), len(val_idx), len(test_idx)) == (75, 15, 10)
    assert sorted(np.concatenate([train_idx, val_idx, test_idx]).tolist()) == list(range(100))
    again = split_indices(100, (0.75, 0.15, 0.10), 5)
    assert all(np.array_equal(a, b) for a, b in zip((train_idx, val_idx, test_idx), again))


def test_split_dataset_follows_indices():
    data = toy_dataset(m=40)
    train_set, val_set, test_set = split_dataset(data, (0.75, 0.15, 0.10), 3)
    _, _, test_idx = split_indices(40, (0.75, 0.15, 0.10), 3)
    assert (len(train_set), len(val_set), len(test_set)) == (30, 6, 4)
    np.testing.assert_array_equal(test_set.labels, data.labels[test_idx])


def test_gradients_take_a_batch_tuple():
    params = init_model(ModelSpec(), 2)
    data = toy_dataset(m=8)
    grads = gradients(params, (data.features, data.labels))
    _, expected = loss_and_gradients(params, data.features, data.labels)
    assert set(grads) == set(TENSOR_ORDER)
    for name in TENSOR_ORDER:
        np.testing.assert_array_equal(grads[name], expected[name])


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(split=(0.5, 0.2, 0.2))
    with pytest.raises(ValueError):
        TrainConfig(lr=-1.0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)


def test_training_learns_a_separable_problem():
    spec = ModelSpec()
    data = toy_dataset(spec=spec)
    params, history = train(data, spec, TrainConfig(lr=0.01, epochs=200, batch_size=32, seed=1, log_every=0))
    assert len(history) == 200
    assert history[-1].train_loss < history[0].train_loss
    assert accuracy(params, data.features, data.labels) >= 0.9


def test_training_is_deterministic():
    spec = ModelSpec()
    data = toy_dataset(spec=spec)
    cfg = TrainConfig(lr=0.01, epochs=20, batch_size=16, seed=2, log_every=0)
    a, ha = train(data, spec, cfg)
    b, hb = train(data, spec, cfg)
    for name in TENSOR_ORDER:
        np.testing.assert_array_equal(a.tensors[name], b.tensors[name])
    assert ha == hb


def test_zero_learning_rate_keeps_initial_weights():
    spec = ModelSpec()
    params, _ = train(toy_dataset(spec=spec), spec, TrainConfig(lr=0.0, epochs=3, seed=4, log_every=0))
    start = init_model(spec, 4)
    for name in TENSOR_ORDER:
        np.testing.assert_array_equal(params.tensors[name], start.tensors[name])


def test_no_validation_split_returns_last_epoch():
    spec = ModelSpec()
    _, history = train(toy_dataset(spec=spec), spec,
                       TrainConfig(lr=0.01, epochs=2, split=(1.0, 0.0, 0.0), log_every=0))
    assert all(r.val_acc is None and r.val_loss is None for r in history)


def test_single_class_training_refused():
    spec = ModelSpec()
    data = toy_dataset(spec=spec)
    ones = Dataset(data.features, np.ones(len(data)))
    with pytest.raises(DegenerateDatasetError):
        train(ones, spec, TrainConfig(epochs=1))


def test_feature_shape_must_match_spec():
    data = toy_dataset(spec=ModelSpec(k_len=2))
    with pytest.raises(SpecMismatchError):
        train(data, ModelSpec(k_len=3), TrainConfig(epochs=1))


def test_dataset_rejects_non_binary_labels():
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 5, 3, 1)), np.array([0.0, 2.0]))


# --- model files ----------------------------------------------------------------------------

def test_model_file_round_trip(tmp_path):
    params = init_model(ModelSpec(aggregation_nodes=(3, 9)), 6)
    path = tmp_path / "model.bin"
    save_model(path, params)
    restored, spec = load_model(path)
    assert spec == params.spec
    for name in TENSOR_ORDER:
        np.testing.assert_array_equal(restored.tensors[name], params.tensors[name])


def test_model_file_starts_with_magic():
    data = persist_model(init_model(ModelSpec(), 0))
    assert data.startswith(b"SSAGNN-MODEL 1\n")


def _split(data):
    magic, header, payload = data.split(b"\n", 2)
    return magic, json.loads(header), payload


def _join(magic, header, payload):
    return magic + b"\n" + json.dumps(header).encode() + b"\n" + payload


def test_model_file_errors():
    data = persist_model(init_model(ModelSpec(), 0))
    magic, header, payload = _split(data)

    with pytest.raises(ModelFormatError):
        restore_model(b"NOT-A-MODEL 1\n" + data.split(b"\n", 1)[1])
    with pytest.raises(ModelVersionError):
        restore_model(b"SSAGNN-MODEL 2\n" + data.split(b"\n", 1)[1])
    with pytest.raises(ModelTruncatedError):
        restore_model(data[:-8])
    with pytest.raises(ModelTruncatedError):
        restore_model(magic + b"\n" + b'{"spec"')
    with pytest.raises(ModelFormatError):
        restore_model(data + b"\x00")

    header["tensors"][0]["shape"] = [3, 1, 2]
    with pytest.raises(ModelShapeError):
        restore_model(_join(magic, header, payload))


def test_non_finite_weights_rejected():
    params = init_model(ModelSpec(), 0)
    params.tensors["fc1_w"][0, 0] = np.nan
    with pytest.raises(ModelFormatError):
        restore_model(persist_model(params))
