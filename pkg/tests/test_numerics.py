import numpy as np
import pytest

from candistill.errors import CheckpointError, ShapeError
from candistill.numerics import (
    Adam,
    AdamState,
    LayerNorm,
    Linear,
    Parameter,
    Tape,
    Tensor,
    adam_step,
    backward,
    clip_grad_norm,
    concat,
    cross_entropy,
    debug_checks,
    layer_norm,
    load_parameters,
    log_softmax,
    no_grad,
    read_metadata,
    relu,
    save_parameters,
    sigmoid,
    soft_cross_entropy,
    softmax,
    tanh,
)


def naive_matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            for k in range(a.shape[1]):
                out[i, j] += a[i, k] * b[k, j]
    return out


# -- forward values ------------------------------------------------------


def test_matmul_hand_example():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    b = Tensor([[5.0, 6.0], [7.0, 8.0]])
    assert np.array_equal((a @ b).numpy(), [[19.0, 22.0], [43.0, 50.0]])


def test_matmul_identity_and_oracle(rng):
    a = rng.normal(size=(4, 5))
    b = rng.normal(size=(5, 3))
    assert np.allclose((Tensor(a) @ Tensor(np.eye(5))).numpy(), a)
    assert np.allclose((Tensor(a) @ Tensor(b)).numpy(), naive_matmul(a, b), atol=1e-12)


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeError):
        Tensor(np.zeros((2, 3))) @ Tensor(np.zeros((2, 3)))


def test_activations_at_zero_and_extremes():
    x = Tensor([0.0, 1000.0, -1000.0])
    assert np.array_equal(sigmoid(x).numpy(), [0.5, 1.0, 0.0])
    assert np.array_equal(tanh(x).numpy(), [0.0, 1.0, -1.0])
    assert np.array_equal(relu(Tensor([-2.0, 0.0, 3.0])).numpy(), [0.0, 0.0, 3.0])


def test_softmax_properties(rng):
    x = rng.normal(size=(6, 4)) * 10
    p = softmax(Tensor(x)).numpy()
    assert np.all(p >= 0)
    assert np.allclose(p.sum(axis=-1), 1.0, atol=1e-12)
    assert np.allclose(softmax(Tensor(x + 123.0)).numpy(), p, atol=1e-12)


def test_softmax_large_equal_logits():
    p = softmax(Tensor([[1000.0, 1000.0]])).numpy()
    assert np.array_equal(p, [[0.5, 0.5]])


def test_log_softmax_matches_log_of_softmax(rng):
    x = Tensor(rng.normal(size=(3, 5)))
    assert np.allclose(log_softmax(x).numpy(), np.log(softmax(x).numpy()), atol=1e-12)


def test_layer_norm_normalises_last_axis(rng):
    x = Tensor(rng.normal(loc=3.0, scale=2.0, size=(4, 8)))
    out = layer_norm(x, Tensor(np.ones(8)), Tensor(np.zeros(8))).numpy()
    assert np.allclose(out.mean(axis=-1), 0.0, atol=1e-12)
    assert np.allclose(out.var(axis=-1), 1.0, atol=1e-4)


def test_layer_norm_idempotent(rng):
    x = Tensor(rng.normal(size=(3, 16)))
    gain, bias = Tensor(np.ones(16)), Tensor(np.zeros(16))
    once = layer_norm(x, gain, bias, eps=1e-12)
    twice = layer_norm(once, gain, bias, eps=1e-12)
    assert np.allclose(once.numpy(), twice.numpy(), atol=1e-9)


def test_layer_norm_constant_row_is_bias():
    x = Tensor(np.full((1, 4), 7.0))
    bias = Tensor([1.0, 2.0, 3.0, 4.0])
    assert np.allclose(layer_norm(x, Tensor(np.ones(4)), bias).numpy(), [[1.0, 2.0, 3.0, 4.0]])


def test_cross_entropy_values(rng):
    assert cross_entropy(Tensor([[0.0, 0.0]]), np.array([1])).item() == pytest.approx(np.log(2))
    assert cross_entropy(Tensor([[100.0, -100.0]]), np.array([0])).item() == pytest.approx(0.0, abs=1e-12)

    logits = rng.normal(size=(5, 3))
    labels = np.array([0, 2, 1, 1, 0])
    p = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    expected = -np.mean(np.log(p[np.arange(5), labels]))
    assert cross_entropy(Tensor(logits), labels).item() == pytest.approx(expected, rel=1e-12)


def test_cross_entropy_rejects_bad_shapes():
    with pytest.raises(ShapeError):
        cross_entropy(Tensor(np.zeros((0, 2))), np.array([], dtype=int))
    with pytest.raises(ShapeError):
        cross_entropy(Tensor(np.zeros((2, 2))), np.array([0, 1, 1]))
    with pytest.raises(ShapeError):
        soft_cross_entropy(Tensor(np.zeros((2, 2))), np.zeros((2, 3)))


def test_concat_values_and_mismatch():
    out = concat([Tensor([[1.0]]), Tensor([[2.0, 3.0]])], axis=-1)
    assert np.array_equal(out.numpy(), [[1.0, 2.0, 3.0]])
    with pytest.raises(ShapeError):
        concat([Tensor(np.zeros((1, 2))), Tensor(np.zeros((2, 2)))], axis=-1)


# -- differentiation -----------------------------------------------------


def test_square_gradient():
    x = Parameter([3.0])
    with Tape():
        y = (x * x).sum()
    backward(y)
    assert np.array_equal(x.grad, [6.0])


def test_fan_out_accumulates():
    x = Parameter([1.5])
    with Tape():
        y = (x + x).sum()
    backward(y)
    assert np.array_equal(x.grad, [2.0])


def test_backward_requires_scalar_on_tape():
    x = Parameter([1.0, 2.0])
    with Tape() as tape:
        y = x * 2.0
    with pytest.raises(ShapeError):
        tape.backward(y)

    off_tape = (x * 2.0).sum()
    with pytest.raises(ShapeError):
        backward(off_tape)


def test_no_grad_records_nothing():
    x = Parameter([1.0])
    with Tape() as tape:
        with no_grad():
            y = x * 3.0
        assert len(tape) == 0
        z = x * 3.0
    assert not y.requires_grad
    assert z.requires_grad and len(tape) == 1


def test_constants_are_not_recorded():
    with Tape() as tape:
        Tensor([1.0]) * Tensor([2.0])
    assert len(tape) == 0


@pytest.mark.parametrize(
    "op",
    [
        lambda a, b: (a @ b).sum(),
        lambda a, b: (sigmoid(a @ b) * tanh(a @ b)).sum(),
        lambda a, b: (relu(a @ b) ** 2).mean(),
        lambda a, b: (softmax(a @ b) * Tensor(np.arange(3.0))).sum(),
        lambda a, b: cross_entropy(a @ b, np.array([0, 2, 1, 1])),
        lambda a, b: (a @ b / ((a * a).sum() + 1.0)).sum(),
        lambda a, b: (concat([a, a[:, :2]], axis=-1).exp() - 1.0).sum(),
        lambda a, b: (a * a + 1.0).log().sum() + (a * a + 1.0).sqrt().sum(),
        lambda a, b: (a.reshape(2, 10).T @ Tensor(np.ones((2, 1)))).sum(),
    ],
)
def test_gradients_match_finite_differences(grad_check, rng, op):
    a = Parameter(rng.normal(size=(4, 5)))
    b = Parameter(rng.normal(size=(5, 3)))
    assert grad_check(lambda: op(a, b), [a, b]) < 1e-6


def test_layer_norm_gradient(grad_check, rng):
    norm = LayerNorm(6)
    norm.gain.assign(rng.normal(size=6))
    x = Parameter(rng.normal(size=(3, 6)))
    weights = Tensor(rng.normal(size=(3, 6)))
    params = [x, *norm.parameters().values()]
    assert grad_check(lambda: (norm(x) * weights).sum(), params) < 1e-6


def test_linear_gradient_on_batched_input(grad_check, rng):
    layer = Linear(4, 3, rng)
    x = Tensor(rng.normal(size=(2, 5, 4)))
    target = Tensor(rng.normal(size=(2, 5, 3)))
    loss = lambda: ((layer(x) - target) ** 2).mean()  # noqa: E731
    assert grad_check(loss, list(layer.parameters().values())) < 1e-6


def test_debug_checks_raise_on_fresh_nan():
    with debug_checks(True), np.errstate(divide="ignore"):
        with pytest.raises(FloatingPointError):
            Tensor([0.0]).log()
    with np.errstate(divide="ignore"):
        assert np.isneginf(Tensor([0.0]).log().item())


def test_debug_checks_restore_previous_setting():
    with debug_checks(True):
        with debug_checks(False), np.errstate(divide="ignore"):
            Tensor([0.0]).log()
        with np.errstate(divide="ignore"), pytest.raises(FloatingPointError):
            Tensor([0.0]).log()


# -- optimisation --------------------------------------------------------


def test_adam_zero_gradient_keeps_parameters():
    state = AdamState(learning_rate=0.1)
    params = {"w": np.array([1.0, -2.0])}
    out = adam_step(state, params, {"w": np.zeros(2)})
    assert np.array_equal(out["w"], params["w"])


def test_adam_first_step_moves_by_learning_rate():
    state = AdamState(learning_rate=0.01)
    out = adam_step(state, {"w": np.array([1.0, 1.0])}, {"w": np.array([0.5, -3.0])})
    assert np.allclose(out["w"], [0.99, 1.01], atol=1e-8)
    assert state.step == 1


def test_adam_minimises_quadratic():
    w = Parameter([3.0])
    optimizer = Adam({"w": w}, learning_rate=0.1)
    for _ in range(200):
        optimizer.zero_grad()
        with Tape() as tape:
            loss = (w * w).sum()
        tape.backward(loss)
        optimizer.step()
    assert abs(w.item()) < 5e-2


def test_adam_rejects_mismatched_names():
    with pytest.raises(ShapeError):
        adam_step(AdamState(), {"a": np.zeros(1)}, {"b": np.zeros(1)})


def test_clip_grad_norm_scales_to_limit():
    a, b = Parameter([0.0, 0.0]), Parameter([0.0])
    a.grad, b.grad = np.array([3.0, 0.0]), np.array([4.0])
    total = clip_grad_norm({"a": a, "b": b}, 1.0)
    assert total == pytest.approx(5.0)
    assert np.allclose(a.grad, [0.6, 0.0]) and np.allclose(b.grad, [0.8])

    b.grad = np.array([0.1])
    a.grad = np.array([0.0, 0.0])
    clip_grad_norm({"a": a, "b": b}, 1.0)
    assert np.array_equal(b.grad, [0.1])


# -- parameter store -----------------------------------------------------


def test_store_round_trip_is_exact(tmp_path, rng):
    params = {"w": rng.normal(size=(3, 4)), "b": rng.normal(size=4).astype(np.float32)}
    path = tmp_path / "p.ckpt"
    save_parameters(path, params, {"model": "x", "seed": 7})
    loaded, meta = load_parameters(path)
    assert meta == {"model": "x", "seed": 7}
    assert read_metadata(path) == meta
    for name, value in params.items():
        assert loaded[name].dtype == value.dtype
        assert np.array_equal(loaded[name], value)


def test_store_rejects_missing_and_truncated(tmp_path, rng):
    with pytest.raises(CheckpointError, match="not found"):
        load_parameters(tmp_path / "missing.ckpt")

    path = tmp_path / "p.ckpt"
    save_parameters(path, {"w": rng.normal(size=(8, 8))}, {})
    raw = path.read_bytes()

    (tmp_path / "short.ckpt").write_bytes(raw[:4])
    with pytest.raises(CheckpointError, match="too short"):
        load_parameters(tmp_path / "short.ckpt")

    (tmp_path / "cut.ckpt").write_bytes(raw[:-16])
    with pytest.raises(CheckpointError, match="past end"):
        load_parameters(tmp_path / "cut.ckpt")

    corrupt = bytearray(raw)
    corrupt[8] = ord("#")
    (tmp_path / "bad.ckpt").write_bytes(bytes(corrupt))
    with pytest.raises(CheckpointError, match="corrupt"):
        load_parameters(tmp_path / "bad.ckpt")


def test_store_rejects_non_mapping_header_fields(tmp_path):
    for header in ('{"metadata": {}, "tensors": [1, 2]}', '{"metadata": 3, "tensors": {}}'):
        raw = header.encode("utf-8")
        path = tmp_path / "odd.ckpt"
        path.write_bytes(len(raw).to_bytes(8, "little") + raw)
        with pytest.raises(CheckpointError, match="corrupt checkpoint header"):
            load_parameters(path)
        with pytest.raises(CheckpointError, match="corrupt checkpoint header"):
            read_metadata(path)


def test_module_state_dict_round_trip(rng):
    layer = Linear(3, 2, rng)
    other = Linear(3, 2, np.random.default_rng(99))
    other.load_state_dict(layer.state_dict())
    assert np.array_equal(other.weight.numpy(), layer.weight.numpy())
    with pytest.raises(CheckpointError):
        other.load_state_dict({"weight": np.zeros((3, 2))})


def test_layer_norm_hand_row():
    out = layer_norm(Tensor([[1.0, 2.0, 3.0]]), Tensor(np.ones(3)), Tensor(np.zeros(3)), eps=1e-12)
    assert np.allclose(out.numpy(), [[-1.2247449, 0.0, 1.2247449]], atol=1e-6)


def test_adam_single_step_descends():
    out = adam_step(AdamState(learning_rate=0.1), {"w": np.array([1.0])}, {"w": np.array([2.0])})
    assert abs(out["w"][0]) < 1.0
