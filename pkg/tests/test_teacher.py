import math

import numpy as np
import pytest

from candistill.canio import CanFrame, EncodedDataset, split_dataset, tokenize
from candistill.errors import ConfigError, DatasetError
from candistill.evaluation import detect
from candistill.numerics import Tensor, cross_entropy
from candistill.teacher import (
    MASK_PENALTY,
    TeacherConfig,
    TeacherModel,
    attention,
    block_forward,
    build_teacher,
    embed,
    positional_encoding,
    scaled_dot_product,
    teacher_forward,
    train_teacher,
)

from .conftest import make_frames


def small_config(**overrides):
    values = dict(layers=1, d_model=8, n_heads=2, d_ff=16, max_length=16, dtype="float64")
    values.update(overrides)
    return TeacherConfig(**values)


def np_layer_norm(x, gain, bias, eps):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gain + bias


def np_softmax(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def np_block(block, x, mask, residual):
    """Straight numpy evaluation of one block on a single (length, d) sequence"""
    heads = []
    for head in block.attention.heads:
        q, k, v = x @ head.w_q.data, x @ head.w_k.data, x @ head.w_v.data
        scores = q @ k.T / math.sqrt(q.shape[-1]) + np.where(mask, 0.0, MASK_PENALTY)[None, :]
        heads.append(np_softmax(scores) @ v)
    out = block.attention.output
    g = np.concatenate(heads, axis=-1) @ out.weight.data + out.bias.data
    n1, n2 = block.norm1, block.norm2
    norm1 = np_layer_norm(x + g, n1.gain.data, n1.bias.data, n1._eps)
    m = g + norm1 if residual == "stacked" else norm1
    ff = block.feed_forward
    hidden = np.maximum(m @ ff.inner.weight.data + ff.inner.bias.data, 0.0)
    z = hidden @ ff.outer.weight.data + ff.outer.bias.data
    norm2 = np_layer_norm(m + z, n2.gain.data, n2.bias.data, n2._eps)
    return z + norm2 if residual == "stacked" else norm2


def zero_frame_sequence():
    return tokenize(CanFrame(0.0, 0x123, 2, (7, 9, 0, 0, 0, 0, 0, 0)))


def test_embedding_with_zero_weights_is_positional_table():
    model = build_teacher(small_config())
    model.embedding.weight.assign(np.zeros_like(model.embedding.weight.data))
    out = embed(model, zero_frame_sequence()).numpy()
    assert np.array_equal(out, positional_encoding(16, 8))


@pytest.mark.parametrize("max_length, d_model", [(16, 8), (16, 64), (128, 2)])
def test_positional_rows_are_pairwise_distinct(max_length, d_model):
    table = positional_encoding(max_length, d_model)
    distances = np.linalg.norm(table[:, None, :] - table[None, :, :], axis=-1)
    off_diagonal = distances[~np.eye(max_length, dtype=bool)]
    assert off_diagonal.min() > 1e-3


def test_embedding_locality():
    model = build_teacher(small_config())
    a = tokenize(CanFrame(0.0, 0x123, 8, (1, 2, 3, 4, 5, 6, 7, 8)))
    b = tokenize(CanFrame(0.0, 0x123, 8, (1, 2, 3, 4, 5, 6, 7, 9)))
    rows = np.flatnonzero(np.any(embed(model, a).numpy() != embed(model, b).numpy(), axis=1))
    assert rows.tolist() == [10]


def test_scaled_dot_product_matches_loops(rng):
    q, k, v = (rng.normal(size=(1, 5, 4)) for _ in range(3))
    out, weights = scaled_dot_product(Tensor(q), Tensor(k), Tensor(v))
    expected = np.zeros((5, 4))
    for i in range(5):
        scores = np.array([sum(q[0, i, c] * k[0, j, c] for c in range(4)) / 2.0 for j in range(5)])
        w = np.exp(scores - scores.max())
        w /= w.sum()
        for j in range(5):
            expected[i] += w[j] * v[0, j]
    assert np.allclose(out.numpy()[0], expected, atol=1e-12)
    assert np.allclose(weights.numpy().sum(axis=-1), 1.0)


def test_scaling_uses_head_width(rng):
    q = rng.normal(size=(1, 3, 4))
    k = rng.normal(size=(1, 3, 4))
    v = np.eye(3)[None]
    _, narrow = scaled_dot_product(Tensor(q), Tensor(k), Tensor(v))
    doubled_q, doubled_k = np.concatenate([q, q], -1), np.concatenate([k, k], -1)
    _, wide = scaled_dot_product(Tensor(doubled_q), Tensor(doubled_k), Tensor(v))
    scaled = q[0] @ k[0].T / 2.0
    assert np.allclose(narrow.numpy()[0], np_softmax(scaled), atol=1e-12)
    assert np.allclose(wide.numpy()[0], np_softmax(math.sqrt(2) * scaled), atol=1e-12)


def test_attention_single_position():
    model = build_teacher(small_config())
    head = model.blocks[0].attention.heads[0]
    x = Tensor(np.arange(8.0).reshape(1, 8) / 8)
    out, weights = attention(head, x)
    assert np.array_equal(weights.numpy(), [[1.0]])
    assert np.allclose(out.numpy(), x.numpy() @ head.w_v.data)


def test_identical_keys_give_uniform_weights(rng):
    model = build_teacher(small_config())
    head = model.blocks[0].attention.heads[0]
    head.w_k.assign(np.zeros_like(head.w_k.data))
    x = Tensor(rng.normal(size=(4, 8)))
    _, weights = attention(head, x, mask=[True, True, True, False])
    expected = np.tile([1 / 3, 1 / 3, 1 / 3, 0.0], (4, 1))
    assert np.allclose(weights.numpy(), expected, atol=1e-12)


@pytest.mark.parametrize("residual", ["stacked", "post_norm"])
def test_block_matches_reference(rng, residual):
    model = build_teacher(small_config(residual=residual), seed=4)
    block = model.blocks[0]
    block.norm1.gain.assign(rng.normal(size=8))
    block.norm2.bias.assign(rng.normal(size=8))
    x = rng.normal(size=(5, 8))
    mask = np.array([True, True, True, True, False])
    out = block_forward(block, Tensor(x), mask).numpy()
    assert np.allclose(out, np_block(block, x, mask, residual), atol=1e-10)


def test_block_with_silent_sublayers_is_stacked_norms(rng):
    model = build_teacher(small_config())
    block = model.blocks[0]
    for param in (
        block.attention.output.weight,
        block.attention.output.bias,
        block.feed_forward.outer.weight,
        block.feed_forward.outer.bias,
    ):
        param.assign(np.zeros_like(param.data))
    x = np.array([[1.0, 0.0, 2.0, 0.0, 3.0, 0.0, 4.0, 0.0], [0.5, 0.5, -0.5, -0.5, 1.0, -1.0, 2.0, -2.0]])
    out = block_forward(block, Tensor(x)).numpy()
    ones, zeros, eps = np.ones(8), np.zeros(8), block.norm1._eps
    expected = np_layer_norm(np_layer_norm(x, ones, zeros, eps), ones, zeros, eps)
    assert np.allclose(out, expected, atol=1e-12)


def test_padding_tokens_do_not_change_logits():
    model = build_teacher(small_config(layers=2))
    sequence = zero_frame_sequence()
    tokens = np.array([sequence.tokens])
    mask = np.array([sequence.attention_mask])
    altered = tokens.copy()
    altered[0, 12:] = [5, 600, 2000, 17]
    assert np.allclose(model(tokens, mask).numpy(), model(altered, mask).numpy(), rtol=0, atol=1e-12)


def test_single_sequence_matches_batch():
    model = build_teacher(small_config(layers=2))
    dataset = EncodedDataset.from_frames(make_frames(6, 2))
    batch = model.batch_logits(dataset, np.arange(len(dataset))).numpy()
    for i in range(len(dataset)):
        one = teacher_forward(model, dataset[i][1]).numpy()
        assert np.allclose(one, batch[i], atol=1e-12)


def test_untrained_logits_are_finite():
    model = build_teacher(TeacherConfig())
    dataset = EncodedDataset.from_frames(make_frames(20, 20))
    logits = model.batch_logits(dataset, np.arange(40)).numpy()
    assert logits.shape == (40, 2)
    assert np.all(np.isfinite(logits))


@pytest.mark.parametrize("residual", ["stacked", "post_norm"])
def test_teacher_gradients(grad_check, rng, residual):
    config = small_config(d_model=4, d_ff=6, max_length=4, vocab_size=10, residual=residual)
    model = TeacherModel(config, rng)
    tokens = np.array([[1, 4, 7, 0], [1, 3, 3, 2], [1, 9, 0, 0]])
    mask = tokens != 0
    labels = np.array([0, 1, 1])
    loss = lambda: cross_entropy(model(tokens, mask), labels)  # noqa: E731
    assert grad_check(loss, list(model.parameters().values())) < 1e-5


def test_d_model_must_divide_heads():
    with pytest.raises(ConfigError, match="divisible"):
        TeacherConfig(d_model=10, n_heads=4).validate()


def test_single_class_training_set_is_rejected():
    split = split_dataset(make_frames(20, 0), 0.7, 0)
    with pytest.raises(DatasetError):
        train_teacher(split, small_config(epochs=1))


def test_zero_epochs_returns_initial_model(separable_split):
    config = small_config(epochs=0)
    model, history = train_teacher(separable_split, config, seed=3)
    initial = build_teacher(config, seed=3).state_dict()
    assert history.epochs == []
    for name, value in model.state_dict().items():
        assert np.array_equal(value, initial[name])


def test_training_is_deterministic(separable_split):
    config = small_config(epochs=1, batch_size=32)
    a, _ = train_teacher(separable_split, config, seed=5)
    b, _ = train_teacher(separable_split, config, seed=5)
    for name, value in a.state_dict().items():
        assert np.array_equal(value, b.state_dict()[name])


def test_learns_separable_identifiers(separable_split):
    config = small_config(d_model=16, d_ff=32, epochs=3, batch_size=8, learning_rate=1e-2)
    config.min_improvement = None
    model, history = train_teacher(separable_split, config, seed=0)
    train = separable_split.train
    assert len(history.epochs) == 3
    assert np.array_equal(detect(model, train), train.labels)
    assert history.losses[-1] < history.losses[0]
