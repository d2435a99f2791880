import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dhlight import nn
from dhlight.errors import DimensionError, NumericError, TapeError


def test_dense_zero_input_passes_bias_through():
    x = nn.Tensor([0.0, 0.0])
    w = nn.Tensor([[3.0, -1.0], [2.0, 5.0]])
    b = nn.Tensor([1.0, 2.0])
    assert np.array_equal(nn.dense(x, w, b).data, [1.0, 2.0])


def test_dense_identity():
    x = nn.Tensor([1.0, 0.0])
    out = nn.dense(x, nn.Tensor(np.eye(2)), nn.Tensor([0.0, 0.0]))
    assert np.array_equal(out.data, [1.0, 0.0])


def test_dense_hand_expansion():
    out = nn.dense(nn.Tensor([1.0, 2.0]), nn.Tensor([[1.0, 1.0], [1.0, 1.0]]), nn.Tensor([0.0, 0.0]))
    assert np.array_equal(out.data, [3.0, 3.0])


def test_dense_shape_mismatch_names_both_operands():
    with pytest.raises(DimensionError, match=r"\(3,\).*\(2, 2\)"):
        nn.dense(nn.Tensor([1.0, 2.0, 3.0]), nn.Tensor(np.eye(2)), nn.Tensor([0.0, 0.0]))


@pytest.mark.parametrize("c", [-4.0, 0.0, 1.5, 300.0])
def test_softmax_symmetry(c):
    out = nn.softmax(nn.Tensor([c, c]))
    assert np.allclose(out.data, [0.5, 0.5], atol=1e-15)


def test_softmax_singleton():
    assert nn.softmax(nn.Tensor([0.0])).data[0] == 1.0


def test_softmax_closed_form_ratio():
    out = nn.softmax(nn.Tensor([math.log(1.0), math.log(3.0)]))
    assert np.allclose(out.data, [0.25, 0.75], atol=1e-14)


def test_softmax_rejects_non_finite():
    with pytest.raises(NumericError):
        nn.softmax(nn.Tensor([np.nan, 0.0]))
    with pytest.raises(NumericError):
        nn.softmax(nn.Tensor([np.inf, 0.0]))


@given(st.lists(st.floats(min_value=-300, max_value=300), min_size=1, max_size=12),
       st.floats(min_value=-100, max_value=100))
def test_softmax_sums_to_one_and_shift_invariant(values, shift):
    base = nn.softmax(nn.Tensor(values)).data
    shifted = nn.softmax(nn.Tensor(np.asarray(values) + shift)).data
    assert abs(base.sum() - 1.0) <= 1e-12
    assert np.all(np.abs(base - shifted) <= 1e-12)
    # order preserving
    assert np.array_equal(np.argsort(values, kind="stable"), np.argsort(base, kind="stable"))


def test_backward_identity_loss():
    store = nn.ParameterStore(seed=0)
    w = store.constant("w", 3.0)
    with nn.GradientTape() as tape:
        loss = w * 1.0
    tape.backward(loss)
    assert w.grad == 1.0


def test_backward_square():
    store = nn.ParameterStore(seed=0)
    w = store.constant("w", 3.0)
    with nn.GradientTape() as tape:
        loss = w * w
    tape.backward(loss)
    assert w.grad == 6.0


def test_backward_fanout_sums_exactly():
    store = nn.ParameterStore(seed=0)
    w = store.constant("w", 1.7)
    with nn.GradientTape() as tape:
        loss = w + w
    tape.backward(loss)
    assert w.grad == 2.0


def test_backward_requires_traced_loss():
    tape = nn.GradientTape()
    with pytest.raises(TapeError):
        tape.backward(nn.Tensor(1.0))


def test_backward_mlp_matches_finite_differences():
    store = nn.ParameterStore(seed=42)
    w1 = store.matrix("w1", 5, 7)
    b1 = store.zeros("b1", 7)
    w2 = store.matrix("w2", 7, 6)
    b2 = store.zeros("b2", 6)
    w3 = store.matrix("w3", 6, 1)
    b3 = store.zeros("b3", 1)
    rng = np.random.default_rng(7)
    x = nn.Tensor(rng.normal(size=(4, 5)))
    target = nn.Tensor(rng.normal(size=(4, 1)))

    def loss_fn():
        h1 = nn.relu(nn.dense(x, w1, b1))
        h2 = nn.relu(nn.dense(h1, w2, b2))
        return nn.mse(nn.dense(h2, w3, b3), target)

    assert nn.finite_diff_check(loss_fn, store, step=1e-5) <= 1e-4


def test_finite_diff_exact_for_linear_loss():
    store = nn.ParameterStore(seed=1)
    w = store.constant("w", np.array([1.0, -2.0, 0.5]))

    def loss_fn():
        return (w * nn.Tensor([2.0, 3.0, -1.0])).sum()

    assert nn.finite_diff_check(loss_fn, store, step=1e-5) <= 1e-9


def test_adam_zero_gradient_leaves_parameter_unchanged():
    store = nn.ParameterStore(seed=0)
    w = store.constant("w", np.array([1.0, 2.0]))
    store.adam_step(lr=0.1)
    assert np.array_equal(w.data, [1.0, 2.0])
    assert store.step_count == 1


def test_adam_first_step_magnitude_is_lr():
    store = nn.ParameterStore(seed=0)
    w = store.constant("w", np.array([1.0, -1.0]))
    w.grad[...] = np.array([0.5, -2.0])
    store.adam_step(lr=0.01)
    # bias-corrected first step moves by ~lr opposite the gradient sign
    delta = w.data - np.array([1.0, -1.0])
    assert np.allclose(delta, [-0.01, 0.01], rtol=1e-6)


def test_adam_two_steps_reduce_quadratic():
    store = nn.ParameterStore(seed=0)
    w = store.constant("w", 5.0)

    def loss_value():
        return float(w.data) ** 2

    before = loss_value()
    for _ in range(2):
        with nn.GradientTape() as tape:
            loss = w * w
        tape.backward(loss)
        store.adam_step(lr=0.05)
        store.zero_grads()
    assert loss_value() < before
    assert store.step_count == 2


def test_zero_grads_zeroes_every_buffer():
    store = nn.ParameterStore(seed=3)
    store.matrix("a", 3, 4)
    store.matrix("b", 2, 2)
    for p in store.parameters():
        p.grad[...] = 1.0
    store.zero_grads()
    assert all(np.all(p.grad == 0.0) for p in store.parameters())


def test_duplicate_parameter_name_rejected():
    store = nn.ParameterStore(seed=0)
    store.zeros("w", (2,))
    with pytest.raises(ValueError):
        store.zeros("w", (2,))


def test_gather_take_scatter_roundtrip_grads():
    store = nn.ParameterStore(seed=5)
    p = store.constant("p", np.arange(6.0).reshape(2, 3))
    with nn.GradientTape() as tape:
        picked = nn.take_at(p, [0, 1, 1], [2, 0, 0])
        loss = picked.sum()
    tape.backward(loss)
    expected = np.array([[0.0, 0.0, 1.0], [2.0, 0.0, 0.0]])
    assert np.array_equal(p.grad, expected)

    store.zero_grads()
    with nn.GradientTape() as tape:
        vals = nn.take_at(p, [0, 1], [0, 1])
        m = nn.scatter_at(vals, [3, 0], [1, 0], (4, 2), base=np.ones((4, 2)))
        loss = (m * nn.Tensor(np.full((4, 2), 2.0))).sum()
    tape.backward(loss)
    assert m.data[3, 1] == 1.0  # base 1 + value 0
    assert p.grad[0, 0] == 2.0 and p.grad[1, 1] == 2.0


def test_concat_and_minimum_grads():
    store = nn.ParameterStore(seed=6)
    a = store.constant("a", np.array([1.0, 5.0]))
    b = store.constant("b", np.array([2.0, 3.0]))
    with nn.GradientTape() as tape:
        both = nn.concat([a.reshape(1, 2), b.reshape(1, 2)], axis=0)
        loss = nn.minimum(both, nn.Tensor(np.full((2, 2), 4.0))).sum()
    tape.backward(loss)
    assert np.array_equal(a.grad, [1.0, 0.0])  # 5.0 clipped by the min
    assert np.array_equal(b.grad, [1.0, 1.0])


def test_mac_counter_counts_matmul():
    with nn.MacCounter() as macs:
        nn.matmul(nn.Tensor(np.ones((3, 4))), nn.Tensor(np.ones((4, 5))))
    assert macs.total == 3 * 4 * 5


def test_snapshot_is_independent_copy():
    store = nn.ParameterStore(seed=9)
    w = store.matrix("w", 2, 2)
    snap = store.snapshot()
    w.data[...] = 0.0
    assert not np.array_equal(snap["w"].data, w.data)


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    store = nn.ParameterStore(seed=11)
    store.matrix("enc/w", 4, 3)
    store.uniform("coef", (2, 5), 0.0, 1.0)
    for p in store.parameters():
        p.grad[...] = 1.0
    store.adam_step(lr=0.003)
    other = nn.ParameterStore(seed=12)
    other.matrix("head", 3, 1)

    path = tmp_path / "model.ckpt"
    nn.save_checkpoint(path, {"actor": store, "critic": other})
    loaded = nn.load_checkpoint(path)

    assert set(loaded) == {"actor", "critic"}
    assert loaded["actor"].step_count == 1
    for name in store.names():
        orig, back = store[name], loaded["actor"][name]
        assert orig.data.tobytes() == back.data.tobytes()
        assert orig.m.tobytes() == back.m.tobytes()
        assert orig.v.tobytes() == back.v.tobytes()


def test_checkpoint_rejects_foreign_file(tmp_path):
    path = tmp_path / "junk.bin"
    path.write_bytes(b"not a checkpoint")
    with pytest.raises(ValueError):
        nn.load_checkpoint(path)


@settings(max_examples=30)
@given(st.integers(min_value=0, max_value=2 ** 32 - 1))
def test_backward_random_graph_matches_fd(seed):
    rng = np.random.default_rng(seed)
    store = nn.ParameterStore(seed=seed)
    w = store.constant("w", rng.normal(size=(3, 3)))
    x = nn.Tensor(rng.normal(size=(2, 3)))

    def loss_fn():
        h = nn.matmul(x, w)
        return (nn.softmax(h, axis=1) * nn.Tensor(rng2_target)).sum()

    rng2_target = rng.normal(size=(2, 3))
    assert nn.finite_diff_check(loss_fn, store, step=1e-6) <= 1e-4
