import math
import threading

import numpy as np
import pytest

from oracles import numeric_grad, rel_error
from shufflenas import tensor as T
from shufflenas.tensor import Parameter, Tape, Tensor, backward


def test_add_and_relu_examples():
    assert T.add(Tensor([1.0, 2.0]), Tensor([3.0, 4.0])).data.tolist() == [4.0, 6.0]
    assert T.relu(Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]


def test_elementwise_dispatch_and_errors():
    a, b = Tensor([1.0, -2.0]), Tensor([3.0, 4.0])
    assert T.elementwise("mul", a, b).data.tolist() == [3.0, -8.0]
    assert T.elementwise("scale", a, 2.0).data.tolist() == [2.0, -4.0]
    assert T.elementwise("relu", a).data.tolist() == [1.0, 0.0]
    with pytest.raises(ValueError, match=r"\(2,\).*\(3,\)"):
        T.add(a, Tensor([1.0, 2.0, 3.0]))
    with pytest.raises(ValueError):
        T.elementwise("pow", a, b)


def test_square_sum_gradient(f64):
    x = Tensor([3.0], requires_grad=True)
    backward(T.sum_all(T.mul(x, x)))
    arr = np.array([3.0])
    (num,) = numeric_grad(lambda: float((arr * arr).sum()), [arr])
    assert x.grad[0] == pytest.approx(6.0)
    assert num[0] == pytest.approx(6.0, rel=1e-8)


def test_matmul_examples():
    eye = Tensor([[1.0, 0.0], [0.0, 1.0]])
    m = Tensor([[5.0, 6.0], [7.0, 8.0]])
    assert T.matmul(eye, m).data.tolist() == [[5.0, 6.0], [7.0, 8.0]]
    assert T.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]
    with pytest.raises(ValueError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_grad_is_row_sums_of_b(f64, rng):
    a = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    b = rng.standard_normal((4, 5))
    backward(T.sum_all(T.matmul(a, Tensor(b))))
    expected = np.broadcast_to(b.sum(axis=1), (3, 4))
    np.testing.assert_allclose(a.grad, expected, rtol=1e-12)


def test_cross_entropy_examples(f64):
    loss = T.softmax_cross_entropy(Tensor(np.zeros((1, 10))), [3])
    assert float(loss.data) == pytest.approx(math.log(10), abs=1e-12)
    loss = T.softmax_cross_entropy(Tensor([[10.0, -10.0]]), [0])
    assert float(loss.data) == pytest.approx(math.log1p(math.exp(-20)), rel=1e-6)
    assert float(loss.data) == pytest.approx(2.06e-9, rel=1e-2)


def test_cross_entropy_gradient_is_softmax_minus_onehot(f64, rng):
    logits = Tensor(rng.standard_normal((4, 10)), requires_grad=True)
    labels = [1, 0, 9, 3]
    backward(T.softmax_cross_entropy(logits, labels))
    p = np.exp(logits.data) / np.exp(logits.data).sum(axis=1, keepdims=True)
    p[np.arange(4), labels] -= 1
    np.testing.assert_allclose(logits.grad, p / 4, rtol=1e-10, atol=1e-14)


def test_cross_entropy_rejects_bad_labels():
    with pytest.raises(ValueError):
        T.softmax_cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])
    with pytest.raises(ValueError):
        T.softmax_cross_entropy(Tensor(np.zeros((2, 3))), [0, -1])


def test_backward_linear_and_constant():
    p = Parameter(np.zeros(3), "p")
    q = Parameter(np.ones(2), "q")
    grads = backward(T.sum_all(p))
    assert p.grad.tolist() == [1.0, 1.0, 1.0]
    assert q.grad is None and q not in grads


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        backward(T.relu(x))


def test_two_layer_composition_matches_differences(f64, rng):
    w1 = rng.standard_normal((4, 5))
    w2 = rng.standard_normal((5, 2))
    x = rng.standard_normal((3, 4))

    def loss_of(a, b):
        return T.sum_all(T.tanh(T.matmul(T.tanh(T.matmul(Tensor(x), a)), b)))

    p1, p2 = Tensor(w1.copy(), requires_grad=True), Tensor(w2.copy(), requires_grad=True)
    backward(loss_of(p1, p2))
    num = numeric_grad(lambda: float(loss_of(Tensor(w1), Tensor(w2)).data), [w1, w2])
    assert rel_error(p1.grad, num[0]) < 1e-8
    assert rel_error(p2.grad, num[1]) < 1e-8


def test_backward_is_linear_in_the_loss(f64, rng):
    data = rng.standard_normal((3, 3))

    def grad_of(build):
        x = Tensor(data, requires_grad=True)
        backward(build(x))
        return x.grad

    g1 = grad_of(lambda x: T.sum_all(T.tanh(x)))
    g2 = grad_of(lambda x: T.sum_all(T.mul(x, x)))
    g12 = grad_of(lambda x: T.add(T.sum_all(T.tanh(x)), T.sum_all(T.mul(x, x))))
    np.testing.assert_allclose(g12, g1 + g2, rtol=1e-12)


def test_tape_is_topological(rng):
    x = Tensor(rng.standard_normal((2, 2)), requires_grad=True)
    y = T.relu(T.add(T.mul(x, x), x))
    loss = T.sum_all(T.matmul(y, y))
    tape = Tape.from_root(loss)
    seen = set()
    for node in tape:
        for parent in node.parents:
            if parent.parents:
                assert id(parent) in seen
        seen.add(id(node))
    assert tape.nodes[-1] is loss


def test_replay_is_bit_identical(rng):
    data = rng.standard_normal((4, 4)).astype(np.float32)

    def run():
        x = Tensor(data, requires_grad=True)
        loss = T.sum_all(T.sigmoid(T.matmul(x, x)))
        backward(loss)
        return loss.data.copy(), x.grad.copy()

    a, b = run(), run()
    assert a[0].tobytes() == b[0].tobytes() and a[1].tobytes() == b[1].tobytes()


def test_no_grad_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    with T.no_grad():
        y = T.mul(x, x)
    assert not y.requires_grad and y.parents == ()


def test_outputs_finite_on_extreme_inputs(f64):
    x = Tensor(np.array([-800.0, 0.0, 800.0]), requires_grad=True)
    for fn in (T.sigmoid, T.tanh):
        y = fn(x)
        assert np.all(np.isfinite(y.data))
    ls = T.log_softmax(Tensor(np.array([[1000.0, -1000.0, 0.0]])))
    assert np.all(np.isfinite(ls.data))


def test_default_dtype_and_thread_isolation():
    assert T.get_default_dtype() == np.float32
    assert Tensor([1.0]).dtype == np.float32
    seen = {}

    def worker():
        seen["dtype"] = T.get_default_dtype()

    with T.default_dtype(np.float64):
        assert Tensor([1.0]).dtype == np.float64
        t = threading.Thread(target=worker)
        t.start()
        t.join()
    assert seen["dtype"] == np.float32
    assert T.get_default_dtype() == np.float32


def test_parameter_shape_frozen_and_update_count():
    p = Parameter(np.zeros((2, 3)), "layer0/w")
    p.assign(np.ones((2, 3)))
    assert p.update_count == 1
    with pytest.raises(ValueError):
        p.assign(np.ones((3, 2)))


def test_checkpoint_round_trip_is_bit_exact(tmp_path, rng):
    arrays = {
        "a/w": rng.standard_normal((3, 4)).astype(np.float32),
        "b": rng.standard_normal(5),
        "ints": np.arange(6, dtype=np.int64).reshape(2, 3),
        "bytes": np.frombuffer(b"hello", dtype=np.uint8),
        "scalar": np.array(2.5),
    }
    path = tmp_path / "c.bin"
    T.save_arrays(path, arrays)
    back = T.load_arrays(path)
    assert list(back) == list(arrays)
    for k, v in arrays.items():
        assert back[k].dtype == v.dtype and back[k].shape == v.shape
        assert back[k].tobytes() == v.tobytes()


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"NOTACKPT" + b"\0" * 8)
    with pytest.raises(ValueError):
        T.load_arrays(path)
    T.save_arrays(path, {"x": np.ones(4)})
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(ValueError):
        T.load_arrays(path)
