import numpy as np
import pytest

from oracles import (
    conv1_params,
    factorized_params,
    naive_conv2d,
    naive_depthwise,
    naive_pool,
    sep_params,
    shuffle_by_loops,
)
from shufflenas import ops
from shufflenas.ops import OperationId, Registry
from shufflenas.tensor import Tensor


def reg64(seed=0):
    return Registry(np.random.default_rng(seed), dtype=np.float64)


def test_operation_codes_are_stable():
    assert [op.name for op in OperationId] == ["SEP3", "SEP5", "MAXPOOL3", "MINPOOL3", "IDENTITY", "CONV1"]
    assert [int(op) for op in OperationId] == list(range(6))


@pytest.mark.parametrize("stride", [1, 2])
@pytest.mark.parametrize("k", [1, 3, 5])
def test_conv2d_matches_loop_oracle(f64, rng, stride, k):
    x = rng.standard_normal((2, 3, 7, 6))
    w = rng.standard_normal((4, 3, k, k))
    out = ops.conv2d(Tensor(x), Tensor(w), stride).data
    np.testing.assert_allclose(out, naive_conv2d(x, w, stride), rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("stride", [1, 2])
@pytest.mark.parametrize("k", [3, 5])
def test_depthwise_matches_loop_oracle(f64, rng, stride, k):
    x = rng.standard_normal((2, 3, 6, 7))
    w = rng.standard_normal((3, 1, k, k))
    np.testing.assert_allclose(ops.depthwise_conv2d(Tensor(x), Tensor(w), stride).data,
                               naive_depthwise(x, w, stride), rtol=1e-12, atol=1e-12)


def test_conv_examples(f64, rng):
    x = rng.standard_normal((1, 4, 5, 5))
    eye = np.eye(4)[:, :, None, None]
    assert np.array_equal(ops.conv2d(Tensor(x), Tensor(eye)).data, x)
    out = ops.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3)))).data[0, 0]
    assert out[1, 1] == 9 and out[0, 0] == out[0, 2] == out[2, 0] == out[2, 2] == 4
    assert ops.conv2d(Tensor(np.ones((1, 1, 32, 32))), Tensor(np.ones((1, 1, 3, 3))), 2).shape == (1, 1, 16, 16)
    with pytest.raises(ValueError):
        ops.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 1, 1))))


@pytest.mark.parametrize("stride", [1, 2])
@pytest.mark.parametrize("kind", ["max", "min", "avg"])
def test_pools_match_loop_oracle(f64, rng, stride, kind):
    x = rng.standard_normal((2, 2, 5, 6))
    fn = {"max": ops.max_pool3, "min": ops.min_pool3, "avg": ops.avg_pool3}[kind]
    np.testing.assert_allclose(fn(Tensor(x), stride).data, naive_pool(x, stride, kind), rtol=1e-12)


def test_min_pool_of_constant_image_is_constant(f64):
    x = Tensor(np.full((1, 2, 5, 5), 3.5))
    assert np.all(ops.min_pool3(x).data == 3.5)
    assert np.all(ops.max_pool3(Tensor(np.full((1, 1, 4, 4), -2.0)), 2).data == -2.0)


def test_identity_passes_through_bit_identical(rng):
    x = Tensor(rng.standard_normal((2, 4, 5, 5)).astype(np.float32))
    assert ops.apply_candidate_op(OperationId.IDENTITY, x, 1) is x


def test_unknown_op_and_stride_rejected():
    x = Tensor(np.zeros((1, 2, 4, 4)))
    with pytest.raises(ValueError):
        ops.apply_candidate_op(6, x, 1)
    with pytest.raises(ValueError):
        ops.apply_candidate_op(OperationId.MAXPOOL3, x, 3)


@pytest.mark.parametrize("C", [2, 4, 6, 16, 64, 128])
@pytest.mark.parametrize("op", list(OperationId))
@pytest.mark.parametrize("stride", [1, 2])
def test_candidate_ops_preserve_channels(rng, C, op, stride):
    reg = Registry(np.random.default_rng(0))
    module = ops.make_candidate(reg, "k", op, C, reducing=stride == 2)
    x = Tensor(rng.standard_normal((1, C, 5, 5)).astype(np.float32))
    y = ops.apply_candidate_op(op, x, stride, module)
    assert y.shape == (1, C, 3 if stride == 2 else 5, 3 if stride == 2 else 5)


@pytest.mark.parametrize("C", [1, 4, 7, 32])
def test_op_parameter_counts_closed_form(C):
    for op, expected in [(OperationId.SEP3, sep_params(C, 3)), (OperationId.SEP5, sep_params(C, 5)),
                         (OperationId.CONV1, conv1_params(C)), (OperationId.MAXPOOL3, 0),
                         (OperationId.MINPOOL3, 0), (OperationId.IDENTITY, 0)]:
        reg = Registry(np.random.default_rng(0))
        ops.make_candidate(reg, "k", op, C)
        assert reg.count() == expected
    assert sep_params(4, 3) == 120
    assert ops.sep_conv_params(C, 3) == sep_params(C, 3)


def test_channel_split_and_concat():
    x = Tensor(np.arange(4.0).reshape(1, 4, 1, 1))
    a, b = ops.channel_split(x)
    assert a.data.ravel().tolist() == [0, 1] and b.data.ravel().tolist() == [2, 3]
    assert ops.channel_concat([a, b]).data.tobytes() == x.data.tobytes()
    with pytest.raises(ValueError):
        ops.channel_split(Tensor(np.zeros((1, 3, 1, 1))))


def test_split_concat_inverse_bit_exact(rng):
    x = Tensor(rng.standard_normal((2, 10, 3, 3)).astype(np.float32))
    halves = ops.channel_split(x)
    assert ops.channel_concat(halves).data.tobytes() == x.data.tobytes()
    again = ops.channel_split(ops.channel_concat(halves))
    assert all(u.data.tobytes() == v.data.tobytes() for u, v in zip(again, halves))


def test_shuffle_fixtures():
    assert ops.shuffle_permutation(6).tolist() == [0, 3, 1, 4, 2, 5]
    assert ops.shuffle_permutation(4).tolist() == [0, 2, 1, 3]
    x = Tensor(np.arange(4.0).reshape(1, 4, 1, 1))
    once = ops.channel_shuffle(x)
    assert once.data.ravel().tolist() == [0, 2, 1, 3]
    assert ops.channel_shuffle(once).data.tobytes() == x.data.tobytes()
    with pytest.raises(ValueError):
        ops.shuffle_permutation(5)


@pytest.mark.parametrize("C", range(4, 65, 2))
def test_shuffle_is_a_bijection_with_finite_order(C):
    perm = ops.shuffle_permutation(C)
    assert perm.tolist() == shuffle_by_loops(C)
    assert sorted(perm.tolist()) == list(range(C))
    cur = np.arange(C)
    for _ in range(C):
        cur = cur[perm]
        if np.array_equal(cur, np.arange(C)):
            break
    else:
        pytest.fail("shuffle permutation never returned to identity")


def test_factorized_reduction_shape_params_and_sampling(f64, rng):
    reg = reg64()
    m = ops.FactorizedReduction(reg, "fr", 8, 8)
    assert reg.count() == 80 == factorized_params(8, 8)
    x = rng.standard_normal((1, 8, 4, 4))
    assert m(Tensor(x), False).shape == (1, 8, 2, 2)
    # select channel 0 in the first path and channel 1 in the second; BN is identity in eval at init
    m.w1.data[...] = 0
    m.w2.data[...] = 0
    m.w1.data[:, 0] = 1.0 / 4
    m.w2.data[:, 1] = 1.0 / 4
    out = m(Tensor(x), False).data
    eps_scale = 1 / np.sqrt(1 + ops.BN_EPS)
    np.testing.assert_allclose(out[0, 0], x[0, 0, 0::2, 0::2] / 4 * eps_scale, rtol=1e-12)
    np.testing.assert_allclose(out[0, 4], x[0, 1, 1::2, 1::2] / 4 * eps_scale, rtol=1e-12)
    with pytest.raises(ValueError):
        ops.FactorizedReduction(reg64(), "odd", 8, 7)


def test_drop_path_contract(rng):
    outs = [Tensor(np.ones((2, 3), dtype=np.float32)) for _ in range(3)]
    assert ops.drop_path(outs, 1.0, True, rng) == outs
    assert ops.drop_path(outs, 0.3, False, rng) == outs
    for bad in (0.0, -0.1, 1.5):
        with pytest.raises(ValueError):
            ops.drop_path(outs, bad, True, rng)


def test_drop_path_keep_frequency_and_scaling():
    rng = np.random.default_rng(5)
    keep, draws, kept = 0.7, 10000, 0
    outs = [Tensor(np.ones(1)) for _ in range(4)]
    for _ in range(draws // 4):
        res = ops.drop_path(outs, keep, True, rng)
        values = [float(r.data[0]) for r in res]
        assert all(v in (0.0, pytest.approx(1 / keep)) for v in values)
        kept += sum(v > 0 for v in values)
    assert abs(kept / draws - keep) < 0.02


def test_drop_path_never_drops_everything():
    rng = np.random.default_rng(0)
    outs = [Tensor(np.ones(1)) for _ in range(2)]
    for _ in range(500):
        res = ops.drop_path(outs, 0.05, True, rng)
        assert sum(float(r.data[0]) > 0 for r in res) >= 1


def test_batch_norm_examples(f64, rng):
    state = reg64().batch_norm("bn", 3)
    x = rng.standard_normal((8, 3, 4, 4))
    x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
    np.testing.assert_allclose(ops.batch_norm(Tensor(x), state, True).data, x, atol=1e-4)
    state.bias.data[...] = [0.5, -1.0, 2.0]
    const = ops.batch_norm(Tensor(np.full((4, 3, 2, 2), 7.0)), state, True).data
    np.testing.assert_allclose(const, np.broadcast_to(np.array([0.5, -1.0, 2.0])[None, :, None, None], const.shape))


def test_batch_norm_training_moments_and_buffers(f64, rng):
    state = reg64().batch_norm("bn", 4)
    x = 3 + 2 * rng.standard_normal((16, 4, 5, 5))
    y = ops.batch_norm(Tensor(x), state, True).data
    assert np.all(np.abs(y.mean(axis=(0, 2, 3))) < 1e-5)
    assert np.all(np.abs(y.var(axis=(0, 2, 3)) - 1) < 1e-3)
    assert np.all(state.running_var >= 0) and state.running_mean.shape == (4,)
    np.testing.assert_allclose(state.running_mean, 0.1 * x.mean(axis=(0, 2, 3)))
    with pytest.raises(ValueError):
        ops.batch_norm(Tensor(np.zeros((1, 3, 2, 2))), state, True)


def test_cost_trace_counts_1x1_conv():
    x = Tensor(np.zeros((1, 8, 4, 4), dtype=np.float32))
    w = Tensor(np.zeros((8, 8, 1, 1), dtype=np.float32))
    with ops.trace_costs() as rec:
        ops.conv2d(x, w)
    assert rec.flops == 4 * 4 * 8 * 8 == 1024
    assert rec.mac == 128 + 64 + 128


def test_identity_costs_nothing():
    x = Tensor(np.zeros((1, 4, 4, 4), dtype=np.float32))
    with ops.trace_costs() as rec:
        ops.apply_candidate_op(OperationId.IDENTITY, x, 1)
    assert rec.flops == 0 and rec.mac == 0 and rec.nodes == 1
