import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from noisenav.config import make_profile
from noisenav.nn import (
    LN_EPS, Adam, CheckpointError, ConfigError, DenseNet, Layer, TrainingError, UsageError,
    checkpoint_load, checkpoint_save, dumps, layer_norm, loads, silu,
)


def _layer(w, b, **kw):
    return Layer(np.asarray(w, dtype=np.float64), np.asarray(b, dtype=np.float64), **kw)


def test_zero_single_layer_outputs_zero():
    net = DenseNet([_layer(np.zeros((3, 2)), np.zeros(3))])
    assert np.array_equal(net.forward([4.0, -1.0]), np.zeros(3))


def test_identity_layer_passes_input():
    net = DenseNet([_layer(np.eye(2), np.zeros(2))])
    assert np.array_equal(net.forward([1.0, 2.0]), [1.0, 2.0])


def test_two_layer_hand_evaluation():
    w1 = np.array([[1.0, 2.0], [-0.5, 0.3]])
    b1 = np.array([0.1, -0.2])
    w2 = np.array([[0.7, -1.1]])
    b2 = np.array([0.05])
    net = DenseNet([_layer(w1, b1), _layer(w2, b2)])
    # input [1, 0]: pre-activations 1.1 and -0.7
    h0 = 1.1 / (1 + math.exp(-1.1))
    h1 = -0.7 / (1 + math.exp(0.7))
    want = 0.7 * h0 - 1.1 * h1 + 0.05
    assert net.forward([1.0, 0.0])[0] == pytest.approx(want, abs=1e-12)


def test_dimension_mismatch_is_config_error():
    net = DenseNet.build([3, 4, 2], np.random.default_rng(0))
    with pytest.raises(ConfigError):
        net.forward(np.ones(5))
    with pytest.raises(ConfigError):
        DenseNet([_layer(np.ones((3, 2)), np.zeros(3)), _layer(np.ones((1, 4)), np.zeros(1))])


def test_layer_norm_only_on_middle_layers():
    net = DenseNet.build([5, 8, 8, 8, 2], np.random.default_rng(0))
    assert [l.norm for l in net.layers] == [False, True, True, False]
    assert all(not l.norm for l in DenseNet.build([5, 8, 2], np.random.default_rng(0)).layers[:1])


def test_backward_without_forward():
    net = DenseNet.build([3, 4, 2], np.random.default_rng(0))
    with pytest.raises(UsageError):
        net.backward(np.ones(2))


def test_zero_upstream_gives_zero_grads():
    net = DenseNet.build([3, 6, 6, 2], np.random.default_rng(1), dtype=np.float64)
    net.forward(np.random.default_rng(2).normal(size=(4, 3)))
    gx = net.backward(np.zeros((4, 2)))
    assert not np.any(gx)
    assert all(not np.any(g) for g in net.grads)


def test_single_affine_weight_row_gradient():
    rng = np.random.default_rng(3)
    net = DenseNet([_layer(rng.normal(size=(3, 4)), rng.normal(size=3))])
    x = rng.normal(size=4)
    net.forward(x)
    net.backward(np.array([1.0, 0.0, 0.0]))
    assert np.allclose(net.grads[0][0], x)
    assert not np.any(net.grads[0][1:])


def _fd_check(net, x, w, eps=1e-5):
    net.forward(x)
    net.backward(w)
    worst = 0.0
    for p, g in zip(net.params(), net.grads):
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            up = np.sum(net.forward(x) * w)
            flat[i] = old - eps
            down = np.sum(net.forward(x) * w)
            flat[i] = old
            num = (up - down) / (2 * eps)
            worst = max(worst, abs(num - gflat[i]) / max(1e-6, abs(num) + abs(gflat[i])))
    return worst


def test_small_net_matches_finite_differences():
    rng = np.random.default_rng(4)
    net = DenseNet.build([3, 4, 4, 2], rng, dtype=np.float64)  # 54 params
    assert net.n_params() <= 64
    for l in net.layers:
        l.bias[:] = rng.normal(scale=0.2, size=l.bias.shape)
    assert _fd_check(net, rng.normal(size=(2, 3)), rng.normal(size=(2, 2))) < 1e-4


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), width=st.integers(2, 6), depth=st.integers(1, 3))
def test_gradient_property(seed, width, depth):
    rng = np.random.default_rng(seed)
    net = DenseNet.build([3] + [width] * depth + [2], rng, dtype=np.float64)
    assert _fd_check(net, rng.normal(size=(2, 3)), rng.normal(size=(2, 2))) < 1e-4


def test_silu_zero_and_elementwise():
    assert silu(np.zeros(3)).tolist() == [0.0, 0.0, 0.0]
    x = np.array([-2.0, 0.5, 3.0])
    assert np.allclose(silu(x), [silu(np.array([v]))[0] for v in x])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=2, max_size=32))
def test_layer_norm_statistics(values):
    x = np.array(values, dtype=np.float64)
    if np.var(x) < 1e-2:
        return
    y = layer_norm(x)
    assert abs(y.mean()) < 1e-6
    # eps in the denominator shrinks the variance to var / (var + eps)
    assert abs(y.var() - np.var(x) / (np.var(x) + LN_EPS)) < 1e-9


def test_forward_deterministic():
    a = DenseNet.build([6, 16, 16, 3], np.random.default_rng(9))
    b = DenseNet.build([6, 16, 16, 3], np.random.default_rng(9))
    x = np.random.default_rng(1).normal(size=(5, 6))
    assert np.array_equal(a.forward(x), b.forward(x))


def test_finite_in_finite_out():
    net = DenseNet.build([4, 32, 32, 4], np.random.default_rng(0))
    assert np.all(np.isfinite(net.forward(np.full((2, 4), 1e3))))


def test_adam_zero_grad_keeps_params():
    p = [np.array([1.0, -2.0])]
    opt = Adam(p, lr=1e-2)
    opt.step([np.zeros(2)])
    assert p[0].tolist() == [1.0, -2.0]
    assert opt.step_count == 1


def test_adam_first_step_hand_value():
    p = [np.array([1.0])]
    lr, eps = 1e-3, 1e-8
    Adam(p, lr=lr, eps=eps).step([np.array([1.0])])
    # bias-corrected moments are both exactly the gradient on step one
    assert p[0][0] == pytest.approx(1.0 - lr * 1.0 / (1.0 + eps), abs=1e-15)


def test_adam_paper_lr_step_size():
    lr = make_profile("paper").ppo.lr
    assert lr == 2e-5
    p = [np.zeros(5)]
    opt = Adam(p, lr=lr)
    for _ in range(3):
        before = p[0].copy()
        opt.step([np.ones(5)])
        assert np.max(np.abs(p[0] - before)) <= lr * (1 + 1e-6)


def test_adam_nan_reports_path():
    p = [np.zeros(2), np.zeros(3)]
    opt = Adam(p, names=["actor.w", "actor.b"])
    with pytest.raises(TrainingError, match="actor.b"):
        opt.step([np.zeros(2), np.array([0.0, np.nan, 0.0])])


def test_checkpoint_roundtrip(tmp_path):
    net = DenseNet.build([7, 12, 12, 3], np.random.default_rng(5))
    path = tmp_path / "net.napc"
    checkpoint_save(net, path)
    back = checkpoint_load(path)
    x = np.random.default_rng(0).normal(size=(4, 7)).astype(np.float32)
    assert np.array_equal(net.forward(x), back.forward(x))
    for a, b in zip(net.params(), back.params()):
        assert a.tobytes() == b.tobytes()


def test_checkpoint_layout():
    net = DenseNet([Layer(np.ones((2, 3), np.float32), np.zeros(2, np.float32))])
    data = dumps(net)
    assert data[:4] == b"NAPC"
    assert struct.unpack("<III", data[4:16]) == (1, 1, 3)
    assert struct.unpack("<Q", data[-8:])[0] == len(data)


def test_checkpoint_extension_roundtrip():
    rng = np.random.default_rng(0)
    net = DenseNet.build([3, 4, 1], rng)
    extra = DenseNet.build([2, 2], rng)
    data = dumps(net, meta={"kind": "x", "n": 3}, nets={"aux": extra}, arrays={"mean": np.arange(4.0)})
    _, meta, nets, arrays = loads(data)
    assert meta == {"kind": "x", "n": 3}
    assert np.array_equal(nets["aux"].layers[0].weight, extra.layers[0].weight)
    assert arrays["mean"].tolist() == [0, 1, 2, 3]


def test_checkpoint_bad_magic(tmp_path):
    data = bytearray(dumps(DenseNet.build([2, 2], np.random.default_rng(0))))
    data[:4] = b"XXXX"
    path = tmp_path / "bad.napc"
    path.write_bytes(bytes(data))
    with pytest.raises(CheckpointError, match="magic"):
        checkpoint_load(path)


def test_checkpoint_truncated(tmp_path):
    data = dumps(DenseNet.build([4, 8, 2], np.random.default_rng(0)))
    for cut in (10, len(data) // 2, len(data) - 1):
        with pytest.raises(CheckpointError):
            loads(data[:cut])
