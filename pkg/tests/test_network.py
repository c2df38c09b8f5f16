import numpy as np
import pytest

from cribriform.network import (
    DESK_NETWORK,
    PAPER_NETWORK,
    ArchitectureMismatch,
    BatchNorm,
    Conv2D,
    CorruptContainer,
    MissingCache,
    Network,
    NetworkConfig,
    NumericalInstability,
    Residual,
    SEBlock,
    Sequential,
    load_weights,
    read_weights,
    save_weights,
    write_weights,
)
from cribriform.network.layers import ReLU
from oracles import central_difference, relative_error


def test_paper_network_shape():
    net = Network(PAPER_NETWORK, seed=0)
    assert len([n for n, _ in net.body.layers if n.startswith("block")]) == 6
    assert PAPER_NETWORK.factor == 32
    y = net.forward(np.random.default_rng(0).random((1024, 1024, 3)).astype(np.float32))
    assert y.shape == (32, 32, 7)
    np.testing.assert_allclose(y.sum(-1), 1.0, atol=1e-6)


def test_desk_network_shape():
    net = Network(DESK_NETWORK)
    assert DESK_NETWORK.factor == 8
    y = net.forward(np.random.default_rng(0).random((2, 64, 64, 3)))
    assert y.shape == (2, 8, 8, 7)


def test_factor_two_stages():
    cfg = NetworkConfig(widths=(4, 8, 8), se_reduction=4, input_size=16)
    assert cfg.factor == 4
    assert Network(cfg).forward(np.zeros((16, 16, 3))).shape == (4, 4, 7)


def test_tiny_two_block_net():
    cfg = NetworkConfig(widths=(4, 8), se_reduction=2, input_size=64, downsample=(5,))
    assert Network(cfg).forward(np.zeros((64, 64, 3))).shape == (2, 2, 7)


def test_forward_shape_mismatch(tiny_net):
    with pytest.raises(ValueError):
        tiny_net.forward(np.zeros((1, 15, 16, 3)))


def test_softmax_sums_random_weights():
    rng = np.random.default_rng(0)
    cfg = NetworkConfig(widths=(4, 8), se_reduction=2, input_size=16, downsample=(2,))
    for trial in range(100):
        net = Network(cfg, seed=trial)
        x = rng.normal(0.5, 0.5, (2, 16, 16, 3))
        for train in (False, True):
            y = net.forward(x, train)
            assert y.min() >= 0 and y.max() <= 1
            np.testing.assert_allclose(y.sum(-1), 1.0, atol=1e-6)


def test_forward_deterministic(tiny_net, rng):
    x = rng.random((3, 16, 16, 3))
    np.testing.assert_array_equal(tiny_net.forward(x), tiny_net.forward(x))


def test_non_finite_raises(tiny_net):
    tiny_net.parameters()["head.weight"][...] = np.nan
    with pytest.raises(NumericalInstability):
        tiny_net.forward(np.zeros((16, 16, 3)))


def test_backward_needs_cache(tiny_net):
    with pytest.raises(MissingCache):
        tiny_net.backward(np.zeros((1, 4, 4, 7)))
    tiny_net.forward(np.zeros((1, 16, 16, 3)), train=False)
    with pytest.raises(MissingCache):
        tiny_net.backward(np.zeros((1, 4, 4, 7)))


def test_zero_upstream_gives_zero_grads(tiny_net, rng):
    tiny_net.forward(rng.random((2, 16, 16, 3)), train=True)
    grads = tiny_net.backward(np.zeros((2, 4, 4, 7)))
    assert set(grads) == set(tiny_net.parameters())
    for name, g in grads.items():
        assert g.shape == tiny_net.parameters()[name].shape
        assert not g.any(), name


def test_bn_train_eval_consistency(rng):
    net = Network(NetworkConfig(widths=(4, 8), se_reduction=2, input_size=16, downsample=(2,)), seed=1)
    x = rng.random((4, 16, 16, 3)).astype(np.float32)
    y_train = net.forward(x, train=True)
    # freeze running statistics to the batch statistics each layer just saw
    for bn in net.batchnorms():
        mean, var = bn.last_batch_stats
        bn.buffers["running_mean"] = mean.astype(np.float32)
        bn.buffers["running_var"] = var.astype(np.float32)
    np.testing.assert_allclose(net.forward(x, train=False), y_train, atol=1e-5)


def test_bn_running_update():
    bn = BatchNorm(2, momentum=0.9, dtype=np.float64)
    x = np.random.default_rng(0).normal(3.0, 2.0, (4, 5, 5, 2))
    bn.forward(x, train=True)
    np.testing.assert_allclose(bn.buffers["running_mean"], 0.1 * x.mean(axis=(0, 1, 2)), rtol=1e-12)
    np.testing.assert_allclose(bn.buffers["running_var"], 0.9 + 0.1 * x.var(axis=(0, 1, 2)), rtol=1e-12)


# -- squeeze and excitation ----------------------------------------------------

def test_se_identity_gate(rng):
    se = SEBlock(8, 2, rng=rng)
    se.identity_gate = True
    x = rng.random((2, 5, 5, 8)).astype(np.float32)
    np.testing.assert_array_equal(se.forward(x), x)


def test_se_constant_squeeze():
    se = SEBlock(4, 2)
    c = np.array([0.5, -1.0, 2.0, 3.25], dtype=np.float32)
    x = np.broadcast_to(c, (1, 6, 7, 4)).copy()
    np.testing.assert_array_equal(se.squeeze(x)[0], c)


def test_se_reduction_must_divide():
    with pytest.raises(ValueError):
        SEBlock(4, 8)
    with pytest.raises(ValueError):
        SEBlock(6, 4)


def test_se_gradient_float32():
    """Central differences at float32; norm-wise relative error over all inputs and parameters."""
    rng = np.random.default_rng(2)
    se = SEBlock(8, 2, rng=rng, dtype=np.float32)
    x = rng.normal(size=(2, 4, 4, 8)).astype(np.float32)
    w = rng.normal(size=x.shape).astype(np.float32)
    loss = lambda: float((se.forward(x).astype(np.float64) * w).sum())
    se.forward(x, train=True)
    dx = se.backward(w)
    grads = {k: v.copy() for k, v in se.grads.items()}
    h = np.float32(1e-2)
    targets = [("x", x, dx)] + [(k, se.params[k], grads[k]) for k in se.params]
    for name, arr, analytic in targets:
        numeric = np.zeros(arr.shape)
        for idx in np.ndindex(arr.shape):
            numeric[idx] = central_difference(loss, arr, idx, h)
        err = np.linalg.norm(analytic - numeric) / max(np.linalg.norm(numeric), 1e-8)
        assert err < 1e-3, (name, err)


def test_residual_sums_both_paths(rng):
    main = Sequential([("c", Conv2D(3, 4, 3, rng=rng, dtype=np.float64)), ("r", ReLU())])
    skip = Conv2D(3, 4, 1, rng=rng, dtype=np.float64)
    res = Residual(main, skip)
    x = rng.normal(size=(2, 5, 5, 3))
    dy = rng.normal(size=(2, 5, 5, 4))
    res.forward(x, train=True)
    dx = res.backward(dy)
    main.forward(x, train=True)
    dx_main = main.backward(dy)
    skip.forward(x, train=True)
    dx_skip = skip.backward(dy)
    np.testing.assert_allclose(dx, dx_main + dx_skip, atol=1e-12)
    # with the skip path silenced only the main contribution remains
    skip.params["weight"][...] = 0.0
    res.forward(x, train=True)
    np.testing.assert_allclose(res.backward(dy), dx_main, atol=1e-12)

    main2 = Sequential([("c", Conv2D(3, 3, 3, rng=rng, dtype=np.float64))])
    ident = Residual(main2, None)
    ident.forward(x, train=True)
    dy3 = rng.normal(size=x.shape)
    dxi = ident.backward(dy3)
    main2.forward(x, train=True)
    np.testing.assert_allclose(dxi, main2.backward(dy3) + dy3, atol=1e-12)


@pytest.mark.parametrize("kernel,stride,padding", [(3, 1, "same"), (1, 1, "same"), (2, 2, "valid"), (3, 2, "valid")])
def test_conv_input_gradient(kernel, stride, padding, rng):
    conv = Conv2D(3, 4, kernel, stride, padding, rng=rng, dtype=np.float64)
    x = rng.normal(size=(2, 6, 6, 3))
    y = conv.forward(x, train=True)
    w = rng.normal(size=y.shape)
    dx = conv.backward(w)
    loss = lambda: float((conv.forward(x) * w).sum())
    for _ in range(20):
        idx = tuple(int(rng.integers(s)) for s in x.shape)
        assert relative_error(dx[idx], central_difference(loss, x, idx, 1e-5), 1e-6) < 1e-6


def test_conv_matches_direct_loop(rng):
    conv = Conv2D(2, 3, 3, rng=rng, dtype=np.float64)
    conv.params["bias"][...] = rng.normal(size=3)
    x = rng.normal(size=(1, 5, 6, 2))
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    w = conv.params["weight"]
    ref = np.zeros((1, 5, 6, 3))
    for r in range(5):
        for c in range(6):
            ref[0, r, c] = np.einsum("ijk,ijko->o", xp[0, r : r + 3, c : c + 3], w) + conv.params["bias"]
    np.testing.assert_allclose(conv.forward(x), ref, atol=1e-12)


# -- serialization -------------------------------------------------------------

def test_weights_round_trip(tiny_net, rng, tmp_path):
    x = rng.random((2, 16, 16, 3))
    tiny_net.forward(x, train=True)  # move running stats off their init
    blob = save_weights(tiny_net, {"note": "t"})
    back = load_weights(blob)
    np.testing.assert_array_equal(back.forward(x), tiny_net.forward(x))
    for k, v in tiny_net.state().items():
        np.testing.assert_array_equal(back.state()[k], v)
    write_weights(tiny_net, tmp_path / "w.crbw")
    np.testing.assert_array_equal(read_weights(tmp_path / "w.crbw").forward(x), tiny_net.forward(x))


def test_weights_truncated(tiny_net):
    blob = save_weights(tiny_net)
    for cut in (3, 20, len(blob) // 2, len(blob) - 1):
        with pytest.raises(CorruptContainer):
            load_weights(blob[:cut])
    with pytest.raises(CorruptContainer):
        load_weights(b"XXXX" + blob[4:])


def test_weights_architecture_mismatch():
    five = Network(NetworkConfig(widths=(4, 4, 4, 4, 4), se_reduction=2, input_size=64))
    six = Network(NetworkConfig(widths=(4, 4, 4, 4, 4, 4), se_reduction=2, input_size=64))
    assert five.architecture_hash() != six.architecture_hash()
    with pytest.raises(ArchitectureMismatch):
        load_weights(save_weights(five), into=six)


def test_weights_reject_non_finite(tiny_net):
    tiny_net.parameters()["head.bias"][0] = np.inf
    with pytest.raises(ValueError):
        save_weights(tiny_net)
