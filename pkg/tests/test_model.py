import numpy as np
import pytest

from oracles import central_difference, relative_error
from scicnn.errors import ConfigError, CorruptCheckpointError, ShapeError
from scicnn.layers import softmax_cross_entropy
from scicnn.model import (ArchitectureConfig, build_network, checkpoint_bytes, checkpoint_from_bytes,
                          forward, load_checkpoint, save_checkpoint)
from scicnn.tensor import Rng


def conv_params(cin, cout):
    return cin * 9 * cout + cout


def fc_params(din, dout):
    return din * dout + dout


@pytest.fixture(scope="module")
def canonical():
    return build_network(ArchitectureConfig(num_classes=3), Rng(0))


def test_canonical_shape_chain(canonical):
    trace = dict(canonical.shape_trace())
    assert trace["conv1"] == (32, 16, 16)
    assert trace["conv2"] == (64, 8, 8)
    assert trace["pool"] == (64, 4, 4)
    assert trace["flatten"] == (1024,)
    assert [trace[f"fc{i}"] for i in (1, 2, 3)] == [(256,), (512,), (3,)]


def test_canonical_layer_order(canonical):
    names = [n for n, _ in canonical.layers]
    assert names == ["conv1", "act1", "conv2", "act2", "pool", "flatten", "fc1", "act_fc1", "drop1",
                     "fc2", "act_fc2", "drop2", "fc3"]


def test_parameter_count(canonical):
    expected = (conv_params(3, 32) + conv_params(32, 64) + fc_params(1024, 256)
                + fc_params(256, 512) + fc_params(512, 3))
    assert canonical.num_params == expected == 414_915


def test_forward_pass_matches_trace(canonical):
    x = np.random.default_rng(0).random((2, 3, 32, 32), dtype=np.float32)
    h = x
    for name, layer in canonical.layers:
        h = layer.forward(h)
        assert h.shape[1:] == dict(canonical.shape_trace())[name]


def test_depth_variants_build_and_run():
    x = np.random.default_rng(1).random((3, 32, 32), dtype=np.float32)
    for depth, flat in [(1, 8 * 8 * 32), (2, 1024), (4, 2 * 2 * 64)]:
        net = build_network(ArchitectureConfig.for_depth(depth, num_classes=3), Rng(depth))
        assert dict(net.shape_trace())["flatten"] == (flat,)
        assert forward(net, x).shape == (3,)


def test_sensor_level_output_size():
    net = build_network(ArchitectureConfig(num_classes=5), Rng(0))
    assert forward(net, np.zeros((3, 32, 32), np.float32)).shape == (5,)


def test_he_init_and_zero_bias():
    net = build_network(ArchitectureConfig(num_classes=3), Rng(4))
    fc1 = net.layer("fc1")
    assert fc1.weights.std() == pytest.approx(np.sqrt(2 / 1024), rel=0.02)
    assert not any(a.any() for n, a in net.param_items() if n.endswith("bias"))


def test_build_is_deterministic():
    a = build_network(ArchitectureConfig(), Rng(5))
    b = build_network(ArchitectureConfig(), Rng(5))
    assert all(np.array_equal(x, y) for (_, x), (_, y) in zip(a.param_items(), b.param_items()))


def test_incompatible_config():
    with pytest.raises(ConfigError):
        build_network(ArchitectureConfig(filters=[8], conv_padding="valid", height=2, width=2), Rng(0))
    with pytest.raises(ConfigError):
        build_network(ArchitectureConfig(filters=[]), Rng(0))
    with pytest.raises(ConfigError):
        ArchitectureConfig.from_dict({"conv_depth": 2, "filters": [8]})


def test_forward_properties(canonical):
    rs = np.random.default_rng(2)
    x = rs.random((8, 3, 32, 32), dtype=np.float32)
    probs = forward(canonical, x)
    np.testing.assert_allclose(probs.sum(axis=1), 1, atol=1e-6)
    np.testing.assert_array_equal(probs, forward(canonical, x))


def test_zero_patch_gives_uniform(canonical):
    np.testing.assert_allclose(forward(canonical, np.zeros((3, 32, 32), np.float32)), [1 / 3] * 3, atol=1e-7)


def test_forward_shape_mismatch(canonical):
    with pytest.raises(ShapeError):
        forward(canonical, np.zeros((3, 16, 16), np.float32))


def test_inference_keeps_no_caches(canonical):
    forward(canonical, np.zeros((3, 32, 32), np.float32))
    assert all(layer._cache is None for _, layer in canonical.layers)


def test_training_forward_keeps_caches():
    net = build_network(ArchitectureConfig(), Rng(0))
    forward(net, np.zeros((2, 3, 32, 32), np.float32), training=True, rng=Rng(1))
    assert all(layer._cache is not None for _, layer in net.layers)


def test_whole_network_gradient():
    """End-to-end backward through every layer, double precision, fixed dropout masks."""
    cfg = ArchitectureConfig(num_classes=3, filters=[4, 6], fc_sizes=[16, 12])
    net = build_network(cfg, Rng(3), dtype=np.float64)
    rs = np.random.default_rng(3)
    x = rs.standard_normal((2, 3, 32, 32))
    y = np.array([0, 2])

    def loss():
        return softmax_cross_entropy(net.logits(x, training=True, rng=Rng(99)), y)[1]

    _, _, g = softmax_cross_entropy(net.logits(x, training=True, rng=Rng(99)), y)
    net.backward(g)
    grads = {n: a.copy() for n, a in net.grad_items()}
    errs = []
    for name, arr in net.param_items():
        for flat in rs.choice(arr.size, size=min(8, arr.size), replace=False):
            idx = np.unravel_index(flat, arr.shape)
            errs.append(relative_error(grads[name][idx], central_difference(loss, arr, idx)))
    assert max(errs) <= 1e-4


# --- checkpoints -----------------------------------------------------------

def test_checkpoint_round_trip(tmp_path, canonical):
    canonical.metadata = {"label_mode": "model", "channel_means": [0.5, 0.5, 0.5]}
    path = tmp_path / "a.ckpt"
    save_checkpoint(canonical, path)
    loaded = load_checkpoint(path)
    assert loaded.config == canonical.config
    assert loaded.metadata == canonical.metadata
    for (_, a), (_, b) in zip(canonical.param_items(), loaded.param_items()):
        assert a.tobytes() == b.tobytes()
    x = np.random.default_rng(0).random((100, 3, 32, 32), dtype=np.float32)
    np.testing.assert_array_equal(forward(canonical, x), forward(loaded, x))
    # second cycle is byte-stable
    save_checkpoint(loaded, tmp_path / "b.ckpt")
    assert path.read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_checkpoint_layout(canonical):
    raw = checkpoint_bytes(canonical)
    assert raw[:4] == b"SCIN" and raw[4] == 1
    hlen = int.from_bytes(raw[5:9], "little")
    assert len(raw) == 9 + hlen + 4 * canonical.num_params + 8


@pytest.mark.parametrize("mutate,field", [
    (lambda b: b[:len(b) // 2], "checksum"),
    (lambda b: b[:6], "length"),
    (lambda b: b"XXXX" + b[4:], "magic"),
    (lambda b: b[:4] + b"\x09" + b[5:], "version"),
    (lambda b: b[:100] + bytes([b[100] ^ 1]) + b[101:], "checksum"),
])
def test_corrupt_checkpoint(canonical, mutate, field):
    with pytest.raises(CorruptCheckpointError) as err:
        checkpoint_from_bytes(mutate(checkpoint_bytes(canonical)))
    assert err.value.field == field
