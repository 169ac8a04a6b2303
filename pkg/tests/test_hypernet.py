import math

import numpy as np
import pytest

from hyperscale.hypernet import HyperNet, encode_policy, init_hypernet, kaiming_std, predict_weights
from hyperscale.tensor import Tensor, cross_entropy
from hyperscale.unet import RescalePolicy, UNetConfig, build_manifest, forward

from _gradcheck import max_rel_error

CFG = UNetConfig()
MANIFEST = build_manifest(CFG)
SMALL = UNetConfig(in_channels=1, num_classes=3, encoder_channels=(2, 3, 4, 4, 5), decoder_channels=(4, 3, 3, 2))


def test_encode_single():
    np.testing.assert_allclose(encode_policy(RescalePolicy.single(0.3)), [0.3, 0.7])
    np.testing.assert_array_equal(encode_policy(RescalePolicy.single(1.0)), [1.0, 0.0])


def test_encode_separate():
    np.testing.assert_allclose(
        encode_policy(RescalePolicy.separate([0.5, 0.4, 0.3])), [0.5, 0.5, 0.4, 0.6, 0.3, 0.7]
    )


def test_init_biases_zero_and_shapes():
    p = init_hypernet(MANIFEST, 2, seed=0)
    for name in ("fc1.bias", "fc2.bias", "fc3.bias"):
        assert not p[name].any()
    assert p["fc1.weight"].shape == (10, 2)
    assert p["fc2.weight"].shape == (100, 10)
    assert p["fc3.weight"].shape == (MANIFEST.total, 100)


def test_init_group_std_matches_kaiming_fan_out():
    p = init_hypernet(MANIFEST, 2, seed=1)
    gain = math.sqrt(2 / (1 + 0.01**2))
    checked = 0
    for slot in MANIFEST:
        block = p["fc3.weight"][slot.offset : slot.stop]
        if block.size < 10_000:
            continue
        target = gain / math.sqrt(slot.fan_out)
        assert abs(block.std() / target - 1) < 0.1, slot.name
        checked += 1
    assert checked >= 10
    assert abs(p["fc2.weight"].std() / kaiming_std(100) - 1) < 0.1


def test_init_deterministic():
    a, b = init_hypernet(MANIFEST, 2, seed=5), init_hypernet(MANIFEST, 2, seed=5)
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)


def test_predict_length_and_determinism():
    net = HyperNet.create(MANIFEST, 2, seed=0)
    rng = np.random.default_rng(0)
    lengths = set()
    for _ in range(50):
        w = net.predict(RescalePolicy.single(float(rng.uniform())))
        lengths.add(w.numpy().size)
    assert lengths == {MANIFEST.total}
    a = net.predict(RescalePolicy.single(0.42)).numpy()
    b = net.predict(RescalePolicy.single(0.42)).numpy()
    assert a.tobytes() == b.tobytes()


def test_zero_parameters_predict_zero_weights():
    params = {k: np.zeros_like(v) for k, v in init_hypernet(MANIFEST, 2).items()}
    assert not HyperNet(MANIFEST, params).predict(RescalePolicy.single(0.3)).numpy().any()


def test_manifest_mismatch():
    params = init_hypernet(build_manifest(SMALL), 2)
    with pytest.raises(ValueError):
        HyperNet(MANIFEST, params)
    net = HyperNet(build_manifest(SMALL), params)
    with pytest.raises(ValueError):
        predict_weights(RescalePolicy.separate([0.5] * 4), net)


def test_gradient_reaches_hypernet_weights():
    rng = np.random.default_rng(2)
    m = build_manifest(SMALL)
    params = {k: v.astype(np.float64) for k, v in init_hypernet(m, 2, seed=3).items()}
    params["fc1.bias"] = rng.normal(0, 0.1, 10)
    x = rng.normal(size=(1, 1, 16, 16))
    labels = rng.integers(0, 3, size=(1, 16, 16))
    policy = RescalePolicy.single(0.45)

    def loss(p):
        net = HyperNet(m, p, requires_grad=False)
        return cross_entropy(forward(Tensor(x), net.predict(policy), policy, SMALL), labels).item()

    net = HyperNet(m, {k: v.copy() for k, v in params.items()})
    cross_entropy(forward(Tensor(x), net.predict(policy), policy, SMALL), labels).backward()
    h = 1e-6
    for name in ("fc1.weight", "fc2.weight", "fc3.weight"):
        grad = net.params[name].grad
        assert np.abs(grad).max() > 0
        coords = rng.choice(grad.size, size=10, replace=False)
        numeric = []
        for c in coords:
            up = {k: v.copy() for k, v in params.items()}
            down = {k: v.copy() for k, v in params.items()}
            up[name].reshape(-1)[c] += h
            down[name].reshape(-1)[c] -= h
            numeric.append((loss(up) - loss(down)) / (2 * h))
        assert max_rel_error(grad.reshape(-1)[coords], numeric, floor=1e-5) < 1e-4, name
