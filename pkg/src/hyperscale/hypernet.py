"""MLP mapping an encoded rescaling policy to the full primary weight vector."""

from __future__ import annotations

import math

import numpy as np

from .tensor import Tensor, leaky_relu, linear, reshape
from .unet import ParamManifest, RescalePolicy, WeightSet

HIDDEN = (10, 100)
SLOPE = 0.01


def encode_policy(policy: RescalePolicy) -> np.ndarray:
    """Interleaved ``(phi_i, 1 - phi_i)`` pairs, one per factor."""
    pairs = [(f, 1.0 - f) for f in policy.factors]
    return np.asarray(pairs, dtype=np.float64).reshape(-1)


def kaiming_std(fan: int, slope: float = SLOPE) -> float:
    gain = math.sqrt(2.0 / (1.0 + slope**2))
    return gain / math.sqrt(fan)


def init_hypernet(manifest: ParamManifest, num_inputs: int, seed=0, dtype=np.float32) -> dict[str, np.ndarray]:
    """Fresh hypernetwork parameters.

    The first two layers use Kaiming-normal fan-out scaling. The output layer
    is split into one row block per manifest slot, and each block is scaled by
    the fan-out of the primary tensor it predicts. Biases start at zero.
    """
    rng = np.random.default_rng(seed)
    h1, h2 = HIDDEN
    params = {
        "fc1.weight": rng.normal(0.0, kaiming_std(h1), (h1, num_inputs)),
        "fc1.bias": np.zeros(h1),
        "fc2.weight": rng.normal(0.0, kaiming_std(h2), (h2, h1)),
        "fc2.bias": np.zeros(h2),
    }
    fc3 = np.empty((manifest.total, h2))
    for slot in manifest:
        fc3[slot.offset : slot.stop] = rng.normal(0.0, kaiming_std(slot.fan_out), (slot.size, h2))
    params["fc3.weight"] = fc3
    params["fc3.bias"] = np.zeros(manifest.total)
    return {k: v.astype(dtype) for k, v in params.items()}


class HyperNet:
    """h(policy; omega). Parameters are leaf tensors updated in place by the optimizer."""

    PARAM_NAMES = ("fc1.weight", "fc1.bias", "fc2.weight", "fc2.bias", "fc3.weight", "fc3.bias")

    def __init__(self, manifest: ParamManifest, params: dict[str, np.ndarray], requires_grad: bool = True):
        self.manifest = manifest
        if params["fc3.weight"].shape[0] != manifest.total:
            raise ValueError(
                f"hypernetwork emits {params['fc3.weight'].shape[0]} values, manifest needs {manifest.total}"
            )
        self.params = {k: Tensor(params[k], requires_grad=requires_grad) for k in self.PARAM_NAMES}

    @classmethod
    def create(cls, manifest: ParamManifest, num_inputs: int, seed=0, dtype=np.float32) -> "HyperNet":
        return cls(manifest, init_hypernet(manifest, num_inputs, seed, dtype))

    @property
    def num_inputs(self) -> int:
        return self.params["fc1.weight"].shape[1]

    @property
    def dtype(self):
        return self.params["fc1.weight"].dtype

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.params.items()}

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def predict(self, policy: RescalePolicy) -> WeightSet:
        return predict_weights(policy, self)


def hidden_features(policy: RescalePolicy, net: HyperNet) -> Tensor:
    """Output of the second hidden layer, shape [1, 100]."""
    code = encode_policy(policy)
    if code.size != net.num_inputs:
        raise ValueError(f"policy encodes to {code.size} inputs, hypernetwork expects {net.num_inputs}")
    p = net.params
    x = Tensor(code.astype(net.dtype).reshape(1, -1))
    x = leaky_relu(linear(x, p["fc1.weight"], p["fc1.bias"]), SLOPE)
    return leaky_relu(linear(x, p["fc2.weight"], p["fc2.bias"]), SLOPE)


def predict_weights(policy: RescalePolicy, net: HyperNet) -> WeightSet:
    """One pass through the MLP; differentiable with respect to the hypernetwork parameters."""
    p = net.params
    theta = linear(hidden_features(policy, net), p["fc3.weight"], p["fc3.bias"])
    return WeightSet(reshape(theta, (net.manifest.total,)), net.manifest)
