"""Variable-rescale UNet executed with externally supplied weights.

The network owns no parameters. A :class:`ParamManifest` fixes the order in
which a flat weight vector is sliced into kernels and biases, and
:func:`forward` runs the encoder/decoder with every rescaling step driven by
a :class:`RescalePolicy`.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .resize import bilinear_resize, target_size, upsample_to_match
from .tensor import NumericalError, Tensor, concat_channels, conv2d, leaky_relu, slice_flat


@dataclass(frozen=True)
class UNetConfig:
    """Topology of the primary network.

    ``encoder_channels`` lists stage widths shallow to deep; the last stage is
    the bottleneck. ``decoder_channels`` lists decoder widths deep to shallow
    and must have one entry fewer than the encoder.
    """

    in_channels: int = 1
    num_classes: int = 4
    encoder_channels: tuple[int, ...] = (8, 16, 32, 64, 128)
    decoder_channels: tuple[int, ...] = (16, 8, 4, 4)
    kernel: int = 3
    convs_per_stage: int = 2
    slope: float = 0.01

    def __post_init__(self):
        object.__setattr__(self, "encoder_channels", tuple(int(c) for c in self.encoder_channels))
        object.__setattr__(self, "decoder_channels", tuple(int(c) for c in self.decoder_channels))
        if len(self.encoder_channels) < 2:
            raise ValueError("need at least two encoder stages")
        if len(self.decoder_channels) != len(self.encoder_channels) - 1:
            raise ValueError(
                f"{len(self.encoder_channels)} encoder stages need {len(self.encoder_channels) - 1} "
                f"decoder stages, got {len(self.decoder_channels)}"
            )
        if self.num_classes < 2:
            raise ValueError("num_classes includes background and must be >= 2")
        if self.kernel % 2 == 0 or self.kernel < 1:
            raise ValueError("kernel size must be odd")
        if self.convs_per_stage < 1 or self.in_channels < 1:
            raise ValueError("invalid stage configuration")
        if min(self.encoder_channels + self.decoder_channels) < 1:
            raise ValueError("channel counts must be positive")

    @property
    def num_steps(self) -> int:
        """Number of rescaling steps K (downscales, each paired with one upscale)."""
        return len(self.encoder_channels) - 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "UNetConfig":
        d = dict(d)
        d["encoder_channels"] = tuple(d["encoder_channels"])
        d["decoder_channels"] = tuple(d["decoder_channels"])
        return cls(**d)


@dataclass(frozen=True)
class RescalePolicy:
    """Either one factor shared by every rescaling step or one factor per step.

    A factor of 0 is accepted and means the limit of arbitrarily aggressive
    downscaling: every downscaled extent clamps to one pixel.
    """

    mode: str
    factors: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "factors", tuple(float(f) for f in self.factors))
        if self.mode not in ("single", "separate"):
            raise ValueError(f"unknown policy mode {self.mode!r}")
        if not self.factors:
            raise ValueError("policy needs at least one factor")
        if self.mode == "single" and len(self.factors) != 1:
            raise ValueError("single-mode policy carries exactly one factor")
        for f in self.factors:
            if not 0.0 <= f <= 1.0:
                raise ValueError(f"rescaling factor {f} outside [0, 1]")

    @classmethod
    def single(cls, phi: float) -> "RescalePolicy":
        return cls("single", (phi,))

    @classmethod
    def separate(cls, factors: Sequence[float]) -> "RescalePolicy":
        return cls("separate", tuple(factors))

    def expand(self, num_steps: int) -> list[float]:
        return expand_policy(self, num_steps)

    def __str__(self) -> str:
        return ",".join(f"{f:g}" for f in self.factors)


def expand_policy(policy: RescalePolicy, num_steps: int) -> list[float]:
    """Per-step factors: a single factor is replicated, separate factors pass through."""
    if policy.mode == "single":
        return [policy.factors[0]] * num_steps
    if len(policy.factors) != num_steps:
        raise ValueError(f"separate policy has {len(policy.factors)} factors, network has {num_steps} steps")
    return list(policy.factors)


def down_extent(extent: int, factor: float) -> int:
    if factor == 0.0:
        return 1
    return target_size(extent, factor)


# ---------------------------------------------------------------------------
# parameter manifest


@dataclass(frozen=True)
class Slot:
    name: str
    shape: tuple[int, ...]
    fan_in: int
    fan_out: int
    offset: int

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def stop(self) -> int:
        return self.offset + self.size


@dataclass(frozen=True)
class ParamManifest:
    slots: tuple[Slot, ...]

    @property
    def total(self) -> int:
        return self.slots[-1].stop if self.slots else 0

    def __iter__(self) -> Iterator[Slot]:
        return iter(self.slots)

    def __len__(self) -> int:
        return len(self.slots)

    def __getitem__(self, name: str) -> Slot:
        for slot in self.slots:
            if slot.name == name:
                return slot
        raise KeyError(name)

    def to_list(self) -> list[dict]:
        return [
            {"name": s.name, "shape": list(s.shape), "fan_in": s.fan_in, "fan_out": s.fan_out}
            for s in self.slots
        ]

    @classmethod
    def from_list(cls, entries: list[dict]) -> "ParamManifest":
        slots, offset = [], 0
        for e in entries:
            slot = Slot(e["name"], tuple(e["shape"]), int(e["fan_in"]), int(e["fan_out"]), offset)
            slots.append(slot)
            offset = slot.stop
        return cls(tuple(slots))


def _conv_layers(cfg: UNetConfig) -> list[tuple[str, int, int, int]]:
    """(prefix, cin, cout, k) for every convolution in execution order."""
    layers = []
    cin = cfg.in_channels
    for i, c in enumerate(cfg.encoder_channels):
        for j in range(cfg.convs_per_stage):
            layers.append((f"enc{i}.conv{j + 1}", cin if j == 0 else c, c, cfg.kernel))
        cin = c
    prev = cfg.encoder_channels[-1]
    skips = cfg.encoder_channels[-2::-1]
    for i, (c, skip) in enumerate(zip(cfg.decoder_channels, skips)):
        for j in range(cfg.convs_per_stage):
            layers.append((f"dec{i}.conv{j + 1}", prev + skip if j == 0 else c, c, cfg.kernel))
        prev = c
    layers.append(("final", prev, cfg.num_classes, 1))
    return layers


def build_manifest(cfg: UNetConfig) -> ParamManifest:
    """Ordered kernel/bias slots; depends on the topology only, never on a factor."""
    slots, offset = [], 0
    for prefix, cin, cout, k in _conv_layers(cfg):
        fan_in, fan_out = cin * k * k, cout * k * k
        for name, shape in ((f"{prefix}.weight", (cout, cin, k, k)), (f"{prefix}.bias", (cout,))):
            slot = Slot(name, shape, fan_in, fan_out, offset)
            slots.append(slot)
            offset = slot.stop
    return ParamManifest(tuple(slots))


@dataclass
class WeightSet:
    """Flat parameter vector (possibly a graph node) plus the manifest that slices it."""

    flat: Tensor
    manifest: ParamManifest
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.flat.data.size != self.manifest.total:
            raise ValueError(f"weight vector has {self.flat.data.size} entries, manifest needs {self.manifest.total}")

    def __getitem__(self, name: str) -> Tensor:
        if name not in self._cache:
            slot = self.manifest[name]
            self._cache[name] = slice_flat(self.flat, slot.offset, slot.stop, slot.shape)
        return self._cache[name]

    def numpy(self) -> np.ndarray:
        return self.flat.data.reshape(-1)


# ---------------------------------------------------------------------------
# forward


def _conv_block(x: Tensor, w: WeightSet, prefix: str, cfg: UNetConfig) -> Tensor:
    for j in range(cfg.convs_per_stage):
        name = f"{prefix}.conv{j + 1}"
        x = leaky_relu(conv2d(x, w[f"{name}.weight"], w[f"{name}.bias"]), cfg.slope)
    return x


def forward(x: Tensor, weights: WeightSet, policy: RescalePolicy, cfg: UNetConfig) -> Tensor:
    """Logits [B, num_classes, H, W] for images ``x`` [B, in_channels, H, W].

    Encoder stage i runs its convolutions and is then downscaled by factor i
    (the bottleneck is not). Decoder stages resize to the matching skip
    connection, concatenate [upsampled, skip], and convolve. A 1x1
    convolution without activation produces the logits.
    """
    if x.data.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise ValueError(f"expected input [B,{cfg.in_channels},H,W], got {x.shape}")
    factors = expand_policy(policy, cfg.num_steps)
    skips = []
    for i in range(len(cfg.encoder_channels)):
        x = _conv_block(x, weights, f"enc{i}", cfg)
        if i < cfg.num_steps:
            skips.append(x)
            h, w = x.shape[2:]
            x = bilinear_resize(x, down_extent(h, factors[i]), down_extent(w, factors[i]))
    for i in range(cfg.num_steps):
        skip = skips[-1 - i]
        x = concat_channels(upsample_to_match(x, skip), skip)
        x = _conv_block(x, weights, f"dec{i}", cfg)
    out = conv2d(x, weights["final.weight"], weights["final.bias"])
    if not np.isfinite(out.data).all():
        raise NumericalError("non-finite activations in segmentation network")
    return out


def feature_sizes(cfg: UNetConfig, policy: RescalePolicy, h: int, w: int) -> list[tuple[int, int]]:
    """Spatial extent of each encoder stage for an input of size (h, w)."""
    factors = expand_policy(policy, cfg.num_steps)
    sizes = [(h, w)]
    for f in factors:
        h, w = down_extent(h, f), down_extent(w, f)
        sizes.append((h, w))
    return sizes
