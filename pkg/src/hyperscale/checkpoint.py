"""Checkpoint container and its binary file format.

File layout (all integers little-endian)::

    b"HSCK"                 magic
    uint32                  format version
    uint64                  header length in bytes
    header                  UTF-8 JSON, keys sorted
    payload                 float32 LE tensors, concatenated in header["tensors"] order

The payload length must equal ``4 * sum(prod(shape))`` over the declared
tensors. Writes go to a temporary file that is renamed into place.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .hypernet import HyperNet
from .tensor import Tensor
from .unet import ParamManifest, RescalePolicy, UNetConfig, WeightSet, build_manifest

MAGIC = b"HSCK"
VERSION = 1
_FLOAT = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    mode: str  # hyper | fixed | varres
    net_config: UNetConfig
    params: dict[str, np.ndarray]
    train_config: Optional[dict] = None
    moments: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    rng_state: Optional[dict] = None
    meta: dict = field(default_factory=dict)
    best: Optional[dict] = None  # best-so-far snapshot carried by resumable states

    @property
    def manifest(self) -> ParamManifest:
        return build_manifest(self.net_config)

    @property
    def phi(self) -> Optional[float]:
        """Rescaling factor of a fixed-weight checkpoint (None for hypernetworks)."""
        return self.meta.get("phi")

    @property
    def num_factors(self) -> int:
        if self.mode == "hyper":
            return self.params["fc1.weight"].shape[1] // 2
        return 1

    @property
    def seed(self) -> Optional[int]:
        return (self.train_config or {}).get("seed")

    def hypernet(self) -> HyperNet:
        if self.mode != "hyper":
            raise CheckpointError(f"{self.mode} checkpoint has no hypernetwork")
        return HyperNet(self.manifest, self.params, requires_grad=False)

    def weights(self, policy: Optional[RescalePolicy] = None) -> WeightSet:
        """Primary-network weights: predicted for ``policy`` or the stored fixed vector."""
        if self.mode == "hyper":
            if policy is None:
                raise CheckpointError("hypernetwork checkpoints need a policy to predict weights")
            w = self.hypernet().predict(policy)
            return WeightSet(Tensor(w.flat.data), w.manifest)
        return WeightSet(Tensor(self.params["theta"]), self.manifest)

    def tensors(self) -> list[tuple[str, np.ndarray]]:
        out = [(f"param/{k}", v) for k, v in self.params.items()]
        out += [(k, v) for k, v in sorted(self.moments.items())]
        if self.best is not None:
            out += [(f"best/param/{k}", v) for k, v in self.best["params"].items()]
            out += [(f"best/{k}", v) for k, v in sorted(self.best["moments"].items())]
        return out


def _header(ckpt: Checkpoint, tensors) -> dict:
    header = {
        "mode": ckpt.mode,
        "net_config": ckpt.net_config.to_dict(),
        "train_config": ckpt.train_config,
        "manifest": ckpt.manifest.to_list(),
        "step": ckpt.step,
        "rng_state": ckpt.rng_state,
        "meta": ckpt.meta,
        "tensors": [{"name": n, "shape": list(a.shape)} for n, a in tensors],
    }
    if ckpt.train_config:
        header["seed"] = ckpt.train_config.get("seed")
        header["prior"] = ckpt.train_config.get("prior")
    if ckpt.best is not None:
        header["best"] = {k: v for k, v in ckpt.best.items() if k not in ("params", "moments")}
    return header


def to_bytes(ckpt: Checkpoint) -> bytes:
    tensors = ckpt.tensors()
    header = json.dumps(_header(ckpt, tensors), sort_keys=True, separators=(",", ":")).encode()
    parts = [MAGIC, struct.pack("<IQ", VERSION, len(header)), header]
    parts += [np.ascontiguousarray(a, dtype=_FLOAT).tobytes() for _, a in tensors]
    return b"".join(parts)


def save(ckpt: Checkpoint, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors = ckpt.tensors()
    header = json.dumps(_header(ckpt, tensors), sort_keys=True, separators=(",", ":")).encode()
    fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<IQ", VERSION, len(header)))
            fh.write(header)
            for _, arr in tensors:
                fh.write(np.ascontiguousarray(arr, dtype=_FLOAT).tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return from_bytes(fh.read(), str(path))


def from_bytes(raw: bytes, origin: str = "<bytes>") -> Checkpoint:
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{origin}: not a checkpoint (bad magic)")
    if len(raw) < 16:
        raise CheckpointError(f"{origin}: truncated preamble")
    version, header_len = struct.unpack("<IQ", raw[4:16])
    if version != VERSION:
        raise CheckpointError(f"{origin}: unsupported format version {version}")
    try:
        header = json.loads(raw[16 : 16 + header_len].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise CheckpointError(f"{origin}: corrupt header ({err})") from err
    payload = memoryview(raw)[16 + header_len :]
    expected = 4 * sum(int(np.prod(t["shape"])) for t in header["tensors"])
    if len(payload) != expected:
        raise CheckpointError(f"{origin}: payload has {len(payload)} bytes, header declares {expected}")
    arrays, offset = {}, 0
    for t in header["tensors"]:
        n = int(np.prod(t["shape"]))
        arrays[t["name"]] = (
            np.frombuffer(payload, dtype=_FLOAT, count=n, offset=offset).astype(np.float32).reshape(t["shape"])
        )
        offset += 4 * n
    net_cfg = UNetConfig.from_dict(header["net_config"])
    if ParamManifest.from_list(header["manifest"]).to_list() != build_manifest(net_cfg).to_list():
        raise CheckpointError(f"{origin}: manifest does not match the network configuration")
    params = {k[len("param/") :]: v for k, v in arrays.items() if k.startswith("param/")}
    moments = {k: v for k, v in arrays.items() if k.startswith(("m/", "v/"))}
    best = None
    if "best" in header:
        best = dict(header["best"])
        best["params"] = {k[len("best/param/") :]: v for k, v in arrays.items() if k.startswith("best/param/")}
        best["moments"] = {k[len("best/") :]: v for k, v in arrays.items() if k.startswith(("best/m/", "best/v/"))}
    return Checkpoint(
        mode=header["mode"],
        net_config=net_cfg,
        params=params,
        train_config=header.get("train_config"),
        moments=moments,
        step=header["step"],
        rng_state=header.get("rng_state"),
        meta=header.get("meta", {}),
        best=best,
    )


def fixed_checkpoint(theta: np.ndarray, net_cfg: UNetConfig, phi: float, meta: Optional[dict] = None) -> Checkpoint:
    """Standalone fixed-weight network, e.g. weights exported from a hypernetwork."""
    return Checkpoint(
        mode="fixed",
        net_config=net_cfg,
        params={"theta": np.asarray(theta, dtype=np.float32).reshape(-1)},
        meta={"phi": phi, **(meta or {})},
    )
