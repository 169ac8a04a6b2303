"""Amortized (hypernetwork) training, fixed-factor baselines and the variable-resolution baseline."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from typing import Callable, Optional

import numba
import numpy as np

from .data import Dataset
from .hypernet import HyperNet, hidden_features, kaiming_std
from .resize import bilinear_resize
from .tensor import NumericalError, Tensor, cross_entropy
from .unet import (
    ParamManifest,
    RescalePolicy,
    UNetConfig,
    WeightSet,
    build_manifest,
    down_extent,
    forward,
)

logger = logging.getLogger(__name__)

MODES = ("hyper", "fixed", "varres")


@dataclass(frozen=True)
class PriorSpec:
    """Uniform prior over rescaling factors on [low, high]."""

    low: float = 0.0
    high: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.low <= self.high <= 1.0:
            raise ValueError(f"prior bounds must satisfy 0 <= low <= high <= 1, got ({self.low}, {self.high})")

    @classmethod
    def centered(cls, center: float, radius: float) -> "PriorSpec":
        return cls(center - radius, center + radius)

    def quantiles(self, n: int) -> list[float]:
        return [self.low + (k + 0.5) / n * (self.high - self.low) for k in range(n)]


def sample_factor(prior: PriorSpec, rng: np.random.Generator) -> float:
    if prior.low == prior.high:
        return prior.low
    return float(rng.uniform(prior.low, prior.high))


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "hyper"
    prior: PriorSpec = PriorSpec(0.0, 1.0)
    phi: float = 0.5
    num_factors: int = 1  # 1 = one shared factor; K = one factor per rescaling step
    batch_size: int = 8
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    max_steps: int = 4000
    patience: int = 10
    val_every: int = 0  # steps between validations; 0 = once per epoch
    val_points: int = 3
    seed: int = 0
    flip: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.batch_size < 1 or self.patience < 1 or self.max_steps < 0:
            raise ValueError("batch_size and patience must be >= 1, max_steps >= 0")
        if not 0.0 <= self.phi <= 1.0:
            raise ValueError(f"phi must lie in [0, 1], got {self.phi}")
        if isinstance(self.prior, dict):
            object.__setattr__(self, "prior", PriorSpec(**self.prior))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "prior" in d and isinstance(d["prior"], dict):
            d["prior"] = PriorSpec(**d["prior"])
        return cls(**d)


class TrainingDiverged(NumericalError):
    """Training hit a non-finite value; ``checkpoint`` is the last good state."""

    def __init__(self, message: str, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


# ---------------------------------------------------------------------------
# Adam


@numba.njit(cache=True, fastmath=True, error_model="numpy")
def _adam_kernel(p, g, m, v, lr, b1, b2, eps, c1, c2):
    step = lr / c1
    inv_c2 = 1 / c2
    one = p.dtype.type(1)
    for i in range(p.size):
        gi = g[i]
        mi = b1 * m[i] + (one - b1) * gi
        vi = b2 * v[i] + (one - b2) * gi * gi
        m[i] = mi
        v[i] = vi
        p[i] -= step * mi / (np.sqrt(vi * inv_c2) + eps)


@numba.njit(cache=True, fastmath=True, error_model="numpy")
def _adam_outer_kernel(p, u, w, m, v, lr, b1, b2, eps, c1, c2):
    # same update as _adam_kernel for the gradient outer(u, w), never materialized
    step = lr / c1
    inv_c2 = 1 / c2
    one = p.dtype.type(1)
    for i in range(p.shape[0]):
        ui = u[i]
        for j in range(p.shape[1]):
            gi = ui * w[j]
            mi = b1 * m[i, j] + (one - b1) * gi
            vi = b2 * v[i, j] + (one - b2) * gi * gi
            m[i, j] = mi
            v[i, j] = vi
            p[i, j] -= step * mi / (np.sqrt(vi * inv_c2) + eps)


@numba.njit(cache=True)
def _all_finite(g):
    for i in range(g.size):
        if not np.isfinite(g[i]):
            return False
    return True


def adam_step(param, grad, m, v, t: int, lr: float, beta1=0.9, beta2=0.99, eps=1e-8, check_finite=True):
    """In-place bias-corrected Adam update of ``param``, ``m`` and ``v`` for step ``t`` (1-based).

    A non-finite gradient raises :class:`NumericalError` before anything is modified.
    """
    if param.shape != grad.shape or param.shape != m.shape or param.shape != v.shape:
        raise ValueError("adam_step: parameter, gradient and moments must share a shape")
    flat_g = np.ascontiguousarray(grad, dtype=param.dtype).reshape(-1)
    if check_finite and not _all_finite(flat_g):
        raise NumericalError(f"non-finite gradient at Adam step {t}")
    dt = param.dtype.type
    _adam_kernel(
        param.reshape(-1), flat_g, m.reshape(-1), v.reshape(-1),
        dt(lr), dt(beta1), dt(beta2), dt(eps), dt(1 - beta1**t), dt(1 - beta2**t),
    )
    return param, m, v


class Adam:
    """Moments are kept only for the tensors handed to :meth:`step`."""

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.99, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, Tensor], outer: Optional[dict[str, tuple]] = None) -> None:
        """Update every tensor with a gradient.

        ``outer`` maps names of 2-D parameters to ``(u, w)`` pairs whose outer
        product is the gradient; those are updated without forming it.
        """
        outer = outer or {}
        grads = {}
        for name, p in params.items():
            if name in outer:
                u, w = (np.ascontiguousarray(a, dtype=p.dtype).reshape(-1) for a in outer[name])
                if (u.size, w.size) != p.shape:
                    raise ValueError(f"outer-product factors for {name} do not match shape {p.shape}")
                finite = _all_finite(u) and _all_finite(w)
                # every product stays finite when the largest one does
                if not finite or float(np.abs(u).max(initial=0)) * float(np.abs(w).max(initial=0)) > float(np.finfo(p.dtype).max):
                    raise NumericalError(f"non-finite gradient for {name}")
                grads[name] = (u, w)
                continue
            if p.grad is None:
                continue
            if not _all_finite(np.ascontiguousarray(p.grad).reshape(-1)):
                raise NumericalError(f"non-finite gradient for {name}")
            grads[name] = p.grad
        self.t += 1
        for name, g in grads.items():
            p = params[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            if isinstance(g, tuple):
                dt = p.dtype.type
                _adam_outer_kernel(
                    p.data, g[0], g[1], self.m[name], self.v[name], dt(self.lr), dt(self.beta1),
                    dt(self.beta2), dt(self.eps), dt(1 - self.beta1**self.t), dt(1 - self.beta2**self.t),
                )
                continue
            adam_step(
                p.data, g, self.m[name], self.v[name], self.t,
                self.lr, self.beta1, self.beta2, self.eps, check_finite=False,
            )


# ---------------------------------------------------------------------------
# single steps


def init_theta(manifest: ParamManifest, seed=0, slope: float = 0.01, dtype=np.float32) -> np.ndarray:
    """Kaiming-normal (fan-out) kernels and zero biases for a directly trained network."""
    rng = np.random.default_rng(seed)
    theta = np.zeros(manifest.total)
    for slot in manifest:
        if slot.name.endswith(".weight"):
            theta[slot.offset : slot.stop] = rng.normal(0.0, kaiming_std(slot.fan_out, slope), slot.size)
    return theta.astype(dtype)


def _loss(x: np.ndarray, y: np.ndarray, weights: WeightSet, policy: RescalePolicy, cfg: UNetConfig) -> Tensor:
    return cross_entropy(forward(Tensor(x.astype(weights.flat.dtype, copy=False)), weights, policy, cfg), y)


def train_step_hyper(batch, hypernet: HyperNet, opt: Adam, policy: RescalePolicy, cfg: UNetConfig) -> float:
    """One amortized step: predict weights for ``policy``, backpropagate into the hypernetwork only."""
    x, y = batch
    hypernet.zero_grad()
    # The output layer is handled by hand: its weight gradient is the outer
    # product of d(loss)/d(theta) and the hidden features, which the optimizer
    # consumes in factored form.
    params = hypernet.parameters()
    w3, b3 = params["fc3.weight"], params["fc3.bias"]
    hidden = hidden_features(policy, hypernet)
    theta = Tensor((hidden.data @ w3.data.T + b3.data).reshape(-1), requires_grad=True)
    loss = _loss(x, y, WeightSet(theta, hypernet.manifest), policy, cfg)
    loss.backward()
    g_theta = theta.grad
    hidden.backward((g_theta @ w3.data).reshape(hidden.shape))
    b3.grad = g_theta
    opt.step(params, outer={"fc3.weight": (g_theta, hidden.data)})
    return loss.item()


def train_step_fixed(batch, theta: Tensor, opt: Adam, phi: float, cfg: UNetConfig) -> float:
    x, y = batch
    theta.grad = None
    policy = RescalePolicy.single(phi)
    loss = _loss(x, y, WeightSet(theta, build_manifest(cfg)), policy, cfg)
    loss.backward()
    opt.step({"theta": theta})
    return loss.item()


def varres_logits(x: np.ndarray, weights: WeightSet, cfg: UNetConfig, scale: float, phi: float = 0.5) -> Tensor:
    """Run the network on the input resized by ``scale``; logits are resized back to the input size."""
    h, w = x.shape[2:]
    small = bilinear_resize(Tensor(x.astype(weights.flat.dtype, copy=False)), down_extent(h, scale), down_extent(w, scale))
    logits = forward(small, weights, RescalePolicy.single(phi), cfg)
    return bilinear_resize(logits, h, w)


def train_step_variable_resolution(batch, theta: Tensor, opt: Adam, scale: float, cfg: UNetConfig, phi: float = 0.5) -> float:
    """Input resized by ``scale``; only logits are interpolated, labels stay categorical."""
    x, y = batch
    theta.grad = None
    logits = varres_logits(x, WeightSet(theta, build_manifest(cfg)), cfg, scale, phi)
    loss = cross_entropy(logits, y)
    loss.backward()
    opt.step({"theta": theta})
    return loss.item()


# ---------------------------------------------------------------------------
# trainer


class Trainer:
    """Single-writer training loop state: parameters, optimizer, RNG and data order."""

    def __init__(self, net_cfg: UNetConfig, cfg: TrainConfig, train_set: Dataset, val_set: Dataset):
        if len(train_set) == 0 or len(val_set) == 0:
            raise ValueError("training and validation sets must be non-empty")
        if train_set.in_channels != net_cfg.in_channels or train_set.num_classes != net_cfg.num_classes:
            raise ValueError(
                f"dataset has {train_set.in_channels} channels / {train_set.num_classes} classes, "
                f"network expects {net_cfg.in_channels} / {net_cfg.num_classes}"
            )
        if cfg.num_factors not in (1, net_cfg.num_steps):
            raise ValueError(f"num_factors must be 1 or {net_cfg.num_steps}")
        self.net_cfg, self.cfg = net_cfg, cfg
        self.train_set, self.val_set = train_set, val_set
        self.manifest = build_manifest(net_cfg)
        init_seed, data_seed = np.random.SeedSequence(cfg.seed).spawn(2)
        if cfg.mode == "hyper":
            self.hypernet = HyperNet.create(self.manifest, 2 * cfg.num_factors, init_seed)
            self.params = self.hypernet.parameters()
        else:
            self.hypernet = None
            self.params = {"theta": Tensor(init_theta(self.manifest, init_seed, net_cfg.slope), requires_grad=True)}
        self.opt = Adam(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
        self.rng = np.random.default_rng(data_seed)
        self.step = 0
        self.perm: list[int] = []
        self.pos = 0
        self.best_val = math.inf
        self.best_step = 0
        self.bad_rounds = 0
        self.history: list[dict] = []
        self.best: Optional[dict] = None

    @property
    def steps_per_epoch(self) -> int:
        return max(1, math.ceil(len(self.train_set) / self.cfg.batch_size))

    @property
    def val_every(self) -> int:
        return self.cfg.val_every or self.steps_per_epoch

    def sample_policy(self) -> RescalePolicy:
        if self.cfg.num_factors == 1:
            return RescalePolicy.single(sample_factor(self.cfg.prior, self.rng))
        return RescalePolicy.separate([sample_factor(self.cfg.prior, self.rng) for _ in range(self.cfg.num_factors)])

    def next_batch(self):
        idx = []
        while len(idx) < self.cfg.batch_size:
            if self.pos >= len(self.perm):
                self.perm = self.rng.permutation(len(self.train_set)).tolist()
                self.pos = 0
                if idx and len(self.train_set) < self.cfg.batch_size:
                    break
            take = min(self.cfg.batch_size - len(idx), len(self.perm) - self.pos)
            idx.extend(self.perm[self.pos : self.pos + take])
            self.pos += take
        x, y = self.train_set.batch(idx)
        if self.cfg.flip:
            flips = self.rng.random(len(idx)) < 0.5
            x[flips] = x[flips, :, :, ::-1]
            y[flips] = y[flips, :, ::-1]
        return x, y

    def train_step(self) -> dict:
        batch = self.next_batch()
        mode = self.cfg.mode
        if mode == "hyper":
            policy = self.sample_policy()
            loss = train_step_hyper(batch, self.hypernet, self.opt, policy, self.net_cfg)
            drawn = str(policy)
        elif mode == "fixed":
            loss = train_step_fixed(batch, self.params["theta"], self.opt, self.cfg.phi, self.net_cfg)
            drawn = f"{self.cfg.phi:g}"
        else:
            scale = sample_factor(self.cfg.prior, self.rng)
            loss = train_step_variable_resolution(batch, self.params["theta"], self.opt, scale, self.net_cfg, self.cfg.phi)
            drawn = f"{scale:g}"
        if not math.isfinite(loss):
            raise NumericalError(f"non-finite training loss at step {self.step}")
        self.step += 1
        return {"step": self.step, "train_loss": loss, "val_loss": None, "phi": drawn}

    def val_policies(self) -> list[RescalePolicy]:
        if self.cfg.mode != "hyper":
            return [RescalePolicy.single(self.cfg.phi)]
        points = self.cfg.prior.quantiles(self.cfg.val_points)
        if self.cfg.num_factors == 1:
            return [RescalePolicy.single(p) for p in points]
        return [RescalePolicy.separate([p] * self.cfg.num_factors) for p in points]

    def weights_for(self, policy: RescalePolicy) -> WeightSet:
        if self.hypernet is not None:
            return self.hypernet.predict(policy)
        return WeightSet(Tensor(self.params["theta"].data), self.manifest)

    def validate(self, batch_size: int = 16) -> float:
        """Mean validation cross-entropy, averaged over the validation factors."""
        losses = []
        for policy in self.val_policies():
            w = _frozen(self.weights_for(policy))
            total, count = 0.0, 0
            for start in range(0, len(self.val_set), batch_size):
                idx = list(range(start, min(start + batch_size, len(self.val_set))))
                x, y = self.val_set.batch(idx)
                loss = _loss(x, y, w, policy, self.net_cfg)
                total += loss.item() * len(idx)
                count += len(idx)
            losses.append(total / count)
        return float(np.mean(losses))

    def run(self, callback: Optional[Callable[[dict], None]] = None) -> None:
        """Train until ``max_steps`` or until validation loss stops improving for ``patience`` rounds."""
        if self.best is None:
            self.best = self.snapshot()
        while self.step < self.cfg.max_steps and self.bad_rounds < self.cfg.patience:
            try:
                row = self.train_step()
            except NumericalError as err:
                raise TrainingDiverged(str(err), self.best_checkpoint()) from err
            if self.step % self.val_every == 0 or self.step == self.cfg.max_steps:
                try:
                    val = self.validate()
                except NumericalError as err:
                    raise TrainingDiverged(str(err), self.best_checkpoint()) from err
                row["val_loss"] = val
                if not math.isfinite(val):
                    raise TrainingDiverged(f"non-finite validation loss at step {self.step}", self.best_checkpoint())
                if val < self.best_val:
                    self.best_val, self.best_step, self.bad_rounds = val, self.step, 0
                    self.best = self.snapshot()
                else:
                    self.bad_rounds += 1
                logger.info("step %d train %.4f val %.4f", self.step, row["train_loss"], val)
            self.history.append(row)
            if callback is not None:
                callback(row)

    # -- checkpoint plumbing ------------------------------------------------

    def snapshot(self) -> dict:
        return {
            "params": {k: t.data.copy() for k, t in self.params.items()},
            "moments": _moments(self.opt),
            "adam_t": self.opt.t,
            "step": self.step,
            "rng_state": self.rng.bit_generator.state,
        }

    def _checkpoint(self, snap: dict, history: list[dict], best: Optional[dict] = None):
        from .checkpoint import Checkpoint

        meta = {
            "adam_t": snap["adam_t"],
            "best_val": None if math.isinf(self.best_val) else self.best_val,
            "best_step": self.best_step,
            "bad_rounds": self.bad_rounds,
            "perm": list(self.perm),
            "pos": self.pos,
            "history": history,
        }
        if self.cfg.mode != "hyper":
            meta["phi"] = self.cfg.phi
        return Checkpoint(
            mode=self.cfg.mode,
            net_config=self.net_cfg,
            train_config=self.cfg.to_dict(),
            params=snap["params"],
            moments=snap["moments"],
            step=snap["step"],
            rng_state=snap["rng_state"],
            meta=meta,
            best=best,
        )

    def best_checkpoint(self):
        snap = self.best if self.best is not None else self.snapshot()
        return self._checkpoint(snap, [r for r in self.history if r["step"] <= snap["step"]])

    def last_checkpoint(self):
        """Full state of the loop as it stands; resuming from it continues bit-identically."""
        best = self.best if self.best is not None else self.snapshot()
        return self._checkpoint(self.snapshot(), list(self.history), best)

    @classmethod
    def resume(cls, ckpt, train_set: Dataset, val_set: Dataset) -> "Trainer":
        cfg = TrainConfig.from_dict(ckpt.train_config)
        trainer = cls(ckpt.net_config, cfg, train_set, val_set)
        for name, arr in ckpt.params.items():
            trainer.params[name].data[...] = arr
        trainer.opt.t = ckpt.meta["adam_t"]
        for key, arr in ckpt.moments.items():
            kind, name = key.split("/", 1)
            (trainer.opt.m if kind == "m" else trainer.opt.v)[name] = arr.copy()
        trainer.rng.bit_generator.state = ckpt.rng_state
        trainer.step = ckpt.step
        trainer.perm = list(ckpt.meta["perm"])
        trainer.pos = ckpt.meta["pos"]
        best = ckpt.meta.get("best_val")
        trainer.best_val = math.inf if best is None else best
        trainer.best_step = ckpt.meta.get("best_step", 0)
        trainer.bad_rounds = ckpt.meta["bad_rounds"]
        trainer.history = list(ckpt.meta.get("history", []))
        trainer.best = ckpt.best
        return trainer


def _moments(opt: Adam) -> dict[str, np.ndarray]:
    out = {}
    for name in sorted(opt.m):
        out[f"m/{name}"] = opt.m[name].copy()
        out[f"v/{name}"] = opt.v[name].copy()
    return out


def _frozen(w: WeightSet) -> WeightSet:
    return WeightSet(Tensor(w.flat.data), w.manifest)


def fit(net_cfg: UNetConfig, cfg: TrainConfig, train_set: Dataset, val_set: Dataset, callback=None):
    """Train from scratch and return the checkpoint with the lowest validation loss.

    With ``max_steps=0`` the initialization is returned. A non-finite loss
    raises :class:`TrainingDiverged` carrying the best checkpoint so far.
    """
    trainer = Trainer(net_cfg, cfg, train_set, val_set)
    trainer.run(callback)
    return trainer.best_checkpoint()
