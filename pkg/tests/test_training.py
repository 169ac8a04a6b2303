import math

import numpy as np
import pytest

from hyperscale import checkpoint as ckpt_io
from hyperscale.data import synth_shapes, split
from hyperscale.hypernet import HyperNet
from hyperscale.tensor import NumericalError, Tensor
from hyperscale.training import (
    Adam,
    PriorSpec,
    TrainConfig,
    Trainer,
    adam_step,
    fit,
    sample_factor,
    train_step_fixed,
    train_step_hyper,
    train_step_variable_resolution,
)
from hyperscale.unet import RescalePolicy, UNetConfig, build_manifest

TINY = UNetConfig(in_channels=1, num_classes=3, encoder_channels=(4, 4, 6, 6, 8), decoder_channels=(6, 4, 4, 4))


@pytest.fixture(scope="module")
def splits():
    return split(synth_shapes(24, 24, 2, seed=1), 0.75, seed=0)


# -- priors ---------------------------------------------------------------------


def test_degenerate_prior():
    rng = np.random.default_rng(0)
    assert {sample_factor(PriorSpec(0.5, 0.5), rng) for _ in range(20)} == {0.5}


def test_uniform_prior_mean():
    rng = np.random.default_rng(0)
    draws = [sample_factor(PriorSpec(0, 1), rng) for _ in range(100_000)]
    assert abs(np.mean(draws) - 0.5) < 0.01


def test_restricted_prior_bound():
    rng = np.random.default_rng(1)
    assert max(sample_factor(PriorSpec(0, 0.6), rng) for _ in range(10_000)) <= 0.6


def test_prior_validation():
    with pytest.raises(ValueError):
        PriorSpec(0.6, 0.4)
    assert PriorSpec.centered(0.5, 0.1) == PriorSpec(0.4, 0.6)


# -- Adam -----------------------------------------------------------------------


def test_adam_first_step_is_signed_lr():
    p, m, v = np.array([1.0]), np.zeros(1), np.zeros(1)
    adam_step(p, np.array([4.0]), m, v, 1, lr=0.01)
    assert p[0] == pytest.approx(1.0 - 0.01, abs=1e-9)


def test_adam_zero_gradient_leaves_params():
    p = np.array([1.0, -2.0, 3.0], dtype=np.float32)
    before = p.copy()
    adam_step(p, np.zeros(3, np.float32), np.zeros(3, np.float32), np.zeros(3, np.float32), 1, lr=0.1)
    np.testing.assert_array_equal(p, before)


def test_adam_quadratic_against_scalar_recurrence():
    p, m, v = np.zeros(1), np.zeros(1), np.zeros(1)
    # independent scalar recurrence
    w, mm, vv = 0.0, 0.0, 0.0
    for t in range(1, 101):
        adam_step(p, 2 * (p - 3), m, v, t, lr=0.1)
        g = 2 * (w - 3)
        mm = 0.9 * mm + 0.1 * g
        vv = 0.99 * vv + 0.01 * g * g
        w -= 0.1 * (mm / (1 - 0.9**t)) / (math.sqrt(vv / (1 - 0.99**t)) + 1e-8)
    assert abs(p[0] - 3) < 0.2
    assert p[0] == pytest.approx(w, abs=1e-9)


def test_adam_rejects_non_finite_gradient():
    p = np.ones(2)
    with pytest.raises(NumericalError):
        adam_step(p, np.array([np.nan, 1.0]), np.zeros(2), np.zeros(2), 1, lr=0.1)
    np.testing.assert_array_equal(p, 1.0)


# -- single steps ----------------------------------------------------------------


def _batch(ds, n=4):
    return ds.batch(list(range(n)))


def test_hyper_first_loss_near_uniform_entropy(splits):
    train, _ = splits
    net = HyperNet.create(build_manifest(TINY), 2, seed=0)
    loss = train_step_hyper(_batch(train), net, Adam(), RescalePolicy.single(0.5), TINY)
    assert abs(loss - math.log(TINY.num_classes)) < 0.5


def test_hyper_step_only_hypernet_has_moments(splits):
    train, _ = splits
    net = HyperNet.create(build_manifest(TINY), 2, seed=0)
    opt = Adam()
    train_step_hyper(_batch(train), net, opt, RescalePolicy.single(0.5), TINY)
    assert set(opt.m) == set(HyperNet.PARAM_NAMES)


def test_hyper_step_matches_dense_autodiff(splits):
    # reference: backpropagate through the whole MLP and update with dense gradients
    train, _ = splits
    policy = RescalePolicy.single(0.35)
    fast = HyperNet.create(build_manifest(TINY), 2, seed=2)
    slow = HyperNet.create(build_manifest(TINY), 2, seed=2)
    opt_fast, opt_slow = Adam(lr=1e-2), Adam(lr=1e-2)
    from hyperscale.training import _loss

    for i in range(3):
        batch = train.batch([i, i + 1])
        a = train_step_hyper(batch, fast, opt_fast, policy, TINY)
        slow.zero_grad()
        loss = _loss(*batch, slow.predict(policy), policy, TINY)
        loss.backward()
        opt_slow.step(slow.parameters())
        assert a == pytest.approx(loss.item(), rel=1e-5)
    for name in HyperNet.PARAM_NAMES:
        np.testing.assert_allclose(fast.params[name].data, slow.params[name].data, rtol=1e-4, atol=1e-6)
        np.testing.assert_allclose(opt_fast.v[name], opt_slow.v[name], rtol=1e-3, atol=1e-12)


def test_outer_product_adam_rejects_overflow():
    p = Tensor(np.zeros((2, 2), np.float32), requires_grad=True)
    with pytest.raises(NumericalError):
        Adam().step({"w": p}, outer={"w": (np.array([1e20, 0.0]), np.array([1e20, 1.0]))})
    with pytest.raises(NumericalError):
        Adam().step({"w": p}, outer={"w": (np.array([np.nan, 0.0]), np.array([1.0, 1.0]))})
    assert not p.data.any()


def test_fixed_step_gradient_nonzero(splits):
    train, _ = splits
    from hyperscale.training import init_theta

    theta = Tensor(init_theta(build_manifest(TINY), 0), requires_grad=True)
    train_step_fixed(_batch(train), theta, Adam(), 0.5, TINY)
    assert np.abs(theta.grad).max() > 0


def test_fixed_matches_hyper_when_weights_agree(splits):
    train, _ = splits
    net = HyperNet.create(build_manifest(TINY), 2, seed=4)
    policy = RescalePolicy.single(0.5)
    theta = Tensor(net.predict(policy).numpy().copy(), requires_grad=True)
    batch = _batch(train)
    loss_fixed = train_step_fixed(batch, theta, Adam(), 0.5, TINY)
    loss_hyper = train_step_hyper(batch, net, Adam(), policy, TINY)
    assert loss_fixed == pytest.approx(loss_hyper, abs=1e-6)


def test_variable_resolution_full_scale_equals_fixed(splits):
    train, _ = splits
    from hyperscale.training import init_theta

    init = init_theta(build_manifest(TINY), 0)
    batch = _batch(train)
    a = Tensor(init.copy(), requires_grad=True)
    b = Tensor(init.copy(), requires_grad=True)
    assert train_step_variable_resolution(batch, a, Adam(), 1.0, TINY) == train_step_fixed(batch, b, Adam(), 0.5, TINY)
    assert a.data.tobytes() == b.data.tobytes()


def test_variable_resolution_small_scale_runs(splits):
    train, _ = splits
    from hyperscale.training import init_theta, varres_logits
    from hyperscale.unet import WeightSet

    theta = Tensor(init_theta(build_manifest(TINY), 0), requires_grad=True)
    x, y = _batch(train)
    loss = train_step_variable_resolution((x, y), theta, Adam(), 0.3, TINY)
    assert math.isfinite(loss)
    logits = varres_logits(x, WeightSet(Tensor(theta.data), build_manifest(TINY)), TINY, 0.3)
    assert logits.shape[2:] == y.shape[1:]


def test_hyper_loss_trace_deterministic(splits):
    train, val = splits
    cfg = TrainConfig(mode="hyper", max_steps=10, batch_size=4, seed=3, val_every=100)
    traces = []
    for _ in range(2):
        t = Trainer(TINY, cfg, train, val)
        t.run()
        traces.append([r["train_loss"] for r in t.history])
    assert traces[0] == traces[1]
    assert len(traces[0]) == 10


def test_fixed_training_decreases_loss(splits):
    train, val = splits
    t = Trainer(TINY, TrainConfig(mode="fixed", phi=0.5, max_steps=200, batch_size=4, seed=0, learning_rate=3e-3, val_every=1000), train, val)
    t.run()
    losses = np.array([r["train_loss"] for r in t.history])
    smooth = np.convolve(losses, np.ones(20) / 20, mode="valid")
    assert smooth[-1] < 0.8 * smooth[0]


# -- fit / early stopping / checkpoints --------------------------------------------


def test_fit_max_steps_zero_returns_init(splits):
    train, val = splits
    cfg = TrainConfig(mode="fixed", max_steps=0, seed=2)
    ck = fit(TINY, cfg, train, val)
    assert ck.step == 0
    fresh = Trainer(TINY, cfg, train, val)
    assert ck.params["theta"].tobytes() == fresh.params["theta"].data.tobytes()


def test_early_stop_patience_one(splits, monkeypatch):
    train, val = splits
    values = iter([1.0, 2.0, 3.0, 4.0])
    monkeypatch.setattr(Trainer, "validate", lambda self, batch_size=16: next(values))
    t = Trainer(TINY, TrainConfig(mode="fixed", max_steps=100, patience=1, val_every=2, batch_size=4), train, val)
    t.run()
    assert t.step == 4  # validated at 2 (improved) and 4 (worse) -> stop
    assert t.best_checkpoint().step == 2


def test_divergence_returns_last_good_checkpoint(splits, monkeypatch):
    train, val = splits
    t = Trainer(TINY, TrainConfig(mode="fixed", max_steps=10, batch_size=4, val_every=2), train, val)
    calls = {"n": 0}
    original = Trainer.train_step

    def flaky(self):
        calls["n"] += 1
        if calls["n"] == 5:
            raise NumericalError("boom")
        return original(self)

    monkeypatch.setattr(Trainer, "train_step", flaky)
    from hyperscale.training import TrainingDiverged

    with pytest.raises(TrainingDiverged) as info:
        t.run()
    assert info.value.checkpoint.step == 4


def test_same_seed_bit_identical_checkpoints(splits, tmp_path):
    train, val = splits
    cfg = TrainConfig(mode="hyper", prior=PriorSpec(0.2, 0.8), max_steps=6, batch_size=4, val_every=3, seed=9)
    blobs = []
    for i in range(2):
        ck = fit(TINY, cfg, train, val)
        ckpt_io.save(ck, tmp_path / f"{i}.hsck")
        blobs.append((tmp_path / f"{i}.hsck").read_bytes())
    assert blobs[0] == blobs[1]


@pytest.mark.parametrize("mode", ["hyper", "fixed", "varres"])
def test_resume_is_bit_identical(splits, tmp_path, mode):
    train, val = splits
    cfg = TrainConfig(mode=mode, max_steps=8, batch_size=4, val_every=3, seed=5)
    full = Trainer(TINY, cfg, train, val)
    full.run()

    half = Trainer(TINY, TrainConfig(**{**cfg.to_dict(), "prior": cfg.prior, "max_steps": 6}), train, val)
    half.run()
    state = half.last_checkpoint()
    state.train_config = cfg.to_dict()
    ckpt_io.save(state, tmp_path / "state.hsck")
    resumed = Trainer.resume(ckpt_io.load(tmp_path / "state.hsck"), train, val)
    resumed.run()

    assert ckpt_io.to_bytes(resumed.last_checkpoint()) == ckpt_io.to_bytes(full.last_checkpoint())
    assert ckpt_io.to_bytes(resumed.best_checkpoint()) == ckpt_io.to_bytes(full.best_checkpoint())
