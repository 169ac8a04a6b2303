import numpy as np
import pytest

from hyperscale import checkpoint as ckpt_io
from hyperscale.cost import (
    InfeasibleSelection,
    SelectionConstraint,
    flops,
    frontier_report,
    pareto_front,
    pareto_mask,
    random_search_select,
    select_factor,
)
from hyperscale.data import synth_shapes
from hyperscale.evaluation import SweepCurve, SweepRecord, sweep
from hyperscale.hypernet import init_hypernet
from hyperscale.tensor import Tensor, conv2d, count_flops
from hyperscale.unet import RescalePolicy, UNetConfig, WeightSet, build_manifest, forward

SMALL = UNetConfig(in_channels=1, num_classes=3, encoder_channels=(2, 3, 4, 4, 5), decoder_channels=(4, 3, 3, 2))
K3 = UNetConfig(in_channels=1, num_classes=3, encoder_channels=(2, 3, 4, 5), decoder_channels=(4, 3, 2))


def dominance_oracle(points):
    """O(n^2): keep p unless some q has (acc >= and cost <) or (acc > and cost <=)."""
    keep = []
    for i, (a, c) in enumerate(points):
        dominated = any((qa >= a and qc < c) or (qa > a and qc <= c) for j, (qa, qc) in enumerate(points) if j != i)
        keep.append(not dominated)
    return keep


def instrumented(cfg, policy, h, w):
    m = build_manifest(cfg)
    with count_flops() as n:
        forward(Tensor(np.zeros((1, cfg.in_channels, h, w), np.float32)), WeightSet(Tensor(np.zeros(m.total, np.float32)), m), policy, cfg)
    return n[0]


# -- FLOPs -----------------------------------------------------------------------


def test_single_conv_closed_form():
    with count_flops() as n:
        conv2d(Tensor(np.zeros((1, 2, 8, 8))), Tensor(np.zeros((3, 2, 3, 3))), Tensor(np.zeros(3)))
    assert n[0] == 2 * 9 * 2 * 3 * 64 == 6912


@pytest.mark.parametrize("phi", [0.0, 0.01, 0.2, 0.37, 0.5, 0.73, 1.0])
@pytest.mark.parametrize("size", [(32, 32), (29, 41)])
def test_analytic_equals_instrumented(phi, size):
    report = flops(SMALL, RescalePolicy.single(phi), *size)
    assert report.total == instrumented(SMALL, RescalePolicy.single(phi), *size)
    assert report.total == sum(f for _, f in report.per_layer)
    assert all(f >= 0 for _, f in report.per_layer)


def test_separate_policy_instrumented():
    policy = RescalePolicy.separate([0.5, 0.9, 0.3, 1.0])
    assert flops(SMALL, policy, 40, 36).total == instrumented(SMALL, policy, 40, 36)


def test_floor_cost_all_clamped():
    low = flops(SMALL, RescalePolicy.single(0.0), 32, 32)
    assert low.total == instrumented(SMALL, RescalePolicy.single(0.0), 32, 32)
    assert low.total == flops(SMALL, RescalePolicy.single(0.01), 32, 32).total
    assert all(low.total <= flops(SMALL, RescalePolicy.single(p), 32, 32).total for p in np.linspace(0, 1, 21))


def test_flops_monotone_single():
    prev = 0
    for p in np.round(np.arange(0.05, 1.0001, 0.05), 10):
        cur = flops(SMALL, RescalePolicy.single(float(p)), 64, 64).total
        assert cur >= prev
        prev = cur
    assert flops(SMALL, RescalePolicy.single(0.6), 64, 64).total >= flops(SMALL, RescalePolicy.single(0.5), 64, 64).total


def test_flops_componentwise_monotone():
    axis = [round(0.05 * i, 10) for i in range(1, 21)]
    rng = np.random.default_rng(0)
    for _ in range(40):
        base = [float(v) for v in rng.choice(axis, size=3)]
        for i in range(3):
            for up in (a for a in axis if a > base[i]):
                hi = list(base)
                hi[i] = up
                assert flops(K3, RescalePolicy.separate(hi), 48, 48).total >= flops(K3, RescalePolicy.separate(base), 48, 48).total


def test_peak_memory_positive_and_monotone():
    a = flops(SMALL, RescalePolicy.single(0.3), 32, 32).peak_memory
    b = flops(SMALL, RescalePolicy.single(0.9), 32, 32).peak_memory
    assert 0 < a <= b


def test_variable_resolution_cost_includes_resizes():
    base = flops(SMALL, RescalePolicy.single(0.5), 32, 32)
    same = flops(SMALL, RescalePolicy.single(0.5), 32, 32, input_scale=1.0)
    small = flops(SMALL, RescalePolicy.single(0.5), 32, 32, input_scale=0.5)
    # the wrapper adds its two resize layers even at scale 1
    assert same.total == base.total + 8 * 1 * 32 * 32 + 8 * 3 * 32 * 32
    assert small.total < base.total
    assert dict(small.per_layer)["output_resize"] == 8 * 3 * 32 * 32


# -- Pareto ------------------------------------------------------------------------


def test_pareto_hand_example():
    assert pareto_front([(0.9, 10), (0.8, 5), (0.7, 8)]) == [(0.9, 10), (0.8, 5)]
    assert pareto_front([(0.5, 3)]) == [(0.5, 3)]
    with pytest.raises(ValueError):
        pareto_front([])


def test_pareto_ties_kept():
    pts = [(0.8, 5), (0.8, 5), (0.7, 5), (0.8, 6)]
    assert pareto_mask(*zip(*pts)).tolist() == [True, True, False, False]


@pytest.mark.parametrize("seed", range(5))
def test_pareto_matches_dominance_oracle(seed):
    rng = np.random.default_rng(seed)
    # coarse values force many ties
    pts = [(float(a), float(c)) for a, c in zip(rng.integers(0, 20, 200) / 20, rng.integers(0, 30, 200))]
    assert pareto_mask(*zip(*pts)).tolist() == dominance_oracle(pts)
    front = pareto_front(pts)
    assert max(a for a, _ in pts) in [a for a, _ in front]


# -- selection -----------------------------------------------------------------------


def hand_curve():
    return SweepCurve(
        [
            SweepRecord(0.2, None, 0.88, 1_000_000_000, 0),
            SweepRecord(0.5, None, 0.91, 1_600_000_000, 0),
            SweepRecord(0.8, None, 0.90, 2_800_000_000, 0),
        ]
    )


def test_select_hand_curve():
    assert select_factor(hand_curve(), SelectionConstraint(0.90)).phi == 0.5
    assert select_factor(hand_curve(), SelectionConstraint(0.0)).phi == 0.2


def test_select_infeasible_reports_max():
    with pytest.raises(InfeasibleSelection) as info:
        select_factor(hand_curve(), SelectionConstraint(0.99))
    assert info.value.max_accuracy == 0.91
    assert "0.91" in str(info.value)


def test_select_equal_cost_prefers_accuracy_then_smaller_phi():
    curve = SweepCurve([SweepRecord(0.3, None, 0.8, 10, 0), SweepRecord(0.31, None, 0.85, 10, 0), SweepRecord(0.32, None, 0.85, 10, 0)])
    assert select_factor(curve, SelectionConstraint(0.5)).phi == 0.31


def test_alpha_out_of_range():
    with pytest.raises(ValueError):
        SelectionConstraint(1.5)


def test_selection_lies_on_frontier():
    rng = np.random.default_rng(3)
    for _ in range(50):
        n = 30
        recs = [SweepRecord(round(0.01 * (i + 1), 4), None, float(rng.integers(0, 10) / 10), int(rng.integers(1, 8)), 0) for i in range(n)]
        curve = SweepCurve(recs)
        alpha = float(rng.uniform(0, 0.9))
        try:
            sel = select_factor(curve, SelectionConstraint(alpha))
        except InfeasibleSelection:
            continue
        oracle = dominance_oracle([(r.mean_dice, r.flops) for r in recs])
        assert oracle[recs.index(sel)]


def test_frontier_report_format():
    text = frontier_report(hand_curve(), 0.5)
    lines = text.splitlines()
    assert lines[0] == "phi,accuracy,flops,on_frontier,selected"
    assert lines[2].endswith(",1,1")
    assert len(lines) == 4


# -- random search ---------------------------------------------------------------


@pytest.fixture(scope="module")
def hyper_setup():
    m = build_manifest(SMALL)
    ck = ckpt_io.Checkpoint("hyper", SMALL, init_hypernet(m, 2, seed=1), train_config={"seed": 1})
    return ck, synth_shapes(2, 16, 2, seed=0)


def test_random_search_full_budget_agrees_with_grid(hyper_setup):
    ck, data = hyper_setup
    curve = sweep(ck, data, step=0.05)
    alpha = sorted(r.mean_dice for r in curve.records)[len(curve.records) // 2]
    c = SelectionConstraint(alpha)
    found = random_search_select(ck, data, c, budget=100, rng=np.random.default_rng(0), step=0.05)
    assert found.phi == select_factor(curve, c).phi


def test_random_search_budget_one_and_reproducible(hyper_setup):
    ck, data = hyper_setup
    a = random_search_select(ck, data, SelectionConstraint(0.0), 1, np.random.default_rng(5), step=0.05)
    b = random_search_select(ck, data, SelectionConstraint(0.0), 1, np.random.default_rng(5), step=0.05)
    assert a.phi == b.phi
    # the single draw is returned only when it is feasible
    assert a.mean_dice < 1.0
    with pytest.raises(InfeasibleSelection):
        random_search_select(ck, data, SelectionConstraint(min(1.0, a.mean_dice + 1e-9)), 1, np.random.default_rng(5), step=0.05)
    with pytest.raises(ValueError):
        random_search_select(ck, data, SelectionConstraint(0.0), 0, np.random.default_rng(5))


@pytest.mark.parametrize("scale", [0.4, 1.0])
def test_variable_resolution_analytic_equals_instrumented(scale):
    from hyperscale.training import varres_logits

    m = build_manifest(SMALL)
    with count_flops() as n:
        varres_logits(np.zeros((1, 1, 30, 30), np.float32), WeightSet(Tensor(np.zeros(m.total, np.float32)), m), SMALL, scale, 0.5)
    assert n[0] == flops(SMALL, RescalePolicy.single(0.5), 30, 30, input_scale=scale).total
