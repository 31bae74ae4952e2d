import csv

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import cldtrack.trainer as trainer_mod
from cldtrack.errors import DegenerateInputError, DimensionMismatchError, TrainingDivergedError
from cldtrack.geometry import BBox
from cldtrack.gradcheck import check_point, make_problem, run_gradcheck
from cldtrack.losses import (LAMBDA_IOU_GRID, LAMBDA_L1_GRID, LossConfig, combine, finite_diff_grad, focal_loss,
                             focal_loss_grad, gaussian_target, giou_loss, giou_loss_grad, l1_loss, l1_loss_grad,
                             lambda_sweep_grid, relative_error, total_loss)
from cldtrack.trainer import TRACE_COLUMNS, train_toy

int_box = st.tuples(st.integers(-6, 6), st.integers(-6, 6), st.integers(1, 6), st.integers(1, 6))
real_box = st.tuples(st.floats(-5, 5), st.floats(-5, 5), st.floats(0.1, 5), st.floats(0.1, 5))


def _cells(b):
    x, y, w, h = b
    return {(i, j) for i in range(x, x + w) for j in range(y, y + h)}


def _giou_by_enumeration(a, b):
    ca, cb = _cells(a), _cells(b)
    x1, y1 = min(a[0], b[0]), min(a[1], b[1])
    x2, y2 = max(a[0] + a[2], b[0] + b[2]), max(a[1] + a[3], b[1] + b[3])
    hull = (x2 - x1) * (y2 - y1)
    union = len(ca | cb)
    return 1 - (len(ca & cb) / union - (hull - union) / hull)


def test_giou_worked_example():
    loss = giou_loss(BBox(0, 0, 2, 2), BBox(1, 1, 2, 2))
    assert abs(loss - (1 - (1 / 7 - 2 / 9))) < 1e-15
    assert abs(loss - _giou_by_enumeration((0, 0, 2, 2), (1, 1, 2, 2))) < 1e-15
    assert round(loss, 3) == 1.079


@given(int_box, int_box)
def test_giou_matches_area_enumeration(a, b):
    assert abs(giou_loss(BBox(*a), BBox(*b)) - _giou_by_enumeration(a, b)) < 1e-12


@given(real_box, real_box)
def test_giou_symmetric_and_bounded(a, b):
    ab, ba = giou_loss(BBox(*a), BBox(*b)), giou_loss(BBox(*b), BBox(*a))
    assert abs(ab - ba) < 1e-12 and -1e-12 <= ab <= 2 + 1e-12
    assert giou_loss(BBox(*a), BBox(*a)) == 0.0


def test_giou_far_apart_tends_to_two():
    losses = [giou_loss(BBox(0, 0, 1, 1), BBox(d, d, 1, 1)) for d in (2, 10, 100, 1e4)]
    assert all(a < b for a, b in zip(losses, losses[1:])) and 2 - losses[-1] < 1e-3
    with pytest.raises(DegenerateInputError):
        giou_loss_grad((0, 0, 0, 1), (0, 0, 1, 1))


def test_l1_cases(rng):
    assert l1_loss(BBox(1, 2, 3, 4), BBox(1, 2, 3, 4)) == 0.0
    assert abs(l1_loss(np.array([0.5, 0.5, 0.2, 0.2]), np.array([0.4, 0.4, 0.1, 0.1])) - 0.1) < 1e-15
    for _ in range(50):
        p, g = rng.random(4), rng.random(4)
        ref = (abs(p[0] - g[0]) + abs(p[1] - g[1]) + abs(p[2] - g[2]) + abs(p[3] - g[3])) / 4
        assert abs(l1_loss(p, g) - ref) < 1e-15


def test_focal_cases():
    t = np.zeros((5, 5))
    t[2, 2] = 1.0
    assert focal_loss(t.copy(), t) < 1e-5
    p = np.full((5, 5), 0.5)
    ref = -(0.5 ** 2) * np.log(0.5) + 24 * (-(1.0 ** 4) * 0.5 ** 2 * np.log(0.5))
    got = focal_loss(p, t)
    assert got > 0 and abs(got - ref) < 1e-12
    g = gaussian_target(5, 2, 2)
    assert g[2, 2] == 1.0 and (g == 1.0).sum() == 1
    with pytest.raises(DimensionMismatchError):
        focal_loss(np.zeros((2, 2)), np.zeros((3, 3)))
    with pytest.raises(ValueError):
        focal_loss(np.full((2, 2), 1.5), np.zeros((2, 2)))
    assert (LossConfig().focal_alpha, LossConfig().focal_beta) == (2.0, 4.0)


@given(st.integers(0, 10_000))
def test_focal_decreases_toward_target(seed):
    rng = np.random.default_rng(seed)
    target = gaussian_target(6, *rng.integers(0, 6, 2))
    start = rng.uniform(0.05, 0.95, (6, 6))
    goal = np.where(target == 1.0, 0.999, target * 0.5)
    vals = [focal_loss(start + s * (goal - start), target) for s in (0, 0.25, 0.5, 0.75, 1)]
    assert all(b <= a + 1e-12 for a, b in zip(vals, vals[1:]))


def test_total_and_combine():
    assert abs(combine(0.5, 0.1, 0.02) - 0.8) < 1e-15
    assert combine(0.0, 0.0, 0.0) == 0.0
    t = gaussian_target(4, 1, 1)
    p = np.clip(t, 0.1, 0.9)
    box = BBox(0.2, 0.2, 0.3, 0.3)
    gt = BBox(0.25, 0.2, 0.3, 0.35)
    assert total_loss(p, box, t, gt) == combine(focal_loss(p, t), giou_loss(box, gt), l1_loss(box, gt))


@given(st.floats(0, 5), st.floats(0, 5), st.floats(0, 5), st.floats(0, 1))
def test_total_is_monotone_in_each_component(c, i, l, bump):
    base = combine(c, i, l)
    assert combine(c + bump, i, l) >= base and combine(c, i + bump, l) >= base and combine(c, i, l + bump) >= base


def test_lambda_grid():
    grid = lambda_sweep_grid()
    assert len(grid) == 16 and (2.0, 5.0) in [(g.lambda_iou, g.lambda_l1) for g in grid]
    assert [g.lambda_iou for g in grid[:4]] == [LAMBDA_IOU_GRID[0]] * 4
    assert [g.lambda_l1 for g in grid[:4]] == list(LAMBDA_L1_GRID)
    assert (LossConfig().lambda_iou, LossConfig().lambda_l1) == (2.0, 5.0)
    with pytest.raises(ValueError):
        LossConfig(lambda_iou=-1)


def test_finite_differences():
    assert abs(finite_diff_grad(lambda p: float(p[0] ** 2), [3.0])[0] - 6.0) < 1e-6
    assert np.array_equal(finite_diff_grad(lambda p: 4.2, np.ones(5)), np.zeros(5))
    with pytest.raises(ValueError):
        finite_diff_grad(lambda p: 0.0, [1.0], epsilon=0)
    assert relative_error(np.array([1e-9]), np.array([2e-9]))[0] < 1e-2


def test_component_gradients(rng):
    for _ in range(20):
        p = np.concatenate([rng.uniform(0, 1, 2), rng.uniform(0.2, 1, 2)])
        g = np.concatenate([rng.uniform(0, 1, 2), rng.uniform(0.2, 1, 2)])
        for fn in (giou_loss_grad, l1_loss_grad):
            num = finite_diff_grad(lambda v: fn(v, g)[0], p)
            assert np.max(relative_error(fn(p, g)[1], num)) < 1e-4
    t = gaussian_target(4, 1, 2)
    p = rng.uniform(0.05, 0.95, (4, 4))
    num = finite_diff_grad(lambda v: focal_loss(v.reshape(4, 4), t), p).reshape(4, 4)
    assert np.max(relative_error(focal_loss_grad(p, t)[1], num)) < 1e-4


def test_model_gradient_one_point():
    params, batch = make_problem(0)
    res = check_point(params, batch)
    assert res.max_rel_error <= 1e-4 and set(res.per_group) == set(params.arrays())
    assert check_point(params, batch, corrupt=0.01).max_rel_error > 1e-3


def test_gradcheck_is_deterministic():
    a = run_gradcheck(points=1, seed=3)
    b = run_gradcheck(points=1, seed=3)
    assert a[0].max_rel_error == b[0].max_rel_error


def test_zero_lr_keeps_parameters():
    params, batch = make_problem(1)
    res = train_toy(params, batch, steps=5, lr=0.0)
    assert res.params is params and len(res.trace) == 6
    assert len(set(res.losses.tolist())) == 1


def test_training_reduces_loss_and_repeats_exactly(tmp_path):
    params, batch = make_problem(2)
    a = train_toy(params, batch, steps=60, lr=0.1)
    b = train_toy(params, batch, steps=60, lr=0.1)
    assert a.trace == b.trace and a.final_loss < a.initial_loss
    assert np.array_equal(a.params.to_vector(), b.params.to_vector())
    assert np.all(np.diff(a.running_min) <= 0)
    a.write_csv(tmp_path / "t.csv")
    rows = list(csv.reader(open(tmp_path / "t.csv")))
    assert tuple(rows[0]) == TRACE_COLUMNS and len(rows) == 62 and float(rows[-1][1]) == a.final_loss


def test_minibatch_training_is_seeded():
    params, batch = make_problem(2)
    a = train_toy(params, batch, steps=10, lr=0.1, batch_size=1, seed=4)
    b = train_toy(params, batch, steps=10, lr=0.1, batch_size=1, seed=4)
    c = train_toy(params, batch, steps=10, lr=0.1, batch_size=1, seed=5)
    assert a.trace == b.trace and a.trace != c.trace


def test_divergence_reports_step(monkeypatch):
    params, batch = make_problem(0)
    real = trainer_mod.forward_backward
    calls = {"n": 0}

    def flaky(*args, **kwargs):
        calls["n"] += 1
        loss, comp, grads = real(*args, **kwargs)
        return (float("nan") if calls["n"] == 4 else loss), comp, grads

    monkeypatch.setattr(trainer_mod, "forward_backward", flaky)
    with pytest.raises(TrainingDivergedError) as info:
        train_toy(params, batch, steps=10, lr=0.1)
    assert info.value.step == 3


def test_trainer_argument_checks():
    params, batch = make_problem(0)
    with pytest.raises(ValueError):
        train_toy(params, batch, steps=-1)
    with pytest.raises(ValueError):
        train_toy(params, batch, lr=-0.1)
