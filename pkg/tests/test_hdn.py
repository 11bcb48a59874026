import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from terradepth.autodiff import ShapeError, grad_check
from terradepth.config import HdnConfig
from terradepth.hdn import build_contexts, hdn_loss, layer_medians, normalize_context, single_context


def reference_loss(gt, pred, ctxset, floor=1e-6, pred_medians=None):
    """Direct per-pixel evaluation: (1/M) sum_i mean_{u in U_i} |N_u(gt_i) - N_u(pred_i)|."""
    gt, pred = np.asarray(gt, float).ravel(), np.asarray(pred, float).ravel()
    ctxs = ctxset.contexts
    stats = []
    for k, (_, _, idx) in enumerate(ctxs):
        mg = np.median(gt[idx])
        mp = np.median(pred[idx]) if pred_medians is None else pred_medians[k]
        stats.append((mg, max(np.mean(np.abs(gt[idx] - mg)), floor),
                      mp, max(np.mean(np.abs(pred[idx] - mp)), floor)))
    per_pixel = []
    for i in np.flatnonzero(ctxset.valid.ravel()):
        us = ctxset.membership(i)
        per_pixel.append(np.mean([abs((gt[i] - stats[u][0]) / stats[u][1] - (pred[i] - stats[u][2]) / stats[u][3])
                                  for u in us]))
    return float(np.mean(per_pixel))


def test_grid_level_one_is_single_context():
    cs = build_contexts(np.random.rand(4, 4), HdnConfig(grid_levels=(1,)))
    grids = [c for c in cs.contexts if c[0] == "grid"]
    assert len(grids) == 1 and len(grids[0][2]) == 16


def test_grid_level_two_gives_four_cells():
    cs = build_contexts(np.random.rand(4, 4), HdnConfig(grid_levels=(2,), min_context_size=1))
    cells = sorted(tuple(c[2]) for c in cs.contexts if c[0] == "grid")
    assert cells == [(0, 1, 4, 5), (2, 3, 6, 7), (8, 9, 12, 13), (10, 11, 14, 15)]


def test_constant_map_collapses_range_bins():
    cs = build_contexts(np.full((8, 8), 0.3), HdnConfig(range_bins=4))
    ranges = [c for c in cs.contexts if c[0] == "depth-range"]
    quants = [c for c in cs.contexts if c[0] == "depth-quantile"]
    assert len(ranges) == 1 and len(ranges[0][2]) == 64
    assert len(quants) == 1


def test_all_invalid_map_raises():
    with pytest.raises(ValueError):
        build_contexts(np.zeros((4, 4)), valid=np.zeros((4, 4), bool))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), h=st.integers(6, 20), w=st.integers(6, 20))
def test_contexts_partition_valid_pixels(seed, h, w):
    rng = np.random.default_rng(seed)
    gt = rng.random((h, w)) ** 3
    valid = rng.random((h, w)) > 0.2
    cfg = HdnConfig(min_context_size=4)
    if valid.sum() < cfg.min_context_size:
        return
    cs = build_contexts(gt, cfg, valid)
    for layer in cs.layers:
        lab = layer.labels
        assert ((lab >= 0) == valid).all()
        counts = np.bincount(lab[valid])
        assert (counts >= 1).all()
        if len(counts) > 1:
            assert (counts >= cfg.min_context_size).all()
    assert {(l.strategy) for l in cs.layers} == {"grid", "depth-range", "depth-quantile"}


def test_normalize_context_examples():
    assert normalize_context(torch.tensor([1.0, 2.0, 3.0]), [0, 1, 2]).tolist() == pytest.approx([-1.5, 0, 1.5])
    assert normalize_context(torch.tensor([5.0, 5.0, 5.0]), [0, 1, 2]).tolist() == [0, 0, 0]
    assert normalize_context(torch.tensor([2.0, 4.0, 6.0]), [0, 1, 2]).tolist() == pytest.approx([-1.5, 0, 1.5])


def test_normalize_context_even_median():
    # median of [1, 2, 3, 10] is 2.5, MAD = (1.5 + 0.5 + 0.5 + 7.5) / 4 = 2.5
    out = normalize_context(torch.tensor([1.0, 2.0, 3.0, 10.0]), [0, 1, 2, 3])
    assert out.tolist() == pytest.approx([-0.6, -0.2, 0.2, 3.0])


def test_hand_computed_single_context():
    cs = single_context((1, 3))
    loss = hdn_loss(torch.tensor([[1.0, 3.0, 3.0]]), torch.tensor([[1.0, 2.0, 3.0]]), cs)
    assert loss.item() == pytest.approx(1.0, abs=1e-6)


def test_identity_and_affine_zero():
    gt = torch.rand(16, 16)
    cs = build_contexts(gt)
    assert hdn_loss(gt, gt, cs).item() == 0.0
    one = single_context((16, 16))
    assert hdn_loss(3.0 * gt - 0.7, gt, one).item() == pytest.approx(0.0, abs=1e-5)


def test_matches_reference_evaluation():
    rng = np.random.default_rng(3)
    gt, pred = rng.random((12, 12)), rng.random((12, 12))
    valid = rng.random((12, 12)) > 0.1
    cs = build_contexts(gt, HdnConfig(min_context_size=4), valid)
    got = hdn_loss(torch.tensor(pred), torch.tensor(gt), cs).item()
    assert got == pytest.approx(reference_loss(gt, pred, cs), rel=1e-9)


def test_batched_equals_mean_of_equal_sized_items():
    rng = np.random.default_rng(4)
    gts, preds = rng.random((3, 8, 8)), rng.random((3, 8, 8))
    css = [build_contexts(g, HdnConfig(min_context_size=4)) for g in gts]
    batched = hdn_loss(torch.tensor(preds)[:, None], torch.tensor(gts)[:, None], css).item()
    singles = [hdn_loss(torch.tensor(p), torch.tensor(g), c).item() for p, g, c in zip(preds, gts, css)]
    assert batched == pytest.approx(np.mean(singles), rel=1e-12)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), a=st.floats(0.05, 20.0), b=st.floats(-5.0, 5.0))
def test_affine_invariance_in_prediction(seed, a, b):
    rng = np.random.default_rng(seed)
    gt, pred = torch.tensor(rng.random((8, 8))), torch.tensor(rng.random((8, 8)))
    cs = build_contexts(gt, HdnConfig(min_context_size=4))
    l1 = hdn_loss(pred, gt, cs).item()
    l2 = hdn_loss(a * pred + b, gt, cs).item()
    assert l2 == pytest.approx(l1, abs=1e-6)
    assert l1 >= 0


def test_gradient_matches_frozen_median_reference():
    rng = np.random.default_rng(11)
    gt, pred = rng.random((8, 8)), rng.random((8, 8))
    cs = build_contexts(gt, HdnConfig(min_context_size=4))
    x = torch.tensor(pred, requires_grad=True)
    hdn_loss(x, torch.tensor(gt), cs).backward()
    meds = [np.median(pred.ravel()[idx]) for _, _, idx in cs.contexts]
    h = 1e-6
    num = np.zeros(64)
    for i in range(64):
        p, m = pred.copy().ravel(), pred.copy().ravel()
        p[i] += h
        m[i] -= h
        num[i] = (reference_loss(gt, p, cs, pred_medians=meds) - reference_loss(gt, m, cs, pred_medians=meds)) / (2 * h)
    assert np.max(np.abs(x.grad.numpy().ravel() - num) / np.maximum(1, np.abs(num))) <= 1e-3


def test_grad_check_with_frozen_medians():
    rng = np.random.default_rng(5)
    gt = torch.tensor(rng.random((8, 8)))
    x = torch.tensor(rng.random((8, 8)))
    cs = build_contexts(gt, HdnConfig(min_context_size=4))
    meds = layer_medians(x, cs)
    assert grad_check(lambda p: hdn_loss(p, gt, cs, pred_medians=meds), x, eps=1e-5) <= 1e-3


def test_errors():
    cs = build_contexts(np.random.rand(8, 8))
    with pytest.raises(ShapeError):
        hdn_loss(torch.zeros(8, 8), torch.zeros(8, 7), cs)
    with pytest.raises(ValueError):
        hdn_loss(torch.zeros(1, 8, 8), torch.zeros(1, 8, 8), [])
