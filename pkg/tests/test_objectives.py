import math

import numpy as np
import pytest
import torch
from conftest import finite_difference_check
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import gaussian_cell, heatmap_loss_loop, offset_loss_loop, pck_loop

from textcape.decoder import inverse_sigmoid
from textcape.objectives import (ObjectiveError, gt_heatmap, heatmap_loss, offset_loss, pck,
                                 total_loss)


def test_gt_peak_at_cell_center():
    kp = torch.tensor([[(2 + 0.5) / 4, (1 + 0.5) / 4]])
    h = gt_heatmap(kp, torch.tensor([True]), 4, 4, 1.0)
    assert h[0, 1, 2] == 1.0
    for r, c in [(0, 2), (2, 2), (1, 1), (1, 3)]:
        assert h[0, r, c].item() == pytest.approx(math.exp(-0.5), abs=1e-7)
    assert h[0, 1, 2] == h.max()


def test_gt_matches_scalar_gaussian():
    kp = torch.tensor([[0.31, 0.77]], dtype=torch.float64)
    h = gt_heatmap(kp, torch.tensor([True]), 5, 6, 1.3)
    for r in range(5):
        for c in range(6):
            assert h[0, r, c].item() == pytest.approx(gaussian_cell(r, c, 0.31, 0.77, 5, 6, 1.3))


def test_gt_invisible_is_zero():
    h = gt_heatmap(torch.tensor([[0.5, 0.5]]), torch.tensor([False]), 4, 4)
    assert not h.any()
    with pytest.raises(ObjectiveError):
        gt_heatmap(torch.tensor([[0.5, 0.5]]), torch.tensor([True]), 4, 4, 0.0)


def test_heatmap_loss_logit_inverse():
    H = gt_heatmap(torch.rand(3, 2), torch.ones(3, dtype=torch.bool), 4, 4).double()
    M = inverse_sigmoid(H, eps=1e-9)
    assert heatmap_loss(M, H.clamp(1e-9, 1 - 1e-9), torch.ones(3, dtype=torch.bool)) < 1e-6


def test_heatmap_loss_half():
    loss = heatmap_loss(torch.zeros(1, 3, 3), torch.zeros(1, 3, 3), torch.tensor([True]))
    assert loss.item() == 0.5


def test_heatmap_loss_brute_force_with_mask():
    M = torch.tensor([[[0.3, -1.2], [2.0, 0.1]], [[5.0, -5.0], [1.0, 1.0]]], dtype=torch.float64)
    H = torch.tensor([[[0.9, 0.1], [0.0, 0.4]], [[0.2, 0.2], [0.2, 0.2]]], dtype=torch.float64)
    mask = [True, False]
    got = heatmap_loss(M, H, torch.tensor(mask)).item()
    assert got == pytest.approx(heatmap_loss_loop(M.tolist(), H.tolist(), mask), abs=1e-12)


def test_heatmap_loss_needs_a_keypoint():
    with pytest.raises(ObjectiveError):
        heatmap_loss(torch.zeros(2, 2, 2), torch.zeros(2, 2, 2), torch.tensor([False, False]))


def test_offset_loss_examples():
    gt = torch.tensor([[0.4, 0.5]], dtype=torch.float64)
    m = torch.tensor([True])
    assert offset_loss(gt[None], gt, m).item() == 0.0
    pred = torch.tensor([[[0.5, 0.7]]], dtype=torch.float64)
    assert offset_loss(pred, gt, m).item() == pytest.approx(0.3, abs=1e-12)
    two = torch.tensor([[[0.5, 0.7]], [[0.45, 0.45]]], dtype=torch.float64)
    assert offset_loss(two, gt, m).item() == pytest.approx(0.2, abs=1e-12)


@pytest.mark.parametrize("h,o,lam,expected", [(0.5, 0.2, 1.0, 0.7), (0.5, 0.2, 0.0, 0.2),
                                              (0.25, 0.1, 4.0, 1.1)])
def test_total_loss(h, o, lam, expected):
    assert total_loss(h, o, lam) == pytest.approx(expected, abs=1e-15)


def test_total_loss_rejects_negative_lambda():
    with pytest.raises(ObjectiveError):
        total_loss(1.0, 1.0, -1.0)


def test_pck_examples():
    gt = np.array([[10.0, 10.0]])
    assert pck(gt, gt, (100, 50)) == 1.0
    assert pck(gt + [19.0, 0.0], gt, (100, 50), 0.2) == 1.0
    assert pck(gt + [21.0, 0.0], gt, (100, 50), 0.2) == 0.0


def test_pck_brute_force_random():
    rng = np.random.default_rng(11)
    pred, gt = rng.uniform(0, 64, (10, 2)), rng.uniform(0, 64, (10, 2))
    mask = rng.random(10) > 0.2
    assert pck(pred, gt, (40, 30), 0.2, mask) == pck_loop(pred.tolist(), gt.tolist(), (40, 30),
                                                         0.2, mask.tolist())


def test_pck_errors():
    with pytest.raises(ObjectiveError):
        pck([[0, 0]], [[0, 0]], (0, 0))
    with pytest.raises(ObjectiveError):
        pck([[0, 0]], [[0, 0]], (10, 10), mask=[False])


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), L=st.integers(1, 3), K=st.integers(2, 6))
def test_losses_ignore_masked_content(seed, L, K):
    g = torch.Generator().manual_seed(seed)
    mask = torch.rand(K, generator=g) > 0.4
    mask[0] = True
    M = torch.randn(K, 3, 3, generator=g, dtype=torch.float64)
    H = torch.rand(K, 3, 3, generator=g, dtype=torch.float64)
    P = torch.rand(L, K, 2, generator=g, dtype=torch.float64)
    gt = torch.rand(K, 2, generator=g, dtype=torch.float64)
    M2, H2, P2 = M.clone(), H.clone(), P.clone()
    M2[~mask] = torch.randn(int((~mask).sum()), 3, 3, dtype=torch.float64)
    H2[~mask] = 0.123
    P2[:, ~mask] = 0.9
    assert heatmap_loss(M, H, mask) == heatmap_loss(M2, H2, mask)
    assert offset_loss(P, gt, mask) == offset_loss(P2, gt, mask)
    assert heatmap_loss(M, H, mask) >= 0 and offset_loss(P, gt, mask) >= 0


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_offset_loss_translation_consistent(seed):
    g = torch.Generator().manual_seed(seed)
    P = torch.rand(2, 4, 2, generator=g, dtype=torch.float64) * 0.5 + 0.2
    gt = torch.rand(4, 2, generator=g, dtype=torch.float64) * 0.5 + 0.2
    shift = torch.tensor([0.13, -0.11], dtype=torch.float64)
    m = torch.ones(4, dtype=torch.bool)
    assert offset_loss(P + shift, gt + shift, m).item() == pytest.approx(
        offset_loss(P, gt, m).item(), abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), dx=st.floats(-50, 50), dy=st.floats(-50, 50))
def test_pck_translation_and_monotonicity(seed, dx, dy):
    rng = np.random.default_rng(seed)
    pred, gt = rng.uniform(0, 64, (8, 2)), rng.uniform(0, 64, (8, 2))
    base = pck(pred, gt, (30, 20))
    assert pck(pred + [dx, dy], gt + [dx, dy], (30, 20)) == pytest.approx(base)
    # moving every prediction further from its target can only lose hits
    farther = gt + (pred - gt) * 1.5
    assert pck(farther, gt, (30, 20)) <= base


def test_loss_gradients_match_finite_differences():
    g = torch.Generator().manual_seed(2)
    M = torch.randn(3, 2, 2, generator=g, dtype=torch.float64, requires_grad=True)
    H = torch.rand(3, 2, 2, generator=g, dtype=torch.float64)
    P = torch.rand(1, 3, 2, generator=g, dtype=torch.float64, requires_grad=True)
    gt = torch.rand(3, 2, generator=g, dtype=torch.float64)
    mask = torch.tensor([True, True, False])
    assert finite_difference_check([M], lambda: heatmap_loss(M, H, mask)) <= 1e-4
    assert finite_difference_check([P], lambda: offset_loss(P, gt, mask)) <= 1e-4
