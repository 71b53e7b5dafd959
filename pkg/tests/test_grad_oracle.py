"""Tape gradients vs the hand-derived chain-rule oracle."""
import numpy as np
import pytest

from diffastar import autodiff as ad
from diffastar.diff_astar import DiffAstarConfig, VARIANT_NEURAL_BF, run
from diffastar.planners import dijkstra_shortest_path
from diffastar.grid import ProblemInstance
from helpers import random_reachable_instance
from oracle import oracle_forward_backward


def tape_grad_phi(inst, phi_values, gt, tau, variant="neural_astar"):
    phi = ad.GradTensor(phi_values.copy(), requires_grad=True)
    cfg = DiffAstarConfig(tau=tau, variant=variant)
    hw = float(gt.size)
    with ad.Tape():
        out = run([inst], [phi], cfg)[0]
        loss = ad.scale(ad.reduce_sum(ad.abs_(ad.sub(out.C, ad.constant(gt)))), 1.0 / hw)
    lv = float(loss.values)
    ad.backward(loss)
    grad = np.zeros_like(phi_values) if phi.grad is None else phi.grad
    return out.C.values, lv, grad


def rel_err(a, b):
    denom = max(np.abs(b).max(), 1e-12)
    return np.abs(a - b).max() / denom


def make_case(rng, h, w):
    inst, _ = random_reachable_instance(rng, h, w)
    gt_res = dijkstra_shortest_path(inst)
    inst = ProblemInstance(
        grid=inst.grid, start=inst.start, goal=inst.goal,
        gt_path=np.array([[1 if (r, c) in set(gt_res.path) else 0 for c in range(w)] for r in range(h)], np.uint8),
    )
    phi = rng.uniform(0.05, 2.0, (h, w))
    return inst, phi


@pytest.mark.parametrize("variant", ["neural_astar", "neural_bf"])
def test_pipeline_gradient_matches_oracle(variant):
    rng = np.random.default_rng(101)
    for trial in range(12):
        h = w = int(rng.integers(4, 7))
        inst, phi = make_case(rng, h, w)
        gt = inst.gt_path.astype(np.float64)
        tau = float(rng.uniform(1.0, 6.0))
        c_t, loss_t, grad_t = tape_grad_phi(inst, phi, gt, tau, variant)
        c_o, loss_o, grad_o = oracle_forward_backward(inst, phi, gt, tau, variant)
        assert np.array_equal(c_t, c_o), f"trial {trial}: closed masks diverge"
        assert loss_t == pytest.approx(loss_o, rel=1e-12)
        assert rel_err(grad_t, grad_o) < 1e-6, f"trial {trial}: gradient mismatch"


def test_oracle_gradient_is_nonzero():
    rng = np.random.default_rng(7)
    inst, phi = make_case(rng, 5, 5)
    gt = inst.gt_path.astype(np.float64)
    _, _, grad = oracle_forward_backward(inst, phi, gt, tau=2.0)
    assert np.abs(grad).sum() > 0.0


def test_goal_step_gradient_flows_through_eta():
    # the goal cell is never closed, so |C - gt| at the goal is constant 1
    # forward; its gradient must still reach phi through the eta term
    rng = np.random.default_rng(15)
    inst, phi = make_case(rng, 5, 5)
    gt = np.zeros((5, 5))
    gt[inst.goal] = 1.0  # only the goal differs: all gradient comes via eta
    c_t, loss_t, grad_t = tape_grad_phi(inst, phi, gt, tau=2.0)
    c_o, loss_o, grad_o = oracle_forward_backward(inst, phi, gt, tau=2.0)
    assert np.array_equal(c_t, c_o)
    assert rel_err(grad_t, grad_o) < 1e-6
