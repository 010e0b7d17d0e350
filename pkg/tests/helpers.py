"""Shared oracles for the unit and acceptance suites."""
import numpy as np
import torch

from picodet.assignment import AssignerConfig, SENTINEL, dynamic_k, simota_cost
from picodet.losses import (DistributionSpec, LossConfig, distribution_focal_loss, distribution_focal_loss_grad,
                            giou_loss, quality_focal_loss, quality_focal_loss_grad, varifocal_loss,
                            varifocal_loss_grad)

FD_STEP = 1e-5


def rel_err(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-6)))


def central_diff(f, x, h=FD_STEP):
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def autograd(f, x):
    t = torch.tensor(x, dtype=torch.float64, requires_grad=True)
    f(t).sum().backward()
    return t.grad.numpy()


def gradient_suite(rng, n=100, cfg=LossConfig(), spec=DistributionSpec(7)):
    """Worst relative error per loss between analytic and central-difference gradients."""
    worst = {"vfl": 0.0, "qfl": 0.0, "giou": 0.0, "dfl": 0.0}
    for _ in range(n):
        p = rng.uniform(0.02, 0.98)
        q = rng.choice([0.0, rng.uniform(0.05, 1.0)])
        fd = central_diff(lambda v: float(varifocal_loss(v[0], q, cfg)), [p])[0]
        worst["vfl"] = max(worst["vfl"], rel_err(varifocal_loss_grad(p, q, cfg), fd),
                           rel_err(autograd(lambda t: varifocal_loss(t, q, cfg), [p])[0], fd))

        q = rng.uniform(0, 1)
        while abs(q - p) < 1e-3:
            q = rng.uniform(0, 1)
        fd = central_diff(lambda v: float(quality_focal_loss(v[0], q, cfg)), [p])[0]
        worst["qfl"] = max(worst["qfl"], rel_err(quality_focal_loss_grad(p, q, cfg), fd),
                           rel_err(autograd(lambda t: quality_focal_loss(t, q, cfg), [p])[0], fd))

        gt = np.concatenate([rng.uniform(0, 50, 2), rng.uniform(0, 50, 2) + 60])
        pred = np.concatenate([rng.uniform(0, 50, 2), rng.uniform(0, 50, 2) + 60])
        fd = central_diff(lambda v: float(giou_loss(v, gt)), pred)
        an = autograd(lambda t: giou_loss(t, gt), pred)
        worst["giou"] = max(worst["giou"], rel_err(an, fd))

        logits = rng.normal(0, 1, spec.num_bins)
        dist = np.exp(logits) / np.exp(logits).sum()
        y = rng.uniform(0, spec.reg_max - 0.01)
        fd = central_diff(lambda v: float(distribution_focal_loss(v, y, spec)), dist)
        worst["dfl"] = max(worst["dfl"], rel_err(distribution_focal_loss_grad(dist, y, spec), fd),
                           rel_err(autograd(lambda t: distribution_focal_loss(t, y, spec), dist), fd))
    return worst


def oracle_simota(cost, candidates, ious, top_n):
    """Brute force: per-GT top-k by (cost, anchor index), then min-cost conflict resolution."""
    num_a, num_g = cost.shape
    claims = {}
    for g in range(num_g):
        cand = [a for a in range(num_a) if candidates[a, g]]
        if not cand:
            continue
        top = sorted((ious[a, g] for a in cand), reverse=True)[:top_n]
        k = min(max(1, int(np.floor(sum(top)))), len(cand))
        for a in sorted(cand, key=lambda a: (cost[a, g], a))[:k]:
            claims.setdefault(a, []).append(g)
    matched = np.full(num_a, -1)
    for a, gs in claims.items():
        matched[a] = min(gs, key=lambda g: (cost[a, g], g))
    return matched


def random_simota_instance(rng, max_anchors=50, max_gts=5):
    """Random anchors on a small multi-level grid, GTs and predictions."""
    num_a = int(rng.integers(1, max_anchors + 1))
    strides = rng.choice([8.0, 16.0, 32.0], size=num_a)
    centers = (rng.integers(0, 8, size=(num_a, 2)) + 0.5) * strides[:, None]
    num_g = int(rng.integers(0, max_gts + 1))
    xy = rng.uniform(0, 200, size=(num_g, 2))
    wh = rng.uniform(4, 120, size=(num_g, 2))
    gt_boxes = np.concatenate([xy, xy + wh], axis=1)
    gt_labels = rng.integers(0, 3, size=num_g)
    pxy = centers - rng.uniform(0, 40, size=(num_a, 2))
    pred_boxes = np.concatenate([pxy, centers + rng.uniform(0, 40, size=(num_a, 2))], axis=1)
    pred_scores = rng.uniform(0.01, 0.99, size=(num_a, 3))
    return pred_scores, pred_boxes, centers, strides, gt_boxes, gt_labels
