"""Brute-force reference implementations shared by the test modules."""

import math

import numpy as np
from shapely.geometry import box as shapely_box


def shapely_iou(b1, b2):
    p, q = shapely_box(*b1.as_tuple()), shapely_box(*b2.as_tuple())
    inter = p.intersection(q).area
    return inter / p.union(q).area if inter > 0 else 0.0


def pixel_iou(b1, b2, cell=1.0):
    """IoU by counting grid cells; exact for boxes on a grid of spacing ``cell``."""
    x0 = min(b1.x1, b2.x1)
    y0 = min(b1.y1, b2.y1)
    nx = int(round((max(b1.x2, b2.x2) - x0) / cell))
    ny = int(round((max(b1.y2, b2.y2) - y0) / cell))
    cx = x0 + (np.arange(nx) + 0.5) * cell
    cy = y0 + (np.arange(ny) + 0.5) * cell
    m1 = np.outer((cy > b1.y1) & (cy < b1.y2), (cx > b1.x1) & (cx < b1.x2))
    m2 = np.outer((cy > b2.y1) & (cy < b2.y2), (cx > b2.x1) & (cx < b2.x2))
    union = (m1 | m2).sum()
    return (m1 & m2).sum() / union


def loop_pair_map(b1, b2, resolution):
    """Per-cell membership by explicit loops over the padded union frame."""
    ux1, uy1 = min(b1.x1, b2.x1), min(b1.y1, b2.y1)
    ux2, uy2 = max(b1.x2, b2.x2), max(b1.y2, b2.y2)
    w, h = ux2 - ux1, uy2 - uy1
    side = max(w, h)
    left = ux1 - (side - w) / 2
    top = uy1 - (side - h) / 2
    out = np.zeros((2, resolution, resolution), dtype=np.uint8)
    for ch, b in enumerate((b1, b2)):
        for r in range(resolution):
            cy = top + (r + 0.5) * (side / resolution)
            for c in range(resolution):
                cx = left + (c + 0.5) * (side / resolution)
                if b.x1 <= cx < b.x2 and b.y1 <= cy < b.y2:
                    out[ch, r, c] = 1
    return out


def literal_nt_xent(z, temperature, asymmetric=False):
    """NT-Xent evaluated term by term with Python loops (1-based pair indexing)."""
    z = [list(map(float, row)) for row in z]
    n = len(z)

    def sim(a, b):
        dot = sum(x * y for x, y in zip(a, b))
        return dot / (math.sqrt(sum(x * x for x in a)) * math.sqrt(sum(y * y for y in b)))

    def pair_loss(i, j):
        num = math.exp(sim(z[i], z[j]) / temperature)
        den = 0.0
        for k in range(n):
            if k != i:
                s = sim(z[i], z[k])
                den += math.exp(s if asymmetric else s / temperature)
        return -math.log(num / den)

    m = n // 2
    total = 0.0
    for k in range(1, m + 1):
        total += pair_loss(2 * k - 2, 2 * k - 1) + pair_loss(2 * k - 1, 2 * k - 2)
    return total / (2 * m)


def brute_force_ap(scores, correct, n_gt):
    """AP from the precision-recall curve enumerated at every score threshold.

    For each achieved recall level r, take the best precision at any recall >= r,
    and integrate over the recall increments.
    """
    pts = []
    for t in sorted(set(scores), reverse=True):
        sel = [c for s, c in zip(scores, correct) if s >= t]
        tp = sum(sel)
        pts.append((tp / n_gt, tp / len(sel)))
    ap, prev_r = 0.0, 0.0
    for r in sorted({r for r, _ in pts}):
        if r <= prev_r:
            continue
        best = max(p for rr, p in pts if rr >= r)
        ap += (r - prev_r) * best
        prev_r = r
    return ap


def central_difference(f, params, step=1e-3):
    """Central-difference gradient of scalar ``f()`` w.r.t. each tensor in ``params``."""
    import torch

    grads = []
    with torch.no_grad():
        for p in params:
            g = torch.zeros_like(p)
            flat, gflat = p.view(-1), g.view(-1)
            for k in range(flat.numel()):
                orig = flat[k].item()
                flat[k] = orig + step
                fp = float(f())
                flat[k] = orig - step
                fm = float(f())
                flat[k] = orig
                gflat[k] = (fp - fm) / (2 * step)
            grads.append(g)
    return grads
