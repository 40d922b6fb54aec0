"""Shared independent oracles: finite differences, brute-force ranking metrics."""

import numpy as np


def grad_check(fn, tensors, step=1e-5):
    """Worst relative error between analytic and central-difference gradients.

    `fn` rebuilds the scalar output from the current tensor data; `tensors`
    are the leaves to check. Independent of the backward implementation.
    """
    for t in tensors:
        t.grad = None
    out = fn()
    out.backward()
    worst = 0.0
    for t in tensors:
        ana = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        ana_flat = ana.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = float(fn().data)
            flat[i] = orig - step
            down = float(fn().data)
            flat[i] = orig
            numeric = (up - down) / (2.0 * step)
            err = abs(numeric - ana_flat[i]) / max(1.0, abs(numeric), abs(ana_flat[i]))
            worst = max(worst, err)
    return worst


def brute_force_auroc(scores, labels):
    """All (positive, negative) pairs, ties credited one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                total += 1.0
            elif p == n:
                total += 0.5
    return total / (len(pos) * len(neg))


def hand_stepped_auprc(scores, labels):
    """Walk distinct descending thresholds and accumulate (dR) * P."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int((labels == 1).sum())
    thresholds = sorted(set(scores), reverse=True)
    ap, prev_recall = 0.0, 0.0
    for thr in thresholds:
        picked = scores >= thr
        tp = int(((labels == 1) & picked).sum())
        precision = tp / int(picked.sum())
        recall = tp / n_pos
        ap += (recall - prev_recall) * precision
        prev_recall = recall
    return ap
