"""Slow reference implementations used to check the library routines."""

import itertools
import math
from fractions import Fraction

import numpy as np
import torch


def dice_bruteforce(pred, truth):
    inter = a = b = 0
    for p, t in zip(np.ravel(pred), np.ravel(truth)):
        p, t = bool(p), bool(t)
        inter += p and t
        a += p
        b += t
    return 1.0 if a + b == 0 else 2 * inter / (a + b)


def _ap_terms(scores, truth):
    scores = np.ravel(scores).astype(np.float64)
    truth = np.ravel(truth) > 0
    n_pos = int(truth.sum())
    prev_tp, terms = 0, []
    for tau in sorted(set(scores.tolist()), reverse=True):
        selected = scores >= tau
        tp = int((selected & truth).sum())
        terms.append((tp - prev_tp, tp, int(selected.sum())))
        prev_tp = tp
    return terms, n_pos


def auprc_bruteforce(scores, truth):
    """Step-wise average precision: sum over thresholds of (R_k - R_{k-1}) * P_k.

    Each threshold's term is rounded once and the terms are summed exactly.
    """
    terms, n_pos = _ap_terms(scores, truth)
    return math.fsum(d * tp / n for d, tp, n in terms) / n_pos


def auprc_exact(scores, truth):
    terms, n_pos = _ap_terms(scores, truth)
    return sum((Fraction(d, n_pos) * Fraction(tp, n) for d, tp, n in terms), Fraction(0))


def median_bruteforce(m, k):
    r = k // 2
    padded = np.pad(m, r, mode="constant")
    out = np.empty_like(m)
    for i, j, l in itertools.product(*map(range, m.shape)):
        out[i, j, l] = np.median(padded[i : i + k, j : j + k, l : l + k])
    return out


def erode_bruteforce(mask, iterations):
    cur = np.asarray(mask) > 0
    offsets = [(0, 0, 0), (1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]
    for _ in range(iterations):
        nxt = np.zeros_like(cur)
        for idx in itertools.product(*map(range, cur.shape)):
            keep = True
            for off in offsets:
                nb = tuple(a + b for a, b in zip(idx, off))
                inside = all(0 <= c < s for c, s in zip(nb, cur.shape))
                if not inside or not cur[nb]:
                    keep = False
                    break
            nxt[idx] = keep
        cur = nxt
    return cur.astype(np.uint8)


def finite_difference_check(loss_fn, params, fraction=0.01, eps=1e-6, seed=0):
    """Compare autograd against central differences on a random subset of scalar parameters.

    Returns the list of ``(name, index, analytic, numeric, relative_error)``.
    """
    rng = np.random.default_rng(seed)
    named = list(params)
    for _, p in named:
        p.grad = None
    loss_fn().backward()
    flat = [(name, p, i) for name, p in named for i in range(p.numel())]
    n = max(1, int(round(fraction * len(flat))))
    picks = rng.choice(len(flat), size=n, replace=False)
    out = []
    with torch.no_grad():
        for k in picks:
            name, p, i = flat[k]
            view = p.view(-1)
            orig = view[i].item()
            view[i] = orig + eps
            up = loss_fn().item()
            view[i] = orig - eps
            down = loss_fn().item()
            view[i] = orig
            numeric = (up - down) / (2 * eps)
            analytic = p.grad.view(-1)[i].item()
            scale = max(abs(analytic), abs(numeric), 1e-8)
            out.append((name, i, analytic, numeric, abs(analytic - numeric) / scale))
    return out
