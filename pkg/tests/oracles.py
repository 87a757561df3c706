"""Independent reference computations used by the tests.

Nothing here calls the code path it is used to check: gradients come from
central finite differences, AUC from explicit pair counting, and the fusion
weight search from a plain double loop written from scratch.
"""

import itertools

import numpy as np


def numeric_grad(f, arr, eps=1e-6):
    """Central differences of the scalar function ``f()`` w.r.t. ``arr`` (perturbed in place)."""
    g = np.zeros_like(arr, dtype=float)
    flat = arr.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f()
        flat[i] = orig - eps
        fm = f()
        flat[i] = orig
        g.reshape(-1)[i] = (fp - fm) / (2 * eps)
    return g


def rel_error(analytic, numeric, floor=1e-8):
    """Largest entry-wise discrepancy, relative to the larger of the two gradients' max magnitude.

    Gradients that vanish analytically (e.g. a key bias, which softmax cancels)
    are pure rounding noise on both sides; below ``floor`` the absolute gap is returned.
    """
    analytic = np.asarray(analytic, dtype=float)
    numeric = np.asarray(numeric, dtype=float)
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    diff = np.abs(analytic - numeric).max(initial=0.0)
    if scale < floor:
        return diff
    return diff / scale


def pairwise_auc(scores, labels):
    """O(n^2) Mann-Whitney: fraction of (pos, neg) pairs ranked correctly, ties counted half."""
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    wins = 0.0
    for p in pos:
        for q in neg:
            if p > q:
                wins += 1.0
            elif p == q:
                wins += 0.5
    return wins / (len(pos) * len(neg))


def naive_grid(step):
    n = int(round(1 / step))
    return [(i / n, j / n, (n - i - j) / n) for i in range(n + 1) for j in range(n + 1 - i)]


def naive_weight_search(p_d, p_c, p_fu, labels, step):
    """p_* are lists (per task) of (cases, K) arrays. Returns the best triple.

    Score: total count of correct argmax decisions over tasks and cases.
    Ties go to the lexicographically largest (W_D, W_C, W_FU).
    """
    best = None
    for wd, wc, wf in naive_grid(step):
        correct = 0
        for t in range(len(p_d)):
            for j in range(len(labels)):
                fused = [wd * a + wc * b + wf * c for a, b, c in zip(p_d[t][j], p_c[t][j], p_fu[t][j])]
                top = max(range(len(fused)), key=lambda k: (fused[k], -k))
                correct += top == labels[j][t]
        cand = (correct, (wd, wc, wf))
        if best is None or cand > best:
            best = cand
    return best[1], best[0]


def compositions(total, parts):
    """Number of ways to write ``total`` as an ordered sum of ``parts`` nonnegative integers."""
    return sum(1 for c in itertools.product(range(total + 1), repeat=parts - 1) if sum(c) <= total)
