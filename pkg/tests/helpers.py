"""Shared test utilities: finite-difference gradients and naive metric
oracles kept deliberately independent of the library implementations."""

import numpy as np


def finite_diff_grads(loss_fn, params, h=1e-3):
    """Central finite differences of a scalar function over named arrays.

    Mutates each parameter coordinate in place (restoring it afterwards),
    so `loss_fn` must read the same array objects.
    """
    grads = {}
    for key, arr in params.items():
        g = np.zeros_like(arr, dtype=np.float64)
        flat = arr.ravel()
        gflat = g.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_fn()
            flat[i] = orig - h
            down = loss_fn()
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * h)
        grads[key] = g
    return grads


def rel_error(a, b, floor=1e-8):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


# --- naive metric oracles (straight from the definitions) ---


def oracle_dcg(ranking, relevant):
    return sum(1.0 / np.log2(pos + 2)
               for pos, item in enumerate(ranking) if item in relevant)


def oracle_ndcg(ranking, relevant):
    ideal = sum(1.0 / np.log2(k + 2)
                for k in range(min(len(relevant), len(ranking))))
    return oracle_dcg(ranking, relevant) / ideal if ideal else 0.0


def oracle_precision(ranking, relevant, n):
    return sum(1 for item in ranking[:n] if item in relevant) / n


def oracle_recall(ranking, relevant, n):
    return sum(1 for item in ranking[:n] if item in relevant) / len(relevant)


def oracle_r_precision(ranking, relevant):
    return oracle_precision(ranking, relevant, len(relevant))


def oracle_map(ranking, relevant, n):
    hits = 0
    total = 0.0
    for pos, item in enumerate(ranking[:n], start=1):
        if item in relevant:
            hits += 1
            total += hits / pos
    return total / min(len(relevant), n)


def oracle_f_map(before, after, affected, n):
    return oracle_map(before, affected, n) - oracle_map(after, affected, n)
