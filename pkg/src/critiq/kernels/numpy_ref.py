"""Pure-numpy reference implementations of the hot kernels.

These are the fallback backend when the compiled extension is unavailable
(or disabled via CRITIQ_PURE_PY=1). Matrix products are delegated to BLAS
in both backends; the kernels here cover the elementwise and sparse-index
inner loops that otherwise produce long chains of numpy temporaries.

All row-index arguments use the flat (indices, indptr) layout: row b owns
indices[indptr[b]:indptr[b+1]], which must be unique within a row.
"""

import numpy as np


def scatter_normalized_rows(indices, indptr, n_cols, dtype=np.float32):
    """Expand sparse binary rows into a dense batch, each row L2-normalized.

    A row with k set columns gets value 1/sqrt(k) in each; empty rows stay zero.
    """
    n_rows = len(indptr) - 1
    out = np.zeros((n_rows, n_cols), dtype=dtype)
    for row in range(n_rows):
        lo, hi = indptr[row], indptr[row + 1]
        if hi > lo:
            out[row, indices[lo:hi]] = 1.0 / np.sqrt(float(hi - lo))
    return out


def log_softmax(logits):
    """Row-wise log-softmax with max-subtraction stability."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True, dtype=np.float64))
    return shifted - lse.astype(logits.dtype)


def multinomial_nll_grad(logits, indices, indptr):
    """Negative log-likelihood of sparse positives under row-wise softmax.

    loss[b] = -sum_{i in row b} log softmax(logits[b])_i, accumulated in
    float64; grad[b] = n_pos[b] * softmax(logits[b]) - indicator(row b).
    Rows with no positives contribute zero loss and zero gradient.

    Returns (loss per row float64, grad with logits' dtype).
    """
    n_rows = logits.shape[0]
    counts = np.diff(indptr).astype(np.int64)
    row_max = logits.max(axis=1)
    exps = np.exp(logits - row_max[:, None])
    denom = exps.sum(axis=1, dtype=np.float64)
    softmax = (exps / denom[:, None]).astype(logits.dtype)

    losses = np.zeros(n_rows, dtype=np.float64)
    grad = softmax * counts[:, None].astype(logits.dtype)
    lse = np.log(denom) + row_max.astype(np.float64)
    for row in range(n_rows):
        lo, hi = indptr[row], indptr[row + 1]
        if hi > lo:
            cols = indices[lo:hi]
            losses[row] = (hi - lo) * lse[row] - logits[row, cols].sum(dtype=np.float64)
            grad[row, cols] -= 1.0
        else:
            grad[row, :] = 0.0
    return losses, grad


def tanh_backward(activations, upstream):
    """Gradient through tanh given post-activation values: g * (1 - a^2)."""
    return upstream * (1.0 - activations * activations)


def hinge_loss_grad(scores_before, scores_after, plus_indices, plus_ptr,
                    minus_indices, minus_ptr, margin):
    """Two-sided max-margin loss over per-row item sets, plus d/d scores_after.

    Row b contributes sum over its plus set of max(0, h - (before - after))
    and over its minus set of max(0, h - (after - before)). Gradient is the
    hinge subgradient wrt scores_after only (scores_before is treated as
    constant).

    Returns (loss per row float64, grad with scores_after's dtype).
    """
    n_rows = scores_after.shape[0]
    losses = np.zeros(n_rows, dtype=np.float64)
    grad = np.zeros_like(scores_after)
    for row in range(n_rows):
        p = plus_indices[plus_ptr[row]:plus_ptr[row + 1]]
        if len(p):
            viol = margin - (scores_before[row, p] - scores_after[row, p])
            active = viol > 0
            losses[row] += viol[active].sum(dtype=np.float64)
            grad[row, p[active]] += 1.0
        m = minus_indices[minus_ptr[row]:minus_ptr[row + 1]]
        if len(m):
            viol = margin - (scores_after[row, m] - scores_before[row, m])
            active = viol > 0
            losses[row] += viol[active].sum(dtype=np.float64)
            grad[row, m[active]] -= 1.0
    return losses, grad


def adam_amsgrad_update(param, grad, m, v, vhat, step, lr, beta1, beta2, eps):
    """One Adam step with the max-corrected second moment, in place.

    `step` is the 1-based step count after incrementing. vhat is updated to
    max(vhat, v) coordinate-wise before use, which keeps the effective step
    size non-increasing per coordinate.
    """
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    np.maximum(vhat, v, out=vhat)
    bias1 = 1.0 - beta1 ** step
    bias2 = 1.0 - beta2 ** step
    denom = np.sqrt(vhat / bias2) + eps
    param -= (lr / bias1) * m / denom
