# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: fused single-pass loops over batch rows.

Semantics match critiq.kernels.numpy_ref exactly (same formulas, float64
accumulation in reductions); only the loop structure differs. Supports
float32 and float64 operands via fused types.
"""

import numpy as np

cimport cython
cimport numpy as cnp
from libc.math cimport exp, expf, log, sqrt, sqrtf

cnp.import_array()

ctypedef fused floating:
    float
    double


def scatter_normalized_rows(cnp.int64_t[::1] indices, cnp.int64_t[::1] indptr,
                            Py_ssize_t n_cols, dtype=np.float32):
    n_rows = len(indptr) - 1
    out = np.zeros((n_rows, n_cols), dtype=dtype)
    _scatter_rows(indices, indptr, out)
    return out


def _scatter_rows(cnp.int64_t[::1] indices, cnp.int64_t[::1] indptr,
                  floating[:, ::1] out):
    cdef Py_ssize_t row, j
    cdef Py_ssize_t n_rows = indptr.shape[0] - 1
    cdef floating val
    with nogil:
        for row in range(n_rows):
            if indptr[row + 1] > indptr[row]:
                val = <floating>(1.0 / sqrt(<double>(indptr[row + 1] - indptr[row])))
                for j in range(indptr[row], indptr[row + 1]):
                    out[row, indices[j]] = val


def multinomial_nll_grad(floating[:, ::1] logits, cnp.int64_t[::1] indices,
                         cnp.int64_t[::1] indptr):
    cdef Py_ssize_t n_rows = logits.shape[0]
    cdef Py_ssize_t n_cols = logits.shape[1]
    losses = np.zeros(n_rows, dtype=np.float64)
    grad = np.zeros((n_rows, n_cols), dtype=np.asarray(logits).dtype)
    cdef double[::1] losses_v = losses
    cdef floating[:, ::1] grad_v = grad
    cdef Py_ssize_t row, j
    cdef floating row_max, e
    cdef double denom, lse, scale
    cdef Py_ssize_t npos
    with nogil:
        for row in range(n_rows):
            npos = indptr[row + 1] - indptr[row]
            if npos == 0:
                continue
            row_max = logits[row, 0]
            for j in range(1, n_cols):
                if logits[row, j] > row_max:
                    row_max = logits[row, j]
            # single exp pass stashed in the grad buffer; the reduction
            # stays scalar-ordered so the sum is bit-stable across runs
            denom = 0.0
            for j in range(n_cols):
                if floating is float:
                    e = expf(logits[row, j] - row_max)
                else:
                    e = exp(logits[row, j] - row_max)
                grad_v[row, j] = e
                denom += <double>e
            scale = npos / denom
            for j in range(n_cols):
                grad_v[row, j] = <floating>(grad_v[row, j] * scale)
            lse = log(denom) + <double>row_max
            for j in range(indptr[row], indptr[row + 1]):
                losses_v[row] += lse - <double>logits[row, indices[j]]
                grad_v[row, indices[j]] -= <floating>1.0
    return losses, grad


def tanh_backward(floating[:, ::1] activations, floating[:, ::1] upstream):
    out = np.empty_like(np.asarray(activations))
    cdef floating[:, ::1] out_v = out
    cdef Py_ssize_t i, j
    with nogil:
        for i in range(activations.shape[0]):
            for j in range(activations.shape[1]):
                out_v[i, j] = upstream[i, j] * (<floating>1.0 - activations[i, j] * activations[i, j])
    return out


def hinge_loss_grad(floating[:, ::1] scores_before, floating[:, ::1] scores_after,
                    cnp.int64_t[::1] plus_indices, cnp.int64_t[::1] plus_ptr,
                    cnp.int64_t[::1] minus_indices, cnp.int64_t[::1] minus_ptr,
                    double margin):
    cdef Py_ssize_t n_rows = scores_after.shape[0]
    losses = np.zeros(n_rows, dtype=np.float64)
    grad = np.zeros_like(np.asarray(scores_after))
    cdef double[::1] losses_v = losses
    cdef floating[:, ::1] grad_v = grad
    cdef Py_ssize_t row, j, col
    cdef double viol
    with nogil:
        for row in range(n_rows):
            for j in range(plus_ptr[row], plus_ptr[row + 1]):
                col = plus_indices[j]
                viol = margin - (<double>scores_before[row, col] - <double>scores_after[row, col])
                if viol > 0.0:
                    losses_v[row] += viol
                    grad_v[row, col] += <floating>1.0
            for j in range(minus_ptr[row], minus_ptr[row + 1]):
                col = minus_indices[j]
                viol = margin - (<double>scores_after[row, col] - <double>scores_before[row, col])
                if viol > 0.0:
                    losses_v[row] += viol
                    grad_v[row, col] -= <floating>1.0
    return losses, grad


def adam_amsgrad_update(floating[::1] param, floating[::1] grad, floating[::1] m,
                        floating[::1] v, floating[::1] vhat, long step,
                        double lr, double beta1, double beta2, double eps):
    # all arithmetic in the storage precision, matching the numpy reference
    cdef floating b1 = <floating>beta1
    cdef floating b2 = <floating>beta2
    cdef floating one_m_b1 = <floating>(1.0 - beta1)
    cdef floating one_m_b2 = <floating>(1.0 - beta2)
    cdef floating step_scale = <floating>(lr / (1.0 - beta1 ** step))
    cdef floating inv_bias2 = <floating>(1.0 / (1.0 - beta2 ** step))
    cdef floating epsf = <floating>eps
    cdef floating g, mi, vi
    cdef Py_ssize_t i
    with nogil:
        for i in range(param.shape[0]):
            g = grad[i]
            mi = b1 * m[i] + one_m_b1 * g
            vi = b2 * v[i] + one_m_b2 * g * g
            m[i] = mi
            v[i] = vi
            if vi > vhat[i]:
                vhat[i] = vi
            if floating is float:
                param[i] -= step_scale * mi / (sqrtf(vhat[i] * inv_bias2) + epsf)
            else:
                param[i] -= step_scale * mi / (sqrt(vhat[i] * inv_bias2) + epsf)
