# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled numeric kernels.

Fused single-pass versions of the functions in
``spacebond.kernels.pyref``; same signatures, same float64 accumulation,
no intermediate temporaries.  The matching is tested by the kernel parity
suite and benchmarked by ``benchmarks/bench_kernels.py``.
"""
import numpy as np

cimport numpy as cnp
from libc.math cimport erf, exp, log, sqrt

cnp.import_array()

ctypedef fused real:
    float
    double

cdef double INV_SQRT2 = 0.7071067811865475244
cdef double INV_SQRT2PI = 0.3989422804014326779

# Softmax terms more than 60 nats below the row maximum are below 1e-26
# of the leading term; skipping them avoids libm's subnormal slow path.
cdef double EXP_CUTOFF = -60.0


def softmax_rows(real[:, ::1] scores, double scale):
    """Row-wise softmax of ``scores * scale``."""
    cdef Py_ssize_t n = scores.shape[0]
    cdef Py_ssize_t k = scores.shape[1]
    cdef cnp.ndarray out_arr
    if real is float:
        out_arr = np.empty((n, k), dtype=np.float32)
    else:
        out_arr = np.empty((n, k), dtype=np.float64)
    cdef real[:, ::1] out = out_arr
    cdef double[::1] buf = np.empty(k, dtype=np.float64)
    cdef Py_ssize_t i, j
    cdef double m, s, v
    for i in range(n):
        m = scores[i, 0] * scale
        for j in range(1, k):
            v = scores[i, j] * scale
            if v > m:
                m = v
        s = 0.0
        for j in range(k):
            v = scores[i, j] * scale - m
            buf[j] = exp(v) if v > EXP_CUTOFF else 0.0
            s += buf[j]
        for j in range(k):
            out[i, j] = <real> (buf[j] / s)
    return out_arr


def softmax_xent_rows(real[:, ::1] logits):
    """Mean cross-entropy of square ``logits`` against diagonal targets."""
    cdef Py_ssize_t n = logits.shape[0]
    if logits.shape[1] != n:
        raise ValueError(f"logits must be square, got ({n}, {logits.shape[1]})")
    cdef cnp.ndarray g_arr
    if real is float:
        g_arr = np.empty((n, n), dtype=np.float32)
    else:
        g_arr = np.empty((n, n), dtype=np.float64)
    cdef real[:, ::1] g = g_arr
    cdef double[::1] buf = np.empty(n, dtype=np.float64)
    cdef Py_ssize_t i, j
    cdef double m, s, v, loss = 0.0, inv_n = 1.0 / n
    for i in range(n):
        m = logits[i, 0]
        for j in range(1, n):
            if logits[i, j] > m:
                m = logits[i, j]
        s = 0.0
        for j in range(n):
            v = logits[i, j] - m
            buf[j] = exp(v) if v > EXP_CUTOFF else 0.0
            s += buf[j]
        loss += log(s) + m - logits[i, i]
        for j in range(n):
            g[i, j] = <real> ((buf[j] / s - (1.0 if j == i else 0.0)) * inv_n)
    return loss * inv_n, g_arr


def gelu(real[:, ::1] u):
    """Exact (erf-based) GELU."""
    cdef Py_ssize_t n = u.shape[0]
    cdef Py_ssize_t k = u.shape[1]
    cdef cnp.ndarray out_arr
    if real is float:
        out_arr = np.empty((n, k), dtype=np.float32)
    else:
        out_arr = np.empty((n, k), dtype=np.float64)
    cdef real[:, ::1] out = out_arr
    cdef Py_ssize_t i, j
    cdef double x
    for i in range(n):
        for j in range(k):
            x = u[i, j]
            out[i, j] = <real> (0.5 * x * (1.0 + erf(x * INV_SQRT2)))
    return out_arr


def gelu_grad(real[:, ::1] u):
    """Derivative of exact GELU, evaluated elementwise."""
    cdef Py_ssize_t n = u.shape[0]
    cdef Py_ssize_t k = u.shape[1]
    cdef cnp.ndarray out_arr
    if real is float:
        out_arr = np.empty((n, k), dtype=np.float32)
    else:
        out_arr = np.empty((n, k), dtype=np.float64)
    cdef real[:, ::1] out = out_arr
    cdef Py_ssize_t i, j
    cdef double x
    for i in range(n):
        for j in range(k):
            x = u[i, j]
            out[i, j] = <real> (
                0.5 * (1.0 + erf(x * INV_SQRT2)) + x * exp(-0.5 * x * x) * INV_SQRT2PI
            )
    return out_arr


def normalize_rows_fwd(real[:, ::1] z):
    """Divide each row by its L2 norm; returns (y, float64 norms)."""
    cdef Py_ssize_t n = z.shape[0]
    cdef Py_ssize_t k = z.shape[1]
    cdef cnp.ndarray y_arr
    if real is float:
        y_arr = np.empty((n, k), dtype=np.float32)
    else:
        y_arr = np.empty((n, k), dtype=np.float64)
    cdef cnp.ndarray norms_arr = np.empty(n, dtype=np.float64)
    cdef real[:, ::1] y = y_arr
    cdef double[::1] norms = norms_arr
    cdef Py_ssize_t i, j
    cdef double ss, r
    for i in range(n):
        ss = 0.0
        for j in range(k):
            ss += (<double> z[i, j]) * (<double> z[i, j])
        r = sqrt(ss)
        norms[i] = r
        for j in range(k):
            y[i, j] = <real> ((<double> z[i, j]) / r)
    return y_arr, norms_arr


def normalize_rows_bwd(real[:, ::1] y, double[::1] norms, real[:, ::1] dy):
    """Backward pass of row normalization: map d/dy to d/dz given y = z/|z|."""
    cdef Py_ssize_t n = y.shape[0]
    cdef Py_ssize_t k = y.shape[1]
    cdef cnp.ndarray dz_arr
    if real is float:
        dz_arr = np.empty((n, k), dtype=np.float32)
    else:
        dz_arr = np.empty((n, k), dtype=np.float64)
    cdef real[:, ::1] dz = dz_arr
    cdef Py_ssize_t i, j
    cdef double dot, r
    for i in range(n):
        dot = 0.0
        for j in range(k):
            dot += (<double> dy[i, j]) * (<double> y[i, j])
        r = norms[i]
        for j in range(k):
            dz[i, j] = <real> (((<double> dy[i, j]) - (<double> y[i, j]) * dot) / r)
    return dz_arr


def adam_update(
    real[::1] p,
    real[::1] g,
    real[::1] m,
    real[::1] v,
    double lr,
    double beta1,
    double beta2,
    double bc1,
    double bc2,
    double eps,
):
    """One in-place Adam step on flat views; bias corrections precomputed."""
    cdef Py_ssize_t n = p.shape[0]
    cdef Py_ssize_t i
    cdef double gi
    for i in range(n):
        gi = g[i]
        m[i] = <real> (beta1 * m[i] + (1.0 - beta1) * gi)
        v[i] = <real> (beta2 * v[i] + ((1.0 - beta2) * gi) * gi)
        p[i] = <real> (p[i] - lr * (m[i] / bc1) / (sqrt(v[i] / bc2) + eps))
