# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled kernels. Same signatures as ``pure.py``; matmul-family kernels
dispatch to BLAS dgemm, everything else is a typed C loop."""

from cpython cimport array as carray
from libc.math cimport exp as cexp, tanh as ctanh, sqrt as csqrt, fabs
from libc.string cimport memcpy
from scipy.linalg.cython_blas cimport dgemm

import array as _pyarray

NAME = "compiled"

cdef carray.array _TEMPLATE = _pyarray.array('d', [])


def alloc(Py_ssize_t n):
    """Zeroed flat float64 buffer."""
    return carray.clone(_TEMPLATE, n, True)


def alloc_raw(Py_ssize_t n):
    """Uninitialized flat float64 buffer; caller must write every entry."""
    return carray.clone(_TEMPLATE, n, False)


cdef inline void _dgemm_rm(bint ta, bint tb, int m, int k, int n,
                           double alpha, double *a, int lda,
                           double *b, int ldb,
                           double beta, double *c, int ldc) noexcept nogil:
    # Row-major C[m x n] = alpha*op(A)@op(B) + beta*C via column-major BLAS:
    # compute C^T = op(B)^T @ op(A)^T, so operands swap and the transpose
    # flags invert roles. lda/ldb/ldc are the row strides of the row-major
    # buffers (>= row length, allowing strided sub-matrices).
    cdef char transa = b'T' if tb else b'N'
    cdef char transb = b'T' if ta else b'N'
    cdef int mm = n, nn = m, kk = k
    dgemm(&transa, &transb, &mm, &nn, &kk, &alpha, b, &ldb, a, &lda,
          &beta, c, &ldc)


def fill(double[::1] x, double v, Py_ssize_t n):
    cdef Py_ssize_t i
    for i in range(n):
        x[i] = v


def copy(double[::1] src, double[::1] dst, Py_ssize_t n):
    if n > 0:
        memcpy(&dst[0], &src[0], n * sizeof(double))


def axpy(double alpha, double[::1] x, double[::1] y, Py_ssize_t n):
    cdef Py_ssize_t i
    for i in range(n):
        y[i] += alpha * x[i]


def scale(double[::1] x, double alpha, double[::1] out, Py_ssize_t n):
    cdef Py_ssize_t i
    for i in range(n):
        out[i] = alpha * x[i]


def affine(double[::1] x, double a, double b, double[::1] out, Py_ssize_t n):
    cdef Py_ssize_t i
    for i in range(n):
        out[i] = a * x[i] + b


def add(double[::1] a, double[::1] b, double[::1] out, Py_ssize_t n):
    cdef Py_ssize_t i
    for i in range(n):
        out[i] = a[i] + b[i]


def sub(double[::1] a, double[::1] b, double[::1] out, Py_ssize_t n):
    cdef Py_ssize_t i
    for i in range(n):
        out[i] = a[i] - b[i]


def mul(double[::1] a, double[::1] b, double[::1] out, Py_ssize_t n):
    cdef Py_ssize_t i
    for i in range(n):
        out[i] = a[i] * b[i]


def mul_acc(double[::1] a, double[::1] b, double[::1] out, Py_ssize_t n):
    cdef Py_ssize_t i
    for i in range(n):
        out[i] += a[i] * b[i]


def relu(double[::1] x, double[::1] out, Py_ssize_t n):
    cdef Py_ssize_t i
    for i in range(n):
        out[i] = x[i] if x[i] > 0.0 else 0.0


def relu_bwd(double[::1] x, double[::1] g, double[::1] gx, Py_ssize_t n):
    cdef Py_ssize_t i
    for i in range(n):
        if x[i] > 0.0:
            gx[i] += g[i]


def relu_mask(double[::1] y, double[::1] g, double[::1] out, Py_ssize_t n):
    cdef Py_ssize_t i
    for i in range(n):
        out[i] = g[i] if y[i] > 0.0 else 0.0


def tanh(double[::1] x, double[::1] out, Py_ssize_t n):
    cdef Py_ssize_t i
    for i in range(n):
        out[i] = ctanh(x[i])


def tanh_bwd(double[::1] y, double[::1] g, double[::1] gx, Py_ssize_t n):
    cdef Py_ssize_t i
    for i in range(n):
        gx[i] += (1.0 - y[i] * y[i]) * g[i]


def sigmoid(double[::1] x, double[::1] out, Py_ssize_t n):
    cdef Py_ssize_t i
    cdef double v, e
    for i in range(n):
        v = x[i]
        if v >= 0.0:
            out[i] = 1.0 / (1.0 + cexp(-v))
        else:
            e = cexp(v)
            out[i] = e / (1.0 + e)


def sigmoid_bwd(double[::1] y, double[::1] g, double[::1] gx, Py_ssize_t n):
    cdef Py_ssize_t i
    for i in range(n):
        gx[i] += y[i] * (1.0 - y[i]) * g[i]


def absv(double[::1] x, double[::1] out, Py_ssize_t n):
    cdef Py_ssize_t i
    for i in range(n):
        out[i] = fabs(x[i])


def absv_bwd(double[::1] x, double[::1] g, double[::1] gx, Py_ssize_t n):
    cdef Py_ssize_t i
    for i in range(n):
        if x[i] > 0.0:
            gx[i] += g[i]
        elif x[i] < 0.0:
            gx[i] -= g[i]


def asum(double[::1] x, Py_ssize_t n):
    cdef Py_ssize_t i
    cdef double total = 0.0
    for i in range(n):
        total += x[i]
    return total


def dot(double[::1] a, double[::1] b, Py_ssize_t n):
    cdef Py_ssize_t i
    cdef double total = 0.0
    for i in range(n):
        total += a[i] * b[i]
    return total


def matmul(double[::1] a, double[::1] b, double[::1] out,
           int m, int k, int n, bint ta, bint tb, bint acc):
    if m == 0 or n == 0:
        return
    _dgemm_rm(ta, tb, m, k, n, 1.0,
              &a[0], k if not ta else m,
              &b[0], n if not tb else k,
              1.0 if acc else 0.0, &out[0], n)


def bmm(double[::1] a, double[::1] b, double[::1] out,
        int nb, int m, int k, int n, bint ta, bint tb, bint acc):
    cdef int t
    cdef int sa = m * k, sb = k * n, so = m * n
    cdef double beta = 1.0 if acc else 0.0
    cdef int lda = k if not ta else m
    cdef int ldb = n if not tb else k
    for t in range(nb):
        _dgemm_rm(ta, tb, m, k, n, 1.0,
                  &a[t * sa], lda, &b[t * sb], ldb, beta, &out[t * so], n)


def mix_nodes(double[::1] s, double[::1] x, double[::1] out,
              int nb, int nn, int c, bint ts, bint acc):
    cdef int b
    cdef double beta = 1.0 if acc else 0.0
    for b in range(nb):
        _dgemm_rm(ts, False, nn, nn, c, 1.0,
                  &s[0], nn, &x[b * nn * c], c, beta, &out[b * nn * c], c)


def mix_nodes_bwd_support(double[::1] g, double[::1] x, double[::1] ds,
                          int nb, int nn, int c):
    cdef int b
    for b in range(nb):
        _dgemm_rm(False, True, nn, c, nn, 1.0,
                  &g[b * nn * c], c, &x[b * nn * c], c, 1.0, &ds[0], nn)


def node_linear(double[::1] theta, double[::1] x, double[::1] out,
                int nb, int nn, int c, int f, bint tt, bint acc):
    # per-node [c x f] weight block applied to that node's feature rows;
    # the batch rows of node `node` form a strided [nb x c] matrix.
    cdef int node
    cdef double beta = 1.0 if acc else 0.0
    cdef int ldt = f if not tt else c
    for node in range(nn):
        _dgemm_rm(False, tt, nb, c, f, 1.0,
                  &x[node * c], nn * c,
                  &theta[node * c * f], ldt,
                  beta, &out[node * f], nn * f)


def node_linear_bwd_theta(double[::1] x, double[::1] g, double[::1] dtheta,
                          int nb, int nn, int c, int f):
    cdef int node
    for node in range(nn):
        _dgemm_rm(True, False, c, nb, f, 1.0,
                  &x[node * c], nn * c,
                  &g[node * f], nn * f,
                  1.0, &dtheta[node * c * f], f)


def softmax(double[::1] x, double[::1] out, Py_ssize_t rows, Py_ssize_t cols):
    cdef Py_ssize_t r, i, off
    cdef double mx, total, e, inv
    for r in range(rows):
        off = r * cols
        mx = x[off]
        for i in range(1, cols):
            if x[off + i] > mx:
                mx = x[off + i]
        total = 0.0
        for i in range(cols):
            e = cexp(x[off + i] - mx)
            out[off + i] = e
            total += e
        inv = 1.0 / total
        for i in range(cols):
            out[off + i] *= inv


def softmax_bwd(double[::1] y, double[::1] g, double[::1] gx,
                Py_ssize_t rows, Py_ssize_t cols):
    cdef Py_ssize_t r, i, off
    cdef double inner
    for r in range(rows):
        off = r * cols
        inner = 0.0
        for i in range(cols):
            inner += g[off + i] * y[off + i]
        for i in range(cols):
            gx[off + i] += y[off + i] * (g[off + i] - inner)


def layer_norm(double[::1] x, double[::1] gain, double[::1] bias,
               double[::1] out, double[::1] mean, double[::1] rstd,
               Py_ssize_t rows, Py_ssize_t d, double eps):
    cdef Py_ssize_t r, i, off
    cdef double mu, var, dv, rs
    for r in range(rows):
        off = r * d
        mu = 0.0
        for i in range(d):
            mu += x[off + i]
        mu /= d
        var = 0.0
        for i in range(d):
            dv = x[off + i] - mu
            var += dv * dv
        var /= d
        rs = 1.0 / csqrt(var + eps)
        mean[r] = mu
        rstd[r] = rs
        for i in range(d):
            out[off + i] = gain[i] * ((x[off + i] - mu) * rs) + bias[i]


def layer_norm_bwd(double[::1] x, double[::1] gain, double[::1] mean,
                   double[::1] rstd, double[::1] g, double[::1] gx,
                   double[::1] ggain, double[::1] gbias,
                   Py_ssize_t rows, Py_ssize_t d):
    cdef Py_ssize_t r, i, off
    cdef double mu, rs, gsum, gxhat_sum, xhat, gh, inv_d
    for r in range(rows):
        off = r * d
        mu = mean[r]
        rs = rstd[r]
        gsum = 0.0
        gxhat_sum = 0.0
        for i in range(d):
            xhat = (x[off + i] - mu) * rs
            gh = g[off + i] * gain[i]
            gsum += gh
            gxhat_sum += gh * xhat
            ggain[i] += g[off + i] * xhat
            gbias[i] += g[off + i]
        inv_d = 1.0 / d
        for i in range(d):
            xhat = (x[off + i] - mu) * rs
            gh = g[off + i] * gain[i]
            gx[off + i] += rs * (gh - gsum * inv_d - xhat * gxhat_sum * inv_d)


def concat2(double[::1] a, double[::1] b, double[::1] out,
            Py_ssize_t rows, Py_ssize_t ca, Py_ssize_t cb):
    cdef Py_ssize_t r, cc = ca + cb
    for r in range(rows):
        memcpy(&out[r * cc], &a[r * ca], ca * sizeof(double))
        memcpy(&out[r * cc + ca], &b[r * cb], cb * sizeof(double))


def split2_acc(double[::1] g, double[::1] ga, double[::1] gb,
               Py_ssize_t rows, Py_ssize_t ca, Py_ssize_t cb):
    cdef Py_ssize_t r, i, cc = ca + cb
    for r in range(rows):
        for i in range(ca):
            ga[r * ca + i] += g[r * cc + i]
        for i in range(cb):
            gb[r * cb + i] += g[r * cc + ca + i]


def narrow(double[::1] x, double[::1] out, Py_ssize_t outer, Py_ssize_t dim,
           Py_ssize_t inner, Py_ssize_t start, Py_ssize_t length):
    cdef Py_ssize_t o
    for o in range(outer):
        memcpy(&out[o * length * inner], &x[(o * dim + start) * inner],
               length * inner * sizeof(double))


def narrow_acc(double[::1] g, double[::1] gx, Py_ssize_t outer,
               Py_ssize_t dim, Py_ssize_t inner, Py_ssize_t start,
               Py_ssize_t length):
    cdef Py_ssize_t o, i, src, dst
    for o in range(outer):
        src = o * length * inner
        dst = (o * dim + start) * inner
        for i in range(length * inner):
            gx[dst + i] += g[src + i]


def swapaxes(double[::1] x, double[::1] out, Py_ssize_t outer, Py_ssize_t da,
             Py_ssize_t mid, Py_ssize_t db, Py_ssize_t inner, bint acc):
    cdef Py_ssize_t o, ai, mi, bi, i, src, dst
    for o in range(outer):
        for ai in range(da):
            for mi in range(mid):
                for bi in range(db):
                    src = ((((o * da + ai) * mid) + mi) * db + bi) * inner
                    dst = ((((o * db + bi) * mid) + mi) * da + ai) * inner
                    if acc:
                        for i in range(inner):
                            out[dst + i] += x[src + i]
                    else:
                        memcpy(&out[dst], &x[src], inner * sizeof(double))


def add_rowvec(double[::1] x, double[::1] v, double[::1] out,
               Py_ssize_t rows, Py_ssize_t d):
    cdef Py_ssize_t r, i, off
    for r in range(rows):
        off = r * d
        for i in range(d):
            out[off + i] = x[off + i] + v[i]


def mul_rowvec(double[::1] x, double[::1] v, double[::1] out,
               Py_ssize_t rows, Py_ssize_t d):
    cdef Py_ssize_t r, i, off
    for r in range(rows):
        off = r * d
        for i in range(d):
            out[off + i] = x[off + i] * v[i]


def colsum_acc(double[::1] g, double[::1] out, Py_ssize_t rows, Py_ssize_t d):
    cdef Py_ssize_t r, i, off
    for r in range(rows):
        off = r * d
        for i in range(d):
            out[i] += g[off + i]


def colsum_prod_acc(double[::1] g, double[::1] x, double[::1] out,
                    Py_ssize_t rows, Py_ssize_t d):
    cdef Py_ssize_t r, i, off
    for r in range(rows):
        off = r * d
        for i in range(d):
            out[i] += g[off + i] * x[off + i]


def blend(double[::1] z, double[::1] a, double[::1] b, double[::1] out,
          Py_ssize_t n):
    cdef Py_ssize_t i
    for i in range(n):
        out[i] = z[i] * a[i] + (1.0 - z[i]) * b[i]


def blend_bwd(double[::1] z, double[::1] a, double[::1] b, double[::1] g,
              double[::1] gz, double[::1] ga, double[::1] gb, Py_ssize_t n):
    cdef Py_ssize_t i
    cdef double gi
    for i in range(n):
        gi = g[i]
        gz[i] += (a[i] - b[i]) * gi
        ga[i] += z[i] * gi
        gb[i] += (1.0 - z[i]) * gi


def mape_terms(double[::1] absdiff, double[::1] truth, double[::1] out,
               Py_ssize_t n):
    cdef Py_ssize_t i, count = 0
    cdef double t
    for i in range(n):
        t = truth[i]
        if t != 0.0:
            out[count] = absdiff[i] / fabs(t)
            count += 1
    return count


def adam_step(double[::1] p, double[::1] g, double[::1] m, double[::1] v,
              Py_ssize_t n, double lr, double b1, double b2, double eps,
              double b1t, double b2t):
    cdef Py_ssize_t i
    cdef double gi
    cdef double mc = 1.0 / (1.0 - b1t)
    cdef double vc = 1.0 / (1.0 - b2t)
    for i in range(n):
        gi = g[i]
        m[i] = b1 * m[i] + (1.0 - b1) * gi
        v[i] = b2 * v[i] + (1.0 - b2) * gi * gi
        p[i] -= lr * (m[i] * mc) / (csqrt(v[i] * vc) + eps)
