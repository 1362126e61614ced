"""Stdlib-only kernel implementations.

Every function here mirrors one in the compiled backend (`_core.pyx`) with an
identical signature. Buffers are flat float64 sequences (``array('d')``) plus
explicit extents; nothing is allocated inside a kernel. Loops favour clarity
over speed — this backend exists so the package works without a compiler and
so the compiled kernels have an independent implementation to be checked
against.
"""

import math

NAME = "pure"


def fill(x, v, n):
    for i in range(n):
        x[i] = v


def copy(src, dst, n):
    dst[:n] = src[:n]


def axpy(alpha, x, y, n):
    for i in range(n):
        y[i] += alpha * x[i]


def scale(x, alpha, out, n):
    for i in range(n):
        out[i] = alpha * x[i]


def affine(x, a, b, out, n):
    for i in range(n):
        out[i] = a * x[i] + b


def add(a, b, out, n):
    for i in range(n):
        out[i] = a[i] + b[i]


def sub(a, b, out, n):
    for i in range(n):
        out[i] = a[i] - b[i]


def mul(a, b, out, n):
    for i in range(n):
        out[i] = a[i] * b[i]


def mul_acc(a, b, out, n):
    for i in range(n):
        out[i] += a[i] * b[i]


def relu(x, out, n):
    for i in range(n):
        v = x[i]
        out[i] = v if v > 0.0 else 0.0


def relu_bwd(x, g, gx, n):
    for i in range(n):
        if x[i] > 0.0:
            gx[i] += g[i]


def relu_mask(y, g, out, n):
    """out = g where the (post-)activation y is positive, else 0."""
    for i in range(n):
        out[i] = g[i] if y[i] > 0.0 else 0.0


def tanh(x, out, n):
    for i in range(n):
        out[i] = math.tanh(x[i])


def tanh_bwd(y, g, gx, n):
    # derivative expressed through the cached output: 1 - tanh(x)^2
    for i in range(n):
        gx[i] += (1.0 - y[i] * y[i]) * g[i]


def sigmoid(x, out, n):
    for i in range(n):
        v = x[i]
        if v >= 0.0:
            out[i] = 1.0 / (1.0 + math.exp(-v))
        else:
            e = math.exp(v)
            out[i] = e / (1.0 + e)


def sigmoid_bwd(y, g, gx, n):
    for i in range(n):
        gx[i] += y[i] * (1.0 - y[i]) * g[i]


def absv(x, out, n):
    for i in range(n):
        out[i] = abs(x[i])


def absv_bwd(x, g, gx, n):
    # subgradient 0 at x == 0
    for i in range(n):
        v = x[i]
        if v > 0.0:
            gx[i] += g[i]
        elif v < 0.0:
            gx[i] -= g[i]


def asum(x, n):
    total = 0.0
    for i in range(n):
        total += x[i]
    return total


def dot(a, b, n):
    total = 0.0
    for i in range(n):
        total += a[i] * b[i]
    return total


def matmul(a, b, out, m, k, n, ta, tb, acc):
    """out[m x n] (+)= op(a) @ op(b) with op = transpose when ta/tb set.

    Buffer layouts: a is [m x k] row-major (or [k x m] when ta), likewise b.
    """
    for i in range(m):
        for j in range(n):
            s = 0.0
            for p in range(k):
                av = a[i * k + p] if not ta else a[p * m + i]
                bv = b[p * n + j] if not tb else b[j * k + p]
                s += av * bv
            if acc:
                out[i * n + j] += s
            else:
                out[i * n + j] = s


def bmm(a, b, out, nb, m, k, n, ta, tb, acc):
    """Batched matmul over nb stacked [m x k] / [k x n] blocks."""
    sa = m * k
    sb = k * n
    so = m * n
    for t in range(nb):
        oa = t * sa
        ob = t * sb
        oo = t * so
        for i in range(m):
            for j in range(n):
                s = 0.0
                for p in range(k):
                    av = a[oa + i * k + p] if not ta else a[oa + p * m + i]
                    bv = b[ob + p * n + j] if not tb else b[ob + j * k + p]
                    s += av * bv
                if acc:
                    out[oo + i * n + j] += s
                else:
                    out[oo + i * n + j] = s


def mix_nodes(s, x, out, nb, nn, c, ts, acc):
    """out[b,i,:] (+)= sum_j op(s)[i,j] * x[b,j,:] for a shared [nn x nn] s."""
    for b in range(nb):
        off = b * nn * c
        for i in range(nn):
            for j in range(c):
                acc_v = 0.0
                for p in range(nn):
                    sv = s[i * nn + p] if not ts else s[p * nn + i]
                    acc_v += sv * x[off + p * c + j]
                if acc:
                    out[off + i * c + j] += acc_v
                else:
                    out[off + i * c + j] = acc_v


def mix_nodes_bwd_support(g, x, ds, nb, nn, c):
    """ds[i,j] += sum_b sum_k g[b,i,k] * x[b,j,k]."""
    for b in range(nb):
        off = b * nn * c
        for i in range(nn):
            for j in range(nn):
                s = 0.0
                for p in range(c):
                    s += g[off + i * c + p] * x[off + j * c + p]
                ds[i * nn + j] += s


def node_linear(theta, x, out, nb, nn, c, f, tt, acc):
    """out[b,n,:] (+)= x[b,n,:] @ op(theta[n]) with per-node [c x f] blocks."""
    for b in range(nb):
        for node in range(nn):
            xoff = (b * nn + node) * c
            ooff = (b * nn + node) * f
            toff = node * c * f
            for j in range(f):
                s = 0.0
                for p in range(c):
                    tv = theta[toff + p * f + j] if not tt else theta[toff + j * c + p]
                    s += x[xoff + p] * tv
                if acc:
                    out[ooff + j] += s
                else:
                    out[ooff + j] = s


def node_linear_bwd_theta(x, g, dtheta, nb, nn, c, f):
    """dtheta[n,p,j] += sum_b x[b,n,p] * g[b,n,j]."""
    for b in range(nb):
        for node in range(nn):
            xoff = (b * nn + node) * c
            goff = (b * nn + node) * f
            toff = node * c * f
            for p in range(c):
                xv = x[xoff + p]
                if xv == 0.0:
                    continue
                for j in range(f):
                    dtheta[toff + p * f + j] += xv * g[goff + j]


def softmax(x, out, rows, cols):
    for r in range(rows):
        off = r * cols
        mx = x[off]
        for i in range(1, cols):
            if x[off + i] > mx:
                mx = x[off + i]
        total = 0.0
        for i in range(cols):
            e = math.exp(x[off + i] - mx)
            out[off + i] = e
            total += e
        inv = 1.0 / total
        for i in range(cols):
            out[off + i] *= inv


def softmax_bwd(y, g, gx, rows, cols):
    for r in range(rows):
        off = r * cols
        inner = 0.0
        for i in range(cols):
            inner += g[off + i] * y[off + i]
        for i in range(cols):
            gx[off + i] += y[off + i] * (g[off + i] - inner)


def layer_norm(x, gain, bias, out, mean, rstd, rows, d, eps):
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
        rs = 1.0 / math.sqrt(var + eps)
        mean[r] = mu
        rstd[r] = rs
        for i in range(d):
            out[off + i] = gain[i] * ((x[off + i] - mu) * rs) + bias[i]


def layer_norm_bwd(x, gain, mean, rstd, g, gx, ggain, gbias, rows, d):
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


def concat2(a, b, out, rows, ca, cb):
    cc = ca + cb
    for r in range(rows):
        out[r * cc : r * cc + ca] = a[r * ca : (r + 1) * ca]
        out[r * cc + ca : (r + 1) * cc] = b[r * cb : (r + 1) * cb]


def split2_acc(g, ga, gb, rows, ca, cb):
    cc = ca + cb
    for r in range(rows):
        for i in range(ca):
            ga[r * ca + i] += g[r * cc + i]
        for i in range(cb):
            gb[r * cb + i] += g[r * cc + ca + i]


def narrow(x, out, outer, dim, inner, start, length):
    for o in range(outer):
        src = (o * dim + start) * inner
        dst = o * length * inner
        out[dst : dst + length * inner] = x[src : src + length * inner]


def narrow_acc(g, gx, outer, dim, inner, start, length):
    for o in range(outer):
        src = o * length * inner
        dst = (o * dim + start) * inner
        for i in range(length * inner):
            gx[dst + i] += g[src + i]


def swapaxes(x, out, outer, da, mid, db, inner, acc):
    """View x as [outer,da,mid,db,inner]; out gets [outer,db,mid,da,inner]."""
    for o in range(outer):
        for a_i in range(da):
            for m_i in range(mid):
                for b_i in range(db):
                    src = ((((o * da + a_i) * mid) + m_i) * db + b_i) * inner
                    dst = ((((o * db + b_i) * mid) + m_i) * da + a_i) * inner
                    if acc:
                        for i in range(inner):
                            out[dst + i] += x[src + i]
                    else:
                        out[dst : dst + inner] = x[src : src + inner]


def add_rowvec(x, v, out, rows, d):
    for r in range(rows):
        off = r * d
        for i in range(d):
            out[off + i] = x[off + i] + v[i]


def mul_rowvec(x, v, out, rows, d):
    for r in range(rows):
        off = r * d
        for i in range(d):
            out[off + i] = x[off + i] * v[i]


def colsum_acc(g, out, rows, d):
    for r in range(rows):
        off = r * d
        for i in range(d):
            out[i] += g[off + i]


def colsum_prod_acc(g, x, out, rows, d):
    for r in range(rows):
        off = r * d
        for i in range(d):
            out[i] += g[off + i] * x[off + i]


def blend(z, a, b, out, n):
    """Convex combination out = z*a + (1-z)*b."""
    for i in range(n):
        out[i] = z[i] * a[i] + (1.0 - z[i]) * b[i]


def blend_bwd(z, a, b, g, gz, ga, gb, n):
    for i in range(n):
        gi = g[i]
        gz[i] += (a[i] - b[i]) * gi
        ga[i] += z[i] * gi
        gb[i] += (1.0 - z[i]) * gi


def mape_terms(absdiff, truth, out, n):
    """Compact |err|/|truth| ratios for nonzero truths; returns the count."""
    count = 0
    for i in range(n):
        t = truth[i]
        if t != 0.0:
            out[count] = absdiff[i] / abs(t)
            count += 1
    return count


def adam_step(p, g, m, v, n, lr, b1, b2, eps, b1t, b2t):
    """Bias-corrected moment update; eps sits outside the square root."""
    mc = 1.0 / (1.0 - b1t)
    vc = 1.0 / (1.0 - b2t)
    for i in range(n):
        gi = g[i]
        m[i] = b1 * m[i] + (1.0 - b1) * gi
        v[i] = b2 * v[i] + (1.0 - b2) * gi * gi
        p[i] -= lr * (m[i] * mc) / (math.sqrt(v[i] * vc) + eps)
