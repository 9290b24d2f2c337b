# Compiled kernel core: fused SGD epochs, softmax forward passes, box-filter
# feature statistics, confusion counting and majority voting. Semantics match
# atso._kernels._py; see that module for the reference implementations.

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, log, tanh

cnp.import_array()

BACKEND = "cython"


def forward_linear(const double[:, ::1] X, const double[:, ::1] W, const double[::1] b):
    cdef Py_ssize_t n = X.shape[0], f = X.shape[1], k = W.shape[1]
    out = np.empty((n, k), dtype=np.float64)
    cdef double[:, ::1] P = out
    cdef Py_ssize_t i, j, c
    cdef double z, m, s
    cdef double[64] zbuf
    if k > 64:
        raise ValueError("linear head supports at most 64 classes")
    for i in range(n):
        m = -1e308
        for c in range(k):
            z = b[c]
            for j in range(f):
                z += X[i, j] * W[j, c]
            zbuf[c] = z
            if z > m:
                m = z
        s = 0.0
        for c in range(k):
            zbuf[c] = exp(zbuf[c] - m)
            s += zbuf[c]
        for c in range(k):
            P[i, c] = zbuf[c] / s
    return out


def forward_mlp(const double[:, ::1] X, const double[:, ::1] W1, const double[::1] b1,
                const double[:, ::1] W2, const double[::1] b2):
    cdef Py_ssize_t n = X.shape[0], f = X.shape[1]
    cdef Py_ssize_t h = W1.shape[1], k = W2.shape[1]
    out = np.empty((n, k), dtype=np.float64)
    cdef double[:, ::1] P = out
    abuf_arr = np.empty(h, dtype=np.float64)
    cdef double[::1] abuf = abuf_arr
    cdef Py_ssize_t i, j, c, u
    cdef double z, m, s
    cdef double[64] zbuf
    if k > 64:
        raise ValueError("mlp head supports at most 64 classes")
    for i in range(n):
        for u in range(h):
            z = b1[u]
            for j in range(f):
                z += X[i, j] * W1[j, u]
            abuf[u] = tanh(z)
        m = -1e308
        for c in range(k):
            z = b2[c]
            for u in range(h):
                z += abuf[u] * W2[u, c]
            zbuf[c] = z
            if z > m:
                m = z
        s = 0.0
        for c in range(k):
            zbuf[c] = exp(zbuf[c] - m)
            s += zbuf[c]
        for c in range(k):
            P[i, c] = zbuf[c] / s
    return out


def sgd_epoch_linear(const double[:, ::1] X, const int[::1] y, const unsigned char[::1] reduced,
                     const int[::1] group, double[:, ::1] W, double[::1] b,
                     const long long[::1] perm, Py_ssize_t batch_size,
                     double lr, double l2):
    cdef Py_ssize_t n = X.shape[0], f = X.shape[1], k = W.shape[1]
    gw_arr = np.empty((f, k), dtype=np.float64)
    gb_arr = np.empty(k, dtype=np.float64)
    cdef double[:, ::1] gW = gw_arr
    cdef double[::1] gb = gb_arr
    cdef Py_ssize_t start, stop, bi, i, j, c
    cdef double z, m, s, mass, total = 0.0, bm, d
    cdef double[64] p
    cdef int yi, red
    if k > 64:
        raise ValueError("linear head supports at most 64 classes")
    start = 0
    while start < n:
        stop = start + batch_size
        if stop > n:
            stop = n
        bm = <double> (stop - start)
        for j in range(f):
            for c in range(k):
                gW[j, c] = l2 * W[j, c]
        for c in range(k):
            gb[c] = 0.0
        for bi in range(start, stop):
            i = <Py_ssize_t> perm[bi]
            m = -1e308
            for c in range(k):
                z = b[c]
                for j in range(f):
                    z += X[i, j] * W[j, c]
                p[c] = z
                if z > m:
                    m = z
            s = 0.0
            for c in range(k):
                p[c] = exp(p[c] - m)
                s += p[c]
            mass = 0.0
            yi = y[i]
            red = reduced[i]
            for c in range(k):
                p[c] /= s
                if (group[c] == yi) if red else (c == yi):
                    mass += p[c]
            total += -log(mass)
            for c in range(k):
                d = p[c]
                if (group[c] == yi) if red else (c == yi):
                    d -= p[c] / mass
                d /= bm
                gb[c] += d
                for j in range(f):
                    gW[j, c] += X[i, j] * d
        for j in range(f):
            for c in range(k):
                W[j, c] -= lr * gW[j, c]
        for c in range(k):
            b[c] -= lr * gb[c]
        start = stop
    return total / <double> n


def sgd_epoch_mlp(const double[:, ::1] X, const int[::1] y, const unsigned char[::1] reduced,
                  const int[::1] group, double[:, ::1] W1, double[::1] b1,
                  double[:, ::1] W2, double[::1] b2,
                  const long long[::1] perm, Py_ssize_t batch_size,
                  double lr, double l2):
    cdef Py_ssize_t n = X.shape[0], f = X.shape[1]
    cdef Py_ssize_t h = W1.shape[1], k = W2.shape[1]
    g1_arr = np.empty((f, h), dtype=np.float64)
    gb1_arr = np.empty(h, dtype=np.float64)
    g2_arr = np.empty((h, k), dtype=np.float64)
    gb2_arr = np.empty(k, dtype=np.float64)
    a_arr = np.empty(h, dtype=np.float64)
    dz1_arr = np.empty(h, dtype=np.float64)
    cdef double[:, ::1] gW1 = g1_arr, gW2 = g2_arr
    cdef double[::1] gb1 = gb1_arr, gb2 = gb2_arr, a = a_arr, dz1 = dz1_arr
    cdef Py_ssize_t start, stop, bi, i, j, c, u
    cdef double z, m, s, mass, total = 0.0, bm, d, da
    cdef double[64] p, dz2
    cdef int yi, red
    if k > 64:
        raise ValueError("mlp head supports at most 64 classes")
    start = 0
    while start < n:
        stop = start + batch_size
        if stop > n:
            stop = n
        bm = <double> (stop - start)
        for j in range(f):
            for u in range(h):
                gW1[j, u] = l2 * W1[j, u]
        for u in range(h):
            gb1[u] = 0.0
            for c in range(k):
                gW2[u, c] = l2 * W2[u, c]
        for c in range(k):
            gb2[c] = 0.0
        for bi in range(start, stop):
            i = <Py_ssize_t> perm[bi]
            for u in range(h):
                z = b1[u]
                for j in range(f):
                    z += X[i, j] * W1[j, u]
                a[u] = tanh(z)
            m = -1e308
            for c in range(k):
                z = b2[c]
                for u in range(h):
                    z += a[u] * W2[u, c]
                p[c] = z
                if z > m:
                    m = z
            s = 0.0
            for c in range(k):
                p[c] = exp(p[c] - m)
                s += p[c]
            mass = 0.0
            yi = y[i]
            red = reduced[i]
            for c in range(k):
                p[c] /= s
                if (group[c] == yi) if red else (c == yi):
                    mass += p[c]
            total += -log(mass)
            for c in range(k):
                d = p[c]
                if (group[c] == yi) if red else (c == yi):
                    d -= p[c] / mass
                dz2[c] = d / bm
            for u in range(h):
                da = 0.0
                for c in range(k):
                    da += dz2[c] * W2[u, c]
                dz1[u] = da * (1.0 - a[u] * a[u])
            for u in range(h):
                for c in range(k):
                    gW2[u, c] += a[u] * dz2[c]
            for c in range(k):
                gb2[c] += dz2[c]
            for j in range(f):
                for u in range(h):
                    gW1[j, u] += X[i, j] * dz1[u]
            for u in range(h):
                gb1[u] += dz1[u]
        for j in range(f):
            for u in range(h):
                W1[j, u] -= lr * gW1[j, u]
        for u in range(h):
            b1[u] -= lr * gb1[u]
            for c in range(k):
                W2[u, c] -= lr * gW2[u, c]
        for c in range(k):
            b2[c] -= lr * gb2[c]
        start = stop
    return total / <double> n


def box_stats(const double[:, ::1] img, Py_ssize_t radius):
    cdef Py_ssize_t h = img.shape[0], w = img.shape[1]
    mean_arr = np.empty((h, w), dtype=np.float64)
    sq_arr = np.empty((h, w), dtype=np.float64)
    sat_arr = np.zeros((h + 1, w + 1), dtype=np.float64)
    sat2_arr = np.zeros((h + 1, w + 1), dtype=np.float64)
    cdef double[:, ::1] mean = mean_arr, sq = sq_arr, sat = sat_arr, sat2 = sat2_arr
    cdef Py_ssize_t i, j, r0, r1, c0, c1
    cdef double v, cnt
    # column-wise then row-wise running sums: same accumulation order as the
    # numpy fallback's cumsum(axis=0) followed by cumsum(axis=1)
    for i in range(h):
        for j in range(w):
            v = img[i, j]
            sat[i + 1, j + 1] = sat[i, j + 1] + v
            sat2[i + 1, j + 1] = sat2[i, j + 1] + v * v
    for i in range(1, h + 1):
        for j in range(1, w):
            sat[i, j + 1] = sat[i, j] + sat[i, j + 1]
            sat2[i, j + 1] = sat2[i, j] + sat2[i, j + 1]
    for i in range(h):
        r0 = i - radius
        if r0 < 0:
            r0 = 0
        r1 = i + radius
        if r1 > h - 1:
            r1 = h - 1
        r1 += 1
        for j in range(w):
            c0 = j - radius
            if c0 < 0:
                c0 = 0
            c1 = j + radius
            if c1 > w - 1:
                c1 = w - 1
            c1 += 1
            cnt = <double> ((r1 - r0) * (c1 - c0))
            mean[i, j] = (sat[r1, c1] - sat[r0, c1] - sat[r1, c0] + sat[r0, c0]) / cnt
            sq[i, j] = (sat2[r1, c1] - sat2[r0, c1] - sat2[r1, c0] + sat2[r0, c0]) / cnt
    return mean_arr, sq_arr


def confusion_counts(const int[::1] pred, const int[::1] truth, int num_classes):
    cdef Py_ssize_t n = pred.shape[0]
    out = np.zeros((num_classes, num_classes), dtype=np.int64)
    cdef long long[:, ::1] cm = out
    cdef Py_ssize_t i
    for i in range(n):
        cm[truth[i], pred[i]] += 1
    return out


def majority_vote(const int[:, ::1] votes, int num_classes):
    cdef Py_ssize_t v = votes.shape[0], n = votes.shape[1]
    out = np.empty(n, dtype=np.int32)
    cdef int[::1] lab = out
    counts_arr = np.zeros(num_classes, dtype=np.int64)
    cdef long long[::1] counts = counts_arr
    cdef Py_ssize_t i, s, c, best
    for i in range(n):
        for c in range(num_classes):
            counts[c] = 0
        for s in range(v):
            counts[votes[s, i]] += 1
        best = 0
        for c in range(1, num_classes):
            if counts[c] > counts[best]:
                best = c
        lab[i] = <int> best
    return out
