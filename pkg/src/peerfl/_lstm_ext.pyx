# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled LSTM kernels (forward, BPTT, SGD epoch).

Drop-in replacement for ``_lstm_py``; same parameter layout and signatures.
The inner loops run without the GIL so node models can train on threads.
"""

import numpy as np

from libc.math cimport tanh, exp, log, sqrt, isfinite
from libc.stdint cimport int64_t
from libc.stdlib cimport malloc, free


cdef double LOG_FLOOR = 1e-12


cdef inline double _sig(double z) noexcept nogil:
    return 0.5 * (1.0 + tanh(0.5 * z))


cdef struct Layer:
    int nin
    int H
    const double* W       # (4H, nin+H)
    const double* b       # (4H)
    double* dW
    double* db
    double* hin           # (T, nin+H)
    double* gates         # (T, 4H)
    double* cs            # (T, H) cell state after step t
    double* tc            # (T, H) tanh(cs)
    double* hs            # (T, H)


cdef struct Work:
    int T
    Layer l1
    Layer l2
    double* prob          # (T, 2)
    double* dh2           # (T, Q)
    double* dh1           # (T, P)
    double* dz            # (4 * max(P, Q))
    double* dhin          # (widest hin row)
    double* dh_next       # (max(P, Q))
    double* dc_next       # (max(P, Q))
    double* block


cdef int _work_alloc(Work* w, int m, int P, int Q, int T) noexcept nogil:
    cdef int H = P if P > Q else Q
    cdef int wide = (m + P) if (m + P) > (P + Q) else (P + Q)
    cdef size_t n = 0
    n += <size_t>T * (m + P) + <size_t>T * 4 * P + 3 * <size_t>T * P
    n += <size_t>T * (P + Q) + <size_t>T * 4 * Q + 3 * <size_t>T * Q
    n += <size_t>T * 2 + <size_t>T * Q + <size_t>T * P
    n += 4 * <size_t>H + <size_t>wide + 2 * <size_t>H
    cdef double* p = <double*>malloc(n * sizeof(double))
    if p == NULL:
        return -1
    w.block = p
    w.T = T
    w.l1.nin = m
    w.l1.H = P
    w.l1.hin = p; p += T * (m + P)
    w.l1.gates = p; p += T * 4 * P
    w.l1.cs = p; p += T * P
    w.l1.tc = p; p += T * P
    w.l1.hs = p; p += T * P
    w.l2.nin = P
    w.l2.H = Q
    w.l2.hin = p; p += T * (P + Q)
    w.l2.gates = p; p += T * 4 * Q
    w.l2.cs = p; p += T * Q
    w.l2.tc = p; p += T * Q
    w.l2.hs = p; p += T * Q
    w.prob = p; p += T * 2
    w.dh2 = p; p += T * Q
    w.dh1 = p; p += T * P
    w.dz = p; p += 4 * H
    w.dhin = p; p += wide
    w.dh_next = p; p += H
    w.dc_next = p
    return 0


cdef void _bind(Work* w, const double* th, double* g, int m, int P, int Q) noexcept nogil:
    cdef size_t o1 = 4 * P * (m + P)
    cdef size_t o2 = o1 + 4 * P
    cdef size_t o3 = o2 + 4 * Q * (P + Q)
    w.l1.W = th
    w.l1.b = th + o1
    w.l2.W = th + o2
    w.l2.b = th + o3
    w.l1.dW = g
    w.l1.db = g + o1 if g != NULL else NULL
    w.l2.dW = g + o2 if g != NULL else NULL
    w.l2.db = g + o3 if g != NULL else NULL


cdef void _layer_forward(Layer* L, const double* xs, int T) noexcept nogil:
    cdef int nin = L.nin, H = L.H, ncol = L.nin + L.H
    cdef int t, r, j
    cdef double acc, cp
    cdef double* hin
    cdef double* a
    cdef const double* row
    for t in range(T):
        hin = L.hin + t * ncol
        for j in range(nin):
            hin[j] = xs[t * nin + j]
        for j in range(H):
            hin[nin + j] = L.hs[(t - 1) * H + j] if t > 0 else 0.0
        a = L.gates + t * 4 * H
        for r in range(4 * H):
            row = L.W + r * ncol
            acc = L.b[r]
            for j in range(ncol):
                acc += row[j] * hin[j]
            if 2 * H <= r < 3 * H:
                a[r] = tanh(acc)
            else:
                a[r] = _sig(acc)
        for j in range(H):
            cp = L.cs[(t - 1) * H + j] if t > 0 else 0.0
            L.cs[t * H + j] = a[j] * cp + a[H + j] * a[2 * H + j]
            L.tc[t * H + j] = tanh(L.cs[t * H + j])
            L.hs[t * H + j] = a[3 * H + j] * L.tc[t * H + j]


cdef void _layer_backward(Layer* L, Work* w, const double* dhs, double* dxs, int T) noexcept nogil:
    """Accumulate into L.dW/L.db; write input gradients to dxs (T, nin) unless NULL."""
    cdef int nin = L.nin, H = L.H, ncol = L.nin + L.H
    cdef int t, r, j
    cdef double f, i, g, o, dh, dc, cp, tcv
    cdef double* a
    cdef double* hin
    cdef double* dz = w.dz
    cdef double* dhin = w.dhin
    cdef double* dh_next = w.dh_next
    cdef double* dc_next = w.dc_next
    cdef const double* row
    cdef double* drow
    for j in range(H):
        dh_next[j] = 0.0
        dc_next[j] = 0.0
    for t in range(T - 1, -1, -1):
        a = L.gates + t * 4 * H
        hin = L.hin + t * ncol
        for j in range(H):
            f = a[j]
            i = a[H + j]
            g = a[2 * H + j]
            o = a[3 * H + j]
            tcv = L.tc[t * H + j]
            cp = L.cs[(t - 1) * H + j] if t > 0 else 0.0
            dh = dhs[t * H + j] + dh_next[j]
            dc = dc_next[j] + dh * o * (1.0 - tcv * tcv)
            dz[j] = dc * cp * f * (1.0 - f)
            dz[H + j] = dc * g * i * (1.0 - i)
            dz[2 * H + j] = dc * i * (1.0 - g * g)
            dz[3 * H + j] = dh * tcv * o * (1.0 - o)
            dc_next[j] = dc * f
        for j in range(ncol):
            dhin[j] = 0.0
        for r in range(4 * H):
            row = L.W + r * ncol
            drow = L.dW + r * ncol
            L.db[r] += dz[r]
            for j in range(ncol):
                drow[j] += dz[r] * hin[j]
                dhin[j] += dz[r] * row[j]
        if dxs != NULL:
            for j in range(nin):
                dxs[t * nin + j] = dhin[j]
        for j in range(H):
            dh_next[j] = dhin[nin + j]


cdef double _window(Work* w, const double* th, double* grad, int m, int P, int Q,
                    const double* X, const int64_t* y, double* logits_out,
                    int* correct) noexcept nogil:
    """Forward one window; if ``grad`` is set also run BPTT into it (overwritten).

    Returns the mean cross-entropy when ``y`` is set, else 0.
    """
    cdef int T = w.T
    cdef int t, j, k
    cdef double z0, z1, mx, e0, e1, s, loss = 0.0, py
    cdef const double* Wd = th + 4 * P * (m + P) + 4 * P + 4 * Q * (P + Q) + 4 * Q
    cdef const double* bd = Wd + 2 * Q
    cdef double* gWd
    cdef double* gbd
    cdef size_t n_par
    cdef double* h2
    _bind(w, th, grad, m, P, Q)
    _layer_forward(&w.l1, X, T)
    _layer_forward(&w.l2, w.l1.hs, T)
    for t in range(T):
        h2 = w.l2.hs + t * Q
        z0 = bd[0]
        z1 = bd[1]
        for j in range(Q):
            z0 += Wd[j] * h2[j]
            z1 += Wd[Q + j] * h2[j]
        if logits_out != NULL:
            logits_out[2 * t] = z0
            logits_out[2 * t + 1] = z1
        mx = z0 if z0 > z1 else z1
        e0 = exp(z0 - mx)
        e1 = exp(z1 - mx)
        s = e0 + e1
        w.prob[2 * t] = e0 / s
        w.prob[2 * t + 1] = e1 / s
        if y != NULL:
            py = w.prob[2 * t + y[t]]
            loss -= log(py if py > LOG_FLOOR else LOG_FLOOR)
            if correct != NULL and (1 if z1 > z0 else 0) == y[t]:
                correct[0] += 1
    if y == NULL:
        return 0.0
    loss /= T
    if grad == NULL:
        return loss

    n_par = 4 * P * (m + P) + 4 * P + 4 * Q * (P + Q) + 4 * Q + 2 * Q + 2
    for k in range(n_par):
        grad[k] = 0.0
    gWd = grad + (Wd - th)
    gbd = gWd + 2 * Q
    for t in range(T):
        h2 = w.l2.hs + t * Q
        z0 = w.prob[2 * t] / T
        z1 = w.prob[2 * t + 1] / T
        if y[t] == 0:
            z0 -= 1.0 / T
        else:
            z1 -= 1.0 / T
        gbd[0] += z0
        gbd[1] += z1
        for j in range(Q):
            gWd[j] += z0 * h2[j]
            gWd[Q + j] += z1 * h2[j]
            w.dh2[t * Q + j] = z0 * Wd[j] + z1 * Wd[Q + j]
    _layer_backward(&w.l2, w, w.dh2, w.dh1, T)
    _layer_backward(&w.l1, w, w.dh1, NULL, T)
    return loss


def forward_logits(const double[::1] theta, int m, int P, int Q, X):
    """Logits of shape (B, T, 2) for a batch of windows ``X`` (B, T, m)."""
    cdef const double[:, :, ::1] Xv = np.ascontiguousarray(X, dtype=np.float64)
    cdef int B = Xv.shape[0], T = Xv.shape[1], b
    out = np.empty((B, T, 2))
    cdef double[:, :, ::1] ov = out
    cdef Work w
    if B == 0 or T == 0:
        return out
    if Xv.shape[2] != m:
        raise ValueError("input width does not match m")
    if _work_alloc(&w, m, P, Q, T) != 0:
        raise MemoryError()
    with nogil:
        for b in range(B):
            _window(&w, &theta[0], NULL, m, P, Q, &Xv[b, 0, 0], NULL, &ov[b, 0, 0], NULL)
    free(w.block)
    return out


def loss_and_grad(const double[::1] theta, int m, int P, int Q,
                  const double[:, ::1] X, const int64_t[::1] y, double[::1] grad):
    """Mean cross-entropy over one window; gradient written to ``grad``.

    Returns ``(loss, n_correct)``.
    """
    cdef int T = X.shape[0]
    cdef Work w
    cdef int correct = 0
    cdef double loss
    if y.shape[0] != T or X.shape[1] != m:
        raise ValueError("window shape mismatch")
    if _work_alloc(&w, m, P, Q, T) != 0:
        raise MemoryError()
    with nogil:
        loss = _window(&w, &theta[0], &grad[0], m, P, Q, &X[0, 0], &y[0], NULL, &correct)
    free(w.block)
    return loss, correct


def train_epoch(double[::1] theta, int m, int P, int Q,
                const double[:, :, ::1] X, const int64_t[:, ::1] Y,
                const int64_t[::1] order, double lr, double clip):
    """One SGD pass over windows in ``order``; updates ``theta`` in place.

    Returns ``(loss_sum, n_correct, ok)``; ``ok`` is False as soon as a
    non-finite loss or gradient appears, in which case the pass stops.
    """
    cdef int T = X.shape[1]
    cdef Py_ssize_t n_par = theta.shape[0], k, q, q2
    cdef Work w
    cdef int correct = 0, c
    cdef bint ok = True
    cdef double loss, loss_sum = 0.0, norm, scale
    if X.shape[2] != m or Y.shape[1] != T:
        raise ValueError("dataset shape mismatch")
    if order.shape[0] == 0:
        return 0.0, 0, True
    grad_arr = np.empty(n_par)
    cdef double[::1] grad = grad_arr
    if _work_alloc(&w, m, P, Q, T) != 0:
        raise MemoryError()
    with nogil:
        for q in range(order.shape[0]):
            k = order[q]
            c = 0
            loss = _window(&w, &theta[0], &grad[0], m, P, Q, &X[k, 0, 0], &Y[k, 0], NULL, &c)
            norm = 0.0
            for q2 in range(n_par):
                norm += grad[q2] * grad[q2]
            norm = sqrt(norm)
            if not (isfinite(loss) and isfinite(norm)):
                ok = False
                break
            scale = lr
            if clip > 0 and norm > clip:
                scale = lr * clip / norm
            for q2 in range(n_par):
                theta[q2] -= scale * grad[q2]
            loss_sum += loss
            correct += c
    free(w.block)
    return loss_sum, correct, ok
