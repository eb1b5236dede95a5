# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled fused kernels; mirror of ``_kernels_py``.

All reductions are plain loops in ascending index order, so results do not
depend on BLAS threading or blocking.
"""

import numpy as np
from libc.math cimport exp, tanh

NAME = "cython"

ctypedef double f64


cdef inline f64 _sig(f64 x) noexcept nogil:
    if x > 500.0:
        x = 500.0
    elif x < -500.0:
        x = -500.0
    return 1.0 / (1.0 + exp(-x))


cdef inline f64 _dot(const f64[:, :] W, Py_ssize_t r, const f64[:] x) noexcept nogil:
    cdef Py_ssize_t j
    cdef f64 s = 0.0
    for j in range(W.shape[1]):
        s = s + W[r, j] * x[j]
    return s


cdef inline f64 _dot_row(const f64[:, :] W, Py_ssize_t r, const f64[:, :] X, Py_ssize_t k) noexcept nogil:
    cdef Py_ssize_t j
    cdef f64 s = 0.0
    for j in range(W.shape[1]):
        s = s + W[r, j] * X[k, j]
    return s


cdef void _cell_backward(const f64[:, :] G, const f64[:, :] TC, const f64[:, :] Cp,
                         const f64[:, :] dC, const f64[:, :] dM, Py_ssize_t H,
                         f64[:, ::1] dpre, f64[:, ::1] dCp) noexcept nogil:
    cdef Py_ssize_t k, u
    cdef f64 i, f, o, g, tc, dc
    for k in range(G.shape[0]):
        for u in range(H):
            i = G[k, u]
            f = G[k, H + u]
            o = G[k, 2 * H + u]
            g = G[k, 3 * H + u]
            tc = TC[k, u]
            dc = dC[k, u] + dM[k, u] * o * (1.0 - tc * tc)
            dpre[k, u] = dc * g * i * (1.0 - i)
            dpre[k, H + u] = dc * Cp[k, u] * f * (1.0 - f)
            dpre[k, 2 * H + u] = dM[k, u] * tc * o * (1.0 - o)
            dpre[k, 3 * H + u] = dc * i * (1.0 - g * g)
            dCp[k, u] = dc * f


def region_lstm_forward(const f64[:, :] Wq, const f64[:, :] Wh, const f64[:, :] Wx,
                        const f64[:] b, const f64[:] q, const f64[:] h,
                        const f64[:, :] X, const f64[:, :] C_prev):
    cdef Py_ssize_t K = X.shape[0], H4 = Wq.shape[0], H = H4 // 4
    cdef Py_ssize_t k, r, u
    cdef f64 pre, c, tc
    shared_a = np.empty(H4)
    C_a = np.empty((K, H))
    M_a = np.empty((K, H))
    G_a = np.empty((K, H4))
    TC_a = np.empty((K, H))
    cdef f64[::1] shared = shared_a
    cdef f64[:, ::1] C = C_a
    cdef f64[:, ::1] M = M_a
    cdef f64[:, ::1] G = G_a
    cdef f64[:, ::1] TC = TC_a
    with nogil:
        for r in range(H4):
            shared[r] = (_dot(Wq, r, q) + _dot(Wh, r, h)) + b[r]
        for k in range(K):
            for r in range(H4):
                pre = shared[r] + _dot_row(Wx, r, X, k)
                if r < 3 * H:
                    G[k, r] = _sig(pre)
                else:
                    G[k, r] = tanh(pre)
            for u in range(H):
                c = G[k, H + u] * C_prev[k, u] + G[k, u] * G[k, 3 * H + u]
                tc = tanh(c)
                C[k, u] = c
                TC[k, u] = tc
                M[k, u] = G[k, 2 * H + u] * tc
    return C_a, M_a, G_a, TC_a


def region_lstm_backward(const f64[:, :] Wq, const f64[:, :] Wh, const f64[:, :] Wx,
                         const f64[:] q, const f64[:] h, const f64[:, :] X,
                         const f64[:, :] C_prev, const f64[:, :] G, const f64[:, :] TC,
                         const f64[:, :] dC, const f64[:, :] dM):
    cdef Py_ssize_t K = X.shape[0], H4 = Wq.shape[0], H = H4 // 4
    cdef Py_ssize_t Dq = Wq.shape[1], Dh = Wh.shape[1], Dx = Wx.shape[1]
    cdef Py_ssize_t k, r, j
    cdef f64 s
    dpre_a = np.empty((K, H4))
    dCp_a = np.empty((K, H))
    dsh_a = np.zeros(H4)
    dWq_a = np.empty((H4, Dq))
    dWh_a = np.empty((H4, Dh))
    dWx_a = np.zeros((H4, Dx))
    dq_a = np.zeros(Dq)
    dh_a = np.zeros(Dh)
    dX_a = np.zeros((K, Dx))
    cdef f64[:, ::1] dpre = dpre_a
    cdef f64[:, ::1] dCp = dCp_a
    cdef f64[::1] dsh = dsh_a
    cdef f64[:, ::1] dWq = dWq_a
    cdef f64[:, ::1] dWh = dWh_a
    cdef f64[:, ::1] dWx = dWx_a
    cdef f64[::1] dq = dq_a
    cdef f64[::1] dh = dh_a
    cdef f64[:, ::1] dX = dX_a
    with nogil:
        _cell_backward(G, TC, C_prev, dC, dM, H, dpre, dCp)
        for k in range(K):
            for r in range(H4):
                dsh[r] += dpre[k, r]
                for j in range(Dx):
                    dWx[r, j] += dpre[k, r] * X[k, j]
            for j in range(Dx):
                s = 0.0
                for r in range(H4):
                    s = s + dpre[k, r] * Wx[r, j]
                dX[k, j] = s
        for r in range(H4):
            for j in range(Dq):
                dWq[r, j] = dsh[r] * q[j]
                dq[j] += Wq[r, j] * dsh[r]
            for j in range(Dh):
                dWh[r, j] = dsh[r] * h[j]
                dh[j] += Wh[r, j] * dsh[r]
    return dWq_a, dWh_a, dWx_a, dsh_a, dq_a, dh_a, dX_a, dCp_a


def alpha_gate_forward(const f64[:, :] Wzq, const f64[:, :] Wzh, const f64[:, :] Wzx,
                       const f64[:] bz, const f64[:] wa, const f64[:] ba,
                       const f64[:] q, const f64[:] h, const f64[:, :] X):
    cdef Py_ssize_t K = X.shape[0], Dz = Wzq.shape[0]
    cdef Py_ssize_t k, r
    cdef f64 a
    shared_a = np.empty(Dz)
    Z_a = np.empty((K, Dz))
    alpha_a = np.empty(K)
    cdef f64[::1] shared = shared_a
    cdef f64[:, ::1] Z = Z_a
    cdef f64[::1] alpha = alpha_a
    with nogil:
        for r in range(Dz):
            shared[r] = (_dot(Wzq, r, q) + _dot(Wzh, r, h)) + bz[r]
        for k in range(K):
            a = 0.0
            for r in range(Dz):
                Z[k, r] = tanh(shared[r] + _dot_row(Wzx, r, X, k))
                a = a + Z[k, r] * wa[r]
            alpha[k] = _sig(a + ba[0])
    return alpha_a, Z_a


def alpha_gate_backward(const f64[:, :] Wzq, const f64[:, :] Wzh, const f64[:, :] Wzx,
                        const f64[:] wa, const f64[:] q, const f64[:] h, const f64[:, :] X,
                        const f64[:, :] Z, const f64[:] alpha, const f64[:] dalpha):
    cdef Py_ssize_t K = X.shape[0], Dz = Wzq.shape[0]
    cdef Py_ssize_t Dq = Wzq.shape[1], Dh = Wzh.shape[1], Dx = Wzx.shape[1]
    cdef Py_ssize_t k, r, j
    cdef f64 dpa, dpz, s
    dpz_a = np.empty((K, Dz))
    dsh_a = np.zeros(Dz)
    dWzq_a = np.empty((Dz, Dq))
    dWzh_a = np.empty((Dz, Dh))
    dWzx_a = np.zeros((Dz, Dx))
    dwa_a = np.zeros(Dz)
    dba_a = np.zeros(1)
    dq_a = np.zeros(Dq)
    dh_a = np.zeros(Dh)
    dX_a = np.zeros((K, Dx))
    cdef f64[:, ::1] dpzm = dpz_a
    cdef f64[::1] dsh = dsh_a
    cdef f64[:, ::1] dWzq = dWzq_a
    cdef f64[:, ::1] dWzh = dWzh_a
    cdef f64[:, ::1] dWzx = dWzx_a
    cdef f64[::1] dwa = dwa_a
    cdef f64[::1] dba = dba_a
    cdef f64[::1] dq = dq_a
    cdef f64[::1] dh = dh_a
    cdef f64[:, ::1] dX = dX_a
    with nogil:
        for k in range(K):
            dpa = dalpha[k] * alpha[k] * (1.0 - alpha[k])
            dba[0] += dpa
            for r in range(Dz):
                dwa[r] += dpa * Z[k, r]
                dpz = dpa * wa[r] * (1.0 - Z[k, r] * Z[k, r])
                dpzm[k, r] = dpz
                dsh[r] += dpz
                for j in range(Dx):
                    dWzx[r, j] += dpz * X[k, j]
            for j in range(Dx):
                s = 0.0
                for r in range(Dz):
                    s = s + dpzm[k, r] * Wzx[r, j]
                dX[k, j] = s
        for r in range(Dz):
            for j in range(Dq):
                dWzq[r, j] = dsh[r] * q[j]
                dq[j] += Wzq[r, j] * dsh[r]
            for j in range(Dh):
                dWzh[r, j] = dsh[r] * h[j]
                dh[j] += Wzh[r, j] * dsh[r]
    return dWzq_a, dWzh_a, dWzx_a, dsh_a, dwa_a, dba_a, dq_a, dh_a, dX_a


def episode_pool_forward(const f64[:] h_prev, const f64[:] alpha, const f64[:, :] M):
    cdef Py_ssize_t K = alpha.shape[0], H = h_prev.shape[0]
    cdef Py_ssize_t k, u
    cdef f64 s = 0.0, beta
    out_a = np.zeros(H)
    cdef f64[::1] out = out_a
    with nogil:
        for k in range(K):
            s = s + alpha[k]
            for u in range(H):
                out[u] += alpha[k] * M[k, u]
        beta = 1.0 - s / K
        for u in range(H):
            out[u] = beta * h_prev[u] + out[u] / K
    return out_a


def episode_pool_backward(const f64[:] h_prev, const f64[:] alpha, const f64[:, :] M,
                          const f64[:] dh):
    cdef Py_ssize_t K = alpha.shape[0], H = h_prev.shape[0]
    cdef Py_ssize_t k, u
    cdef f64 s = 0.0, beta, dbeta = 0.0, dm
    dhp_a = np.empty(H)
    dalpha_a = np.empty(K)
    dM_a = np.empty((K, H))
    cdef f64[::1] dhp = dhp_a
    cdef f64[::1] dalpha = dalpha_a
    cdef f64[:, ::1] dM = dM_a
    with nogil:
        for k in range(K):
            s = s + alpha[k]
        beta = 1.0 - s / K
        for u in range(H):
            dbeta = dbeta + dh[u] * h_prev[u]
            dhp[u] = beta * dh[u]
        for k in range(K):
            dm = 0.0
            for u in range(H):
                dm = dm + M[k, u] * dh[u]
                dM[k, u] = (alpha[k] / K) * dh[u]
            dalpha[k] = (dm - dbeta) / K
    return dhp_a, dalpha_a, dM_a


def lstm_forward(const f64[:, :] Wx, const f64[:, :] Wh, const f64[:] b,
                 const f64[:] x, const f64[:] h, const f64[:] c):
    cdef Py_ssize_t H4 = Wx.shape[0], H = H4 // 4
    cdef Py_ssize_t r, u
    cdef f64 pre, cn, tc
    G_a = np.empty(H4)
    TC_a = np.empty(H)
    h_a = np.empty(H)
    c_a = np.empty(H)
    cdef f64[::1] G = G_a
    cdef f64[::1] TC = TC_a
    cdef f64[::1] hn = h_a
    cdef f64[::1] cnew = c_a
    with nogil:
        for r in range(H4):
            pre = (_dot(Wx, r, x) + _dot(Wh, r, h)) + b[r]
            if r < 3 * H:
                G[r] = _sig(pre)
            else:
                G[r] = tanh(pre)
        for u in range(H):
            cn = G[H + u] * c[u] + G[u] * G[3 * H + u]
            tc = tanh(cn)
            cnew[u] = cn
            TC[u] = tc
            hn[u] = G[2 * H + u] * tc
    return h_a, c_a, G_a, TC_a


def lstm_backward(const f64[:, :] Wx, const f64[:, :] Wh, const f64[:] x, const f64[:] h,
                  const f64[:] c, const f64[:] G, const f64[:] TC,
                  const f64[:] dh_new, const f64[:] dc_new):
    cdef Py_ssize_t H4 = Wx.shape[0], H = H4 // 4, Dx = Wx.shape[1], Dh = Wh.shape[1]
    cdef Py_ssize_t r, j
    dpre_a = np.empty((1, H4))
    dcp_a = np.empty((1, H))
    dWx_a = np.empty((H4, Dx))
    dWh_a = np.empty((H4, Dh))
    dx_a = np.zeros(Dx)
    dh_a = np.zeros(Dh)
    cdef f64[:, ::1] dpre = dpre_a
    cdef f64[:, ::1] dcp = dcp_a
    cdef f64[:, ::1] dWx = dWx_a
    cdef f64[:, ::1] dWh = dWh_a
    cdef f64[::1] dx = dx_a
    cdef f64[::1] dh = dh_a
    cdef const f64[:, :] G2 = G[None, :]
    cdef const f64[:, :] TC2 = TC[None, :]
    cdef const f64[:, :] c2 = c[None, :]
    cdef const f64[:, :] dc2 = dc_new[None, :]
    cdef const f64[:, :] dh2 = dh_new[None, :]
    with nogil:
        _cell_backward(G2, TC2, c2, dc2, dh2, H, dpre, dcp)
        for r in range(H4):
            for j in range(Dx):
                dWx[r, j] = dpre[0, r] * x[j]
                dx[j] += Wx[r, j] * dpre[0, r]
            for j in range(Dh):
                dWh[r, j] = dpre[0, r] * h[j]
                dh[j] += Wh[r, j] * dpre[0, r]
    return dWx_a, dWh_a, dpre_a[0], dx_a, dh_a, dcp_a[0]
