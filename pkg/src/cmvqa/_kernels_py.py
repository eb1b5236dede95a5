"""Pure numpy implementations of the fused recurrent kernels.

Same signatures and return conventions as the compiled ``_kernels``
extension. Gate blocks are stacked row-wise in the order (i, f, o, g).
Backward functions return freshly allocated gradients; nothing is
accumulated in place.
"""

import numpy as np

NAME = "python"
_CLIP = 500.0


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.clip(x, -_CLIP, _CLIP)))


def dsigmoid(s):
    return s * (1.0 - s)


def dtanh(t):
    return 1.0 - t * t


def _gates(pre, H):
    out = np.empty_like(pre)
    out[..., :3 * H] = sigmoid(pre[..., :3 * H])
    out[..., 3 * H:] = np.tanh(pre[..., 3 * H:])
    return out


def _gate_grads(G, TC, c_prev, dC, dM, H):
    """Shared LSTM cell backward: returns (d pre-activations, d c_prev)."""
    i, f, o, g = G[..., :H], G[..., H:2 * H], G[..., 2 * H:3 * H], G[..., 3 * H:]
    dc = dC + dM * o * dtanh(TC)
    dpre = np.empty_like(G)
    dpre[..., :H] = dc * g * dsigmoid(i)
    dpre[..., H:2 * H] = dc * c_prev * dsigmoid(f)
    dpre[..., 2 * H:3 * H] = dM * TC * dsigmoid(o)
    dpre[..., 3 * H:] = dc * i * dtanh(g)
    return dpre, dc * f


def region_lstm_forward(Wq, Wh, Wx, b, q, h, X, C_prev):
    """All K regions through one shared Region-LSTM.

    Returns ``(C, M, G, TC)``: new cells, messages, activated gates and
    ``tanh(C)``; the last two are the backward cache.
    """
    K = X.shape[0]
    H = Wq.shape[0] // 4
    shared = (Wq @ q + Wh @ h) + b
    pre = np.empty((K, 4 * H))
    # per-region products keep region k independent of K, bit for bit
    for k in range(K):
        pre[k] = shared + Wx @ X[k]
    G = _gates(pre, H)
    C = G[:, H:2 * H] * C_prev + G[:, :H] * G[:, 3 * H:]
    TC = np.tanh(C)
    M = G[:, 2 * H:3 * H] * TC
    return C, M, G, TC


def region_lstm_backward(Wq, Wh, Wx, q, h, X, C_prev, G, TC, dC, dM):
    """Returns ``(dWq, dWh, dWx, db, dq, dh, dX, dC_prev)``."""
    H = Wq.shape[0] // 4
    dpre, dC_prev = _gate_grads(G, TC, C_prev, dC, dM, H)
    dshared = dpre.sum(axis=0)
    return (np.outer(dshared, q), np.outer(dshared, h), dpre.T @ X, dshared,
            Wq.T @ dshared, Wh.T @ dshared, dpre @ Wx, dC_prev)


def alpha_gate_forward(Wzq, Wzh, Wzx, bz, wa, ba, q, h, X):
    """Per-region scalar gates. Returns ``(alpha[K], Z[K, d_z])``."""
    K = X.shape[0]
    shared = (Wzq @ q + Wzh @ h) + bz
    Z = np.empty((K, Wzq.shape[0]))
    for k in range(K):
        Z[k] = np.tanh(shared + Wzx @ X[k])
    alpha = sigmoid(Z @ wa + ba)
    return alpha, Z


def alpha_gate_backward(Wzq, Wzh, Wzx, wa, q, h, X, Z, alpha, dalpha):
    """Returns ``(dWzq, dWzh, dWzx, dbz, dwa, dba, dq, dh, dX)``."""
    dpa = dalpha * dsigmoid(alpha)
    dwa = Z.T @ dpa
    dba = np.array([dpa.sum()])
    dpz = np.outer(dpa, wa) * dtanh(Z)
    dshared = dpz.sum(axis=0)
    return (np.outer(dshared, q), np.outer(dshared, h), dpz.T @ X, dshared,
            dwa, dba, Wzq.T @ dshared, Wzh.T @ dshared, dpz @ Wzx)


def episode_pool_forward(h_prev, alpha, M):
    """``beta * h_prev + mean_k(alpha_k * m_k)`` with ``beta = 1 - mean(alpha)``."""
    K = alpha.shape[0]
    s = 0.0
    acc = np.zeros_like(h_prev)
    for k in range(K):
        s += alpha[k]
        acc += alpha[k] * M[k]
    beta = 1.0 - s / K
    return beta * h_prev + acc / K


def episode_pool_backward(h_prev, alpha, M, dh):
    """Returns ``(dh_prev, dalpha, dM)``."""
    K = alpha.shape[0]
    beta = 1.0 - alpha.sum() / K
    dbeta = dh @ h_prev
    dalpha = (M @ dh - dbeta) / K
    dM = np.outer(alpha / K, dh)
    return beta * dh, dalpha, dM


def lstm_forward(Wx, Wh, b, x, h, c):
    """Standard LSTM step. Returns ``(h_new, c_new, G, TC)``."""
    H = Wh.shape[1]
    G = _gates((Wx @ x + Wh @ h) + b, H)
    c_new = G[H:2 * H] * c + G[:H] * G[3 * H:]
    TC = np.tanh(c_new)
    return G[2 * H:3 * H] * TC, c_new, G, TC


def lstm_backward(Wx, Wh, x, h, c, G, TC, dh_new, dc_new):
    """Returns ``(dWx, dWh, db, dx, dh, dc)``."""
    H = Wh.shape[1]
    dpre, dc = _gate_grads(G, TC, c, dc_new, dh_new, H)
    return (np.outer(dpre, x), np.outer(dpre, h), dpre,
            Wx.T @ dpre, Wh.T @ dpre, dc)
