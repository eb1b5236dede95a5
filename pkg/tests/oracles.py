"""Scalar-loop reference implementations, written against the cell equations
with plain Python floats and no numpy arithmetic."""

import math


def sig(x):
    return 1.0 / (1.0 + math.exp(-x))


def matvec(W, x):
    return [sum(W[i][j] * x[j] for j in range(len(x))) for i in range(len(W))]


def region_lstm_step(Wq, Wh, Wx, b, q, h, x, c_prev):
    """Wq/Wh/Wx/b are dicts keyed by gate name ('i', 'f', 'o', 'g')."""
    pre = {}
    for g in "ifog":
        a, bb, cc = matvec(Wq[g], q), matvec(Wh[g], h), matvec(Wx[g], x)
        pre[g] = [a[n] + bb[n] + cc[n] + b[g][n] for n in range(len(b[g]))]
    i = [sig(v) for v in pre["i"]]
    f = [sig(v) for v in pre["f"]]
    o = [sig(v) for v in pre["o"]]
    g = [math.tanh(v) for v in pre["g"]]
    c = [f[n] * c_prev[n] + i[n] * g[n] for n in range(len(c_prev))]
    m = [o[n] * math.tanh(c[n]) for n in range(len(c))]
    return m, c


def lstm_step(Wx, Wh, b, x, h, c_prev):
    pre = {}
    for g in "ifog":
        a, bb = matvec(Wx[g], x), matvec(Wh[g], h)
        pre[g] = [a[n] + bb[n] + b[g][n] for n in range(len(b[g]))]
    i = [sig(v) for v in pre["i"]]
    f = [sig(v) for v in pre["f"]]
    o = [sig(v) for v in pre["o"]]
    g = [math.tanh(v) for v in pre["g"]]
    c = [f[n] * c_prev[n] + i[n] * g[n] for n in range(len(c_prev))]
    return [o[n] * math.tanh(c[n]) for n in range(len(c))], c


def alpha_gate(Wzq, Wzh, Wzx, bz, wa, ba, q, h, x):
    a, bb, cc = matvec(Wzq, q), matvec(Wzh, h), matvec(Wzx, x)
    z = [math.tanh(a[n] + bb[n] + cc[n] + bz[n]) for n in range(len(bz))]
    return sig(sum(wa[n] * z[n] for n in range(len(z))) + ba)


def episode_pool(h_prev, alphas, messages):
    K = len(alphas)
    beta = 1.0 - sum(alphas) / K
    out = []
    for n in range(len(h_prev)):
        acc = 0.0
        for k in range(K):
            acc += alphas[k] * messages[k][n]
        out.append(beta * h_prev[n] + acc / K)
    return out


def gate_dict(stacked, H):
    """Split a (4H, n) or (4H,) array into python lists keyed by gate."""
    return {g: stacked[n * H:(n + 1) * H].tolist() for n, g in enumerate("ifog")}
