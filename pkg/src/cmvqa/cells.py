"""Recurrent building blocks: Region-LSTM, alpha gate, episode pooling,
the composed Compositional Memory step, and a plain LSTM.

Each step is a single fused node on the tape; the arithmetic lives in the
backend selected by :mod:`cmvqa.kernels`.

Weights of the four gates are stored stacked, rows ordered (i, f, o, g).
The per-gate named parameters (``W_qi``, ``W_hf``, ...) are views into
those stacks, so there is exactly one name per weight and one storage
location, shared by every region.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import DimensionError
from .numerics import Parameter, Tensor, leaf, record

GATES = ("i", "f", "o", "g")


def _check(t: Tensor, shape, what):
    if t.data.shape != shape:
        raise DimensionError(f"{what}: expected shape {shape}, got {t.data.shape}")


class ParamGroup:
    """A set of leaves plus the named views over them."""

    prefix: str

    def leaves(self) -> list[Tensor]:
        raise NotImplementedError

    def parameters(self) -> list[Parameter]:
        raise NotImplementedError

    def _gate_views(self, tensor, tag, H):
        return [Parameter(f"{self.prefix}.{tag}{g}", tensor, slice(n * H, (n + 1) * H))
                for n, g in enumerate(GATES)]


def _uniform(rng, arr, fan_in):
    s = 1.0 / math.sqrt(fan_in)
    arr[...] = rng.uniform(-s, s, size=arr.shape)


class LSTMParams(ParamGroup):
    """Input weights ``W_x{gate}``, recurrent weights ``W_h{gate}``, biases ``b_{gate}``."""

    def __init__(self, d_in, d_h, prefix="lstm"):
        self.d_in, self.d_h, self.prefix = d_in, d_h, prefix
        self.W_x = leaf((4 * d_h, d_in), f"{prefix}.W_x")
        self.W_h = leaf((4 * d_h, d_h), f"{prefix}.W_h")
        self.b = leaf((4 * d_h,), f"{prefix}.b")

    def leaves(self):
        return [self.W_x, self.W_h, self.b]

    def parameters(self):
        H = self.d_h
        return (self._gate_views(self.W_x, "W_x", H) + self._gate_views(self.W_h, "W_h", H)
                + self._gate_views(self.b, "b_", H))

    def init(self, rng):
        fan_in = self.d_in + self.d_h
        _uniform(rng, self.W_x.data, fan_in)
        _uniform(rng, self.W_h.data, fan_in)
        self.b.data[:] = 0.0
        self.b.data[self.d_h:2 * self.d_h] = 1.0


class RegionLSTMParams(ParamGroup):
    """One shared parameter set for all regions: ``W_q*``, ``W_h*``, ``W_x*``, ``b_*``."""

    def __init__(self, d_q, d_h, d_x, prefix="cm.region_lstm"):
        self.d_q, self.d_h, self.d_x, self.prefix = d_q, d_h, d_x, prefix
        self.W_q = leaf((4 * d_h, d_q), f"{prefix}.W_q")
        self.W_h = leaf((4 * d_h, d_h), f"{prefix}.W_h")
        self.W_x = leaf((4 * d_h, d_x), f"{prefix}.W_x")
        self.b = leaf((4 * d_h,), f"{prefix}.b")

    def leaves(self):
        return [self.W_q, self.W_h, self.W_x, self.b]

    def parameters(self):
        H = self.d_h
        return (self._gate_views(self.W_q, "W_q", H) + self._gate_views(self.W_h, "W_h", H)
                + self._gate_views(self.W_x, "W_x", H) + self._gate_views(self.b, "b_", H))

    def init(self, rng):
        fan_in = self.d_q + self.d_h + self.d_x
        for W in (self.W_q, self.W_h, self.W_x):
            _uniform(rng, W.data, fan_in)
        self.b.data[:] = 0.0
        self.b.data[self.d_h:2 * self.d_h] = 1.0


class AlphaGateParams(ParamGroup):
    def __init__(self, d_q, d_h, d_x, d_z=None, prefix="cm.alpha_gate"):
        d_z = d_h if d_z is None else d_z
        self.d_q, self.d_h, self.d_x, self.d_z, self.prefix = d_q, d_h, d_x, d_z, prefix
        self.W_zq = leaf((d_z, d_q), f"{prefix}.W_zq")
        self.W_zh = leaf((d_z, d_h), f"{prefix}.W_zh")
        self.W_zx = leaf((d_z, d_x), f"{prefix}.W_zx")
        self.b_z = leaf((d_z,), f"{prefix}.b_z")
        self.W_alpha = leaf((1, d_z), f"{prefix}.W_alpha")
        self.b_alpha = leaf((1,), f"{prefix}.b_alpha")

    def leaves(self):
        return [self.W_zq, self.W_zh, self.W_zx, self.b_z, self.W_alpha, self.b_alpha]

    def parameters(self):
        return [Parameter(t.name, t) for t in self.leaves()]

    def init(self, rng):
        fan_in = self.d_q + self.d_h + self.d_x
        for W in (self.W_zq, self.W_zh, self.W_zx):
            _uniform(rng, W.data, fan_in)
        _uniform(rng, self.W_alpha.data, self.d_z)
        self.b_z.data[:] = 0.0
        self.b_alpha.data[:] = 0.0


# -- steps -----------------------------------------------------------------

def region_lstm(p: RegionLSTMParams, q: Tensor, h_prev: Tensor, X: Tensor, C_prev: Tensor):
    """Every region through the shared Region-LSTM at once.

    ``X`` is (K, d_x), ``C_prev`` is (K, d_h); returns ``(M, C)`` both (K, d_h).
    Region k's result is bit-identical to :func:`region_lstm_step` on row k.
    """
    K = X.data.shape[0] if X.data.ndim == 2 else -1
    _check(q, (p.d_q,), "region_lstm q")
    _check(h_prev, (p.d_h,), "region_lstm h_prev")
    _check(X, (K, p.d_x), "region_lstm X")
    _check(C_prev, (K, p.d_h), "region_lstm C_prev")
    k = kernels.current
    Wq, Wh, Wx, b = p.W_q.data, p.W_h.data, p.W_x.data, p.b.data
    qd, hd, Xd, Cd = q.data, h_prev.data, X.data, C_prev.data
    C, M, G, TC = k.region_lstm_forward(Wq, Wh, Wx, b, qd, hd, Xd, Cd)
    C, M = Tensor._wrap(C), Tensor._wrap(M)

    def back(dM, dC):
        dWq, dWh, dWx, db, dq, dh, dX, dCp = k.region_lstm_backward(
            Wq, Wh, Wx, qd, hd, Xd, Cd, G, TC, dC, dM)
        return dWq, dWh, dWx, db, dq, dh, dX, dCp

    record([M, C], [p.W_q, p.W_h, p.W_x, p.b, q, h_prev, X, C_prev], back)
    return M, C


def region_lstm_step(p: RegionLSTMParams, q_t: Tensor, h_prev: Tensor, x_k: Tensor, c_prev: Tensor):
    """One region: gates from (q_t, shared episode h_prev, x_k); returns ``(m, c)``."""
    _check(x_k, (p.d_x,), "region_lstm_step x_k")
    _check(c_prev, (p.d_h,), "region_lstm_step c_prev")
    _check(q_t, (p.d_q,), "region_lstm_step q_t")
    _check(h_prev, (p.d_h,), "region_lstm_step h_prev")
    k = kernels.current
    Wq, Wh, Wx, b = p.W_q.data, p.W_h.data, p.W_x.data, p.b.data
    qd, hd = q_t.data, h_prev.data
    Xd, Cd = x_k.data[None, :], c_prev.data[None, :]
    C, M, G, TC = k.region_lstm_forward(Wq, Wh, Wx, b, qd, hd, Xd, Cd)
    m, c = Tensor._wrap(M[0]), Tensor._wrap(C[0])

    def back(dm, dc):
        dWq, dWh, dWx, db, dq, dh, dX, dCp = k.region_lstm_backward(
            Wq, Wh, Wx, qd, hd, Xd, Cd, G, TC, dc[None, :], dm[None, :])
        return dWq, dWh, dWx, db, dq, dh, dX[0], dCp[0]

    record([m, c], [p.W_q, p.W_h, p.W_x, p.b, q_t, h_prev, x_k, c_prev], back)
    return m, c


def alpha_gates(p: AlphaGateParams, q: Tensor, h_prev: Tensor, X: Tensor) -> Tensor:
    """Attention weight in (0, 1) for every row of ``X``; returns shape (K,)."""
    K = X.data.shape[0] if X.data.ndim == 2 else -1
    _check(q, (p.d_q,), "alpha_gate q")
    _check(h_prev, (p.d_h,), "alpha_gate h_prev")
    _check(X, (K, p.d_x), "alpha_gate X")
    k = kernels.current
    Wzq, Wzh, Wzx, bz = p.W_zq.data, p.W_zh.data, p.W_zx.data, p.b_z.data
    wa, ba = p.W_alpha.data[0], p.b_alpha.data
    qd, hd, Xd = q.data, h_prev.data, X.data
    alpha, Z = k.alpha_gate_forward(Wzq, Wzh, Wzx, bz, wa, ba, qd, hd, Xd)
    out = Tensor._wrap(alpha)

    def back(da):
        dWzq, dWzh, dWzx, dbz, dwa, dba, dq, dh, dX = k.alpha_gate_backward(
            Wzq, Wzh, Wzx, wa, qd, hd, Xd, Z, alpha, da)
        return dWzq, dWzh, dWzx, dbz, dwa[None, :], dba, dq, dh, dX

    record([out], [p.W_zq, p.W_zh, p.W_zx, p.b_z, p.W_alpha, p.b_alpha, q, h_prev, X], back)
    return out


def alpha_gate(p: AlphaGateParams, q_t: Tensor, h_prev: Tensor, x_k: Tensor) -> Tensor:
    """Scalar gate for a single region (0-d tensor)."""
    _check(x_k, (p.d_x,), "alpha_gate x_k")
    _check(q_t, (p.d_q,), "alpha_gate q_t")
    _check(h_prev, (p.d_h,), "alpha_gate h_prev")
    k = kernels.current
    Wzq, Wzh, Wzx, bz = p.W_zq.data, p.W_zh.data, p.W_zx.data, p.b_z.data
    wa, ba = p.W_alpha.data[0], p.b_alpha.data
    qd, hd, Xd = q_t.data, h_prev.data, x_k.data[None, :]
    alpha, Z = k.alpha_gate_forward(Wzq, Wzh, Wzx, bz, wa, ba, qd, hd, Xd)
    out = Tensor._wrap(alpha.reshape(()))

    def back(da):
        dWzq, dWzh, dWzx, dbz, dwa, dba, dq, dh, dX = k.alpha_gate_backward(
            Wzq, Wzh, Wzx, wa, qd, hd, Xd, Z, alpha, np.reshape(da, (1,)))
        return dWzq, dWzh, dWzx, dbz, dwa[None, :], dba, dq, dh, dX[0]

    record([out], [p.W_zq, p.W_zh, p.W_zx, p.b_z, p.W_alpha, p.b_alpha, q_t, h_prev, x_k], back)
    return out


def episode_pool(h_prev: Tensor, alphas: Tensor, messages: Tensor) -> Tensor:
    """``h_t = beta * h_prev + (1/K) sum_k alpha_k m_k``, ``beta = 1 - mean(alpha)``.

    Sums run in ascending k.
    """
    if alphas.data.ndim != 1 or alphas.data.shape[0] == 0:
        raise DimensionError("episode_pool needs K >= 1 alphas")
    K = alphas.data.shape[0]
    H = h_prev.data.shape[0]
    if messages.data.shape != (K, H):
        raise DimensionError(
            f"episode_pool: messages {messages.data.shape} vs alphas ({K},) and h ({H},)")
    k = kernels.current
    hd, ad, Md = h_prev.data, alphas.data, messages.data
    h = Tensor._wrap(k.episode_pool_forward(hd, ad, Md))
    record([h], [h_prev, alphas, messages],
           lambda g: k.episode_pool_backward(hd, ad, Md, g))
    return h


def lstm_step(p: LSTMParams, x: Tensor, h_prev: Tensor, c_prev: Tensor):
    """Standard LSTM recurrence; returns ``(h, c)``."""
    _check(x, (p.d_in,), f"{p.prefix} input")
    _check(h_prev, (p.d_h,), f"{p.prefix} h_prev")
    _check(c_prev, (p.d_h,), f"{p.prefix} c_prev")
    k = kernels.current
    Wx, Wh, b = p.W_x.data, p.W_h.data, p.b.data
    xd, hd, cd = x.data, h_prev.data, c_prev.data
    h, c, G, TC = k.lstm_forward(Wx, Wh, b, xd, hd, cd)
    h, c = Tensor._wrap(h), Tensor._wrap(c)
    record([h, c], [p.W_x, p.W_h, p.b, x, h_prev, c_prev],
           lambda dh, dc: k.lstm_backward(Wx, Wh, xd, hd, cd, G, TC, dh, dc))
    return h, c


# -- compositional memory --------------------------------------------------

@dataclass
class CompositionalMemoryState:
    """Episode ``h`` (d_h), per-region cells ``C`` and messages ``M`` (K, d_h),
    and the attention weights ``alpha`` (K,) of the step that produced it."""

    h: Tensor
    C: Tensor
    M: Tensor
    alpha: Tensor | None = None

    @property
    def regions(self):
        return [(self.C.data[k], self.M.data[k]) for k in range(self.C.data.shape[0])]


class CompositionalMemory(ParamGroup):
    """Region-LSTMs and alpha gates sharing one parameter set across regions."""

    def __init__(self, d_q, d_h, d_x, d_z=None, prefix="cm"):
        self.prefix = prefix
        self.d_q, self.d_h, self.d_x = d_q, d_h, d_x
        self.region = RegionLSTMParams(d_q, d_h, d_x, prefix=f"{prefix}.region_lstm")
        self.gate = AlphaGateParams(d_q, d_h, d_x, d_z, prefix=f"{prefix}.alpha_gate")

    def leaves(self):
        return self.region.leaves() + self.gate.leaves()

    def parameters(self):
        return self.region.parameters() + self.gate.parameters()

    def init(self, rng):
        self.region.init(rng)
        self.gate.init(rng)

    def initial_state(self, K) -> CompositionalMemoryState:
        z = np.zeros((K, self.d_h))
        return CompositionalMemoryState(Tensor._wrap(np.zeros(self.d_h)),
                                        Tensor._wrap(z), Tensor._wrap(z.copy()))

    def step(self, state: CompositionalMemoryState, q_t: Tensor, X: Tensor) -> CompositionalMemoryState:
        return compositional_memory_step(self, state, q_t, X)


def compositional_memory_step(cm: CompositionalMemory, state: CompositionalMemoryState,
                              q_t: Tensor, X: Tensor) -> CompositionalMemoryState:
    """Region-LSTMs and alpha gates read the previous episode; pooling yields the next."""
    if X.data.ndim != 2 or X.data.shape[0] != state.C.data.shape[0]:
        raise DimensionError(
            f"region grid {X.data.shape} does not match state with {state.C.data.shape[0]} regions")
    M, C = region_lstm(cm.region, q_t, state.h, X, state.C)
    alpha = alpha_gates(cm.gate, q_t, state.h, X)
    h = episode_pool(state.h, alpha, M)
    return CompositionalMemoryState(h, C, M, alpha)
