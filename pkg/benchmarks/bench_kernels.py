"""Compare the compiled and numpy kernel backends.

Times each fused cell kernel on its own and a full teacher-forced training
step (forward, backward, SGD update) on toy-sized shapes.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--number 2000]
"""

import argparse
import timeit

import numpy as np

from cmvqa import kernels
from cmvqa import numerics as nx
from cmvqa.model import NetworkConfig, VQANetwork, example_loss
from cmvqa.train import SGD, TrainingExample


def kernel_cases(K, dq, dh, dx, dz, rng):
    H4 = 4 * dh
    Wq, Wh, Wx = rng.normal(size=(H4, dq)), rng.normal(size=(H4, dh)), rng.normal(size=(H4, dx))
    b = rng.normal(size=H4)
    q, h = rng.normal(size=dq), np.tanh(rng.normal(size=dh))
    X, C = rng.normal(size=(K, dx)), rng.normal(size=(K, dh))
    Zq, Zh, Zx = rng.normal(size=(dz, dq)), rng.normal(size=(dz, dh)), rng.normal(size=(dz, dx))
    bz, wa, ba = rng.normal(size=dz), rng.normal(size=dz), np.array([0.1])
    alpha, M = rng.uniform(size=K), np.tanh(rng.normal(size=(K, dh)))
    Lx = rng.normal(size=(H4, dq))

    def cases(mod):
        _, _, G, TC = mod.region_lstm_forward(Wq, Wh, Wx, b, q, h, X, C)
        a, Z = mod.alpha_gate_forward(Zq, Zh, Zx, bz, wa, ba, q, h, X)
        _, _, lG, lTC = mod.lstm_forward(Lx, Wh, b, q, h, h)
        dC, dM = rng.normal(size=(K, dh)), rng.normal(size=(K, dh))
        return {
            "region_lstm_forward": lambda: mod.region_lstm_forward(Wq, Wh, Wx, b, q, h, X, C),
            "region_lstm_backward": lambda: mod.region_lstm_backward(Wq, Wh, Wx, q, h, X, C, G,
                                                                     TC, dC, dM),
            "alpha_gate_forward": lambda: mod.alpha_gate_forward(Zq, Zh, Zx, bz, wa, ba, q, h, X),
            "alpha_gate_backward": lambda: mod.alpha_gate_backward(Zq, Zh, Zx, wa, q, h, X, Z, a,
                                                                   np.ones(K)),
            "episode_pool_forward": lambda: mod.episode_pool_forward(h, alpha, M),
            "episode_pool_backward": lambda: mod.episode_pool_backward(h, alpha, M, h),
            "lstm_forward": lambda: mod.lstm_forward(Lx, Wh, b, q, h, h),
            "lstm_backward": lambda: mod.lstm_backward(Lx, Wh, q, h, h, lG, lTC, h, h),
        }
    return cases


def train_step_case(K, dq, dh, dx, rng):
    cfg = NetworkConfig(question_vocab=30, answer_vocab=12, d_q=dq, d_h=dh, d_x=dx, d_v=dx, K=K)
    net = VQANetwork(cfg).init(rng)
    ex = TrainingExample("bench", [5, 6, 7, 8, 9, 10, 2, 11], [11, 3],
                         rng.normal(size=(K, dx)), rng.normal(size=dx))
    opt = SGD(net, lr=0.0)

    def step():
        with nx.Tape() as tape:
            loss = example_loss(net, ex.inputs, ex.targets, ex.X, ex.v)
        nx.backward(tape, loss)
        opt.step()
    return step


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--number", type=int, default=2000, help="calls per kernel timing")
    ap.add_argument("--K", type=int, default=4)
    ap.add_argument("--d", type=int, default=32, help="hidden size (d_q is half of it)")
    args = ap.parse_args()

    backends = kernels.available()
    print(f"backends: {', '.join(backends)}")
    dh, dq, dx, dz = args.d, args.d // 2, 11, args.d
    cases = kernel_cases(args.K, dq, dh, dx, dz, np.random.default_rng(0))
    results = {}
    for name in backends:
        for label, fn in cases(kernels.get(name)).items():
            t = min(timeit.repeat(fn, number=args.number, repeat=args.repeat)) / args.number
            results.setdefault(label, {})[name] = t
        with kernels.using(name):
            step = train_step_case(args.K, dq, dh, dx, np.random.default_rng(0))
            n = max(1, args.number // 20)
            t = min(timeit.repeat(step, number=n, repeat=args.repeat)) / n
            results.setdefault("train_step (T=8)", {})[name] = t

    header = f"{'kernel':<24}" + "".join(f"{b + ' (us)':>16}" for b in backends)
    if len(backends) == 2:
        header += f"{'speedup':>10}"
    print(header)
    for label, times in results.items():
        row = f"{label:<24}" + "".join(f"{times[b] * 1e6:>16.2f}" for b in backends)
        if len(backends) == 2:
            row += f"{times['python'] / times['cython']:>9.2f}x"
        print(row)


if __name__ == "__main__":
    main()
