"""Acceptance suite. Each test prints one ``ACCEPTANCE <n> PASS|FAIL`` line.

Run alone with ``pytest tests/test_acceptance.py -s`` or
``python3 tests/test_acceptance.py``.
"""

import io
import math
import sys
import time
import zlib

import numpy as np
import pytest

from cmvqa import kernels
from cmvqa.cells import CompositionalMemory
from cmvqa.cli import main as cli_main
from cmvqa.data import EOA_ID, PAD_ID, QMARK_ID, UNK_ID, ToyTaskConfig, read_features
from cmvqa.evaluation import Taxonomy, wup_similarity, wups_item, wups_score
from cmvqa.model import (VQANetwork, example_loss, forward, greedy_decode, masked_loss,
                         predict_answer)
from cmvqa.numerics import Tensor
from cmvqa.train import load_checkpoint, read_checkpoint, save_checkpoint
from conftest import small_config, small_network
from test_cells import ORACLE_CHECKS, _rollout, vec

RESERVED = {PAD_ID, UNK_ID, QMARK_ID, EOA_ID}

# toy recipe shared by criteria 5 and 6; every variant uses the same settings
TOY_RECIPE = """\
net.d_q = 16
net.d_h = 32
net.max_answer_len = 3
net.q_source = embedding
train.lr = 0.03
train.batch_size = 2
train.momentum = 0.9
train.clip = 5.0
train.iterations = 20000
train.seed = 0
"""
TOY_BUDGET_S = 15 * 60
ABLATION_SEEDS = (0, 1, 2)


def verdict(capsys, n, ok, detail):
    with capsys.disabled():
        print(f"\nACCEPTANCE {n} {'PASS' if ok else 'FAIL'}: {detail}")
    assert ok, detail


def cli(*argv):
    out, err = io.StringIO(), io.StringIO()
    code = cli_main([str(a) for a in argv], out, err)
    return code, out.getvalue(), err.getvalue()


def kv(text):
    return dict(line.split("\t", 1) for line in text.splitlines() if "\t" in line)


# 1 -----------------------------------------------------------------------


def test_1_gradient_gate(capsys):
    t0 = time.perf_counter()
    code, out, err = cli("-v", "gradcheck", "--length", 6, "--eps", 1e-5)
    elapsed = time.perf_counter() - t0
    rows = kv(out)
    per = {k: float(v) for k, v in rows.items()
           if k not in ("max_relative_error", "worst_parameter", "entries_checked")}
    n_named = len(small_network().named_parameters())
    worst = max(per.values())
    ok = code == 0 and len(per) == n_named and worst < 1e-4 and elapsed < 60
    verdict(capsys, 1, ok, f"max relative error {worst:.2e} over {len(per)} named tensors "
                           f"({rows.get('entries_checked')} entries), {elapsed:.1f} s")


# 2 -----------------------------------------------------------------------


def test_2_cell_oracle_equivalence(capsys):
    worst = {}
    for backend in kernels.available():
        with kernels.using(backend):
            for cell, check in ORACLE_CHECKS.items():
                rng = np.random.default_rng(zlib.crc32(b"acceptance-" + cell.encode()))
                err = max(check(rng) for _ in range(1000))
                worst[backend, cell] = err
    top = max(worst.values())
    verdict(capsys, 2, top <= 1e-12,
            f"1000 fuzzed instances per cell on {'+'.join(kernels.available())}, "
            f"worst deviation {top:.1e}")


# 3 -----------------------------------------------------------------------


def test_3_episode_pool_algebra(capsys):
    rng = np.random.default_rng(3)
    conv = 0.0
    for _ in range(2000):
        K = int(rng.integers(1, 64))
        alpha = 1.0 / (1.0 + np.exp(-rng.normal(scale=6, size=K)))
        beta = 1.0 - alpha.sum() / K
        conv = max(conv, abs(beta + alpha.sum() / K - 1.0))

    bounded = True
    for seed in range(10):
        r = np.random.default_rng(seed)
        cm = CompositionalMemory(3, 5, 4)
        for t in cm.leaves():
            t.data[...] = r.normal(scale=2, size=t.data.shape)
        for state in _rollout(cm, r.normal(scale=2, size=(6, 4)), 100, r, 3):
            bounded &= bool((np.abs(state.h.data) < 1).all())

    perm_err = 0.0
    for seed in range(10):
        r = np.random.default_rng(1000 + seed)
        K = 6
        cm = CompositionalMemory(3, 4, 4)
        cm.init(r)
        X = r.normal(size=(K, 4))
        perm = r.permutation(K)
        s1, s2 = cm.initial_state(K), cm.initial_state(K)
        for _ in range(10):
            q = vec(r.normal(size=3))
            s1, s2 = cm.step(s1, q, Tensor(X)), cm.step(s2, q, Tensor(X[perm]))
            perm_err = max(perm_err, np.abs(s1.h.data - s2.h.data).max())

    ok = conv <= 1e-12 and bounded and perm_err <= 1e-12
    verdict(capsys, 3, ok, f"|beta + mean(alpha) - 1| <= {conv:.1e}; episodes in (-1,1) over "
                           f"10 x 100 steps: {bounded}; permutation deviation {perm_err:.1e}")


# 4 -----------------------------------------------------------------------


def test_4_determinism(capsys, tmp_path):
    data = tmp_path / "toy"
    assert cli("gen-toy", "--out", data, "--n-train", 200, "--n-test", 40)[0] == 0
    outs = []
    for name in ("a", "b"):
        code, _, err = cli("train", "--manifest", data / "train.tsv",
                           "--features", data / "features.cmvf", "--iterations", 300,
                           "--set", "train.checkpoint_every=100", "--seed", 5,
                           "--out", tmp_path / name)
        assert code == 0, err
        outs.append(tmp_path / name)
    a, b = outs
    files = ["model.cmck", "loss.log", "checkpoints/iter_0000100.cmck",
             "checkpoints/iter_0000300.cmck", "checkpoints/final.cmck"]
    identical = all((a / f).read_bytes() == (b / f).read_bytes() for f in files)

    net = load_checkpoint(a / "model.cmck")
    save_checkpoint(tmp_path / "copy.cmck", net, read_checkpoint(a / "model.cmck").iteration)
    roundtrip = (tmp_path / "copy.cmck").read_bytes() == (a / "model.cmck").read_bytes()
    again = load_checkpoint(tmp_path / "copy.cmck")
    params_equal = all(p.value.tobytes() == again.named_parameters()[n].value.tobytes()
                       for n, p in net.named_parameters().items())
    ok = identical and roundtrip and params_equal
    verdict(capsys, 4, ok, f"two seeded runs byte-identical ({len(files)} files): {identical}; "
                           f"checkpoint round-trip bit-exact: {roundtrip and params_equal}")


# 5, 6 --------------------------------------------------------------------


@pytest.fixture(scope="module")
def toy_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy_accept")
    code, _, err = cli("gen-toy", "--seed", 42, "--out", root / "data")
    assert code == 0, err
    recipe = root / "toy.cfg"
    recipe.write_text(TOY_RECIPE)
    cache = {}

    def run(variant, seed=0):
        if (variant, seed) not in cache:
            out_dir = root / f"{variant}-seed{seed}"
            t0 = time.perf_counter()
            code, out, err = cli("train", "--config", recipe, "--variant", variant,
                                 "--seed", seed,
                                 "--manifest", root / "data" / "train.tsv",
                                 "--test-manifest", root / "data" / "test.tsv",
                                 "--features", root / "data" / "features.cmvf",
                                 "--out", out_dir)
            assert code == 0, err
            cache[variant, seed] = (float(kv(out)["validation_accuracy"]),
                                    time.perf_counter() - t0, out_dir)
        return cache[variant, seed]
    return run


def _planted_color_hits(model_dir, data_dir, n_images=20):
    """Ask the trained model for the color at cell 2 of test images via ``infer``."""
    cfg = ToyTaskConfig()
    ns = len(cfg.shapes)
    records = [r for r in read_features(data_dir / "features.cmvf")
               if r.image_id.startswith("test")][:n_images]
    hits = 0
    for rec in records:
        code, out, err = cli("infer", "--checkpoint", model_dir / "model.cmck",
                             "--features", data_dir / "features.cmvf", "--image-id", rec.image_id,
                             "--question", "what color is the object at cell 2?")
        assert code == 0, err
        planted = cfg.colors[int(np.argmax(rec.regions[1, ns:ns + len(cfg.colors)]))]
        hits += out.split() == [planted]
    return hits, len(records)


@pytest.mark.slow
def test_5_toy_task_learning(capsys, toy_runs):
    acc, seconds, out = toy_runs("full")
    iterations = len((out / "loss.log").read_text().splitlines())
    hits, asked = _planted_color_hits(out, out.parent / "data")
    ok = acc >= 0.95 and iterations <= 20000 and seconds <= TOY_BUDGET_S
    verdict(capsys, 5, ok, f"full model {100 * acc:.1f}% exact match on 500 test questions "
                           f"after {iterations} iterations in {seconds:.0f} s; "
                           f"infer names the planted cell-2 color on {hits}/{asked} test images")


@pytest.mark.slow
def test_6_ablation_ordering(capsys, toy_runs):
    # final accuracy of a variant = mean over a fixed set of training seeds
    order = ["full", "language-episodes", "episodes-only", "baseline"]
    runs = {v: [toy_runs(v, s)[0] for s in ABLATION_SEEDS] for v in order}
    acc = {v: float(np.mean(a)) for v, a in runs.items()}
    chain = all(acc[a] >= acc[b] for a, b in zip(order, order[1:]))
    gap = acc["full"] - acc["baseline"]
    ok = chain and gap >= 0.10
    table = ", ".join(f"{v} {100 * acc[v]:.1f}% ({'/'.join(f'{100 * x:.1f}' for x in runs[v])})"
                      for v in order)
    verdict(capsys, 6, ok, f"mean over seeds {list(ABLATION_SEEDS)}: {table}; "
                           f"full - baseline = {100 * gap:.1f} points")


# 7 -----------------------------------------------------------------------


def test_7_metric_goldens(capsys):
    tax = Taxonomy.from_lines(["furniture\troot", "chair\tfurniture", "table\tfurniture",
                               "color\troot", "red\tcolor", "blue\tcolor"])
    goldens = [
        wups_score([["chair"]], [["chair"]], 0.9, tax) == 1.0,
        abs(wup_similarity("chair", "table", tax) - 2 / 3) <= 1e-15,
        abs(wups_score([["chair"]], [["table"]], 0.9, tax) - 0.0667) <= 1e-4,
    ]
    rng = np.random.default_rng(7)
    terms = ["root", "furniture", "color", "chair", "table", "red", "blue", "sofa"]
    monotone = True
    for _ in range(10_000):
        pred = list(rng.choice(terms, size=rng.integers(0, 4)))
        truth = list(rng.choice(terms, size=rng.integers(0, 4)))
        lo, hi = sorted(rng.uniform(0, 1, size=2))
        monotone &= wups_item(pred, truth, hi, tax) <= wups_item(pred, truth, lo, tax)

    loss_err = 0.0
    for lam in ((0.0, 0.0), (0.3, 0.3), (0.5, 1.5)):
        net = VQANetwork(small_config(lambda_lang=lam[0], lambda_epi=lam[1]))
        rng2 = np.random.default_rng(1)
        tokens, targets = [4, 5, 6, QMARK_ID, 7, 8], [7, 8, EOA_ID]
        X, v = rng2.normal(size=(4, 8)), rng2.normal(size=8)
        loss = example_loss(net, tokens, targets, X, v).item()
        expected = len(targets) * (1 + lam[0] + lam[1]) * math.log(12)
        loss_err = max(loss_err, abs(loss - expected))
        trace = forward(net, tokens, X, v)
        loss_err = max(loss_err, abs(masked_loss(trace, targets, cfg=net.cfg).item() - expected))
    ok = all(goldens) and monotone and loss_err <= 1e-9
    verdict(capsys, 7, ok, f"WUPS goldens {sum(goldens)}/{len(goldens)}; monotone on 10000 "
                           f"fuzzed cases: {monotone}; uniform-logit loss error {loss_err:.1e}")


# 8 -----------------------------------------------------------------------


def test_8_decoding_protocol(capsys):
    rng = np.random.default_rng(8)
    terminated, clean = True, True
    for seed in range(200):
        L = int(rng.integers(1, 6))
        net = small_network(seed=seed, max_answer_len=L)
        for W, b in net.heads.values():
            W.data *= rng.uniform(0.5, 20)
            b.data[:] = rng.normal(scale=5, size=b.data.shape)
        q = [int(t) for t in rng.integers(4, 12, size=rng.integers(0, 5))] + [QMARK_ID]
        ans = predict_answer(net, q, rng.normal(size=(4, 8)), rng.normal(size=8))
        terminated &= len(ans) <= L
        clean &= not set(ans) & RESERVED

    net = small_network(seed=1)
    for W, b in net.heads.values():
        W.data[...] = 0.0
        b.data[...] = 0.0
    net.heads["main"][1].data[EOA_ID] = 10.0
    answer, steps = greedy_decode(net, [4, 5, QMARK_ID], np.zeros((4, 8)), np.zeros(8))
    rigged = answer == [] and len(steps) == 1
    ok = terminated and clean and rigged
    verdict(capsys, 8, ok, f"200 random heads: bounded length {terminated}, no reserved tokens "
                           f"{clean}; rigged <eoa> head gives empty answer in one step: {rigged}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-s", "-p", "no:cacheprovider"]))
