import json
import struct

import numpy as np
import pytest

from cmvqa import _kernels_py, kernels
from cmvqa import numerics as nx
from cmvqa.data import (EOA_ID, QMARK, QAExample, ToyTaskConfig, Vocabulary,
                        generate_toy_dataset, parse_manifest_lines)
from cmvqa.errors import ConfigError, FormatError, NumericalError, ProtocolError
from cmvqa.model import NetworkConfig, VQANetwork, example_loss, forward
from cmvqa.train import (SGD, TrainConfig, build_vocabularies, grad_check, load_checkpoint,
                         prepare_examples, read_checkpoint, run_training, save_checkpoint,
                         teacher_force)
from conftest import small_config, small_example, small_network

# -- teacher forcing -------------------------------------------------------


def test_teacher_force_example():
    qv = Vocabulary(["what", "is", "this", "chair", "red"])
    av = Vocabulary(["chair", "red"])
    ex = QAExample("img", ["what", "is", "this", QMARK], [["chair"]])
    inputs, targets, mask = teacher_force(ex, qv, av)
    assert inputs == [qv.lookup(w) for w in ("what", "is", "this", QMARK, "chair")]
    assert targets == [av.lookup("chair"), EOA_ID]
    assert mask == [False, False, False, True, True]
    ex2 = QAExample("img", ["what", "is", "this", QMARK], [["red", "chair"]])
    inputs, targets, mask = teacher_force(ex2, qv, av)
    assert sum(mask) == len(targets) == 3


def test_teacher_force_rejects_empty_answer():
    qv = av = Vocabulary(["a"])
    ex = QAExample("img", ["a", QMARK], [["a"]])
    ex.answers = [[]]
    with pytest.raises(ProtocolError):
        teacher_force(ex, qv, av)


def test_mask_count_matches_targets_in_trace():
    net = small_network()
    ex = small_example(net.cfg)
    trace = forward(net, ex.inputs, ex.X, ex.v)
    assert sum(trace.mask) == len(ex.targets)


# -- optimizer -------------------------------------------------------------


def _scalar(w, g, name="w"):
    t = nx.Tensor(np.array([w], dtype=float), requires_grad=True, name=name)
    t.grad[...] = g
    return t


def test_sgd_plain_step():
    t = _scalar(1.0, 2.0)
    SGD([t], lr=0.1, momentum=0.0, clip=5.0).step()
    assert t.data[0] == pytest.approx(0.8, abs=1e-15)
    assert t.grad[0] == 0.0


def test_sgd_momentum_accumulates():
    t = _scalar(0.0, 1.0)
    opt = SGD([t], lr=1.0, momentum=0.5, clip=100.0)
    opt.step()
    t.grad[...] = 1.0
    opt.step()
    assert t.data[0] == pytest.approx(-(1 + 1.5), abs=1e-15)


def test_sgd_clips_to_global_norm():
    a, b = _scalar(0.0, 30.0, "a"), _scalar(0.0, 40.0, "b")
    opt = SGD([a, b], lr=1.0, momentum=0.0, clip=5.0)
    assert opt.step() == pytest.approx(50.0)
    assert a.data[0] == pytest.approx(-3.0, abs=1e-12)
    assert b.data[0] == pytest.approx(-4.0, abs=1e-12)


def test_sgd_zero_gradient_is_fixed_point():
    t = _scalar(0.7, 0.0)
    opt = SGD([t], lr=0.5, momentum=0.9, clip=5.0)
    for _ in range(3):
        opt.step()
    assert t.data[0] == 0.7


def test_post_clip_norm_bound():
    rng = np.random.default_rng(0)
    for scale in (0.1, 1.0, 10.0, 1e6):
        ts = [nx.Tensor(np.zeros(5), requires_grad=True) for _ in range(3)]
        for t in ts:
            t.grad[...] = scale * rng.normal(size=5)
        opt = SGD(ts, lr=1.0, momentum=0.0, clip=5.0)
        opt.step()
        # with lr=1, momentum=0 and zero start, the step equals the applied gradient
        applied = np.sqrt(sum(float(t.data @ t.data) for t in ts))
        assert applied <= 5.0 + 1e-9


def test_sgd_nonfinite_gradient_names_parameter():
    net = small_network()
    net.named_parameters()["cm.alpha_gate.W_alpha"].grad[0] = np.nan
    with pytest.raises(NumericalError, match="cm.alpha_gate.W_alpha"):
        SGD(net).step()


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(lr=-1.0)
    with pytest.raises(ConfigError):
        TrainConfig(clip=0.0)
    with pytest.raises(ConfigError):
        TrainConfig(momentum=1.0)


# -- training loop ---------------------------------------------------------


def _toy(n_train=200, n_test=50, **net_kw):
    ds = generate_toy_dataset(ToyTaskConfig(n_train=n_train, n_test=n_test))
    train = parse_manifest_lines(ds.manifest_text("train").splitlines())
    feats = {r.image_id: r for r in ds.records}
    qv, av = build_vocabularies(train)
    K, dx = ds.records[0].regions.shape
    cfg = NetworkConfig(question_vocab=len(qv), answer_vocab=len(av), d_q=8, d_h=16,
                        d_x=dx, d_v=ds.records[0].context.size, K=K, **net_kw)
    return cfg, qv, av, prepare_examples(train, feats, qv, av)


def _fresh(cfg, qv, av, seed=0):
    return VQANetwork(cfg, qv, av).init(np.random.default_rng(seed))


def test_zero_learning_rate_leaves_parameters_bit_identical():
    cfg, qv, av, data = _toy()
    net = _fresh(cfg, qv, av)
    before = [p.value.tobytes() for p in net.parameters()]
    run_training(net, data, TrainConfig(lr=0.0, iterations=20))
    after = [p.value.tobytes() for p in net.parameters()]
    assert before == after


def test_training_is_deterministic(tmp_path):
    cfg, qv, av, data = _toy()
    tc = TrainConfig(iterations=30, checkpoint_every=10, seed=3)
    runs = []
    for name in ("a", "b"):
        out = tmp_path / name
        out.mkdir()
        res = run_training(_fresh(cfg, qv, av), data, tc, log_path=out / "loss.log",
                           checkpoint_dir=out / "ck")
        runs.append((res, out))
    (ra, a), (rb, b) = runs
    assert ra.losses == rb.losses
    assert (a / "loss.log").read_bytes() == (b / "loss.log").read_bytes()
    assert [p.name for p in ra.checkpoints] == ["iter_0000010.cmck", "iter_0000020.cmck",
                                                "iter_0000030.cmck", "final.cmck"]
    for pa, pb in zip(ra.checkpoints, rb.checkpoints):
        assert pa.read_bytes() == pb.read_bytes()


def test_log_lines_are_iteration_tab_loss(tmp_path):
    cfg, qv, av, data = _toy()
    res = run_training(_fresh(cfg, qv, av), data, TrainConfig(iterations=5),
                       log_path=tmp_path / "loss.log")
    lines = (tmp_path / "loss.log").read_text().splitlines()
    assert [int(line.split("\t")[0]) for line in lines] == [1, 2, 3, 4, 5]
    assert [float(line.split("\t")[1]) for line in lines] == res.losses


def test_short_training_reduces_loss():
    cfg, qv, av, data = _toy()
    res = run_training(_fresh(cfg, qv, av), data, TrainConfig(iterations=500))
    assert np.mean(res.losses[-50:]) < np.mean(res.losses[:50])


def test_minibatch_loss_is_averaged():
    cfg, qv, av, data = _toy()
    single = run_training(_fresh(cfg, qv, av), data[:1], TrainConfig(iterations=1, lr=0.0))
    double = run_training(_fresh(cfg, qv, av), data[:1],
                          TrainConfig(iterations=1, lr=0.0, batch_size=2))
    assert double.losses[0] == pytest.approx(single.losses[0], rel=1e-12)


def test_nonfinite_loss_aborts_with_iteration(monkeypatch):
    cfg, qv, av, data = _toy()
    net = _fresh(cfg, qv, av)
    calls = {"n": 0}
    real = example_loss

    def poisoned(*args, **kw):
        calls["n"] += 1
        out = real(*args, **kw)
        return nx.scale(out, np.inf) if calls["n"] == 4 else out

    monkeypatch.setattr("cmvqa.train.example_loss", poisoned)
    with pytest.raises(NumericalError, match="iteration 4"):
        run_training(net, data, TrainConfig(iterations=10))


def test_empty_training_set_rejected():
    with pytest.raises(ProtocolError):
        run_training(small_network(), [], TrainConfig(iterations=1))


# -- gradient check --------------------------------------------------------


def test_gradient_check_passes(backend):
    net = small_network(seed=2)
    res = grad_check(net, small_example(net.cfg))
    assert res.passed(1e-4), (res.worst, res.max_error)
    assert res.entries == net.num_parameters()


def test_gradient_check_detects_broken_derivative(monkeypatch):
    monkeypatch.setattr(_kernels_py, "dtanh", lambda t: 0.5 * (1.0 - t * t))
    with kernels.using("python"):
        net = small_network(seed=2)
        res = grad_check(net, small_example(net.cfg))
    assert res.max_error > 1e-2


def test_gradient_check_subsample_touches_every_tensor():
    net = small_network(seed=2)
    res = grad_check(net, small_example(net.cfg), max_entries=10)
    assert set(res.per_parameter) == set(net.named_parameters())
    assert res.entries < net.num_parameters()


# -- checkpoints -----------------------------------------------------------


def _vocab_net(seed=0):
    qv = Vocabulary(["what", "is", "it", "red", "blue", "cube", "ball", "x"])
    av = Vocabulary(["red", "blue", "cube", "ball", "x", "y", "z", "w"])
    return VQANetwork(small_config(), qv, av).init(np.random.default_rng(seed))


def test_checkpoint_roundtrip_is_bit_exact(tmp_path):
    net = _vocab_net()
    path = tmp_path / "m.cmck"
    save_checkpoint(path, net, iteration=17, rng_state={"seed": 1})
    back = load_checkpoint(path)
    assert back.cfg == net.cfg
    assert back.question_vocab == net.question_vocab and back.answer_vocab == net.answer_vocab
    for name, p in net.named_parameters().items():
        assert back.named_parameters()[name].value.tobytes() == p.value.tobytes()
    ex = small_example(net.cfg)
    a = forward(net, ex.inputs, ex.X, ex.v).main_logits.data
    b = forward(back, ex.inputs, ex.X, ex.v).main_logits.data
    assert a.tobytes() == b.tobytes()
    ck = read_checkpoint(path)
    assert ck.iteration == 17 and ck.rng_state == {"seed": 1}
    save_checkpoint(tmp_path / "again.cmck", back, 17, {"seed": 1})
    assert (tmp_path / "again.cmck").read_bytes() == path.read_bytes()


def test_checkpoint_size_formula(tmp_path):
    net = _vocab_net()
    path = tmp_path / "m.cmck"
    save_checkpoint(path, net)
    block = json.dumps({"config": net.cfg.to_dict(), "question_vocab": net.question_vocab.tokens,
                        "answer_vocab": net.answer_vocab.tokens},
                       sort_keys=True, separators=(",", ":")).encode()
    size = 4 + 4 + 4 + len(block) + 8 + 4 + len(b"{}")
    for p in net.parameters():
        size += 4 + len(p.name.encode()) + 4 + 4 * len(p.shape) + 8 * p.size
    assert path.stat().st_size == size


def test_checkpoint_config_conflict(tmp_path):
    save_checkpoint(tmp_path / "m.cmck", small_network())
    other = VQANetwork(small_config(d_h=6))
    with pytest.raises(ConfigError, match="config conflict"):
        load_checkpoint(tmp_path / "m.cmck", other)


def test_checkpoint_header_errors(tmp_path):
    save_checkpoint(tmp_path / "m.cmck", small_network())
    raw = (tmp_path / "m.cmck").read_bytes()
    (tmp_path / "bad.cmck").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(FormatError, match="magic"):
        read_checkpoint(tmp_path / "bad.cmck")
    (tmp_path / "bad.cmck").write_bytes(raw[:4] + struct.pack("<I", 2) + raw[8:])
    with pytest.raises(FormatError, match="version"):
        read_checkpoint(tmp_path / "bad.cmck")


def test_checkpoint_truncations_are_errors(tmp_path):
    net = VQANetwork(small_config(d_q=2, d_h=2, d_x=2, d_v=2, K=2, question_vocab=5,
                                  answer_vocab=5))
    save_checkpoint(tmp_path / "m.cmck", net)
    raw = (tmp_path / "m.cmck").read_bytes()
    for cut in range(0, len(raw), 3):
        (tmp_path / "t.cmck").write_bytes(raw[:cut])
        with pytest.raises(FormatError):
            load_checkpoint(tmp_path / "t.cmck")
