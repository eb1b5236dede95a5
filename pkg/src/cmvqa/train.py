"""Teacher-forced training, SGD with momentum and clipping, gradient checks,
and CMCK checkpoints."""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .data import EOA_ID, FeatureRecord, QAExample, Vocabulary, build_vocab
from .errors import ConfigError, FormatError, NumericalError, ProtocolError
from .model import NetworkConfig, VQANetwork, example_loss

log = logging.getLogger(__name__)


# -- examples --------------------------------------------------------------


def build_vocabularies(examples: Sequence[QAExample], min_count: int = 1):
    """Input vocabulary over question+answer streams; answer vocabulary over answers."""
    qv = build_vocab(((ex.question + [w for a in ex.answers for w in a]) for ex in examples),
                     min_count)
    av = build_vocab((w for a in ex.answers for w in a) for ex in examples)
    return qv, av


def teacher_force(example: QAExample, question_vocab: Vocabulary, answer_vocab: Vocabulary,
                  annotator: int = 0):
    """``([q, a], targets, mask)``: targets are the answer words then ``<eoa>``,
    one per masked position, starting at the ``<?>`` token."""
    answer = example.answers[annotator]
    if not answer:
        raise ProtocolError(f"{example.image_id}: empty answer")
    q = question_vocab.encode(example.question)
    inputs = q + question_vocab.encode(answer)
    targets = answer_vocab.encode(answer) + [EOA_ID]
    mask = [t >= len(q) - 1 for t in range(len(inputs))]
    return inputs, targets, mask


@dataclass
class TrainingExample:
    image_id: str
    inputs: list
    targets: list
    X: np.ndarray
    v: np.ndarray


def prepare_examples(examples, features: dict[str, FeatureRecord], question_vocab,
                     answer_vocab) -> list[TrainingExample]:
    out = []
    for ex in examples:
        if ex.image_id not in features:
            raise FormatError(f"no features for image {ex.image_id!r}")
        rec = features[ex.image_id]
        inputs, targets, _ = teacher_force(ex, question_vocab, answer_vocab)
        out.append(TrainingExample(ex.image_id, inputs, targets, rec.regions, rec.context))
    return out


# -- optimizer -------------------------------------------------------------


@dataclass
class TrainConfig:
    lr: float = 0.01
    momentum: float = 0.9
    clip: float = 5.0
    iterations: int = 100_000
    batch_size: int = 1
    seed: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        if not self.lr >= 0 or not self.clip > 0:
            raise ConfigError("need lr >= 0 and clip > 0")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.iterations < 0 or self.batch_size < 1 or self.checkpoint_every < 0:
            raise ConfigError("iterations, batch_size and checkpoint_every must be non-negative")


class SGD:
    """Momentum SGD on whole leaves with global-norm gradient clipping.

    ``params`` is a network (anything with ``leaves()``) or a list of
    leaf tensors.
    """

    def __init__(self, params, lr=0.01, momentum=0.9, clip=5.0):
        self.lr, self.momentum, self.clip = lr, momentum, clip
        if hasattr(params, "leaves"):
            self.leaves = params.leaves()
            self._named = params.parameters()
        else:
            self.leaves = list(params)
            self._named = [nx.Parameter(t.name or f"param{i}", t)
                           for i, t in enumerate(self.leaves)]
        self.velocity = [np.zeros_like(t.data) for t in self.leaves]

    @classmethod
    def from_config(cls, params, cfg: TrainConfig) -> SGD:
        return cls(params, cfg.lr, cfg.momentum, cfg.clip)

    def grad_norm(self) -> float:
        total = 0.0
        for t in self.leaves:
            total += float(np.dot(t.grad.ravel(), t.grad.ravel()))
        return math.sqrt(total)

    def _nonfinite_name(self):
        for p in self._named:
            if not np.isfinite(p.grad).all():
                return p.name
        return "?"

    def step(self) -> float:
        """Clip, update, zero the gradients; returns the pre-clip norm."""
        norm = self.grad_norm()
        if not math.isfinite(norm):
            raise NumericalError(f"non-finite gradient in {self._nonfinite_name()}")
        if norm > self.clip:
            s = self.clip / norm
            for t in self.leaves:
                t.grad *= s
        for t, v in zip(self.leaves, self.velocity):
            v *= self.momentum
            v += t.grad
            t.data -= self.lr * v
            t.grad.fill(0.0)
        return norm


# -- training loop ---------------------------------------------------------


@dataclass
class TrainResult:
    losses: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)
    iteration: int = 0


def run_training(net: VQANetwork, data: Sequence[TrainingExample], cfg: TrainConfig,
                 log_path=None, checkpoint_dir=None, progress=None) -> TrainResult:
    """Teacher-forced SGD over ``data``, reshuffled every epoch from ``cfg.seed``.

    Writes ``iteration TAB loss`` lines to ``log_path`` and, every
    ``checkpoint_every`` iterations and at the end, a checkpoint into
    ``checkpoint_dir``.
    """
    if not data:
        raise ProtocolError("training set is empty")
    rng = np.random.default_rng(cfg.seed)
    opt = SGD.from_config(net, cfg)
    net.zero_grad()
    result = TrainResult()
    logf = open(log_path, "w", encoding="utf-8") if log_path else None
    if checkpoint_dir:
        Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
    order, pos = np.arange(0), 0
    try:
        for it in range(1, cfg.iterations + 1):
            batch_loss = 0.0
            for _ in range(cfg.batch_size):
                if pos == len(order):
                    order, pos = rng.permutation(len(data)), 0
                ex = data[order[pos]]
                pos += 1
                with nx.Tape() as tape:
                    loss = example_loss(net, ex.inputs, ex.targets, ex.X, ex.v)
                    if cfg.batch_size > 1:
                        loss = nx.scale(loss, 1.0 / cfg.batch_size)
                value = loss.item()
                if not math.isfinite(value):
                    raise NumericalError(f"non-finite loss at iteration {it}")
                nx.backward(tape, loss)
                batch_loss += value
            opt.step()
            result.losses.append(batch_loss)
            if logf:
                logf.write(f"{it}\t{batch_loss!r}\n")
            if progress is not None:
                progress(it, batch_loss)
            if checkpoint_dir and cfg.checkpoint_every and it % cfg.checkpoint_every == 0:
                path = Path(checkpoint_dir) / f"iter_{it:07d}.cmck"
                save_checkpoint(path, net, it, rng.bit_generator.state)
                result.checkpoints.append(path)
        result.iteration = cfg.iterations
        if checkpoint_dir:
            path = Path(checkpoint_dir) / "final.cmck"
            save_checkpoint(path, net, cfg.iterations, rng.bit_generator.state)
            result.checkpoints.append(path)
    finally:
        if logf:
            logf.close()
    return result


# -- gradient check --------------------------------------------------------


MIN_SUBSAMPLE = 500


@dataclass
class GradCheckResult:
    max_error: float
    worst: str
    per_parameter: dict
    entries: int

    def passed(self, tol=1e-4):
        return self.max_error < tol


def grad_check(net: VQANetwork, example: TrainingExample, eps: float = 1e-5,
               max_entries: int | None = None, seed: int = 0) -> GradCheckResult:
    """Analytic gradients vs central differences of the masked loss.

    Error per entry is ``|analytic - fd| / max(1, |fd|)``. With
    ``max_entries`` set, a seeded subsample of at least ``MIN_SUBSAMPLE``
    entries is drawn that still touches every named tensor.
    """
    def loss_value():
        return example_loss(net, example.inputs, example.targets, example.X, example.v).item()

    net.zero_grad()
    with nx.Tape() as tape:
        loss = example_loss(net, example.inputs, example.targets, example.X, example.v)
    nx.backward(tape, loss)
    params = net.parameters()
    analytic = {p.name: p.grad.copy() for p in params}

    total = sum(p.size for p in params)
    if max_entries is not None:
        max_entries = max(max_entries, MIN_SUBSAMPLE)
    rng = np.random.default_rng(seed)
    per, worst, worst_err, n = {}, "", -1.0, 0
    for p in params:
        flat = np.arange(p.size)
        if max_entries is not None and total > max_entries:
            k = max(1, math.ceil(max_entries * p.size / total))
            flat = np.sort(rng.choice(p.size, size=min(k, p.size), replace=False))
        value = p.value
        err_max = 0.0
        for f in flat:
            idx = np.unravel_index(f, p.shape)
            orig = value[idx]
            value[idx] = orig + eps
            lp = loss_value()
            value[idx] = orig - eps
            lm = loss_value()
            value[idx] = orig
            fd = (lp - lm) / (2 * eps)
            err = abs(analytic[p.name][idx] - fd) / max(1.0, abs(fd))
            err_max = max(err_max, err)
            n += 1
        per[p.name] = err_max
        if err_max > worst_err:
            worst, worst_err = p.name, err_max
    net.zero_grad()
    return GradCheckResult(worst_err, worst, per, n)


# -- checkpoints -----------------------------------------------------------

CKPT_MAGIC = b"CMCK"
CKPT_VERSION = 1


def _json_bytes(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _config_block(net: VQANetwork) -> dict:
    block = {"config": net.cfg.to_dict()}
    if net.question_vocab is not None:
        block["question_vocab"] = net.question_vocab.tokens
    if net.answer_vocab is not None:
        block["answer_vocab"] = net.answer_vocab.tokens
    return block


def save_checkpoint(path, net: VQANetwork, iteration: int = 0, rng_state=None) -> None:
    chunks = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION)]
    cfg = _json_bytes(_config_block(net))
    chunks += [struct.pack("<I", len(cfg)), cfg, struct.pack("<Q", iteration)]
    rng = _json_bytes(rng_state or {})
    chunks += [struct.pack("<I", len(rng)), rng]
    for p in net.parameters():
        name = p.name.encode("utf-8")
        value = np.ascontiguousarray(p.value, dtype="<f8")
        chunks.append(struct.pack("<I", len(name)))
        chunks.append(name)
        chunks.append(struct.pack(f"<I{value.ndim}I", value.ndim, *value.shape))
        chunks.append(value.tobytes())
    Path(path).write_bytes(b"".join(chunks))


@dataclass
class Checkpoint:
    config: NetworkConfig
    iteration: int
    rng_state: dict
    params: dict
    question_vocab: Vocabulary | None = None
    answer_vocab: Vocabulary | None = None

    def build(self) -> VQANetwork:
        net = VQANetwork(self.config, self.question_vocab, self.answer_vocab)
        self.load_into(net)
        return net

    def load_into(self, net: VQANetwork) -> VQANetwork:
        if net.cfg != self.config:
            raise ConfigError(f"config conflict: checkpoint has {self.config}, network has {net.cfg}")
        named = net.named_parameters()
        missing = set(named) - set(self.params)
        extra = set(self.params) - set(named)
        if missing or extra:
            raise FormatError(f"parameter set mismatch: missing {sorted(missing)}, "
                              f"unexpected {sorted(extra)}")
        for name, arr in self.params.items():
            if arr.shape != named[name].shape:
                raise FormatError(f"{name}: shape {arr.shape} != {named[name].shape}")
            named[name].assign(arr)
        return net


def read_checkpoint(path) -> Checkpoint:
    buf = Path(path).read_bytes()
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError(f"truncated {what}", offset=pos)
        out = buf[pos:pos + n]
        pos += n
        return out

    if take(4, "magic") != CKPT_MAGIC:
        raise FormatError("bad magic, expected 'CMCK'", offset=0)
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=4)
    (n,) = struct.unpack("<I", take(4, "config length"))
    try:
        block = json.loads(take(n, "config").decode("utf-8"))
        cfg = NetworkConfig.from_dict(block["config"])
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"unreadable network config: {exc}", offset=pos) from None
    (iteration,) = struct.unpack("<Q", take(8, "iteration"))
    (n,) = struct.unpack("<I", take(4, "rng length"))
    try:
        rng_state = json.loads(take(n, "rng state").decode("utf-8"))
    except ValueError:
        raise FormatError("unreadable rng state", offset=pos) from None
    params = {}
    while pos < len(buf):
        (n,) = struct.unpack("<I", take(4, "name length"))
        try:
            name = take(n, "name").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("parameter name is not UTF-8", offset=pos) from None
        if name in params:
            raise FormatError(f"duplicate parameter {name!r}", offset=pos)
        (rank,) = struct.unpack("<I", take(4, "rank"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, "dims"))
        count = int(np.prod(dims)) if rank else 1
        values = np.frombuffer(take(8 * count, f"values of {name}"), dtype="<f8")
        params[name] = values.astype(np.float64).reshape(dims)
    qv = Vocabulary.from_tokens(block["question_vocab"]) if "question_vocab" in block else None
    av = Vocabulary.from_tokens(block["answer_vocab"]) if "answer_vocab" in block else None
    return Checkpoint(cfg, iteration, rng_state, params, qv, av)


def load_checkpoint(path, net: VQANetwork | None = None) -> VQANetwork:
    ckpt = read_checkpoint(path)
    return ckpt.build() if net is None else ckpt.load_into(net)
