"""The unrolled VQA network: embedding, language LSTM, compositional memory,
answer LSTM and three vocabulary heads, plus masked loss and greedy decoding.

At each step ``t`` the answer LSTM reads a concatenation drawn from
``answer_inputs``: the word embedding, the language state ``l_t``, the
episode ``h_t`` and the projected image context. Presets in
:data:`VARIANTS` select the ablation rows (baseline through full model).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .cells import CompositionalMemory, LSTMParams, lstm_step
from .data import EOA_ID, PAD_ID, QMARK_ID, UNK_ID, Vocabulary
from .errors import ConfigError, DimensionError, ProtocolError, VocabularyError
from .numerics import Parameter, Tensor

ANSWER_INPUTS = ("embedding", "language", "episodes", "context")

VARIANTS = {
    "baseline": ("embedding", "context"),
    "language-only": ("language",),
    "episodes-only": ("episodes",),
    "language-episodes": ("language", "episodes"),
    "full": ("language", "episodes", "context"),
}


@dataclass(frozen=True)
class NetworkConfig:
    question_vocab: int
    answer_vocab: int
    d_q: int = 200
    d_h: int = 200
    d_x: int = 1024
    d_v: int = 1024
    K: int = 49
    d_z: int | None = None
    max_answer_len: int = 10
    lambda_lang: float = 0.3
    lambda_epi: float = 0.3
    q_source: str = "language"
    answer_inputs: tuple = VARIANTS["full"]

    def __post_init__(self):
        object.__setattr__(self, "answer_inputs", tuple(self.answer_inputs))
        dims = dict(question_vocab=self.question_vocab, answer_vocab=self.answer_vocab,
                    d_q=self.d_q, d_h=self.d_h, d_x=self.d_x, d_v=self.d_v, K=self.K,
                    max_answer_len=self.max_answer_len)
        if self.d_z is not None:
            dims["d_z"] = self.d_z
        bad = [k for k, v in dims.items() if int(v) != v or v < 1]
        if bad:
            raise ConfigError(f"must be positive integers: {', '.join(bad)}")
        if self.question_vocab <= EOA_ID or self.answer_vocab <= EOA_ID:
            raise ConfigError("vocabularies must hold at least the reserved tokens")
        if self.lambda_lang < 0 or self.lambda_epi < 0:
            raise ConfigError("auxiliary loss weights must be non-negative")
        if self.q_source not in ("language", "embedding"):
            raise ConfigError(f"q_source must be 'language' or 'embedding', got {self.q_source!r}")
        if not self.answer_inputs or set(self.answer_inputs) - set(ANSWER_INPUTS):
            raise ConfigError(f"answer_inputs must be a non-empty subset of {ANSWER_INPUTS}")

    @classmethod
    def for_variant(cls, variant: str, **kwargs) -> NetworkConfig:
        """Ablation presets; only the full model keeps the auxiliary losses."""
        if variant not in VARIANTS:
            raise ConfigError(f"unknown variant {variant!r}; choose from {list(VARIANTS)}")
        if variant != "full":
            kwargs.setdefault("lambda_lang", 0.0)
            kwargs.setdefault("lambda_epi", 0.0)
        return cls(answer_inputs=VARIANTS[variant], **kwargs)

    @property
    def variant(self) -> str | None:
        for name, inputs in VARIANTS.items():
            if set(inputs) == set(self.answer_inputs):
                return name
        return None

    @property
    def uses_language(self):
        return ("language" in self.answer_inputs or self.lambda_lang > 0
                or (self.uses_memory and self.q_source == "language"))

    @property
    def uses_memory(self):
        return "episodes" in self.answer_inputs or self.lambda_epi > 0

    @property
    def answer_input_dim(self):
        widths = {"embedding": self.d_q, "language": self.d_h,
                  "episodes": self.d_h, "context": self.d_h}
        return sum(widths[k] for k in self.answer_inputs)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["answer_inputs"] = list(self.answer_inputs)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class VQANetwork:
    """All trainable parameters, addressed by unique dotted names."""

    def __init__(self, cfg: NetworkConfig, question_vocab: Vocabulary | None = None,
                 answer_vocab: Vocabulary | None = None):
        self.cfg = cfg
        for vocab, size, what in ((question_vocab, cfg.question_vocab, "question"),
                                  (answer_vocab, cfg.answer_vocab, "answer")):
            if vocab is not None and len(vocab) != size:
                raise ConfigError(f"{what} vocabulary has {len(vocab)} tokens, config says {size}")
        self.question_vocab = question_vocab
        self.answer_vocab = answer_vocab
        H = cfg.d_h
        self.embedding = nx.leaf((cfg.question_vocab, cfg.d_q), "embed.table")
        self.language = LSTMParams(cfg.d_q, H, prefix="language_lstm")
        d_qsrc = H if cfg.q_source == "language" else cfg.d_q
        self.cm = CompositionalMemory(d_qsrc, H, cfg.d_x, cfg.d_z, prefix="cm")
        self.answer = LSTMParams(cfg.answer_input_dim, H, prefix="answer_lstm")
        self.context_W = nx.leaf((H, cfg.d_v), "context.W")
        self.context_b = nx.leaf((H,), "context.b")
        self.heads = {}
        for name in ("main", "language", "episode"):
            self.heads[name] = (nx.leaf((cfg.answer_vocab, H), f"head.{name}.W"),
                                nx.leaf((cfg.answer_vocab,), f"head.{name}.b"))
        self.answer_to_input = self._answer_to_input()
        self._params = self._collect()

    def _answer_to_input(self):
        Va, Vq = self.cfg.answer_vocab, self.cfg.question_vocab
        if self.answer_vocab is not None and self.question_vocab is not None:
            return np.array([self.question_vocab.lookup(t) for t in self.answer_vocab.tokens])
        return np.array([a if a < Vq else UNK_ID for a in range(Va)])

    def _collect(self) -> list[Parameter]:
        params = [Parameter("embed.table", self.embedding)]
        params += self.language.parameters() + self.cm.parameters() + self.answer.parameters()
        params += [Parameter("context.W", self.context_W), Parameter("context.b", self.context_b)]
        for W, b in self.heads.values():
            params += [Parameter(W.name, W), Parameter(b.name, b)]
        names = [p.name for p in params]
        assert len(set(names)) == len(names), "duplicate parameter names"
        return params

    def parameters(self) -> list[Parameter]:
        return list(self._params)

    def named_parameters(self) -> dict[str, Parameter]:
        return {p.name: p for p in self._params}

    def leaves(self) -> list[Tensor]:
        out = [self.embedding] + self.language.leaves() + self.cm.leaves() + self.answer.leaves()
        out += [self.context_W, self.context_b]
        for W, b in self.heads.values():
            out += [W, b]
        return out

    def num_parameters(self) -> int:
        return sum(p.size for p in self._params)

    def zero_grad(self):
        for t in self.leaves():
            t.grad.fill(0.0)

    def init(self, rng) -> VQANetwork:
        """Uniform(+-1/sqrt(fan_in)) weights, forget-gate bias 1, other biases 0."""
        cfg = self.cfg
        s = 1.0 / np.sqrt(cfg.d_q)
        self.embedding.data[...] = rng.uniform(-s, s, size=self.embedding.data.shape)
        self.embedding.data[PAD_ID] = 0.0
        self.language.init(rng)
        self.cm.init(rng)
        self.answer.init(rng)
        s = 1.0 / np.sqrt(cfg.d_v)
        self.context_W.data[...] = rng.uniform(-s, s, size=self.context_W.data.shape)
        self.context_b.data[:] = 0.0
        s = 1.0 / np.sqrt(cfg.d_h)
        for W, b in self.heads.values():
            W.data[...] = rng.uniform(-s, s, size=W.data.shape)
            b.data[:] = 0.0
        return self

    def import_vectors(self, vectors: dict) -> int:
        """Overwrite embedding rows of in-vocabulary words with pretrained
        vectors; returns how many rows were set. Needs a question vocabulary."""
        if self.question_vocab is None:
            raise ProtocolError("vector import needs a question vocabulary")
        n = 0
        for word, vec in vectors.items():
            if word in self.question_vocab:
                vec = np.asarray(vec, dtype=np.float64)
                if vec.shape != (self.cfg.d_q,):
                    raise DimensionError(f"vector for {word!r} has shape {vec.shape}, "
                                         f"embedding width is {self.cfg.d_q}")
                self.embedding.data[self.question_vocab.lookup(word)] = vec
                n += 1
        return n

    def copy(self) -> VQANetwork:
        other = VQANetwork(self.cfg, self.question_vocab, self.answer_vocab)
        for dst, src in zip(other.leaves(), self.leaves()):
            dst.data[...] = src.data
        return other


# -- forward ---------------------------------------------------------------


def embed(net: VQANetwork, token_id: int) -> Tensor:
    """Embedding row. The ``<pad>`` row is zeroed at init and read as a
    constant, so no gradient ever reaches it."""
    V = net.cfg.question_vocab
    if not 0 <= token_id < V:
        raise VocabularyError(f"token id {token_id} outside question vocabulary of size {V}")
    if token_id == PAD_ID:
        return Tensor._wrap(net.embedding.data[PAD_ID].copy())
    return nx.gather(net.embedding, token_id)


@dataclass
class ForwardTrace:
    tokens: list
    mask: list                      # True at the <?> position and after
    language: list = field(default_factory=list)   # l_t
    episodes: list = field(default_factory=list)   # h_t
    answer: list = field(default_factory=list)     # a_t
    alphas: list = field(default_factory=list)     # (K,) per step
    main_logits: Tensor | None = None
    language_logits: Tensor | None = None
    episode_logits: Tensor | None = None

    def __len__(self):
        return len(self.tokens)

    def alpha_map(self) -> np.ndarray:
        return np.stack([a.data for a in self.alphas]) if self.alphas else np.zeros((0, 0))


def _question_mark_index(tokens):
    n = tokens.count(QMARK_ID)
    if n != 1:
        raise ProtocolError(f"token sequence must contain exactly one '<?>', found {n}")
    return tokens.index(QMARK_ID)


def forward(net: VQANetwork, tokens, X, v, aux: bool = True) -> ForwardTrace:
    """Run the unrolled network over ``tokens`` with region grid ``X`` and context ``v``.

    Logits are left unnormalized. Auxiliary heads are evaluated when
    ``aux`` is set and their source path is active.
    """
    cfg = net.cfg
    tokens = [int(t) for t in tokens]
    qpos = _question_mark_index(tokens)
    X = np.asarray(X, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if X.shape != (cfg.K, cfg.d_x):
        raise DimensionError(f"region grid {X.shape} != ({cfg.K}, {cfg.d_x})")
    if v.shape != (cfg.d_v,):
        raise DimensionError(f"context {v.shape} != ({cfg.d_v},)")
    Xt = Tensor._wrap(X)
    trace = ForwardTrace(tokens, [t >= qpos for t in range(len(tokens))])
    inputs = cfg.answer_inputs
    use_lang, use_cm = cfg.uses_language, cfg.uses_memory

    ctx = None
    if "context" in inputs:
        ctx = nx.tanh(nx.linear_map(net.context_W, Tensor._wrap(v), net.context_b))
    H = cfg.d_h
    l, lc = Tensor._wrap(np.zeros(H)), Tensor._wrap(np.zeros(H))
    a, ac = Tensor._wrap(np.zeros(H)), Tensor._wrap(np.zeros(H))
    state = net.cm.initial_state(cfg.K) if use_cm else None

    for tok in tokens:
        e = embed(net, tok)
        if use_lang:
            l, lc = lstm_step(net.language, e, l, lc)
            trace.language.append(l)
        if use_cm:
            state = net.cm.step(state, l if cfg.q_source == "language" else e, Xt)
            trace.episodes.append(state.h)
            trace.alphas.append(state.alpha)
        parts = []
        for name in inputs:
            if name == "embedding":
                parts.append(e)
            elif name == "language":
                parts.append(l)
            elif name == "episodes":
                parts.append(state.h)
            else:
                parts.append(ctx)
        u = parts[0] if len(parts) == 1 else nx.concat(parts)
        a, ac = lstm_step(net.answer, u, a, ac)
        trace.answer.append(a)

    W, b = net.heads["main"]
    trace.main_logits = nx.linear_map(W, nx.stack(trace.answer), b)
    if aux and trace.language:
        W, b = net.heads["language"]
        trace.language_logits = nx.linear_map(W, nx.stack(trace.language), b)
    if aux and trace.episodes:
        W, b = net.heads["episode"]
        trace.episode_logits = nx.linear_map(W, nx.stack(trace.episodes), b)
    return trace


def _aligned_targets(trace: ForwardTrace, targets):
    n_masked = sum(trace.mask)
    targets = [int(t) for t in targets]
    if n_masked == 0 or not targets:
        raise ProtocolError("no answer positions to score")
    if len(targets) != n_masked:
        raise ProtocolError(
            f"{len(targets)} targets for {n_masked} answer positions")
    full = [-1] * len(trace.mask)
    it = iter(targets)
    for t, m in enumerate(trace.mask):
        if m:
            full[t] = next(it)
    return full


def masked_loss(trace: ForwardTrace, targets, lambda_lang: float | None = None,
                lambda_epi: float | None = None, cfg: NetworkConfig | None = None) -> Tensor:
    """Cross-entropy over answer positions, plus weighted auxiliary-head terms.

    ``targets`` lists one answer-vocabulary id per masked position (the
    answer words followed by ``<eoa>``). Weights default to the config's.
    """
    if cfg is not None:
        lambda_lang = cfg.lambda_lang if lambda_lang is None else lambda_lang
        lambda_epi = cfg.lambda_epi if lambda_epi is None else lambda_epi
    lambda_lang = lambda_lang or 0.0
    lambda_epi = lambda_epi or 0.0
    full = _aligned_targets(trace, targets)
    loss = nx.softmax_cross_entropy(trace.main_logits, full, trace.mask)
    for weight, logits, what in ((lambda_lang, trace.language_logits, "language"),
                                 (lambda_epi, trace.episode_logits, "episode")):
        if weight == 0.0:
            continue
        if logits is None:
            raise ProtocolError(f"{what} auxiliary loss requested but that path is inactive")
        loss = nx.add(loss, nx.scale(nx.softmax_cross_entropy(logits, full, trace.mask), weight))
    return loss


def example_loss(net: VQANetwork, tokens, targets, X, v) -> Tensor:
    trace = forward(net, tokens, X, v, aux=net.cfg.lambda_lang > 0 or net.cfg.lambda_epi > 0)
    return masked_loss(trace, targets, cfg=net.cfg)


# -- decoding --------------------------------------------------------------

_NEVER_EMIT = (PAD_ID, UNK_ID, QMARK_ID)


def greedy_decode(net: VQANetwork, question_tokens, X, v):
    """Greedy answer recursion; returns ``(answer_ids, traces)``.

    Each step re-runs the network on the question extended by the answers
    so far and takes the argmax of the last main-head logits (lowest id on
    ties, reserved ids other than ``<eoa>`` excluded).
    """
    seq = [int(t) for t in question_tokens]
    if not seq or seq[-1] != QMARK_ID:
        raise ProtocolError("question must end with '<?>'")
    answer, traces = [], []
    for _ in range(net.cfg.max_answer_len):
        trace = forward(net, seq, X, v, aux=False)
        traces.append(trace)
        logits = trace.main_logits.data[-1].copy()
        logits[list(_NEVER_EMIT)] = -np.inf
        tok = int(np.argmax(logits))
        if tok == EOA_ID:
            break
        answer.append(tok)
        seq.append(int(net.answer_to_input[tok]))
    return answer, traces


def predict_answer(net: VQANetwork, question_tokens, X, v) -> list[int]:
    return greedy_decode(net, question_tokens, X, v)[0]
