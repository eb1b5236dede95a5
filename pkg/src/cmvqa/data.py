"""Tokenizer, vocabularies, feature files, manifests and the toy VQA generator."""

from __future__ import annotations

import math
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, FormatError, VocabularyError

PAD, UNK, QMARK, EOA = "<pad>", "<unk>", "<?>", "<eoa>"
RESERVED = (PAD, UNK, QMARK, EOA)
PAD_ID, UNK_ID, QMARK_ID, EOA_ID = range(4)

# -- tokenizer -------------------------------------------------------------


def _clean(piece: str) -> str:
    kept = []  # (char, provisional)
    n = len(piece)
    for i, ch in enumerate(piece):
        if ch.isalnum():
            kept.append((ch, False))
        elif ch in ".:" and 0 < i < n - 1:
            a, b = piece[i - 1], piece[i + 1]
            if a.isdigit() and b.isdigit():
                kept.append((ch, False))
            elif ch == "." and a.isalpha() and b.isalpha():
                kept.append((ch, True))
    if len(kept) > 3:
        kept = [(c, p) for c, p in kept if not p]
    return "".join(c for c, _ in kept)


def tokenize(text: str) -> list[str]:
    """Lowercase, strip punctuation, and emit ``<?>`` for each question mark.

    '.' and ':' survive between two digits ("3:30", "2.5"); a '.' between
    two letters survives only in tokens of at most three characters
    ("p.m", "e.g"). Everything else that is not alphanumeric is dropped.
    """
    out = []
    for chunk in text.lower().split():
        for n, piece in enumerate(chunk.split("?")):
            if n:
                out.append(QMARK)
            tok = _clean(piece)
            if tok:
                out.append(tok)
    return out


# -- vocabulary ------------------------------------------------------------


class Vocabulary:
    """Token <-> id maps; ids 0-3 are always ``<pad> <unk> <?> <eoa>``."""

    def __init__(self, tokens: Iterable[str] = ()):
        self.tokens: list[str] = list(RESERVED)
        self.index: dict[str, int] = {t: i for i, t in enumerate(RESERVED)}
        for t in tokens:
            self.add(t)

    def add(self, token: str) -> int:
        if token not in self.index:
            self.index[token] = len(self.tokens)
            self.tokens.append(token)
        return self.index[token]

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self.index

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def lookup(self, token: str) -> int:
        return self.index.get(token, UNK_ID)

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.index.get(t, UNK_ID) for t in tokens]

    def token(self, i: int) -> str:
        if not 0 <= i < len(self.tokens):
            raise VocabularyError(f"id {i} outside vocabulary of size {len(self.tokens)}")
        return self.tokens[i]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.token(i) for i in ids]

    @classmethod
    def from_tokens(cls, tokens: Sequence[str]) -> Vocabulary:
        if tuple(tokens[:4]) != RESERVED:
            raise VocabularyError("vocabulary must start with the reserved tokens")
        return cls(tokens[4:])


def build_vocab(streams: Iterable[Iterable[str]], min_count: int = 1) -> Vocabulary:
    """Reserved tokens first, then tokens seen ``min_count`` times, in first-seen order."""
    counts: Counter = Counter()
    order: list[str] = []
    for stream in streams:
        for tok in stream:
            if tok not in counts:
                order.append(tok)
            counts[tok] += 1
    return Vocabulary(t for t in order if counts[t] >= min_count and t not in RESERVED)


# -- feature files ---------------------------------------------------------

MAGIC = b"CMVF"
FEATURE_VERSION = 1
_HEADER = struct.Struct("<4sIIIII")


@dataclass
class FeatureRecord:
    image_id: str
    regions: np.ndarray   # (K, d_x)
    context: np.ndarray   # (d_v,)

    def __post_init__(self):
        self.regions = np.asarray(self.regions, dtype=np.float64)
        self.context = np.asarray(self.context, dtype=np.float64)
        if self.regions.ndim != 2 or self.context.ndim != 1:
            raise FormatError(f"{self.image_id}: regions must be 2-D and context 1-D")
        if not (np.isfinite(self.regions).all() and np.isfinite(self.context).all()):
            raise FormatError(f"{self.image_id}: non-finite feature values")

    @property
    def dims(self):
        return self.regions.shape[0], self.regions.shape[1], self.context.shape[0]


def write_features(path, records: Sequence[FeatureRecord]) -> None:
    """Write records as a CMVF file; values narrowed to little-endian f32."""
    if not records:
        raise FormatError("cannot write an empty feature file")
    K, dx, dv = records[0].dims
    chunks = [_HEADER.pack(MAGIC, FEATURE_VERSION, len(records), K, dx, dv)]
    for r in records:
        if r.dims != (K, dx, dv):
            raise FormatError(f"record {r.image_id!r} has dims {r.dims}, file uses {(K, dx, dv)}")
        ident = r.image_id.encode("utf-8")
        chunks.append(struct.pack("<I", len(ident)))
        chunks.append(ident)
        chunks.append(r.regions.astype("<f4").tobytes())
        chunks.append(r.context.astype("<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_features(path) -> list[FeatureRecord]:
    """Parse a CMVF file; values are widened to f64."""
    buf = Path(path).read_bytes()
    return parse_features(buf)


def parse_features(buf: bytes) -> list[FeatureRecord]:
    if len(buf) < _HEADER.size:
        raise FormatError("truncated header", offset=len(buf))
    magic, version, count, K, dx, dv = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected 'CMVF'", offset=0)
    if version != FEATURE_VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)
    if K == 0 or dx == 0 or dv == 0:
        raise FormatError(f"zero dimension in header (K={K}, d_x={dx}, d_v={dv})", offset=12)
    pos = _HEADER.size
    nreg, nctx = K * dx * 4, dv * 4
    records = []
    for _ in range(count):
        if pos + 4 > len(buf):
            raise FormatError("truncated id length", offset=pos)
        (n,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        if pos + n + nreg + nctx > len(buf):
            raise FormatError("truncated record", offset=pos)
        try:
            ident = buf[pos:pos + n].decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError("image id is not UTF-8", offset=pos) from exc
        pos += n
        regions = np.frombuffer(buf, dtype="<f4", count=K * dx, offset=pos).reshape(K, dx)
        pos += nreg
        context = np.frombuffer(buf, dtype="<f4", count=dv, offset=pos)
        pos += nctx
        try:
            records.append(FeatureRecord(ident, regions.astype(np.float64),
                                         context.astype(np.float64)))
        except FormatError as exc:
            raise FormatError(str(exc), offset=pos) from None
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes after {count} records", offset=pos)
    return records


def feature_file_size(records: Sequence[FeatureRecord]) -> int:
    K, dx, dv = records[0].dims
    return (_HEADER.size + sum(4 + len(r.image_id.encode("utf-8")) for r in records)
            + len(records) * 4 * (K * dx + dv))


# -- manifests -------------------------------------------------------------


@dataclass
class QAExample:
    image_id: str
    question: list[str]            # tokens, ends with <?>
    answers: list[list[str]]       # one token list per annotator

    def __post_init__(self):
        if not self.question or self.question[-1] != QMARK:
            raise FormatError(f"{self.image_id}: question must end with '?'")
        if not self.answers or any(not a for a in self.answers):
            raise FormatError(f"{self.image_id}: empty answer")

    @property
    def question_type(self) -> str:
        return " ".join(self.question[:2])


def parse_manifest_lines(lines: Iterable[str]) -> list[QAExample]:
    out = []
    for lineno, line in enumerate(lines, 1):
        line = line.rstrip("\r\n")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) != 3:
            raise FormatError(f"expected 3 tab-separated fields, got {len(fields)}", line=lineno)
        image_id, question, answers = fields
        try:
            out.append(QAExample(image_id.strip(), tokenize(question),
                                 [tokenize(a) for a in answers.split(";")]))
        except FormatError as exc:
            raise FormatError(str(exc), line=lineno) from None
    return out


def parse_manifest(path) -> list[QAExample]:
    with open(path, encoding="utf-8") as fh:
        return parse_manifest_lines(fh)


def format_manifest_line(image_id: str, question: str, answers: Sequence[str]) -> str:
    return f"{image_id}\t{question}\t{';'.join(answers)}"


def read_word_vectors(path) -> dict[str, np.ndarray]:
    """Pretrained vectors in word2vec text format: ``word v1 v2 ...`` per line.

    An optional ``count dim`` header line is skipped. All vectors must share
    one width.
    """
    vectors: dict[str, np.ndarray] = {}
    width = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            fields = line.split()
            if not fields:
                continue
            if lineno == 1 and len(fields) == 2 and all(f.isdigit() for f in fields):
                continue
            try:
                vec = np.array([float(f) for f in fields[1:]])
            except ValueError:
                raise FormatError("non-numeric vector entry", line=lineno) from None
            if width is None:
                width = vec.size
            if vec.size != width or width == 0 or not np.isfinite(vec).all():
                raise FormatError(f"expected {width} finite values", line=lineno)
            vectors[fields[0]] = vec
    return vectors


# -- toy task --------------------------------------------------------------

TEMPLATES = {
    "color_of_shape": "what color is the {shape}?",
    "shape_at_cell": "what shape is at cell {cell}?",
    "color_at_cell": "what color is the object at cell {cell}?",
}


@dataclass
class ToyTaskConfig:
    K: int = 4
    colors: tuple = ("red", "green", "blue", "yellow")
    shapes: tuple = ("square", "circle", "triangle")
    templates: tuple = ("color_of_shape", "shape_at_cell", "color_at_cell")
    n_train: int = 2000
    n_test: int = 500
    questions_per_image: int = 4
    noise: float = 0.05
    position_code: bool = True
    seed: int = 42

    @property
    def d_x(self):
        return len(self.shapes) + len(self.colors) + (self.K if self.position_code else 0)

    def validate(self):
        if self.K < 1 or not self.colors or not self.shapes or not self.templates:
            raise ConfigError("toy task needs K >= 1 and non-empty inventories")
        unknown = set(self.templates) - set(TEMPLATES)
        if unknown:
            raise ConfigError(f"unknown templates {sorted(unknown)}")
        if "color_of_shape" in self.templates and self.K > 1 and len(self.shapes) < 2:
            raise ConfigError("need at least two shapes so some shape is unique in each image")
        if not self.position_code and any(t.endswith("_at_cell") for t in self.templates):
            raise ConfigError("cell questions need position_code=True")
        if self.questions_per_image < 1 or self.n_train < 1 or self.n_test < 0:
            raise ConfigError("dataset sizes must be positive")


@dataclass
class ToyDataset:
    cfg: ToyTaskConfig
    train: list[tuple[str, str, str]] = field(default_factory=list)   # (image_id, question, answer)
    test: list[tuple[str, str, str]] = field(default_factory=list)
    records: list[FeatureRecord] = field(default_factory=list)

    def manifest_text(self, split: str) -> str:
        rows = self.train if split == "train" else self.test
        return "".join(format_manifest_line(i, q, [a]) + "\n" for i, q, a in rows)


def _toy_image(cfg: ToyTaskConfig, rng):
    ns, nc = len(cfg.shapes), len(cfg.colors)
    while True:
        shapes = rng.integers(0, ns, size=cfg.K)
        counts = np.bincount(shapes, minlength=ns)
        if "color_of_shape" not in cfg.templates or (counts == 1).any():
            break
    colors = rng.integers(0, nc, size=cfg.K)
    return shapes, colors


def toy_features(cfg: ToyTaskConfig, shapes, colors, rng) -> tuple[np.ndarray, np.ndarray]:
    ns, nc = len(cfg.shapes), len(cfg.colors)
    X = np.zeros((cfg.K, cfg.d_x))
    for k in range(cfg.K):
        X[k, shapes[k]] = 1.0
        X[k, ns + colors[k]] = 1.0
        if cfg.position_code:
            X[k, ns + nc + k] = 1.0
    if cfg.noise > 0:
        X += rng.normal(0.0, cfg.noise, size=X.shape)
    return X, X.mean(axis=0)


def generate_toy_dataset(cfg: ToyTaskConfig | None = None) -> ToyDataset:
    """Images of K cells, each holding one (shape, color); questions answerable by lookup.

    Region features are one-hot shape, one-hot color and one-hot cell index
    plus Gaussian noise; the context vector is their mean.
    """
    cfg = cfg or ToyTaskConfig()
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    ds = ToyDataset(cfg)
    for split, n_q in (("train", cfg.n_train), ("test", cfg.n_test)):
        rows = ds.train if split == "train" else ds.test
        n_img = math.ceil(n_q / cfg.questions_per_image)
        for i in range(n_img):
            image_id = f"{split}{i:05d}"
            shapes, colors = _toy_image(cfg, rng)
            X, v = toy_features(cfg, shapes, colors, rng)
            ds.records.append(FeatureRecord(image_id, X, v))
            counts = np.bincount(shapes, minlength=len(cfg.shapes))
            for _ in range(cfg.questions_per_image):
                if len(rows) >= n_q:
                    break
                template = cfg.templates[rng.integers(len(cfg.templates))]
                if template == "color_of_shape":
                    unique = np.flatnonzero(counts == 1)
                    s = unique[rng.integers(len(unique))]
                    k = int(np.flatnonzero(shapes == s)[0])
                    q = TEMPLATES[template].format(shape=cfg.shapes[s])
                    a = cfg.colors[colors[k]]
                else:
                    k = int(rng.integers(cfg.K))
                    q = TEMPLATES[template].format(cell=k + 1)
                    a = cfg.shapes[shapes[k]] if template == "shape_at_cell" else cfg.colors[colors[k]]
                rows.append((image_id, q, a))
    return ds


def toy_taxonomy_lines(cfg: ToyTaskConfig) -> list[str]:
    lines = ["color\tentity", "shape\tentity"]
    lines += [f"{c}\tcolor" for c in cfg.colors]
    lines += [f"{s}\tshape" for s in cfg.shapes]
    return lines


def write_toy_dataset(ds: ToyDataset, out_dir) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "train": out / "train.tsv",
        "test": out / "test.tsv",
        "features": out / "features.cmvf",
        "taxonomy": out / "taxonomy.tsv",
    }
    paths["train"].write_text(ds.manifest_text("train"), encoding="utf-8")
    paths["test"].write_text(ds.manifest_text("test"), encoding="utf-8")
    write_features(paths["features"], ds.records)
    paths["taxonomy"].write_text("\n".join(toy_taxonomy_lines(ds.cfg)) + "\n", encoding="utf-8")
    return paths
