"""Answer metrics: exact accuracy, Wu-Palmer similarity, thresholded WUPS
set scores and their multi-annotator consensus variants."""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .errors import FormatError, ProtocolError

THRESHOLDS = (0.9, 0.7, 0.5, 0.0)
DOWN_WEIGHT = 0.1


class Taxonomy:
    """A rooted tree of terms, read from ``child TAB parent`` lines. Root depth is 1."""

    def __init__(self, edges: Iterable[tuple[str, str]] = ()):
        self.parent: dict[str, str] = {}
        nodes = {}
        for child, parent in edges:
            if child == parent:
                raise FormatError(f"term {child!r} is its own parent")
            if child in self.parent and self.parent[child] != parent:
                raise FormatError(f"term {child!r} has two parents "
                                  f"({self.parent[child]!r}, {parent!r})")
            self.parent[child] = parent
            nodes[child] = nodes[parent] = None
        roots = [n for n in nodes if n not in self.parent]
        if nodes and len(roots) != 1:
            raise FormatError(f"taxonomy needs exactly one root, found {sorted(roots)}")
        self.root = roots[0] if roots else None
        self.depth: dict[str, int] = {}
        for n in nodes:
            self._depth_of(n)

    def _depth_of(self, term):
        path = []
        node = term
        while node not in self.depth:
            if node in path:
                raise FormatError(f"cycle through {node!r}")
            path.append(node)
            if node not in self.parent:
                self.depth[node] = 1
                path.pop()
                break
            node = self.parent[node]
        base = self.depth[node]
        for n in reversed(path):
            base += 1
            self.depth[n] = base
        return self.depth[term]

    @classmethod
    def from_lines(cls, lines: Iterable[str]) -> Taxonomy:
        edges = []
        for lineno, line in enumerate(lines, 1):
            line = line.rstrip("\r\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            fields = line.split("\t")
            if len(fields) != 2 or not all(f.strip() for f in fields):
                raise FormatError("expected 'child TAB parent'", line=lineno)
            edges.append((fields[0].strip(), fields[1].strip()))
        return cls(edges)

    @classmethod
    def load(cls, path) -> Taxonomy:
        with open(path, encoding="utf-8") as fh:
            return cls.from_lines(fh)

    def __contains__(self, term):
        return term in self.depth

    def __len__(self):
        return len(self.depth)

    def ancestors(self, term) -> list[str]:
        """``term`` up to the root, inclusive."""
        out = [term]
        while out[-1] in self.parent:
            out.append(self.parent[out[-1]])
        return out

    def lca(self, a, b):
        seen = set(self.ancestors(a))
        for n in self.ancestors(b):
            if n in seen:
                return n
        return None


def wup_similarity(a: str, b: str, tax: Taxonomy | None, missing: set | None = None) -> float:
    """``2 depth(lca) / (depth(a) + depth(b))``; 0 for terms outside the taxonomy.

    Identical strings score 1 whether or not they are in the taxonomy.
    Out-of-taxonomy terms are added to ``missing`` when given.
    """
    if a == b:
        return 1.0
    if tax is None:
        return 0.0
    absent = [t for t in (a, b) if t not in tax]
    if absent:
        if missing is not None:
            missing.update(absent)
        return 0.0
    d = tax.depth[tax.lca(a, b)]
    return 2.0 * d / (tax.depth[a] + tax.depth[b])


def _thresholded(a, b, tau, tax, missing):
    w = wup_similarity(a, b, tax, missing)
    return w if w >= tau else DOWN_WEIGHT * w


def wups_item(pred: Iterable[str], truth: Iterable[str], tau: float, tax: Taxonomy | None,
              missing: set | None = None) -> float:
    """Set score ``min(prod_a max_t w(a,t), prod_t max_a w(a,t))``."""
    A, T = sorted(set(pred)), sorted(set(truth))
    if not A and not T:
        return 1.0
    if not A or not T:
        return 0.0
    sim = {(a, t): _thresholded(a, t, tau, tax, missing) for a in A for t in T}
    forward = math.prod(max(sim[a, t] for t in T) for a in A)
    backward = math.prod(max(sim[a, t] for a in A) for t in T)
    return min(forward, backward)


def wups_score(preds: Sequence, truths: Sequence, tau: float, tax: Taxonomy | None,
               missing: set | None = None) -> float:
    if len(preds) != len(truths):
        raise ProtocolError(f"{len(preds)} predictions for {len(truths)} truths")
    if not preds:
        return 0.0
    return math.fsum(wups_item(p, t, tau, tax, missing) for p, t in zip(preds, truths)) / len(preds)


def consensus_item(pred, annotators: Sequence, tau: float, tax: Taxonomy | None,
                   mode: str = "average", missing: set | None = None) -> float:
    """Average over annotators, or (``min`` mode) the best-matching annotator."""
    if not annotators:
        raise ProtocolError("consensus needs at least one annotator")
    scores = [wups_item(pred, t, tau, tax, missing) for t in annotators]
    if mode == "average":
        # a mean lies within [min, max]; the clamp removes 1-ulp rounding excess
        return min(max(scores), math.fsum(scores) / len(scores))
    if mode == "min":
        return max(scores)
    raise ValueError(f"unknown consensus mode {mode!r}")


def consensus_scores(preds: Sequence, annotator_truths: Sequence, tau: float,
                     tax: Taxonomy | None, mode: str = "average",
                     missing: set | None = None) -> float:
    if len(preds) != len(annotator_truths):
        raise ProtocolError(f"{len(preds)} predictions for {len(annotator_truths)} items")
    if not preds:
        return 0.0
    return math.fsum(consensus_item(p, a, tau, tax, mode, missing)
                     for p, a in zip(preds, annotator_truths)) / len(preds)


def _annotators(item):
    """Accept a single token sequence or a list of annotator sequences."""
    if item and isinstance(item[0], str):
        return [list(item)]
    return [list(a) for a in item]


def exact_accuracy(preds: Sequence, truths: Sequence) -> float:
    """Fraction of items whose prediction equals some annotator's answer exactly."""
    if len(preds) != len(truths):
        raise ProtocolError(f"{len(preds)} predictions for {len(truths)} truths")
    if not preds:
        return 0.0
    hits = sum(list(p) in _annotators(t) for p, t in zip(preds, truths))
    return hits / len(preds)


def mscoco_accuracy(preds: Sequence, truths: Sequence) -> float:
    """Consensus accuracy ``min(#agreeing annotators / 3, 1)`` averaged over items."""
    if len(preds) != len(truths):
        raise ProtocolError(f"{len(preds)} predictions for {len(truths)} truths")
    if not preds:
        return 0.0
    return math.fsum(min(_annotators(t).count(list(p)) / 3.0, 1.0)
                     for p, t in zip(preds, truths)) / len(preds)


# -- reports ---------------------------------------------------------------


@dataclass
class EvalReport:
    n: int
    accuracy: float
    mscoco: float
    wups: dict            # tau -> score (truth = union of annotators)
    wups_average: dict    # tau -> average-consensus score
    wups_min: dict        # tau -> min-consensus score
    per_type: dict = field(default_factory=dict)   # question type -> {metric: value}
    missing_terms: list = field(default_factory=list)

    def items(self) -> list[tuple[str, float]]:
        rows = [("n", self.n), ("accuracy", self.accuracy), ("mscoco_accuracy", self.mscoco)]
        for tau in THRESHOLDS:
            rows.append((f"wups@{tau}", self.wups[tau]))
        for tau in THRESHOLDS:
            rows.append((f"wups_avg@{tau}", self.wups_average[tau]))
        for tau in THRESHOLDS:
            rows.append((f"wups_min@{tau}", self.wups_min[tau]))
        for qtype in sorted(self.per_type):
            for key, value in self.per_type[qtype].items():
                rows.append((f"type[{qtype}].{key}", value))
        rows.append(("missing_terms", len(self.missing_terms)))
        return rows

    def to_lines(self) -> str:
        return "".join(f"{k}\t{_fmt(v)}\n" for k, v in self.items())

    def table(self) -> str:
        head = ["metric"] + [f"@{t}" for t in THRESHOLDS]
        rows = [["WUPS"] + [_fmt(self.wups[t]) for t in THRESHOLDS],
                ["WUPS avg-consensus"] + [_fmt(self.wups_average[t]) for t in THRESHOLDS],
                ["WUPS min-consensus"] + [_fmt(self.wups_min[t]) for t in THRESHOLDS]]
        widths = [max(len(r[i]) for r in [head] + rows) for i in range(len(head))]
        lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)) for r in [head] + rows]
        lines.append(f"accuracy {_fmt(self.accuracy)}  mscoco {_fmt(self.mscoco)}  n {self.n}")
        if self.per_type:
            w = max(len(q) for q in self.per_type)
            lines.append("")
            lines.append(f"{'question type'.ljust(w)}  n      accuracy  wups@0.9")
            for q in sorted(self.per_type):
                d = self.per_type[q]
                lines.append(f"{q.ljust(w)}  {str(d['n']).ljust(5)}  "
                             f"{_fmt(d['accuracy']).ljust(8)}  {_fmt(d['wups@0.9'])}")
        if self.missing_terms:
            lines.append(f"terms missing from taxonomy: {' '.join(self.missing_terms)}")
        return "\n".join(lines) + "\n"


def _fmt(v):
    return str(v) if isinstance(v, int) else f"{v:.6f}"


def evaluate_predictions(preds: Sequence, annotator_truths: Sequence, tax: Taxonomy | None = None,
                         question_types: Sequence[str] | None = None) -> EvalReport:
    """All metrics for aligned predictions and per-item annotator answer lists."""
    truths = [_annotators(t) for t in annotator_truths]
    if len(preds) != len(truths):
        raise ProtocolError(f"{len(preds)} predictions for {len(truths)} items")
    missing: set = set()
    union = [sorted({w for a in t for w in a}) for t in truths]
    report = EvalReport(
        n=len(preds),
        accuracy=exact_accuracy(preds, truths),
        mscoco=mscoco_accuracy(preds, truths),
        wups={t: wups_score(preds, union, t, tax, missing) for t in THRESHOLDS},
        wups_average={t: consensus_scores(preds, truths, t, tax, "average", missing)
                      for t in THRESHOLDS},
        wups_min={t: consensus_scores(preds, truths, t, tax, "min", missing) for t in THRESHOLDS},
    )
    if question_types is not None:
        groups = defaultdict(list)
        for i, q in enumerate(question_types):
            groups[q].append(i)
        for q, idx in groups.items():
            p = [preds[i] for i in idx]
            report.per_type[q] = {
                "n": len(idx),
                "accuracy": exact_accuracy(p, [truths[i] for i in idx]),
                "wups@0.9": wups_score(p, [union[i] for i in idx], 0.9, tax),
            }
    report.missing_terms = sorted(missing)
    return report


def evaluate_model(net, examples, features: dict, tax: Taxonomy | None = None):
    """Greedy-decode every example; returns ``(report, predicted token lists)``."""
    from .model import predict_answer

    if net.question_vocab is None or net.answer_vocab is None:
        raise ProtocolError("network has no vocabularies attached")
    preds = []
    for ex in examples:
        if ex.image_id not in features:
            raise FormatError(f"no features for image {ex.image_id!r}")
        rec = features[ex.image_id]
        ids = predict_answer(net, net.question_vocab.encode(ex.question), rec.regions, rec.context)
        preds.append(net.answer_vocab.decode(ids))
    report = evaluate_predictions(preds, [ex.answers for ex in examples], tax,
                                  [ex.question_type for ex in examples])
    return report, preds
