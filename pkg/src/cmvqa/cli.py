"""Command-line entry point: ``cmvqa <subcommand> ...``.

Exit status: 0 success, 1 usage or configuration error, 2 data or format
error, 3 numerical abort. Diagnostics go to stderr, results to stdout.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .data import (QMARK, ToyTaskConfig, generate_toy_dataset, parse_manifest, read_features,
                   read_word_vectors, tokenize, write_toy_dataset)
from .errors import (CMVQAError, ConfigError, DimensionError, FormatError, NumericalError,
                     ProtocolError, VocabularyError)
from .evaluation import Taxonomy, evaluate_model
from .model import VARIANTS, NetworkConfig, VQANetwork, forward, greedy_decode
from .train import (TrainConfig, TrainingExample, build_vocabularies, grad_check,
                    load_checkpoint, prepare_examples, run_training, save_checkpoint)

log = logging.getLogger("cmvqa")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


# -- run configuration -----------------------------------------------------

NET_KEYS = {"d_q": int, "d_h": int, "d_z": int, "max_answer_len": int,
            "lambda_lang": float, "lambda_epi": float, "q_source": str}
TRAIN_KEYS = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
DATA_KEYS = {"manifest": str, "features": str, "test_manifest": str, "taxonomy": str,
             "out": str, "min_count": int, "embeddings": str}
_CASTS = {"int": int, "float": float, "str": str}


@dataclass
class RunConfig:
    """Union of network, training and data settings, from ``key = value`` files."""
    variant: str = "full"
    net: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    data: dict = field(default_factory=dict)

    def set(self, key: str, value: str):
        key = key.strip()
        value = value.strip()
        if key == "net.variant":
            if value not in VARIANTS:
                raise ConfigError(f"unknown variant {value!r}; choose from {list(VARIANTS)}")
            self.variant = value
            return
        ns, _, name = key.partition(".")
        table = {"net": NET_KEYS, "train": TRAIN_KEYS, "data": DATA_KEYS}.get(ns)
        if table is None or name not in table:
            raise ConfigError(f"unknown config key {key!r}")
        cast = table[name]
        cast = _CASTS.get(cast, cast) if isinstance(cast, str) else cast
        try:
            getattr(self, ns)[name] = cast(value)
        except ValueError:
            raise ConfigError(f"{key}: cannot parse {value!r}") from None

    def update_lines(self, lines, source="<config>"):
        for lineno, raw in enumerate(lines, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
            k, v = line.split("=", 1)
            self.set(k, v)
        return self

    @classmethod
    def from_file(cls, path) -> RunConfig:
        with open(path, encoding="utf-8") as fh:
            return cls().update_lines(fh, str(path))

    def train_config(self) -> TrainConfig:
        return TrainConfig(**self.train)

    def path(self, key, required=True):
        value = self.data.get(key)
        if value is None:
            if required:
                raise ConfigError(f"data.{key} is required")
            return None
        if key != "out" and not Path(value).exists():
            raise FormatError(f"data.{key}: no such file {value!r}")
        return value


def _run_config(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if getattr(args, "config", None) else RunConfig()
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        cfg.set(*item.split("=", 1))
    flag_map = {"variant": "net.variant", "seed": "train.seed", "iterations": "train.iterations",
                "manifest": "data.manifest", "features": "data.features",
                "test_manifest": "data.test_manifest", "taxonomy": "data.taxonomy",
                "out": "data.out"}
    for attr, key in flag_map.items():
        value = getattr(args, attr, None)
        if value is not None:
            cfg.set(key, str(value))
    return cfg


# -- helpers ---------------------------------------------------------------


def _features_by_id(path):
    return {r.image_id: r for r in read_features(path)}


def _pick_record(features: dict, image_id):
    if image_id is None:
        return next(iter(features.values()))
    if image_id not in features:
        raise FormatError(f"image {image_id!r} not in feature file")
    return features[image_id]


def _question_ids(net, text):
    tokens = tokenize(text)
    if not tokens or tokens[-1] != QMARK:
        tokens.append(QMARK)
    return net.question_vocab.encode(tokens)


# -- subcommands -----------------------------------------------------------


def cmd_gen_toy(args, out, err):
    cfg = ToyTaskConfig(seed=args.seed)
    for name in ("K", "n_train", "n_test", "noise", "questions_per_image"):
        value = getattr(args, name)
        if value is not None:
            setattr(cfg, name, value)
    paths = write_toy_dataset(generate_toy_dataset(cfg), args.out)
    for key, path in paths.items():
        print(f"{key}\t{path}", file=out)
    return EXIT_OK


def cmd_train(args, out, err):
    rc = _run_config(args)
    tcfg = rc.train_config()
    out_dir = Path(rc.path("out"))
    train_examples = parse_manifest(rc.path("manifest"))
    features = _features_by_id(rc.path("features"))
    qv, av = build_vocabularies(train_examples, rc.data.get("min_count", 1))
    K, d_x, d_v = next(iter(features.values())).dims
    ncfg = NetworkConfig.for_variant(rc.variant, question_vocab=len(qv), answer_vocab=len(av),
                                     d_x=d_x, d_v=d_v, K=K, **rc.net)
    init_seed, _ = np.random.SeedSequence(tcfg.seed).spawn(2)
    net = VQANetwork(ncfg, qv, av).init(np.random.default_rng(init_seed))
    vec_path = rc.path("embeddings", required=False)
    if vec_path:
        n = net.import_vectors(read_word_vectors(vec_path))
        print(f"imported {n} pretrained word vectors", file=err)
    data = prepare_examples(train_examples, features, qv, av)
    print(f"training {rc.variant} model: {net.num_parameters()} parameters, "
          f"{len(data)} examples, {tcfg.iterations} iterations", file=err)
    out_dir.mkdir(parents=True, exist_ok=True)
    result = run_training(net, data, tcfg, log_path=out_dir / "loss.log",
                          checkpoint_dir=out_dir / "checkpoints")
    final = out_dir / "model.cmck"
    save_checkpoint(final, net, result.iteration)
    print(f"checkpoint\t{final}", file=out)
    if result.losses:
        tail = result.losses[-min(50, len(result.losses)):]
        print(f"final_loss\t{np.mean(tail)!r}", file=out)
    test_path = rc.path("test_manifest", required=False)
    if test_path:
        tax_path = rc.path("taxonomy", required=False)
        tax = Taxonomy.load(tax_path) if tax_path else None
        report, _ = evaluate_model(net, parse_manifest(test_path), features, tax)
        (out_dir / "validation.tsv").write_text(report.to_lines(), encoding="utf-8")
        print(f"validation_accuracy\t{report.accuracy!r}", file=out)
    return EXIT_OK


def cmd_eval(args, out, err):
    net = load_checkpoint(args.checkpoint)
    features = _features_by_id(args.features)
    tax = Taxonomy.load(args.taxonomy) if args.taxonomy else None
    report, preds = evaluate_model(net, parse_manifest(args.manifest), features, tax)
    if args.predictions:
        Path(args.predictions).write_text("".join(" ".join(p) + "\n" for p in preds),
                                          encoding="utf-8")
    if args.format == "table":
        out.write(report.table())
    else:
        out.write(report.to_lines())
    return EXIT_OK


def cmd_infer(args, out, err):
    net = load_checkpoint(args.checkpoint)
    rec = _pick_record(_features_by_id(args.features), args.image_id)
    answer, _ = greedy_decode(net, _question_ids(net, args.question), rec.regions, rec.context)
    print(" ".join(net.answer_vocab.decode(answer)), file=out)
    return EXIT_OK


def cmd_gradcheck(args, out, err):
    rc = _run_config(args)
    rng = np.random.default_rng(rc.train.get("seed", 0))
    defaults = dict(question_vocab=12, answer_vocab=12, d_q=8, d_h=8, d_x=8, d_v=8, K=4)
    net_kw = {**defaults, **rc.net}
    cfg = NetworkConfig.for_variant(rc.variant, **net_kw)
    net = VQANetwork(cfg).init(rng)
    T = args.length
    n_answer = max(1, T // 3)
    n_question = T - n_answer
    if n_question < 1:
        raise ConfigError("sequence too short for a question and an answer")
    words = rng.integers(4, cfg.question_vocab, size=T)
    tokens = [int(w) for w in words[:n_question - 1]] + [2] + [int(w) for w in words[n_question:]]
    targets = [int(t) for t in rng.integers(4, cfg.answer_vocab, size=n_answer)] + [3]
    example = TrainingExample("gradcheck", tokens, targets,
                              rng.normal(size=(cfg.K, cfg.d_x)), rng.normal(size=cfg.d_v))
    result = grad_check(net, example, eps=args.eps, max_entries=args.max_entries,
                        seed=rc.train.get("seed", 0))
    print(f"max_relative_error\t{result.max_error:.3e}", file=out)
    print(f"worst_parameter\t{result.worst}", file=out)
    print(f"entries_checked\t{result.entries}", file=out)
    if args.verbose:
        for name, e in result.per_parameter.items():
            print(f"{name}\t{e:.3e}", file=out)
    if not result.passed(args.tol):
        print(f"gradient check failed: {result.max_error:.3e} >= {args.tol:g}", file=err)
        return EXIT_NUMERIC
    return EXIT_OK


def _grid_side(K):
    side = int(round(K ** 0.5))
    return side if side * side == K else None


def cmd_inspect_attention(args, out, err):
    net = load_checkpoint(args.checkpoint)
    if not net.cfg.uses_memory:
        raise ConfigError(f"variant {net.cfg.variant!r} has no compositional memory")
    rec = _pick_record(_features_by_id(args.features), args.image_id)
    q = _question_ids(net, args.question)
    answer, _ = greedy_decode(net, q, rec.regions, rec.context)
    seq = q + [int(net.answer_to_input[a]) for a in answer]
    trace = forward(net, seq, rec.regions, rec.context, aux=False)
    alpha = trace.alpha_map()
    words = net.question_vocab.decode(seq)
    print("t,k,alpha", file=out)
    for t in range(alpha.shape[0]):
        for k in range(alpha.shape[1]):
            print(f"{t},{k},{alpha[t, k]:.6f}", file=out)
    if args.grid:
        side = _grid_side(alpha.shape[1])
        for t, word in enumerate(words):
            print(f"# t={t} {word}", file=out)
            row = alpha[t]
            if side is None:
                print("# " + " ".join(f"{a:.3f}" for a in row), file=out)
            else:
                for r in range(side):
                    print("# " + " ".join(f"{a:.3f}" for a in row[r * side:(r + 1) * side]),
                          file=out)
    return EXIT_OK


# -- parser ----------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _add_run_flags(p, data=True):
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config key (repeatable)")
    p.add_argument("--variant", choices=list(VARIANTS))
    p.add_argument("--seed", type=int)
    if data:
        p.add_argument("--iterations", type=int)
        p.add_argument("--manifest")
        p.add_argument("--features")
        p.add_argument("--test-manifest", dest="test_manifest")
        p.add_argument("--taxonomy")
        p.add_argument("--out")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cmvqa", description="Compositional-memory VQA toolkit")
    parser.add_argument("--backend", choices=kernels.available(),
                        help="kernel backend (default: compiled when available)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, required=True)

    p = sub.add_parser("gen-toy", help="write the synthetic toy dataset")
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--out", required=True)
    p.add_argument("--K", type=int)
    p.add_argument("--n-train", dest="n_train", type=int)
    p.add_argument("--n-test", dest="n_test", type=int)
    p.add_argument("--noise", type=float)
    p.add_argument("--questions-per-image", dest="questions_per_image", type=int)
    p.set_defaults(func=cmd_gen_toy)

    p = sub.add_parser("train", help="train a model with teacher forcing")
    _add_run_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--taxonomy")
    p.add_argument("--format", choices=("lines", "table"), default="lines")
    p.add_argument("--predictions", help="write predicted answers, one per line")
    p.set_defaults(func=cmd_eval)

    for name, func, helptext in (("infer", cmd_infer, "answer one question"),
                                 ("inspect-attention", cmd_inspect_attention,
                                  "dump alpha values as CSV t,k,alpha")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--features", required=True)
        p.add_argument("--question", required=True)
        p.add_argument("--image-id", dest="image_id")
        if name == "inspect-attention":
            p.add_argument("--grid", action="store_true",
                           help="append a per-step grid rendering as '#' comment lines")
        p.set_defaults(func=func)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check")
    _add_run_flags(p, data=False)
    p.add_argument("--length", type=int, default=6, help="sequence length T")
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--max-entries", dest="max_entries", type=int)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None, out=None, err=None) -> int:
    out = out or sys.stdout
    err = err or sys.stderr
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(str(exc).rstrip(), file=err)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        stream=err, format="%(levelname)s %(message)s")
    try:
        if args.backend:
            with kernels.using(args.backend):
                return args.func(args, out, err)
        return args.func(args, out, err)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=err)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=err)
        return EXIT_NUMERIC
    except (FormatError, ProtocolError, VocabularyError, DimensionError, OSError) as exc:
        print(f"data error: {exc}", file=err)
        return EXIT_DATA
    except CMVQAError as exc:
        print(f"error: {exc}", file=err)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
