"""Command-line entry point.

Every command writes ``run_manifest.json`` into its output directory before
doing any work and rewrites it once the run has finished or failed.

Exit codes: 0 success, 1 internal error, 2 usage or input error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

from . import __version__, baselines, data, evaluation, prompting, store, trainer
from .encoder import (
    Aggregation,
    CheckpointError,
    EncoderConfig,
    EncoderModel,
    VocabError,
    build_vocab,
    embed_pairs,
    load_checkpoint,
    read_manifest,
)

logger = logging.getLogger("relkit")

EXIT_OK, EXIT_INTERNAL, EXIT_USAGE = 0, 1, 2
MANIFEST_NAME = "run_manifest.json"

_INPUT_ERRORS = (
    FileNotFoundError,
    data.DataError,
    trainer.ConfigError,
    prompting.TemplateError,
    VocabError,
    CheckpointError,
    store.StoreError,
    baselines.OutOfVocabulary,
    evaluation.MissingEmbedding,
)


class UsageError(Exception):
    pass


def sha256_file(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _hash_inputs(paths) -> dict[str, str]:
    out = {}
    for p in paths:
        p = Path(p)
        if p.is_dir():
            for f in sorted(q for q in p.rglob("*") if q.is_file()):
                out[str(f)] = sha256_file(f)
        elif p.is_file():
            out[str(p)] = sha256_file(p)
    return out


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    inputs: dict[str, str] = field(default_factory=dict)
    outputs: list[str] = field(default_factory=list)
    version: str = __version__
    status: str = "running"
    error: str | None = None
    notes: list[str] = field(default_factory=list)
    started_at: float = 0.0
    finished_at: float | None = None
    wall_clock_seconds: float | None = None

    def write(self, out_dir: Path) -> None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / MANIFEST_NAME).write_text(json.dumps(self.__dict__, indent=1, sort_keys=True) + "\n",
                                             encoding="utf-8")


def _require_file(path) -> Path:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    return path


def _dump_text(path: Path, text: str, manifest: RunManifest) -> None:
    path.write_text(text, encoding="utf-8")
    manifest.outputs.append(str(path))


# ---------------------------------------------------------------------------
# build-data
# ---------------------------------------------------------------------------


def _build_relsim(args, out: Path, manifest: RunManifest):
    lists = data.load_rated_lists(_require_file(args.ratings))
    train, valid = data.build_relsim(lists, split_ratio=args.split_ratio, seed=args.seed)
    for ds, name in ((train, "train.jsonl"), (valid, "valid.jsonl")):
        _dump_text(out / name, ds.to_jsonl(), manifest)
    print(f"relsim: {len(train.relations)} train / {len(valid.relations)} valid relations")


def _build_triples(args, out: Path, manifest: RunManifest):
    triples = data.load_triples(_require_file(args.triples))
    merge = json.loads(_require_file(args.merge).read_text(encoding="utf-8")) if args.merge else None
    ds = data.build_from_triples(triples, args.min_triples, args.min_entity_freq, merge, args.drop or ())
    _dump_text(out / "relations.jsonl", ds.to_jsonl(), manifest)
    print(f"triples: {len(ds.relations)} relations, {sum(len(r.positives) for r in ds.relations.values())} pairs")


def _build_analogies(args, out: Path, manifest: RunManifest):
    ds = data.load_relation_dataset(_require_file(args.dataset))
    questions = data.to_analogy_questions(ds, n_negatives=args.n, seed=args.seed)
    _dump_text(out / "questions.jsonl", data.questions_to_jsonl(questions), manifest)
    print(f"analogies: {len(questions)} questions")


def _build_offset(args, out: Path, manifest: RunManifest):
    raw = json.loads(_require_file(args.groups).read_text(encoding="utf-8"))
    try:
        groups = {cat: {rel: [data.WordPair.from_obj(p) for p in pairs] for rel, pairs in rels.items()}
                  for cat, rels in raw.items()}
    except (AttributeError, TypeError) as exc:
        raise data.DataError(f"{args.groups}: expected {{category: {{relation: [[h, t], ...]}}}} ({exc})") from None
    questions = data.build_offset_questions(groups, seed=args.seed)
    _dump_text(out / "questions.jsonl", data.questions_to_jsonl(questions), manifest)
    print(f"offset-analogies: {len(questions)} questions")


# ---------------------------------------------------------------------------
# train / embed
# ---------------------------------------------------------------------------


def _fresh_model(config: trainer.TrainConfig, texts, seed: int) -> EncoderModel:
    corpus = list(texts) + [t.text.replace("[h]", " ").replace("[t]", " ") for t in prompting.builtin_templates()]
    vocab = build_vocab(corpus, case_policy=config.case_policy)
    enc = EncoderConfig(len(vocab), config.d_model, config.n_heads, config.n_layers, config.d_ff, config.max_len)
    return EncoderModel(enc, vocab, seed=seed)


def cmd_train(args, out: Path, manifest: RunManifest):
    config = trainer.load_config(args.config) if args.config else trainer.default_config(args.loss)
    changes = {"seed": args.seed}
    if args.epochs is not None:
        changes["epochs"] = args.epochs
    if args.templates:
        changes["templates"] = tuple(int(t) for t in args.templates.split(","))
    if args.learning_rate is not None:
        changes["learning_rate"] = args.learning_rate
    if args.batch_size is not None:
        changes["batch_size"] = args.batch_size
    config = config.replace(**changes)
    manifest.config["resolved"] = config.to_json()
    manifest.write(out)

    dataset = data.load_relation_dataset(_require_file(args.dataset), "train")
    valid_ds = data.load_relation_dataset(_require_file(args.valid), "valid") if args.valid else None
    if args.valid_questions:
        questions = data.load_questions(_require_file(args.valid_questions))
    elif valid_ds is not None:
        questions = data.to_analogy_questions(valid_ds, seed=args.seed)
    else:
        raise UsageError("train needs --valid-questions or --valid")
    if args.init:
        model = load_checkpoint(_require_file(args.init))
    else:
        words = [w for p in dataset.all_pairs() for w in p.as_list()]
        words += [w for q in questions for p in (q.query, *q.candidates) for w in p.as_list()]
        if valid_ds is not None:
            words += [w for p in valid_ds.all_pairs() for w in p.as_list()]
        model = _fresh_model(config, words, args.seed)
    try:
        records = trainer.train(model, dataset, questions, config, out,
                                valid_dataset=valid_ds if config.selection_metric == "loss" else None)
    finally:
        manifest.outputs.extend(str(out / n) for n in ("config.cfg", "records.jsonl", "checkpoints"))
    best = (out / "best.txt").read_text(encoding="utf-8").strip()
    manifest.outputs.append(str(out / "best.txt"))
    manifest.notes.append(f"best checkpoint {best}")
    print(f"trained {len(records)} checkpoints; best {best}")


def _resolve_checkpoint(path: Path) -> Path:
    """A run directory resolves to its best checkpoint."""
    if (path / "best.txt").is_file():
        return path / (path / "best.txt").read_text(encoding="utf-8").strip()
    return path


def _checkpoint_defaults(ckpt: Path, template_arg, aggregation_arg):
    training = read_manifest(ckpt).get("training_config") or {}
    template_id = template_arg
    if template_id is None:
        name = ckpt.name
        template_id = int(name[1:name.index("_")]) if name.startswith("t") and "_" in name else 1
    aggregation = Aggregation.parse(aggregation_arg or training.get("aggregation", "average_wo_mask"))
    return prompting.get_template(template_id), aggregation


def load_pair_list(path) -> list[data.WordPair]:
    """Pairs as ``head<TAB>tail`` lines."""
    pairs = []
    for lineno, line in enumerate(_require_file(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise data.DataError(f"{path}:{lineno}: expected head<TAB>tail")
        pairs.append(data.WordPair(*parts))
    return list(dict.fromkeys(pairs))


def cmd_embed(args, out: Path, manifest: RunManifest):
    ckpt = _resolve_checkpoint(_require_file(args.checkpoint))
    model = load_checkpoint(ckpt)
    template, aggregation = _checkpoint_defaults(ckpt, args.template, args.aggregation)
    pairs = load_pair_list(args.pairs)
    kept, skipped = [], []
    for pair in pairs:
        n_tokens = len(prompting.render(template, pair, model.vocab).token_ids)
        (kept if n_tokens <= model.config.max_len else skipped).append((pair, n_tokens))
    vectors = embed_pairs(model, template, [p for p, _ in kept], aggregation)
    provenance = {"model_id": model.model_id, "vocab_hash": model.vocab.hash,
                  "template_id": template.id, "aggregation": aggregation.value}
    target = out / "embeddings.relb"
    store.save_store(target, [p for p, _ in kept], vectors, provenance)
    manifest.outputs.append(str(target))
    if skipped:
        _dump_text(out / "skipped.tsv", "".join(f"{p.head}\t{p.tail}\t{n}\n" for p, n in skipped), manifest)
        logger.warning("%d pairs skipped: prompt longer than %d tokens", len(skipped), model.config.max_len)
    print(f"embedded {len(kept)} pairs (d={model.config.d_model}), skipped {len(skipped)}")


# ---------------------------------------------------------------------------
# eval / baseline
# ---------------------------------------------------------------------------


def _make_embedder(args):
    kind = args.embedder
    if kind == "random":
        return evaluation.RandomEmbedder(args.dim, args.seed)
    if kind == "checkpoint":
        if not args.checkpoint:
            raise UsageError("--embedder checkpoint needs --checkpoint")
        ckpt = _resolve_checkpoint(_require_file(args.checkpoint))
        template, aggregation = _checkpoint_defaults(ckpt, args.template, args.aggregation)
        return evaluation.EncoderEmbedder(load_checkpoint(ckpt), template, aggregation)
    if kind == "store":
        if not args.store:
            raise UsageError("--embedder store needs --store")
        return evaluation.StoredEmbedder(store.load_store(args.store).mapping())
    if not args.vectors:
        raise UsageError("--embedder word-vectors needs --vectors")
    return baselines.OffsetEmbedder(baselines.load_word_vectors(_require_file(args.vectors)))


def _report(rows, out: Path, manifest: RunManifest) -> None:
    sys.stdout.write(evaluation.rows_to_table(rows))
    _dump_text(out / "report.csv", evaluation.rows_to_csv(rows), manifest)


def _analogy_eval(embedder, question_paths, out: Path, manifest: RunManifest) -> None:
    rows, predictions = [], []
    for path in question_paths:
        name = Path(path).stem
        report = evaluation.eval_analogy(embedder, data.load_questions(_require_file(path)))
        rows += report.csv_rows(name)
        predictions += [json.dumps({"dataset": name, **json.loads(line)}) + "\n"
                        for line in evaluation.predictions_to_jsonl(report).splitlines()]
    _report(rows, out, manifest)
    _dump_text(out / "predictions.jsonl", "".join(predictions), manifest)


def cmd_eval_analogy(args, out: Path, manifest: RunManifest):
    _analogy_eval(_make_embedder(args), args.questions, out, manifest)


def cmd_eval_cls(args, out: Path, manifest: RunManifest):
    embedder = _make_embedder(args)
    train = evaluation.load_labeled_pairs(_require_file(args.train), "train")
    test = evaluation.load_labeled_pairs(_require_file(args.test), "test")
    X_train, y_train = evaluation.embed_labeled(embedder, train)
    X_valid = y_valid = None
    if args.valid:
        valid = evaluation.load_labeled_pairs(_require_file(args.valid), "valid")
        X_valid, y_valid = evaluation.embed_labeled(embedder, valid)
    clf = evaluation.train_relation_classifier(X_train, y_train, X_valid, y_valid, seed=args.seed)
    X_test, y_test = evaluation.embed_labeled(embedder, test)
    if X_test.shape[1] != clf.input_dim:
        raise UsageError(f"test embeddings have dim {X_test.shape[1]}, classifier expects {clf.input_dim}")
    report = evaluation.eval_classifier(clf, X_test, y_test)
    if clf.used_default:
        note = f"no validation split: default grid cell used (hidden={clf.hidden_size}, lr={clf.learning_rate})"
    else:
        note = f"selected hidden={clf.hidden_size}, lr={clf.learning_rate} from {len(clf.grid)} grid cells"
    manifest.notes.append(note)
    print(note)
    _report(report.csv_rows(Path(args.test).stem), out, manifest)


def cmd_baseline_offset(args, out: Path, manifest: RunManifest):
    args.embedder = "word-vectors"
    _analogy_eval(_make_embedder(args), args.questions, out, manifest)


def _question_words(questions) -> list[str]:
    return [f"{p.head} is to {p.tail} what" for q in questions for p in (q.query, *q.candidates)]


def _make_scorer(args, questions):
    if args.scorer == baselines.MASKED:
        if args.checkpoint:
            model = load_checkpoint(_resolve_checkpoint(_require_file(args.checkpoint)))
            return baselines.EncoderMaskedScorer(model), model.vocab
        vocab = build_vocab(_question_words(questions))
        return baselines.UniformScorer(len(vocab), baselines.MASKED), vocab
    corpus = []
    if args.corpus:
        corpus = _require_file(args.corpus).read_text(encoding="utf-8").splitlines()
    vocab = build_vocab(_question_words(questions) + corpus)
    if corpus:
        causal = baselines.BigramScorer([vocab.encode(line) for line in corpus if line.strip()], len(vocab),
                                        vocab.bos_id)
    else:
        causal = baselines.UniformScorer(len(vocab))
    if args.scorer == baselines.CONDITIONAL:
        return baselines.ConditionalAdapter(causal), vocab
    return causal, vocab


def cmd_baseline_ppl(args, out: Path, manifest: RunManifest):
    all_questions = {Path(p).stem: data.load_questions(_require_file(p)) for p in args.questions}
    scorer, vocab = _make_scorer(args, [q for qs in all_questions.values() for q in qs])
    rows, predictions = [], []
    for name, questions in all_questions.items():
        correct = degenerate = 0
        for i, q in enumerate(questions):
            pred = baselines.solve_by_perplexity(scorer, q, vocab, args.connective_in)
            correct += pred.index == q.gold
            degenerate += pred.degenerate
            predictions.append(json.dumps({"dataset": name, "index": i, "predicted": pred.index, "gold": q.gold,
                                           "correct": pred.index == q.gold, "degenerate": pred.degenerate}) + "\n")
        rows.append((name, "accuracy", correct / len(questions), ""))
        if degenerate:
            manifest.notes.append(f"{name}: {degenerate} degenerate questions")
    _report(rows, out, manifest)
    _dump_text(out / "predictions.jsonl", "".join(predictions), manifest)


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _add_embedder_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--embedder", choices=("random", "checkpoint", "store", "word-vectors"), default="checkpoint")
    p.add_argument("--checkpoint", help="checkpoint directory or training run directory")
    p.add_argument("--template", type=int, help="prompt template id (default: from the checkpoint name)")
    p.add_argument("--aggregation", choices=[a.value for a in Aggregation])
    p.add_argument("--store", help="embedding store file")
    p.add_argument("--vectors", help="word-vector text file")
    p.add_argument("--dim", type=int, default=64, help="random embedder dimension")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="relkit", description="Relation embeddings from prompted encoders.")
    parser.add_argument("--seed", type=int, default=0, help="seed for every stochastic step")
    parser.add_argument("--threads", type=int, help="cap on numerical worker threads")
    parser.add_argument("--version", action="version", version=f"relkit {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    build = sub.add_parser("build-data", help="build relation datasets and analogy questions")
    bsub = build.add_subparsers(dest="builder", required=True)
    p = bsub.add_parser("relsim", help="train/valid datasets from rated pair lists")
    p.add_argument("--ratings", required=True)
    p.add_argument("--split-ratio", type=float, default=0.8)
    p.set_defaults(func=_build_relsim)
    p = bsub.add_parser("triples", help="relation dataset from head<TAB>relation<TAB>tail triples")
    p.add_argument("--triples", required=True)
    p.add_argument("--merge", help="JSON object mapping relation names to merged names")
    p.add_argument("--drop", nargs="*", help="relation names to drop")
    p.add_argument("--min-triples", type=int, default=3)
    p.add_argument("--min-entity-freq", type=int, default=5)
    p.set_defaults(func=_build_triples)
    p = bsub.add_parser("analogies", help="multiple-choice questions from a relation dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--n", type=int, default=1, help="negatives drawn from each other relation")
    p.set_defaults(func=_build_analogies)
    p = bsub.add_parser("offset-analogies", help="4-choice questions from categorised relation lists")
    p.add_argument("--groups", required=True, help="JSON {category: {relation: [[h, t], ...]}}")
    p.set_defaults(func=_build_offset)
    for p in bsub.choices.values():
        p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("train", help="fine-tune the encoder with a contrastive loss")
    p.add_argument("--config", help="key = value training config (default: shipped config for --loss)")
    p.add_argument("--loss", choices=("infonce", "infoloob", "triplet"), default="infonce")
    p.add_argument("--dataset", required=True, help="training relation dataset JSONL")
    p.add_argument("--valid", help="validation relation dataset JSONL")
    p.add_argument("--valid-questions", help="validation analogy questions JSONL")
    p.add_argument("--init", help="checkpoint to start from (default: freshly initialised encoder)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--templates", help="comma-separated template ids")
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--out", required=True, help="run directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("embed", help="write relation embeddings for a pair list")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--pairs", required=True, help="head<TAB>tail lines")
    p.add_argument("--template", type=int)
    p.add_argument("--aggregation", choices=[a.value for a in Aggregation])
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_embed)

    ev = sub.add_parser("eval", help="analogy accuracy or relation classification")
    esub = ev.add_subparsers(dest="task", required=True)
    p = esub.add_parser("analogy")
    _add_embedder_flags(p)
    p.add_argument("--questions", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval_analogy)
    p = esub.add_parser("cls")
    _add_embedder_flags(p)
    p.add_argument("--train", required=True)
    p.add_argument("--valid")
    p.add_argument("--test", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval_cls)

    base = sub.add_parser("baseline", help="comparison systems")
    bsub = base.add_subparsers(dest="baseline", required=True)
    p = bsub.add_parser("offset", help="word-vector offset analogy baseline")
    p.add_argument("--vectors", required=True)
    p.add_argument("--questions", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_baseline_offset)
    p = bsub.add_parser("ppl", help="perplexity-based analogy baseline")
    p.add_argument("--scorer", choices=(baselines.CAUSAL, baselines.MASKED, baselines.CONDITIONAL), required=True)
    p.add_argument("--checkpoint", help="encoder checkpoint for the masked scorer (default: uniform)")
    p.add_argument("--corpus", help="text corpus for a bigram causal/conditional scorer (default: uniform)")
    p.add_argument("--connective-in", choices=("hypothesis", "premise", "none"), default="hypothesis")
    p.add_argument("--questions", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_baseline_ppl)
    return parser


_INPUT_FLAGS = ("ratings", "triples", "merge", "dataset", "groups", "config", "valid", "valid_questions", "init",
                "checkpoint", "pairs", "store", "vectors", "train", "test", "corpus")


def _input_paths(args) -> list[str]:
    paths = [getattr(args, f) for f in _INPUT_FLAGS if getattr(args, f, None)]
    return paths + list(getattr(args, "questions", None) or [])


def run(args) -> int:
    out = Path(args.out)
    config = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    manifest = RunManifest(" ".join(str(x) for x in (args.command, getattr(args, "builder", None),
                                                        getattr(args, "task", None), getattr(args, "baseline", None))
                                    if x), config, args.seed)
    manifest.started_at = time.time()
    manifest.inputs = _hash_inputs(_input_paths(args))
    manifest.write(out)
    code = EXIT_OK
    try:
        args.func(args, out, manifest)
        manifest.status = "ok"
    except (UsageError, *_INPUT_ERRORS) as exc:
        code, manifest.status, manifest.error = EXIT_USAGE, "input-error", str(exc)
        print(f"relkit: error: {exc}", file=sys.stderr)
    except trainer.TrainingAborted as exc:
        code, manifest.status, manifest.error = EXIT_INTERNAL, "aborted", str(exc)
        print(f"relkit: training aborted: {exc}", file=sys.stderr)
    except Exception as exc:  # noqa: BLE001 - reported through the exit code
        logger.exception("internal error")
        code, manifest.status, manifest.error = EXIT_INTERNAL, "error", f"{type(exc).__name__}: {exc}"
    manifest.finished_at = time.time()
    manifest.wall_clock_seconds = manifest.finished_at - manifest.started_at
    manifest.write(out)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads:
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=args.threads):
            return run(args)
    return run(args)


if __name__ == "__main__":
    sys.exit(main())
