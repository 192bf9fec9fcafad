"""Command-line pipeline: gen-synth / stats / train / encode / retrieve /
eval / ablate.

Every artifact-producing command writes a run manifest next to its output
(config snapshot, seed, input digests, output paths, tool version), and all
randomness flows from the --seed flag, so re-running a command with the
inputs recorded in its manifest reproduces the artifact byte for byte.

Exit codes: 0 success, 2 input error, 3 insufficient data, 4 invalid flag
combination.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import asdict, dataclass
from pathlib import Path

from . import __version__
from .data import (
    DatasetFormatError,
    DatasetParseError,
    KNOWN_FORMATS,
    compute_stats,
    ingest_dataset,
    load_corpus,
)
from .encoder import CheckpointError, init_params, load_params, save_params
from .evaluation import (
    ablation,
    evaluate,
    make_bm25_retriever,
    make_dense_retriever,
    make_hybrid_retriever,
)
from .index import (
    IndexFileError,
    SearchResult,
    encode_corpus,
    load_index,
    save_index,
)
from .lexical import (
    DEFAULT_HYBRID_WEIGHT,
    LexicalFileError,
    build_lexical_index,
    load_lexical,
    save_lexical,
)
from .trainer import InsufficientDataError, TrainConfig, append_epoch_log, train
from .synth import generate_benchmark, write_benchmark

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_INSUFFICIENT_DATA = 3
EXIT_BAD_FLAGS = 4

_INPUT_ERRORS = (
    DatasetParseError,
    DatasetFormatError,
    CheckpointError,
    IndexFileError,
    LexicalFileError,
    OSError,
)


class FlagCombinationError(ValueError):
    """Flags that are individually valid but mutually inconsistent."""


@dataclass
class RunManifest:
    command: str
    seed: int | None
    config: dict
    inputs: dict[str, str]  # path -> sha256 of contents
    outputs: list[str]
    tool_version: str = __version__


def _sha256_file(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_manifest(manifest: RunManifest, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(asdict(manifest), fh, sort_keys=True, indent=2)
        fh.write("\n")


def _parse_ks(raw: str) -> list[int]:
    try:
        ks = [int(part) for part in raw.split(",") if part.strip()]
    except ValueError as exc:
        raise FlagCombinationError(f"--k must be comma-separated integers: {raw!r}")
    if not ks or min(ks) < 1:
        raise FlagCombinationError(f"--k values must be >= 1: {raw!r}")
    return ks


def _parse_ms(raw: str) -> list[int]:
    try:
        ms = [int(part) for part in raw.split(",") if part.strip()]
    except ValueError:
        raise FlagCombinationError(f"--m must be comma-separated integers: {raw!r}")
    if not ms or min(ms) < 1:
        raise FlagCombinationError(f"--m values must be >= 1: {raw!r}")
    return ms


def _add_train_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--batch-size", type=int, default=16)
    parser.add_argument("--max-positives", type=int, default=3)
    parser.add_argument("--loss", choices=("bce", "nll"), default="bce")
    parser.add_argument("--epochs", type=int, default=40)
    parser.add_argument("--lr", type=float, default=1e-5)
    parser.add_argument("--warmup-steps", type=int, default=None)
    parser.add_argument("--dropout", type=float, default=0.1)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--buckets", type=int, default=65536)
    parser.add_argument("--embed-dim", type=int, default=128)
    parser.add_argument("--out-dim", type=int, default=128)


def _config_from_args(args: argparse.Namespace) -> TrainConfig:
    if args.loss == "nll" and args.max_positives != 1:
        raise FlagCombinationError(
            "--loss nll requires --max-positives 1 "
            "(the nll loss admits exactly one positive per question)"
        )
    config = TrainConfig(
        batch_size=args.batch_size,
        max_positives=args.max_positives,
        loss=args.loss,
        epochs=args.epochs,
        lr=args.lr,
        warmup_steps=args.warmup_steps,
        dropout_rate=args.dropout,
        seed=args.seed,
        vocab_buckets=args.buckets,
        embed_dim=args.embed_dim,
        out_dim=args.out_dim,
    )
    config.validate()
    return config


def cmd_gen_synth(args: argparse.Namespace) -> int:
    bench = generate_benchmark(
        seed=args.seed,
        n_questions=args.questions,
        n_passages=args.passages,
        n_topics=args.topics,
    )
    corpus_path, dataset_path = write_benchmark(bench, args.out_dir)
    manifest = RunManifest(
        command="gen-synth",
        seed=args.seed,
        config={
            "passages": args.passages,
            "questions": args.questions,
            "topics": args.topics,
        },
        inputs={},
        outputs=[str(corpus_path), str(dataset_path)],
    )
    write_manifest(manifest, Path(args.out_dir) / "manifest.json")
    print(f"wrote {len(bench.passages)} passages and {len(bench.records)} questions")
    return EXIT_OK


def cmd_stats(args: argparse.Namespace) -> int:
    records = ingest_dataset(args.dataset, format=args.format)
    stats = compute_stats(records, m_max=args.m_max)
    if not stats.delta_defined:
        print("error: dataset contains no usable questions", file=sys.stderr)
        return EXIT_INPUT
    print(
        f"p1={stats.p1}  p2={stats.p2}  p3={stats.p3}  "
        f"total={stats.total}  delta={100.0 * stats.delta:.1f}%"
    )
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    config = _config_from_args(args)
    records = ingest_dataset(args.dataset, format=args.format)
    on_epoch = None
    if args.log:
        Path(args.log).write_text("", encoding="utf-8")
        on_epoch = lambda entry: append_epoch_log(args.log, entry)
    params, history = train(records, config, on_epoch=on_epoch)
    save_params(params, args.out)
    outputs = [args.out] + ([args.log] if args.log else [])
    manifest = RunManifest(
        command="train",
        seed=config.seed,
        config=asdict(config),
        inputs={args.dataset: _sha256_file(args.dataset)},
        outputs=outputs,
    )
    write_manifest(manifest, f"{args.out}.manifest.json")
    final = history[-1]["mean_loss"] if history else float("nan")
    print(f"trained {config.epochs} epochs, final mean loss {final:.6f}")
    return EXIT_OK


def cmd_encode(args: argparse.Namespace) -> int:
    params = load_params(args.checkpoint)
    passages = load_corpus(args.corpus)
    index = encode_corpus(params, passages, shard_size=args.shard_size)
    save_index(index, args.out)
    manifest = RunManifest(
        command="encode",
        seed=None,
        config={"shard_size": args.shard_size},
        inputs={
            args.checkpoint: _sha256_file(args.checkpoint),
            args.corpus: _sha256_file(args.corpus),
        },
        outputs=[args.out],
    )
    write_manifest(manifest, f"{args.out}.manifest.json")
    print(f"encoded {index.count} passages (dim {index.dim})")
    return EXIT_OK


def _lexical_for(args: argparse.Namespace, passages) -> "LexicalIndex":
    cache = getattr(args, "lexical_cache", None)
    if cache and Path(cache).exists():
        return load_lexical(cache)
    index = build_lexical_index(passages)
    if cache:
        save_lexical(index, cache)
    return index


def cmd_retrieve(args: argparse.Namespace) -> int:
    ks = _parse_ks(args.k)
    k_max = max(ks)
    questions = ingest_dataset(args.dataset, format=args.format)
    passages = load_corpus(args.corpus)
    inputs = {
        args.dataset: _sha256_file(args.dataset),
        args.corpus: _sha256_file(args.corpus),
    }

    if args.retriever in ("dense", "hybrid"):
        if not args.checkpoint or not args.index:
            raise FlagCombinationError(
                f"--retriever {args.retriever} requires --checkpoint and --index"
            )
        params = load_params(args.checkpoint)
        dense = load_index(args.index)
        inputs[args.checkpoint] = _sha256_file(args.checkpoint)
        inputs[args.index] = _sha256_file(args.index)
    if args.retriever == "dense":
        retriever = make_dense_retriever(params, dense, k_max)
    elif args.retriever == "bm25":
        retriever = make_bm25_retriever(_lexical_for(args, passages), k_max)
    else:
        retriever = make_hybrid_retriever(
            _lexical_for(args, passages), dense, params, k_max, args.hybrid_weight
        )

    with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
        for question in questions:
            result = retriever(question)
            fh.write(
                json.dumps(
                    {"question_id": question.id, "ranked": result.ranked},
                    sort_keys=True,
                )
                + "\n"
            )
    manifest = RunManifest(
        command="retrieve",
        seed=None,
        config={
            "retriever": args.retriever,
            "k": ks,
            "hybrid_weight": args.hybrid_weight,
        },
        inputs=inputs,
        outputs=[args.out],
    )
    write_manifest(manifest, f"{args.out}.manifest.json")
    print(f"retrieved top-{k_max} for {len(questions)} questions")
    return EXIT_OK


def _load_results(path) -> dict[int, SearchResult]:
    results: dict[int, SearchResult] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetParseError(f"{path}:{lineno}: {exc}") from exc
            ranked = [(int(pid), float(score)) for pid, score in obj["ranked"]]
            results[int(obj["question_id"])] = SearchResult(ranked=ranked)
    return results


def cmd_eval(args: argparse.Namespace) -> int:
    ks = _parse_ks(args.k)
    questions = ingest_dataset(args.dataset, format=args.format)
    passages = load_corpus(args.corpus)
    results = _load_results(args.results)
    missing = [q.id for q in questions if q.id not in results]
    if missing:
        raise DatasetParseError(
            f"{args.results}: no results for question ids {missing[:5]}"
        )
    corpus_by_id = {p.id: p for p in passages}
    report = evaluate(
        questions,
        lambda q: results[q.id],
        corpus_by_id,
        ks=ks,
        include_title=args.include_title,
    )
    for k in ks:
        print(f"top-{k} accuracy: {report.accuracy[k]:.1f}")
    outputs = []
    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(
                {str(k): report.accuracy[k] for k in ks}, fh, sort_keys=True, indent=2
            )
            fh.write("\n")
        outputs.append(args.out)
    if args.ranks_out:
        with open(args.ranks_out, "w", encoding="utf-8", newline="\n") as fh:
            for qid, rank in report.hit_ranks:
                fh.write(f"{qid}\t{rank if rank is not None else '-'}\n")
        outputs.append(args.ranks_out)
    if outputs:
        manifest = RunManifest(
            command="eval",
            seed=None,
            config={"k": ks, "include_title": args.include_title},
            inputs={
                args.results: _sha256_file(args.results),
                args.dataset: _sha256_file(args.dataset),
                args.corpus: _sha256_file(args.corpus),
            },
            outputs=outputs,
        )
        write_manifest(manifest, f"{outputs[0]}.manifest.json")
    return EXIT_OK


def cmd_ablate(args: argparse.Namespace) -> int:
    ks = _parse_ks(args.k)
    m_values = _parse_ms(args.m)
    if args.loss == "nll" and m_values != [1]:
        raise FlagCombinationError("--loss nll requires --m 1")
    base_args = argparse.Namespace(**vars(args))
    base_args.max_positives = max(m_values)
    config = _config_from_args(base_args)
    records = ingest_dataset(args.dataset, format=args.format)
    corpus = load_corpus(args.corpus)
    rows = ablation(records, corpus, config, m_values=m_values, ks=ks)

    header = "m".ljust(4) + "".join(f"top-{k}".ljust(12) for k in ks)
    print(header)
    for row in rows:
        cells = "".join(f"{row.accuracy[k]:.1f}".ljust(12) for k in ks)
        print(f"{row.max_positives:<4}{cells}")
    if args.out:
        table = [
            {"m": row.max_positives, "accuracy": {str(k): row.accuracy[k] for k in ks}}
            for row in rows
        ]
        with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(table, fh, sort_keys=True, indent=2)
            fh.write("\n")
        manifest = RunManifest(
            command="ablate",
            seed=config.seed,
            config={**asdict(config), "m_values": m_values, "k": ks},
            inputs={
                args.dataset: _sha256_file(args.dataset),
                args.corpus: _sha256_file(args.corpus),
            },
            outputs=[args.out],
        )
        write_manifest(manifest, f"{args.out}.manifest.json")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mpr",
        description="Desk-scale dense passage retrieval with multi-positive training",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="generate a synthetic benchmark")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--passages", type=int, default=2000)
    p.add_argument("--questions", type=int, default=200)
    p.add_argument("--topics", type=int, default=40)
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("stats", help="positive-count statistics of a dataset")
    p.add_argument("dataset")
    p.add_argument("--format", choices=KNOWN_FORMATS, default="jsonl")
    p.add_argument("--m-max", type=int, default=3)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("train", help="train a dual encoder")
    p.add_argument("dataset")
    p.add_argument("--format", choices=KNOWN_FORMATS, default="jsonl")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--log", default=None, help="per-epoch JSONL log path")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("encode", help="encode a corpus into a dense index")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--shard-size", type=int, default=1024)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("retrieve", help="run retrieval for every question")
    p.add_argument("--dataset", required=True)
    p.add_argument("--format", choices=KNOWN_FORMATS, default="jsonl")
    p.add_argument("--corpus", required=True)
    p.add_argument("--retriever", choices=("dense", "bm25", "hybrid"), default="dense")
    p.add_argument("--k", default="20,100")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--index", default=None)
    p.add_argument("--lexical-cache", default=None)
    p.add_argument("--hybrid-weight", type=float, default=DEFAULT_HYBRID_WEIGHT)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("eval", help="score retrieval results")
    p.add_argument("--results", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--format", choices=KNOWN_FORMATS, default="jsonl")
    p.add_argument("--corpus", required=True)
    p.add_argument("--k", default="20,100")
    p.add_argument("--out", default=None, help="report JSON path")
    p.add_argument("--ranks-out", default=None, help="per-question rank TSV path")
    p.add_argument("--include-title", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="sweep the positive-count cap")
    p.add_argument("dataset")
    p.add_argument("--format", choices=KNOWN_FORMATS, default="jsonl")
    p.add_argument("--corpus", required=True)
    p.add_argument("--m", default="1,2,3")
    p.add_argument("--k", default="20,100")
    p.add_argument("--out", default=None, help="table JSON path")
    _add_train_flags(p)
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FlagCombinationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_FLAGS
    except InsufficientDataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INSUFFICIENT_DATA
    except _INPUT_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


def entry_point() -> None:
    raise SystemExit(main())


if __name__ == "__main__":
    entry_point()
