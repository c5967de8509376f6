"""``rbe`` command line: train, encode, build, query, analyze, bench.

Every subcommand accepts ``--config FILE``, a flat ``key = value`` file whose
keys are the long option names (``items-per-thread`` or
``items_per_thread``). Command-line options override the file.

Exit status: 0 on success, 1 on runtime failure, 2 on usage or config errors.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import logging
import sys
import time
from importlib import resources
from pathlib import Path

import numpy as np

log = logging.getLogger("rbe")

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2


class UsageError(Exception):
    """Bad arguments or configuration; maps to exit status 2."""


def _bundled(name: str) -> Path:
    return Path(str(resources.files("rbe") / "data" / name))


def _positive_int(text: str) -> int:
    value = int(float(text)) if "e" in text.lower() else int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text!r}")
    return value


def _nonneg_int(text: str) -> int:
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"expected a nonnegative integer, got {text!r}")
    return value


def _bool(text: str) -> bool:
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


# -- parser -------------------------------------------------------------------


def _geometry_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("scan geometry")
    g.add_argument("--threads-per-block", type=_positive_int, default=256)
    g.add_argument("--items-per-thread", type=_positive_int, default=256)
    g.add_argument("--queue-length", type=_positive_int, default=1)
    g.add_argument("--blocks", type=_positive_int, default=None, help="default: just enough to cover each partition")


def build_parser() -> argparse.ArgumentParser:
    from rbe.model import ESTIMATORS

    parser = argparse.ArgumentParser(prog="rbe", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def command(name, help_):
        p = sub.add_parser(name, help=help_, description=help_)
        p.add_argument("--config", type=Path, help="flat key = value file with option defaults")
        return p

    p = command("train", "train a two-tower model on query/keyword click pairs")
    p.add_argument("--data", type=Path, help="TSV of query<TAB>keyword (default: bundled synthetic set)")
    p.add_argument("--valid", type=Path, help="validation TSV (default: bundled, or a split of --data)")
    p.add_argument("--test", type=Path, help="labeled TSV query<TAB>keyword<TAB>0|1 for AUC")
    p.add_argument("--valid-fraction", type=float, default=0.1)
    p.add_argument("--out", type=Path, required=True, help="checkpoint path")
    p.add_argument("--history", type=Path, help="metrics JSONL (default: <out>.metrics.jsonl)")
    p.add_argument("--m", type=_positive_int, default=288, help="encoder width")
    p.add_argument("--n", type=_positive_int, default=64, help="embedding dim")
    p.add_argument("--u", type=_nonneg_int, default=1, help="query residual steps")
    p.add_argument("--v", type=_nonneg_int, default=1, help="keyword residual steps")
    p.add_argument("--hash-dim", type=_positive_int, default=2**15)
    p.add_argument("--gamma", type=float, default=10.0)
    p.add_argument("--estimator", choices=ESTIMATORS, default="straight_through_variant")
    p.add_argument("--alpha-growth", type=float, default=1.1)
    p.add_argument("--epochs", type=_nonneg_int, default=20)
    p.add_argument("--learning-rate", type=float, default=0.5)
    p.add_argument("--lr-decay", type=float, default=0.5)
    p.add_argument("--lr-step", type=_positive_int, default=10)
    p.add_argument("--batch-size", type=_positive_int, default=64)
    p.add_argument("--group-size", type=_positive_int, default=11)
    p.add_argument("--patience", type=_positive_int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--residual-weights", type=_bool, default=True)
    p.add_argument("--bias", type=_bool, default=True)
    p.add_argument("--binarized", type=_bool, default=True)

    p = command("encode", "embed one keyword (or query) per line into an embeddings file")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--input", type=Path, required=True, help="lines of text, or id<TAB>text")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--side", choices=("keyword", "query"), default="keyword")
    p.add_argument("--batch", type=_positive_int, default=4096, help="texts per forward pass")

    p = command("build", "build a partitioned index from an embeddings file")
    p.add_argument("--embeddings", type=Path, required=True)
    p.add_argument("--partitions", type=_positive_int, default=1)
    p.add_argument("--out", type=Path, required=True)

    p = command("query", "retrieve the top N keywords for query texts")
    p.add_argument("--index", type=Path, required=True)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--text", action="append", default=[], help="query text (repeatable)")
    p.add_argument("--batch", type=Path, help="file with one query per line")
    p.add_argument("--top", type=_positive_int, default=1000, help="N, results per query")
    p.add_argument("--workers", type=_positive_int, default=None)
    p.add_argument("--out", type=Path, help="results TSV (default: stdout)")
    _geometry_args(p)

    p = command("analyze", "exact miss probabilities of the length-limited selection as CSV")
    p.add_argument("--candidates", "-C", type=_positive_int, default=10**9)
    p.add_argument("--relevant", "-N", type=_positive_int, default=1000)
    p.add_argument("--items-per-thread", "-I", type=_positive_int, default=256)
    p.add_argument("--max-l", type=_nonneg_int, default=2)
    p.add_argument("--simulate", action="store_true", help="add Monte Carlo columns")
    p.add_argument("--trials", type=_positive_int, default=100_000)
    p.add_argument("--queue-length", type=_positive_int, default=1, help="simulation queue length")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, help="CSV path (default: stdout)")

    p = command("bench", "binary vs float32 scan throughput")
    p.add_argument("--index", type=Path, help="benchmark the planes of this index instead of random ones")
    p.add_argument("--keywords", type=_nonneg_int, default=10_000_000)
    p.add_argument("--dim", type=_positive_int, default=64)
    p.add_argument("--query-planes", type=_positive_int, default=2)
    p.add_argument("--keyword-planes", type=_positive_int, default=2)
    p.add_argument("--mode", choices=("binary", "float", "both"), default="both")
    p.add_argument("--backend", choices=("compiled", "python", "both"), default=None)
    p.add_argument("--repeats", type=_positive_int, default=5)
    p.add_argument("--seed", type=int, default=0)
    return parser


# -- config file ----------------------------------------------------------------


def _subparser(parser: argparse.ArgumentParser, name: str) -> argparse.ArgumentParser:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[name]
    raise KeyError(name)


def load_config(path: Path) -> dict[str, str]:
    """Read a flat ``key = value`` file (``#`` comments, no sections)."""
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    cp = configparser.ConfigParser(interpolation=None, delimiters=("=", ":"), comment_prefixes=("#", ";"))
    try:
        cp.read_string("[rbe]\n" + path.read_text(encoding="utf-8"), source=str(path))
    except configparser.Error as exc:
        raise UsageError(f"config {path}: {exc}") from exc
    return {key.replace("-", "_"): value for key, value in cp["rbe"].items()}


def apply_config(sub: argparse.ArgumentParser, values: dict[str, str]) -> None:
    """Convert config values with the option's own type and install them as defaults."""
    actions = {a.dest: a for a in sub._actions if a.dest not in ("help", "config")}
    defaults = {}
    for key, raw in values.items():
        action = actions.get(key)
        if action is None:
            raise UsageError(f"config: unknown key {key!r} for '{sub.prog}'")
        try:
            if isinstance(action, argparse._StoreTrueAction):
                value = _bool(raw)
            elif isinstance(action, argparse._AppendAction):
                value = [raw]
            else:
                value = action.type(raw) if action.type else raw
        except (argparse.ArgumentTypeError, ValueError) as exc:
            raise UsageError(f"config: key {key!r}: {exc}") from exc
        if action.choices is not None and value not in action.choices:
            raise UsageError(f"config: key {key!r}: {value!r} not in {sorted(action.choices)}")
        defaults[key] = value
    sub.set_defaults(**defaults)
    for action in sub._actions:
        if action.dest in defaults:
            action.required = False


def _config_path(argv: list[str]) -> tuple[str, Path] | None:
    """Subcommand and ``--config`` value, found before the full parse.

    Config values must be installed first so options marked required can
    come from the file.
    """
    command = next((a for a in argv if a in COMMANDS), None)
    if command is None:
        return None
    rest = argv[argv.index(command) + 1 :]
    for i, arg in enumerate(rest):
        if arg == "--config" and i + 1 < len(rest):
            return command, Path(rest[i + 1])
        if arg.startswith("--config="):
            return command, Path(arg.split("=", 1)[1])
    return None


def parse_args(argv: list[str] | None) -> argparse.Namespace:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    found = _config_path(argv)
    if found is not None:
        command, path = found
        apply_config(_subparser(parser, command), load_config(path))
    return parser.parse_args(argv)


# -- commands -------------------------------------------------------------------


def _require(path: Path | None, what: str) -> Path:
    if path is None or not Path(path).is_file():
        raise FileNotFoundError(f"{what} not found: {path}")
    return Path(path)


def cmd_train(args) -> int:
    from rbe import trainer

    if args.data is None:
        train_pairs = trainer.read_pairs(_bundled("synthetic_train.tsv"))
        valid_pairs = trainer.read_pairs(_require(args.valid, "validation file")) if args.valid else (
            trainer.read_pairs(_bundled("synthetic_valid.tsv"))
        )
        test_path = args.test or _bundled("synthetic_test.tsv")
    else:
        data = trainer.read_pairs(_require(args.data, "training file"))
        if args.valid is not None:
            train_pairs, valid_pairs = data, trainer.read_pairs(_require(args.valid, "validation file"))
        else:
            if not 0.0 < args.valid_fraction < 1.0:
                raise UsageError("valid-fraction must be in (0, 1)")
            train_pairs, valid_pairs = trainer.split_pairs(data, args.valid_fraction, args.seed)
        test_path = args.test
    test_pairs, test_labels = [], []
    if test_path is not None:
        test_pairs, test_labels = trainer.read_labeled_pairs(_require(test_path, "test file"))
    try:
        config = trainer.TrainConfig(
            m=args.m,
            n=args.n,
            u=args.u,
            v=args.v,
            hash_dim=args.hash_dim,
            gamma=args.gamma,
            epochs=args.epochs,
            learning_rate=args.learning_rate,
            lr_decay=args.lr_decay,
            lr_step=args.lr_step,
            batch_size=args.batch_size,
            group_size=args.group_size,
            seed=args.seed,
            estimator=args.estimator,
            alpha_growth=args.alpha_growth,
            use_residual_weights=args.residual_weights,
            use_bias=args.bias,
            binarized=args.binarized,
            patience=args.patience,
        )
    except ValueError as exc:
        raise UsageError(f"config: {exc}") from exc
    if len(train_pairs) < config.group_size:
        raise UsageError(f"need at least group-size={config.group_size} training pairs, got {len(train_pairs)}")
    from rbe.model import save_checkpoint

    dataset = trainer.Dataset(train_pairs, valid_pairs, test_pairs, test_labels)
    result = trainer.train(dataset, config)
    history_path = args.history or args.out.with_name(args.out.name + ".metrics.jsonl")
    save_checkpoint(result.params, args.out)
    trainer.write_history(result.history, history_path)
    best = result.final
    print(
        f"checkpoint {args.out}: {config.u + 1} query planes, {config.v + 1} keyword planes, dim {config.n}; "
        f"best epoch {best.epoch} valid_loss {best.valid_loss:.4f} auc {best.auc:.4f}"
    )
    print(f"metrics {history_path}: {len(result.history)} records")
    return EXIT_OK


def _read_texts(path: Path) -> tuple[list[int], list[str], int]:
    """Lines as ``text`` (id = 0-based line number) or ``id<TAB>text``; blank lines skipped."""
    from rbe.features import normalize

    ids, texts, skipped = [], [], 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh):
            line = line.rstrip("\n")
            if "\t" in line:
                head, _, text = line.partition("\t")
                try:
                    kid = int(head)
                except ValueError as exc:
                    raise ValueError(f"{path}:{lineno + 1}: id {head!r} is not an integer") from exc
            else:
                kid, text = lineno, line
            if not normalize(text):
                log.warning("%s:%d: empty text, skipped", path, lineno + 1)
                skipped += 1
                continue
            ids.append(kid)
            texts.append(text)
    return ids, texts, skipped


def cmd_encode(args) -> int:
    from rbe.engine import write_embeddings
    from rbe.model import forward, load_checkpoint

    params = load_checkpoint(_require(args.model, "model"))
    ids, texts, skipped = _read_texts(_require(args.input, "input file"))
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate keyword ids in input")
    side = args.side
    steps = params.steps_for(side)
    planes = np.empty((steps + 1, len(texts), (params.n + 63) // 64), dtype=np.uint64)
    mags = np.empty(len(texts), dtype=np.float32)
    for start in range(0, len(texts), args.batch):
        chunk = texts[start : start + args.batch]
        embs = forward(params, side, params.featurizer.batch(chunk)).embeddings()
        for offset, emb in enumerate(embs):
            planes[:, start + offset, :] = emb.word_matrix()
            mags[start + offset] = emb.magnitude
    write_embeddings(args.out, ids, planes, params.n, mags, params.use_residual_weights)
    print(f"encoded {len(texts)} lines ({side} side, {steps + 1} planes) to {args.out}; skipped {skipped}")
    return EXIT_OK


def cmd_build(args) -> int:
    from rbe.engine import build_index_arrays, read_embeddings, save_index

    emb = read_embeddings(_require(args.embeddings, "embeddings file"))
    if emb.ids.size == 0:
        raise ValueError("embeddings file holds no keywords")
    index = build_index_arrays(emb.ids, emb.planes, emb.dim, args.partitions, emb.magnitudes, emb.use_residual_weights)
    save_index(index, args.out)
    print(
        f"index {args.out}: {index.count} keywords, {len(index.partitions)} partitions, "
        f"{index.bytes_per_keyword} bytes/keyword plane payload, {index.plane_payload_bytes} bytes total"
    )
    return EXIT_OK


def cmd_query(args) -> int:
    from rbe.engine import ScanGeometry, load_index, search
    from rbe.model import embed_texts, load_checkpoint

    texts = list(args.text)
    if args.batch is not None:
        with open(_require(args.batch, "batch file"), encoding="utf-8") as fh:
            texts.extend(line.rstrip("\n") for line in fh if line.strip())
    if not texts:
        raise UsageError("no queries: give --text or --batch")
    index = load_index(_require(args.index, "index"))
    params = load_checkpoint(_require(args.model, "model"))
    if params.n != index.dim:
        raise ValueError(f"model dim {params.n} does not match index dim {index.dim}")
    if params.use_residual_weights != index.use_residual_weights:
        raise ValueError("model and index disagree on residual weights")
    try:
        geometry = ScanGeometry(args.threads_per_block, args.items_per_thread, args.queue_length, args.blocks)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    queries = embed_texts(params, "query", texts)
    out = open(args.out, "w", encoding="utf-8", newline="") if args.out else sys.stdout
    latencies = []
    try:
        out.write("query\trank\tid\tscore\n")
        for qi, q in enumerate(queries):
            t0 = time.perf_counter()
            result = search(q, index, geometry, args.top, workers=args.workers)
            latencies.append(time.perf_counter() - t0)
            for rank, hit in enumerate(result.entries, 1):
                out.write(f"{qi}\t{rank}\t{hit.id}\t{hit.score!r}\n")
    finally:
        if out is not sys.stdout:
            out.close()
    ms = np.asarray(latencies) * 1e3
    print(
        f"{len(ms)} queries over {index.count} keywords: mean {ms.mean():.3f} ms, p99 {np.percentile(ms, 99):.3f} ms",
        file=sys.stderr,
    )
    return EXIT_OK


def cmd_analyze(args) -> int:
    from rbe import analysis

    C, N, I = args.candidates, args.relevant, args.items_per_thread
    try:
        analysis.MissModel(C, N, I)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    rows = analysis.table(C, N, I, args.max_l)
    header = ["l", "p_at_most_exact_pct"]
    sim = None
    if args.simulate:
        sim = analysis.simulate_miss(C, N, I, args.queue_length, args.trials, args.seed)
        header += ["p_at_most_sim_pct", "sim_stderr_pct"]
    out = open(args.out, "w", encoding="utf-8", newline="") if args.out else sys.stdout
    try:
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(header)
        for l, pct in rows:
            row = [l, f"{pct:.6f}"]
            if sim is not None:
                p = sum(v for k, v in sim.items() if k <= l)
                row += [f"{100 * p:.6f}", f"{100 * np.sqrt(p * (1 - p) / args.trials):.6f}"]
            writer.writerow(row)
    finally:
        if out is not sys.stdout:
            out.close()
    return EXIT_OK


def cmd_bench(args) -> int:
    from rbe import bench, kernels
    from rbe.engine import load_index

    rng = np.random.default_rng(args.seed)
    if args.index is not None:
        index = load_index(_require(args.index, "index"))
        parts = [p for p in index.partitions if p.count]
        if not parts:
            raise UsageError("index holds no keywords")
        planes = np.concatenate([p.planes for p in parts], axis=1)
        mags = np.concatenate([p.magnitudes for p in parts])
        dim, weighted = index.dim, index.use_residual_weights
    else:
        if args.keywords == 0:
            raise UsageError("--keywords must be positive")
        dim, weighted = args.dim, True
        planes = bench.random_planes(rng, args.keyword_planes, args.keywords, dim)
        mags = np.ones(args.keywords, dtype=np.float32)
    count = planes.shape[1]
    query = bench.random_planes(rng, args.query_planes, 1, dim)[:, 0, :].copy()
    if args.backend == "both":
        backends = ["compiled", "python"] if kernels.compiled_available() else ["python"]
    else:
        backends = [args.backend or kernels.BACKEND]
    timings = []
    if args.mode in ("binary", "both"):
        for name in backends:
            try:
                timings.append(bench.time_binary(planes, mags, query, dim, weighted, args.repeats, name))
            except ImportError as exc:
                raise UsageError(f"backend {name!r} unavailable: {exc}") from exc
    float_timing = None
    if args.mode in ("float", "both"):
        corpus = bench.random_float_corpus(rng, count, dim)
        qf = rng.standard_normal(dim, dtype=np.float32)
        float_timing = bench.time_float(corpus, qf, args.repeats)
        del corpus
        timings.append(float_timing)
    print("mode\tbackend\tkeywords\tmean_s\tstd_s\tkeywords_per_s")
    for t in timings:
        print(f"{t.mode}\t{t.backend}\t{t.keywords}\t{t.mean:.6f}\t{t.std:.6f}\t{t.throughput:.4g}")
    if float_timing is not None:
        for t in timings:
            if t.mode == "binary":
                ratio, sd = bench.speedup(t, float_timing)
                print(f"# binary[{t.backend}]/float throughput ratio {ratio:.2f} +/- {sd:.2f}")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "encode": cmd_encode,
    "build": cmd_build,
    "query": cmd_query,
    "analyze": cmd_analyze,
    "bench": cmd_bench,
}


def main(argv: list[str] | None = None) -> int:
    try:
        args = parse_args(argv)
    except SystemExit as exc:  # argparse usage errors and --help
        return int(exc.code or 0)
    except FileNotFoundError as exc:
        print(f"rbe: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except UsageError as exc:
        print(f"rbe: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="rbe: %(levelname)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return COMMANDS[args.command](args)
    except (UsageError, FileNotFoundError) as exc:
        print(f"rbe: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, OSError, RuntimeError, MemoryError) as exc:
        print(f"rbe: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
