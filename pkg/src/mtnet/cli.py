"""Command-line entry point: ``mtnet <command> [options]``.

Exit codes: 0 success, 1 operational failure, 2 usage error, 3 failed
verification or gradient check.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint, restore_model, restore_rng, save_checkpoint
from .config import PROFILES, ConfigError, config_from_dict, load_config
from .data import (BatchError, LogFormatError, OrderingError, Vocabulary, make_batches,
                   prepare_dataset, read_sessions, tokenize, unroll_pairs, write_sessions)

log = logging.getLogger("mtnet")

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_CHECK = 0, 1, 2, 3
LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


def _setup_logging() -> None:
    level = os.environ.get("MTN_LOG", "error").lower()
    logging.basicConfig(level=LOG_LEVELS.get(level, logging.ERROR), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    if level not in LOG_LEVELS:
        log.error("MTN_LOG=%r is not one of %s; using 'error'", level, sorted(LOG_LEVELS))


def _pairs(sessions, n_max: int) -> list:
    out, skipped = [], 0
    for s in sessions:
        if len(s.queries) < 2:
            continue
        for ex in unroll_pairs(s):
            if any(len(q) > n_max for q in ex.source) or len(ex.target) > n_max:
                skipped += 1
                continue
            out.append(ex)
    if skipped:
        log.warning("skipped %d pairs with queries longer than %d tokens", skipped, n_max)
    return out


def _read_split(data_dir: Path, name: str) -> list:
    path = data_dir / f"{name}.txt"
    if not path.exists():
        raise FileNotFoundError(f"missing split file {path}")
    return read_sessions(path)


def _model_from_checkpoint(path):
    ckpt = load_checkpoint(path)
    tokens = ckpt.meta.get("vocab")
    if tokens is None:
        raise CheckpointError(f"{path} carries no vocabulary")
    return restore_model(ckpt), Vocabulary(tokens), ckpt


# ---------------------------------------------------------------------------
# commands


def cmd_prepare(args) -> int:
    stats = prepare_dataset(args.input, args.out, gap_minutes=args.gap_minutes, min_len=args.min_len,
                            max_len=args.max_len, max_query_len=args.max_query_len,
                            min_count=args.min_count, seed=args.seed)
    print(" ".join(f"{k}={v}" for k, v in stats.items()))
    return EXIT_OK


def cmd_synth(args) -> int:
    from .synthetic import next_query_sessions, synthetic_vocab

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    vocab = synthetic_vocab(args.vocab)
    parts = {"train": args.sessions, "valid": max(args.sessions // 4, 1), "test": max(args.sessions // 4, 1)}
    for i, (name, n) in enumerate(parts.items()):
        write_sessions(next_query_sessions(n, args.vocab, seed=args.seed + i), out / f"{name}.txt")
    vocab.save(out / "vocab.tsv")
    print(" ".join(f"{k}={v}" for k, v in parts.items()) + f" vocab={len(vocab)}")
    return EXIT_OK


def _train_config(args, vocab_size: int):
    if args.config:
        config = load_config(args.config, args.profile)
    else:
        config = config_from_dict({}, args.profile)
    overrides = {"vocab_size": vocab_size}
    for key in ("seed", "epochs", "architecture"):
        value = getattr(args, key)
        if value is not None:
            overrides[key] = value
    return dataclasses.replace(config, **overrides).validate()


def cmd_train(args) -> int:
    from .mtn import build_model
    from .plotting import plot_training
    from .training import OptimizerState, train_loop

    data_dir = Path(args.data)
    vocab = Vocabulary.load(data_dir / "vocab.tsv")
    optimizer = rng = None
    if args.resume:
        model, vocab, ckpt = _model_from_checkpoint(args.resume)
        config = model.config
        if args.epochs is not None:
            config = dataclasses.replace(config, epochs=args.epochs)
        optimizer = OptimizerState.from_checkpoint(ckpt)
        rng = restore_rng(ckpt)
    else:
        config = _train_config(args, len(vocab))
        model = build_model(config, np.random.default_rng(config.seed))
    n_max = config.max_query_len
    train = _pairs(_read_split(data_dir, "train"), n_max)
    if not train:
        raise ValueError(f"no training pairs in {data_dir / 'train.txt'}")
    valid_path = data_dir / "valid.txt"
    valid = _pairs(read_sessions(valid_path), n_max) if valid_path.exists() else []
    batches = make_batches(train, vocab, n_max, config.batch_size, seed=config.seed)
    valid_batches = make_batches(valid, vocab, n_max, config.batch_size, seed=None) if valid else None
    log.info("%d training pairs in %d batches, %d validation pairs", len(train), len(batches), len(valid))

    result = train_loop(model, batches, config=config, valid_batches=valid_batches, lr=args.lr,
                        max_steps=args.max_steps, rng=rng, optimizer=optimizer)
    for rec in result.epochs:
        print(" ".join(f"{k}={v:.6f}" if isinstance(v, float) else f"{k}={v}" for k, v in rec.items()))

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out / "last.ckpt", optimizer=result.optimizer, rng=result.rng,
                    vocab_tokens=vocab.tokens)
    if result.best_params is not None:
        from .training import load_params

        load_params(model, result.best_params)
    save_checkpoint(model, out / "model.ckpt", vocab_tokens=vocab.tokens,
                    extra={"best_epoch": result.best_epoch, "best_valid": result.best_valid
                           if np.isfinite(result.best_valid) else None})
    with open(out / "train_log.tsv", "w", encoding="utf-8") as fh:
        fh.write("step\tloss\tlr\n")
        for i, (loss, lr) in enumerate(zip(result.losses, result.rates), 1):
            fh.write(f"{i}\t{loss:.10g}\t{lr:.10g}\n")
    if not args.no_plot:
        plot_training(result.losses, result.rates, result.epochs, out / "training.png")
    print(f"steps={result.steps} final_loss={result.losses[-1]:.6f} checkpoint={out / 'model.ckpt'}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .evaluation import decode_corpus, format_metrics, metrics
    from .plotting import plot_metrics

    model, vocab, _ = _model_from_checkpoint(args.checkpoint)
    n_max = model.config.max_query_len
    pairs = _pairs(_read_split(Path(args.data), args.split), n_max)
    if args.limit:
        pairs = pairs[:args.limit]
    if not pairs:
        raise ValueError(f"no evaluation pairs in split {args.split!r}")
    candidates = decode_corpus(model, pairs, vocab, n_max, width=args.beam, max_len=args.max_len)
    references = [vocab.decode(vocab.encode(p.target)) for p in pairs]  # OOV -> <unk>
    values = metrics(candidates, references, smooth=args.smooth)
    print(format_metrics(values))
    if args.json:
        print(format_metrics(values, as_json=True))
    if not args.no_plot:
        out = Path(args.out) if args.out else Path(args.checkpoint).parent
        path = plot_metrics(values, out / f"metrics_{args.split}.png", title=f"{args.split}: {len(pairs)} pairs")
        log.info("wrote %s", path)
    return EXIT_OK


def _suggest(model, vocab, session, top_k: int, beam: int, max_len: int) -> list:
    from .evaluation import beam_search, context_batch

    ctx = context_batch(session, vocab, model.config.max_query_len)
    hyps = beam_search(model, ctx, width=max(beam, top_k), max_len=max_len)
    return [(" ".join(vocab.decode(h.output)), h.score) for h in hyps[:top_k]]


def _print_suggestions(suggestions, out) -> None:
    for rank, (text, score) in enumerate(suggestions, 1):
        print(f"{rank}\t{text}\t{score:.4f}", file=out)
    out.flush()


def cmd_suggest(args) -> int:
    model, vocab, _ = _model_from_checkpoint(args.checkpoint)
    n_max = model.config.max_query_len
    keep = max(model.config.max_session_len - 1, 1)

    def clip(tokens):
        if len(tokens) > n_max:
            log.warning("query truncated to %d tokens", n_max)
        return tokens[:n_max]

    if not args.interactive:
        session = [clip(tokenize(q)) for q in args.queries if tokenize(q)]
        if not session:
            raise ValueError("give at least one non-empty query, or use --interactive")
        _print_suggestions(_suggest(model, vocab, session[-keep:], args.top_k, args.beam, args.max_len), sys.stdout)
        return EXIT_OK

    session = [clip(tokenize(q)) for q in args.queries if tokenize(q)]
    for line in sys.stdin:
        text = line.strip()
        if not text:
            continue
        if text == ":quit":
            break
        if text == ":reset":
            session = []
            print("(session cleared)", flush=True)
            continue
        session.append(clip(tokenize(text)))
        session = session[-keep:]
        _print_suggestions(_suggest(model, vocab, session, args.top_k, args.beam, args.max_len), sys.stdout)
    return EXIT_OK


def cmd_verify(args) -> int:
    from .oracle import run_verification_suite
    from .plotting import plot_verification

    report = run_verification_suite(seed=args.seed, trials=args.trials, fault=args.fault)
    sys.stdout.write(report.text())
    for tag, err in report.worst.items():
        log.info("%s worst=%.3e tol=%.0e", tag, err, report.tolerances[tag])
    if not args.no_plot:
        plot_verification(report.errors, report.tolerances, Path(args.out) / "verify.png")
    return EXIT_OK if report.passed else EXIT_CHECK


def cmd_gradcheck(args) -> int:
    from .gradcheck import gradient_sweep

    modes = ["concat", "weighted"] if args.mode == "both" else [args.mode]
    ok = True
    for mode in modes:
        for g in gradient_sweep(seed=args.seed, coords_per_group=args.coords, attention_mode=mode,
                                architecture=args.architecture):
            passed = g.rel_err < args.tol
            ok = ok and passed
            print(f"GRAD mode={mode} {g.name} shape={g.shape[0]}x{g.shape[1]} coords={g.coords} "
                  f"rel_err={g.rel_err:.3e} {'PASS' if passed else 'FAIL'}")
    print(f"SUITE {'PASS' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_CHECK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mtnet", description="Multiresolution Transformer query suggestion.")
    sub = p.add_subparsers(dest="command", metavar="command")
    sub.required = True

    s = sub.add_parser("prepare", help="query log -> sessions and vocabulary")
    s.add_argument("--input", required=True, help="tab-separated log: anon_id, query, timestamp")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--gap-minutes", type=float, default=30.0)
    s.add_argument("--min-len", type=int, default=3)
    s.add_argument("--max-len", type=int, default=5)
    s.add_argument("--max-query-len", type=int, default=10)
    s.add_argument("--min-count", type=int, default=8)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_prepare)

    s = sub.add_parser("synth", help="write a synthetic next-query dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--sessions", type=int, default=32)
    s.add_argument("--vocab", type=int, default=20)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train a model on a prepared dataset")
    s.add_argument("--data", required=True, help="directory written by prepare or synth")
    s.add_argument("--out", required=True, help="directory for checkpoints, log and figure")
    s.add_argument("--config", help="JSON config file")
    s.add_argument("--profile", choices=sorted(PROFILES), default="full")
    s.add_argument("--architecture", choices=["mtn", "transformer"])
    s.add_argument("--seed", type=int)
    s.add_argument("--epochs", type=int)
    s.add_argument("--max-steps", type=int)
    s.add_argument("--lr", type=float, help="constant learning rate instead of the warmup schedule")
    s.add_argument("--resume", help="continue from a last.ckpt")
    s.add_argument("--no-plot", action="store_true")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("evaluate", help="decode a split and report n-gram precision and BLEU")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", default="test")
    s.add_argument("--beam", type=int, default=1, help="beam width (1 = greedy)")
    s.add_argument("--max-len", type=int, default=12)
    s.add_argument("--limit", type=int, default=0)
    s.add_argument("--smooth", action="store_true", help="add-one smoothing for orders above one")
    s.add_argument("--json", action="store_true", help="also print the metrics as JSON")
    s.add_argument("--out", help="figure directory (default: next to the checkpoint)")
    s.add_argument("--no-plot", action="store_true")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("suggest", help="suggest next queries for a session")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("queries", nargs="*", help="session queries, oldest first")
    s.add_argument("--interactive", action="store_true",
                   help="read one query per line; ':reset' clears the session, ':quit' exits")
    s.add_argument("--top-k", type=int, default=3)
    s.add_argument("--beam", type=int, default=5)
    s.add_argument("--max-len", type=int, default=12)
    s.set_defaults(func=cmd_suggest)

    s = sub.add_parser("verify", help="check the unrolled dynamics against the modular model")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--trials", type=int, default=100)
    s.add_argument("--fault", choices=["PROP1", "PROP2", "PROP3", "PROP4"], help=argparse.SUPPRESS)
    s.add_argument("--out", default=".", help="directory for verify.png")
    s.add_argument("--no-plot", action="store_true")
    s.set_defaults(func=cmd_verify)

    s = sub.add_parser("gradcheck", help="finite-difference check of a toy model's gradients")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--coords", type=int, default=4, help="sampled coordinates per parameter tensor")
    s.add_argument("--mode", choices=["concat", "weighted", "both"], default="both")
    s.add_argument("--architecture", choices=["mtn", "transformer"], default="mtn")
    s.add_argument("--tol", type=float, default=1e-4)
    s.set_defaults(func=cmd_gradcheck)
    return p


OPERATIONAL_ERRORS = (OSError, ConfigError, CheckpointError, LogFormatError, OrderingError, BatchError,
                      ValueError, ArithmeticError, RuntimeError)


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    try:
        return args.func(args)
    except OPERATIONAL_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except KeyboardInterrupt:
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
