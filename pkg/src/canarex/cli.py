"""Command-line entry points.

Subcommands: synth | train | attack | eval | sweep | inspect-checkpoint.
Exit codes: 0 success, 1 usage error, 2 partial failure, 3 total failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .attack import (
    AttackConfig,
    AttackTarget,
    continuous_baseline_attack,
    run_attack,
)
from .data import (
    CANARY_INTENTS,
    CANARY_PATTERNS,
    CanarySpec,
    candidate_set,
    canary_tags,
    generate_canary,
    inject_canary,
    load_corpus,
    load_pretrained_embeddings,
    reduce_vocabulary,
    save_examples,
    split_corpus,
    synth_corpus,
)
from .errors import CanarexError
from .experiment import ExperimentConfig, run_experiment
from .metrics import (
    TrialReport,
    aggregate_trials,
    random_baseline,
    summary_to_json,
    write_trials_csv,
)
from .model import ModelConfig
from .training import (
    TrainConfig,
    inspect_checkpoint,
    load_checkpoint,
    save_checkpoint,
    train,
)

logger = logging.getLogger(__name__)

USAGE_EXIT = 1
PARTIAL_EXIT = 2
FAILURE_EXIT = 3


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on usage errors; this toolkit reserves 2 for partial
    failures, so remap to 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(USAGE_EXIT, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="canarex", description=__doc__)
    parser.add_argument("--version", action="version", version=f"canarex {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="info-level logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[], help="generate a synthetic corpus",
                       description="Write a template-filled corpus as JSON lines.")
    p.add_argument("--size", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output .jsonl path")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model, optionally with an injected canary")
    source = p.add_mutually_exclusive_group(required=True)
    source.add_argument("--corpus", help="JSON-lines corpus path")
    source.add_argument("--synth-size", type=int, help="generate a synthetic corpus instead")
    p.add_argument("--synth-seed", type=int, default=0)
    p.add_argument("--val-fraction", type=float, default=0.1)
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--canary-pattern", choices=sorted(CANARY_PATTERNS))
    p.add_argument("--canary-n", type=int, default=4)
    p.add_argument("--canary-r", type=int, default=10)
    p.add_argument("--canary-seed", type=int, default=0)
    p.add_argument("--canary-file", help="inject a previously saved canary JSON")
    p.add_argument("--digit-style", choices=["words", "numerals"], default="words")
    p.add_argument("--defenses", default="", help="comma list from D,ES,CE")
    p.add_argument("--epochs", type=int, default=60)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--patience", type=int, default=20)
    p.add_argument("--embedding-dim", type=int, default=50)
    p.add_argument("--hidden-dim", type=int, default=64)
    p.add_argument("--pretrained", help="pretrained embedding text file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--report", help="write the training report JSON here")
    p.add_argument("--canary-out", help="write the injected canary JSON here")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("attack", help="extract canary tokens from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--pattern", choices=sorted(CANARY_PATTERNS), required=True)
    p.add_argument("--n", type=int, required=True, help="number of unknown tokens")
    p.add_argument("--prefix", help="space-separated prefix (defaults to the pattern's)")
    p.add_argument("--intent", help="label guess override")
    p.add_argument("--tags", help="comma-separated tag guess override")
    p.add_argument("--v0", default="auto",
                   help="digits | colors | full | @tokens.txt (one per line)")
    p.add_argument("--digit-style", choices=["words", "numerals"], default="words")
    p.add_argument("--epochs", type=int, default=250)
    p.add_argument("--lr", type=float, default=6.5e-3)
    p.add_argument("--lr-decay", type=float, default=0.995)
    p.add_argument("--temperature", type=float, default=0.1)
    p.add_argument("--temperature-decay", type=float, default=0.997)
    p.add_argument("--init", choices=["zeros", "gaussian"], default="zeros")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--full-vocab", action="store_true",
                   help="optimize logits over the whole vocabulary")
    p.add_argument("--continuous", action="store_true",
                   help="run the continuous-vector baseline instead")
    p.add_argument("--out", help="also write the result JSON here")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("eval", help="aggregate trial reports or print baselines")
    p.add_argument("--trials", nargs="*", default=[],
                   help="trial JSON files or directories containing them")
    p.add_argument("--out", help="summary JSON output path")
    p.add_argument("--csv", help="flat per-trial CSV output path")
    p.add_argument("--baseline", action="store_true",
                   help="print the analytic random baseline instead")
    p.add_argument("--n", type=int, help="unknown-token count for --baseline")
    p.add_argument("--v0-size", type=int, help="candidate-set size for --baseline")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="run a full experiment grid from a config file")
    p.add_argument("--config", required=True, help="experiment JSON config")
    p.add_argument("--out", help="output directory (overrides the config's "
                                 "output_dir; must be fresh)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("inspect-checkpoint", help="print checkpoint metadata")
    p.add_argument("checkpoint")
    p.set_defaults(func=cmd_inspect)

    return parser


def cmd_synth(args) -> int:
    corpus = synth_corpus(size=args.size, seed=args.seed)
    save_examples(corpus.all_examples(), args.out)
    print(f"wrote {args.size} examples to {args.out}")
    return 0


def _parse_defenses(raw: str) -> set[str]:
    parts = {p.strip().upper() for p in raw.split(",") if p.strip()}
    unknown = parts - {"D", "ES", "CE"}
    if unknown:
        raise CanarexError(f"unknown defenses: {sorted(unknown)}")
    return parts


def cmd_train(args) -> int:
    if args.corpus:
        examples, _, _ = load_corpus(args.corpus)
        corpus = split_corpus(examples, args.val_fraction, args.split_seed)
    else:
        corpus = synth_corpus(size=args.synth_size, seed=args.synth_seed)

    canary = None
    if args.canary_file:
        with open(args.canary_file, "r", encoding="utf-8") as fh:
            canary = CanarySpec.from_dict(json.load(fh))
    elif args.canary_pattern:
        canary = generate_canary(
            args.canary_pattern, args.canary_n, args.canary_seed,
            repetitions=args.canary_r, digit_style=args.digit_style,
        )
    if canary is not None:
        corpus = inject_canary(corpus, canary)
        if args.canary_out:
            Path(args.canary_out).parent.mkdir(parents=True, exist_ok=True)
            with open(args.canary_out, "w", encoding="utf-8") as fh:
                json.dump(canary.to_dict(), fh, sort_keys=True, indent=2)
                fh.write("\n")

    defenses = _parse_defenses(args.defenses)
    model_config = ModelConfig(
        embedding_dim=args.embedding_dim,
        hidden_dim=args.hidden_dim,
        char_embeddings_enabled="CE" in defenses,
    )
    train_config = TrainConfig(
        max_epochs=args.epochs,
        learning_rate=args.lr,
        patience=args.patience,
        dropout_enabled="D" in defenses,
        early_stopping_enabled="ES" in defenses,
    )
    pretrained = None
    if args.pretrained:
        from .data import build_vocabulary

        vocab = build_vocabulary(corpus)
        matrix, _missing = load_pretrained_embeddings(args.pretrained, vocab, args.seed)
        if matrix.shape[1] != model_config.embedding_dim:
            model_config = ModelConfig(
                **{**model_config.to_dict(), "embedding_dim": matrix.shape[1]}
            )
        pretrained = matrix

    model, report = train(corpus, model_config, train_config, args.seed,
                          pretrained_word=pretrained)
    save_checkpoint(model, args.out)
    print(f"checkpoint written to {args.out} "
          f"(epochs={report.stopped_epoch}, val intent acc={report.intent_accuracy})")
    if args.report:
        Path(args.report).parent.mkdir(parents=True, exist_ok=True)
        with open(args.report, "w", encoding="utf-8") as fh:
            json.dump(report.to_dict(), fh, sort_keys=True, indent=2)
            fh.write("\n")
    return 0


def _attack_target(args, model) -> AttackTarget:
    default_prefix, _ = CANARY_PATTERNS[args.pattern]
    prefix = tuple(args.prefix.split()) if args.prefix else default_prefix
    intent = args.intent or CANARY_INTENTS[args.pattern]
    if args.tags:
        tags = tuple(t.strip() for t in args.tags.split(","))
    else:
        tags = canary_tags(len(prefix), args.n)
    return AttackTarget(
        prefix_tokens=prefix, n_unknown=args.n, intent=intent, ner_tags=tags
    )


def _candidate_tokens(args, model):
    if args.v0.startswith("@"):
        tokens = [
            line.strip()
            for line in Path(args.v0[1:]).read_text(encoding="utf-8").splitlines()
            if line.strip()
        ]
        return reduce_vocabulary(model.vocab, tokens, name=Path(args.v0[1:]).stem)
    selector = args.v0
    if selector == "auto":
        selector = "colors" if args.pattern == "color" else "digits"
    return candidate_set(model.vocab, selector, args.digit_style)


def cmd_attack(args) -> int:
    model = load_checkpoint(args.checkpoint)
    target = _attack_target(args, model)
    v0 = _candidate_tokens(args, model)
    config = AttackConfig(
        attack_epochs=args.epochs,
        learning_rate=args.lr,
        lr_decay=args.lr_decay,
        temperature_init=args.temperature,
        temperature_decay=args.temperature_decay,
        init_scheme=args.init,
        seed=args.seed,
        use_full_vocab=args.full_vocab,
    )
    if args.continuous:
        result = continuous_baseline_attack(model, target, v0, config)
    else:
        result = run_attack(model, target, v0, config)
    payload = json.dumps(result.to_dict(), sort_keys=True, indent=2)
    print(payload)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(payload + "\n", encoding="utf-8")
    return 0


def _collect_trial_files(items) -> list[Path]:
    files: list[Path] = []
    for item in items:
        path = Path(item)
        if path.is_dir():
            files.extend(sorted(path.rglob("trial-*.json")))
        else:
            files.append(path)
    return files


def cmd_eval(args) -> int:
    if args.baseline:
        if args.n is None or args.v0_size is None:
            raise CanarexError("--baseline needs --n and --v0-size")
        acc, hdt = random_baseline(args.n, args.v0_size)
        print(json.dumps({"baseline_accuracy": acc, "baseline_hdt": hdt},
                         sort_keys=True, indent=2))
        return 0
    files = _collect_trial_files(args.trials)
    if not files:
        raise CanarexError("no trial files given (use --trials or --baseline)")
    reports = []
    for f in files:
        with open(f, "r", encoding="utf-8") as fh:
            reports.append(TrialReport.from_dict(json.load(fh)))
    summary = aggregate_trials(reports)
    payload = summary_to_json(summary)
    print(payload, end="")
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(payload, encoding="utf-8")
    if args.csv:
        write_trials_csv([summary], args.csv)
    return 0


def cmd_sweep(args) -> int:
    config = ExperimentConfig.from_json_file(args.config)
    out_dir = args.out or config.output_dir
    if not out_dir:
        raise CanarexError("no output directory: pass --out or set output_dir")
    status = run_experiment(config, out_dir)
    print(
        f"sweep finished: {status.cells_total} cells, "
        f"{status.cells_failed} cells fully failed, "
        f"{status.trials_failed} trials failed"
    )
    return status.exit_code


def cmd_inspect(args) -> int:
    info = inspect_checkpoint(args.checkpoint)
    print(json.dumps(info, sort_keys=True, indent=2))
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except CanarexError as exc:
        print(f"canarex: error: {exc}", file=sys.stderr)
        return FAILURE_EXIT


if __name__ == "__main__":
    sys.exit(main())
