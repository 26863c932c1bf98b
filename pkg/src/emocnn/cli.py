"""Command-line pipeline: prepare -> embed -> train -> eval / cv / compare.

Every run resolves its flags up front, writes a `manifest.json` next to its
outputs, and only then computes; `rerun <manifest>` replays a recorded run
and reproduces its outputs bit-for-bit on the same machine (wall-clock
fields excepted, as timing is never reproducible).

Exit codes: 0 success, 1 usage error, 2 data error, 3 assertion failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import __version__
from .corpus import (
    DataError,
    imbalanced_synth_corpus,
    length_stats,
    load_dataset_json,
    load_imdb_csv,
    load_polarity_dir,
    save_dataset_json,
    synth_corpus,
)
from .embedding import (
    CbowConfig,
    build_vocab,
    init_random_embeddings,
    load_embeddings,
    save_embeddings,
    train_cbow,
)
from .evaluation import (
    emit_report,
    evaluate,
    gradient_check,
    measure_inference_time,
    stratified_sample_eval,
)
from .functions import ACTIVATION_KINDS, Activation
from .network import NetworkConfig, load_model, save_model
from .training import compare_runs, preset_config, run_fold_cv, train

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_ASSERT = 3

PRESET_FIELDS = ("activation", "loss_mode", "filter_widths", "maps_per_width")


class _Parser(argparse.ArgumentParser):
    """argparse variant that exits 1 (not 2) on usage errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(EXIT_USAGE)


def _warn(message: str) -> None:
    print(f"warning: {message}", file=sys.stderr)


# ---------------------------------------------------------------------------
# Manifests
# ---------------------------------------------------------------------------

_FLAG_NAMES = {"assert_": "--assert"}


def write_manifest(out_dir: Path, command: str, args: argparse.Namespace) -> Path:
    """Record the fully resolved flags of this run for later replay."""
    payload = {
        "version": 1,
        "tool_version": __version__,
        "command": command,
        "args": {
            k: v
            for k, v in sorted(vars(args).items())
            if k not in ("func", "command")
            and isinstance(v, (str, int, float, bool, type(None)))
        },
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(payload, indent=2, sort_keys=True), encoding="utf-8")
    return path


def manifest_to_argv(payload: dict) -> list[str]:
    argv = [payload["command"]]
    for dest, value in payload["args"].items():
        if value is None:
            continue
        flag = _FLAG_NAMES.get(dest, "--" + dest.replace("_", "-"))
        if isinstance(value, bool):
            if value:
                argv.append(flag)
        else:
            argv.extend([flag, str(value)])
    return argv


# ---------------------------------------------------------------------------
# Config files
# ---------------------------------------------------------------------------


def _load_config_file(path: str) -> dict:
    """Read flag defaults from a JSON object or key=value lines."""
    src = Path(path)
    if not src.is_file():
        raise DataError(f"config file not found: {src}")
    text = src.read_text(encoding="utf-8")
    if text.lstrip().startswith("{"):
        try:
            mapping = json.loads(text)
        except json.JSONDecodeError as exc:
            raise DataError(f"cannot parse config file {src}: {exc}") from exc
        if not isinstance(mapping, dict):
            raise DataError(f"config file {src} must hold a JSON object")
        return mapping
    mapping = {}
    for line_num, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise DataError(f"{src}:{line_num}: expected key=value, got {line!r}")
        mapping[key.strip()] = value.strip()
    return mapping


def expand_config_flags(argv: list[str]) -> list[str]:
    """Splice config-file entries in ahead of explicit flags (flags win)."""
    if "--config" not in argv:
        return argv
    idx = argv.index("--config")
    if idx + 1 >= len(argv):
        raise DataError("--config needs a file path")
    mapping = _load_config_file(argv[idx + 1])
    injected: list[str] = []
    for key, value in mapping.items():
        flag = "--" + str(key).replace("_", "-")
        if isinstance(value, bool):
            if value:
                injected.append(flag)
        elif str(value).lower() == "true":
            injected.append(flag)
        elif str(value).lower() == "false":
            continue
        else:
            injected.extend([flag, str(value)])
    rest = argv[:idx] + argv[idx + 2 :]
    if not rest:
        raise DataError("--config cannot replace the subcommand itself")
    return [rest[0], *injected, *rest[1:]]


# ---------------------------------------------------------------------------
# Shared loading helpers
# ---------------------------------------------------------------------------


def _load_embedding_pair(path: str):
    vocab, table = load_embeddings(path)
    return vocab, table


def _parse_widths(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(part) for part in text.split(","))
    except ValueError as exc:
        raise DataError(f"cannot parse filter widths from {text!r}") from exc


def _parse_seeds(text: str) -> list[int]:
    try:
        return [int(part) for part in text.split(",")]
    except ValueError as exc:
        raise DataError(f"cannot parse seed list from {text!r}") from exc


def _parse_synth_spec(text: str) -> dict:
    spec = {}
    for part in text.split(","):
        if not part:
            continue
        key, _, value = part.partition("=")
        if not value:
            raise DataError(f"synthetic corpus spec needs key=value pairs, got {part!r}")
        spec[key.strip()] = value.strip()
    return spec


def _resolve_train_config(args, embedding_dim: int):
    """Materialize the preset, apply explicit flag overrides with a warning."""
    overrides = {}
    if args.activation is not None:
        overrides["activation"] = Activation(args.activation, args.a)
    if args.loss is not None:
        overrides["loss_mode"] = args.loss
    if args.widths is not None:
        overrides["filter_widths"] = _parse_widths(args.widths)
    if args.maps is not None:
        overrides["maps_per_width"] = args.maps
    for name in overrides:
        _warn(f"flag overrides preset {args.preset!r} field {name}")
    return preset_config(
        args.preset,
        embedding_dim=embedding_dim,
        seed=args.seed,
        dropout_rate=args.dropout,
        learning_rate=args.lr,
        batch_size=args.batch,
        max_epochs=args.max_epochs,
        convergence_epsilon=args.epsilon,
        convergence_patience=args.patience,
        validation_fraction=args.val_fraction,
        **overrides,
    )


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_prepare(args) -> int:
    out = Path(args.out)
    write_manifest(out, "prepare", args)
    if args.format == "polarity":
        if not args.path:
            raise DataError("--path is required for --format polarity")
        dataset = load_polarity_dir(args.path)
    elif args.format == "imdb":
        if not args.path:
            raise DataError("--path is required for --format imdb")
        limits = None
        if args.limit_pos is not None or args.limit_neg is not None:
            # an unspecified side stays uncapped
            limits = {
                1: args.limit_pos if args.limit_pos is not None else sys.maxsize,
                0: args.limit_neg if args.limit_neg is not None else sys.maxsize,
            }
        dataset = load_imdb_csv(args.path, limit_per_class=limits)
    else:  # synth
        spec = _parse_synth_spec(args.spec or "")
        common = dict(
            vocab_size=int(spec.get("vocab", 50)),
            doc_len=int(spec.get("len", 30)),
            signal_strength=float(spec.get("signal", 1.0)),
            seed=int(spec.get("seed", 7)),
        )
        if "neg" in spec or "pos" in spec:
            dataset = imbalanced_synth_corpus(
                n_negative=int(spec.get("neg", 200)),
                n_positive=int(spec.get("pos", 100)),
                **common,
            )
        else:
            dataset = synth_corpus(n_per_class=int(spec.get("n", 200)), **common)

    save_dataset_json(dataset, out / "dataset.json")
    stats = length_stats(dataset)
    print(f"samples: {dataset.n}")
    for label in sorted(dataset.class_counts):
        name = "positive" if label == 1 else "negative"
        print(f"  {name}: {dataset.class_counts[label]}")
    print(f"max length (words): {stats['max_length']}")
    print(f"min length (words): {stats['min_length']}")
    print(f"average length (words): {stats['avg_length']:.1f}")
    print(f"wrote {out / 'dataset.json'}")
    return EXIT_OK


def cmd_embed(args) -> int:
    out = Path(args.out)
    write_manifest(out, "embed", args)
    dataset = load_dataset_json(args.data)
    vocab = build_vocab(dataset, min_count=args.min_count)
    if args.random:
        table = init_random_embeddings(vocab, dim=args.dim, seed=args.seed)
    else:
        config = CbowConfig(
            window=args.window,
            dim=args.dim,
            negatives=args.negatives,
            epochs=args.epochs,
            learning_rate=args.lr,
            min_count=args.min_count,
            seed=args.seed,
        )
        table = train_cbow(dataset, vocab, config)
        if table.train_objective:
            print(
                "cbow objective per epoch: "
                + ", ".join(f"{x:.4f}" for x in table.train_objective)
            )
    path = out / "embeddings.json"
    save_embeddings(path, vocab, table)
    print(f"vocabulary size: {len(vocab)}")
    print(f"wrote {path} (dim {table.dim})")
    return EXIT_OK


def cmd_train(args) -> int:
    out = Path(args.out)
    write_manifest(out, "train", args)
    dataset = load_dataset_json(args.data)
    vocab, table = _load_embedding_pair(args.embeddings)
    config = _resolve_train_config(args, table.dim)
    params, report = train(
        dataset,
        (vocab, table),
        config,
        run_id="train",
        preset=args.preset,
        dataset_name=Path(args.data).stem,
    )
    save_model(out / "model.json", params, embedding_ref=str(args.embeddings))
    (out / "train_report.json").write_text(
        json.dumps(report.to_dict(), indent=2), encoding="utf-8"
    )
    emit_report(report, out)
    print(f"epochs run: {len(report.epochs)}")
    print(f"best validation accuracy: {report.best_validation_accuracy:.4f}")
    print(f"convergence epoch: {report.convergence_epoch}")
    print(f"wrote {out / 'model.json'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    out = Path(args.out)
    write_manifest(out, "eval", args)
    dataset = load_dataset_json(args.data)
    vocab, table = _load_embedding_pair(args.embeddings)
    params = load_model(args.model)
    result = evaluate(params, (vocab, table), dataset)
    strata = stratified_sample_eval(
        params, (vocab, table), dataset,
        strata=args.strata, per_stratum=args.per_stratum, seed=args.seed,
    )
    timing_docs = dataset.documents[: args.timing_samples]
    timing = measure_inference_time(
        params, (vocab, table), timing_docs, warmup=args.warmup, repeats=args.repeats
    )
    emit_report([result, *strata, timing], out)
    (out / "eval_report.json").write_text(
        json.dumps(
            {
                "eval": result.to_dict(),
                "strata": [s.to_dict() for s in strata],
                "timing": timing.to_dict(),
            },
            indent=2,
        ),
        encoding="utf-8",
    )
    print(f"accuracy: {result.accuracy:.4f}")
    print(f"macro accuracy: {result.macro_accuracy:.4f}")
    print(f"median per-sample ms: {timing.median_ms:.3f}")
    if args.assert_ and result.accuracy < args.min_accuracy:
        print(
            f"assertion failed: accuracy {result.accuracy:.4f} < {args.min_accuracy}",
            file=sys.stderr,
        )
        return EXIT_ASSERT
    return EXIT_OK


def cmd_cv(args) -> int:
    out = Path(args.out)
    write_manifest(out, "cv", args)
    dataset = load_dataset_json(args.data)
    vocab, table = _load_embedding_pair(args.embeddings)
    config = _resolve_train_config(args, table.dim)
    report = run_fold_cv(
        dataset,
        (vocab, table),
        config,
        k_folds=args.folds,
        seed=args.seed,
        preset=args.preset,
        dataset_name=Path(args.data).stem,
    )
    emit_report(report, out)
    (out / "cv_report.json").write_text(
        json.dumps(report.to_dict(), indent=2), encoding="utf-8"
    )
    agg = report.aggregate
    print(f"folds: {args.folds}")
    print(f"mean test accuracy: {agg['accuracy_mean']:.4f} (std {agg['accuracy_std']:.4f})")
    print(f"mean convergence epoch: {agg['convergence_epoch_mean']:.2f}")
    if args.assert_ and agg["accuracy_mean"] < args.min_accuracy:
        print(
            f"assertion failed: mean accuracy {agg['accuracy_mean']:.4f} "
            f"< {args.min_accuracy}",
            file=sys.stderr,
        )
        return EXIT_ASSERT
    return EXIT_OK


def cmd_compare(args) -> int:
    out = Path(args.out)
    write_manifest(out, "compare", args)
    dataset = load_dataset_json(args.data)
    vocab, table = _load_embedding_pair(args.embeddings)
    shared = dict(
        dropout_rate=args.dropout,
        learning_rate=args.lr,
        batch_size=args.batch,
        max_epochs=args.max_epochs,
        convergence_epsilon=args.epsilon,
        convergence_patience=args.patience,
        validation_fraction=args.val_fraction,
    )
    baseline = preset_config(args.baseline_preset, embedding_dim=table.dim, **shared)
    proposed = preset_config(args.proposed_preset, embedding_dim=table.dim, **shared)
    report = compare_runs(
        dataset,
        (vocab, table),
        baseline,
        proposed,
        seeds=_parse_seeds(args.seeds),
        baseline_label=args.baseline_preset,
        proposed_label=args.proposed_preset,
        dataset_name=Path(args.data).stem,
        test_fraction=args.test_fraction,
    )
    emit_report(report, out)
    (out / "comparison.json").write_text(
        json.dumps(report.to_dict(), indent=2), encoding="utf-8"
    )
    for name, value in sorted(report.win_counts.items()):
        print(f"{name}: {value}")
    if args.assert_ and report.win_counts["convergence_proposed_not_slower"] < args.min_convergence_wins:
        print(
            "assertion failed: proposed convergence wins "
            f"{report.win_counts['convergence_proposed_not_slower']} "
            f"< {args.min_convergence_wins}",
            file=sys.stderr,
        )
        return EXIT_ASSERT
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    out = Path(args.out)
    write_manifest(out, "gradcheck", args)
    kinds = ACTIVATION_KINDS if args.activation is None else (args.activation,)
    reports = []
    failed = False
    for kind in kinds:
        config = NetworkConfig(
            filter_widths=_parse_widths(args.widths),
            maps_per_width=args.maps,
            embedding_dim=args.dim,
            dropout_rate=args.dropout,
            activation=Activation(kind, args.a),
            seed=args.seed,
        )
        report = gradient_check(
            config, trials=args.trials, h=args.h, tol=args.tol, seed=args.seed,
            label=kind,
        )
        reports.append(report)
        status = "FAIL" if report.flagged_blocks else "ok"
        print(f"{kind}: worst relative error {report.worst:.3e} [{status}]")
        failed = failed or bool(report.flagged_blocks)
    emit_report(reports, out)
    (out / "gradcheck_report.json").write_text(
        json.dumps({r.label: r.to_dict() for r in reports}, indent=2),
        encoding="utf-8",
    )
    if args.assert_ and failed:
        print("assertion failed: flagged parameter blocks", file=sys.stderr)
        return EXIT_ASSERT
    return EXIT_OK


def cmd_rerun(args) -> int:
    src = Path(args.manifest)
    if not src.is_file():
        raise DataError(f"manifest not found: {src}")
    payload = json.loads(src.read_text(encoding="utf-8"))
    if payload.get("version") != 1 or "command" not in payload:
        raise DataError(f"{src} is not a version-1 run manifest")
    argv = manifest_to_argv(payload)
    if args.out is not None:
        try:
            idx = argv.index("--out")
            argv[idx + 1] = args.out
        except ValueError:
            argv.extend(["--out", args.out])
    print(f"replaying: {' '.join(argv)}")
    return main(argv)


# ---------------------------------------------------------------------------
# Parser wiring
# ---------------------------------------------------------------------------


def _add_common_train_flags(parser, with_preset=True):
    if with_preset:
        parser.add_argument("--preset", default="elreluwl",
                            choices=["elreluwl", "baseline-sota"],
                            help="named configuration to start from")
        parser.add_argument("--activation", default=None, choices=list(ACTIVATION_KINDS),
                            help="override the preset activation")
        parser.add_argument("--a", type=float, default=0.03,
                            help="activation inflection/slope parameter")
        parser.add_argument("--loss", default=None, choices=["weighted", "unweighted"],
                            help="override the preset loss mode")
        parser.add_argument("--widths", default=None,
                            help="override filter widths, e.g. 3,4,5")
        parser.add_argument("--maps", type=int, default=None,
                            help="override feature maps per width")
        parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--dropout", type=float, default=0.4)
    parser.add_argument("--lr", type=float, default=0.2)
    parser.add_argument("--batch", type=int, default=100)
    parser.add_argument("--max-epochs", type=int, default=30)
    parser.add_argument("--epsilon", type=float, default=0.001,
                        help="minimum validation improvement for convergence")
    parser.add_argument("--patience", type=int, default=3,
                        help="epochs without improvement before stopping")
    parser.add_argument("--val-fraction", type=float, default=0.2)
    parser.add_argument("--config", default=None,
                        help="JSON or key=value file of flag defaults "
                             "(explicit flags still win)")


def build_parser() -> _Parser:
    parser = _Parser(prog="emocnn", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="load and tokenize a dataset", parents=[])
    p.add_argument("--format", required=True, choices=["polarity", "imdb", "synth"])
    p.add_argument("--path", default=None, help="dataset root directory or CSV file")
    p.add_argument("--spec", default=None,
                   help="synthetic corpus spec, e.g. n=200,vocab=50,len=30,signal=1.0,seed=7"
                        " (neg=/pos= for uneven classes)")
    p.add_argument("--limit-pos", type=int, default=None)
    p.add_argument("--limit-neg", type=int, default=None)
    p.add_argument("--out", default="out")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("embed", help="build the vocabulary and word vectors")
    p.add_argument("--data", required=True, help="prepared dataset.json")
    p.add_argument("--dim", type=int, default=200)
    p.add_argument("--window", type=int, default=2)
    p.add_argument("--negatives", type=int, default=5)
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--min-count", type=int, default=1)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--random", action="store_true",
                   help="skip training and emit range-bounded random vectors")
    p.add_argument("--config", default=None,
                   help="JSON or key=value file of flag defaults")
    p.add_argument("--out", default="out")
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("train", help="train one model")
    p.add_argument("--data", required=True)
    p.add_argument("--embeddings", required=True)
    _add_common_train_flags(p)
    p.add_argument("--out", default="out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a trained model on a dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--strata", type=int, default=10)
    p.add_argument("--per-stratum", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--warmup", type=int, default=3)
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--timing-samples", type=int, default=50)
    p.add_argument("--config", default=None,
                   help="JSON or key=value file of flag defaults")
    p.add_argument("--assert", dest="assert_", action="store_true",
                   help="exit 3 when accuracy falls below --min-accuracy")
    p.add_argument("--min-accuracy", type=float, default=0.0)
    p.add_argument("--out", default="out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("cv", help="k-fold cross-validation")
    p.add_argument("--data", required=True)
    p.add_argument("--embeddings", required=True)
    _add_common_train_flags(p)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--assert", dest="assert_", action="store_true")
    p.add_argument("--min-accuracy", type=float, default=0.0)
    p.add_argument("--out", default="out")
    p.set_defaults(func=cmd_cv)

    p = sub.add_parser("compare", help="paired baseline-vs-proposed runs")
    p.add_argument("--data", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--seeds", default="1,2,3,4,5")
    p.add_argument("--baseline-preset", default="baseline-sota",
                   choices=["elreluwl", "baseline-sota"])
    p.add_argument("--proposed-preset", default="elreluwl",
                   choices=["elreluwl", "baseline-sota"])
    p.add_argument("--test-fraction", type=float, default=0.2)
    _add_common_train_flags(p, with_preset=False)
    p.add_argument("--assert", dest="assert_", action="store_true")
    p.add_argument("--min-convergence-wins", type=int, default=0)
    p.add_argument("--out", default="out")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("gradcheck", help="verify gradients against finite differences")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--activation", default=None, choices=list(ACTIVATION_KINDS),
                   help="check one activation kind instead of all five")
    p.add_argument("--a", type=float, default=0.03)
    p.add_argument("--widths", default="2,3")
    p.add_argument("--maps", type=int, default=2)
    p.add_argument("--dim", type=int, default=3)
    p.add_argument("--dropout", type=float, default=0.4)
    p.add_argument("--assert", dest="assert_", action="store_true")
    p.add_argument("--config", default=None,
                   help="JSON or key=value file of flag defaults")
    p.add_argument("--out", default="out")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("rerun", help="replay a recorded run from its manifest")
    p.add_argument("manifest")
    p.add_argument("--out", default=None, help="redirect outputs to a new directory")
    p.set_defaults(func=cmd_rerun)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    if argv is None:
        argv = sys.argv[1:]
    try:
        args = parser.parse_args(expand_config_flags(list(argv)))
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
