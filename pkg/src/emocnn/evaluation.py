"""Metrics, inference timing, the gradient-check harness, and report files.

Three artifacts are written by `emit_report` into the output directory:

  * ``metrics.csv``  - one row per (run, epoch) of training history;
  * ``summary.csv``  - one row per run (folds and aggregates included);
  * ``report.md``    - human-readable tables over the same numbers.

CSV output is RFC-4180, UTF-8, '.' decimal separator, floats printed with
12 significant digits so parsing the file recovers the numbers to ~1e-12
relative. Emission is byte-stable: identical reports give identical files.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, TYPE_CHECKING

import numpy as np

from .corpus import LabeledDataset
from .embedding import EmbeddingTable, Vocabulary, embed_lookup
from .network import (
    ModelParams,
    NetworkConfig,
    backward,
    forward,
    init_params,
    predict,
    sample_loss,
)

if TYPE_CHECKING:
    from .training import ComparisonReport, CvReport, TrainReport


@dataclass
class EvalResult:
    """Accuracy and confusion counts over one evaluated document set."""

    accuracy: float
    per_class_accuracy: dict[int, float]
    confusion: dict[str, int]  # TP / TN / FP / FN with label 1 as positive
    n_evaluated: int
    kind: str = field(default="eval", repr=False)

    @property
    def macro_accuracy(self) -> float:
        """Unweighted mean of per-class accuracies."""
        return float(np.mean(list(self.per_class_accuracy.values())))

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "per_class_accuracy": {str(c): v for c, v in self.per_class_accuracy.items()},
            "macro_accuracy": self.macro_accuracy,
            "confusion": dict(self.confusion),
            "n_evaluated": self.n_evaluated,
        }


@dataclass
class StratumEval:
    """Evaluation of one per-class sample stratum."""

    class_label: int
    stratum: int
    result: EvalResult
    mean_true_class_prob: float
    doc_indices: tuple[int, ...] = ()
    kind: str = field(default="stratum", repr=False)

    def to_dict(self) -> dict:
        return {
            "class_label": self.class_label,
            "stratum": self.stratum,
            "mean_true_class_prob": self.mean_true_class_prob,
            "doc_indices": list(self.doc_indices),
            **self.result.to_dict(),
        }


@dataclass
class TimingStats:
    """Per-sample inference wall-clock statistics in milliseconds."""

    median_ms: float
    mean_ms: float
    min_ms: float
    max_ms: float
    n_measurements: int
    warmup: int
    kind: str = field(default="timing", repr=False)

    def to_dict(self) -> dict:
        return {
            "median_ms": self.median_ms,
            "mean_ms": self.mean_ms,
            "min_ms": self.min_ms,
            "max_ms": self.max_ms,
            "n_measurements": self.n_measurements,
            "warmup": self.warmup,
        }


@dataclass
class GradCheckReport:
    """Worst relative error per parameter block, analytic vs central differences."""

    max_rel_error: dict[str, float]
    flagged_blocks: list[str]
    trials: int
    skipped_fixtures: int
    h: float
    tol: float
    label: str = ""
    kind: str = field(default="gradcheck", repr=False)

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values())

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "max_rel_error": dict(self.max_rel_error),
            "flagged_blocks": list(self.flagged_blocks),
            "trials": self.trials,
            "skipped_fixtures": self.skipped_fixtures,
            "h": self.h,
            "tol": self.tol,
        }


def _sentence_matrix(vocab, table, doc, max_width):
    return embed_lookup(vocab, table, doc.tokens, min_rows=max_width)


def evaluate(
    params: ModelParams,
    embeddings: tuple[Vocabulary, EmbeddingTable],
    dataset: LabeledDataset,
) -> EvalResult:
    """Run the model over every document and tally the confusion matrix."""
    if dataset.n == 0:
        raise ValueError("cannot evaluate an empty dataset")
    vocab, table = embeddings
    max_width = params.config.max_width
    confusion = {"TP": 0, "TN": 0, "FP": 0, "FN": 0}
    for doc in dataset.documents:
        cls, _ = predict(params, _sentence_matrix(vocab, table, doc, max_width))
        if doc.label == 1:
            confusion["TP" if cls == 1 else "FN"] += 1
        else:
            confusion["TN" if cls == 0 else "FP"] += 1
    accuracy = (confusion["TP"] + confusion["TN"]) / dataset.n
    per_class = {}
    if confusion["TP"] + confusion["FN"] > 0:
        per_class[1] = confusion["TP"] / (confusion["TP"] + confusion["FN"])
    if confusion["TN"] + confusion["FP"] > 0:
        per_class[0] = confusion["TN"] / (confusion["TN"] + confusion["FP"])
    return EvalResult(
        accuracy=accuracy,
        per_class_accuracy=per_class,
        confusion=confusion,
        n_evaluated=dataset.n,
    )


def stratified_sample_eval(
    params: ModelParams,
    embeddings: tuple[Vocabulary, EmbeddingTable],
    dataset: LabeledDataset,
    strata: int,
    per_stratum: int,
    seed: int,
) -> list[StratumEval]:
    """Evaluate `strata` disjoint seeded groups of `per_stratum` docs per class.

    Groups are drawn without replacement inside each class, so the row
    structure is (classes x strata) with every document appearing at most
    once. Each row carries both the stratum accuracy and the mean predicted
    probability of the true class.
    """
    vocab, table = embeddings
    max_width = params.config.max_width
    rng = np.random.default_rng(seed)
    labels = dataset.labels()
    out: list[StratumEval] = []
    for label in sorted(dataset.class_counts):
        idx = np.flatnonzero(labels == label)
        needed = strata * per_stratum
        if len(idx) < needed:
            raise ValueError(
                f"class {label} has {len(idx)} documents, "
                f"but {strata} strata of {per_stratum} need {needed}"
            )
        rng.shuffle(idx)
        for s in range(strata):
            group = idx[s * per_stratum : (s + 1) * per_stratum]
            subset = dataset.subset(group)
            result = evaluate(params, embeddings, subset)
            true_probs = []
            for doc in subset.documents:
                _, probs = predict(params, _sentence_matrix(vocab, table, doc, max_width))
                true_probs.append(probs[doc.label])
            out.append(
                StratumEval(
                    class_label=int(label),
                    stratum=s + 1,
                    result=result,
                    mean_true_class_prob=float(np.mean(true_probs)),
                    doc_indices=tuple(int(i) for i in group),
                )
            )
    return out


def measure_inference_time(
    params: ModelParams,
    embeddings: tuple[Vocabulary, EmbeddingTable],
    samples,
    warmup: int = 3,
    repeats: int = 1,
) -> TimingStats:
    """Time `predict` per sample with a monotonic clock.

    `warmup` initial calls are discarded; the remaining repeats x len(samples)
    measurements feed the statistics. Results depend on the local hardware
    and are only meaningful as paired relative comparisons.
    """
    samples = list(samples)
    if not samples:
        raise ValueError("need at least one sample to time")
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    vocab, table = embeddings
    max_width = params.config.max_width
    matrices = [_sentence_matrix(vocab, table, doc, max_width) for doc in samples]
    for i in range(warmup):
        predict(params, matrices[i % len(matrices)])
    times = []
    for _ in range(repeats):
        for matrix in matrices:
            start = time.perf_counter()
            predict(params, matrix)
            times.append((time.perf_counter() - start) * 1000.0)
    arr = np.asarray(times)
    return TimingStats(
        median_ms=float(np.median(arr)),
        mean_ms=float(arr.mean()),
        min_ms=float(arr.min()),
        max_ms=float(arr.max()),
        n_measurements=len(times),
        warmup=warmup,
    )


def _numeric_gradients(params, sentence, target, weight, h, mask_seed):
    def loss_at(p):
        rng = np.random.default_rng(mask_seed) if mask_seed is not None else None
        return sample_loss(forward(p, sentence, rng=rng), target, weight)

    numeric = params.zeros_like()
    for (name, block), (_, out) in zip(params.named_blocks(), numeric.named_blocks()):
        it = np.nditer(block, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            probe = params.copy()
            dict(probe.named_blocks())[name][idx] = block[idx] + h
            plus = loss_at(probe)
            dict(probe.named_blocks())[name][idx] = block[idx] - h
            minus = loss_at(probe)
            out[idx] = (plus - minus) / (2 * h)
    return numeric


def _fixture_is_smooth(trace, activation, margin=1e-4):
    # Skip fixtures with a pre-activation near the activation's branch
    # boundary or a near-tie at the top of any feature map: central
    # differences straddle a kink there and disagree with either one-sided
    # derivative.
    boundary = activation.boundary
    for w, pre in trace.pre_activations.items():
        if boundary is not None and np.any(np.abs(pre - boundary) < margin):
            return False
        fmap = trace.activations[w]
        if fmap.shape[1] >= 2:
            top2 = np.sort(fmap, axis=1)[:, -2:]
            if np.any(top2[:, 1] - top2[:, 0] < margin):
                return False
    return True


def gradient_check(
    config: NetworkConfig,
    trials: int,
    h: float = 1e-5,
    tol: float = 1e-4,
    seed: int = 0,
    grad_transform: Callable[[ModelParams], ModelParams] | None = None,
    label: str = "",
) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    Random tiny fixtures (parameters, sentence, target, sample weight,
    dropout mask) are drawn per trial; fixtures adjacent to non-smooth
    points are skipped and redrawn. Relative error per entry is
    |a - n| / max(|a| + |n|, 1e-6); a block whose worst entry exceeds
    `tol` is flagged. `grad_transform`, when given, is applied to the
    analytic gradients first - a fault-injection hook for sensitivity
    tests of this harness.
    """
    if trials < 1 or h <= 0:
        raise ValueError("trials must be >= 1 and h > 0")
    rng = np.random.default_rng(seed)
    max_err: dict[str, float] = {}
    completed = 0
    skipped = 0
    attempts_left = trials * 50
    while completed < trials and attempts_left > 0:
        attempts_left -= 1
        trial_config = replace(config, seed=int(rng.integers(1 << 30)))
        params = init_params(trial_config)
        length = int(rng.integers(config.max_width, config.max_width + 4))
        sentence = rng.normal(size=(length, config.embedding_dim))
        mask_seed = int(rng.integers(1 << 30)) if config.dropout_rate > 0 else None
        mask_rng = np.random.default_rng(mask_seed) if mask_seed is not None else None
        trace = forward(params, sentence, rng=mask_rng)
        if not _fixture_is_smooth(trace, config.activation):
            skipped += 1
            continue
        target = int(rng.integers(config.num_classes))
        weight = float(rng.uniform(0.5, 2.0))
        analytic = backward(params, trace, target, weight)
        if grad_transform is not None:
            analytic = grad_transform(analytic)
        numeric = _numeric_gradients(params, sentence, target, weight, h, mask_seed)
        for (name, a), (_, n) in zip(analytic.named_blocks(), numeric.named_blocks()):
            err = float(np.max(np.abs(a - n) / np.maximum(np.abs(a) + np.abs(n), 1e-6)))
            max_err[name] = max(max_err.get(name, 0.0), err)
        completed += 1
    if completed < trials:
        raise RuntimeError("could not draw enough smooth gradient-check fixtures")
    flagged = sorted(name for name, err in max_err.items() if err > tol)
    return GradCheckReport(
        max_rel_error=max_err,
        flagged_blocks=flagged,
        trials=trials,
        skipped_fixtures=skipped,
        h=h,
        tol=tol,
        label=label,
    )


# ---------------------------------------------------------------------------
# Report emission
# ---------------------------------------------------------------------------

METRICS_COLUMNS = ["run_id", "preset", "dataset", "epoch", "train_loss", "train_acc", "val_acc", "ms"]
SUMMARY_COLUMNS = [
    "run_id",
    "preset",
    "dataset",
    "accuracy",
    "accuracy_std",
    "convergence_epoch",
    "convergence_epoch_std",
    "macro_accuracy",
    "acc_class_0",
    "acc_class_1",
    "mean_true_class_prob",
    "max_rel_error",
    "flagged",
    "n",
]


def _fmt(value) -> str:
    if value is None or value == "":
        return ""
    if isinstance(value, float):
        return "%.12g" % value
    return str(value)


def strip_timing(payload):
    """Recursively drop wall-clock fields from a report payload.

    Timing is the one part of a report that cannot be bit-reproducible, so
    determinism comparisons run on the stripped form.
    """
    timing_keys = {"ms", "wall_ms", "median_ms", "mean_ms", "min_ms", "max_ms"}
    if isinstance(payload, dict):
        return {k: strip_timing(v) for k, v in payload.items() if k not in timing_keys}
    if isinstance(payload, list):
        return [strip_timing(v) for v in payload]
    return payload


def _train_metric_rows(report: "TrainReport"):
    for stats in report.epochs:
        yield {
            "run_id": report.run_id,
            "preset": report.preset,
            "dataset": report.dataset_name,
            "epoch": stats.epoch,
            "train_loss": stats.train_loss,
            "train_acc": stats.train_acc,
            "val_acc": stats.val_acc,
            "ms": stats.ms,
        }


def _train_summary_row(report: "TrainReport", result: "EvalResult | None" = None):
    row = {
        "run_id": report.run_id,
        "preset": report.preset,
        "dataset": report.dataset_name,
        "accuracy": result.accuracy if result else report.best_validation_accuracy,
        "convergence_epoch": report.convergence_epoch,
        "n": result.n_evaluated if result else len(report.epochs),
    }
    if result:
        row["macro_accuracy"] = result.macro_accuracy
        row["acc_class_0"] = result.per_class_accuracy.get(0)
        row["acc_class_1"] = result.per_class_accuracy.get(1)
    return row


def _collect_rows(report):
    """(metric_rows, summary_rows, markdown_lines) for one report object."""
    metric_rows: list[dict] = []
    summary_rows: list[dict] = []
    md: list[str] = []
    kind = getattr(report, "kind", None)

    if kind == "train":
        metric_rows.extend(_train_metric_rows(report))
        summary_rows.append(_train_summary_row(report))
        md.append(f"## Training run `{report.run_id or 'train'}`\n")
        md.append(f"- preset: `{report.preset}`  dataset: `{report.dataset_name}`")
        md.append(f"- best validation accuracy: {_fmt(report.best_validation_accuracy)}")
        md.append(f"- convergence epoch: {report.convergence_epoch}")
        md.append("")
    elif kind == "cv":
        md.append(f"## {report.k_folds}-fold cross-validation\n")
        md.append("| fold | test accuracy | macro accuracy | convergence epoch |")
        md.append("| --- | --- | --- | --- |")
        for fold_report, fold_eval in zip(report.fold_reports, report.fold_evals):
            metric_rows.extend(_train_metric_rows(fold_report))
            summary_rows.append(_train_summary_row(fold_report, fold_eval))
            md.append(
                f"| {fold_report.run_id} | {_fmt(fold_eval.accuracy)} "
                f"| {_fmt(fold_eval.macro_accuracy)} | {fold_report.convergence_epoch} |"
            )
        agg = report.aggregate
        summary_rows.append(
            {
                "run_id": "aggregate",
                "preset": report.fold_reports[0].preset,
                "dataset": report.fold_reports[0].dataset_name,
                "accuracy": agg["accuracy_mean"],
                "accuracy_std": agg["accuracy_std"],
                "convergence_epoch": agg["convergence_epoch_mean"],
                "convergence_epoch_std": agg["convergence_epoch_std"],
                "macro_accuracy": agg["macro_accuracy_mean"],
                "n": report.k_folds,
            }
        )
        md.append(
            f"\nMean accuracy {_fmt(agg['accuracy_mean'])} "
            f"(std {_fmt(agg['accuracy_std'])}), "
            f"mean convergence epoch {_fmt(agg['convergence_epoch_mean'])} "
            f"(std {_fmt(agg['convergence_epoch_std'])}).\n"
        )
    elif kind == "comparison":
        md.append("## Paired comparison\n")
        md.append(
            "| seed | "
            f"{report.baseline_label} accuracy | {report.baseline_label} epochs | "
            f"{report.proposed_label} accuracy | {report.proposed_label} epochs |"
        )
        md.append("| --- | --- | --- | --- | --- |")
        for row in report.rows:
            for arm in (row.baseline, row.proposed):
                metric_rows.extend(_train_metric_rows(arm.report))
                summary_rows.append(_train_summary_row(arm.report, arm.result))
            md.append(
                f"| {row.seed} | {_fmt(row.baseline.result.accuracy)} "
                f"| {row.baseline.report.convergence_epoch} "
                f"| {_fmt(row.proposed.result.accuracy)} "
                f"| {row.proposed.report.convergence_epoch} |"
            )
        md.append("")
        for name, value in sorted(report.win_counts.items()):
            md.append(f"- {name}: {value}")
        md.append("")
    elif kind == "eval":
        summary_rows.append(
            {
                "run_id": "eval",
                "accuracy": report.accuracy,
                "macro_accuracy": report.macro_accuracy,
                "acc_class_0": report.per_class_accuracy.get(0),
                "acc_class_1": report.per_class_accuracy.get(1),
                "n": report.n_evaluated,
            }
        )
        md.append("## Evaluation\n")
        md.append(f"- accuracy: {_fmt(report.accuracy)}")
        md.append(f"- macro accuracy: {_fmt(report.macro_accuracy)}")
        md.append(f"- confusion: {report.confusion}")
        md.append("")
    elif kind == "stratum":
        summary_rows.append(
            {
                "run_id": f"class{report.class_label}-stratum{report.stratum}",
                "accuracy": report.result.accuracy,
                "macro_accuracy": report.result.macro_accuracy,
                "acc_class_0": report.result.per_class_accuracy.get(0),
                "acc_class_1": report.result.per_class_accuracy.get(1),
                "mean_true_class_prob": report.mean_true_class_prob,
                "n": report.result.n_evaluated,
            }
        )
    elif kind == "timing":
        md.append("## Inference timing (hardware-dependent)\n")
        md.append(
            f"- per-sample ms: median {_fmt(report.median_ms)}, mean {_fmt(report.mean_ms)}, "
            f"min {_fmt(report.min_ms)}, max {_fmt(report.max_ms)} "
            f"over {report.n_measurements} calls ({report.warmup} warmup discarded)"
        )
        md.append("")
    elif kind == "gradcheck":
        tag = f"gradcheck-{report.label}" if report.label else "gradcheck"
        md.append(f"## Gradient check{f' ({report.label})' if report.label else ''}\n")
        md.append("| parameter block | max relative error |")
        md.append("| --- | --- |")
        for name in sorted(report.max_rel_error):
            md.append(f"| {name} | {_fmt(report.max_rel_error[name])} |")
        md.append("")
        status = "FLAGGED: " + ", ".join(report.flagged_blocks) if report.flagged_blocks else "all blocks pass"
        md.append(f"{report.trials} trials, h={_fmt(report.h)}, tol={_fmt(report.tol)}: {status}\n")
        for name in sorted(report.max_rel_error):
            summary_rows.append(
                {
                    "run_id": f"{tag}-{name}",
                    "max_rel_error": report.max_rel_error[name],
                    "flagged": name in report.flagged_blocks,
                    "n": report.trials,
                }
            )
    else:
        raise TypeError(f"emit_report cannot handle {type(report).__name__}")
    return metric_rows, summary_rows, md


def emit_report(reports, out_dir: str | Path) -> list[Path]:
    """Write metrics.csv, summary.csv, and report.md for the given reports.

    `reports` may be a single report object or a list mixing the supported
    kinds. An empty list is rejected before anything touches the disk.
    """
    if reports is None:
        raise ValueError("no reports to emit")
    if not isinstance(reports, (list, tuple)):
        reports = [reports]
    if len(reports) == 0:
        raise ValueError("no reports to emit")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    metric_rows: list[dict] = []
    summary_rows: list[dict] = []
    md_lines: list[str] = ["# Results\n"]
    for report in reports:
        m, s, md = _collect_rows(report)
        metric_rows.extend(m)
        summary_rows.extend(s)
        md_lines.extend(md)

    written = []
    metrics_path = out / "metrics.csv"
    with metrics_path.open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(METRICS_COLUMNS)
        for row in metric_rows:
            writer.writerow([_fmt(row.get(c)) for c in METRICS_COLUMNS])
    written.append(metrics_path)

    summary_path = out / "summary.csv"
    with summary_path.open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(SUMMARY_COLUMNS)
        for row in summary_rows:
            writer.writerow([_fmt(row.get(c)) for c in SUMMARY_COLUMNS])
    written.append(summary_path)

    md_path = out / "report.md"
    md_path.write_text("\n".join(md_lines) + "\n", encoding="utf-8")
    written.append(md_path)
    return written
