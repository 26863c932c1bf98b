"""Training loops: single runs, k-fold cross-validation, paired comparisons.

One driver covers both systems under study; they differ only in
configuration. Two presets encode them:

  * ``baseline-sota``: sigmoid activation, unweighted loss, filter widths
    2/3/4 with 2 maps each;
  * ``elreluwl``: continuous modified leaky ReLU (a = 0.03), class-weighted
    loss, filter widths 3/4/5 with 100 maps each.

Batch gradients are *summed* over the batch (one SGD step per batch); the
default learning rates assume that convention. Per-epoch wall-clock times
are recorded but excluded from determinism comparisons - everything else
in a report is bit-reproducible for fixed seeds on one machine.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .corpus import LabeledDataset
from .embedding import EmbeddingTable, Vocabulary
from .evaluation import EvalResult, evaluate
from .functions import Activation, class_weights
from .network import (
    ModelParams,
    NetworkConfig,
    backward,
    forward,
    init_params,
    params_digest,
    sample_loss,
    sgd_step,
)

LOSS_MODES = ("unweighted", "weighted")
REPORT_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    network: NetworkConfig
    loss_mode: str = "weighted"
    learning_rate: float = 0.2
    batch_size: int = 100
    max_epochs: int = 30
    convergence_epsilon: float = 0.001
    convergence_patience: int = 3
    validation_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(f"loss_mode must be one of {LOSS_MODES}")
        if self.batch_size < 1 or self.max_epochs < 1 or self.convergence_patience < 1:
            raise ValueError("batch_size, max_epochs, and patience must be >= 1")
        if self.convergence_epsilon < 0:
            raise ValueError("convergence_epsilon must be >= 0")
        if not (0.0 < self.validation_fraction < 1.0):
            raise ValueError("validation_fraction must lie in (0, 1)")
        if not (self.learning_rate > 0):
            raise ValueError("learning_rate must be positive")


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    train_acc: float
    val_acc: float
    ms: float

    def to_dict(self) -> dict:
        return {
            "epoch": self.epoch,
            "train_loss": self.train_loss,
            "train_acc": self.train_acc,
            "val_acc": self.val_acc,
            "ms": self.ms,
        }


@dataclass
class TrainReport:
    """History and outcome of one training run.

    `train_loss` is the mean per-sample weighted cross-entropy of the epoch
    (the gradient convention stays sum-over-batch). Returned parameters are
    from the epoch with the best validation accuracy, whose digest is
    recorded here.
    """

    seed: int
    epochs: list[EpochStats]
    convergence_epoch: int
    best_validation_accuracy: float
    params_ref: str
    class_weights: dict[int, float]
    run_id: str = ""
    preset: str = ""
    dataset_name: str = ""
    kind: str = field(default="train", repr=False)

    def to_dict(self) -> dict:
        return {
            "version": REPORT_SCHEMA_VERSION,
            "run_id": self.run_id,
            "preset": self.preset,
            "dataset": self.dataset_name,
            "seed": self.seed,
            "epochs": [e.to_dict() for e in self.epochs],
            "convergence_epoch": self.convergence_epoch,
            "best_validation_accuracy": self.best_validation_accuracy,
            "params_ref": self.params_ref,
            "class_weights": {str(c): w for c, w in sorted(self.class_weights.items())},
        }


@dataclass
class CvReport:
    k_folds: int
    seed: int
    fold_reports: list[TrainReport]
    fold_evals: list[EvalResult]
    aggregate: dict[str, float]
    kind: str = field(default="cv", repr=False)

    def to_dict(self) -> dict:
        return {
            "version": REPORT_SCHEMA_VERSION,
            "k_folds": self.k_folds,
            "seed": self.seed,
            "folds": [r.to_dict() for r in self.fold_reports],
            "fold_evals": [e.to_dict() for e in self.fold_evals],
            "aggregate": dict(self.aggregate),
        }


@dataclass
class ArmResult:
    """One side of a paired comparison for one seed."""

    label: str
    report: TrainReport
    result: EvalResult
    wall_ms: float

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "report": self.report.to_dict(),
            "eval": self.result.to_dict(),
            "wall_ms": self.wall_ms,
        }


@dataclass
class ComparisonRow:
    seed: int
    baseline: ArmResult
    proposed: ArmResult

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "baseline": self.baseline.to_dict(),
            "proposed": self.proposed.to_dict(),
        }


@dataclass
class ComparisonReport:
    seeds: list[int]
    rows: list[ComparisonRow]
    win_counts: dict[str, int]
    baseline_label: str = "baseline"
    proposed_label: str = "proposed"
    kind: str = field(default="comparison", repr=False)

    def to_dict(self) -> dict:
        return {
            "version": REPORT_SCHEMA_VERSION,
            "seeds": list(self.seeds),
            "baseline_label": self.baseline_label,
            "proposed_label": self.proposed_label,
            "rows": [r.to_dict() for r in self.rows],
            "win_counts": dict(self.win_counts),
        }


def convergence_epoch(history, epsilon: float, patience: int) -> int:
    """Best-validation epoch under the epsilon/patience early-stop rule.

    Training counts as converged once `patience` consecutive epochs fail to
    beat the running best by more than `epsilon`; the answer is the (1-based)
    epoch holding the running best at that point, or over the full history
    if the rule never triggers.
    """
    history = list(history)
    if not history:
        raise ValueError("history must be non-empty")
    best = -np.inf
    best_epoch = 0
    misses = 0
    for epoch, acc in enumerate(history, start=1):
        if acc > best + epsilon:
            misses = 0
        else:
            misses += 1
        if acc > best:
            best = acc
            best_epoch = epoch
        if misses >= patience:
            return best_epoch
    return best_epoch


def _stratified_split(dataset: LabeledDataset, fraction: float, rng) -> tuple[list[int], list[int]]:
    """Per class, carve off `fraction` of documents (at least one per side)."""
    labels = dataset.labels()
    held: list[int] = []
    rest: list[int] = []
    for label in sorted(dataset.class_counts):
        idx = np.flatnonzero(labels == label)
        if len(idx) < 2:
            raise ValueError(f"class {label} has too few documents to split")
        rng.shuffle(idx)
        n_held = min(max(1, int(fraction * len(idx))), len(idx) - 1)
        held.extend(int(i) for i in idx[:n_held])
        rest.extend(int(i) for i in idx[n_held:])
    return sorted(rest), sorted(held)


def _sentence(table: EmbeddingTable, indices: np.ndarray, max_width: int) -> np.ndarray:
    matrix = table.vectors[indices]
    if matrix.shape[0] < max_width:
        pad = np.zeros((max_width - matrix.shape[0], table.dim))
        matrix = np.vstack([matrix, pad])
    return matrix


def train(
    dataset: LabeledDataset,
    embeddings: tuple[Vocabulary, EmbeddingTable],
    config: TrainConfig,
    run_id: str = "",
    preset: str = "",
    dataset_name: str = "",
) -> tuple[ModelParams, TrainReport]:
    """Train one model; return the best-validation-epoch parameters.

    A stratified validation split is carved from the given data first;
    class weights (weighted mode) come from the remaining training split
    only. Each epoch runs a seeded shuffle and summed-gradient batches,
    then scores the validation split in evaluation mode. Training stops at
    `max_epochs` or once the convergence rule triggers.
    """
    if dataset.k < 2:
        raise ValueError("training needs at least two classes in the dataset")
    vocab, table = embeddings
    net = config.network
    if net.embedding_dim != table.dim:
        raise ValueError(
            f"network expects embedding_dim={net.embedding_dim}, table has {table.dim}"
        )
    rng = np.random.default_rng(config.seed)
    train_idx, val_idx = _stratified_split(dataset, config.validation_fraction, rng)
    train_docs = [dataset.documents[i] for i in train_idx]
    val_docs = [dataset.documents[i] for i in val_idx]

    if config.loss_mode == "weighted":
        weights = class_weights(LabeledDataset.from_documents(train_docs)).weights
    else:
        weights = {c: 1.0 for c in dataset.class_counts}

    max_width = net.max_width
    train_tokens = [vocab.indices(d.tokens) for d in train_docs]
    val_tokens = [vocab.indices(d.tokens) for d in val_docs]

    params = init_params(net)
    best_params = params
    best_acc = -np.inf
    misses = 0
    history: list[EpochStats] = []
    val_history: list[float] = []

    for epoch in range(1, config.max_epochs + 1):
        started = time.perf_counter()
        order = rng.permutation(len(train_docs))
        epoch_loss = 0.0
        correct = 0
        for start in range(0, len(order), config.batch_size):
            batch = order[start : start + config.batch_size]
            batch_grads = params.zeros_like()
            for i in batch:
                doc = train_docs[i]
                sentence = _sentence(table, train_tokens[i], max_width)
                trace = forward(params, sentence, rng=rng)
                weight = weights[doc.label]
                loss = sample_loss(trace, doc.label, weight)
                if not np.isfinite(loss):
                    raise ValueError(
                        f"non-finite loss at epoch {epoch}, "
                        f"batch {start // config.batch_size}"
                    )
                epoch_loss += loss
                correct += int(np.argmax(trace.probs)) == doc.label
                batch_grads.add_scaled(backward(params, trace, doc.label, weight))
            params = sgd_step(params, batch_grads, config.learning_rate)

        val_correct = 0
        for doc, tokens in zip(val_docs, val_tokens):
            trace = forward(params, _sentence(table, tokens, max_width))
            val_correct += int(np.argmax(trace.probs)) == doc.label
        val_acc = val_correct / len(val_docs)
        elapsed_ms = (time.perf_counter() - started) * 1000.0

        history.append(
            EpochStats(
                epoch=epoch,
                train_loss=epoch_loss / len(train_docs),
                train_acc=correct / len(train_docs),
                val_acc=val_acc,
                ms=elapsed_ms,
            )
        )
        val_history.append(val_acc)
        if val_acc > best_acc + config.convergence_epsilon:
            misses = 0
        else:
            misses += 1
        if val_acc > best_acc:
            best_acc = val_acc
            best_params = params
        if misses >= config.convergence_patience:
            break

    report = TrainReport(
        seed=config.seed,
        epochs=history,
        convergence_epoch=convergence_epoch(
            val_history, config.convergence_epsilon, config.convergence_patience
        ),
        best_validation_accuracy=float(max(val_history)),
        params_ref=params_digest(best_params),
        class_weights=dict(weights),
        run_id=run_id,
        preset=preset,
        dataset_name=dataset_name,
    )
    return best_params, report


def _fold_seeds(seed: int, k_folds: int) -> list[int]:
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(k_folds)]


def run_fold_cv(
    dataset: LabeledDataset,
    embeddings: tuple[Vocabulary, EmbeddingTable],
    config: TrainConfig,
    k_folds: int,
    seed: int,
    preset: str = "",
    dataset_name: str = "",
) -> CvReport:
    """Stratified k-fold cross-validation of one configuration.

    Each fold trains on the remainder (with its own internal validation
    split) and is scored on the held-out fold. Aggregates report the mean
    and sample standard deviation over folds.
    """
    from .corpus import kfold_split

    plan = kfold_split(dataset, k_folds, seed)
    fold_reports: list[TrainReport] = []
    fold_evals: list[EvalResult] = []
    for fold, fold_seed in enumerate(_fold_seeds(seed, k_folds)):
        train_ds = dataset.subset(plan.rest_indices(fold))
        test_ds = dataset.subset(plan.fold_indices(fold))
        fold_config = replace(
            config,
            seed=fold_seed,
            network=replace(config.network, seed=fold_seed),
        )
        params, report = train(
            train_ds,
            embeddings,
            fold_config,
            run_id=f"fold{fold}",
            preset=preset,
            dataset_name=dataset_name,
        )
        fold_reports.append(report)
        fold_evals.append(evaluate(params, embeddings, test_ds))

    accuracies = np.array([e.accuracy for e in fold_evals])
    macro = np.array([e.macro_accuracy for e in fold_evals])
    epochs = np.array([r.convergence_epoch for r in fold_reports], dtype=np.float64)
    aggregate = {
        "accuracy_mean": float(accuracies.mean()),
        "accuracy_std": float(accuracies.std(ddof=1)) if k_folds > 1 else 0.0,
        "macro_accuracy_mean": float(macro.mean()),
        "convergence_epoch_mean": float(epochs.mean()),
        "convergence_epoch_std": float(epochs.std(ddof=1)) if k_folds > 1 else 0.0,
    }
    return CvReport(
        k_folds=k_folds,
        seed=seed,
        fold_reports=fold_reports,
        fold_evals=fold_evals,
        aggregate=aggregate,
    )


def compare_runs(
    dataset: LabeledDataset,
    embeddings: tuple[Vocabulary, EmbeddingTable],
    baseline: TrainConfig,
    proposed: TrainConfig,
    seeds,
    baseline_label: str = "baseline",
    proposed_label: str = "proposed",
    dataset_name: str = "",
    test_fraction: float = 0.2,
) -> ComparisonReport:
    """Train both configurations on identical splits for each seed.

    Per seed, a stratified test portion is held out, both arms train on the
    remainder with all seeds pinned to the run seed, and test accuracy,
    per-class accuracy, convergence epoch, and wall time are recorded as a
    paired row. Win counts summarize the pairing.
    """
    seeds = [int(s) for s in seeds]
    if not seeds:
        raise ValueError("need at least one seed to compare")
    rows: list[ComparisonRow] = []
    for seed in seeds:
        split_rng = np.random.default_rng(seed)
        train_idx, test_idx = _stratified_split(dataset, test_fraction, split_rng)
        train_ds = dataset.subset(train_idx)
        test_ds = dataset.subset(test_idx)
        arms = {}
        for label, config in ((baseline_label, baseline), (proposed_label, proposed)):
            run_config = replace(
                config, seed=seed, network=replace(config.network, seed=seed)
            )
            started = time.perf_counter()
            params, report = train(
                train_ds,
                embeddings,
                run_config,
                run_id=f"{label}-seed{seed}",
                preset=label,
                dataset_name=dataset_name,
            )
            wall_ms = (time.perf_counter() - started) * 1000.0
            arms[label] = ArmResult(
                label=label,
                report=report,
                result=evaluate(params, embeddings, test_ds),
                wall_ms=wall_ms,
            )
        rows.append(
            ComparisonRow(
                seed=seed, baseline=arms[baseline_label], proposed=arms[proposed_label]
            )
        )

    win_counts = {
        "accuracy_proposed_wins": sum(
            1 for r in rows if r.proposed.result.accuracy > r.baseline.result.accuracy
        ),
        "accuracy_baseline_wins": sum(
            1 for r in rows if r.baseline.result.accuracy > r.proposed.result.accuracy
        ),
        "accuracy_ties": sum(
            1 for r in rows if r.baseline.result.accuracy == r.proposed.result.accuracy
        ),
        "convergence_proposed_not_slower": sum(
            1
            for r in rows
            if r.proposed.report.convergence_epoch <= r.baseline.report.convergence_epoch
        ),
    }
    return ComparisonReport(
        seeds=seeds,
        rows=rows,
        win_counts=win_counts,
        baseline_label=baseline_label,
        proposed_label=proposed_label,
    )


PRESETS = {
    "baseline-sota": {
        "activation": Activation("sigmoid"),
        "loss_mode": "unweighted",
        "filter_widths": (2, 3, 4),
        "maps_per_width": 2,
    },
    "elreluwl": {
        "activation": Activation("mlrelu-continuous", 0.03),
        "loss_mode": "weighted",
        "filter_widths": (3, 4, 5),
        "maps_per_width": 100,
    },
}


def preset_config(
    name: str,
    embedding_dim: int,
    seed: int = 0,
    dropout_rate: float = 0.4,
    learning_rate: float = 0.2,
    batch_size: int = 100,
    max_epochs: int = 30,
    convergence_epsilon: float = 0.001,
    convergence_patience: int = 3,
    validation_fraction: float = 0.2,
    **overrides,
) -> TrainConfig:
    """Materialize a named preset into a TrainConfig.

    Keyword overrides replace individual preset fields (`activation`,
    `loss_mode`, `filter_widths`, `maps_per_width`).
    """
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    settings = dict(PRESETS[name])
    unknown = set(overrides) - set(settings)
    if unknown:
        raise ValueError(f"unknown preset overrides: {sorted(unknown)}")
    settings.update(overrides)
    network = NetworkConfig(
        filter_widths=settings["filter_widths"],
        maps_per_width=settings["maps_per_width"],
        embedding_dim=embedding_dim,
        dropout_rate=dropout_rate,
        activation=settings["activation"],
        seed=seed,
    )
    return TrainConfig(
        network=network,
        loss_mode=settings["loss_mode"],
        learning_rate=learning_rate,
        batch_size=batch_size,
        max_epochs=max_epochs,
        convergence_epsilon=convergence_epsilon,
        convergence_patience=convergence_patience,
        validation_fraction=validation_fraction,
        seed=seed,
    )
