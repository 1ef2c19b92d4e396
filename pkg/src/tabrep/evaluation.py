"""Metrics, embedding export, feature concatenation, an in-repo logistic
baseline, external-classifier adapters, and the corruption-ratio ablation
runner.

AUROC uses the exact pairwise (rank) formulation with half credit for ties.
External baselines plug in through a narrow fit/predict-proba contract or a
CSV-exchange subprocess boundary; a missing adapter is reported as skipped,
never as a failure.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import subprocess
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from scipy.optimize import minimize

from .data import TableDataset
from .model import Checkpoint, l2_normalize
from .training import TrainConfig, finetune, pretrain_semi

logger = logging.getLogger(__name__)

FEATURE_MODES = ("raw", "distilled", "concat")
FLOAT_FORMAT = "%.17g"


class MetricUndefined(ValueError):
    """The requested metric has no value on these inputs."""


@dataclass
class EmbeddingBatch:
    Z: np.ndarray  # (n, z_dim), unit rows
    source_checkpoint: str
    row_ids: np.ndarray


@dataclass
class MetricReport:
    dataset: str
    method: str
    feature_mode: str
    metric: str
    value: float
    n_test: int
    warning: str | None = None

    def __post_init__(self):
        if not 0.0 <= self.value <= 1.0:
            raise ValueError(f"metric value must lie in [0, 1], got {self.value}")
        if self.n_test <= 0:
            raise ValueError("n_test must be positive")


@dataclass
class SkippedBaseline:
    dataset: str
    method: str
    reason: str


def auroc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Pairwise AUROC with average-rank tie handling.

    Equals (#correctly ordered positive/negative pairs + half the ties)
    divided by n_pos * n_neg.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be aligned vectors")
    if not np.isin(labels, (0, 1)).all():
        raise MetricUndefined("labels must be binary (0/1)")
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise MetricUndefined("AUROC needs both classes present")
    _, inverse, counts = np.unique(scores, return_inverse=True, return_counts=True)
    upper = np.cumsum(counts)
    mean_ranks = (upper - counts + 1 + upper) / 2.0
    ranks = mean_ranks[inverse]
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def accuracy(predictions: np.ndarray, labels: np.ndarray) -> float:
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape:
        raise ValueError("predictions and labels must share a shape")
    if predictions.size == 0:
        raise MetricUndefined("accuracy of an empty prediction set")
    return float((predictions == labels).mean())


def embed_dataset(
    checkpoint: Checkpoint, dataset: TableDataset, chunk_size: int = 512
) -> EmbeddingBatch:
    """Encode rows with frozen parameters and L2-normalize the embeddings."""
    if checkpoint.config.n_features != dataset.n_features:
        raise ValueError(
            f"checkpoint expects {checkpoint.config.n_features} features, "
            f"dataset has {dataset.n_features}"
        )
    model = checkpoint.build_model()
    chunks = []
    with torch.no_grad():
        for start in range(0, dataset.n_samples, chunk_size):
            x = torch.from_numpy(dataset.X[start : start + chunk_size])
            chunks.append(l2_normalize(model.embed(x)).numpy())
    Z = (
        np.concatenate(chunks)
        if chunks
        else np.empty((0, checkpoint.config.z_dim))
    )
    return EmbeddingBatch(
        Z=Z, source_checkpoint=checkpoint.digest(), row_ids=dataset.row_ids.copy()
    )


def export_embeddings(batch: EmbeddingBatch, path) -> None:
    """CSV export: row_id then z_0..z_{k-1}, 17 significant digits."""
    with open(path, "w", encoding="utf-8") as fh:
        header = ["row_id"] + [f"z_{j}" for j in range(batch.Z.shape[1])]
        fh.write(",".join(header) + "\n")
        for rid, row in zip(batch.row_ids, batch.Z):
            cells = [str(int(rid))] + [FLOAT_FORMAT % v for v in row]
            fh.write(",".join(cells) + "\n")


def concat_features(dataset: TableDataset, embeddings: EmbeddingBatch) -> TableDataset:
    """Append embedding columns to the raw features, aligned by row ids."""
    if not np.array_equal(dataset.row_ids, embeddings.row_ids):
        raise ValueError("dataset and embeddings have misaligned row ids")
    Z = embeddings.Z
    return TableDataset(
        X=np.hstack([dataset.X, Z]),
        y=None if dataset.y is None else dataset.y.copy(),
        columns=list(dataset.columns) + [f"emb_{j}" for j in range(Z.shape[1])],
        row_ids=dataset.row_ids.copy(),
        label_classes=dataset.label_classes,
    )


def distilled_dataset(dataset: TableDataset, embeddings: EmbeddingBatch) -> TableDataset:
    """Embeddings-only variant of a dataset (labels carried through)."""
    if not np.array_equal(dataset.row_ids, embeddings.row_ids):
        raise ValueError("dataset and embeddings have misaligned row ids")
    return TableDataset(
        X=embeddings.Z.copy(),
        y=None if dataset.y is None else dataset.y.copy(),
        columns=[f"emb_{j}" for j in range(embeddings.Z.shape[1])],
        row_ids=dataset.row_ids.copy(),
        label_classes=dataset.label_classes,
    )


def refit_unit_range(
    train: TableDataset, *others: TableDataset
) -> tuple[TableDataset, ...]:
    """Refit min-max scaling on the training matrix and apply it everywhere.

    Constant columns map to 0.0; transformed values clip into [0, 1].
    """
    lo = train.X.min(axis=0)
    hi = train.X.max(axis=0)
    span = hi - lo

    def rescale(ds: TableDataset) -> TableDataset:
        with np.errstate(invalid="ignore", divide="ignore"):
            X = (ds.X - lo) / span
        X[:, span == 0] = 0.0
        np.clip(X, 0.0, 1.0, out=X)
        return TableDataset(
            X=X,
            y=None if ds.y is None else ds.y.copy(),
            columns=list(ds.columns),
            row_ids=ds.row_ids.copy(),
            label_classes=ds.label_classes,
        )

    return tuple(rescale(ds) for ds in (train,) + others)


@dataclass(frozen=True)
class LogisticConfig:
    reg: float = 1e-6
    max_iter: int = 500
    grad_tol: float = 1e-6


def fit_logistic(
    X: np.ndarray, y: np.ndarray, config: LogisticConfig = LogisticConfig()
) -> tuple[np.ndarray, np.ndarray, bool]:
    """Multinomial logistic fit by L-BFGS on L2-regularized cross-entropy.

    Deterministic (zero start, no randomness).  Returns (weights (C, M),
    biases (C,), converged).
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    n, m = X.shape
    n_classes = int(y.max()) + 1
    onehot = np.zeros((n, n_classes))
    onehot[np.arange(n), y] = 1.0

    def objective(flat: np.ndarray):
        wb = flat.reshape(n_classes, m + 1)
        w, b = wb[:, :m], wb[:, m]
        logits = X @ w.T + b
        logits -= logits.max(axis=1, keepdims=True)
        expl = np.exp(logits)
        probs = expl / expl.sum(axis=1, keepdims=True)
        nll = -np.log(np.clip(probs[np.arange(n), y], 1e-300, None)).mean()
        value = nll + 0.5 * config.reg * (w * w).sum()
        grad_logits = (probs - onehot) / n
        grad_w = grad_logits.T @ X + config.reg * w
        grad_b = grad_logits.sum(axis=0)
        return value, np.hstack([grad_w, grad_b[:, None]]).ravel()

    result = minimize(
        objective,
        np.zeros(n_classes * (m + 1)),
        jac=True,
        method="L-BFGS-B",
        options={"maxiter": config.max_iter, "gtol": config.grad_tol, "ftol": 0.0},
    )
    wb = result.x.reshape(n_classes, m + 1)
    return wb[:, :m], wb[:, m], bool(result.success)


def predict_logistic(
    weights: np.ndarray, biases: np.ndarray, X: np.ndarray
) -> np.ndarray:
    logits = np.asarray(X, dtype=np.float64) @ weights.T + biases
    logits -= logits.max(axis=1, keepdims=True)
    expl = np.exp(logits)
    return expl / expl.sum(axis=1, keepdims=True)


def _score_predictions(
    scores: np.ndarray, test_y: np.ndarray
) -> tuple[str, float]:
    n_classes = scores.shape[1]
    if n_classes == 2:
        return "auroc", auroc(scores[:, 1], test_y)
    return "accuracy", accuracy(scores.argmax(axis=1), test_y)


def logistic_regression(
    train: TableDataset,
    test: TableDataset,
    config: LogisticConfig = LogisticConfig(),
    dataset_name: str = "",
    feature_mode: str = "raw",
    method_name: str = "logistic",
) -> MetricReport:
    """Fit the in-repo logistic baseline and report AUROC or accuracy."""
    if train.y is None or test.y is None:
        raise ValueError("logistic baseline requires labeled train and test data")
    labeled = np.flatnonzero(train.y >= 0)
    weights, biases, converged = fit_logistic(
        train.X[labeled], train.y[labeled], config
    )
    scores = predict_logistic(weights, biases, test.X)
    metric, value = _score_predictions(scores, test.y)
    return MetricReport(
        dataset=dataset_name,
        method=method_name,
        feature_mode=feature_mode,
        metric=metric,
        value=value,
        n_test=test.n_samples,
        warning=None if converged else "solver did not converge",
    )


# adapters map (train_X, train_y, test_X) -> per-class scores (n_test, C)
AdapterFn = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]
_ADAPTERS: dict[str, AdapterFn] = {}


def register_adapter(name: str, fn: AdapterFn) -> None:
    _ADAPTERS[name] = fn


def unregister_adapter(name: str) -> None:
    _ADAPTERS.pop(name, None)


def registered_adapters() -> list[str]:
    return sorted(_ADAPTERS)


def command_adapter(command: list[str]) -> AdapterFn:
    """Wrap an external classifier behind the CSV exchange protocol.

    The command is invoked as ``command train.csv test.csv scores.csv``;
    train.csv carries the feature columns plus a final ``label`` column,
    test.csv the features only, and scores.csv must come back with one
    probability column per class.  A nonzero exit status is an error.
    """

    def run(train_X: np.ndarray, train_y: np.ndarray, test_X: np.ndarray) -> np.ndarray:
        with tempfile.TemporaryDirectory() as tmp:
            tmp_path = Path(tmp)
            train_file = tmp_path / "train.csv"
            test_file = tmp_path / "test.csv"
            scores_file = tmp_path / "scores.csv"
            n_features = train_X.shape[1]
            header = [f"f_{j}" for j in range(n_features)]
            with open(train_file, "w", encoding="utf-8") as fh:
                fh.write(",".join(header + ["label"]) + "\n")
                for row, label in zip(train_X, train_y):
                    fh.write(
                        ",".join([FLOAT_FORMAT % v for v in row] + [str(int(label))])
                        + "\n"
                    )
            with open(test_file, "w", encoding="utf-8") as fh:
                fh.write(",".join(header) + "\n")
                for row in test_X:
                    fh.write(",".join(FLOAT_FORMAT % v for v in row) + "\n")
            proc = subprocess.run(
                command + [str(train_file), str(test_file), str(scores_file)],
                capture_output=True,
                text=True,
            )
            if proc.returncode != 0:
                raise RuntimeError(
                    f"adapter command failed (exit {proc.returncode}): {proc.stderr}"
                )
            with open(scores_file, newline="", encoding="utf-8") as fh:
                reader = csv.reader(fh)
                next(reader)  # header
                scores = np.array([[float(v) for v in row] for row in reader])
        if scores.shape[0] != test_X.shape[0]:
            raise RuntimeError("adapter returned a wrong number of score rows")
        return scores

    return run


def baseline_adapter(
    name: str,
    train: TableDataset,
    test: TableDataset,
    dataset_name: str = "",
    feature_mode: str = "raw",
) -> MetricReport | SkippedBaseline:
    """Run a registered external baseline; absent adapters are skipped."""
    fn = _ADAPTERS.get(name)
    if fn is None:
        logger.warning("baseline adapter %r is not registered; skipping", name)
        return SkippedBaseline(
            dataset=dataset_name, method=name, reason="adapter not registered"
        )
    if train.y is None or test.y is None:
        raise ValueError("baseline adapters require labeled train and test data")
    labeled = np.flatnonzero(train.y >= 0)
    scores = fn(train.X[labeled], train.y[labeled], test.X)
    metric, value = _score_predictions(scores, test.y)
    return MetricReport(
        dataset=dataset_name,
        method=name,
        feature_mode=feature_mode,
        metric=metric,
        value=value,
        n_test=test.n_samples,
    )


def evaluate_feature_modes(
    train: TableDataset,
    test: TableDataset,
    checkpoint: Checkpoint | None = None,
    modes: tuple[str, ...] = FEATURE_MODES,
    methods: tuple[str, ...] = ("logistic",),
    dataset_name: str = "",
    logistic_config: LogisticConfig = LogisticConfig(),
) -> list[MetricReport | SkippedBaseline]:
    """Run every (method, feature mode) evaluation cell.

    ``raw`` uses the preprocessed features; ``distilled`` the frozen
    embeddings alone; ``concat`` appends embeddings to the raw features and
    refits min-max scaling on the training matrix so every column shares
    the [0, 1] range.
    """
    unknown = [m for m in modes if m not in FEATURE_MODES]
    if unknown:
        raise ValueError(f"unknown feature modes: {unknown}")
    needs_embeddings = any(m in ("distilled", "concat") for m in modes)
    if needs_embeddings and checkpoint is None:
        raise ValueError("distilled/concat modes require a checkpoint")

    pairs: dict[str, tuple[TableDataset, TableDataset]] = {}
    if "raw" in modes:
        pairs["raw"] = (train, test)
    if needs_embeddings:
        emb_train = embed_dataset(checkpoint, train)
        emb_test = embed_dataset(checkpoint, test)
        if "distilled" in modes:
            pairs["distilled"] = (
                distilled_dataset(train, emb_train),
                distilled_dataset(test, emb_test),
            )
        if "concat" in modes:
            cat_train = concat_features(train, emb_train)
            cat_test = concat_features(test, emb_test)
            pairs["concat"] = refit_unit_range(cat_train, cat_test)

    reports: list[MetricReport | SkippedBaseline] = []
    for mode in modes:
        tr, te = pairs[mode]
        for method in methods:
            if method == "logistic":
                reports.append(
                    logistic_regression(
                        tr, te, logistic_config,
                        dataset_name=dataset_name, feature_mode=mode,
                    )
                )
            else:
                reports.append(
                    baseline_adapter(
                        method, tr, te, dataset_name=dataset_name, feature_mode=mode
                    )
                )
    return reports


def ablation_runner(
    train: TableDataset,
    test: TableDataset,
    ratios: list[float],
    config: TrainConfig,
    dataset_name: str = "",
    finetune_epochs: int = 30,
    finetune_lr: float | None = None,
    finetune_seed: int = 0,
) -> list[MetricReport]:
    """Sweep the corruption ratio: pretrain (semi), fine-tune, evaluate.

    Returns one report per ratio, with the ratio recorded in the method
    name; render with :func:`render_ablation_table`.
    """
    if any(r < 0 or r > 1 for r in ratios):
        raise ValueError("corruption ratios must lie in [0, 1]")
    if test.y is None:
        raise ValueError("ablation evaluation requires labeled test data")
    reports = []
    for ratio in ratios:
        run_config = dataclasses.replace(
            config, corruption_ratio=ratio, mode="semi"
        )
        checkpoint, _ = pretrain_semi(train, run_config)
        tuned = finetune(
            checkpoint, train, epochs=finetune_epochs,
            lr=finetune_lr, seed=finetune_seed,
        )
        scores = tuned.predict_proba(test.X)
        metric, value = _score_predictions(scores, test.y)
        reports.append(
            MetricReport(
                dataset=dataset_name,
                method=f"ratio={ratio:g}",
                feature_mode="raw",
                metric=metric,
                value=value,
                n_test=test.n_samples,
            )
        )
        logger.info("ablation %s ratio %g: %s %.4f", dataset_name, ratio, metric, value)
    return reports


def render_metric_table(reports: list[MetricReport | SkippedBaseline]) -> str:
    """Method-by-feature-mode table, one block per dataset."""
    real = [r for r in reports if isinstance(r, MetricReport)]
    skipped = [r for r in reports if isinstance(r, SkippedBaseline)]
    lines = []
    for dataset in sorted({r.dataset for r in real}):
        rows = [r for r in real if r.dataset == dataset]
        modes = [m for m in FEATURE_MODES if any(r.feature_mode == m for r in rows)]
        methods = sorted({r.method for r in rows})
        lines.append(f"dataset: {dataset or '(unnamed)'}")
        lines.append("  ".join([f"{'method':<16}"] + [f"{m:>10}" for m in modes]))
        for method in methods:
            cells = []
            for mode in modes:
                match = [r for r in rows if r.method == method and r.feature_mode == mode]
                cells.append(f"{match[0].value:>10.3f}" if match else f"{'-':>10}")
            lines.append("  ".join([f"{method:<16}"] + cells))
        lines.append("")
    for skip in skipped:
        lines.append(f"skipped: {skip.method} ({skip.reason})")
    return "\n".join(lines).rstrip() + "\n"


def render_ablation_table(reports: list[MetricReport]) -> str:
    """Dataset-by-ratio table with the per-row maximum starred."""
    ratios = list(dict.fromkeys(r.method.removeprefix("ratio=") for r in reports))
    lines = ["  ".join([f"{'dataset':<16}"] + [f"{r:>8}" for r in ratios])]
    for dataset in dict.fromkeys(r.dataset for r in reports):
        rows = {r.method.removeprefix("ratio="): r for r in reports if r.dataset == dataset}
        best = max(rows.values(), key=lambda r: r.value).value
        cells = []
        for ratio in ratios:
            report = rows.get(ratio)
            if report is None:
                cells.append(f"{'-':>8}")
            else:
                mark = "*" if report.value == best else " "
                cells.append(f"{report.value:>7.3f}{mark}")
        lines.append("  ".join([f"{dataset or '(unnamed)':<16}"] + cells))
    return "\n".join(lines) + "\n"


def write_reports_jsonl(reports: list[MetricReport | SkippedBaseline], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for report in reports:
            record = dataclasses.asdict(report)
            record["kind"] = (
                "metric" if isinstance(report, MetricReport) else "skipped"
            )
            fh.write(json.dumps(record, sort_keys=True) + "\n")
