"""RMSProp training loops: self-supervised pretraining, semi-supervised
pretraining with classification and contrastive terms, and downstream
fine-tuning.

Each step samples two mini-batches, applies the input weights, corrupts both
branches, encodes and decodes, and updates the parameter groups that belong
to the active mode.  All randomness flows from three numpy streams (init,
data order, corruption) derived from the config seed; the streams' states
live inside checkpoints, so a resumed run replays the interrupted
trajectory bit for bit.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
import warnings
from dataclasses import dataclass, field

import numpy as np
import torch

from .corruption import (
    CorruptionConfig,
    CorruptionDraw,
    EmpiricalMarginals,
    draw_corruption,
    fit_marginals,
)
from .data import TableDataset
from .losses import (
    LossConfig,
    LossReport,
    contrastive_loss,
    cross_entropy,
    regularization_penalty,
    reconstruction_loss,
    self_loss,
    semi_loss,
)
from .model import (
    Checkpoint,
    ModelConfig,
    EncodingFault,
    TabularAutoencoder,
    build_model,
    l2_normalize,
    parameter_group,
)

logger = logging.getLogger(__name__)

TRAIN_MODES = ("self", "semi")
UPDATE_GROUPS = {
    "self": ("input_weights", "tokenizer", "encoder", "decoder"),
    "semi": ("input_weights", "tokenizer", "encoder", "decoder", "classifier"),
    "finetune": ("input_weights", "tokenizer", "encoder", "finetune_head"),
    "probe": ("finetune_head",),
}


class NonFiniteGradient(RuntimeError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient for parameter {name!r}")
        self.parameter = name


class TrainingDiverged(RuntimeError):
    """Aborted on a non-finite loss or gradient; carries the last good state."""

    def __init__(self, reason: str, step: int, checkpoint: Checkpoint):
        super().__init__(f"training diverged at step {step}: {reason}")
        self.reason = reason
        self.step = step
        self.checkpoint = checkpoint


@dataclass
class TrainConfig:
    batch_size: int = 128
    epochs: int = 1000
    learning_rate: float = 1e-4
    rmsprop_decay: float = 0.9
    rmsprop_epsilon: float = 1e-8
    corruption_ratio: float = 0.3
    corruption_mode: str = "marginal"
    corruption_sigma: float = 0.1
    loss: LossConfig = field(default_factory=LossConfig)
    mode: str = "self"
    seed: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0 < self.rmsprop_decay < 1:
            raise ValueError("rmsprop_decay must lie in (0, 1)")
        if self.mode not in TRAIN_MODES:
            raise ValueError(f"mode must be one of {TRAIN_MODES}, got {self.mode!r}")

    def corruption(self) -> CorruptionConfig:
        return CorruptionConfig(
            ratio=self.corruption_ratio,
            seed=self.seed,
            mode=self.corruption_mode,
            sigma=self.corruption_sigma,
        )


@dataclass
class Batch:
    X: np.ndarray
    y: np.ndarray | None
    indices: np.ndarray


def rmsprop_step(
    params: dict[str, torch.Tensor],
    grads: dict[str, torch.Tensor],
    accumulators: dict[str, torch.Tensor],
    lr: float,
    rho: float,
    eps: float,
) -> tuple[dict[str, torch.Tensor], dict[str, torch.Tensor]]:
    """One RMSProp update: acc <- rho*acc + (1-rho)*g^2, then
    theta <- theta - lr*g/(sqrt(acc) + eps), elementwise."""
    new_params: dict[str, torch.Tensor] = {}
    new_acc: dict[str, torch.Tensor] = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = torch.zeros_like(p)
        if not torch.isfinite(g).all():
            raise NonFiniteGradient(name)
        acc = accumulators.get(name)
        if acc is None:
            acc = torch.zeros_like(p)
        acc = rho * acc + (1.0 - rho) * g * g
        new_acc[name] = acc
        new_params[name] = p - lr * g / (acc.sqrt() + eps)
    return new_params, new_acc


def sample_two_batches(
    dataset: TableDataset, batch_size: int, rng: np.random.Generator
) -> tuple[Batch, Batch]:
    """Two independent uniform samples of rows, each without replacement.

    Overlap between the two batches is permitted.  When the dataset is
    smaller than the requested batch, the batch shrinks with a warning.
    """
    n = dataset.n_samples
    if n == 0:
        raise ValueError("cannot sample from an empty dataset")
    if batch_size > n:
        warnings.warn(
            f"batch size {batch_size} exceeds dataset size {n}; using {n}",
            stacklevel=2,
        )
        batch_size = n

    def one() -> Batch:
        idx = rng.choice(n, size=batch_size, replace=False)
        return Batch(
            X=dataset.X[idx],
            y=None if dataset.y is None else dataset.y[idx],
            indices=idx,
        )

    return one(), one()


def _derive_streams(seed: int) -> tuple[np.random.Generator, ...]:
    children = np.random.SeedSequence(seed).spawn(3)
    return tuple(np.random.default_rng(c) for c in children)


def _rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def _restore_rng(state: dict) -> np.random.Generator:
    rng = np.random.default_rng()
    rng.bit_generator.state = state
    return rng


def _infer_n_classes(dataset: TableDataset) -> int:
    if dataset.label_classes is not None:
        return max(2, len(dataset.label_classes))
    if dataset.y is None:
        return 2
    labeled = dataset.y[dataset.y >= 0]
    return 2 if labeled.size == 0 else max(2, int(labeled.max()) + 1)


def _compose_corruption(
    weighted: torch.Tensor, draw: CorruptionDraw
) -> torch.Tensor:
    mask = torch.from_numpy(draw.mask)
    if draw.replacements is not None:
        return torch.where(mask, torch.from_numpy(draw.replacements), weighted)
    return weighted + mask * torch.from_numpy(draw.noise)


class _LossLog:
    """Append-only JSONL writer: step, the five scalars, then wall-clock."""

    def __init__(self, path, append: bool):
        self._fh = open(path, "a" if append else "w", encoding="utf-8") if path else None

    def write(self, report: LossReport) -> None:
        if self._fh is None:
            return
        record = {
            "step": report.step,
            "reconstruction": report.reconstruction,
            "classification": report.classification,
            "contrastive": report.contrastive,
            "penalty": report.penalty,
            "total": report.total,
            "wall_clock": time.time(),
        }
        self._fh.write(json.dumps(record, sort_keys=True) + "\n")

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()


def _make_checkpoint(
    model: TabularAutoencoder,
    accumulators: dict[str, torch.Tensor],
    step: int,
    data_rng: np.random.Generator,
    corruption_rng: np.random.Generator,
    config: TrainConfig,
    preprocessor_hash: str,
) -> Checkpoint:
    return Checkpoint.from_model(
        model,
        step=step,
        preprocessor_hash=preprocessor_hash,
        rmsprop=accumulators,
        rng_state={
            "data": _rng_state(data_rng),
            "corruption": _rng_state(corruption_rng),
        },
        train_meta={
            "mode": config.mode,
            "train_config": dataclasses.asdict(config),
        },
    )


def _pretrain(
    dataset: TableDataset,
    config: TrainConfig,
    model_config: ModelConfig | None,
    resume_from: Checkpoint | None,
    checkpoint_path,
    checkpoint_dir,
    log_path,
    preprocessor_hash: str,
) -> tuple[Checkpoint, list[LossReport]]:
    mode = config.mode
    n, n_features = dataset.X.shape
    marginals = fit_marginals(dataset)
    corruption_config = config.corruption()

    init_rng, data_rng, corruption_rng = _derive_streams(config.seed)
    if resume_from is not None:
        if resume_from.config.n_features != n_features:
            raise ValueError(
                "checkpoint feature count does not match the dataset"
            )
        model = resume_from.build_model()
        accumulators = {
            name: torch.from_numpy(arr.copy())
            for name, arr in resume_from.rmsprop.items()
        }
        if resume_from.rng_state is not None:
            data_rng = _restore_rng(resume_from.rng_state["data"])
            corruption_rng = _restore_rng(resume_from.rng_state["corruption"])
        step = resume_from.step
    else:
        if model_config is None:
            model_config = ModelConfig(
                n_features=n_features, n_classes=_infer_n_classes(dataset)
            )
        model = build_model(model_config, init_rng)
        accumulators = {}
        step = 0

    batch_size = min(config.batch_size, n)
    steps_per_epoch = math.ceil(n / batch_size)
    total_steps = config.epochs * steps_per_epoch

    params = dict(model.named_parameters())
    update_names = [
        name for name in params if parameter_group(name) in UPDATE_GROUPS[mode]
    ]
    X_t = torch.from_numpy(np.ascontiguousarray(dataset.X))
    y_all = dataset.y
    lam, p = config.loss.lam, config.loss.p
    alpha, beta, margin = config.loss.alpha, config.loss.beta, config.loss.margin

    log = _LossLog(log_path, append=resume_from is not None)
    reports: list[LossReport] = []
    epoch_totals: list[float] = []
    try:
        while step < total_steps:
            b1, b2 = sample_two_batches(dataset, batch_size, data_rng)
            d1 = draw_corruption(
                len(b1.indices), n_features, marginals, corruption_config, corruption_rng
            )
            d2 = draw_corruption(
                len(b2.indices), n_features, marginals, corruption_config, corruption_rng
            )
            x1, x2 = X_t[b1.indices], X_t[b2.indices]

            def snapshot() -> Checkpoint:
                return _make_checkpoint(
                    model, accumulators, step, data_rng, corruption_rng,
                    config, preprocessor_hash,
                )

            try:
                z1 = model.encode(_compose_corruption(model.apply_input_weights(x1), d1))
                z2 = model.encode(_compose_corruption(model.apply_input_weights(x2), d2))
            except EncodingFault as fault:
                raise TrainingDiverged(str(fault), step + 1, snapshot()) from fault

            recon = reconstruction_loss(x1, model.decode(z1), x2, model.decode(z2))
            penalty = regularization_penalty(model.input_weights, lam, p)
            self_term = self_loss(recon, penalty)
            zero = x1.new_zeros(())
            cls_term, con_term = zero, zero
            if mode == "semi":
                y1 = torch.from_numpy(b1.y)
                y2 = torch.from_numpy(b2.y)
                labeled1, labeled2 = y1 >= 0, y2 >= 0
                cls_term = zero
                if bool(labeled1.any()):
                    cls_term = cls_term + cross_entropy(
                        model.classify(z1[labeled1]), y1[labeled1]
                    )
                if bool(labeled2.any()):
                    cls_term = cls_term + cross_entropy(
                        model.classify(z2[labeled2]), y2[labeled2]
                    )
                paired = labeled1 & labeled2
                if bool(paired.any()):
                    con_term = contrastive_loss(
                        l2_normalize(z1[paired]),
                        l2_normalize(z2[paired]),
                        y1[paired],
                        y2[paired],
                        margin,
                    )
                total = semi_loss(self_term, cls_term, con_term, alpha, beta)
            else:
                total = self_term

            if not torch.isfinite(total):
                raise TrainingDiverged("non-finite loss", step + 1, snapshot())

            total.backward()
            grads = {
                name: params[name].grad
                for name in update_names
                if params[name].grad is not None
            }
            subset = {name: params[name] for name in update_names}
            try:
                new_params, new_acc = rmsprop_step(
                    subset, grads, accumulators,
                    config.learning_rate, config.rmsprop_decay, config.rmsprop_epsilon,
                )
            except NonFiniteGradient as bad:
                raise TrainingDiverged(str(bad), step + 1, snapshot()) from bad
            with torch.no_grad():
                for name, value in new_params.items():
                    params[name].copy_(value)
            accumulators.update(new_acc)
            for param in params.values():
                param.grad = None

            step += 1
            report = LossReport(
                step=step,
                reconstruction=float(recon.detach()),
                classification=float(cls_term.detach()),
                contrastive=float(con_term.detach()),
                penalty=float(penalty.detach()),
                total=float(total.detach()),
            )
            reports.append(report)
            log.write(report)
            epoch_totals.append(report.total)
            if step % steps_per_epoch == 0:
                logger.info(
                    "epoch %d/%d mean loss %.6f",
                    step // steps_per_epoch,
                    config.epochs,
                    sum(epoch_totals) / len(epoch_totals),
                )
                epoch_totals.clear()
            if (
                config.checkpoint_every
                and checkpoint_dir is not None
                and step % config.checkpoint_every == 0
            ):
                _make_checkpoint(
                    model, accumulators, step, data_rng, corruption_rng,
                    config, preprocessor_hash,
                ).save(f"{checkpoint_dir}/step_{step:08d}.ckpt")
    finally:
        log.close()

    final = _make_checkpoint(
        model, accumulators, step, data_rng, corruption_rng, config, preprocessor_hash
    )
    if checkpoint_path is not None:
        final.save(checkpoint_path)
    return final, reports


def pretrain_self(
    dataset: TableDataset,
    config: TrainConfig,
    model_config: ModelConfig | None = None,
    resume_from: Checkpoint | None = None,
    checkpoint_path=None,
    checkpoint_dir=None,
    log_path=None,
    preprocessor_hash: str = "",
) -> tuple[Checkpoint, list[LossReport]]:
    """Reconstruction + penalty pretraining; classifier head stays untouched."""
    if config.mode != "self":
        raise ValueError("pretrain_self requires config.mode == 'self'")
    return _pretrain(
        dataset, config, model_config, resume_from,
        checkpoint_path, checkpoint_dir, log_path, preprocessor_hash,
    )


def pretrain_semi(
    dataset: TableDataset,
    config: TrainConfig,
    model_config: ModelConfig | None = None,
    resume_from: Checkpoint | None = None,
    checkpoint_path=None,
    checkpoint_dir=None,
    log_path=None,
    preprocessor_hash: str = "",
) -> tuple[Checkpoint, list[LossReport]]:
    """Pretraining with classification and contrastive terms on labeled rows.

    Unlabeled rows still contribute to reconstruction; with no labeled rows
    at all the run degenerates to self-supervised pretraining (with a
    warning).
    """
    if config.mode != "semi":
        raise ValueError("pretrain_semi requires config.mode == 'semi'")
    if dataset.y is None or not (dataset.y >= 0).any():
        warnings.warn(
            "no labeled rows; degenerating to self-supervised pretraining",
            stacklevel=2,
        )
        config = dataclasses.replace(config, mode="self")
    return _pretrain(
        dataset, config, model_config, resume_from,
        checkpoint_path, checkpoint_dir, log_path, preprocessor_hash,
    )


class FinetunedModel:
    """Encoder plus trained linear head, exposing probability predictions."""

    def __init__(self, model: TabularAutoencoder, loss_log: list[float]):
        self.model = model
        self.loss_log = loss_log

    def predict_proba(self, X: np.ndarray, chunk_size: int = 512) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        outputs = []
        with torch.no_grad():
            for start in range(0, len(X), chunk_size):
                x = torch.from_numpy(X[start : start + chunk_size])
                logits = self.model.finetune_logits(self.model.embed(x))
                outputs.append(torch.softmax(logits, dim=-1).numpy())
        return (
            np.concatenate(outputs)
            if outputs
            else np.empty((0, self.model.config.n_classes))
        )

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.predict_proba(X).argmax(axis=1)

    def checkpoint(self, preprocessor_hash: str = "") -> Checkpoint:
        return Checkpoint.from_model(
            self.model, preprocessor_hash=preprocessor_hash,
            train_meta={"mode": "finetune"},
        )


def finetune(
    checkpoint: Checkpoint,
    dataset: TableDataset,
    epochs: int,
    lr: float | None = None,
    batch_size: int | None = None,
    seed: int = 0,
    freeze_encoder: bool = False,
    rmsprop_decay: float | None = None,
    rmsprop_epsilon: float | None = None,
) -> FinetunedModel:
    """Attach the linear head and train end to end with cross-entropy.

    All encoder-side parameters unfreeze (unless ``freeze_encoder`` turns
    the run into a linear probe); no corruption is applied.  Hyperparameters
    default to the pretraining ones recorded in the checkpoint.
    """
    if dataset.y is None:
        raise ValueError("fine-tuning requires a labeled dataset")
    labeled = np.flatnonzero(dataset.y >= 0)
    if labeled.size == 0:
        raise ValueError("fine-tuning requires at least one labeled row")
    if epochs < 0:
        raise ValueError("epochs must be nonnegative")
    y_max = int(dataset.y[labeled].max())
    if y_max >= checkpoint.config.n_classes:
        raise ValueError(
            f"dataset has class index {y_max} but the head covers "
            f"{checkpoint.config.n_classes} classes"
        )

    pretrained = (checkpoint.train_meta or {}).get("train_config", {})
    lr = lr if lr is not None else pretrained.get("learning_rate", 1e-4)
    batch_size = (
        batch_size if batch_size is not None else pretrained.get("batch_size", 128)
    )
    rho = rmsprop_decay if rmsprop_decay is not None else pretrained.get("rmsprop_decay", 0.9)
    eps = (
        rmsprop_epsilon
        if rmsprop_epsilon is not None
        else pretrained.get("rmsprop_epsilon", 1e-8)
    )

    model = checkpoint.build_model()
    subset = dataset.take(labeled)
    n = subset.n_samples
    batch_size = min(batch_size, n)
    X_t = torch.from_numpy(np.ascontiguousarray(subset.X))
    y_t = torch.from_numpy(subset.y)

    groups = UPDATE_GROUPS["probe" if freeze_encoder else "finetune"]
    params = dict(model.named_parameters())
    update_names = [name for name in params if parameter_group(name) in groups]
    accumulators: dict[str, torch.Tensor] = {}
    rng = np.random.default_rng(seed)
    loss_log: list[float] = []

    total_steps = epochs * math.ceil(n / batch_size)
    for step in range(total_steps):
        idx = rng.choice(n, size=batch_size, replace=False)
        idx_t = torch.from_numpy(idx)
        logits = model.finetune_logits(model.embed(X_t[idx_t]))
        loss = cross_entropy(logits, y_t[idx_t])
        if not torch.isfinite(loss):
            raise TrainingDiverged(
                "non-finite fine-tuning loss", step + 1,
                Checkpoint.from_model(model, step=step),
            )
        loss.backward()
        grads = {
            name: params[name].grad
            for name in update_names
            if params[name].grad is not None
        }
        new_params, new_acc = rmsprop_step(
            {name: params[name] for name in update_names},
            grads, accumulators, lr, rho, eps,
        )
        with torch.no_grad():
            for name, value in new_params.items():
                params[name].copy_(value)
        accumulators.update(new_acc)
        for param in params.values():
            param.grad = None
        loss_log.append(float(loss.detach()))

    return FinetunedModel(model, loss_log)
