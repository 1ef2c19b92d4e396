"""Feature corruption: swap randomly chosen entries for draws from each
feature's empirical marginal over the training set.

Per row, exactly ``t = round(ratio * M)`` distinct feature indices are chosen
uniformly without replacement and replaced by values sampled uniformly from
that feature's training-column pool.  An additive Gaussian-noise mode is
available behind the same config for ablations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import TableDataset

CORRUPTION_MODES = ("marginal", "gaussian")


@dataclass(frozen=True)
class CorruptionConfig:
    ratio: float
    seed: int = 0
    mode: str = "marginal"
    sigma: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.ratio <= 1.0:
            raise ValueError(f"corruption ratio must lie in [0, 1], got {self.ratio}")
        if self.mode not in CORRUPTION_MODES:
            raise ValueError(f"unknown corruption mode: {self.mode!r}")
        if self.sigma <= 0:
            raise ValueError("gaussian corruption sigma must be positive")


@dataclass
class EmpiricalMarginals:
    """Column-wise value pools; ``pools[j]`` is feature j's training column."""

    pools: np.ndarray  # shape (M, n_train)

    @property
    def n_features(self) -> int:
        return self.pools.shape[0]

    @property
    def pool_size(self) -> int:
        return self.pools.shape[1]


@dataclass
class CorruptionDraw:
    """One realized corruption: which entries change and to what."""

    mask: np.ndarray  # bool (n, M)
    replacements: np.ndarray | None = None  # marginal mode, (n, M)
    noise: np.ndarray | None = None  # gaussian mode, (n, M)


def replaced_count(ratio: float, n_features: int) -> int:
    """t = round(ratio * M), with halves rounded up."""
    t = int(math.floor(ratio * n_features + 0.5))
    return min(max(t, 0), n_features)


def fit_marginals(train: TableDataset) -> EmpiricalMarginals:
    """Collect per-feature value pools from the training matrix."""
    if train.n_samples == 0:
        raise ValueError("cannot fit marginals on an empty dataset")
    X = train.X
    if X.min() < 0.0 or X.max() > 1.0:
        raise ValueError("marginals expect preprocessed values in [0, 1]")
    return EmpiricalMarginals(pools=np.ascontiguousarray(X.T).copy())


def draw_corruption(
    n_rows: int,
    n_features: int,
    marginals: EmpiricalMarginals | None,
    config: CorruptionConfig,
    rng: np.random.Generator,
) -> CorruptionDraw:
    """Sample a corruption mask plus replacement values (or noise offsets).

    Consumes the generator in a fixed order (mask keys first, then values),
    so identical states yield identical draws.
    """
    t = replaced_count(config.ratio, n_features)
    keys = rng.random((n_rows, n_features))
    order = np.argsort(keys, axis=1)
    mask = np.zeros((n_rows, n_features), dtype=bool)
    if t > 0:
        np.put_along_axis(mask, order[:, :t], True, axis=1)

    if config.mode == "marginal":
        if marginals is None:
            raise ValueError("marginal corruption requires fitted marginals")
        if marginals.n_features != n_features:
            raise ValueError(
                f"marginals cover {marginals.n_features} features, batch has {n_features}"
            )
        picks = rng.integers(0, marginals.pool_size, size=(n_rows, n_features))
        replacements = marginals.pools[np.arange(n_features)[None, :], picks]
        return CorruptionDraw(mask=mask, replacements=replacements)
    noise = rng.normal(0.0, config.sigma, size=(n_rows, n_features))
    return CorruptionDraw(mask=mask, noise=noise)


def apply_corruption(batch: np.ndarray, draw: CorruptionDraw) -> np.ndarray:
    """Apply a realized draw; unmasked entries stay bit-identical."""
    if draw.replacements is not None:
        return np.where(draw.mask, draw.replacements, batch)
    return batch + np.where(draw.mask, draw.noise, 0.0)


def corrupt(
    batch: np.ndarray,
    marginals: EmpiricalMarginals | None,
    config: CorruptionConfig,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Corrupt a batch, returning the new matrix and the binary mask."""
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2:
        raise ValueError("batch must be 2-dimensional")
    if rng is None:
        rng = np.random.default_rng(config.seed)
    draw = draw_corruption(batch.shape[0], batch.shape[1], marginals, config, rng)
    return apply_corruption(batch, draw), draw.mask.astype(np.int8)


def export_masks(mask: np.ndarray, row_ids: np.ndarray, path) -> None:
    """Write a mask matrix in the embeddings-export CSV layout."""
    mask = np.asarray(mask)
    with open(path, "w", encoding="utf-8") as fh:
        header = ["row_id"] + [f"m_{j}" for j in range(mask.shape[1])]
        fh.write(",".join(header) + "\n")
        for rid, row in zip(row_ids, mask):
            fh.write(",".join([str(int(rid))] + [str(int(v)) for v in row]) + "\n")
