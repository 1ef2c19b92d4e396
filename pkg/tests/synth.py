"""Synthetic dataset builders used across the test suite."""

from __future__ import annotations

import numpy as np

from tabrep.data import TableDataset


def two_cluster_dataset(
    n: int = 2000,
    n_informative: int = 4,
    n_copies: int = 8,
    n_noise: int = 8,
    separation: float = 2.0,
    copy_noise: float = 0.5,
    seed: int = 0,
    labeled_fraction: float = 1.0,
) -> TableDataset:
    """Two Gaussian clusters in an informative subspace, plus noisy copies of
    informative features and pure-noise features, min-max scaled to [0, 1].

    Columns are ordered informative, copies, noise so tests can address the
    groups by index.  ``labeled_fraction`` < 1 masks a random suffix of
    labels with -1.
    """
    rng = np.random.default_rng(seed)
    y = np.repeat(np.array([0, 1], dtype=np.int64), (n - n // 2, n // 2))
    y = rng.permutation(y)
    centered = (y * 2 - 1).astype(np.float64)

    informative = rng.normal(0.0, 1.0, (n, n_informative))
    informative += centered[:, None] * (separation / 2.0)
    copy_sources = rng.integers(0, n_informative, n_copies)
    copies = informative[:, copy_sources] + rng.normal(0.0, copy_noise, (n, n_copies))
    noise = rng.normal(0.0, 1.0, (n, n_noise))
    X = np.hstack([informative, copies, noise])

    lo = X.min(axis=0)
    hi = X.max(axis=0)
    X = (X - lo) / (hi - lo)

    if labeled_fraction < 1.0:
        n_unlabeled = int(round(n * (1.0 - labeled_fraction)))
        hidden = rng.choice(n, size=n_unlabeled, replace=False)
        y = y.copy()
        y[hidden] = -1

    columns = (
        [f"inf_{j}" for j in range(n_informative)]
        + [f"copy_{j}" for j in range(n_copies)]
        + [f"noise_{j}" for j in range(n_noise)]
    )
    return TableDataset(
        X=X,
        y=y,
        columns=columns,
        row_ids=np.arange(n),
        label_classes=["neg", "pos"],
    )


def random_dataset(
    n: int, m: int, seed: int = 0, n_classes: int | None = 2
) -> TableDataset:
    """Structureless uniform data in [0, 1], optionally with random labels."""
    rng = np.random.default_rng(seed)
    y = None
    if n_classes is not None:
        y = rng.integers(0, n_classes, n).astype(np.int64)
    return TableDataset(
        X=rng.random((n, m)),
        y=y,
        columns=[f"f_{j}" for j in range(m)],
        row_ids=np.arange(n),
        label_classes=None if y is None else [str(c) for c in range(n_classes)],
    )
