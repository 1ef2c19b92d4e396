"""CSV loading, schema inference, and the fitted preprocessing pipeline.

The pipeline is a fixed recipe: drop columns that are missing in every row,
impute (column mean for numerical features, modal category for categorical
ones), encode categoricals with backward-difference contrasts, then min-max
scale every output column into [0, 1].  A fitted :class:`PreprocessorState`
is a plain serializable record, so a transform is reproducible across
processes and runs.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

DEFAULT_MISSING_MARKERS = ("", "NA", "?")
DEFAULT_MAX_CATEGORICAL_CARDINALITY = 20
STATE_SCHEMA_VERSION = 1


class DataError(ValueError):
    """Raised for malformed inputs or violated preprocessing preconditions."""


class RaggedRowError(DataError):
    def __init__(self, row_index: int, expected: int, got: int):
        super().__init__(
            f"row {row_index} has {got} cells, expected {expected}"
        )
        self.row_index = row_index


@dataclass
class RawTable:
    """A parsed CSV: header names plus string cells, missing cells as None."""

    columns: list[str]
    rows: list[list[str | None]]

    @property
    def n_rows(self) -> int:
        return len(self.rows)

    def column(self, name: str) -> list[str | None]:
        j = self.columns.index(name)
        return [row[j] for row in self.rows]


@dataclass
class ColumnSchema:
    name: str
    kind: str  # "numerical" | "categorical"
    categories: list[str] = field(default_factory=list)
    all_missing: bool = False


@dataclass
class OutputColumn:
    name: str
    source: str
    kind: str  # "numeric" | "contrast"


@dataclass
class TableDataset:
    """Row-major numeric matrix after encoding, with optional labels.

    ``y`` uses -1 for rows whose label is unknown; ``None`` means the dataset
    carries no labels at all.  ``row_ids`` track provenance through splits so
    downstream joins (e.g. feature concatenation) can check alignment.
    """

    X: np.ndarray
    y: np.ndarray | None
    columns: list[str]
    row_ids: np.ndarray
    label_classes: list[str] | None = None

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        if self.X.ndim != 2:
            raise DataError("feature matrix must be 2-dimensional")
        if self.y is not None:
            self.y = np.asarray(self.y, dtype=np.int64)
            if self.y.shape != (self.X.shape[0],):
                raise DataError("label vector length must match row count")
        self.row_ids = np.asarray(self.row_ids, dtype=np.int64)
        if self.row_ids.shape != (self.X.shape[0],):
            raise DataError("row_ids length must match row count")
        if len(self.columns) != self.X.shape[1]:
            raise DataError("column name count must match feature count")

    @property
    def n_samples(self) -> int:
        return self.X.shape[0]

    @property
    def n_features(self) -> int:
        return self.X.shape[1]

    def take(self, indices: np.ndarray) -> "TableDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return TableDataset(
            X=self.X[idx],
            y=None if self.y is None else self.y[idx],
            columns=list(self.columns),
            row_ids=self.row_ids[idx],
            label_classes=self.label_classes,
        )


@dataclass
class ContrastMap:
    levels: list[str]
    matrix: np.ndarray  # shape (k, k-1)


@dataclass
class PreprocessorState:
    """Fitted preprocessing record; serializable and sufficient to transform."""

    dropped_columns: list[str]
    numeric_impute: dict[str, float]
    categorical_impute: dict[str, str]
    contrast_maps: dict[str, ContrastMap]
    scale_min: np.ndarray
    scale_max: np.ndarray
    output_layout: list[OutputColumn]
    label_classes: list[str] | None = None
    schema_version: int = STATE_SCHEMA_VERSION

    @property
    def n_outputs(self) -> int:
        return len(self.output_layout)

    def source_order(self) -> list[tuple[str, str]]:
        """Surviving source columns in fit order, as (name, kind) pairs."""
        seen: list[tuple[str, str]] = []
        for col in self.output_layout:
            kind = "numerical" if col.kind == "numeric" else "categorical"
            if not seen or seen[-1][0] != col.source:
                seen.append((col.source, kind))
        return seen

    def to_json(self) -> str:
        payload = {
            "schema_version": self.schema_version,
            "dropped_columns": self.dropped_columns,
            "numeric_impute": self.numeric_impute,
            "categorical_impute": self.categorical_impute,
            "contrast_maps": {
                name: {"levels": cm.levels, "matrix": cm.matrix.tolist()}
                for name, cm in self.contrast_maps.items()
            },
            "scale_min": self.scale_min.tolist(),
            "scale_max": self.scale_max.tolist(),
            "output_layout": [
                {"name": c.name, "source": c.source, "kind": c.kind}
                for c in self.output_layout
            ],
            "label_classes": self.label_classes,
        }
        return json.dumps(payload, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "PreprocessorState":
        payload = json.loads(text)
        version = payload.get("schema_version")
        if version != STATE_SCHEMA_VERSION:
            raise DataError(f"unsupported preprocessor schema version: {version!r}")
        return cls(
            dropped_columns=list(payload["dropped_columns"]),
            numeric_impute={k: float(v) for k, v in payload["numeric_impute"].items()},
            categorical_impute=dict(payload["categorical_impute"]),
            contrast_maps={
                name: ContrastMap(
                    levels=list(cm["levels"]),
                    matrix=np.asarray(cm["matrix"], dtype=np.float64),
                )
                for name, cm in payload["contrast_maps"].items()
            },
            scale_min=np.asarray(payload["scale_min"], dtype=np.float64),
            scale_max=np.asarray(payload["scale_max"], dtype=np.float64),
            output_layout=[
                OutputColumn(name=c["name"], source=c["source"], kind=c["kind"])
                for c in payload["output_layout"]
            ],
            label_classes=payload.get("label_classes"),
        )

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path) -> "PreprocessorState":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json(fh.read())

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode("utf-8")).hexdigest()


def load_csv(
    path,
    label_column: str | None = None,
    missing_markers: tuple[str, ...] = DEFAULT_MISSING_MARKERS,
) -> tuple[RawTable, list[str | None] | None]:
    """Read a headered CSV into a RawTable, separating out the label column.

    Cells equal to any missing marker are normalized to ``None``.  Returns
    ``(table, labels)`` where ``labels`` is ``None`` when no label column was
    requested.

    Raises:
        DataError: unreadable file, duplicate header names, absent label
            column, or a ragged row (reported with its 0-based data row
            index).
    """
    markers = set(missing_markers)
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            try:
                header = next(reader)
            except StopIteration:
                raise DataError(f"empty file: {path}") from None
            raw_rows = list(reader)
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc

    if len(set(header)) != len(header):
        dupes = sorted({c for c in header if header.count(c) > 1})
        raise DataError(f"duplicate column names in header: {dupes}")

    label_idx: int | None = None
    if label_column is not None:
        if label_column not in header:
            raise DataError(f"label column {label_column!r} not found in {path}")
        label_idx = header.index(label_column)

    columns = [c for i, c in enumerate(header) if i != label_idx]
    rows: list[list[str | None]] = []
    labels: list[str | None] | None = [] if label_idx is not None else None
    for i, raw in enumerate(raw_rows):
        if len(raw) != len(header):
            raise RaggedRowError(i, expected=len(header), got=len(raw))
        cells = [None if c in markers else c for c in raw]
        if label_idx is not None:
            labels.append(cells.pop(label_idx))
        rows.append(cells)
    return RawTable(columns=columns, rows=rows), labels


def _parse_number(cell: str) -> float | None:
    """Parse a cell as a finite float; None when it is not one."""
    try:
        value = float(cell)
    except ValueError:
        return None
    return value if math.isfinite(value) else None


def infer_schema(
    table: RawTable,
    max_categorical_cardinality: int = DEFAULT_MAX_CATEGORICAL_CARDINALITY,
) -> list[ColumnSchema]:
    """Classify each column as numerical or categorical.

    A column is categorical when any non-missing cell fails numeric parsing
    or when its distinct-value count does not exceed the cardinality
    threshold; categories are listed in first-appearance order.
    """
    if table.n_rows == 0:
        raise DataError("cannot infer a schema from an empty table")
    schemas = []
    for name in table.columns:
        cells = [c for c in table.column(name) if c is not None]
        if not cells:
            schemas.append(ColumnSchema(name=name, kind="categorical", all_missing=True))
            continue
        numeric = all(_parse_number(c) is not None for c in cells)
        distinct = list(dict.fromkeys(cells))
        if not numeric or len(distinct) <= max_categorical_cardinality:
            schemas.append(ColumnSchema(name=name, kind="categorical", categories=distinct))
        else:
            schemas.append(ColumnSchema(name=name, kind="numerical"))
    return schemas


def backward_difference_matrix(k: int) -> np.ndarray:
    """Contrast matrix with k rows (levels) and k-1 columns.

    Column j (1-based) assigns -(k-j)/k to levels 1..j and +j/k to levels
    j+1..k, the classical backward-difference coding.
    """
    if k < 1:
        raise DataError("contrast matrix needs at least one level")
    matrix = np.empty((k, k - 1), dtype=np.float64)
    for j in range(1, k):
        matrix[:j, j - 1] = j / k - 1.0
        matrix[j:, j - 1] = j / k
    return matrix


def _check_schema(table: RawTable, schema: list[ColumnSchema]) -> None:
    names = [s.name for s in schema]
    if names != table.columns:
        raise DataError(
            f"schema columns {names} do not match table columns {table.columns}"
        )
    if len(set(names)) != len(names):
        raise DataError("schema contains duplicate column names")


def fit_preprocessor(
    table: RawTable,
    schema: list[ColumnSchema],
    labels: list[str | None] | None = None,
) -> PreprocessorState:
    """Fit the preprocessing pipeline on a raw table.

    Drops all-missing columns, records imputation statistics (mean /
    first-appearance modal category), builds one backward-difference
    contrast map per categorical column, and captures per-output-column
    min/max over the encoded fit data.
    """
    _check_schema(table, schema)
    if table.n_rows == 0:
        raise DataError("cannot fit a preprocessor on an empty table")

    dropped: list[str] = []
    numeric_impute: dict[str, float] = {}
    categorical_impute: dict[str, str] = {}
    contrast_maps: dict[str, ContrastMap] = {}
    layout: list[OutputColumn] = []

    for col in schema:
        cells = table.column(col.name)
        observed = [c for c in cells if c is not None]
        if not observed:
            dropped.append(col.name)
            continue
        if col.kind == "numerical":
            values = []
            for i, c in enumerate(cells):
                if c is None:
                    continue
                v = _parse_number(c)
                if v is None:
                    raise DataError(
                        f"non-numeric cell {c!r} at row {i}, column {col.name!r}"
                    )
                values.append(v)
            numeric_impute[col.name] = float(np.mean(values))
            layout.append(OutputColumn(name=col.name, source=col.name, kind="numeric"))
        else:
            known = set(col.categories)
            counts: dict[str, int] = {}
            first_seen: dict[str, int] = {}
            for i, c in enumerate(cells):
                if c is None:
                    continue
                if c not in known:
                    raise DataError(
                        f"category {c!r} at row {i}, column {col.name!r} "
                        "is not listed in the schema"
                    )
                counts[c] = counts.get(c, 0) + 1
                first_seen.setdefault(c, i)
            mode = max(counts, key=lambda c: (counts[c], -first_seen[c]))
            categorical_impute[col.name] = mode
            k = len(col.categories)
            contrast_maps[col.name] = ContrastMap(
                levels=list(col.categories),
                matrix=backward_difference_matrix(k),
            )
            for j in range(1, k):
                layout.append(
                    OutputColumn(
                        name=f"{col.name}__bd{j}", source=col.name, kind="contrast"
                    )
                )

    if not layout:
        raise DataError("no usable columns survive preprocessing")

    state = PreprocessorState(
        dropped_columns=dropped,
        numeric_impute=numeric_impute,
        categorical_impute=categorical_impute,
        contrast_maps=contrast_maps,
        scale_min=np.zeros(len(layout)),
        scale_max=np.ones(len(layout)),
        output_layout=layout,
        label_classes=_fit_label_classes(labels),
    )
    encoded = _encode_unscaled(table, state, unseen_policy="error")
    state.scale_min = encoded.min(axis=0)
    state.scale_max = encoded.max(axis=0)
    return state


def _fit_label_classes(labels: list[str | None] | None) -> list[str] | None:
    if labels is None:
        return None
    observed = sorted({v for v in labels if v is not None})
    if not observed:
        raise DataError("label column contains no observed values")
    return observed


def encode_labels(
    labels: list[str | None], classes: list[str]
) -> np.ndarray:
    """Map raw label strings onto class indices; missing labels become -1."""
    index = {c: i for i, c in enumerate(classes)}
    out = np.full(len(labels), -1, dtype=np.int64)
    for i, v in enumerate(labels):
        if v is None:
            continue
        if v not in index:
            raise DataError(f"unseen label value {v!r} at row {i}")
        out[i] = index[v]
    return out


def _encode_unscaled(
    table: RawTable,
    state: PreprocessorState,
    unseen_policy: str,
) -> np.ndarray:
    """Impute and encode into the pre-scaling feature matrix."""
    col_index = {name: j for j, name in enumerate(table.columns)}
    needed = [src for src, _ in state.source_order()]
    missing_cols = [c for c in needed if c not in col_index]
    if missing_cols:
        raise DataError(f"table lacks columns required by the preprocessor: {missing_cols}")

    n = table.n_rows
    out = np.empty((n, state.n_outputs), dtype=np.float64)
    unseen_counts: dict[str, int] = {}
    pos = 0
    for source, kind in state.source_order():
        cells = [row[col_index[source]] for row in table.rows]
        if kind == "numerical":
            fill = state.numeric_impute[source]
            col = np.empty(n, dtype=np.float64)
            for i, c in enumerate(cells):
                if c is None:
                    col[i] = fill
                    continue
                v = _parse_number(c)
                if v is None:
                    raise DataError(
                        f"non-numeric cell {c!r} at row {i}, column {source!r}"
                    )
                col[i] = v
            out[:, pos] = col
            pos += 1
        else:
            cm = state.contrast_maps[source]
            level_index = {lvl: i for i, lvl in enumerate(cm.levels)}
            modal_row = level_index[state.categorical_impute[source]]
            width = cm.matrix.shape[1]
            rows_idx = np.empty(n, dtype=np.int64)
            for i, c in enumerate(cells):
                if c is None:
                    rows_idx[i] = modal_row
                elif c in level_index:
                    rows_idx[i] = level_index[c]
                elif unseen_policy == "modal":
                    rows_idx[i] = modal_row
                    unseen_counts[source] = unseen_counts.get(source, 0) + 1
                else:
                    raise DataError(
                        f"unseen category {c!r} at row {i}, column {source!r}"
                    )
            out[:, pos : pos + width] = cm.matrix[rows_idx]
            pos += width
    if unseen_counts:
        detail = ", ".join(f"{c}: {k}" for c, k in sorted(unseen_counts.items()))
        warnings.warn(
            f"unseen categories encoded as the modal category ({detail})",
            stacklevel=3,
        )
    return out


def transform(
    table: RawTable,
    state: PreprocessorState,
    labels: list[str | None] | None = None,
    unseen_policy: str = "modal",
    row_ids: np.ndarray | None = None,
) -> TableDataset:
    """Apply a fitted preprocessor: impute, encode, min-max scale, clip.

    Constant columns (fitted max == min) map to 0.0.  Values outside the
    fitted range clip into [0, 1].  Unseen categories follow
    ``unseen_policy`` ("modal" encodes them as the modal category and emits
    a warning count; "error" raises).
    """
    if unseen_policy not in ("modal", "error"):
        raise DataError(f"unknown unseen-category policy: {unseen_policy!r}")
    encoded = _encode_unscaled(table, state, unseen_policy)
    span = state.scale_max - state.scale_min
    with np.errstate(invalid="ignore", divide="ignore"):
        scaled = (encoded - state.scale_min) / span
    scaled[:, span == 0] = 0.0
    np.clip(scaled, 0.0, 1.0, out=scaled)

    y = None
    if labels is not None:
        if state.label_classes is None:
            raise DataError("preprocessor was fitted without labels")
        if len(labels) != table.n_rows:
            raise DataError("label list length must match table rows")
        y = encode_labels(labels, state.label_classes)

    if row_ids is None:
        row_ids = np.arange(table.n_rows, dtype=np.int64)
    return TableDataset(
        X=scaled,
        y=y,
        columns=[c.name for c in state.output_layout],
        row_ids=row_ids,
        label_classes=state.label_classes,
    )


def _largest_remainder(n: int, fractions: tuple[float, ...]) -> list[int]:
    targets = [f * n for f in fractions]
    counts = [int(math.floor(t)) for t in targets]
    remainder = n - sum(counts)
    order = sorted(
        range(len(fractions)), key=lambda i: (-(targets[i] - counts[i]), i)
    )
    for i in order[:remainder]:
        counts[i] += 1
    return counts


def split_indices(
    y: np.ndarray | None,
    n: int,
    fractions: tuple[float, float, float],
    seed: int,
    label_classes: list[str] | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stratified, deterministic three-way row partition."""
    if len(fractions) != 3:
        raise DataError("fractions must be a (train, val, test) triple")
    if any(f <= 0 for f in fractions):
        raise DataError(f"fractions must be positive, got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise DataError(f"fractions must sum to 1, got {fractions}")

    rng = np.random.default_rng(seed)
    if y is None:
        strata = [np.arange(n, dtype=np.int64)]
    else:
        strata = [np.flatnonzero(y == v) for v in np.unique(y)]
        for value, idx in zip(np.unique(y), strata):
            if value >= 0 and len(idx) < 3:
                name = (
                    label_classes[value]
                    if label_classes is not None and value < len(label_classes)
                    else str(value)
                )
                raise DataError(
                    f"class {name!r} has only {len(idx)} samples, "
                    "fewer than the number of splits"
                )

    parts: list[list[np.ndarray]] = [[], [], []]
    for idx in strata:
        perm = rng.permutation(idx)
        counts = _largest_remainder(len(idx), fractions)
        # keep the training partition covering every class
        if counts[0] == 0 and len(idx) > 0:
            donor = int(np.argmax(counts))
            counts[donor] -= 1
            counts[0] += 1
        cuts = np.cumsum(counts)[:-1]
        chunks = np.split(perm, cuts)
        for part, chunk in zip(parts, chunks):
            part.append(chunk)

    out = []
    for part in parts:
        merged = np.concatenate(part) if part else np.empty(0, dtype=np.int64)
        out.append(np.sort(merged))
    return tuple(out)


def split(
    dataset: TableDataset,
    fractions: tuple[float, float, float],
    seed: int,
) -> tuple[TableDataset, TableDataset, TableDataset]:
    """Partition a dataset into train/val/test, stratified when labeled."""
    train_idx, val_idx, test_idx = split_indices(
        dataset.y, dataset.n_samples, fractions, seed, dataset.label_classes
    )
    return dataset.take(train_idx), dataset.take(val_idx), dataset.take(test_idx)


def save_dataset(dataset: TableDataset, path) -> None:
    meta = json.dumps(
        {"columns": dataset.columns, "label_classes": dataset.label_classes}
    )
    arrays = {
        "X": dataset.X,
        "row_ids": dataset.row_ids,
        "meta": np.array(meta),
    }
    if dataset.y is not None:
        arrays["y"] = dataset.y
    np.savez(path, **arrays)


def load_dataset(path) -> TableDataset:
    try:
        with np.load(path, allow_pickle=False) as blob:
            meta = json.loads(str(blob["meta"]))
            return TableDataset(
                X=blob["X"],
                y=blob["y"] if "y" in blob.files else None,
                columns=meta["columns"],
                row_ids=blob["row_ids"],
                label_classes=meta["label_classes"],
            )
    except OSError as exc:
        raise DataError(f"cannot read dataset {path}: {exc}") from exc
