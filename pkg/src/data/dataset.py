"""Tabular dataset ingestion and stratified splitting.

Cells are stored in a float64 matrix; the missing marker is NaN and is the only
non-finite value a :class:`Dataset` may hold. Categorical columns are ordinally
encoded in first-appearance order and their vocabulary is kept on the dataset.
"""

from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from src.models.errors import DatasetError, SchemaError, SplitError
from src.utils.io import format_real, write_json

logger = logging.getLogger(__name__)

MISSING = float("nan")
SCHEMA_SUFFIX = ".schema.json"

# Plain decimal or scientific notation; Python-only forms such as 1_000 stay text.
_NUMBER = re.compile(r"[+-]?(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?")
_NON_FINITE = re.compile(r"[+-]?(?:inf|infinity|nan)", re.IGNORECASE)


def is_missing(values: np.ndarray | float) -> np.ndarray | bool:
    """Return a mask (or flag) of cells holding the missing marker."""
    return np.isnan(values)


@dataclass(frozen=True, eq=False)
class Dataset:
    """Immutable feature matrix with labels and names.

    Attributes:
        features: ``n x d`` float64 matrix; NaN marks a missing cell.
        labels: Length-``n`` class indices in ``[0, c)``.
        feature_names: Unique column names, length ``d``.
        class_names: Class names, length ``c``; ``labels`` index into it.
        categories: For ordinally encoded columns, the category text of each code.
    """

    features: np.ndarray
    labels: np.ndarray
    feature_names: tuple[str, ...]
    class_names: tuple[str, ...]
    categories: dict[str, tuple[str, ...]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        features = np.array(self.features, dtype=np.float64, copy=True)
        labels = np.array(self.labels, dtype=np.int64, copy=True)
        if features.ndim != 2:
            raise DatasetError(f"features must be 2-D, got shape {features.shape}")
        n, d = features.shape
        if n < 1 or d < 1:
            raise DatasetError(f"dataset needs n >= 1 and d >= 1, got {n} x {d}")
        if labels.shape != (n,):
            raise DatasetError(f"expected {n} labels, got shape {labels.shape}")
        if len(self.feature_names) != d:
            raise DatasetError(f"expected {d} feature names, got {len(self.feature_names)}")
        if len(set(self.feature_names)) != d:
            raise DatasetError("feature names must be unique")
        if len(self.class_names) < 1:
            raise DatasetError("at least one class name is required")
        if labels.min() < 0 or labels.max() >= len(self.class_names):
            raise DatasetError(f"label indices must lie in [0, {len(self.class_names)})")
        if np.isinf(features).any():
            raise DatasetError("features may not contain infinite values")
        features.flags.writeable = False
        labels.flags.writeable = False
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "feature_names", tuple(self.feature_names))
        object.__setattr__(self, "class_names", tuple(self.class_names))

    @property
    def n_instances(self) -> int:
        """Number of rows."""
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        """Number of feature columns."""
        return self.features.shape[1]

    @property
    def n_classes(self) -> int:
        """Number of classes."""
        return len(self.class_names)

    def subset(self, indices: np.ndarray | list[int]) -> Dataset:
        """Return the rows at *indices*, keeping names and vocabularies."""
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(
            features=self.features[idx],
            labels=self.labels[idx],
            feature_names=self.feature_names,
            class_names=self.class_names,
            categories=dict(self.categories),
        )


def schema_path(path: str | Path) -> Path:
    """Vocabulary file written by :func:`write_csv` next to *path*."""
    path = Path(path)
    return path.with_name(f"{path.stem}{SCHEMA_SUFFIX}")


def _parse_number(token: str) -> float | None:
    if _NUMBER.fullmatch(token):
        return float(token)
    if _NON_FINITE.fullmatch(token):
        return float(token)
    return None


def _encode_column(
    name: str,
    tokens: list[str],
    missing_token: str,
    known: tuple[str, ...] | None = None,
) -> tuple[np.ndarray, tuple[str, ...] | None]:
    """Encode one column; returns values and, for categorical columns, the vocabulary.

    A *known* vocabulary fixes the codes of its categories and marks the column
    categorical even when none of its cells are present.
    """
    values = np.full(len(tokens), MISSING, dtype=np.float64)
    kind: str | None = None if known is None else "categorical"
    vocabulary: dict[str, int] = {token: code for code, token in enumerate(known or ())}

    for row, raw in enumerate(tokens):
        token = raw.strip()
        if token == "" or token == missing_token:
            continue
        number = _parse_number(token)
        token_kind = "numeric" if number is not None else "categorical"
        if kind is None:
            kind = token_kind
        elif kind != token_kind:
            raise SchemaError(
                f"column '{name}' mixes numeric and non-numeric values "
                f"(row {row + 1}: {token!r})",
                column=name,
                row=row + 1,
            )
        if number is not None:
            if not math.isfinite(number):
                raise SchemaError(
                    f"column '{name}' has non-finite value {token!r} at row {row + 1}",
                    column=name,
                    row=row + 1,
                )
            values[row] = number
        else:
            values[row] = vocabulary.setdefault(token, len(vocabulary))

    if kind == "categorical":
        return values, tuple(vocabulary)
    return values, None


def _read_schema(path: Path) -> tuple[tuple[str, ...] | None, dict[str, tuple[str, ...]]]:
    sidecar = schema_path(path)
    if not sidecar.is_file():
        return None, {}
    try:
        payload = json.loads(sidecar.read_text(encoding="utf-8"))
        class_names = tuple(payload["class_names"])
        categories = {name: tuple(vocab) for name, vocab in payload["categories"].items()}
    except (OSError, ValueError, KeyError, TypeError, AttributeError) as e:
        raise DatasetError(f"failed to read schema file {sidecar}: {e}") from e
    logger.debug("Using vocabularies from %s", sidecar)
    return class_names, categories


def load_csv(
    path: str | Path,
    label_column: str,
    missing_token: str = "",
    *,
    class_names: tuple[str, ...] | list[str] | None = None,
    categories: dict[str, tuple[str, ...]] | None = None,
) -> Dataset:
    """Load a UTF-8 CSV file with a header row into a :class:`Dataset`.

    Class indices and category codes follow first appearance in the file unless
    vocabularies are known: either passed in or read from the schema file that
    :func:`write_csv` leaves next to the CSV. Known names keep their indices and
    unseen ones are appended after them.

    Args:
        path: CSV file to read.
        label_column: Header of the column holding class labels.
        missing_token: Cell text treated as missing (empty cells always are).
        class_names: Known class names, in index order.
        categories: Known vocabulary per categorical column, in code order.

    Returns:
        The encoded dataset.

    Raises:
        DatasetError: If the file (or its schema file) is absent or unreadable.
        SchemaError: If the label column is absent, a label is missing, or a column
            mixes numeric and non-numeric tokens.
    """
    path = Path(path)
    try:
        frame = pd.read_csv(
            path, dtype=str, keep_default_na=False, encoding="utf-8", skip_blank_lines=True
        )
    except FileNotFoundError as e:
        raise DatasetError(f"dataset file not found: {path}") from e
    except (OSError, UnicodeDecodeError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise DatasetError(f"failed to read dataset file {path}: {e}") from e

    if class_names is None and categories is None:
        class_names, categories = _read_schema(path)
    categories = categories or {}

    columns = [str(c).strip() for c in frame.columns]
    frame.columns = columns
    if label_column not in columns:
        raise SchemaError(
            f"label column '{label_column}' not found in {path} (columns: {columns})",
            column=label_column,
        )
    if len(frame) == 0:
        raise DatasetError(f"dataset file {path} has no data rows")

    class_index: dict[str, int] = {name: i for i, name in enumerate(class_names or ())}
    labels = np.empty(len(frame), dtype=np.int64)
    for row, raw in enumerate(frame[label_column].tolist()):
        token = raw.strip()
        if token == "" or token == missing_token:
            raise SchemaError(
                f"label column '{label_column}' is missing a value at row {row + 1}",
                column=label_column,
                row=row + 1,
            )
        labels[row] = class_index.setdefault(token, len(class_index))

    feature_names = [c for c in columns if c != label_column]
    matrix = np.empty((len(frame), len(feature_names)), dtype=np.float64)
    encoded: dict[str, tuple[str, ...]] = {}
    for col, name in enumerate(feature_names):
        values, vocabulary = _encode_column(
            name, frame[name].tolist(), missing_token, categories.get(name)
        )
        matrix[:, col] = values
        if vocabulary is not None:
            encoded[name] = vocabulary

    dataset = Dataset(
        features=matrix,
        labels=labels,
        feature_names=tuple(feature_names),
        class_names=tuple(class_index),
        categories=encoded,
    )
    logger.info(
        "Loaded %s: %d rows, %d features (%d categorical), %d classes, %d missing cells",
        path,
        dataset.n_instances,
        dataset.n_features,
        len(encoded),
        dataset.n_classes,
        int(np.isnan(dataset.features).sum()),
    )
    return dataset


def write_csv(
    ds: Dataset, path: str | Path, label_column: str = "label", missing_token: str = ""
) -> Path:
    """Write *ds* so that :func:`load_csv` reads it back unchanged.

    Numeric cells are written at full precision, categorical cells as their
    category text, missing cells as *missing_token*. Class names and category
    vocabularies go to :func:`schema_path` so a reload keeps every index and code,
    including those of classes or categories absent from these rows.
    """
    path = Path(path)
    data: dict[str, list[str]] = {}
    for col, name in enumerate(ds.feature_names):
        vocabulary = ds.categories.get(name)
        cells = []
        for value in ds.features[:, col]:
            if np.isnan(value):
                cells.append(missing_token)
            elif vocabulary is not None:
                cells.append(vocabulary[int(value)])
            else:
                cells.append(format_real(value))
        data[name] = cells
    data[label_column] = [ds.class_names[int(label)] for label in ds.labels]
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(data).to_csv(path, index=False, encoding="utf-8")
    write_json(
        schema_path(path),
        {
            "class_names": list(ds.class_names),
            "categories": {name: list(vocab) for name, vocab in ds.categories.items()},
        },
    )
    return path


def split_indices(
    ds: Dataset, test_fraction: float, seed: int
) -> tuple[np.ndarray, np.ndarray]:
    """Stratified index partition behind :func:`split`.

    Each class contributes ``floor(test_fraction * n_c + 0.5)`` shuffled members to
    the test part. Both returned arrays are sorted.

    Raises:
        SplitError: If the fraction is outside (0, 1), a class has fewer than two
            members, a class would vanish from the train part, or a part is empty.
    """
    if not 0.0 < test_fraction < 1.0:
        raise SplitError(f"test_fraction must lie in (0, 1), got {test_fraction}")

    rng = np.random.default_rng(seed)
    train_parts: list[np.ndarray] = []
    test_parts: list[np.ndarray] = []
    for cls in range(ds.n_classes):
        members = np.flatnonzero(ds.labels == cls)
        if members.size == 0:
            continue
        if members.size < 2:
            raise SplitError(
                f"class '{ds.class_names[cls]}' has {members.size} member; "
                "at least 2 are needed to stratify"
            )
        n_test = int(math.floor(test_fraction * members.size + 0.5))
        if n_test >= members.size:
            raise SplitError(
                f"test_fraction {test_fraction} leaves class '{ds.class_names[cls]}' "
                "without training instances"
            )
        if n_test == 0:
            logger.warning(
                "Class '%s' (%d members) gets no test instances at test_fraction=%s",
                ds.class_names[cls],
                members.size,
                test_fraction,
            )
        shuffled = rng.permutation(members)
        test_parts.append(shuffled[:n_test])
        train_parts.append(shuffled[n_test:])

    train_idx = np.sort(np.concatenate(train_parts))
    test_idx = np.sort(np.concatenate(test_parts))
    if train_idx.size == 0 or test_idx.size == 0:
        raise SplitError(
            f"test_fraction {test_fraction} on {ds.n_instances} rows yields an empty part"
        )
    return train_idx, test_idx


def split(ds: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Split *ds* into stratified (train, test) datasets, deterministic for *seed*."""
    train_idx, test_idx = split_indices(ds, test_fraction, seed)
    logger.info(
        "Split %d rows into %d train / %d test (seed=%d)",
        ds.n_instances,
        train_idx.size,
        test_idx.size,
        seed,
    )
    return ds.subset(train_idx), ds.subset(test_idx)
