"""Dataset loading, preprocessing and synthetic generation."""

from __future__ import annotations

import io
import logging
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import pandas as pd
import yaml

from .data import LabeledSample
from .errors import IngestionError, SchemaError

log = logging.getLogger(__name__)

FILTER_OPS = ("eq", "ne", "in", "not_in", "ge", "le", "between")
ENCODINGS = ("full", "drop_first")
SHIPPED_SCHEMAS = ("adult", "compas", "creditcard")


@dataclass(frozen=True)
class RowFilter:
    column: str
    op: str
    value: object

    def mask(self, frame: pd.DataFrame) -> np.ndarray:
        col = frame[self.column]
        if self.op in ("ge", "le", "between"):
            num = pd.to_numeric(col, errors="coerce")
            if self.op == "ge":
                return (num >= float(self.value)).to_numpy()
            if self.op == "le":
                return (num <= float(self.value)).to_numpy()
            lo, hi = self.value
            return ((num >= float(lo)) & (num <= float(hi))).to_numpy()
        values = self.value if self.op in ("in", "not_in") else [self.value]
        hit = col.isin([str(v) for v in values]).to_numpy()
        return hit if self.op in ("eq", "in") else ~hit & col.notna().to_numpy()


@dataclass(frozen=True)
class DatasetSchema:
    """Which columns become features and labels, and which rows survive.

    ``column_names`` is only needed for CSV files without a header row.
    """

    name: str
    target_column: str
    target_positive: tuple
    sensitive_column: str
    sensitive_positive: tuple
    numeric_columns: tuple = ()
    categorical_columns: tuple = ()
    drop_columns: tuple = ()
    row_filters: tuple = ()
    column_names: Optional[tuple] = None
    na_values: tuple = ("",)
    comment: Optional[str] = None
    encoding: str = "full"
    sources: tuple = ()

    def __post_init__(self):
        labels = {self.target_column, self.sensitive_column}
        features = list(self.numeric_columns) + list(self.categorical_columns)
        if labels & set(features):
            raise SchemaError(f"{self.name}: label columns may not also be features")
        listed = features + list(self.drop_columns) + [self.target_column, self.sensitive_column]
        dupes = sorted({c for c in listed if listed.count(c) > 1})
        if dupes:
            raise SchemaError(f"{self.name}: columns listed twice: {dupes}")
        if not features:
            raise SchemaError(f"{self.name}: no feature columns")
        if self.encoding not in ENCODINGS:
            raise SchemaError(f"{self.name}: encoding must be one of {ENCODINGS}")
        for f in self.row_filters:
            if f.op not in FILTER_OPS:
                raise SchemaError(f"{self.name}: unknown filter op {f.op!r}")

    @property
    def used_columns(self) -> list:
        return ([self.target_column, self.sensitive_column]
                + list(self.numeric_columns) + list(self.categorical_columns))

    @classmethod
    def from_mapping(cls, d: dict) -> "DatasetSchema":
        try:
            target = d["target"]
            sensitive = d["sensitive"]
            filters = tuple(RowFilter(f["column"], f["op"], _freeze(f["value"]))
                            for f in d.get("row_filters", []) or [])
            names = d.get("column_names")
            return cls(
                name=str(d["name"]),
                target_column=str(target["column"]),
                target_positive=tuple(str(v) for v in _listify(target["positive"])),
                sensitive_column=str(sensitive["column"]),
                sensitive_positive=tuple(str(v) for v in _listify(sensitive["positive"])),
                numeric_columns=tuple(d.get("numeric_columns", []) or []),
                categorical_columns=tuple(d.get("categorical_columns", []) or []),
                drop_columns=tuple(d.get("drop_columns", []) or []),
                row_filters=filters,
                column_names=None if names is None else tuple(names),
                na_values=tuple(str(v) for v in d.get("na_values", [""])),
                comment=d.get("comment"),
                encoding=d.get("encoding", "full"),
                sources=tuple(d.get("sources", []) or []),
            )
        except (KeyError, TypeError) as exc:
            raise SchemaError(f"malformed schema: {exc}") from exc


def _listify(v):
    return list(v) if isinstance(v, (list, tuple)) else [v]


def _freeze(v):
    return tuple(v) if isinstance(v, list) else v


def load_schema(name_or_path) -> DatasetSchema:
    """Load a shipped schema by name (``adult``) or any YAML schema file by path."""
    text = None
    if str(name_or_path) in SHIPPED_SCHEMAS:
        text = resources.files("quantfair.schemas").joinpath(f"{name_or_path}.yaml").read_text()
    else:
        path = Path(name_or_path)
        if not path.is_file():
            raise SchemaError(f"no shipped schema or file named {name_or_path!r}")
        text = path.read_text()
    try:
        mapping = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise SchemaError(f"schema is not valid YAML: {exc}") from exc
    if not isinstance(mapping, dict):
        raise SchemaError("schema must be a mapping")
    return DatasetSchema.from_mapping(mapping)


@dataclass
class PreparedDataset:
    """A loaded sample plus the preprocessing state that produced it."""

    sample: LabeledSample
    categories: dict
    means: np.ndarray
    scales: np.ndarray
    dropped_constant: list = field(default_factory=list)
    indicators: Optional[pd.DataFrame] = None


def _read_sources(schema: DatasetSchema, sources) -> pd.DataFrame:
    if isinstance(sources, (str, Path, io.IOBase)):
        sources = [sources]
    frames = []
    for src in sources:
        try:
            frame = pd.read_csv(
                src,
                header=None if schema.column_names else 0,
                names=list(schema.column_names) if schema.column_names else None,
                dtype=str,
                keep_default_na=False,
                na_values=list(schema.na_values),
                skipinitialspace=True,
                comment=schema.comment,
            )
        except (pd.errors.ParserError, UnicodeDecodeError) as exc:
            raise IngestionError(f"cannot parse {src}: {exc}", code="unparseable-cell") from exc
        except pd.errors.EmptyDataError as exc:
            raise IngestionError(f"{src} is empty", code="empty-after-filtering") from exc
        frame.columns = [str(c).strip() for c in frame.columns]
        frame["__source"] = str(src) if not isinstance(src, io.IOBase) else "<stream>"
        # data line number, 1-based, counting a header row when present
        frame["__line"] = np.arange(len(frame)) + (1 if schema.column_names else 2)
        frames.append(frame)
    if not frames:
        raise IngestionError("no CSV sources given", code="missing-column")
    return pd.concat(frames, ignore_index=True)


def _parse_numeric(frame: pd.DataFrame, column: str) -> pd.Series:
    raw = frame[column]
    num = pd.to_numeric(raw, errors="coerce")
    bad = num.isna() & raw.notna()
    if bad.any():
        i = int(np.flatnonzero(bad.to_numpy())[0])
        raise IngestionError(
            f"column {column!r}: cannot parse {raw.iloc[i]!r} as a number "
            f"({frame['__source'].iloc[i]}, line {frame['__line'].iloc[i]})",
            code="unparseable-cell")
    return num.astype(np.float64)


def prepare_dataset(schema: DatasetSchema, sources, categories: Optional[dict] = None,
                    standardize: bool = True) -> PreparedDataset:
    """Load CSV sources and preprocess them according to ``schema``.

    Rows failing a filter or with a missing value in any used column are
    removed. Categorical columns become indicator columns, then every column
    is standardized with the loaded set's own mean and population standard
    deviation. Constant columns are dropped with a warning.

    ``categories`` pins the category list per column (for example from an
    earlier load); a value outside it raises ``unseen-category``.
    """
    frame = _read_sources(schema, sources)
    needed = set(schema.used_columns) | {f.column for f in schema.row_filters}
    missing = sorted(needed - set(frame.columns))
    if missing:
        raise IngestionError(f"{schema.name}: missing columns {missing}", code="missing-column")

    keep = np.ones(len(frame), dtype=bool)
    for f in schema.row_filters:
        keep &= f.mask(frame)
    frame = frame.loc[keep]
    frame = frame.loc[frame[schema.used_columns].notna().all(axis=1).to_numpy()]
    if len(frame) == 0:
        raise IngestionError(f"{schema.name}: no rows left after filtering and removing "
                             "missing values", code="empty-after-filtering")
    frame = frame.reset_index(drop=True)

    target = frame[schema.target_column].str.strip().isin(schema.target_positive)
    sensitive = frame[schema.sensitive_column].str.strip().isin(schema.sensitive_positive)

    blocks = []
    names = []
    for col in schema.numeric_columns:
        blocks.append(_parse_numeric(frame, col).to_numpy()[:, None])
        names.append(col)
    found_categories = {}
    indicator_cols = {}
    for col in schema.categorical_columns:
        values = frame[col].str.strip()
        observed = sorted(values.unique())
        if categories is not None and col in categories:
            allowed = list(categories[col])
            unseen = sorted(set(observed) - set(allowed))
            if unseen:
                raise IngestionError(f"column {col!r}: unseen categories {unseen}",
                                     code="unseen-category")
            levels = allowed
        else:
            levels = observed
        found_categories[col] = list(levels)
        codes = pd.Categorical(values, categories=levels).codes
        onehot = np.zeros((len(frame), len(levels)))
        onehot[np.arange(len(frame)), codes] = 1.0
        indicator_cols[col] = onehot
        start = 1 if schema.encoding == "drop_first" else 0
        blocks.append(onehot[:, start:])
        names.extend(f"{col}={lv}" for lv in levels[start:])

    X = np.hstack(blocks)
    names = np.array(names, dtype=object)
    means = X.mean(axis=0)
    scales = X.std(axis=0)
    constant = scales == 0
    dropped = list(names[constant])
    if dropped:
        log.warning("%s: dropping %d constant column(s): %s", schema.name, len(dropped),
                    ", ".join(dropped))
    X, names, means, scales = X[:, ~constant], names[~constant], means[~constant], scales[~constant]
    if X.shape[1] == 0:
        raise IngestionError(f"{schema.name}: every feature column is constant",
                             code="empty-after-filtering")
    if standardize:
        X = (X - means) / scales
    sample = LabeledSample.create(X, sensitive=sensitive.to_numpy().astype(np.int8),
                                  target=target.to_numpy().astype(np.int8),
                                  feature_names=list(names))
    indicators = {f"{c}": pd.DataFrame(v, columns=found_categories[c])
                  for c, v in indicator_cols.items()}
    return PreparedDataset(sample, found_categories, means, scales, dropped,
                           pd.concat(indicators, axis=1) if indicators else None)


def load_dataset(schema: DatasetSchema, sources, categories: Optional[dict] = None) -> LabeledSample:
    """Load and preprocess a dataset, returning only the labeled sample."""
    return prepare_dataset(schema, sources, categories).sample


def resolve_sources(schema: DatasetSchema, data_dir) -> list:
    """Paths of the schema's expected files inside ``data_dir``, checking that they exist."""
    root = Path(data_dir)
    paths = [root / s for s in schema.sources]
    absent = [str(p) for p in paths if not p.is_file()]
    if not paths or absent:
        raise IngestionError(f"{schema.name}: data files not found: {absent or schema.sources}",
                             code="missing-source")
    return paths


# (s, y) cells in the order used by SyntheticSpec
CELLS = ((0, 0), (0, 1), (1, 0), (1, 1))


@dataclass(frozen=True)
class SyntheticSpec:
    """Gaussian blobs, one per (s, y) cell.

    ``mean_shift`` and ``cell_probs`` list the four cells in the order
    (s,y) = (0,0), (0,1), (1,0), (1,1). A cell's mean points along a fixed
    unit direction that mixes a target axis, a group axis and their product,
    scaled by the cell's shift. Features have unit variance around the mean.
    """

    n: int
    dim: int
    mean_shift: tuple
    cell_probs: tuple = (0.25, 0.25, 0.25, 0.25)
    seed: int = 0

    def validate(self) -> None:
        if int(self.n) < 4:
            raise IngestionError("synthetic n must be at least 4", code="invalid-spec")
        if int(self.dim) < 1:
            raise IngestionError("synthetic dim must be at least 1", code="invalid-spec")
        shift = np.asarray(self.mean_shift, dtype=float).ravel()
        if shift.size == 1:
            shift = np.repeat(shift, 4)
        if shift.size != 4 or not np.all(np.isfinite(shift)):
            raise IngestionError("mean_shift needs one finite value or four", code="invalid-spec")
        probs = np.asarray(self.cell_probs, dtype=float)
        if probs.shape != (4,) or np.any(probs < 0) or not np.all(np.isfinite(probs)):
            raise IngestionError("cell_probs needs four non-negative values", code="invalid-spec")
        if abs(probs.sum() - 1.0) > 1e-12:
            raise IngestionError(f"cell_probs sum to {probs.sum()!r}, not 1", code="invalid-spec")


def cell_means(spec: SyntheticSpec) -> np.ndarray:
    """The 4 x dim matrix of cell means."""
    shift = np.asarray(spec.mean_shift, dtype=float).ravel()
    if shift.size == 1:
        shift = np.repeat(shift, 4)
    used = min(spec.dim, 3)
    means = np.zeros((4, spec.dim))
    for k, (s, y) in enumerate(CELLS):
        direction = np.array([2 * y - 1, 2 * s - 1, (2 * s - 1) * (2 * y - 1)], dtype=float)[:used]
        means[k, :used] = shift[k] * direction / math.sqrt(used)
    return means


def generate_synthetic(spec: SyntheticSpec) -> LabeledSample:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    counts = rng.multinomial(spec.n, np.asarray(spec.cell_probs, dtype=float))
    cell = np.repeat(np.arange(4), counts)
    rng.shuffle(cell)
    X = rng.standard_normal((spec.n, spec.dim)) + cell_means(spec)[cell]
    s = np.array([CELLS[c][0] for c in range(4)])[cell]
    y = np.array([CELLS[c][1] for c in range(4)])[cell]
    return LabeledSample.create(X, sensitive=s, target=y,
                                feature_names=[f"x{j}" for j in range(spec.dim)])
