"""Core domain types: labeled samples, prevalence values, DD estimates, error records.

Labels are stored as small integers with ``1`` standing for the positive
target class (⊕) or the sensitive group ``S=1`` and ``0`` for the other value.
A label vector that is not known is ``None``, never a sentinel array.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import SampleError

LABEL_FIELDS = ("sensitive", "target", "predicted")


def as_feature_matrix(values) -> np.ndarray:
    """Return ``values`` as a read-only, finite, 2-D float64 array."""
    X = np.array(values, dtype=np.float64)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    if X.ndim != 2 or X.shape[0] < 1 or X.shape[1] < 1:
        raise SampleError(f"feature matrix must be 2-D and non-empty, got shape {X.shape}",
                          code="invalid-shape")
    if not np.all(np.isfinite(X)):
        raise SampleError("feature matrix contains NaN or infinite values", code="non-finite-value")
    X.setflags(write=False)
    return X


def _as_labels(values) -> np.ndarray:
    y = np.asarray(values)
    if y.ndim != 1:
        raise SampleError(f"label vector must be 1-D, got shape {y.shape}", code="invalid-label")
    if y.dtype.kind == "f":
        if not np.all(np.isfinite(y)) or np.any(y != np.round(y)):
            raise SampleError("label vector contains non-integer values", code="invalid-label")
    elif y.dtype.kind not in "iub":
        raise SampleError(f"label vector has unsupported dtype {y.dtype}", code="invalid-label")
    y = y.astype(np.int8)
    if np.any((y != 0) & (y != 1)):
        raise SampleError("labels must be 0 or 1", code="invalid-label")
    y.setflags(write=False)
    return y


@dataclass(frozen=True, eq=False)
class LabeledSample:
    """Instances plus whichever label vectors are known for them.

    ``features`` is the instance-by-feature matrix. ``sensitive`` holds s,
    ``target`` holds y and ``predicted`` holds a classifier's ŷ; each is either
    ``None`` or an int8 vector with one entry per row.

    Construction does not validate; call :func:`validate_sample` (or use
    :meth:`create`) before relying on the invariants.
    """

    features: np.ndarray
    sensitive: Optional[np.ndarray] = None
    target: Optional[np.ndarray] = None
    predicted: Optional[np.ndarray] = None
    feature_names: Optional[tuple] = None

    @classmethod
    def create(cls, features, sensitive=None, target=None, predicted=None,
               feature_names=None) -> "LabeledSample":
        """Build a sample from array-likes and validate it."""
        X = as_feature_matrix(features)
        labels = {}
        for name, values in zip(LABEL_FIELDS, (sensitive, target, predicted)):
            labels[name] = None if values is None else _as_labels(values)
        names = None if feature_names is None else tuple(str(n) for n in feature_names)
        sample = cls(X, feature_names=names, **labels)
        validate_sample(sample)
        return sample

    def __len__(self) -> int:
        return int(self.features.shape[0])

    @property
    def n_features(self) -> int:
        return int(self.features.shape[1])

    def labels(self, selector: str) -> np.ndarray:
        """Return the label vector named ``selector``, raising if it is absent."""
        if selector not in LABEL_FIELDS:
            raise ValueError(f"unknown label selector {selector!r}")
        y = getattr(self, selector)
        if y is None:
            raise SampleError(f"sample has no {selector} labels", code="missing-labels")
        return y

    def subset(self, index) -> "LabeledSample":
        """Rows selected by an integer index array or a boolean mask."""
        index = np.asarray(index)
        if index.dtype == bool:
            index = np.flatnonzero(index)
        X = self.features[index]
        X.setflags(write=False)
        out = {}
        for name in LABEL_FIELDS:
            y = getattr(self, name)
            if y is not None:
                y = y[index]
                y.setflags(write=False)
            out[name] = y
        return LabeledSample(X, feature_names=self.feature_names, **out)

    def replace(self, **changes) -> "LabeledSample":
        """Copy with some label vectors replaced (``None`` drops a vector)."""
        for name in LABEL_FIELDS:
            if name in changes and changes[name] is not None:
                changes[name] = _as_labels(changes[name])
        sample = dataclasses.replace(self, **changes)
        validate_sample(sample)
        return sample

    def unlabeled(self) -> "LabeledSample":
        return LabeledSample(self.features, feature_names=self.feature_names)

    def prevalence(self, selector: str = "sensitive") -> float:
        y = self.labels(selector)
        if len(y) == 0:
            raise SampleError("prevalence of an empty sample is undefined", code="empty-sample")
        return float(np.mean(y))

    def fingerprint(self) -> str:
        """Stable content hash, used to check that runs share splits."""
        import hashlib

        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.features).tobytes())
        for name in LABEL_FIELDS:
            y = getattr(self, name)
            h.update(name.encode())
            if y is not None:
                h.update(np.ascontiguousarray(y).tobytes())
        return h.hexdigest()[:16]


def concat_samples(samples: Sequence[LabeledSample]) -> LabeledSample:
    """Stack samples row-wise; a label vector survives only if every part has it."""
    if not samples:
        raise SampleError("nothing to concatenate", code="empty-sample")
    widths = {s.n_features for s in samples}
    if len(widths) != 1:
        raise SampleError("samples have different feature widths", code="length-mismatch")
    X = np.vstack([s.features for s in samples])
    X.setflags(write=False)
    out = {}
    for name in LABEL_FIELDS:
        parts = [getattr(s, name) for s in samples]
        if all(p is not None for p in parts):
            y = np.concatenate(parts).astype(np.int8)
            y.setflags(write=False)
            out[name] = y
        else:
            out[name] = None
    return LabeledSample(X, feature_names=samples[0].feature_names, **out)


def validate_sample(sample: LabeledSample) -> None:
    """Check the sample's invariants, raising :class:`SampleError` on the first violation.

    Codes: ``length-mismatch``, ``non-finite-value``, ``invalid-label`` and
    ``invalid-shape``.
    """
    X = sample.features
    if not isinstance(X, np.ndarray) or X.ndim != 2 or X.shape[0] < 1 or X.shape[1] < 1:
        raise SampleError("features must be a non-empty 2-D array", code="invalid-shape")
    if not np.all(np.isfinite(X)):
        raise SampleError("feature matrix contains NaN or infinite values", code="non-finite-value")
    n = X.shape[0]
    for name in LABEL_FIELDS:
        y = getattr(sample, name)
        if y is None:
            continue
        y = np.asarray(y)
        if y.ndim != 1 or len(y) != n:
            raise SampleError(f"{name} has {len(y) if y.ndim == 1 else y.shape} entries "
                              f"for {n} rows", code="length-mismatch")
        if np.any((y != 0) & (y != 1)):
            raise SampleError(f"{name} labels must be 0 or 1", code="invalid-label")
    if sample.feature_names is not None and len(sample.feature_names) != X.shape[1]:
        raise SampleError("feature_names does not match the number of columns",
                          code="length-mismatch")


def save_sample(sample: LabeledSample, path) -> None:
    """Write a sample to ``.npz``; labels and values are stored exactly."""
    arrays = {"features": np.asarray(sample.features)}
    for name in LABEL_FIELDS:
        y = getattr(sample, name)
        if y is not None:
            arrays[name] = np.asarray(y)
    if sample.feature_names is not None:
        arrays["feature_names"] = np.array(sample.feature_names, dtype=str)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_sample(path) -> LabeledSample:
    with np.load(Path(path), allow_pickle=False) as z:
        kwargs = {name: z[name] for name in LABEL_FIELDS if name in z.files}
        names = tuple(z["feature_names"].tolist()) if "feature_names" in z.files else None
        return LabeledSample.create(z["features"], feature_names=names, **kwargs)


@dataclass(frozen=True)
class Prevalence:
    """Estimated or true prevalence of ``S=1`` together with the sample size behind it."""

    value: float
    support: int
    flags: tuple = ()

    def __post_init__(self):
        if not (0.0 <= self.value <= 1.0) or math.isnan(self.value):
            raise ValueError(f"prevalence {self.value} outside [0, 1]")
        if self.support < 0:
            raise ValueError("support must be non-negative")

    def __float__(self) -> float:
        return float(self.value)


@dataclass(frozen=True)
class DDEstimate:
    """Estimated acceptance rates per group and the resulting demographic disparity.

    ``branch_prevalences`` maps ``(branch, s)`` with branch in ``{"pos", "neg"}``
    to the smoothed prevalence used in the acceptance-rate formula;
    ``raw_prevalences`` holds the quantifier outputs before smoothing.
    """

    mu1: float
    mu0: float
    delta: float
    branch_prevalences: dict
    pr_pos: float
    raw_prevalences: dict = field(default_factory=dict)
    branch_sizes: tuple = (0, 0)
    flags: tuple = ()

    def __post_init__(self):
        if self.delta != self.mu1 - self.mu0:
            raise ValueError("delta must equal mu1 - mu0")


@dataclass(frozen=True)
class ErrorRecord:
    """One estimation of demographic disparity inside a protocol sweep.

    ``signed_error`` is ``estimated_dd - true_dd``. Failed repetitions keep
    their provenance, carry NaN numbers and a non-empty ``failure``.
    """

    protocol: str
    parameter: float
    grid_index: int
    split_id: int
    permutation_id: int
    repeat_id: int
    method: str
    signed_error: float
    true_dd: float
    estimated_dd: float
    seed: int
    dataset: str = ""
    split_hash: str = ""
    flags: str = ""
    failure: str = ""

    @classmethod
    def make(cls, *, estimated_dd: float, true_dd: float, **kw) -> "ErrorRecord":
        return cls(signed_error=estimated_dd - true_dd, true_dd=true_dd,
                   estimated_dd=estimated_dd, **kw)

    @property
    def failed(self) -> bool:
        return bool(self.failure)

    @property
    def key(self) -> tuple:
        return (self.split_id, self.permutation_id, self.repeat_id, self.grid_index)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        d = self.to_dict()
        for k, v in d.items():
            if isinstance(v, float) and math.isnan(v):
                d[k] = None
        return json.dumps(d, sort_keys=False)

    @classmethod
    def from_dict(cls, d: dict) -> "ErrorRecord":
        kw = {}
        for f in dataclasses.fields(cls):
            v = d.get(f.name, f.default)
            if f.type == "float" or f.name in ("parameter", "signed_error", "true_dd", "estimated_dd"):
                v = float("nan") if v in (None, "", "nan") else float(v)
            elif f.name in ("grid_index", "split_id", "permutation_id", "repeat_id", "seed"):
                v = int(v)
            else:
                v = "" if v is None else str(v)
            kw[f.name] = v
        return cls(**kw)


RECORD_FIELDS = tuple(f.name for f in dataclasses.fields(ErrorRecord))
