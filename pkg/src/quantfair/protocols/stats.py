"""Error aggregation, paired significance tests and boxplot summaries."""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy import stats

from ..data import ErrorRecord
from ..errors import EmptyGroupError, SampleError

TIER_BEST = "best"
TIER_PLAIN = "plain"
TIER_DAGGER = "dagger"
TIER_DDAGGER = "ddagger"
TIER_MARKS = {TIER_BEST: "", TIER_PLAIN: "", TIER_DAGGER: "†", TIER_DDAGGER: "‡"}


@dataclass(frozen=True)
class AggregateRow:
    dataset: str
    method: str
    n: int
    mae: float
    mae_std: float
    mse: float
    mse_std: float
    p_ae_lt_01: float
    p_ae_lt_02: float
    failures: int = 0
    significance: str = TIER_PLAIN
    significance_mse: str = TIER_PLAIN


def error_summary(errors: Sequence[float]) -> dict:
    e = np.asarray(errors, dtype=float)
    if e.size == 0:
        raise EmptyGroupError("no errors to aggregate")
    ae = np.abs(e)
    se = e * e
    return dict(n=int(e.size), mae=float(ae.mean()), mae_std=float(ae.std()),
                mse=float(se.mean()), mse_std=float(se.std()),
                p_ae_lt_01=float(np.mean(ae < 0.1)), p_ae_lt_02=float(np.mean(ae < 0.2)))


def paired_ttest(a: Sequence[float], b: Sequence[float]) -> float:
    """Two-tailed p-value of a paired t-test.

    All-zero differences give 1; constant nonzero differences give 0.
    """
    x = np.asarray(a, dtype=float)
    y = np.asarray(b, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise SampleError("paired samples must have equal lengths", code="length-mismatch")
    if x.size < 2:
        raise SampleError("paired test needs at least two pairs", code="length-mismatch")
    d = x - y
    if np.all(d == 0):
        return 1.0
    sd = float(np.std(d, ddof=1))
    if sd == 0.0:
        return 0.0
    t = float(np.mean(d)) / (sd / math.sqrt(d.size))
    return float(2.0 * stats.t.sf(abs(t), d.size - 1))


def significance_tier(p: float) -> str:
    if p <= 0.001:
        return TIER_PLAIN
    if p < 0.05:
        return TIER_DAGGER
    return TIER_DDAGGER


def _pair_key(r: ErrorRecord) -> tuple:
    return (r.protocol, r.split_id, r.permutation_id, r.repeat_id, r.grid_index)


def aggregate(records: Iterable[ErrorRecord]) -> list:
    """One row per (dataset, method), with tiers relative to that dataset's best method.

    Failed records are counted but excluded from the statistics. The t-tests
    pair records on (protocol, split, permutation, repeat, grid point),
    using absolute errors for MAE and squared errors for MSE.
    """
    groups = defaultdict(list)
    failures = defaultdict(int)
    for r in records:
        key = (r.dataset, r.method)
        if r.failed:
            failures[key] += 1
            groups.setdefault(key, [])
        else:
            groups[key].append(r)
    if not groups:
        raise EmptyGroupError("no records to aggregate")
    rows = {}
    for key in sorted(groups):
        recs = groups[key]
        if not recs:
            raise EmptyGroupError(f"every record failed for {key}")
        rows[key] = error_summary([r.signed_error for r in recs])
    out = []
    for dataset in sorted({k[0] for k in rows}):
        keys = [k for k in rows if k[0] == dataset]
        tiers = {}
        for metric, transform in (("mae", abs), ("mse", lambda e: e * e)):
            best = min(keys, key=lambda k: (rows[k][metric], k[1]))
            ref = {_pair_key(r): transform(r.signed_error) for r in groups[best]}
            for k in keys:
                if k == best:
                    tiers[(k, metric)] = TIER_BEST
                    continue
                mine = {_pair_key(r): transform(r.signed_error) for r in groups[k]}
                shared = sorted(set(ref) & set(mine))
                if len(shared) < 2:
                    tiers[(k, metric)] = TIER_DDAGGER
                    continue
                p = paired_ttest([mine[s] for s in shared], [ref[s] for s in shared])
                tiers[(k, metric)] = significance_tier(p)
        for k in sorted(keys, key=lambda k: k[1]):
            out.append(AggregateRow(dataset=k[0], method=k[1], failures=failures.get(k, 0),
                                    significance=tiers[(k, "mae")],
                                    significance_mse=tiers[(k, "mse")], **rows[k]))
    return out


@dataclass(frozen=True)
class BoxStats:
    n: int
    q1: float
    median: float
    q3: float
    whisker_low: float
    whisker_high: float
    outliers: tuple


def box_stats(values: Sequence[float]) -> BoxStats:
    """Quartiles (linear interpolation), 1.5 IQR whiskers and the points beyond them."""
    v = np.sort(np.asarray(values, dtype=float))
    if v.size == 0:
        raise EmptyGroupError("no values for a boxplot")
    q1, med, q3 = (float(x) for x in np.percentile(v, [25, 50, 75]))
    iqr = q3 - q1
    lo_fence, hi_fence = q1 - 1.5 * iqr, q3 + 1.5 * iqr
    inside = v[(v >= lo_fence) & (v <= hi_fence)]
    outliers = tuple(float(x) for x in v[(v < lo_fence) | (v > hi_fence)])
    return BoxStats(int(v.size), q1, med, q3, float(inside.min()), float(inside.max()), outliers)
