"""The benchmark protocols.

A run loops over random three-way splits, the six role permutations of the
parts, repeats and grid points. Each (split, permutation) pair is an
independent work item. Every random draw inside it comes from a generator
seeded by ``(base_seed, protocol, split, permutation, repeat, grid point)``,
so results do not depend on worker count, scheduling or the method list.
"""

from __future__ import annotations

import hashlib
import itertools
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

from ..classifiers import LinearModel, TrainerConfig, predict, train
from ..data import ErrorRecord, LabeledSample, concat_samples
from ..errors import BranchDegeneracyError, ConfigError, QuantFairError
from ..fairness import (BranchQuantifiers, DDPipelineConfig, decoupling_metrics, disparity,
                        estimate_from_branches, parse_method)
from ..quantifiers import QuantifierConfig, fit_many
from .sampling import (flip_to_target, sample_at_prevalence, sample_joint_ys, sample_uniform,
                       three_split_indices)

PROTOCOLS = ("sample-prev-D3-neg", "sample-prev-D3-pos", "sample-prev-D2-neg",
             "sample-prev-D2-pos", "sample-size-D2", "sample-prev-D1", "flip-prev-D1")
PERMUTATIONS = tuple(itertools.permutations(range(3)))
SPLIT_TAG = 7919
FIT_TAG = 104729

ELEVEN = tuple(round(i / 10, 1) for i in range(11))
NINE = tuple(round(i / 10, 1) for i in range(1, 10))


def default_grid(protocol: str):
    if protocol.startswith("sample-prev-D2"):
        return NINE
    if protocol == "sample-size-D2":
        return None
    return ELEVEN


@dataclass(frozen=True)
class ProtocolSpec:
    """What to run. ``grid`` of ``None`` means the protocol's default.

    For ``sample-size-D2`` the grid holds sample sizes; by default five
    sizes spaced geometrically from ``min_size`` to the auxiliary set size.
    """

    protocol: str
    methods: tuple = ("CC", "PCC", "ACC", "PACC", "SLD", "HDy", "MLPE")
    grid: Optional[tuple] = None
    n_splits: int = 2
    n_repeats: int = 3
    sample_size: int = 500
    base_seed: int = 0
    dataset: str = ""
    min_size: int = 1000
    n_sizes: int = 5
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    quantifier: QuantifierConfig = field(default_factory=QuantifierConfig)
    laplace_pseudocount: float = 0.5

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise ConfigError(f"unknown protocol {self.protocol!r}")
        if not self.methods:
            raise ConfigError("method list is empty")
        for m in self.methods:
            try:
                parse_method(m)
            except ValueError as exc:
                raise ConfigError(str(exc)) from exc
        if self.n_splits < 1 or self.n_repeats < 1 or self.sample_size < 2:
            raise ConfigError("n_splits, n_repeats must be >= 1 and sample_size >= 2")
        if self.grid is not None:
            grid = tuple(float(g) for g in self.grid)
            object.__setattr__(self, "grid", grid)
            if not grid:
                raise ConfigError("grid is empty")
            if self.protocol == "sample-size-D2":
                if any(g < 2 or g != int(g) for g in grid):
                    raise ConfigError("sizes must be integers >= 2")
            elif any(not 0.0 <= g <= 1.0 for g in grid):
                raise ConfigError("prevalence grid values must lie in [0, 1]")
            if self.protocol.startswith("sample-prev-D2") and any(g in (0.0, 1.0) for g in grid):
                raise ConfigError("sample-prev-D2 grids exclude 0 and 1")

    @classmethod
    def desk(cls, protocol: str, **kw) -> "ProtocolSpec":
        return cls(protocol, **{"n_splits": 2, "n_repeats": 3, **kw})

    @classmethod
    def paper(cls, protocol: str, **kw) -> "ProtocolSpec":
        return cls(protocol, **{"n_splits": 5, "n_repeats": 10, **kw})

    @property
    def code(self) -> int:
        return PROTOCOLS.index(self.protocol)

    def h_trainer(self) -> TrainerConfig:
        if self.trainer.kind == "logistic":
            return replace(self.trainer, class_weighting="balanced")
        return replace(self.trainer, class_weighting="none")

    def k_trainer(self) -> TrainerConfig:
        return replace(self.trainer, class_weighting="none")

    def pipelines(self) -> list:
        return [DDPipelineConfig.from_name(m, laplace_pseudocount=self.laplace_pseudocount,
                                           trainer=self.k_trainer(), quantifier=self.quantifier)
                for m in self.methods]

    def resolved_grid(self, aux_size: int) -> tuple:
        if self.grid is not None:
            return self.grid
        if self.protocol != "sample-size-D2":
            return default_grid(self.protocol)
        return size_grid(self.min_size, aux_size, self.n_sizes)


def size_grid(lo: int, hi: int, steps: int) -> tuple:
    """``steps`` integer sizes evenly spaced on a log scale from ``lo`` to ``hi``."""
    if lo < 2 or hi < lo:
        raise ConfigError(f"cannot space sizes from {lo} to {hi}")
    return tuple(float(round(v)) for v in np.geomspace(lo, hi, steps))


def record_seed(base_seed: int, *keys: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(base_seed), *[int(k) for k in keys]])


def split_parts(dataset: LabeledSample, base_seed: int, split_id: int) -> list:
    """Index arrays of the three parts of one split; depends only on the seed and split id."""
    rng = np.random.default_rng(record_seed(base_seed, SPLIT_TAG, split_id))
    return three_split_indices(dataset.labels("sensitive"), dataset.labels("target"), rng)


def split_hash(parts: Sequence[np.ndarray]) -> str:
    h = hashlib.sha256()
    for p in parts:
        h.update(np.asarray(p, dtype=np.int64).tobytes())
        h.update(b"|")
    return h.hexdigest()[:16]


FitFn = Callable[[str, LabeledSample], object]


def _fit_methods(methods, sample, group, seed, fit_fn) -> dict:
    """``{method: quantifier or the exception its fit raised}`` for one training sample."""
    if fit_fn is None:
        try:
            return fit_many(methods, sample, group[0].trainer, seed, group[0].quantifier)
        except QuantFairError:
            if len(methods) == 1:
                raise
    out = {}
    for m in methods:
        try:
            out[m] = (fit_fn(m, sample) if fit_fn else
                      fit_many([m], sample, group[0].trainer, seed, group[0].quantifier)[m])
        except QuantFairError as exc:
            out[m] = exc
    return out


def fit_all_branches(h: LinearModel, d2: LabeledSample, pipelines: Sequence[DDPipelineConfig],
                     seed: int, fit_fn: Optional[FitFn] = None) -> dict:
    """Branch quantifiers for every pipeline, sharing fitted models where possible.

    Returns ``{pipeline name: BranchQuantifiers or the exception raised}``; a
    failure while fitting one method does not affect the others.
    """
    out = {}
    s = d2.labels("sensitive")
    accepted = predict(h, d2.features) == 1
    for split_flag in (True, False):
        group = [p for p in pipelines if p.split_by_prediction == split_flag]
        if not group:
            continue
        methods = [p.method for p in group]
        try:
            if split_flag:
                fitted = {}
                for key, mask in (("pos", accepted), ("neg", ~accepted)):
                    branch_s = s[mask]
                    if branch_s.size == 0 or branch_s.min() == branch_s.max():
                        raise BranchDegeneracyError(
                            f"auxiliary {key} branch has {branch_s.size} instances and "
                            f"{np.unique(branch_s).size} sensitive class(es)")
                    fitted[key] = (_fit_methods(methods, d2.subset(mask), group, seed, fit_fn),
                                   float(np.mean(branch_s)))
                (pos, c_pos), (neg, c_neg) = fitted["pos"], fitted["neg"]
                for p in group:
                    qp, qn = pos[p.method], neg[p.method]
                    bad = qp if isinstance(qp, Exception) else qn
                    out[p.name] = bad if isinstance(bad, Exception) else BranchQuantifiers(
                        qp, qn, c_pos, c_neg, False)
            else:
                qs = _fit_methods(methods, d2, group, seed, fit_fn)
                c = float(np.mean(s))
                for p in group:
                    q = qs[p.method]
                    out[p.name] = q if isinstance(q, Exception) else BranchQuantifiers(
                        q, q, c, c, True)
        except QuantFairError as exc:
            for p in group:
                out[p.name] = exc
    return out


@dataclass
class Context:
    """Everything needed to evaluate all methods at one (repeat, grid point)."""

    repeat_id: int
    grid_index: int
    parameter: float
    seed: int
    h: Optional[LinearModel] = None
    branches: dict = field(default_factory=dict)
    test: Optional[LabeledSample] = None
    true_dd: float = float("nan")
    error: Optional[Exception] = None
    flags: tuple = ()


def _int_seed(ss: np.random.SeedSequence) -> int:
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def _contexts(spec: ProtocolSpec, d1, d2, d3, split_id: int, perm_id: int,
              fit_fn: Optional[FitFn]) -> Iterator[Context]:
    pipelines = spec.pipelines()
    code = spec.code
    item_seed = _int_seed(record_seed(spec.base_seed, FIT_TAG, code, split_id, perm_id))
    proto = spec.protocol
    grid = spec.resolved_grid(min(len(d1), len(d2), len(d3)))

    def rng_for(repeat, g):
        ss = record_seed(spec.base_seed, code, split_id, perm_id, repeat, g)
        return np.random.default_rng(ss), _int_seed(ss)

    def fail(ctx, exc):
        ctx.error = exc
        return ctx

    fixed_h = None
    if not proto.endswith("D1"):
        fixed_h = train(d1, "target", spec.h_trainer(), item_seed)

    if proto.startswith("sample-prev-D3"):
        branches = fit_all_branches(fixed_h, d2, pipelines, item_seed, fit_fn)
        accepted = predict(fixed_h, d3.features) == 1
        pos_part, neg_part = d3.subset(accepted), d3.subset(~accepted)
        varied, other = (neg_part, pos_part) if proto.endswith("neg") else (pos_part, neg_part)
        for repeat in range(spec.n_repeats):
            for g, p in enumerate(grid):
                rng, seed = rng_for(repeat, g)
                ctx = Context(repeat, g, p, seed, fixed_h, branches)
                try:
                    a, fa = sample_at_prevalence(varied, "sensitive", p, spec.sample_size, rng,
                                                 with_flags=True)
                    b, fb = sample_uniform(other, spec.sample_size, rng, with_flags=True)
                    ctx.test = concat_samples([a, b])
                    ctx.flags = fa + fb
                    ctx.true_dd = disparity(predict(fixed_h, ctx.test.features),
                                            ctx.test.labels("sensitive"))
                except QuantFairError as exc:
                    fail(ctx, exc)
                yield ctx
        return

    if proto.startswith("sample-prev-D2") or proto == "sample-size-D2":
        try:
            base_true = disparity(predict(fixed_h, d3.features), d3.labels("sensitive"))
            base_error = None
        except QuantFairError as exc:
            base_true, base_error = float("nan"), exc
        accepted = predict(fixed_h, d2.features) == 1
        pos_part, neg_part = d2.subset(accepted), d2.subset(~accepted)
        varied, other = (neg_part, pos_part) if proto.endswith("neg") else (pos_part, neg_part)
        for repeat in range(spec.n_repeats):
            for g, p in enumerate(grid):
                rng, seed = rng_for(repeat, g)
                ctx = Context(repeat, g, p, seed, fixed_h, test=d3, true_dd=base_true)
                if base_error is not None:
                    yield fail(ctx, base_error)
                    continue
                try:
                    if proto == "sample-size-D2":
                        aux, ctx.flags = sample_uniform(d2, int(p), rng, with_flags=True)
                    else:
                        a, fa = sample_at_prevalence(varied, "sensitive", p, spec.sample_size,
                                                     rng, with_flags=True)
                        b, fb = sample_uniform(other, spec.sample_size, rng, with_flags=True)
                        aux, ctx.flags = concat_samples([a, b]), fa + fb
                    ctx.branches = fit_all_branches(fixed_h, aux, pipelines, seed, fit_fn)
                except QuantFairError as exc:
                    fail(ctx, exc)
                yield ctx
        return

    # protocols that vary the classifier's training set
    for repeat in range(spec.n_repeats):
        for g, p in enumerate(grid):
            rng, seed = rng_for(repeat, g)
            ctx = Context(repeat, g, p, seed, test=d3)
            try:
                if proto == "sample-prev-D1":
                    d1s, ctx.flags = sample_joint_ys(d1, p, spec.sample_size, rng, with_flags=True)
                else:
                    d1s, ctx.flags, _ = flip_to_target(d1, p, spec.sample_size, rng,
                                                       with_flags=True)
                ctx.h = train(d1s, "target", spec.h_trainer(), seed)
                ctx.true_dd = disparity(predict(ctx.h, d3.features), d3.labels("sensitive"))
                ctx.branches = fit_all_branches(ctx.h, d2, pipelines, seed, fit_fn)
            except QuantFairError as exc:
                fail(ctx, exc)
            yield ctx


def _failure_text(exc: Exception) -> str:
    code = getattr(exc, "code", type(exc).__name__)
    return f"{code}: {exc}"


def _item_parts(spec, dataset, split_id, perm_id):
    parts = split_parts(dataset, spec.base_seed, split_id)
    roles = [dataset.subset(parts[i]) for i in PERMUTATIONS[perm_id]]
    return roles, split_hash(parts)


def run_item(spec: ProtocolSpec, dataset: LabeledSample, split_id: int, perm_id: int,
             fit_fn: Optional[FitFn] = None) -> list:
    """All error records of one (split, permutation) work item."""
    (d1, d2, d3), shash = _item_parts(spec, dataset, split_id, perm_id)
    pipelines = spec.pipelines()
    records = []
    for ctx in _contexts(spec, d1, d2, d3, split_id, perm_id, fit_fn):
        common = dict(protocol=spec.protocol, parameter=float(ctx.parameter),
                      grid_index=ctx.grid_index, split_id=split_id, permutation_id=perm_id,
                      repeat_id=ctx.repeat_id, seed=ctx.seed, dataset=spec.dataset,
                      split_hash=shash)
        for pipe in pipelines:
            flags = list(ctx.flags)
            failure = ""
            est = float("nan")
            branches = ctx.branches.get(pipe.name)
            if ctx.error is not None:
                failure = _failure_text(ctx.error)
            elif isinstance(branches, Exception):
                failure = _failure_text(branches)
            else:
                try:
                    result = estimate_from_branches(branches, ctx.h, ctx.test.features, pipe)
                    est = result.delta
                    flags.extend(result.flags)
                except QuantFairError as exc:
                    failure = _failure_text(exc)
            records.append(ErrorRecord.make(estimated_dd=est, true_dd=float(ctx.true_dd),
                                            method=pipe.name, failure=failure,
                                            flags=";".join(dict.fromkeys(flags)), **common))
    return records


@dataclass(frozen=True)
class DecouplingRecord:
    protocol: str
    parameter: float
    grid_index: int
    split_id: int
    permutation_id: int
    repeat_id: int
    method: str
    branch: str
    abs_error: float
    accuracy: float
    f1: float
    dataset: str = ""
    failure: str = ""


DECOUPLING_PROTOCOLS = PROTOCOLS[:4]


def run_decoupling_item(spec: ProtocolSpec, dataset: LabeledSample, split_id: int,
                        perm_id: int, fit_fn: Optional[FitFn] = None) -> list:
    """Quantification error, accuracy and F1 of each method on each test branch."""
    if spec.protocol not in DECOUPLING_PROTOCOLS:
        raise ConfigError(f"decoupling needs one of {DECOUPLING_PROTOCOLS}")
    (d1, d2, d3), _ = _item_parts(spec, dataset, split_id, perm_id)
    pipelines = spec.pipelines()
    out = []
    nan = float("nan")
    for ctx in _contexts(spec, d1, d2, d3, split_id, perm_id, fit_fn):
        common = dict(protocol=spec.protocol, parameter=float(ctx.parameter),
                      grid_index=ctx.grid_index, split_id=split_id, permutation_id=perm_id,
                      repeat_id=ctx.repeat_id, dataset=spec.dataset)
        accepted = None
        if ctx.error is None:
            accepted = predict(ctx.h, ctx.test.features) == 1
        for pipe in pipelines:
            branches = ctx.branches.get(pipe.name)
            for key in ("pos", "neg"):
                failure = ""
                vals = (nan, nan, nan)
                if ctx.error is not None:
                    failure = _failure_text(ctx.error)
                elif isinstance(branches, Exception):
                    failure = _failure_text(branches)
                else:
                    mask = accepted if key == "pos" else ~accepted
                    q = branches.pos if key == "pos" else branches.neg
                    try:
                        m = decoupling_metrics(q, ctx.test.subset(mask))
                        vals = (m.abs_error, m.accuracy, m.f1)
                    except QuantFairError as exc:
                        failure = _failure_text(exc)
                out.append(DecouplingRecord(method=pipe.name, branch=key, abs_error=vals[0],
                                            accuracy=vals[1], f1=vals[2], failure=failure,
                                            **common))
    return out


_WORKER_DATASET: Optional[LabeledSample] = None


def _init_worker(dataset):
    global _WORKER_DATASET
    _WORKER_DATASET = dataset


def _worker(kind, spec, split_id, perm_id, fit_fn):
    fn = run_item if kind == "errors" else run_decoupling_item
    return fn(spec, _WORKER_DATASET, split_id, perm_id, fit_fn)


def _run_items(kind: str, spec: ProtocolSpec, dataset: LabeledSample, jobs: int,
               fit_fn: Optional[FitFn]) -> list:
    items = [(s, p) for s in range(spec.n_splits) for p in range(len(PERMUTATIONS))]
    if jobs <= 1:
        fn = run_item if kind == "errors" else run_decoupling_item
        chunks = [fn(spec, dataset, s, p, fit_fn) for s, p in items]
    else:
        with ProcessPoolExecutor(max_workers=jobs, initializer=_init_worker,
                                 initargs=(dataset,)) as pool:
            futures = [pool.submit(_worker, kind, spec, s, p, fit_fn) for s, p in items]
            chunks = [f.result() for f in futures]
    records = [r for chunk in chunks for r in chunk]
    order = {m: i for i, m in enumerate(spec.methods)}
    key = (lambda r: (r.split_id, r.permutation_id, r.repeat_id, r.grid_index,
                      order[r.method], getattr(r, "branch", "")))
    return sorted(records, key=key)


def run_protocol(spec: ProtocolSpec, dataset: LabeledSample, jobs: int = 1,
                 fit_fn: Optional[FitFn] = None) -> list:
    """Run a protocol and return its error records in a fixed order.

    ``fit_fn(method, sample)`` replaces quantifier fitting; it may return any
    callable mapping a feature matrix to a prevalence.
    """
    return _run_items("errors", spec, dataset, jobs, fit_fn)


def run_decoupling(spec: ProtocolSpec, dataset: LabeledSample, jobs: int = 1,
                   fit_fn: Optional[FitFn] = None) -> list:
    return _run_items("decoupling", spec, dataset, jobs, fit_fn)
