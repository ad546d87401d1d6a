"""Prevalence estimators for the sensitive class s=1.

Every method is fit on a sample with sensitive labels and then applied to
unlabeled samples. ``fit_many`` shares the classifier and the out-of-fold
posteriors between the methods that can use them, which is what the
benchmark protocols call.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .classifiers import (LinearModel, OutOfFold, RateEstimates, TrainerConfig, out_of_fold,
                          posterior, train)
from .data import LabeledSample, Prevalence
from .errors import EmptySampleError, MissingValidationError, SingleClassError

METHODS = ("CC", "PCC", "ACC", "PACC", "SLD", "HDy", "MLPE")
HDY_BINS = tuple(range(10, 111, 10))


@dataclass(frozen=True)
class QuantifierConfig:
    k_folds: int = 10
    sld_tol: float = 1e-4
    sld_max_iter: int = 1000
    hdy_bins: tuple = HDY_BINS
    hdy_alpha_steps: int = 100
    hdy_validation_fraction: float = 0.4
    degenerate_gap: float = 1e-6


@dataclass(frozen=True, eq=False)
class Quantifier:
    """A fitted prevalence estimator.

    ``hdy_validation`` is ``(positive_posteriors, negative_posteriors)`` from
    the held-out part of the training data.
    """

    method: str
    train_prevalence: Prevalence
    model: Optional[LinearModel] = None
    rates: Optional[RateEstimates] = None
    hdy_validation: Optional[tuple] = None
    config: QuantifierConfig = field(default_factory=QuantifierConfig)
    flags: tuple = ()

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if (self.method != "MLPE") != (self.model is not None):
            raise ValueError(f"{self.method}: model presence is wrong")
        if (self.method in ("ACC", "PACC")) != (self.rates is not None):
            raise ValueError(f"{self.method}: rates presence is wrong")
        if (self.method == "HDy") != (self.hdy_validation is not None):
            raise ValueError(f"{self.method}: validation presence is wrong")


@dataclass(frozen=True)
class SldTrace:
    iterations: int
    final_shift: float
    prevalence_path: tuple


def _train_prevalence(train: LabeledSample) -> Prevalence:
    s = train.labels("sensitive")
    if s.size == 0:
        raise EmptySampleError("training sample is empty")
    return Prevalence(float(np.mean(s)), int(s.size))


def _require_both_classes(train: LabeledSample) -> None:
    s = train.labels("sensitive")
    if s.size == 0 or s.min() == s.max():
        raise SingleClassError("training sample contains a single sensitive class")


def hdy_split(labels, fraction: float, seed: int):
    """Stratified train/validation masks: ``round(fraction * n_c)`` of each class held out.

    Each class keeps at least one instance on both sides when it has two or more.
    """
    y = np.asarray(labels)
    order = np.random.default_rng(seed).permutation(y.size)
    validation = np.zeros(y.size, dtype=bool)
    for cls in (0, 1):
        members = order[y[order] == cls]
        take = int(np.floor(fraction * members.size + 0.5))
        if members.size >= 2:
            take = min(max(take, 1), members.size - 1)
        validation[members[:take]] = True
    return ~validation, validation


def _fit_hdy(train_sample, trainer_config, seed, config):
    s = train_sample.labels("sensitive")
    fit_mask, val_mask = hdy_split(s, config.hdy_validation_fraction, seed)
    model = train(train_sample.subset(fit_mask), "sensitive", trainer_config, seed)
    val_post = posterior(model, train_sample.features[val_mask])
    val_s = s[val_mask]
    pos, neg = val_post[val_s == 1].copy(), val_post[val_s == 0].copy()
    pos.setflags(write=False)
    neg.setflags(write=False)
    return model, (pos, neg)


def fit_many(methods: Sequence[str], train_sample: LabeledSample,
             trainer_config: TrainerConfig = TrainerConfig(), seed: int = 0,
             config: QuantifierConfig = QuantifierConfig()) -> dict:
    """Fit several methods on one training sample, sharing what they have in common."""
    methods = list(dict.fromkeys(methods))
    for m in methods:
        if m not in METHODS:
            raise ValueError(f"unknown method {m!r}")
    prev = _train_prevalence(train_sample)
    if any(m != "MLPE" for m in methods):
        _require_both_classes(train_sample)
    out = {}
    model = None
    oof: Optional[OutOfFold] = None
    if any(m in ("CC", "PCC", "ACC", "PACC", "SLD") for m in methods):
        model = train(train_sample, "sensitive", trainer_config, seed)
    if any(m in ("ACC", "PACC") for m in methods):
        oof = out_of_fold(train_sample, "sensitive", trainer_config, config.k_folds, seed)
    for m in methods:
        if m == "MLPE":
            out[m] = Quantifier(m, prev, config=config)
        elif m == "HDy":
            hmodel, val = _fit_hdy(train_sample, trainer_config, seed, config)
            out[m] = Quantifier(m, prev, hmodel, hdy_validation=val, config=config)
        elif m in ("ACC", "PACC"):
            out[m] = Quantifier(m, prev, model, oof.rates(soft=(m == "PACC")), config=config,
                                flags=oof.flags)
        else:
            out[m] = Quantifier(m, prev, model, config=config)
    return out


def fit(method: str, train_sample: LabeledSample, trainer_config: TrainerConfig = TrainerConfig(),
        seed: int = 0, config: QuantifierConfig = QuantifierConfig()) -> Quantifier:
    return fit_many([method], train_sample, trainer_config, seed, config)[method]


def _features(sample) -> np.ndarray:
    X = sample.features if isinstance(sample, LabeledSample) else np.asarray(sample, dtype=float)
    if X.ndim != 2 or X.shape[0] == 0:
        raise EmptySampleError("cannot quantify an empty sample")
    return X


def _check(q: Quantifier, method: str) -> None:
    if q.method != method:
        raise ValueError(f"quantifier is {q.method}, not {method}")


def _prevalence(value: float, n: int, flags=()) -> Prevalence:
    return Prevalence(float(min(max(value, 0.0), 1.0)), int(n), tuple(flags))


def adjusted_count(raw: float, tpr: float, fpr: float, gap: float = 1e-6):
    """Invert ``raw = p tpr + (1 - p) fpr`` for p and clip to [0, 1].

    Returns ``(value, degenerate)``; a degenerate denominator returns ``raw``.
    """
    if abs(tpr - fpr) < gap:
        return float(raw), True
    return float(min(max((raw - fpr) / (tpr - fpr), 0.0), 1.0)), False


def quantify_cc(q: Quantifier, sample) -> Prevalence:
    _check(q, "CC")
    X = _features(sample)
    return _prevalence(np.mean(posterior(q.model, X) >= 0.5), len(X))


def quantify_pcc(q: Quantifier, sample) -> Prevalence:
    _check(q, "PCC")
    X = _features(sample)
    return _prevalence(np.mean(posterior(q.model, X)), len(X))


def quantify_acc(q: Quantifier, sample) -> Prevalence:
    _check(q, "ACC")
    X = _features(sample)
    raw = float(np.mean(posterior(q.model, X) >= 0.5))
    value, degenerate = adjusted_count(raw, q.rates.tpr, q.rates.fpr, q.config.degenerate_gap)
    return _prevalence(value, len(X), ("degenerate-rates",) if degenerate else ())


def quantify_pacc(q: Quantifier, sample) -> Prevalence:
    _check(q, "PACC")
    X = _features(sample)
    raw = float(np.mean(posterior(q.model, X)))
    value, degenerate = adjusted_count(raw, q.rates.tpr, q.rates.fpr, q.config.degenerate_gap)
    return _prevalence(value, len(X), ("degenerate-rates",) if degenerate else ())


def sld_em(posteriors, train_prevalence: float, tol: float = 1e-4, max_iter: int = 1000,
           callback: Optional[Callable] = None):
    """Expectation-maximization re-estimation of the class prior.

    ``posteriors`` are Pr(s=1|x) from a classifier trained where the prior
    was ``train_prevalence``. Each step rescales every two-class posterior by
    the ratio of the current to the training prior and renormalizes; the new
    prior is the mean rescaled posterior. Stops when consecutive priors differ
    by less than ``tol`` or after ``max_iter`` steps. ``callback(t, probs)``
    sees the n x 2 posterior matrix of each step.

    Returns ``(prevalence, trace, adjusted_posteriors_for_s1)``.
    """
    pi = np.asarray(posteriors, dtype=np.float64)
    base = np.array([1.0 - train_prevalence, train_prevalence])
    start = np.column_stack([1.0 - pi, pi])
    prev = base.copy()
    path = [float(prev[1])]
    probs = start
    shift = float("inf")
    t = 0
    while t < max_iter:
        t += 1
        probs = start * (prev / base)
        probs /= probs.sum(axis=1, keepdims=True)
        new = probs.mean(axis=0)
        shift = abs(float(new[1] - prev[1]))
        prev = new
        path.append(float(prev[1]))
        if callback is not None:
            callback(t, probs)
        if shift < tol:
            break
    return float(prev[1]), SldTrace(t, shift, tuple(path)), probs[:, 1].copy()


def quantify_sld(q: Quantifier, sample):
    """EM-adjusted prevalence, its trace and the adjusted per-instance posteriors."""
    _check(q, "SLD")
    X = _features(sample)
    pi = posterior(q.model, X)
    p0 = q.train_prevalence.value
    if not 0.0 < p0 < 1.0:
        return (_prevalence(p0, len(X), ("degenerate-train-prevalence",)),
                SldTrace(0, 0.0, (p0,)), pi)
    value, trace, adjusted = sld_em(pi, p0, q.config.sld_tol, q.config.sld_max_iter)
    flags = () if trace.final_shift < q.config.sld_tol else ("sld-iteration-cap",)
    return _prevalence(value, len(X), flags), trace, adjusted


def histogram(values, bins: int) -> np.ndarray:
    """Relative frequencies over ``bins`` equal-width bins covering [0, 1]."""
    counts, _ = np.histogram(np.asarray(values, dtype=float), bins=bins, range=(0.0, 1.0))
    return counts / counts.sum()


def hellinger(p, q) -> float:
    """Hellinger distance between two discrete distributions, as the root of summed squared root gaps."""
    return float(np.sqrt(np.sum((np.sqrt(p) - np.sqrt(q)) ** 2)))


def hdy_estimate(test_posteriors, positive_validation, negative_validation,
                 bins: Sequence[int] = HDY_BINS, alpha_steps: int = 100):
    """Median over bin counts of the mixture weight closest to the test histogram.

    Returns ``(median, per_bin_minimizers)``.
    """
    if len(positive_validation) == 0 or len(negative_validation) == 0:
        raise MissingValidationError("HDy needs positive and negative validation posteriors")
    alphas = np.arange(alpha_steps + 1) / alpha_steps
    best = []
    for b in bins:
        v1 = histogram(positive_validation, b)
        v0 = histogram(negative_validation, b)
        u = histogram(test_posteriors, b)
        mix = (1.0 - alphas)[:, None] * v0 + alphas[:, None] * v1
        dist = np.sqrt(np.sum((np.sqrt(mix) - np.sqrt(u)) ** 2, axis=1))
        best.append(float(alphas[int(np.argmin(dist))]))
    return float(np.median(best)), tuple(best)


def quantify_hdy(q: Quantifier, sample) -> Prevalence:
    _check(q, "HDy")
    X = _features(sample)
    pos, neg = q.hdy_validation
    value, _ = hdy_estimate(posterior(q.model, X), pos, neg, q.config.hdy_bins,
                            q.config.hdy_alpha_steps)
    return _prevalence(value, len(X))


def quantify_mlpe(q: Quantifier, sample) -> Prevalence:
    _check(q, "MLPE")
    X = _features(sample)
    return _prevalence(q.train_prevalence.value, len(X))


_DISPATCH = {
    "CC": quantify_cc,
    "PCC": quantify_pcc,
    "ACC": quantify_acc,
    "PACC": quantify_pacc,
    "SLD": lambda q, x: quantify_sld(q, x)[0],
    "HDy": quantify_hdy,
    "MLPE": quantify_mlpe,
}


def quantify(q: Quantifier, sample, s: int = 1) -> Prevalence:
    """Estimated prevalence of sensitive value ``s`` in ``sample``."""
    p = _DISPATCH[q.method](q, sample)
    if s == 1:
        return p
    if s != 0:
        raise ValueError("s must be 0 or 1")
    return Prevalence(1.0 - p.value, p.support, p.flags)
