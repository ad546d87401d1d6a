"""Demographic disparity of a classifier estimated from quantifiers.

The classifier ``h`` splits both the auxiliary set (with sensitive labels)
and the deployment set (without them) into accepted and rejected branches.
Quantifiers fit on the auxiliary branches estimate the share of ``s=1`` in
each deployment branch, and Bayes' rule turns those shares into acceptance
rates per group.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .classifiers import LinearModel, TrainerConfig, predict
from .data import DDEstimate, LabeledSample
from .errors import (BranchDegeneracyError, EmptyGroupError, EmptySampleError,
                     NotApplicableError)
from .quantifiers import (METHODS, Quantifier, QuantifierConfig, fit_many, quantify,
                          quantify_sld)
from .classifiers import posterior

ABLATION_SUFFIX = "-nosD2"


def parse_method(name: str):
    """``"PACC"`` -> ``("PACC", True)``; ``"PACC-nosD2"`` -> ``("PACC", False)``."""
    split = True
    base = name
    if name.endswith(ABLATION_SUFFIX):
        base, split = name[: -len(ABLATION_SUFFIX)], False
    if base not in METHODS:
        raise ValueError(f"unknown method {name!r}")
    return base, split


@dataclass(frozen=True)
class DDPipelineConfig:
    method: str = "PACC"
    split_by_prediction: bool = True
    laplace_pseudocount: float = 0.5
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    quantifier: QuantifierConfig = field(default_factory=QuantifierConfig)
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.laplace_pseudocount < 0:
            raise ValueError("laplace_pseudocount must be non-negative")

    @classmethod
    def from_name(cls, name: str, **kw) -> "DDPipelineConfig":
        base, split = parse_method(name)
        return cls(method=base, split_by_prediction=split, **kw)

    @property
    def name(self) -> str:
        return self.method + ("" if self.split_by_prediction else ABLATION_SUFFIX)


def laplace_smooth(p_hat: float, n: int, control: float, pseudocount: float = 0.5,
                   n_classes: int = 2) -> float:
    """Pull an estimate from ``n`` instances toward ``control``.

    ``(p_hat * n + control * a) / (n + a)`` with ``a = pseudocount * n_classes``.
    """
    a = pseudocount * n_classes
    if n + a == 0:
        return float(control)
    return float((p_hat * n + control * a) / (n + a))


@dataclass(frozen=True, eq=False)
class BranchQuantifiers:
    """Quantifiers for the accepted (``pos``) and rejected (``neg``) branches.

    In the ablated variant both fields hold the same object. ``controls``
    holds the true ``s=1`` prevalence of the auxiliary data behind each.
    """

    pos: object
    neg: object
    control_pos: float
    control_neg: float
    shared: bool


FitFn = Callable[[LabeledSample], object]


def _default_fit(config: DDPipelineConfig) -> FitFn:
    def fit_fn(sample: LabeledSample):
        return fit_many([config.method], sample, config.trainer, config.seed,
                        config.quantifier)[config.method]
    return fit_fn


def fit_branch_quantifiers(h: LinearModel, d2: LabeledSample, config: DDPipelineConfig,
                           fit_fn: Optional[FitFn] = None) -> BranchQuantifiers:
    """Fit one quantifier per prediction branch of ``d2`` (or one overall when ablated)."""
    fit_fn = fit_fn or _default_fit(config)
    s = d2.labels("sensitive")
    if not config.split_by_prediction:
        q = fit_fn(d2)
        c = float(np.mean(s))
        return BranchQuantifiers(q, q, c, c, True)
    accepted = predict(h, d2.features) == 1
    fitted = {}
    for key, mask in (("pos", accepted), ("neg", ~accepted)):
        branch = s[mask]
        if branch.size == 0 or branch.min() == branch.max():
            raise BranchDegeneracyError(
                f"auxiliary {key} branch has {branch.size} instances and "
                f"{np.unique(branch).size} sensitive class(es)")
        fitted[key] = (fit_fn(d2.subset(mask)), float(np.mean(branch)))
    return BranchQuantifiers(fitted["pos"][0], fitted["neg"][0], fitted["pos"][1],
                             fitted["neg"][1], False)


def _run(q, X) -> tuple:
    if isinstance(q, Quantifier):
        p = quantify(q, X)
        return p.value, p.flags
    return float(q(X)), ()


def acceptance_rates(p_pos: float, p_neg: float, pr_pos: float):
    """Bayes' rule: ``Pr(accepted | s)`` for ``s=1`` and ``s=0`` from branch shares of ``s=1``."""
    pr_neg = 1.0 - pr_pos
    out = []
    for a, b in ((p_pos, p_neg), (1.0 - p_pos, 1.0 - p_neg)):
        den = a * pr_pos + b * pr_neg
        out.append(float(a * pr_pos / den) if den > 0 else float("nan"))
    return out[0], out[1]


def estimate_from_branches(branches: BranchQuantifiers, h: LinearModel, d3_features,
                           config: DDPipelineConfig) -> DDEstimate:
    X = d3_features.features if isinstance(d3_features, LabeledSample) else np.asarray(
        d3_features, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise EmptySampleError("deployment sample is empty")
    accepted = predict(h, X) == 1
    pr_pos = float(np.mean(accepted))
    raw, smooth, flags, sizes = {}, {}, [], []
    for key, mask, q, control in (("pos", accepted, branches.pos, branches.control_pos),
                                  ("neg", ~accepted, branches.neg, branches.control_neg)):
        n = int(mask.sum())
        sizes.append(n)
        if n == 0:
            p_hat = control
            flags.append(f"empty-{key}-branch")
        else:
            p_hat, qflags = _run(q, X[mask])
            flags.extend(f"{key}:{f}" for f in qflags)
        raw[(key, 1)], raw[(key, 0)] = p_hat, 1.0 - p_hat
        p1 = laplace_smooth(p_hat, n, control, config.laplace_pseudocount)
        smooth[(key, 1)], smooth[(key, 0)] = p1, 1.0 - p1
    mu1, mu0 = acceptance_rates(smooth[("pos", 1)], smooth[("neg", 1)], pr_pos)
    if np.isnan(mu1) or np.isnan(mu0):
        flags.append("undefined-rate")
        mu1 = pr_pos if np.isnan(mu1) else mu1
        mu0 = pr_pos if np.isnan(mu0) else mu0
    return DDEstimate(mu1, mu0, mu1 - mu0, smooth, pr_pos, raw, tuple(sizes), tuple(flags))


def estimate_dd(h: LinearModel, d2: LabeledSample, d3_features, config: DDPipelineConfig,
                fit_fn: Optional[FitFn] = None) -> DDEstimate:
    """Estimate the classifier's disparity on the deployment set.

    ``d3_features`` may be a feature matrix or a sample; only its features
    are read, never its labels.
    """
    X = d3_features.features if isinstance(d3_features, LabeledSample) else d3_features
    branches = fit_branch_quantifiers(h, d2, config, fit_fn)
    return estimate_from_branches(branches, h, X, config)


def disparity(predicted, sensitive) -> float:
    """Acceptance rate of group 1 minus that of group 0."""
    yhat = np.asarray(predicted)
    s = np.asarray(sensitive)
    if not np.any(s == 1) or not np.any(s == 0):
        raise EmptyGroupError("both sensitive groups must be non-empty")
    return float(np.mean(yhat[s == 1]) - np.mean(yhat[s == 0]))


def true_dd(h: LinearModel, d3: LabeledSample) -> float:
    return disparity(predict(h, d3.features), d3.labels("sensitive"))


def weighted_estimator(scores, accepted) -> float:
    """Disparity from per-instance group weights: ``sum(w_s * accepted) / sum(w_s)`` per group.

    With posteriors as ``scores`` this is the weighted estimator; with hard
    group predictions it is the threshold estimator.
    """
    w1 = np.asarray(scores, dtype=float)
    acc = np.asarray(accepted, dtype=float)
    w0 = 1.0 - w1
    return float(w1 @ acc / w1.sum() - w0 @ acc / w0.sum())


@dataclass(frozen=True)
class DecouplingMetrics:
    abs_error: float
    accuracy: float
    f1: float


def confusion_scores(truth, predicted):
    """Accuracy and F1; F1 is 1 when there are no positives, true or predicted."""
    y = np.asarray(truth).astype(bool)
    p = np.asarray(predicted).astype(bool)
    tp = int(np.sum(y & p))
    tn = int(np.sum(~y & ~p))
    fp = int(np.sum(~y & p))
    fn = int(np.sum(y & ~p))
    accuracy = (tp + tn) / (tp + tn + fp + fn)
    f1 = 1.0 if tp == fp == fn == 0 else 2 * tp / (2 * tp + fp + fn)
    return float(accuracy), float(f1)


def individual_labels(q: Quantifier, X) -> np.ndarray:
    """The per-instance group guesses a method implicitly makes."""
    if q.method in ("CC", "ACC", "PCC", "PACC"):
        return (posterior(q.model, X) >= 0.5).astype(np.int8)
    if q.method == "SLD":
        _, _, adjusted = quantify_sld(q, X)
        return (adjusted >= 0.5).astype(np.int8)
    raise NotApplicableError(f"{q.method} makes no individual-level predictions")


def decoupling_metrics(q: Quantifier, branch: LabeledSample) -> DecouplingMetrics:
    """Quantification error next to classification quality on one branch."""
    if q.method not in ("CC", "ACC", "PCC", "PACC", "SLD"):
        raise NotApplicableError(f"{q.method} makes no individual-level predictions")
    if len(branch) == 0:
        raise EmptySampleError("branch is empty")
    s = branch.labels("sensitive")
    err = abs(quantify(q, branch.features).value - float(np.mean(s)))
    acc, f1 = confusion_scores(s, individual_labels(q, branch.features))
    return DecouplingMetrics(err, acc, f1)
