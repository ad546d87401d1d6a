"""Linear classifiers: weighted L2 logistic regression, linear SVM with Platt
calibration, hard and soft prediction, and cross-validated tpr/fpr."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import expit

from .data import LabeledSample
from .errors import DimensionMismatchError, FoldDegeneracyError, SingleClassError

LINKS = ("logistic", "calibrated-margin")
KINDS = ("logistic", "svm-platt")


class ConvergenceWarning(UserWarning):
    pass


@dataclass(frozen=True, eq=False)
class LinearModel:
    """A linear scorer ``w·x + b`` turned into a posterior by its link.

    ``calibration`` holds Platt's ``(A, B)`` when the link is a calibrated
    margin. ``converged`` is False if training stopped at its iteration cap.
    """

    weights: np.ndarray
    bias: float
    link: str = "logistic"
    calibration: Optional[tuple] = None
    converged: bool = True

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64).ravel()
        if not np.all(np.isfinite(w)) or not np.isfinite(self.bias):
            raise ValueError("model parameters must be finite")
        if self.link not in LINKS:
            raise ValueError(f"unknown link {self.link!r}")
        if self.link == "calibrated-margin" and self.calibration is None:
            raise ValueError("a calibrated-margin model needs (A, B)")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", float(self.bias))

    @property
    def n_features(self) -> int:
        return int(self.weights.shape[0])

    def margin(self, features) -> np.ndarray:
        X = np.asarray(features, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise DimensionMismatchError(
                f"model expects {self.n_features} features, got shape {X.shape}")
        return X @ self.weights + self.bias

    def negated(self) -> "LinearModel":
        """The model whose posterior is one minus this model's posterior."""
        cal = None if self.calibration is None else (self.calibration[0], -self.calibration[1])
        return LinearModel(-self.weights, -self.bias, self.link, cal, self.converged)


def _features(x) -> np.ndarray:
    return x.features if isinstance(x, LabeledSample) else np.asarray(x, dtype=np.float64)


def posterior(model: LinearModel, features) -> np.ndarray:
    """Probability of class 1 for every row."""
    m = model.margin(_features(features))
    if model.link == "logistic":
        return expit(m)
    a, b = model.calibration
    return expit(a * m + b)


def predict(model: LinearModel, features, threshold: float = 0.5) -> np.ndarray:
    """Hard labels: 1 where the posterior is at least ``threshold``."""
    return (posterior(model, features) >= threshold).astype(np.int8)


@dataclass(frozen=True)
class TrainerConfig:
    """How to train a classifier. ``l2_strength`` multiplies ``||w||^2 / 2``."""

    kind: str = "logistic"
    l2_strength: float = 1.0
    class_weighting: str = "none"
    max_iter: int = 10_000
    tol: float = 1e-6
    platt_folds: int = 5

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown classifier kind {self.kind!r}")
        if self.class_weighting not in ("none", "balanced"):
            raise ValueError(f"unknown class weighting {self.class_weighting!r}")
        if not self.l2_strength > 0:
            raise ValueError("l2_strength must be positive")


def _labels_for(train: LabeledSample, selector: str) -> np.ndarray:
    y = train.labels(selector).astype(np.float64)
    if y.size == 0 or y.min() == y.max():
        raise SingleClassError(f"training labels ({selector}) contain a single class")
    return y


def class_weights(y: np.ndarray, weighting: str) -> np.ndarray:
    """Per-instance loss weights; balanced weights are ``n / (2 n_class)``."""
    if weighting == "none":
        return np.ones_like(y, dtype=np.float64)
    n1 = y.sum()
    n0 = y.size - n1
    return np.where(y == 1, y.size / (2.0 * n1), y.size / (2.0 * n0))


def logistic_objective(params: np.ndarray, X: np.ndarray, y: np.ndarray,
                       weights: np.ndarray, l2_strength: float):
    """Weighted logistic loss plus ridge on the weights (not the bias).

    ``params`` is ``(w, b)``. Returns ``(loss, gradient)``.
    """
    w, b = params[:-1], params[-1]
    z = X @ w + b
    signed = np.where(y == 1, z, -z)
    loss = float(weights @ np.logaddexp(0.0, -signed)) + 0.5 * l2_strength * float(w @ w)
    resid = weights * (expit(z) - y)
    grad = np.empty_like(params)
    grad[:-1] = X.T @ resid + l2_strength * w
    grad[-1] = resid.sum()
    return loss, grad


def _logistic_newton(X, y, c, l2, max_iter, tol):
    n, d = X.shape
    params = np.zeros(d + 1)
    loss, grad = logistic_objective(params, X, y, c, l2)
    Xb = np.hstack([X, np.ones((n, 1))])
    ridge = np.full(d + 1, l2)
    ridge[-1] = 0.0
    for _ in range(max_iter):
        gnorm = np.linalg.norm(grad)
        if gnorm <= tol:
            return params, gnorm, True
        p = expit(Xb @ params)
        h = c * p * (1.0 - p)
        H = (Xb * h[:, None]).T @ Xb + np.diag(ridge)
        try:
            step = np.linalg.solve(H + 1e-12 * np.eye(d + 1), grad)
        except np.linalg.LinAlgError:
            step = grad
        t = 1.0
        slope = float(grad @ step)
        while True:
            cand = params - t * step
            new_loss, new_grad = logistic_objective(cand, X, y, c, l2)
            if new_loss <= loss - 1e-4 * t * slope or t < 1e-10:
                break
            t *= 0.5
        if t < 1e-10 and new_loss >= loss:
            # no further progress is representable
            gnorm = np.linalg.norm(grad)
            return params, gnorm, gnorm <= 1e-3
        params, loss, grad = cand, new_loss, new_grad
    gnorm = np.linalg.norm(grad)
    return params, gnorm, gnorm <= 1e-3


def train_logistic(train: LabeledSample, selector: str = "target", class_weighting: str = "none",
                   l2_strength: float = 1.0, seed: int = 0, max_iter: int = 10_000,
                   tol: float = 1e-6) -> LinearModel:
    """Fit L2-regularized, optionally class-balanced logistic regression by Newton's method.

    The solver is deterministic, so ``seed`` has no effect; it is accepted for
    a uniform trainer signature. Hitting ``max_iter`` with a gradient norm
    above 1e-3 emits a :class:`ConvergenceWarning` and marks the model.
    """
    y = _labels_for(train, selector)
    c = class_weights(y, class_weighting)
    params, gnorm, ok = _logistic_newton(train.features, y, c, l2_strength, max_iter, tol)
    if not ok:
        warnings.warn(f"logistic regression stopped with gradient norm {gnorm:.2e}",
                      ConvergenceWarning, stacklevel=2)
    return LinearModel(params[:-1].copy(), params[-1], "logistic", None, ok)


def _svm_dual_cd(X, y_pm, C, seed, max_epochs=1000, tol=0.1):
    """Dual coordinate descent for the L1-loss linear SVM; bias via a constant feature."""
    n, d = X.shape
    Xa = np.hstack([X, np.ones((n, 1))])
    qdiag = np.einsum("ij,ij->i", Xa, Xa)
    alpha = np.zeros(n)
    w = np.zeros(d + 1)
    rng = np.random.default_rng(seed)
    converged = False
    for _ in range(max_epochs):
        pg_max, pg_min = -np.inf, np.inf
        for i in rng.permutation(n):
            if qdiag[i] == 0.0:
                continue
            g = y_pm[i] * (Xa[i] @ w) - 1.0
            a = alpha[i]
            if a == 0.0:
                pg = min(g, 0.0)
            elif a == C:
                pg = max(g, 0.0)
            else:
                pg = g
            pg_max = max(pg_max, pg)
            pg_min = min(pg_min, pg)
            if pg != 0.0:
                new = min(max(a - g / qdiag[i], 0.0), C)
                w += (new - a) * y_pm[i] * Xa[i]
                alpha[i] = new
        if pg_max - pg_min < tol:
            converged = True
            break
    return w[:-1].copy(), float(w[-1]), converged


def fit_platt(margins, labels, max_iter: int = 100):
    """Fit ``Pr(1|m) = sigmoid(A m + B)`` by regularized Newton on smoothed targets.

    Targets are ``(N+ + 1)/(N+ + 2)`` for positives and ``1/(N- + 2)`` for
    negatives. Returns ``(A, B)``.
    """
    f = np.asarray(margins, dtype=np.float64)
    y = np.asarray(labels)
    n_pos = float(np.sum(y == 1))
    n_neg = float(y.size - n_pos)
    t = np.where(y == 1, (n_pos + 1.0) / (n_pos + 2.0), 1.0 / (n_neg + 2.0))
    a, b = 0.0, float(np.log((n_neg + 1.0) / (n_pos + 1.0)))
    ridge, min_step, eps = 1e-12, 1e-10, 1e-5

    def objective(a, b):
        z = a * f + b
        return float(np.sum(np.logaddexp(0.0, z) - t * z))

    fval = objective(a, b)
    for _ in range(max_iter):
        p = expit(a * f + b)
        d1 = p - t
        d2 = p * (1.0 - p)
        h11 = ridge + float(f * f @ d2)
        h22 = ridge + float(d2.sum())
        h21 = float(f @ d2)
        g1 = float(f @ d1)
        g2 = float(d1.sum())
        if abs(g1) < eps and abs(g2) < eps:
            break
        det = h11 * h22 - h21 * h21
        da = -(h22 * g1 - h21 * g2) / det
        db = -(-h21 * g1 + h11 * g2) / det
        gd = g1 * da + g2 * db
        step = 1.0
        while step >= min_step:
            na, nb = a + step * da, b + step * db
            nf = objective(na, nb)
            if nf < fval + 1e-4 * step * gd:
                a, b, fval = na, nb, nf
                break
            step /= 2.0
        else:
            break
    return float(a), float(b)


def train_svm_platt(train: LabeledSample, selector: str = "target", l2_strength: float = 1.0,
                    seed: int = 0, platt_folds: int = 5, max_epochs: int = 1000) -> LinearModel:
    """Linear hinge-loss SVM whose margins are mapped to probabilities by Platt scaling.

    The sigmoid is fit on margins produced out-of-fold by ``platt_folds``
    stratified folds, then attached to the SVM trained on all of ``train``.
    """
    y = _labels_for(train, selector)
    y_pm = 2.0 * y - 1.0
    C = 1.0 / l2_strength
    X = train.features
    w, b, ok = _svm_dual_cd(X, y_pm, C, seed, max_epochs)
    if not ok:
        warnings.warn("SVM coordinate descent hit its epoch cap", ConvergenceWarning, stacklevel=2)
    k, folds, _ = feasible_folds(y.astype(np.int8), platt_folds, seed)
    oof = np.empty(y.size)
    for j in range(k):
        test = folds == j
        wj, bj, _ = _svm_dual_cd(X[~test], y_pm[~test], C, seed, max_epochs)
        oof[test] = X[test] @ wj + bj
    cal = fit_platt(oof, y)
    return LinearModel(w, b, "calibrated-margin", cal, ok)


def train(sample: LabeledSample, selector: str, config: TrainerConfig, seed: int = 0) -> LinearModel:
    """Dispatch to the trainer named by ``config.kind``."""
    if config.kind == "logistic":
        return train_logistic(sample, selector, config.class_weighting, config.l2_strength,
                              seed, config.max_iter, config.tol)
    if config.class_weighting != "none":
        raise ValueError("class weighting is only implemented for logistic regression")
    return train_svm_platt(sample, selector, config.l2_strength, seed, config.platt_folds)


def stratified_folds(labels, k: int, seed: int) -> np.ndarray:
    """Fold index per row: one seeded shuffle, then each class dealt round-robin.

    Both classes start dealing at fold 0, so swapping the class names leaves
    the assignment unchanged.
    """
    y = np.asarray(labels)
    order = np.random.default_rng(seed).permutation(y.size)
    folds = np.empty(y.size, dtype=np.int64)
    for cls in (0, 1):
        members = order[y[order] == cls]
        folds[members] = np.arange(members.size) % k
    return folds


def feasible_folds(labels, k: int, seed: int):
    """Largest fold count ``<= k`` whose every training part holds both classes.

    Returns ``(k_used, folds, flags)``; raises ``fold-degeneracy`` if no
    count ``>= 2`` works.
    """
    if k < 2:
        raise ValueError("k_folds must be at least 2")
    y = np.asarray(labels)
    if y.size == 0 or y.min() == y.max():
        raise SingleClassError("cross-validation needs both classes")
    for kk in range(k, 1, -1):
        folds = stratified_folds(y, kk, seed)
        if all(np.unique(y[folds != j]).size == 2 and np.any(folds == j) for j in range(kk)):
            flags = () if kk == k else (f"folds-reduced:{k}->{kk}",)
            return kk, folds, flags
    raise FoldDegeneracyError("no fold count >= 2 leaves both classes in every training part")


@dataclass(frozen=True)
class RateEstimates:
    tpr: float
    fpr: float
    soft: bool
    folds: int
    flags: tuple = ()

    def __post_init__(self):
        for r in (self.tpr, self.fpr):
            if not 0.0 <= r <= 1.0:
                raise ValueError(f"rate {r} outside [0, 1]")


@dataclass(frozen=True, eq=False)
class OutOfFold:
    """Posteriors predicted for each training row by a model that did not see it."""

    posteriors: np.ndarray
    labels: np.ndarray
    folds: int
    flags: tuple = field(default=())

    def rates(self, soft: bool) -> RateEstimates:
        scores = self.posteriors if soft else (self.posteriors >= 0.5).astype(np.float64)
        pos = self.labels == 1
        tpr = float(scores[pos].sum() / pos.sum())
        fpr = float(scores[~pos].sum() / (~pos).sum())
        return RateEstimates(tpr, fpr, soft, self.folds, self.flags)


def out_of_fold(sample: LabeledSample, selector: str, config: TrainerConfig, k_folds: int = 10,
                seed: int = 0) -> OutOfFold:
    y = sample.labels(selector)
    k, folds, flags = feasible_folds(y, k_folds, seed)
    post = np.empty(len(sample))
    for j in range(k):
        test = folds == j
        model = train(sample.subset(~test), selector, config, seed)
        post[test] = posterior(model, sample.features[test])
    post.setflags(write=False)
    return OutOfFold(post, np.asarray(y), k, flags)


def crossval_rates(sample: LabeledSample, config: TrainerConfig, k_folds: int = 10,
                   soft: bool = False, seed: int = 0, selector: str = "sensitive") -> RateEstimates:
    """Stratified k-fold estimates of tpr and fpr from pooled out-of-fold outputs.

    Hard rates count out-of-fold predictions of 1; soft rates sum
    out-of-fold posteriors instead.
    """
    return out_of_fold(sample, selector, config, k_folds, seed).rates(soft)
