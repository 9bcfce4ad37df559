"""Surrogate predictors for candidate accuracy and MACs, with rank-based model switching.

Three regressor families are fitted per target and compared by the mean
held-out Kendall tau of a k-fold split; the winner is refitted on all data.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import RBFInterpolator
from scipy.stats import kendalltau
from sklearn.linear_model import Ridge
from sklearn.model_selection import KFold
from sklearn.neighbors import KNeighborsRegressor
from sklearn.preprocessing import PolynomialFeatures

from .errors import ContractViolation

log = logging.getLogger(__name__)

# Declared order doubles as the tie-break: the simplest family wins equal scores.
FAMILIES = ("ridge", "rbf", "knn")
MIN_ARCHIVE = 10


def kendall_tau(a, b):
    """Kendall tau-b between two score vectors.

    Returns 0.0 when either vector is constant (tau-b is undefined there).
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ContractViolation(f"kendall_tau: length mismatch {a.size} vs {b.size}")
    if a.size < 2:
        raise ContractViolation("kendall_tau needs at least two observations")
    tau = kendalltau(a, b).statistic
    return 0.0 if not np.isfinite(tau) else float(tau)


class _RBF:
    """Multiquadric radial-basis interpolator with a light smoothing term."""

    def __init__(self, epsilon=1.0, smoothing=1e-8):
        self.epsilon = epsilon
        self.smoothing = smoothing

    def fit(self, X, y):
        self._f = RBFInterpolator(X, y, kernel="multiquadric", epsilon=self.epsilon, smoothing=self.smoothing)
        return self

    def predict(self, X):
        return self._f(X)


class _QuadraticRidge:
    """Ridge on first- and second-order features, with the second-order block shrunk harder.

    Scaling the quadratic columns by ``quad_scale`` multiplies their effective
    penalty by ``1 / quad_scale**2``, so a target that is linear in the genes
    is fitted by the linear block rather than spread over interactions.
    """

    def __init__(self, alpha=1e-3, quad_scale=0.01):
        self.alpha = alpha
        self.quad_scale = quad_scale

    def _features(self, X):
        F = self._poly.transform(X)
        F[:, X.shape[1] :] *= self.quad_scale
        return F

    def fit(self, X, y):
        self._poly = PolynomialFeatures(degree=2, include_bias=False).fit(X)
        self._ridge = Ridge(alpha=self.alpha).fit(self._features(X), y)
        return self

    def predict(self, X):
        return self._ridge.predict(self._features(X))


def _make_model(family):
    if family == "rbf":
        return _RBF()
    if family == "ridge":
        return _QuadraticRidge()
    if family == "knn":
        return KNeighborsRegressor(n_neighbors=3)
    raise ContractViolation(f"unknown surrogate family {family!r}")


@dataclass
class Surrogate:
    """One fitted regressor plus the target normalization it was trained with."""

    family: str
    y_mean: float = 0.0
    y_scale: float = 1.0
    model: object = field(default=None, repr=False)

    def fit(self, X, y):
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        self.y_mean = float(y.mean())
        std = float(y.std())
        self.y_scale = std if std > 0 else 1.0
        model = _make_model(self.family)
        if self.family == "knn":
            model.set_params(n_neighbors=min(3, len(y)))
        self.model = model.fit(X, (y - self.y_mean) / self.y_scale)
        return self

    def predict(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        out = np.asarray(self.model.predict(X), dtype=np.float64).ravel()
        return out * self.y_scale + self.y_mean


@dataclass
class SurrogateChoice:
    """The selected surrogate for one target and the CV tau of every family."""

    target: str
    surrogate: Surrogate
    cv_tau: dict

    @property
    def family(self):
        return self.surrogate.family

    def predict(self, X):
        return self.surrogate.predict(X)


def cross_validated_tau(family, X, y, folds=5, seed=0):
    """Mean Kendall tau between held-out predictions and targets over k folds."""
    kf = KFold(n_splits=min(folds, len(y)), shuffle=True, random_state=seed)
    taus = []
    for tr, te in kf.split(X):
        if len(te) < 2:
            continue
        pred = Surrogate(family).fit(X[tr], y[tr]).predict(X[te])
        taus.append(kendall_tau(pred, y[te]))
    return float(np.mean(taus)) if taus else 0.0


def select_surrogate(X, y, target="target", folds=5, seed=0, families=FAMILIES):
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    scores = {fam: cross_validated_tau(fam, X, y, folds, seed) for fam in families}
    best = max(families, key=lambda f: (scores[f], -families.index(f)))
    log.info("surrogate for %s: %s (cv tau %s)", target, best, {k: round(v, 3) for k, v in scores.items()})
    return SurrogateChoice(target, Surrogate(best).fit(X, y), scores)


def fit_and_switch_surrogates(X, acc, macs, folds=5, seed=0):
    """Pick and refit one surrogate per target (accuracy, MACs) by held-out Kendall tau."""
    X = np.asarray(X, dtype=np.float64)
    if X.shape[0] < MIN_ARCHIVE:
        raise ContractViolation(f"surrogates need at least {MIN_ARCHIVE} archive entries, got {X.shape[0]}")
    return (
        select_surrogate(X, acc, "accuracy", folds, seed),
        select_surrogate(X, macs, "macs", folds, seed),
    )
