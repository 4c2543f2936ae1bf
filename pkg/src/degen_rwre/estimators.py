"""Small estimators with the scikit-learn ``fit``/``predict`` surface.

Inputs are one-dimensional samples or (time, observable) pairs rather than
feature matrices, so these follow the estimator conventions (constructor
stores hyper-parameters only, fitted state ends in ``_``) without aiming at
full ``check_estimator`` compliance.
"""

import math

import numpy as np
from scipy import stats
from sklearn.base import BaseEstimator, RegressorMixin

from .errors import ValidationError


class HillEstimator(BaseEstimator):
    """Tail index from the top ``top_fraction`` order statistics."""

    def __init__(self, top_fraction=0.01, min_top=10):
        self.top_fraction = top_fraction
        self.min_top = min_top

    def fit(self, X, y=None):
        x = np.sort(np.asarray(X, float).ravel())[::-1]
        x = x[np.isfinite(x) & (x > 0)]
        k = max(int(self.min_top), int(len(x) * self.top_fraction))
        if len(x) <= k:
            raise ValidationError("too few positive samples for a Hill estimate", n=len(x), k=k)
        logs = np.log(x[:k]) - math.log(x[k])
        self.n_top_ = k
        self.tail_index_ = float(1.0 / logs.mean()) if logs.mean() > 0 else math.inf
        return self


def _loglog(t, y):
    t = np.asarray(t, float)
    y = np.asarray(y, float)
    keep = (t > 0) & (y > 0)
    return np.log(t[keep]), np.log(y[keep])


class GrowthExponentEstimator(BaseEstimator, RegressorMixin):
    """Power-law exponent of ``y ~ C t^gamma`` from a log-log fit.

    ``method="ols"`` is least squares; ``"theil_sen"`` is the median-of-slopes
    fit (robust to a few heavy-tailed points).
    """

    def __init__(self, method="ols", min_decades=4.0):
        self.method = method
        self.min_decades = min_decades

    def fit(self, t, y):
        lt, ly = _loglog(t, y)
        if len(lt) < 2:
            raise ValidationError("need two positive points for an exponent fit")
        if self.method == "ols":
            slope, icpt = np.polyfit(lt, ly, 1)
        elif self.method == "theil_sen":
            slope, icpt, _, _ = stats.theilslopes(ly, lt)
        else:
            raise ValidationError("unknown method", method=self.method)
        self.exponent_ = float(slope)
        self.intercept_ = float(icpt)
        self.decades_ = float((lt.max() - lt.min()) / math.log(10))
        self.sufficient_range_ = self.decades_ >= self.min_decades - 1e-9
        return self

    def predict(self, t):
        return np.exp(self.intercept_) * np.asarray(t, float) ** self.exponent_


class DiffusivityEstimator(BaseEstimator, RegressorMixin):
    """Least-squares line through ``(t_k, Var(X_{t_k}))``; the slope is the diffusivity."""

    def __init__(self, fit_intercept=True):
        self.fit_intercept = fit_intercept

    def fit(self, t, positions):
        t = np.asarray(t, float)
        v = np.var(np.asarray(positions, float), axis=0, ddof=1) if np.ndim(positions) == 2 \
            else np.asarray(positions, float)
        if self.fit_intercept and len(t) >= 2:
            slope, icpt = np.polyfit(t, v, 1)
        else:
            slope, icpt = float(np.dot(t, v) / np.dot(t, t)), 0.0
        pred = slope * t + icpt
        ss = float(np.sum((v - v.mean()) ** 2))
        self.sigma2_ = float(slope)
        self.intercept_ = float(icpt)
        self.variances_ = v
        self.r2_ = 1.0 - float(np.sum((v - pred) ** 2)) / ss if ss > 0 else 1.0
        return self

    def predict(self, t):
        return self.sigma2_ * np.asarray(t, float) + self.intercept_
