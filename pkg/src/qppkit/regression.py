"""Maximum-likelihood linear regression with AIC and t-test inference.

The model is y_i = b0 + sum_j b_j x_ij + eps_i with Gaussian noise. The
coefficient estimates solve the normal equations through a QR
factorization (no explicit inverse); sigma^2 is the 1/n maximum
likelihood estimate, floored at SIGMA2_FLOOR so exact fits keep a finite
log likelihood. AIC = -2 log L + 2k with k the number of retained
predictors; the intercept and sigma^2 are present in every candidate
model, so they shift all AICs equally and never change a comparison.

P-values use the classical unbiased residual variance RSS/(n-k-1) and a
two-sided Student-t test.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import qr as pivoted_qr, solve_triangular
from scipy.stats import t as student_t

from .errors import CollinearityError

SIGMA2_FLOOR = 1e-12
PIVOT_RTOL = 1e-10


@dataclass(frozen=True)
class DesignMatrix:
    """Feature columns plus a target; the intercept column is implicit."""

    labels: tuple[str, ...]
    X: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "X", np.asarray(self.X, dtype=np.float64))
        object.__setattr__(self, "y", np.asarray(self.y, dtype=np.float64))
        if self.X.ndim != 2 or self.y.ndim != 1:
            raise ValueError("X must be a matrix and y a vector")
        if self.X.shape != (len(self.y), len(self.labels)):
            raise ValueError("design shape does not match labels/target")
        if len(set(self.labels)) != len(self.labels):
            raise ValueError("duplicate column labels in design")
        if self.X.size and not np.all(np.isfinite(self.X)):
            raise ValueError("design matrix contains non-finite values")
        if len(self.y) and not np.all(np.isfinite(self.y)):
            raise ValueError("target contains non-finite values")

    @property
    def n(self) -> int:
        return len(self.y)

    def column_block(self, labels: list[str]) -> np.ndarray:
        idx = [self.labels.index(label) for label in labels]
        return self.X[:, idx]


@dataclass(frozen=True)
class CoefficientStats:
    estimate: float
    std_error: float
    t_stat: float
    p_value: float


@dataclass
class LinearModel:
    feature_labels: tuple[str, ...]
    beta: np.ndarray
    intercept: float
    sigma2_mle: float
    log_likelihood: float
    aic: float
    k: int
    coef_stats: list[CoefficientStats] | None = None
    intercept_stats: CoefficientStats | None = None

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=np.float64)
        if len(self.beta) != len(self.feature_labels) or self.k != len(self.beta):
            raise ValueError("coefficient count does not match feature labels")
        recomputed = -2.0 * self.log_likelihood + 2.0 * self.k
        if not math.isclose(self.aic, recomputed, rel_tol=0.0, abs_tol=1e-9 * max(1.0, abs(self.aic))):
            raise ValueError("AIC does not equal -2*log_likelihood + 2k")


def log_likelihood(beta: np.ndarray, sigma2: float, X: np.ndarray, y: np.ndarray) -> float:
    """Gaussian log likelihood of y given X @ beta and variance sigma2.

    X is used exactly as given; include a ones column when the model has
    an intercept.
    """
    if sigma2 <= 0:
        raise ValueError("sigma2 must be positive")
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = len(y)
    resid = y - X @ np.asarray(beta, dtype=np.float64)
    rss = float(resid @ resid)
    return -0.5 * n * math.log(2.0 * math.pi) - 0.5 * n * math.log(sigma2) - rss / (2.0 * sigma2)


def _augmented(design: DesignMatrix, active: list[str]) -> np.ndarray:
    return np.column_stack([np.ones(design.n), design.column_block(active)])


def _check_rank(Xa: np.ndarray, labels_with_intercept: list[str]) -> None:
    r = pivoted_qr(Xa, mode="r", pivoting=True)
    diag = np.abs(np.diag(r[0]))[: Xa.shape[1]]
    pivots = r[1]
    if diag.size == 0:
        return
    bad = diag < PIVOT_RTOL * diag.max()
    if bad.any():
        offenders = [labels_with_intercept[pivots[i]] for i in np.nonzero(bad)[0]]
        raise CollinearityError(offenders)


def p_values(Xa: np.ndarray, y: np.ndarray, coef: np.ndarray) -> list[CoefficientStats]:
    """Two-sided t-test statistics for every column of the augmented design.

    Standard errors come from the unbiased residual variance RSS/(n-p)
    and the diagonal of (Xa'Xa)^-1, obtained from the R factor of a QR
    factorization. Exact fits (zero residual variance) yield p = 0 for
    nonzero estimates and p = 1 for zero ones.
    """
    n, p = Xa.shape
    dof = n - p
    if dof < 1:
        raise ValueError("need at least one residual degree of freedom")
    resid = y - Xa @ coef
    s2 = float(resid @ resid) / dof
    _, r_factor = np.linalg.qr(Xa)
    r_inv = solve_triangular(r_factor, np.eye(p))
    cov_diag = np.sum(r_inv * r_inv, axis=1) * s2
    stats = []
    for estimate, var in zip(coef, cov_diag):
        se = math.sqrt(max(var, 0.0))
        if se > 0.0:
            t_stat = float(estimate) / se
            p_val = 2.0 * float(student_t.sf(abs(t_stat), dof))
        elif estimate == 0.0:
            t_stat, p_val = 0.0, 1.0
        else:
            t_stat, p_val = math.copysign(math.inf, estimate), 0.0
        stats.append(CoefficientStats(float(estimate), se, t_stat, p_val))
    return stats


def fit_mle(design: DesignMatrix, active_columns: list[str]) -> LinearModel:
    """Fit the linear model restricted to the given columns.

    Raises CollinearityError when the active columns (plus intercept) are
    rank deficient, and ValueError when there are too few rows.
    """
    active = list(active_columns)
    n = design.n
    if n <= len(active) + 1:
        raise ValueError(
            f"need more than {len(active) + 1} rows to fit {len(active)} features"
        )
    Xa = _augmented(design, active)
    _check_rank(Xa, ["<intercept>"] + active)
    q_factor, r_factor = np.linalg.qr(Xa)
    coef = solve_triangular(r_factor, q_factor.T @ design.y)
    resid = design.y - Xa @ coef
    rss = float(resid @ resid)
    sigma2 = max(rss / n, SIGMA2_FLOOR)
    ll = log_likelihood(coef, sigma2, Xa, design.y)
    k = len(active)
    stats = p_values(Xa, design.y, coef)
    return LinearModel(
        feature_labels=tuple(active),
        beta=coef[1:],
        intercept=float(coef[0]),
        sigma2_mle=sigma2,
        log_likelihood=ll,
        aic=-2.0 * ll + 2.0 * k,
        k=k,
        coef_stats=stats[1:],
        intercept_stats=stats[0],
    )


def predict(model: LinearModel, feature_row: dict[str, float]) -> float:
    """Intercept plus the weighted sum of the model's features."""
    total = model.intercept
    for label, coef in zip(model.feature_labels, model.beta):
        if label not in feature_row:
            raise ValueError(f"feature row is missing {label!r}")
        total += coef * feature_row[label]
    return float(total)


def predict_rows(model: LinearModel, columns: list[str], values: np.ndarray) -> np.ndarray:
    """Vectorized prediction over a labeled matrix of feature rows."""
    missing = [label for label in model.feature_labels if label not in columns]
    if missing:
        raise ValueError(f"feature rows are missing {missing}")
    idx = [columns.index(label) for label in model.feature_labels]
    block = np.asarray(values, dtype=np.float64)[:, idx] if idx else np.zeros((len(values), 0))
    return block @ model.beta + model.intercept


def model_to_dict(model: LinearModel) -> dict:
    features = []
    for i, label in enumerate(model.feature_labels):
        p_val = model.coef_stats[i].p_value if model.coef_stats else None
        features.append(
            {"name": label, "coefficient": float(model.beta[i]), "p_value": p_val}
        )
    return {
        "features": features,
        "intercept": model.intercept,
        "sigma2": model.sigma2_mle,
        "log_likelihood": model.log_likelihood,
        "aic": model.aic,
    }


def model_from_dict(data: dict) -> LinearModel:
    features = data["features"]
    labels = tuple(f["name"] for f in features)
    beta = np.array([f["coefficient"] for f in features], dtype=np.float64)
    stats = None
    if features and all(f.get("p_value") is not None for f in features):
        stats = [
            CoefficientStats(
                estimate=float(f["coefficient"]),
                std_error=math.nan,
                t_stat=math.nan,
                p_value=float(f["p_value"]),
            )
            for f in features
        ]
    return LinearModel(
        feature_labels=labels,
        beta=beta,
        intercept=float(data["intercept"]),
        sigma2_mle=float(data["sigma2"]),
        log_likelihood=float(data["log_likelihood"]),
        aic=float(data["aic"]),
        k=len(labels),
        coef_stats=stats,
    )


def save_model(model: LinearModel, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model_to_dict(model), fh, indent=2)
        fh.write("\n")


def load_model(path: str) -> LinearModel:
    with open(path, encoding="utf-8") as fh:
        return model_from_dict(json.load(fh))
