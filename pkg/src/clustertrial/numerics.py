"""Small numeric kernel: linear solves, IRLS, finite-difference Jacobians,
non-negative least squares and t / normal quantiles."""

from dataclasses import dataclass
import warnings

import numpy as np
from scipy import linalg, optimize, stats

from .errors import NonConvergence, NonFiniteEvaluation, SeparationSuspected, SingularMatrix

PIVOT_TOL = 1e-12
IRLS_TOL = 1e-8
IRLS_MAX_ITER = 100
PROB_CLAMP = 1e-8
SEPARATION_ETA = 30.0

IDENTITY = "identity"
LOGIT = "logit"


def expit(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=float)))


def logit(p):
    p = np.asarray(p, dtype=float)
    return np.log(p) - np.log1p(-p)


def inverse_link(link, eta):
    if link == IDENTITY:
        return np.asarray(eta, dtype=float)
    if link == LOGIT:
        return expit(eta)
    raise ValueError(f"unknown link {link!r}")


def variance_function(link, mu):
    """Canonical-link variance v(mu): 1 for identity, mu(1-mu) for logit."""
    if link == IDENTITY:
        return np.ones_like(np.asarray(mu, dtype=float))
    mu = np.clip(mu, PROB_CLAMP, 1.0 - PROB_CLAMP)
    return mu * (1.0 - mu)


def solve_linear(A, b):
    """Solve ``A x = b`` by LU with partial pivoting.

    Raises ``SingularMatrix`` when a pivot is smaller than 1e-12 in magnitude.
    """
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("A must be square")
    if b.shape[0] != A.shape[0]:
        raise ValueError("dimension mismatch between A and b")
    with warnings.catch_warnings():
        # exact zero pivots are reported below as SingularMatrix
        warnings.simplefilter("ignore", linalg.LinAlgWarning)
        lu, piv = linalg.lu_factor(A, check_finite=True)
    if np.min(np.abs(np.diag(lu))) < PIVOT_TOL:
        raise SingularMatrix("matrix is singular to working precision")
    return linalg.lu_solve((lu, piv), b)


@dataclass(frozen=True)
class GlmFit:
    coefficients: np.ndarray
    link: str
    converged: bool
    iterations: int
    weights_used: np.ndarray

    def linear_predictor(self, X):
        return np.asarray(X, dtype=float) @ self.coefficients

    def predict(self, X):
        return inverse_link(self.link, self.linear_predictor(X))


def fit_glm(X, y, link=IDENTITY, weights=None, tol=IRLS_TOL, max_iter=IRLS_MAX_ITER,
            l2=0.0, check_separation=True):
    """Fit a canonical-link GLM by iteratively reweighted least squares.

    Solves the weighted score equations ``sum_i w_i x_i (y_i - g^{-1}(x_i'b)) = 0``.
    ``y`` may be fractional in [0, 1] under the logit link (quasi-likelihood).
    ``l2`` adds a ridge penalty ``l2 * |b|^2 / 2`` on all coefficients; it is
    zero for the plain score equations.

    Non-convergence is reported through ``GlmFit.converged``; a linear
    predictor beyond +-30 under the logit link raises ``SeparationSuspected``.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, p = X.shape
    if y.shape != (n,):
        raise ValueError("rows(X) must equal len(y)")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    if w.shape != (n,):
        raise ValueError("weights must have one entry per row")
    if np.any(w < 0):
        raise ValueError("weights must be nonnegative")
    penalty = l2 * np.eye(p)

    if link == IDENTITY:
        XtW = X.T * w
        beta = solve_linear(XtW @ X + penalty, XtW @ y)
        return GlmFit(beta, link, True, 1, w)
    if link != LOGIT:
        raise ValueError(f"unknown link {link!r}")

    beta = np.zeros(p)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        eta = X @ beta
        mu = np.clip(expit(eta), PROB_CLAMP, 1.0 - PROB_CLAMP)
        v = mu * (1.0 - mu)
        score = X.T @ (w * (y - mu)) - l2 * beta
        info = (X.T * (w * v)) @ X + penalty
        step = solve_linear(info, score)
        beta = beta + step
        if np.max(np.abs(step)) < tol:
            converged = True
            break
    if check_separation and np.any(np.abs(X @ beta) > SEPARATION_ETA):
        raise SeparationSuspected("fitted logit exceeds 30 in magnitude", stage="glm")
    return GlmFit(beta, link, converged, it, w)


def fit_glm_checked(X, y, link=IDENTITY, weights=None, stage="glm", **kw):
    """``fit_glm`` that raises ``NonConvergence`` instead of returning a flagged fit."""
    fit = fit_glm(X, y, link=link, weights=weights, **kw)
    if not fit.converged:
        raise NonConvergence(f"IRLS did not converge in {fit.iterations} iterations", stage=stage)
    return fit


def numeric_jacobian(fun, point, step=1e-6):
    """Central-difference Jacobian of ``fun`` at ``point``.

    Coordinate j uses ``h_j = max(step, 1e-6 * (1 + |x_j|))``.
    """
    x0 = np.asarray(point, dtype=float)
    f0 = np.atleast_1d(np.asarray(fun(x0), dtype=float))
    if not np.all(np.isfinite(f0)):
        raise NonFiniteEvaluation("function is not finite at the evaluation point")
    jac = np.empty((f0.size, x0.size))
    for j in range(x0.size):
        h = max(step, 1e-6 * (1.0 + abs(x0[j])))
        xp = x0.copy()
        xm = x0.copy()
        xp[j] += h
        xm[j] -= h
        fp = np.atleast_1d(np.asarray(fun(xp), dtype=float))
        fm = np.atleast_1d(np.asarray(fun(xm), dtype=float))
        if not (np.all(np.isfinite(fp)) and np.all(np.isfinite(fm))):
            raise NonFiniteEvaluation(f"function is not finite near coordinate {j}")
        jac[:, j] = (fp - fm) / (2.0 * h)
    return jac


def nnls(A, b):
    """Nonnegative least squares, ``min |Aw - b|_2`` subject to ``w >= 0``.

    Lawson-Hanson active-set iteration (scipy). The result is not normalized.
    """
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    if not np.all(np.isfinite(A)):
        raise ValueError("A must be finite")
    w, _ = optimize.nnls(A, b, maxiter=50 * max(A.shape[1], 1))
    return w


def t_quantile(prob, dof):
    if dof < 1:
        raise ValueError("dof must be >= 1")
    return float(stats.t.ppf(prob, dof))


def normal_quantile(prob):
    return float(stats.norm.ppf(prob))


def segment_sum(values, offsets):
    """Sum contiguous row blocks ``values[offsets[i]:offsets[i+1]]``."""
    values = np.asarray(values, dtype=float)
    starts = np.asarray(offsets[:-1])
    return np.add.reduceat(values, starts, axis=0)
