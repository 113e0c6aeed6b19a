"""Independent dense reference implementations used only by the tests.

Everything here is written with plain matrix inverses and determinants and
shares no code with the package beyond the model container.
"""

import math

import numpy as np
from scipy import integrate


def dense_projections(F, W):
    B0 = F.T @ W @ F
    G = W - W @ F @ np.linalg.inv(B0) @ F.T @ W
    return B0, G


def dense_stats(nu, F, W, r):
    """``(a, b)`` for one observation."""
    D, d = F.shape
    B0, G = dense_projections(F, W)
    b = 1.0 if math.isinf(nu) else (nu + D - d) / (nu + r @ G @ r)
    return b * (F.T @ W @ r), b


def dense_log_expectation(B0, a, b, P=None):
    """``log E[exp(a'z - b z'B0 z/2)]`` with ``z ~ N(0, P)``."""
    d = B0.shape[0]
    P = np.eye(d) if P is None else P
    K = np.linalg.inv(P) + b * B0
    _, logdet = np.linalg.slogdet(np.eye(d) + b * P @ B0)
    return 0.5 * a @ np.linalg.solve(K, a) - 0.5 * logdet


def dense_llr(nu, F, W, E, T, P=None):
    """LLR for enrollment rows ``E`` against test rows ``T`` (each 2-d)."""
    B0, _ = dense_projections(F, W)

    def side(rows):
        stats = [dense_stats(nu, F, W, r) for r in rows]
        return sum(s[0] for s in stats), sum(s[1] for s in stats)

    ae, be = side(E)
    at, bt = side(T)
    return (
        dense_log_expectation(B0, ae + at, be + bt, P)
        - dense_log_expectation(B0, ae, be, P)
        - dense_log_expectation(B0, at, bt, P)
    )


def quad_log_expectation(B0, a, b):
    """1-d numerical integral of ``exp(a z - b B0 z^2 / 2)`` against N(0, 1)."""
    k = 1.0 + b * float(np.asarray(B0).item())
    a = float(np.asarray(a).item())
    m = a / k
    s = 1.0 / math.sqrt(k)
    peak = a * m - 0.5 * k * m * m

    def f(z):
        return math.exp(a * z - 0.5 * k * z * z - peak)

    val, _ = integrate.quad(f, m - 40 * s, m + 40 * s, epsabs=0, epsrel=1e-13, limit=200)
    return peak + math.log(val) - 0.5 * math.log(2 * math.pi)


def quad_llr(nu, F, W, E, T):
    B0, _ = dense_projections(F, W)

    def side(rows):
        stats = [dense_stats(nu, F, W, r) for r in rows]
        return sum(s[0] for s in stats), sum(s[1] for s in stats)

    ae, be = side(E)
    at, bt = side(T)
    return (
        quad_log_expectation(B0, ae + at, be + bt)
        - quad_log_expectation(B0, ae, be)
        - quad_log_expectation(B0, at, bt)
    )


def _log_gauss(x, C):
    _, logdet = np.linalg.slogdet(C)
    return -0.5 * (x.size * math.log(2 * math.pi) + logdet + x @ np.linalg.solve(C, x))


def speaker_covariance(F, W, n):
    """Covariance of ``n`` stacked observations of one G-PLDA speaker."""
    B = F @ F.T
    Winv = np.linalg.inv(W)
    return np.kron(np.ones((n, n)), B) + np.kron(np.eye(n), Winv)


def gplda_loglik(F, W, X, speakers):
    total = 0.0
    for s in np.unique(speakers):
        rows = X[speakers == s]
        total += _log_gauss(rows.ravel(), speaker_covariance(F, W, len(rows)))
    return total


def gplda_exact_llr(F, W, E, T):
    """Same-speaker vs different-speaker log marginal ratio under G-PLDA."""
    both = np.vstack([E, T])
    return (
        _log_gauss(both.ravel(), speaker_covariance(F, W, len(both)))
        - _log_gauss(E.ravel(), speaker_covariance(F, W, len(E)))
        - _log_gauss(T.ravel(), speaker_covariance(F, W, len(T)))
    )


def classical_em_step(F, W, X, speakers, min_div=True):
    """One EM iteration of textbook simplified PLDA, speaker by speaker."""
    D, d = F.shape
    FtW = F.T @ W
    B0 = FtW @ F
    T = np.zeros((D, d))
    R = np.zeros((d, d))
    P = np.zeros((d, d))
    names = np.unique(speakers)
    for s in names:
        rows = X[speakers == s]
        n = len(rows)
        cov = np.linalg.inv(np.eye(d) + n * B0)
        mean = cov @ FtW @ rows.sum(axis=0)
        zz = cov + np.outer(mean, mean)
        T += np.outer(rows.sum(axis=0), mean)
        R += n * zz
        P += zz
    F_new = T @ np.linalg.inv(R)
    C = (X.T @ X - F_new @ T.T) / X.shape[0]
    W_new = np.linalg.inv(0.5 * (C + C.T))
    if min_div:
        F_new = F_new @ np.linalg.cholesky(P / len(names))
    return F_new, 0.5 * (W_new + W_new.T)


def brute_error_rates(targets, nontargets):
    """``(P_miss, P_fa)`` at every candidate threshold, accept iff score >= thr."""
    thresholds = np.concatenate([np.unique(np.concatenate([targets, nontargets])), [np.inf]])
    pmiss = np.array([np.mean(targets < t) for t in thresholds])
    pfa = np.array([np.mean(nontargets >= t) for t in thresholds])
    return pmiss, pfa


def isotonic_minmax(y, w):
    """Weighted isotonic regression by the explicit min-max formula."""
    n = len(y)
    out = np.empty(n)
    for i in range(n):
        best = math.inf
        for k in range(i, n):
            worst = -math.inf
            for j in range(0, i + 1):
                ww = w[j : k + 1]
                worst = max(worst, float(np.dot(ww, y[j : k + 1]) / ww.sum()))
            best = min(best, worst)
        out[i] = best
    return out
