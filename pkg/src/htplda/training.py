"""Variational Bayes training of an HT-PLDA model at fixed degrees of freedom.

Each iteration assigns fixed-form gamma factors for the precision scales
(represented only by their means ``b``), closed-form Gaussian speaker
posteriors, re-estimates ``(F, W)`` from ``b``-weighted statistics, then
applies minimum-divergence steps to the speaker prior and to the scales.
"""

from __future__ import annotations

import csv
import logging
import math
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, sparse
from scipy.special import digamma, gammaln

from htplda.errors import DataError, NumericalError
from htplda.model import (
    HtPldaModel,
    LabeledEmbeddings,
    Projections,
    check_model,
    eig_b0,
    likelihood_stats_many,
    precompute,
)

log = logging.getLogger(__name__)

LOG_2PI = math.log(2 * math.pi)


@dataclass(frozen=True, eq=False)
class SpeakerPosteriors:
    """Gaussian posteriors ``Q_i(z) = N(zbar_i, Bbar_i^-1)`` for all speakers.

    ``Bbar_i = I + bsum_i * B0`` is kept implicit through the shared
    eigendecomposition ``B0 = U diag(eigvals) U'``.
    """

    zbar: np.ndarray
    bsum: np.ndarray
    eigvals: np.ndarray
    eigvecs: np.ndarray

    def __len__(self):
        return self.zbar.shape[0]

    @property
    def _denom(self) -> np.ndarray:
        return 1.0 + self.bsum[:, None] * self.eigvals[None, :]

    def precision(self, i: int) -> np.ndarray:
        U = self.eigvecs
        return (U * self._denom[i]) @ U.T

    def covariance(self, i: int) -> np.ndarray:
        U = self.eigvecs
        return (U / self._denom[i]) @ U.T

    def second_moment(self, i: int) -> np.ndarray:
        """``<z_i z_i'> = Bbar_i^-1 + zbar_i zbar_i'``."""
        return self.covariance(i) + np.outer(self.zbar[i], self.zbar[i])

    def logdet_precision(self) -> np.ndarray:
        return np.log(self._denom).sum(axis=1)

    def trace_second_moment(self) -> np.ndarray:
        return (1.0 / self._denom).sum(axis=1) + np.einsum("ij,ij->i", self.zbar, self.zbar)

    def mean_second_moment(self) -> np.ndarray:
        """``(1/S) sum_i <z_i z_i'>``, the maximum-likelihood speaker prior covariance."""
        U = self.eigvecs
        S = len(self)
        P = (U * (1.0 / self._denom).sum(axis=0)) @ U.T + self.zbar.T @ self.zbar
        P /= S
        return 0.5 * (P + P.T)

    @staticmethod
    def concatenate(parts: list[SpeakerPosteriors]) -> SpeakerPosteriors:
        return SpeakerPosteriors(
            zbar=np.concatenate([p.zbar for p in parts]),
            bsum=np.concatenate([p.bsum for p in parts]),
            eigvals=parts[0].eigvals,
            eigvecs=parts[0].eigvecs,
        )


@dataclass(frozen=True, eq=False)
class SufficientStats:
    """``b``-weighted statistics; additive across disjoint speaker shards."""

    N: int
    sumB: float
    Sy: np.ndarray
    T: np.ndarray
    R: np.ndarray

    def __add__(self, other: SufficientStats) -> SufficientStats:
        return SufficientStats(
            N=self.N + other.N,
            sumB=self.sumB + other.sumB,
            Sy=self.Sy + other.Sy,
            T=self.T + other.T,
            R=self.R + other.R,
        )


def _indicator(index: np.ndarray, S: int) -> sparse.csr_matrix:
    N = len(index)
    return sparse.csr_matrix((np.ones(N), (index, np.arange(N))), shape=(S, N))


def e_step(
    model: HtPldaModel, proj: Projections, data: LabeledEmbeddings
) -> tuple[SpeakerPosteriors, SufficientStats, np.ndarray]:
    """Assign the gamma and Gaussian factors and accumulate weighted statistics.

    Returns posteriors (ordered as ``data.speaker_names``), the statistics and
    the per-observation scale means ``b``.
    """
    if len(data) == 0:
        raise DataError("empty speaker groups")
    X = data.X
    S = data.num_speakers
    M = _indicator(data.speaker_index, S)
    A, b = likelihood_stats_many(proj, model, X)
    eigvals, U = eig_b0(proj.B0)
    bsum = M @ b
    asum = M @ A
    denom = 1.0 + bsum[:, None] * eigvals[None, :]
    zbar = ((asum @ U) / denom) @ U.T
    post = SpeakerPosteriors(zbar=zbar, bsum=bsum, eigvals=eigvals, eigvecs=U)

    bX = b[:, None] * X
    Sy = bX.T @ X
    T = (M @ bX).T @ zbar
    R = (U * (bsum[:, None] / denom).sum(axis=0)) @ U.T + (zbar * bsum[:, None]).T @ zbar
    stats = SufficientStats(
        N=X.shape[0],
        sumB=float(b.sum()),
        Sy=0.5 * (Sy + Sy.T),
        T=T,
        R=0.5 * (R + R.T),
    )
    return post, stats, b


def m_step(stats: SufficientStats) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form maximiser of the expected complete-data log-likelihood.

    ``F = T R^-1`` and ``W^-1 = (Sy - F T') / N``.
    """
    try:
        cR = linalg.cho_factor(stats.R, lower=True)
    except linalg.LinAlgError as exc:
        raise NumericalError("insufficient data for subspace dimension") from exc
    F = linalg.cho_solve(cR, stats.T.T).T
    C = (stats.Sy - F @ stats.T.T) / stats.N
    C = 0.5 * (C + C.T)
    try:
        cC = linalg.cho_factor(C, lower=True)
    except linalg.LinAlgError as exc:
        raise NumericalError("degenerate residual covariance") from exc
    W = linalg.cho_solve(cC, np.eye(C.shape[0]))
    return F, 0.5 * (W + W.T)


def min_div_z(model: HtPldaModel, posteriors: SpeakerPosteriors) -> HtPldaModel:
    """Re-standardise the speaker prior: ``F <- F chol(mean <z z'>)``."""
    P = posteriors.mean_second_moment()
    try:
        C = linalg.cholesky(P, lower=True)
    except linalg.LinAlgError:
        warnings.warn("speaker prior second moment not positive definite; skipping min_div_z")
        return model
    return model.replace(F=model.F @ C)


def min_div_lambda(model: HtPldaModel, bvalues: np.ndarray) -> HtPldaModel:
    """Absorb the mean precision scale into W so the scales average one again."""
    if model.gaussian:
        return model
    gamma = float(np.mean(bvalues))
    return model.replace(W=gamma * model.W)


def vb_lower_bound(
    model: HtPldaModel,
    proj: Projections,
    data: LabeledEmbeddings,
    posteriors: SpeakerPosteriors,
    bvalues: np.ndarray,
    stats: SufficientStats | None = None,
) -> float:
    """The VB lower bound on ``log P(data | model)`` for one E-step's factors.

    Includes the expected log-likelihood, the prior terms for ``z`` and
    ``lambda`` and the entropies of both factors. For infinite ``nu`` the
    ``lambda`` terms vanish and the bound equals the exact log-likelihood.
    """
    X = data.X
    N, D = X.shape
    d = model.d
    b = np.asarray(bvalues, dtype=np.float64)
    if stats is None:
        M = _indicator(data.speaker_index, data.num_speakers)
        bX = b[:, None] * X
        T = (M @ bX).T @ posteriors.zbar
        trWSy = float(np.einsum("ij,jk,ik->", bX, model.W, X))
        U, den = posteriors.eigvecs, posteriors._denom
        R = (U * (posteriors.bsum[:, None] / den).sum(axis=0)) @ U.T
        R += (posteriors.zbar * posteriors.bsum[:, None]).T @ posteriors.zbar
    else:
        T, R = stats.T, stats.R
        trWSy = float(np.sum(model.W * stats.Sy))
    _, logdetW = np.linalg.slogdet(model.W)

    if model.gaussian:
        elog = np.zeros(N)
        lam_terms = 0.0
    else:
        nu = model.nu
        alpha = 0.5 * (nu + D - d)
        elog = digamma(alpha) - math.log(alpha) + np.log(b)
        log_rate = math.log(alpha) - np.log(b)
        prior = 0.5 * nu * math.log(0.5 * nu) - gammaln(0.5 * nu) + (0.5 * nu - 1) * elog - 0.5 * nu * b
        entropy = alpha - log_rate + gammaln(alpha) + (1 - alpha) * digamma(alpha)
        lam_terms = float(np.sum(prior + entropy))

    quad = trWSy - 2.0 * float(np.sum(model.W * (model.F @ T.T))) + float(np.sum(proj.B0 * R))
    data_term = 0.5 * D * float(elog.sum()) + 0.5 * N * (logdetW - D * LOG_2PI) - 0.5 * quad
    z_terms = float(
        np.sum(0.5 * d - 0.5 * posteriors.trace_second_moment() - 0.5 * posteriors.logdet_precision())
    )
    return data_term + lam_terms + z_terms


@dataclass
class TrainConfig:
    nu: float
    d: int
    iterations: int = 50
    seed: int = 0
    tol: float = 1e-6
    min_div_z: bool = True
    min_div_lambda: bool = True
    threads: int = 1

    def __post_init__(self):
        if self.iterations < 1:
            raise DataError("iterations must be >= 1")
        if not self.tol >= 0:
            raise DataError("tolerance must be >= 0")
        if not self.nu > 0:
            raise DataError("nu must be > 0 or inf")
        if self.d < 1:
            raise DataError("subspace dimension must be >= 1")
        if self.threads < 1:
            raise DataError("threads must be >= 1")


@dataclass
class VbTrace:
    bound: list[float] = field(default_factory=list)
    delta: list[float] = field(default_factory=list)
    gamma: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)

    def __len__(self):
        return len(self.bound)

    def append(self, bound, delta, gamma, seconds):
        self.bound.append(bound)
        self.delta.append(delta)
        self.gamma.append(gamma)
        self.seconds.append(seconds)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["iter", "bound", "delta", "gamma", "seconds"])
            for t in range(len(self)):
                w.writerow(
                    [
                        t + 1,
                        repr(float(self.bound[t])),
                        repr(float(self.delta[t])),
                        repr(float(self.gamma[t])),
                        f"{self.seconds[t]:.6f}",
                    ]
                )


def init_random(D: int, d: int, nu: float, seed: int, data_scale: float = 1.0) -> HtPldaModel:
    """Random starting point whose implied covariance is on the scale of the data."""
    if not d < D:
        raise DataError("d must be < D")
    rng = np.random.default_rng(seed)
    F = rng.standard_normal((D, d)) * (data_scale / math.sqrt(d))
    W = np.eye(D) / data_scale**2
    return HtPldaModel(nu=nu, F=F, W=W)


def _shards(data: LabeledEmbeddings, n: int) -> list[LabeledEmbeddings]:
    if n <= 1:
        return [data]
    groups = np.array_split(np.arange(data.num_speakers), n)
    return [data.subset(np.isin(data.speaker_index, g)) for g in groups if len(g)]


def _parallel_e_step(model, proj, shards, pool):
    if pool is None:
        return e_step(model, proj, shards[0])
    results = list(pool.map(lambda s: e_step(model, proj, s), shards))
    post = SpeakerPosteriors.concatenate([r[0] for r in results])
    stats = results[0][1]
    for r in results[1:]:
        stats = stats + r[1]
    return post, stats, np.concatenate([r[2] for r in results])


def train(
    data: LabeledEmbeddings,
    config: TrainConfig,
    init_model: HtPldaModel | None = None,
    callback=None,
) -> tuple[HtPldaModel, VbTrace]:
    """Fit ``(F, W)`` at the configured ``nu``.

    ``callback(t, model)``, if given, is called with the updated model after
    every iteration. ``tol=0`` disables early stopping. Training starts from ``init_model`` when supplied (its
    ``nu`` is replaced by ``config.nu``), otherwise from :func:`init_random`.
    """
    N, D = data.X.shape
    if data.num_speakers < 2:
        raise DataError("training needs at least 2 speakers")
    if not config.d < D <= N:
        raise DataError(f"need d < D <= N, got d={config.d}, D={D}, N={N}")
    if init_model is None:
        model = init_random(D, config.d, config.nu, config.seed, float(np.std(data.X)))
    else:
        if init_model.D != D or init_model.d != config.d:
            raise DataError(
                f"initial model has D={init_model.D}, d={init_model.d}; data/config need D={D}, d={config.d}"
            )
        model = init_model.replace(nu=config.nu)
    check_model(model)

    shards = _shards(data, config.threads)
    pool = ThreadPoolExecutor(config.threads) if len(shards) > 1 else None
    trace = VbTrace()
    prev = None
    try:
        for t in range(1, config.iterations + 1):
            tic = time.perf_counter()
            proj = precompute(model)
            post, stats, b = _parallel_e_step(model, proj, shards, pool)
            bound = float(vb_lower_bound(model, proj, data, post, b, stats=stats))
            if not math.isfinite(bound):
                raise NumericalError(f"non-finite VB bound at iteration {t}")
            gamma = 1.0 if model.gaussian else float(np.mean(b))

            F, W = m_step(stats)
            model = model.replace(F=F, W=W)
            if config.min_div_z:
                model = min_div_z(model, post)
            if config.min_div_lambda:
                model = min_div_lambda(model, b)

            delta = math.nan if prev is None else bound - prev
            seconds = time.perf_counter() - tic
            trace.append(bound, delta, gamma, seconds)
            log.info("iter=%d bound=%.10g delta=%.6g gamma=%.6g seconds=%.3f", t, bound, delta, gamma, seconds)
            if callback is not None:
                callback(t, model)
            if prev is not None:
                if delta < 0:
                    log.warning("VB bound decreased by %.3g at iteration %d", -delta, t)
                elif delta < config.tol * abs(prev):
                    break
            prev = bound
    finally:
        if pool is not None:
            pool.shutdown()
    return model, trace


def adapt_interpolate(model_out: HtPldaModel, model_in: HtPldaModel, alpha: float) -> HtPldaModel:
    """Interpolate two models' covariances and refactor to the common rank.

    ``alpha`` weights the in-domain model. The between-speaker covariance
    ``alpha F_in F_in' + (1 - alpha) F_out F_out'`` is truncated to its top
    ``d`` eigen-components; the within-speaker covariances interpolate directly.
    """
    if not 0.0 <= alpha <= 1.0:
        raise DataError(f"alpha must be in [0, 1], got {alpha}")
    if (model_out.D, model_out.d) != (model_in.D, model_in.d):
        raise DataError(f"dimension mismatch: {model_out.D}x{model_out.d} vs {model_in.D}x{model_in.d}")
    if model_out.nu != model_in.nu:
        raise DataError(f"nu mismatch: {model_out.nu} vs {model_in.nu}")
    d = model_out.d
    Bcov = alpha * model_in.F @ model_in.F.T + (1 - alpha) * model_out.F @ model_out.F.T
    ev, V = linalg.eigh(0.5 * (Bcov + Bcov.T))
    ev, V = ev[::-1][:d], V[:, ::-1][:, :d]
    F = V * np.sqrt(np.maximum(ev, 0.0))
    Wcov = alpha * linalg.inv(model_in.W) + (1 - alpha) * linalg.inv(model_out.W)
    W = linalg.inv(0.5 * (Wcov + Wcov.T))
    return HtPldaModel(nu=model_out.nu, F=F, W=0.5 * (W + W.T))
