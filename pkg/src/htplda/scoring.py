"""Fast verification scoring with jointly diagonalised meta-embeddings.

Every observation's likelihood for ``z`` is ``exp(a'z - b z'B0 z / 2)`` with a
shared ``B0``. Rotating into the eigenbasis of ``B0`` makes all precisions
diagonal, so pooling is addition and a trial costs ``O(d)``.
"""

from __future__ import annotations

from collections.abc import Mapping, Sequence
from dataclasses import dataclass

import numpy as np

from htplda.errors import DataError
from htplda.model import HtPldaModel, check_model, eig_b0, precompute


@dataclass(frozen=True, eq=False)
class ScoringModel:
    eigvals: np.ndarray
    Tmap: np.ndarray
    U: np.ndarray
    G: np.ndarray
    nu: float
    nu_prime: float
    D: int
    d: int

    @property
    def gaussian(self) -> bool:
        return np.isinf(self.nu)


def diagonalize(model: HtPldaModel) -> ScoringModel:
    check_model(model)
    proj = precompute(model)
    eigvals, U = eig_b0(proj.B0)
    return ScoringModel(
        eigvals=eigvals,
        Tmap=U.T @ proj.FtW,
        U=U,
        G=proj.G,
        nu=model.nu,
        nu_prime=proj.nu_prime,
        D=model.D,
        d=model.d,
    )


@dataclass(frozen=True, eq=False)
class MetaEmbedding:
    """Additive summary ``(aRot, b, count)`` of one or more observations.

    Arrays may carry a leading batch axis: ``aRot`` (n, d), ``b`` and ``count`` (n,).
    """

    aRot: np.ndarray
    b: np.ndarray | float
    count: np.ndarray | int = 1

    def __add__(self, other: MetaEmbedding) -> MetaEmbedding:
        return pool(self, other)

    def __len__(self):
        if np.ndim(self.aRot) == 1:
            raise TypeError("unbatched meta-embedding has no length")
        return self.aRot.shape[0]

    def __getitem__(self, idx) -> MetaEmbedding:
        return MetaEmbedding(self.aRot[idx], np.asarray(self.b)[idx], np.asarray(self.count)[idx])


def identity(d: int) -> MetaEmbedding:
    return MetaEmbedding(np.zeros(d), 0.0, 0)


def extract_many(sm: ScoringModel, X) -> MetaEmbedding:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != sm.D:
        raise DataError(f"expected an (n, {sm.D}) array of embeddings")
    if not np.all(np.isfinite(X)):
        raise DataError("non-finite values in embeddings")
    if sm.gaussian:
        b = np.ones(X.shape[0])
    else:
        q = np.maximum(np.einsum("ij,jk,ik->i", X, sm.G, X), 0.0)
        b = sm.nu_prime / (sm.nu + q)
    aRot = b[:, None] * (X @ sm.Tmap.T)
    return MetaEmbedding(aRot, b, np.ones(X.shape[0], dtype=np.int64))


def extract(sm: ScoringModel, r) -> MetaEmbedding:
    r = np.asarray(r, dtype=np.float64)
    if r.ndim != 1:
        raise DataError("extract takes a single vector; use extract_many for batches")
    m = extract_many(sm, r[None, :])
    return MetaEmbedding(m.aRot[0], float(m.b[0]), 1)


def pool(x: MetaEmbedding, y: MetaEmbedding) -> MetaEmbedding:
    return MetaEmbedding(x.aRot + y.aRot, x.b + y.b, x.count + y.count)


def pool_groups(m: MetaEmbedding, groups: np.ndarray, n_groups: int) -> MetaEmbedding:
    """Sum a batch of meta-embeddings by integer group index."""
    aRot = np.zeros((n_groups, m.aRot.shape[1]))
    np.add.at(aRot, groups, m.aRot)
    b = np.bincount(groups, weights=m.b, minlength=n_groups)
    count = np.bincount(groups, weights=m.count, minlength=n_groups).astype(np.int64)
    return MetaEmbedding(aRot, b, count)


def _log_expectation(eigvals, aRot, b) -> np.ndarray:
    den = 1.0 + np.asarray(b)[..., None] * eigvals
    return 0.5 * np.sum(aRot**2 / den - np.log(den), axis=-1)


def log_expectation(sm: ScoringModel, m: MetaEmbedding):
    """``log E[exp(a'z - b z'B0 z / 2)]`` under the standard normal prior on ``z``."""
    if np.any(np.asarray(m.b) < 0):
        raise DataError("meta-embedding precision scale must be >= 0")
    out = _log_expectation(sm.eigvals, m.aRot, m.b)
    return float(out) if np.ndim(out) == 0 else out


def score_trial(sm: ScoringModel, enroll: MetaEmbedding, test: MetaEmbedding):
    """Same-speaker versus different-speaker log-likelihood ratio."""
    return (
        log_expectation(sm, pool(enroll, test))
        - log_expectation(sm, enroll)
        - log_expectation(sm, test)
    )


def score_pairs(sm: ScoringModel, enroll: MetaEmbedding, test: MetaEmbedding, chunk: int = 65536) -> np.ndarray:
    """LLRs for aligned batches ``enroll[k]`` vs ``test[k]``."""
    n = len(enroll)
    if len(test) != n:
        raise DataError("enroll and test batches differ in length")
    le = _log_expectation(sm.eigvals, enroll.aRot, enroll.b)
    lt = _log_expectation(sm.eigvals, test.aRot, test.b)
    out = np.empty(n)
    for s in range(0, n, chunk):
        sl = slice(s, s + chunk)
        out[sl] = _log_expectation(sm.eigvals, enroll.aRot[sl] + test.aRot[sl], enroll.b[sl] + test.b[sl])
    return out - le - lt


def score_cross(sm: ScoringModel, enroll: MetaEmbedding, test: MetaEmbedding, chunk: int = 256) -> np.ndarray:
    """Full ``len(enroll)`` by ``len(test)`` LLR matrix."""
    le = _log_expectation(sm.eigvals, enroll.aRot, enroll.b)
    lt = _log_expectation(sm.eigvals, test.aRot, test.b)
    out = np.empty((len(enroll), len(test)))
    for s in range(0, len(enroll), chunk):
        a = enroll.aRot[s : s + chunk, None, :] + test.aRot[None, :, :]
        b = np.asarray(enroll.b)[s : s + chunk, None] + np.asarray(test.b)[None, :]
        out[s : s + chunk] = _log_expectation(sm.eigvals, a, b)
    return out - le[:, None] - lt[None, :]


@dataclass(frozen=True)
class TrialSet:
    enroll: tuple[str, ...]
    test: tuple[str, ...]
    target: tuple[bool, ...] | None = None

    def __post_init__(self):
        if len(self.enroll) != len(self.test):
            raise DataError("enroll and test id lists differ in length")
        if self.target is not None and len(self.target) != len(self.enroll):
            raise DataError("label list length differs from trial count")

    def __len__(self):
        return len(self.enroll)

    @classmethod
    def cross(cls, enroll_ids: Sequence[str], test_ids: Sequence[str]) -> TrialSet:
        return cls(
            tuple(e for e in enroll_ids for _ in test_ids),
            tuple(t for _ in enroll_ids for t in test_ids),
        )


@dataclass(frozen=True)
class ScoreSet:
    trials: TrialSet
    scores: np.ndarray

    def __post_init__(self):
        if len(self.scores) != len(self.trials):
            raise DataError("one score per trial required")


def group_embeddings(
    sm: ScoringModel, X, utt_ids: Sequence[str], model_of: Mapping[str, str] | None = None
) -> tuple[list[str], MetaEmbedding]:
    """Extract and pool embeddings into one meta-embedding per model id.

    ``model_of`` maps utterance id to model id (multi-session enrollment);
    utterances missing from it are ignored. Without it every utterance is
    its own model.
    """
    m = extract_many(sm, X)
    if model_of is None:
        return list(utt_ids), m
    names: dict[str, int] = {}
    rows, groups = [], []
    for i, u in enumerate(utt_ids):
        if u in model_of:
            rows.append(i)
            groups.append(names.setdefault(model_of[u], len(names)))
    rows = np.asarray(rows, dtype=np.int64)
    pooled = pool_groups(m[rows], np.asarray(groups, dtype=np.int64), len(names))
    return list(names), pooled


def score_matrix(
    sm: ScoringModel,
    enroll_ids: Sequence[str],
    enroll: MetaEmbedding,
    test_ids: Sequence[str],
    test: MetaEmbedding,
    trials: TrialSet | None = None,
) -> ScoreSet:
    """Score a trial list, or the full enroll-by-test cross when ``trials`` is None."""
    if trials is None:
        trials = TrialSet.cross(enroll_ids, test_ids)
        return ScoreSet(trials, score_cross(sm, enroll, test).ravel())
    e_index = {k: i for i, k in enumerate(enroll_ids)}
    t_index = {k: i for i, k in enumerate(test_ids)}
    try:
        ei = np.fromiter((e_index[e] for e in trials.enroll), dtype=np.int64, count=len(trials))
    except KeyError as exc:
        raise DataError(f"unknown enrollment id {exc.args[0]!r}") from None
    try:
        ti = np.fromiter((t_index[t] for t in trials.test), dtype=np.int64, count=len(trials))
    except KeyError as exc:
        raise DataError(f"unknown test id {exc.args[0]!r}") from None
    return ScoreSet(trials, score_pairs(sm, enroll[ei], test[ti]))


def _top_k_stats(cohort_scores: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    top = -np.partition(-cohort_scores, k - 1, axis=1)[:, :k]
    mu = top.mean(axis=1)
    sigma = top.std(axis=1)
    return mu, sigma


def snorm_adaptive(
    raw: np.ndarray,
    enroll_vs_cohort: np.ndarray,
    test_vs_cohort: np.ndarray,
    top_k: int = 200,
    enroll_index: np.ndarray | None = None,
    test_index: np.ndarray | None = None,
) -> np.ndarray:
    """Adaptive symmetric score normalisation.

    ``raw[k]`` is the score of trial k; its enrollment and test sides index
    rows of the cohort matrices via ``enroll_index``/``test_index`` (default
    the identity, i.e. one cohort row per trial). Each side is standardised
    by the mean and population std of its ``top_k`` highest cohort scores and
    the two results are averaged.
    """
    raw = np.asarray(raw, dtype=np.float64)
    ec = np.atleast_2d(np.asarray(enroll_vs_cohort, dtype=np.float64))
    tc = np.atleast_2d(np.asarray(test_vs_cohort, dtype=np.float64))
    if not 2 <= top_k <= min(ec.shape[1], tc.shape[1]):
        raise DataError(f"need 2 <= top_k <= cohort size, got top_k={top_k}, cohort={ec.shape[1]}")
    ei = np.arange(len(raw)) if enroll_index is None else np.asarray(enroll_index)
    ti = np.arange(len(raw)) if test_index is None else np.asarray(test_index)
    mu_e, sd_e = _top_k_stats(ec, top_k)
    mu_t, sd_t = _top_k_stats(tc, top_k)
    if np.any(sd_e[ei] == 0) or np.any(sd_t[ti] == 0):
        raise DataError("degenerate cohort: zero spread in top-k cohort scores")
    return 0.5 * ((raw - mu_e[ei]) / sd_e[ei] + (raw - mu_t[ti]) / sd_t[ti])
