"""Detection metrics over target / non-target score sets.

Scores are "higher means more likely target"; a trial is accepted when its
score is at or above the threshold. Ties between target and non-target
scores therefore move together on the error curve.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from htplda.errors import DataError

LN2 = math.log(2.0)


@dataclass(frozen=True, eq=False)
class LabeledScores:
    targets: np.ndarray
    nontargets: np.ndarray

    def __post_init__(self):
        tar = np.asarray(self.targets, dtype=np.float64).ravel()
        non = np.asarray(self.nontargets, dtype=np.float64).ravel()
        if tar.size == 0 or non.size == 0:
            raise DataError("both target and non-target scores are required")
        if not (np.all(np.isfinite(tar)) and np.all(np.isfinite(non))):
            raise DataError("non-finite scores")
        object.__setattr__(self, "targets", tar)
        object.__setattr__(self, "nontargets", non)

    @classmethod
    def from_labels(cls, scores, is_target) -> LabeledScores:
        scores = np.asarray(scores, dtype=np.float64)
        lab = np.asarray(is_target, dtype=bool)
        return cls(scores[lab], scores[~lab])

    def map(self, f) -> LabeledScores:
        return LabeledScores(f(self.targets), f(self.nontargets))


def error_curve(s: LabeledScores) -> tuple[np.ndarray, np.ndarray]:
    """Empirical ``(P_miss, P_fa)`` at every distinct operating point.

    Starts at accept-all ``(0, 1)`` and ends at reject-all ``(1, 0)``.
    """
    scores = np.concatenate([s.targets, s.nontargets])
    is_tar = np.concatenate([np.ones(s.targets.size), np.zeros(s.nontargets.size)])
    order = np.argsort(scores, kind="mergesort")
    scores, is_tar = scores[order], is_tar[order]
    # last index of every run of equal scores
    ends = np.flatnonzero(np.diff(scores) != 0)
    ends = np.append(ends, scores.size - 1)
    tar_cum = np.cumsum(is_tar)[ends]
    non_cum = np.cumsum(1.0 - is_tar)[ends]
    pmiss = np.concatenate([[0.0], tar_cum / s.targets.size])
    pfa = np.concatenate([[1.0], 1.0 - non_cum / s.nontargets.size])
    return pmiss, pfa


def _lower_hull(x: np.ndarray, y: np.ndarray) -> list[tuple[float, float]]:
    pts = sorted(set(zip(x.tolist(), y.tolist())))
    hull: list[tuple[float, float]] = []
    for p in pts:
        while len(hull) >= 2:
            (ox, oy), (ax, ay) = hull[-2], hull[-1]
            if (ax - ox) * (p[1] - oy) - (ay - oy) * (p[0] - ox) <= 0:
                hull.pop()
            else:
                break
        hull.append(p)
    return hull


def _crossing(points) -> float:
    """Where a polyline ordered by increasing ``P_miss - P_fa`` meets the diagonal."""
    for (x1, y1), (x2, y2) in zip(points[:-1], points[1:]):
        g1, g2 = y1 - x1, y2 - x2
        if g1 <= 0 <= g2:
            if g2 == g1:
                return x1
            t = -g1 / (g2 - g1)
            return x1 + t * (x2 - x1)
    raise AssertionError("error curve does not cross the diagonal")


def eer(s: LabeledScores, method: str = "rocch") -> float:
    """Equal error rate as a fraction in ``[0, 1]``.

    ``method="rocch"`` intersects the convex hull of the empirical ROC with
    the diagonal; ``method="linear"`` interpolates linearly between adjacent
    steps of the raw empirical curve.
    """
    pmiss, pfa = error_curve(s)
    if method == "rocch":
        hull = _lower_hull(pfa, pmiss)
        # hull is sorted by increasing P_fa, i.e. decreasing P_miss - P_fa
        return float(_crossing(hull[::-1]))
    if method == "linear":
        return float(_crossing(list(zip(pfa.tolist(), pmiss.tolist()))))
    raise ValueError(f"unknown EER method {method!r}")


def min_dcf(s: LabeledScores, p_target: float, c_miss: float = 1.0, c_fa: float = 1.0) -> float:
    """Minimum detection cost normalised by the best trivial (accept/reject-all) cost."""
    if not 0.0 < p_target < 1.0:
        raise DataError("p_target must lie in (0, 1)")
    if not (c_miss > 0 and c_fa > 0):
        raise DataError("costs must be positive")
    pmiss, pfa = error_curve(s)
    wm, wf = p_target * c_miss, (1.0 - p_target) * c_fa
    return float(np.min(wm * pmiss + wf * pfa) / min(wm, wf))


def c_primary(s: LabeledScores) -> float:
    """Mean of the normalised minimum DCFs at target priors 0.01 and 0.005."""
    return 0.5 * (min_dcf(s, 0.01) + min_dcf(s, 0.005))


def cllr(s: LabeledScores) -> float:
    """Cost of log-likelihood-ratio (bits) for natural-log LLR scores."""
    c_tar = np.mean(np.logaddexp(0.0, -s.targets)) / LN2
    c_non = np.mean(np.logaddexp(0.0, s.nontargets)) / LN2
    return float(0.5 * (c_tar + c_non))


def pav(y: np.ndarray, w: np.ndarray | None = None) -> np.ndarray:
    """Weighted isotonic (non-decreasing) regression by pool-adjacent-violators."""
    y = np.asarray(y, dtype=np.float64)
    w = np.ones_like(y) if w is None else np.asarray(w, dtype=np.float64)
    sums, weights, sizes = [], [], []
    for yi, wi in zip(y, w):
        sums.append(yi * wi)
        weights.append(wi)
        sizes.append(1)
        while len(sums) > 1 and sums[-2] / weights[-2] >= sums[-1] / weights[-1]:
            s, wt, n = sums.pop(), weights.pop(), sizes.pop()
            sums[-1] += s
            weights[-1] += wt
            sizes[-1] += n
    return np.repeat(np.array(sums) / np.array(weights), sizes)


def optimal_posteriors(s: LabeledScores) -> tuple[np.ndarray, np.ndarray]:
    """PAV target posteriors for the target and non-target scores, ties pooled."""
    scores = np.concatenate([s.targets, s.nontargets])
    lab = np.concatenate([np.ones(s.targets.size), np.zeros(s.nontargets.size)])
    uniq, inv = np.unique(scores, return_inverse=True)
    n_bin = np.bincount(inv, minlength=uniq.size).astype(np.float64)
    t_bin = np.bincount(inv, weights=lab, minlength=uniq.size)
    p = pav(t_bin / n_bin, n_bin)[inv]
    return p[: s.targets.size], p[s.targets.size :]


def min_cllr(s: LabeledScores) -> float:
    """Cllr after the optimal monotone recalibration of the scores."""
    p_tar, p_non = optimal_posteriors(s)
    nt, nn = s.targets.size, s.nontargets.size
    # LLR = logit(p) - log(nt/nn); both terms written to stay finite at p in {0, 1}
    c_tar = np.log2((p_tar * nn + (1 - p_tar) * nt) / (p_tar * nn))
    c_non = np.log2((p_non * nn + (1 - p_non) * nt) / ((1 - p_non) * nt))
    return float(0.5 * (c_tar.mean() + c_non.mean()))


def cllr_and_min_cllr(s: LabeledScores) -> tuple[float, float]:
    return cllr(s), min_cllr(s)


METRIC_NAMES = ("eer", "mindcf:<p>", "cprimary", "cllr")


def evaluate(s: LabeledScores, metrics) -> list[tuple[str, float]]:
    """Compute a list of named metrics.

    Names: ``eer`` (reported in percent), ``mindcf:<p_target>``, ``cprimary``
    and ``cllr`` (which also yields ``min_cllr`` and ``cllr_gap``).
    """
    out = []
    for name in metrics:
        name = name.strip()
        if name == "eer":
            out.append(("eer_percent", 100.0 * eer(s)))
        elif name.startswith("mindcf:"):
            p = float(name.split(":", 1)[1])
            out.append((f"mindcf_{name.split(':', 1)[1]}", min_dcf(s, p)))
        elif name == "cprimary":
            out.append(("cprimary", c_primary(s)))
        elif name == "cllr":
            c, cm = cllr_and_min_cllr(s)
            out += [("cllr", c), ("min_cllr", cm), ("cllr_gap", c - cm)]
        else:
            raise DataError(f"unknown metric {name!r}; expected one of {', '.join(METRIC_NAMES)}")
    return out
