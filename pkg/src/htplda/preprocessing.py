"""Centering, whitening and length normalisation of embedding sets."""

from __future__ import annotations

import io
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import linalg

from htplda.errors import DataError, NumericalError
from htplda.model import read_floats, read_header

PREP_MAGIC = b"HTPREP1\n"


@dataclass(frozen=True, eq=False)
class Preprocessor:
    """``y = whitener @ (x - mean)``, then optionally ``y <- radius * y / |y|``.

    ``radius=None`` means ``sqrt(D)``.
    """

    mean: np.ndarray
    whitener: np.ndarray
    project: bool = False
    radius: float | None = None

    def __post_init__(self):
        mean = np.array(self.mean, dtype=np.float64).ravel()
        Wh = np.array(self.whitener, dtype=np.float64)
        if Wh.shape != (mean.size, mean.size):
            raise DataError(f"whitener must be {mean.size}x{mean.size}")
        mean.setflags(write=False)
        Wh.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "whitener", Wh)
        if self.radius is not None and not self.radius > 0:
            raise DataError("length-normalisation radius must be positive")

    @property
    def D(self) -> int:
        return self.mean.size

    @property
    def effective_radius(self) -> float:
        return math.sqrt(self.D) if self.radius is None else float(self.radius)

    def recentered(self, X) -> Preprocessor:
        """Same whitening and projection, but centred on the mean of ``X``.

        Used to centre evaluation data on its own development set.
        """
        X = _check(X, self.D)
        return Preprocessor(X.mean(axis=0), self.whitener, self.project, self.radius)


def _check(X, D=None) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise DataError("embeddings must be a 2-d array")
    if D is not None and X.shape[1] != D:
        raise DataError(f"preprocessor expects dimension {D}, got {X.shape[1]}")
    if not np.all(np.isfinite(X)):
        raise DataError("non-finite values in embeddings")
    return X


def fit(
    X,
    center: bool = True,
    whiten: bool = True,
    project: bool = False,
    radius: float | None = None,
    shrink: float = 1e-6,
) -> Preprocessor:
    """Estimate the mean and an upper-triangular whitener from ``X``.

    The whitener satisfies ``whitener' whitener = (C + eps I)^-1`` where ``C``
    is the (1/N) covariance and ``eps = shrink * trace(C) / D``. With
    ``shrink=0`` at least ``D + 1`` rows are required.
    """
    X = _check(X)
    N, D = X.shape
    mean = X.mean(axis=0) if center else np.zeros(D)
    if not whiten:
        return Preprocessor(mean, np.eye(D), project, radius)
    if shrink <= 0 and N <= D:
        raise DataError(f"need N > D for a full-rank covariance without shrinkage (N={N}, D={D})")
    Xc = X - mean
    C = Xc.T @ Xc / N
    C = 0.5 * (C + C.T) + (shrink * np.trace(C) / D) * np.eye(D)
    try:
        L = linalg.cholesky(linalg.inv(C), lower=True)
    except (linalg.LinAlgError, ValueError) as exc:
        raise NumericalError("degenerate covariance: cannot whiten") from exc
    if not np.all(np.isfinite(L)):
        raise NumericalError("degenerate covariance: cannot whiten")
    return Preprocessor(mean, L.T, project, radius)


def apply(p: Preprocessor, X) -> np.ndarray:
    X = _check(X, p.D)
    Y = (X - p.mean) @ p.whitener.T
    if p.project:
        norms = np.linalg.norm(Y, axis=1)
        if np.any(norms == 0):
            raise DataError("cannot length-normalise a zero vector")
        Y = Y * (p.effective_radius / norms)[:, None]
    return Y


def to_bytes(p: Preprocessor) -> bytes:
    out = io.BytesIO()
    out.write(PREP_MAGIC)
    radius = "sqrtD" if p.radius is None else repr(float(p.radius))
    out.write(f"D {p.D}\nproject {int(p.project)}\nradius {radius}\nend\n".encode("ascii"))
    out.write(np.ascontiguousarray(p.mean, dtype="<f8").tobytes())
    out.write(np.ascontiguousarray(p.whitener, dtype="<f8").tobytes())
    return out.getvalue()


def from_bytes(data: bytes) -> Preprocessor:
    f = io.BytesIO(data)
    header = read_header(f, PREP_MAGIC)
    try:
        D = int(header["D"])
        project = bool(int(header["project"]))
        radius = None if header["radius"] == "sqrtD" else float(header["radius"])
    except KeyError as exc:
        raise DataError(f"preprocessor header missing key {exc.args[0]}") from None
    mean = read_floats(f, D)
    whitener = read_floats(f, D * D).reshape(D, D)
    if f.read(1):
        raise DataError("trailing bytes after preprocessor payload")
    return Preprocessor(mean, whitener, project, radius)


def save(path, p: Preprocessor) -> None:
    Path(path).write_bytes(to_bytes(p))


def load(path) -> Preprocessor:
    return from_bytes(Path(path).read_bytes())
