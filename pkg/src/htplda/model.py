"""HT-PLDA parameters, derived projections, likelihood statistics and sampling.

The model: for speaker ``i`` a hidden identity ``z_i ~ N(0, I_d)``; for each
observation a precision scale ``lambda_ij ~ Gamma(nu/2, rate=nu/2)``; and
``r_ij ~ N(F z_i, (lambda_ij W)^-1)``. ``nu = INFINITY`` is the Gaussian PLDA
special case where every ``lambda_ij`` is exactly one.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy import linalg
from scipy.special import gammaln

from htplda.errors import DataError, NumericalError

INFINITY = math.inf

MODEL_MAGIC = b"HTPLDA1\n"


def scale(M: np.ndarray) -> float:
    """Tolerance scale of a matrix: its largest absolute entry (1 for zeros)."""
    s = float(np.max(np.abs(M))) if M.size else 0.0
    return s if s > 0 else 1.0


@dataclass(frozen=True, eq=False)
class HtPldaModel:
    """Parameters ``(nu, F, W)``; F is D-by-d, W is the D-by-D precision."""

    nu: float
    F: np.ndarray
    W: np.ndarray

    def __post_init__(self):
        F = np.array(self.F, dtype=np.float64)
        W = np.array(self.W, dtype=np.float64)
        if F.ndim != 2 or W.ndim != 2:
            raise DataError("F and W must be 2-d arrays")
        F.setflags(write=False)
        W.setflags(write=False)
        object.__setattr__(self, "F", F)
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "nu", float(self.nu))

    @property
    def D(self) -> int:
        return self.F.shape[0]

    @property
    def d(self) -> int:
        return self.F.shape[1]

    @property
    def gaussian(self) -> bool:
        return math.isinf(self.nu)

    def replace(self, **changes) -> HtPldaModel:
        kw = {"nu": self.nu, "F": self.F, "W": self.W}
        kw.update(changes)
        return HtPldaModel(**kw)

    def __repr__(self):
        return f"HtPldaModel(D={self.D}, d={self.d}, nu={self.nu})"


def validate_model(model: HtPldaModel) -> list[str]:
    """Return a list of violated invariants; empty when the model is usable."""
    problems = []
    F, W = model.F, model.W
    D, d = F.shape
    if not model.nu > 0:
        problems.append("nu must be > 0 or inf")
    if d >= D:
        problems.append("d must be < D")
    if W.shape != (D, D):
        problems.append(f"W must be {D}x{D}, got {W.shape[0]}x{W.shape[1]}")
        return problems
    if not (np.all(np.isfinite(F)) and np.all(np.isfinite(W))):
        problems.append("non-finite entries in F or W")
        return problems
    if not np.allclose(W, W.T, rtol=0, atol=1e-10 * scale(W)):
        problems.append("W not symmetric")
    try:
        linalg.cholesky(W, lower=True)
    except linalg.LinAlgError:
        problems.append("W not positive definite")
        return problems
    B0 = F.T @ W @ F
    try:
        linalg.cholesky(B0, lower=True)
        if np.linalg.cond(B0) > 1e14:
            raise linalg.LinAlgError
    except linalg.LinAlgError:
        problems.append("F'WF not invertible")
    return problems


def check_model(model: HtPldaModel) -> None:
    problems = validate_model(model)
    if problems:
        raise DataError("invalid model: " + "; ".join(problems))


@dataclass(frozen=True, eq=False)
class Projections:
    """Matrices derived from a model and shared by every likelihood computation.

    ``G = W - W F B0^-1 F' W`` annihilates the speaker subspace (``G F = 0``);
    ``r' G r`` is the energy of ``r`` outside it.
    """

    B0: np.ndarray
    G: np.ndarray
    FtW: np.ndarray
    nu_prime: float


def precompute(model: HtPldaModel) -> Projections:
    F, W = model.F, model.W
    FtW = F.T @ W
    B0 = FtW @ F
    B0 = 0.5 * (B0 + B0.T)
    try:
        cB0 = linalg.cho_factor(B0, lower=True)
    except linalg.LinAlgError as exc:
        raise NumericalError("degenerate speaker subspace: F'WF is singular") from exc
    G = W - FtW.T @ linalg.cho_solve(cB0, FtW)
    G = 0.5 * (G + G.T)
    return Projections(B0=B0, G=G, FtW=FtW, nu_prime=model.nu + model.D - model.d)


def eig_b0(B0: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Symmetric eigendecomposition ``B0 = U diag(L) U'`` with a fixed sign convention.

    Each eigenvector is flipped so its largest-magnitude entry is positive.
    """
    L, U = linalg.eigh(B0)
    if L[0] <= 0:
        raise NumericalError("degenerate speaker subspace: F'WF is not positive definite")
    idx = np.argmax(np.abs(U), axis=0)
    signs = np.sign(U[idx, np.arange(U.shape[1])])
    return L, U * signs


@dataclass(frozen=True)
class GaussianLikelihood:
    """Natural parameters of ``exp(a'z - b z'B0 z / 2)``; B0 is shared."""

    a: np.ndarray
    b: float


def _as_rows(X, D) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[1] != D:
        raise DataError(f"expected vectors of dimension {D}, got {X.shape[1]}")
    if not np.all(np.isfinite(X)):
        raise DataError("non-finite values in embeddings")
    return X


def residual_energy(proj: Projections, X: np.ndarray) -> np.ndarray:
    """``r' G r`` per row, clipped at zero against rounding."""
    q = np.einsum("ij,jk,ik->i", X, proj.G, X)
    return np.maximum(q, 0.0)


def precision_scales(proj: Projections, model: HtPldaModel, X: np.ndarray) -> np.ndarray:
    """Per-row ``b = (nu + D - d) / (nu + r'Gr)``; ones when nu is infinite."""
    X = _as_rows(X, model.D)
    if model.gaussian:
        return np.ones(X.shape[0])
    return proj.nu_prime / (model.nu + residual_energy(proj, X))


def likelihood_stats_many(proj: Projections, model: HtPldaModel, X) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised :func:`likelihood_stats`: returns ``(A, b)`` with A of shape (N, d)."""
    X = _as_rows(X, model.D)
    b = precision_scales(proj, model, X)
    A = b[:, None] * (X @ proj.FtW.T)
    return A, b


def likelihood_stats(proj: Projections, model: HtPldaModel, r) -> GaussianLikelihood:
    r = np.asarray(r, dtype=np.float64)
    if r.ndim != 1:
        raise DataError("likelihood_stats takes a single vector")
    A, b = likelihood_stats_many(proj, model, r)
    return GaussianLikelihood(a=A[0], b=float(b[0]))


def log_gauss_density(model: HtPldaModel, z, r) -> float:
    """``log N(r | F z, W^-1)``."""
    e = np.asarray(r, dtype=np.float64) - model.F @ np.asarray(z, dtype=np.float64)
    _, logdet = np.linalg.slogdet(model.W)
    return 0.5 * (logdet - model.D * math.log(2 * math.pi) - e @ model.W @ e)


def log_t_density(model: HtPldaModel, z, r) -> float:
    """Exact ``log T(r | F z, W, nu)`` with lambda integrated out.

    Falls back to the Gaussian density when nu is infinite.
    """
    if model.gaussian:
        return log_gauss_density(model, z, r)
    nu, D = model.nu, model.D
    e = np.asarray(r, dtype=np.float64) - model.F @ np.asarray(z, dtype=np.float64)
    q = e @ model.W @ e
    _, logdet = np.linalg.slogdet(model.W)
    return float(
        gammaln((nu + D) / 2)
        - gammaln(nu / 2)
        - 0.5 * D * math.log(nu * math.pi)
        + 0.5 * logdet
        - 0.5 * (nu + D) * math.log1p(q / nu)
    )


@dataclass(frozen=True, eq=False)
class LabeledEmbeddings:
    """Embedding rows ``X`` with a speaker id per row."""

    X: np.ndarray
    speakers: np.ndarray
    ids: tuple[str, ...] | None = None

    def __post_init__(self):
        X = np.array(self.X, dtype=np.float64)
        if X.ndim != 2:
            raise DataError("X must be a 2-d array")
        spk = np.asarray(self.speakers)
        if spk.shape != (X.shape[0],):
            raise DataError(f"{X.shape[0]} rows but {spk.shape[0]} speaker labels")
        X.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "speakers", spk)

    @cached_property
    def _grouping(self):
        names, index = np.unique(self.speakers, return_inverse=True)
        return names, index

    @property
    def speaker_names(self) -> np.ndarray:
        return self._grouping[0]

    @property
    def speaker_index(self) -> np.ndarray:
        """Row -> integer speaker index into ``speaker_names``."""
        return self._grouping[1]

    @property
    def num_speakers(self) -> int:
        return len(self.speaker_names)

    @property
    def counts(self) -> np.ndarray:
        return np.bincount(self.speaker_index, minlength=self.num_speakers)

    def __len__(self):
        return self.X.shape[0]

    def subset(self, mask) -> LabeledEmbeddings:
        mask = np.asarray(mask)
        ids = None if self.ids is None else tuple(np.asarray(self.ids, dtype=object)[mask])
        return LabeledEmbeddings(self.X[mask], self.speakers[mask], ids)

    def filter_min_count(self, min_utts: int) -> LabeledEmbeddings:
        """Drop speakers with fewer than ``min_utts`` observations."""
        keep = self.counts[self.speaker_index] >= min_utts
        return self.subset(keep)

    def with_X(self, X) -> LabeledEmbeddings:
        return LabeledEmbeddings(X, self.speakers, self.ids)


@dataclass(frozen=True, eq=False)
class HiddenVariables:
    z: np.ndarray
    lam: np.ndarray = field(repr=False)


def sample(model: HtPldaModel, speaker_counts, seed: int) -> tuple[LabeledEmbeddings, HiddenVariables]:
    """Draw embeddings from the generative model.

    Returns the labeled data and the hidden ``z`` (one row per speaker) and
    ``lambda`` (one per observation). Speaker ids are ``spk00000``...
    """
    check_model(model)
    counts = np.asarray(speaker_counts, dtype=np.int64)
    if counts.ndim != 1 or np.any(counts < 1):
        raise DataError("speaker counts must all be >= 1")
    rng = np.random.default_rng(seed)
    S, N = len(counts), int(counts.sum())
    z = rng.standard_normal((S, model.d))
    if model.gaussian:
        lam = np.ones(N)
    else:
        lam = rng.gamma(shape=model.nu / 2, scale=2 / model.nu, size=N)
    chol_cov = linalg.cholesky(linalg.inv(model.W), lower=True)
    spk = np.repeat(np.arange(S), counts)
    noise = rng.standard_normal((N, model.D)) @ chol_cov.T
    X = z[spk] @ model.F.T + noise / np.sqrt(lam)[:, None]
    width = max(5, len(str(S - 1)))
    names = np.array([f"spk{i:0{width}d}" for i in range(S)])
    ids = tuple(f"{names[s]}-{j:03d}" for s, c in enumerate(counts) for j in range(c))
    return LabeledEmbeddings(X, names[spk], ids), HiddenVariables(z=z, lam=lam)


def synthetic_model(D: int, d: int, nu: float, seed: int, between: float = 1.0, spread: float = 2.0) -> HtPldaModel:
    """A random "ground truth" model for synthetic experiments.

    ``F`` has i.i.d. ``N(0, between^2 / d)`` entries and ``W^-1`` has
    eigenvalues spread log-uniformly over ``[1/spread, spread]`` in random
    directions.
    """
    rng = np.random.default_rng(seed)
    F = rng.standard_normal((D, d)) * (between / math.sqrt(d))
    Q, _ = np.linalg.qr(rng.standard_normal((D, D)))
    ev = np.exp(rng.uniform(-math.log(spread), math.log(spread), size=D))
    W = (Q / ev) @ Q.T
    return HtPldaModel(nu=nu, F=F, W=0.5 * (W + W.T))


def _format_nu(nu: float) -> str:
    return "inf" if math.isinf(nu) else repr(float(nu))


def parse_nu(text: str) -> float:
    t = str(text).strip().lower()
    if t in ("inf", "infinity", "+inf"):
        return INFINITY
    try:
        nu = float(t)
    except ValueError:
        raise DataError(f"bad degrees of freedom {text!r}") from None
    if not nu > 0:
        raise DataError(f"degrees of freedom must be > 0 or inf, got {text!r}")
    return nu


def read_header(f, magic: bytes) -> dict[str, str]:
    got = f.read(len(magic))
    if got != magic:
        raise DataError(f"bad magic: expected {magic!r}, got {got!r}")
    header = {}
    while True:
        line = f.readline()
        if not line:
            raise DataError("truncated header")
        line = line.decode("ascii").strip()
        if line == "end":
            return header
        key, _, value = line.partition(" ")
        header[key] = value.strip()


def read_floats(f, count: int) -> np.ndarray:
    buf = f.read(8 * count)
    if len(buf) < 8 * count:
        raise DataError("payload shorter than header implies")
    return np.frombuffer(buf, dtype="<f8").astype(np.float64)


def model_to_bytes(model: HtPldaModel) -> bytes:
    out = io.BytesIO()
    out.write(MODEL_MAGIC)
    out.write(f"D {model.D}\nd {model.d}\nnu {_format_nu(model.nu)}\nend\n".encode("ascii"))
    out.write(np.ascontiguousarray(model.F, dtype="<f8").tobytes())
    out.write(np.ascontiguousarray(model.W, dtype="<f8").tobytes())
    return out.getvalue()


def model_from_bytes(data: bytes) -> HtPldaModel:
    f = io.BytesIO(data)
    header = read_header(f, MODEL_MAGIC)
    try:
        D, d = int(header["D"]), int(header["d"])
        nu = parse_nu(header["nu"])
    except KeyError as exc:
        raise DataError(f"model header missing key {exc.args[0]}") from None
    F = read_floats(f, D * d).reshape(D, d)
    W = read_floats(f, D * D).reshape(D, D)
    if f.read(1):
        raise DataError("trailing bytes after model payload")
    return HtPldaModel(nu=nu, F=F, W=W)


def save_model(path, model: HtPldaModel) -> None:
    Path(path).write_bytes(model_to_bytes(model))


def load_model(path) -> HtPldaModel:
    return model_from_bytes(Path(path).read_bytes())

