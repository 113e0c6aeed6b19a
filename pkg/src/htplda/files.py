"""Embedding, label, trial and score files."""

from __future__ import annotations

import csv
import io
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from htplda.errors import DataError
from htplda.model import LabeledEmbeddings
from htplda.scoring import ScoreSet, TrialSet

EMB_MAGIC = b"HTEMB1\n"
_U32 = struct.Struct("<I")


@dataclass(frozen=True, eq=False)
class EmbeddingFile:
    ids: tuple[str, ...]
    X: np.ndarray

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64)
        if X.ndim != 2:
            raise DataError("embedding matrix must be 2-d")
        ids = tuple(str(i) for i in self.ids)
        if len(ids) != X.shape[0]:
            raise DataError(f"dimension mismatch: {len(ids)} ids for {X.shape[0]} rows")
        if len(set(ids)) != len(ids):
            seen = set()
            dup = next(i for i in ids if i in seen or seen.add(i))
            raise DataError(f"duplicate utterance id {dup!r}")
        if not np.all(np.isfinite(X)):
            row = int(np.flatnonzero(~np.all(np.isfinite(X), axis=1))[0])
            raise DataError(f"non-finite values in embedding {ids[row]!r}")
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "X", X)

    @property
    def N(self) -> int:
        return self.X.shape[0]

    @property
    def D(self) -> int:
        return self.X.shape[1]

    def index(self) -> dict[str, int]:
        return {u: i for i, u in enumerate(self.ids)}


def embeddings_to_bytes(emb: EmbeddingFile) -> bytes:
    out = io.BytesIO()
    out.write(EMB_MAGIC)
    out.write(f"{emb.N} {emb.D}\n".encode("ascii"))
    for u in emb.ids:
        raw = u.encode("utf-8")
        out.write(_U32.pack(len(raw)))
        out.write(raw)
    out.write(np.ascontiguousarray(emb.X, dtype="<f8").tobytes())
    return out.getvalue()


def embeddings_from_bytes(data: bytes) -> EmbeddingFile:
    if not data.startswith(EMB_MAGIC):
        raise DataError("not an HTEMB1 embedding file")
    f = io.BytesIO(data)
    f.read(len(EMB_MAGIC))
    try:
        N, D = (int(v) for v in f.readline().decode("ascii").split())
    except ValueError:
        raise DataError("bad embedding header; expected 'N D'") from None
    ids = []
    for _ in range(N):
        head = f.read(4)
        if len(head) < 4:
            raise DataError("payload shorter than header implies")
        (n,) = _U32.unpack(head)
        raw = f.read(n)
        if len(raw) < n:
            raise DataError("payload shorter than header implies")
        ids.append(raw.decode("utf-8"))
    buf = f.read(8 * N * D)
    if len(buf) < 8 * N * D:
        raise DataError("payload shorter than header implies")
    if f.read(1):
        raise DataError("payload longer than header implies")
    X = np.frombuffer(buf, dtype="<f8").astype(np.float64).reshape(N, D)
    return EmbeddingFile(tuple(ids), X)


def _is_float(text: str) -> bool:
    try:
        float(text)
    except ValueError:
        return False
    return True


def read_embeddings_csv(text: str) -> EmbeddingFile:
    rows = [r for r in csv.reader(io.StringIO(text)) if r]
    if rows and not all(_is_float(v) for v in rows[0][1:]):
        rows = rows[1:]
    if not rows:
        raise DataError("empty embedding CSV")
    D = len(rows[0]) - 1
    ids, vals = [], []
    for k, r in enumerate(rows):
        if len(r) - 1 != D:
            raise DataError(f"dimension mismatch on CSV row {k + 1}: {len(r) - 1} values, expected {D}")
        ids.append(r[0])
        try:
            vals.append([float(v) for v in r[1:]])
        except ValueError:
            raise DataError(f"non-numeric value on CSV row {k + 1}") from None
    return EmbeddingFile(tuple(ids), np.array(vals, dtype=np.float64).reshape(len(ids), D))


def write_embeddings_csv(path, emb: EmbeddingFile) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["id"] + [f"x{j}" for j in range(emb.D)])
        for u, row in zip(emb.ids, emb.X):
            w.writerow([u] + ["%.17g" % v for v in row])


def read_embeddings(path) -> EmbeddingFile:
    """Read the binary format, falling back to CSV (``id,x0,x1,...``)."""
    data = Path(path).read_bytes()
    if data.startswith(EMB_MAGIC):
        return embeddings_from_bytes(data)
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError:
        raise DataError(f"{path}: neither an HTEMB1 file nor UTF-8 CSV") from None
    return read_embeddings_csv(text)


def write_embeddings(path, emb: EmbeddingFile) -> None:
    if str(path).endswith(".csv"):
        write_embeddings_csv(path, emb)
    else:
        Path(path).write_bytes(embeddings_to_bytes(emb))


def _lines(path):
    with open(path, encoding="utf-8") as f:
        for k, line in enumerate(f, 1):
            parts = line.split()
            if parts and not parts[0].startswith("#"):
                yield k, parts


def read_labels(path) -> dict[str, str]:
    """``<utteranceId> <speakerId>`` per line."""
    labels: dict[str, str] = {}
    for k, parts in _lines(path):
        if len(parts) != 2:
            raise DataError(f"{path}:{k}: expected '<utteranceId> <speakerId>'")
        if parts[0] in labels:
            raise DataError(f"{path}:{k}: utterance {parts[0]!r} labeled twice")
        labels[parts[0]] = parts[1]
    return labels


def write_labels(path, ids, speakers) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for u, s in zip(ids, speakers):
            f.write(f"{u} {s}\n")


def labeled(emb: EmbeddingFile, labels: dict[str, str]) -> LabeledEmbeddings:
    """Join embeddings with labels; unlabeled utterances are dropped."""
    rows = [i for i, u in enumerate(emb.ids) if u in labels]
    if not rows:
        raise DataError("no embedding has a speaker label")
    ids = tuple(emb.ids[i] for i in rows)
    return LabeledEmbeddings(emb.X[rows], np.array([labels[u] for u in ids]), ids)


def read_trials(path) -> TrialSet:
    """``<enrollId> <testId> [target|nontarget]`` per line; labels all-or-none."""
    enroll, test, target = [], [], []
    seen = set()
    for k, parts in _lines(path):
        if len(parts) not in (2, 3):
            raise DataError(f"{path}:{k}: expected '<enrollId> <testId> [target|nontarget]'")
        pair = (parts[0], parts[1])
        if pair in seen:
            raise DataError(f"{path}:{k}: duplicate trial {pair[0]} {pair[1]}")
        seen.add(pair)
        enroll.append(parts[0])
        test.append(parts[1])
        if len(parts) == 3:
            if parts[2] not in ("target", "nontarget"):
                raise DataError(f"{path}:{k}: label must be 'target' or 'nontarget', got {parts[2]!r}")
            target.append(parts[2] == "target")
    if target and len(target) != len(enroll):
        raise DataError(f"{path}: some trials are labeled and some are not")
    return TrialSet(tuple(enroll), tuple(test), tuple(target) if target else None)


def write_trials(path, trials: TrialSet) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for k in range(len(trials)):
            lab = "" if trials.target is None else (" target" if trials.target[k] else " nontarget")
            f.write(f"{trials.enroll[k]} {trials.test[k]}{lab}\n")


def format_score(x: float, full_precision: bool = False) -> str:
    return repr(float(x)) if full_precision else "%.6g" % x


def write_scores(path, scores: ScoreSet, full_precision: bool = False) -> None:
    t = scores.trials
    with open(path, "w", encoding="utf-8") as f:
        for e, s, v in zip(t.enroll, t.test, scores.scores):
            f.write(f"{e} {s} {format_score(v, full_precision)}\n")


def read_scores(path) -> ScoreSet:
    enroll, test, vals = [], [], []
    for k, parts in _lines(path):
        if len(parts) != 3:
            raise DataError(f"{path}:{k}: expected '<enrollId> <testId> <score>'")
        try:
            v = float(parts[2])
        except ValueError:
            raise DataError(f"{path}:{k}: bad score {parts[2]!r}") from None
        if not math.isfinite(v):
            raise DataError(f"{path}:{k}: non-finite score")
        enroll.append(parts[0])
        test.append(parts[1])
        vals.append(v)
    return ScoreSet(TrialSet(tuple(enroll), tuple(test)), np.array(vals))


def attach_labels(scores: ScoreSet, trials: TrialSet) -> np.ndarray:
    """Target flags for each scored trial, looked up in a labeled trial list."""
    if trials.target is None:
        raise DataError("trial list has no target/nontarget labels")
    key = {(e, t): lab for e, t, lab in zip(trials.enroll, trials.test, trials.target)}
    out = np.empty(len(scores.trials), dtype=bool)
    for k, pair in enumerate(zip(scores.trials.enroll, scores.trials.test)):
        try:
            out[k] = key[pair]
        except KeyError:
            raise DataError(f"scored trial {pair[0]} {pair[1]} missing from trial list") from None
    return out
