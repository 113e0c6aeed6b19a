import numpy as np
import pytest

from htplda import DataError
from htplda.files import (
    EmbeddingFile,
    attach_labels,
    embeddings_from_bytes,
    embeddings_to_bytes,
    format_score,
    labeled,
    read_embeddings,
    read_labels,
    read_scores,
    read_trials,
    write_embeddings,
    write_scores,
    write_trials,
)
from htplda.scoring import ScoreSet, TrialSet


def emb(n=4, D=3, seed=0):
    X = np.random.default_rng(seed).standard_normal((n, D))
    return EmbeddingFile(tuple(f"utt{i}" for i in range(n)), X)


class TestEmbeddings:
    @pytest.mark.parametrize("name", ["e.emb", "e.csv"])
    def test_round_trip_bit_exact(self, name, tmp_path):
        e = emb()
        write_embeddings(tmp_path / name, e)
        got = read_embeddings(tmp_path / name)
        assert got.ids == e.ids
        np.testing.assert_array_equal(got.X, e.X)

    def test_unicode_ids(self):
        e = EmbeddingFile(("größe", "日本"), np.zeros((2, 2)))
        assert embeddings_from_bytes(embeddings_to_bytes(e)).ids == e.ids

    def test_csv_without_header(self, tmp_path):
        (tmp_path / "e.csv").write_text("a,1,2\nb,3,4.5\n")
        got = read_embeddings(tmp_path / "e.csv")
        assert got.ids == ("a", "b")
        np.testing.assert_array_equal(got.X, [[1, 2], [3, 4.5]])

    def test_csv_ragged(self, tmp_path):
        (tmp_path / "e.csv").write_text("a,1,2\nb,3\n")
        with pytest.raises(DataError, match="dimension mismatch"):
            read_embeddings(tmp_path / "e.csv")

    def test_duplicates_and_nan(self):
        with pytest.raises(DataError, match="duplicate utterance id 'a'"):
            EmbeddingFile(("a", "b", "a"), np.zeros((3, 2)))
        with pytest.raises(DataError, match="non-finite"):
            EmbeddingFile(("a",), np.array([[np.nan, 0.0]]))

    def test_truncated_binary(self):
        raw = embeddings_to_bytes(emb())
        with pytest.raises(DataError, match="shorter"):
            embeddings_from_bytes(raw[:-3])
        with pytest.raises(DataError, match="longer"):
            embeddings_from_bytes(raw + b"x")


class TestLabelsAndTrials:
    def test_labels(self, tmp_path):
        p = tmp_path / "l.txt"
        p.write_text("utt0 A\n# comment\nutt2 B\n\n")
        labels = read_labels(p)
        assert labels == {"utt0": "A", "utt2": "B"}
        data = labeled(emb(), labels)
        assert data.ids == ("utt0", "utt2")
        assert list(data.speakers) == ["A", "B"]

    def test_labels_twice(self, tmp_path):
        p = tmp_path / "l.txt"
        p.write_text("u A\nu B\n")
        with pytest.raises(DataError, match="labeled twice"):
            read_labels(p)

    def test_no_labels_match(self):
        with pytest.raises(DataError):
            labeled(emb(), {"zz": "A"})

    def test_trials_round_trip(self, tmp_path):
        t = TrialSet(("a", "a", "b"), ("x", "y", "x"), (True, False, False))
        write_trials(tmp_path / "t.txt", t)
        assert read_trials(tmp_path / "t.txt") == t
        u = TrialSet(("a",), ("x",))
        write_trials(tmp_path / "u.txt", u)
        assert read_trials(tmp_path / "u.txt").target is None

    @pytest.mark.parametrize(
        "text,match",
        [
            ("a x target\na y\n", "some trials"),
            ("a x maybe\n", "label must be"),
            ("a x\na x\n", "duplicate trial"),
            ("a\n", "expected"),
        ],
    )
    def test_bad_trials(self, text, match, tmp_path):
        (tmp_path / "t.txt").write_text(text)
        with pytest.raises(DataError, match=match):
            read_trials(tmp_path / "t.txt")


class TestScores:
    def test_round_trip_full_precision(self, tmp_path):
        s = ScoreSet(TrialSet(("a", "b"), ("x", "y")), np.array([0.1 + 0.2, -1e-300]))
        write_scores(tmp_path / "s.txt", s, full_precision=True)
        got = read_scores(tmp_path / "s.txt")
        np.testing.assert_array_equal(got.scores, s.scores)
        assert got.trials == s.trials

    def test_default_precision(self):
        assert format_score(1 / 3) == "0.333333"
        assert format_score(1 / 3, True) == repr(1 / 3)

    def test_attach_labels(self):
        s = ScoreSet(TrialSet(("b", "a"), ("x", "x")), np.zeros(2))
        t = TrialSet(("a", "b"), ("x", "x"), (True, False))
        np.testing.assert_array_equal(attach_labels(s, t), [False, True])
        with pytest.raises(DataError, match="missing"):
            attach_labels(ScoreSet(TrialSet(("c",), ("x",)), np.zeros(1)), t)
        with pytest.raises(DataError, match="no target"):
            attach_labels(s, TrialSet(("a",), ("x",)))

    def test_bad_score(self, tmp_path):
        (tmp_path / "s.txt").write_text("a x nan\n")
        with pytest.raises(DataError, match="non-finite"):
            read_scores(tmp_path / "s.txt")
