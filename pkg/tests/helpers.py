"""Synthetic verification trials and shared oracles for the test-suite."""

import numpy as np

from htplda.metrics import LabeledScores
from htplda.model import HtPldaModel, sample
from htplda.scoring import diagonalize, extract_many, score_pairs


def heldout_trials(model: HtPldaModel, n_speakers: int, seed: int, n_nontarget_shifts: int = 10):
    """One enrollment and one test utterance per new speaker.

    Targets pair a speaker's two utterances; non-targets pair enrollment ``i``
    with the test of speaker ``i + k`` for ``k = 1..n_nontarget_shifts``.
    """
    data, _ = sample(model, [2] * n_speakers, seed=seed)
    enroll, test = data.X[0::2], data.X[1::2]
    ei = [np.arange(n_speakers)]
    ti = [np.arange(n_speakers)]
    for k in range(1, n_nontarget_shifts + 1):
        ei.append(np.arange(n_speakers))
        ti.append((np.arange(n_speakers) + k) % n_speakers)
    ei, ti = np.concatenate(ei), np.concatenate(ti)
    is_target = np.zeros(len(ei), dtype=bool)
    is_target[:n_speakers] = True
    return enroll, test, ei, ti, is_target


def score_heldout(model: HtPldaModel, trials) -> LabeledScores:
    enroll, test, ei, ti, is_target = trials
    sm = diagonalize(model)
    me, mt = extract_many(sm, enroll), extract_many(sm, test)
    s = score_pairs(sm, me[ei], mt[ti])
    return LabeledScores.from_labels(s, is_target)
