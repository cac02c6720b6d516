"""Task metrics: accuracy, F1, EER, entity-pair F1, exact match, following rate."""

from __future__ import annotations

from collections import Counter
from typing import Iterable, Sequence

import numpy as np

from .errors import DegenerateScores
from .prompts import NotAnOption
from .tasks import FILL, SEP


def accuracy(preds: Sequence, refs: Sequence) -> float:
    if len(preds) != len(refs):
        raise ValueError("preds and refs differ in length")
    if not refs:
        raise ValueError("accuracy of an empty set")
    return sum(p is not NotAnOption and p == r for p, r in zip(preds, refs)) / len(refs)


def _per_class_f1(preds, refs, label):
    tp = sum(p == label and r == label for p, r in zip(preds, refs))
    fp = sum(p == label and r != label for p, r in zip(preds, refs))
    fn = sum(p != label and r == label for p, r in zip(preds, refs))
    if tp == 0:
        return 0.0
    return 2 * tp / (2 * tp + fp + fn)


def macro_f1(preds: Sequence, refs: Sequence, labels: Sequence[str]) -> float:
    """Unweighted mean of per-class F1 over ``labels``.

    A class with no support and no predictions scores 0.  NotAnOption
    predictions match no class.
    """
    if len(preds) != len(refs):
        raise ValueError("preds and refs differ in length")
    return sum(_per_class_f1(preds, refs, lab) for lab in labels) / len(labels)


def binary_f1(preds: Sequence, refs: Sequence, positive: str) -> float:
    return _per_class_f1(preds, refs, positive)


def eer(scores: Iterable[tuple[float, bool]]) -> float:
    """Equal error rate from ``(score, is_positive)`` pairs.

    Candidate thresholds are the observed scores; an item is accepted when
    its score is >= threshold.  Returns (FAR+FRR)/2 at the threshold with the
    smallest |FAR-FRR|, preferring the lower threshold on ties.
    """
    pairs = list(scores)
    s = np.array([float(x) for x, _ in pairs])
    y = np.array([bool(p) for _, p in pairs])
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise DegenerateScores("EER needs both positive and negative items")
    thresholds = np.unique(s)
    pos = np.sort(s[y])
    neg = np.sort(s[~y])
    # accepted negatives: score >= t ; rejected positives: score < t
    fa = n_neg - np.searchsorted(neg, thresholds, side="left")
    fr = np.searchsorted(pos, thresholds, side="left")
    # |FAR - FRR| scaled by n_pos * n_neg stays an exact integer, so ties
    # resolve to the lowest threshold without rounding noise
    gap = np.abs(fa * n_pos - fr * n_neg)
    i = int(np.argmin(gap))
    return (int(fa[i]) * n_pos + int(fr[i]) * n_neg) / (2 * n_pos * n_neg)


def parse_pairs(sequence: str | Sequence[str]) -> list[tuple[str, str]] | None:
    """Parse ``tag FILL phrase SEP tag FILL phrase`` into (tag, phrase) pairs.

    Returns None when any chunk is malformed.  A trailing SEP is tolerated.
    """
    tokens = sequence.split() if isinstance(sequence, str) else list(sequence)
    if not tokens:
        return []
    chunks = [[]]
    for tok in tokens:
        if tok == SEP:
            chunks.append([])
        else:
            chunks[-1].append(tok)
    if len(chunks) > 1 and not chunks[-1]:
        chunks.pop()
    pairs = []
    for chunk in chunks:
        if len(chunk) < 3 or chunk[1] != FILL or FILL in chunk[2:] or chunk[0] == FILL:
            return None
        pairs.append((chunk[0], " ".join(chunk[2:])))
    return pairs


def slu_f1(pred_seqs: Sequence, ref_seqs: Sequence, *, return_details: bool = False):
    """Micro F1 over (tag, phrase) pairs with multiset matching.

    A malformed prediction contributes no pairs.  When neither side has any
    pair the score is 1.0.
    """
    if len(pred_seqs) != len(ref_seqs):
        raise ValueError("pred and ref lists differ in length")
    tp = n_pred = n_ref = malformed = 0
    for p, r in zip(pred_seqs, ref_seqs):
        rp = parse_pairs(r)
        if rp is None:
            raise ValueError(f"reference {r!r} is not a valid pair sequence")
        pp = parse_pairs(p)
        if pp is None:
            malformed += 1
            pp = []
        tp += sum((Counter(pp) & Counter(rp)).values())
        n_pred += len(pp)
        n_ref += len(rp)
    if n_pred == 0 and n_ref == 0:
        f1 = 1.0
    else:
        f1 = 2 * tp / (n_pred + n_ref)
    if return_details:
        return f1, {"tp": tp, "n_pred": n_pred, "n_ref": n_ref, "malformed_rate": malformed / max(1, len(pred_seqs))}
    return f1


def _normalize(s) -> str:
    if not isinstance(s, str):
        s = " ".join(s)
    return " ".join(s.split())


def exact_match(pred, ref) -> bool:
    return _normalize(pred) == _normalize(ref)


def exact_match_rate(preds: Sequence, refs: Sequence) -> float:
    if not refs:
        raise ValueError("exact match of an empty set")
    return sum(exact_match(p, r) for p, r in zip(preds, refs)) / len(refs)


def following_rate(preds: Sequence) -> float:
    if not preds:
        raise ValueError("following rate of an empty set")
    return sum(p is not NotAnOption for p in preds) / len(preds)
