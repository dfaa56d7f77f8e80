"""Classification and ranking metrics plus a paired t-test.

Conventions:
  * precision/recall/F1 are macro-averaged over all ``C`` classes; a class
    that never occurs in labels or predictions contributes 0 and still
    counts in the denominator.
  * Recall@K is per-query "a relevant candidate is in the top K".
"""

import math
from dataclasses import asdict, dataclass

import numpy as np

from attnguide.errors import InvalidArgumentError
from attnguide.mathcore import student_t_sf_two_sided


@dataclass
class ClassificationReport:
    accuracy: float
    precision: float
    recall: float
    f1: float

    def to_dict(self):
        return asdict(self)


@dataclass
class RankingReport:
    mrr: float
    recall_at_k: dict

    def to_dict(self):
        return {"mrr": self.mrr, **{f"r@{k}": v for k, v in self.recall_at_k.items()}}


def classification_metrics(predictions, labels, n_classes):
    pred = np.asarray(predictions, dtype=np.int64).reshape(-1)
    gold = np.asarray(labels, dtype=np.int64).reshape(-1)
    if pred.shape != gold.shape:
        raise InvalidArgumentError("predictions and labels differ in length")
    if pred.size == 0:
        raise InvalidArgumentError("no examples to score")
    for arr in (pred, gold):
        if arr.min() < 0 or arr.max() >= n_classes:
            raise InvalidArgumentError(f"class index outside [0, {n_classes})")
    conf = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(conf, (gold, pred), 1)
    tp = np.diag(conf).astype(np.float64)
    predicted = conf.sum(axis=0)
    actual = conf.sum(axis=1)
    p = np.divide(tp, predicted, out=np.zeros(n_classes), where=predicted > 0)
    r = np.divide(tp, actual, out=np.zeros(n_classes), where=actual > 0)
    f = np.divide(2 * p * r, p + r, out=np.zeros(n_classes), where=(p + r) > 0)
    return ClassificationReport(
        accuracy=float(np.mean(pred == gold)),
        precision=float(p.mean()),
        recall=float(r.mean()),
        f1=float(f.mean()),
    )


def mrr(first_relevant_ranks):
    ranks = [int(r) for r in first_relevant_ranks]
    if not ranks:
        raise InvalidArgumentError("MRR of an empty query set")
    if min(ranks) < 1:
        raise InvalidArgumentError("ranks start at 1")
    return math.fsum(1.0 / r for r in ranks) / len(ranks)


def recall_at_k(ranked_relevance, k):
    """``ranked_relevance``: per query, relevance flags in ranked order."""
    if k < 1:
        raise InvalidArgumentError("k must be at least 1")
    lists = list(ranked_relevance)
    if not lists:
        raise InvalidArgumentError("Recall@K of an empty query set")
    hits = sum(1 for rel in lists if any(rel[:k]))
    return hits / len(lists)


def first_relevant_rank(relevance):
    for i, rel in enumerate(relevance, start=1):
        if rel:
            return i
    return None


def rank_candidates(scores, relevance):
    """Relevance flags sorted by descending score; ties keep input order."""
    order = sorted(range(len(scores)), key=lambda i: -scores[i])
    return [relevance[i] for i in order]


def ranking_metrics(groups, ks=(1, 3, 5, 20)):
    """``groups``: iterable of (scores, relevance) per query. Queries without
    any relevant candidate are skipped."""
    ranked = []
    for scores, relevance in groups:
        rel = rank_candidates(list(scores), list(relevance))
        if any(rel):
            ranked.append(rel)
    if not ranked:
        raise InvalidArgumentError("no query has a relevant candidate")
    return RankingReport(
        mrr=mrr(first_relevant_rank(r) for r in ranked),
        recall_at_k={k: recall_at_k(ranked, k) for k in ks},
    )


def paired_t_test(scores_a, scores_b):
    """Paired Student t over per-seed differences ``a - b``.

    Zero variance of the differences is degenerate: p = 1 if every
    difference is 0 (t = 0), otherwise p = 0 (t = +/-inf).
    """
    a = np.asarray(scores_a, dtype=np.float64)
    b = np.asarray(scores_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise InvalidArgumentError("paired samples must be 1-D and equally long")
    n = a.size
    if n < 2:
        raise InvalidArgumentError("need at least 2 pairs")
    d = a - b
    mean = d.mean()
    sd = d.std(ddof=1)
    if sd == 0:
        if mean == 0:
            return 0.0, 1.0
        return math.copysign(math.inf, mean), 0.0
    t = float(mean / (sd / math.sqrt(n)))
    return t, student_t_sf_two_sided(t, n - 1)
