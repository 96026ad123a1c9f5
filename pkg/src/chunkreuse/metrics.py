"""Answer metrics with SQuAD-style normalization."""

from __future__ import annotations

import re
import string
from collections import Counter

UNDEFINED = "undefined"

_ARTICLES = re.compile(r"\b(a|an|the)\b")
_PUNCT = set(string.punctuation)


def normalize_answer(s: str) -> str:
    s = s.lower()
    s = "".join(ch for ch in s if ch not in _PUNCT)
    s = _ARTICLES.sub(" ", s)
    return " ".join(s.split())


def exact_match(pred: str, golds) -> int:
    p = normalize_answer(pred)
    return int(any(p == normalize_answer(g) for g in golds))


def _f1(pred: str, gold: str) -> float:
    p, g = normalize_answer(pred).split(), normalize_answer(gold).split()
    if not p or not g:
        # both empty counts as agreement so that EM = 1 always implies F1 = 1
        return float(p == g)
    common = sum((Counter(p) & Counter(g)).values())
    if common == 0:
        return 0.0
    precision, recall = common / len(p), common / len(g)
    return 2 * precision * recall / (precision + recall)


def f1_score(pred: str, golds) -> float:
    return max(_f1(pred, g) for g in golds)


def normalized_f1(f1: float, f1_fr: float, f1_fa: float):
    """Percentage of the gap between full reuse and full attention that ``f1`` closes."""
    if f1_fa == f1_fr:
        return UNDEFINED
    return (f1 - f1_fr) / (f1_fa - f1_fr) * 100.0
