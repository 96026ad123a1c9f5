import math

import pytest
from hypothesis import given, strategies as st

from chunkreuse.metrics import UNDEFINED, exact_match, f1_score, normalize_answer, normalized_f1

words = st.lists(st.sampled_from(["red", "blue", "the", "a", "Fox", "fox.", "x", "7", "jump"]), max_size=5).map(" ".join)


def test_normalization():
    assert normalize_answer("  The  Answer. ") == "answer"
    assert exact_match("The Answer.", ["answer"]) == 1
    assert exact_match("Paris", ["Paris"]) == 1
    assert exact_match("Paris", ["Rome", "Oslo"]) == 0


def test_f1_hand_counted():
    assert f1_score("same words", ["same words"]) == 1.0
    # one shared token out of two on each side; "a" would be dropped as an article
    assert f1_score("x b", ["b c"]) == pytest.approx(0.5)
    assert f1_score("a b", ["b c"]) == pytest.approx(2 / 3)
    assert f1_score("", ["b c"]) == 0.0
    assert f1_score("b c", [""]) == 0.0
    assert f1_score("b", ["q", "b c"]) == pytest.approx(2 / 3)  # max over golds


def test_normalized_f1():
    assert normalized_f1(0.781, 0.712, 0.852) == pytest.approx(49.2857, abs=1e-3)
    assert math.floor(normalized_f1(0.781, 0.712, 0.852) * 10) / 10 == 49.2  # one decimal, truncated
    assert normalized_f1(0.852, 0.712, 0.852) == pytest.approx(100.0)
    assert normalized_f1(0.712, 0.712, 0.852) == 0.0
    assert normalized_f1(0.5, 0.4, 0.4) == UNDEFINED


@given(words, st.lists(words, min_size=1, max_size=4), st.randoms())
def test_metric_properties(pred, golds, rnd):
    em, f1 = exact_match(pred, golds), f1_score(pred, golds)
    assert em in (0, 1) and 0.0 <= f1 <= 1.0
    if em == 1:
        assert f1 == 1.0
    shuffled = list(golds)
    rnd.shuffle(shuffled)
    assert f1_score(pred, shuffled) == f1 and exact_match(pred, shuffled) == em
