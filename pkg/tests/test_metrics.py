import csv
import math
import random

import pytest

from unity_s2st.metrics import chrf, corpus_bleu, exact_match, token_accuracy, write_metric_rows


def test_bleu_identity_is_100():
    refs = [[1, 2, 3, 4, 5], [6, 7, 8, 9], [1, 1, 2, 3, 5, 8]]
    assert corpus_bleu(refs, refs).score == 100.0


def test_bleu_brevity_penalty_hand_example():
    rep = corpus_bleu([["a", "b", "c", "d"]], [["a", "b", "c", "d", "e"]])
    assert rep.precisions == [1.0, 1.0, 1.0, 1.0]
    assert rep.brevity_penalty == pytest.approx(math.exp(1 - 5 / 4), abs=1e-12)
    assert rep.score == pytest.approx(100 * math.exp(1 - 5 / 4), abs=1e-6)
    assert rep.score == pytest.approx(77.8800783, abs=1e-6)


def test_bleu_no_shared_unigram_is_about_zero():
    rep = corpus_bleu([[1, 2, 3, 4]], [[5, 6, 7, 8]])
    assert 0.0 <= rep.score < 1e-10


def test_bleu_hand_partial_match():
    # hyp "a b c x", ref "a b c d": p1 = 3/4, p2 = 2/3, p3 = 1/2, p4 = eps/1, BP = 1
    rep = corpus_bleu([list("abcx")], [list("abcd")])
    assert rep.precisions[:3] == pytest.approx([0.75, 2 / 3, 0.5])
    expected = 100 * math.exp((math.log(0.75) + math.log(2 / 3) + math.log(0.5) + math.log(1e-16)) / 4)
    assert rep.score == pytest.approx(expected, rel=1e-12)


def test_bleu_clipping():
    rep = corpus_bleu([[7, 7, 7, 7]], [[7, 1, 2, 3]])
    assert rep.precisions[0] == pytest.approx(0.25)


def test_bleu_permutation_invariant():
    rng = random.Random(0)
    hyps = [[rng.randrange(6) for _ in range(rng.randrange(3, 9))] for _ in range(8)]
    refs = [[rng.randrange(6) for _ in range(rng.randrange(3, 9))] for _ in range(8)]
    base = corpus_bleu(hyps, refs).score
    order = list(range(8))
    rng.shuffle(order)
    assert corpus_bleu([hyps[i] for i in order], [refs[i] for i in order]).score == pytest.approx(base, abs=1e-12)


def test_bleu_adding_identical_pair_keeps_100():
    refs = [[1, 2, 3, 4], [5, 6, 7, 8, 9]]
    assert corpus_bleu(refs + [[4, 4, 4, 4]], refs + [[4, 4, 4, 4]]).score == 100.0


def test_bleu_errors():
    with pytest.raises(ValueError):
        corpus_bleu([], [])
    with pytest.raises(ValueError):
        corpus_bleu([[1]], [[1], [2]])


def test_bleu_range():
    rng = random.Random(1)
    for _ in range(20):
        hyps = [[rng.randrange(4) for _ in range(rng.randrange(1, 7))] for _ in range(3)]
        refs = [[rng.randrange(4) for _ in range(rng.randrange(1, 7))] for _ in range(3)]
        assert 0.0 <= corpus_bleu(hyps, refs).score <= 100.0


def test_exact_match():
    a = [[1, 2], [3], [4, 5, 6], [7]]
    assert exact_match(a, a) == 1.0
    assert exact_match(a, [[9], [9], [9], [9]]) == 0.0
    assert exact_match(a, [[1, 2], [3], [9], [9]]) == 0.5


def test_token_accuracy():
    assert token_accuracy([[1, 2, 3]], [[1, 9, 3, 4]]) == pytest.approx(2 / 4)


def _chrf_oracle(hyp: str, ref: str, n: int = 6, beta: float = 2.0) -> float:
    """Independent single-pair chrF by explicit n-gram enumeration."""
    scores = []
    for k in range(1, n + 1):
        h = [hyp[i : i + k] for i in range(len(hyp) - k + 1)]
        r = [ref[i : i + k] for i in range(len(ref) - k + 1)]
        if not h or not r:
            continue
        rem = list(r)
        match = 0
        for g in h:
            if g in rem:
                rem.remove(g)
                match += 1
        p, rc = match / len(h), match / len(r)
        scores.append(0.0 if p + rc == 0 else (1 + beta**2) * p * rc / (beta**2 * p + rc))
    return 100 * sum(scores) / len(scores)


def test_chrf_identity_and_disjoint():
    assert chrf([[1, 2, 3]], [[1, 2, 3]]) == 100.0
    assert chrf([[1, 2, 3]], [[4, 5, 6]]) == 0.0


def test_chrf_one_symbol_difference_on_ten():
    ref = "abcdefghij"
    hyp = "abcdXfghij"
    expected = _chrf_oracle(hyp, ref)
    # order k: 11 - k n-grams per side, those covering position 4 (min(k, 11 - k)) fail; P = R
    hand = [max(11 - 2 * k, 0) / (11 - k) for k in range(1, 7)]
    assert expected == pytest.approx(100 * sum(hand) / 6, abs=1e-12)
    assert chrf([list(hyp)], [list(ref)]) == pytest.approx(expected, abs=1e-12)


def test_chrf_against_oracle_random_pairs():
    rng = random.Random(2)
    for _ in range(20):
        hyp = "".join(rng.choice("abc") for _ in range(rng.randrange(6, 12)))
        ref = "".join(rng.choice("abc") for _ in range(rng.randrange(6, 12)))
        assert chrf([list(hyp)], [list(ref)]) == pytest.approx(_chrf_oracle(hyp, ref), abs=1e-9)


def test_metric_rows_csv(tmp_path):
    path = tmp_path / "m.csv"
    write_metric_rows(path, [{"dataset": "test", "model": "unity", "pass": "2nd", "metric": "unit_bleu", "value": 99.5}])
    write_metric_rows(path, [{"dataset": "test", "model": "s2ut", "pass": "1st", "metric": "unit_bleu", "value": 97.0}], append=True)
    rows = list(csv.DictReader(open(path)))
    assert [r["model"] for r in rows] == ["unity", "s2ut"]
    assert list(rows[0]) == ["dataset", "model", "pass", "metric", "value"]
