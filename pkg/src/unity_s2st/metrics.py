"""Corpus BLEU, exact match and chrF over token-id (or symbol) sequences."""

from __future__ import annotations

import csv
import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Hashable, Sequence

BLEU_EPSILON = 1e-16
METRIC_HEADER = ["dataset", "model", "pass", "metric", "value"]


@dataclass
class BleuReport:
    score: float
    precisions: list[float]
    brevity_penalty: float
    hyp_len: int
    ref_len: int


def ngrams(seq: Sequence[Hashable], n: int) -> Counter:
    return Counter(tuple(seq[i : i + n]) for i in range(len(seq) - n + 1))


def corpus_bleu(hyps: Sequence[Sequence[Hashable]], refs: Sequence[Sequence[Hashable]], max_n: int = 4) -> BleuReport:
    """Corpus BLEU with one reference per hypothesis.

    Clipped n-gram matches and totals are summed over the corpus. A zero
    match count is replaced by ``BLEU_EPSILON``; orders for which the
    hypotheses contain no n-gram at all are left out of the geometric mean.
    """
    if len(hyps) != len(refs):
        raise ValueError("hypothesis and reference counts differ")
    if not hyps:
        raise ValueError("empty corpus")
    matches = [0] * max_n
    totals = [0] * max_n
    hyp_len = ref_len = 0
    for hyp, ref in zip(hyps, refs):
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, max_n + 1):
            h, r = ngrams(hyp, n), ngrams(ref, n)
            matches[n - 1] += sum(min(c, r[g]) for g, c in h.items())
            totals[n - 1] += max(len(hyp) - n + 1, 0)
    precisions = [
        (m if m > 0 else BLEU_EPSILON) / t if t > 0 else 0.0 for m, t in zip(matches, totals)
    ]
    if hyp_len == 0:
        return BleuReport(0.0, precisions, 0.0, hyp_len, ref_len)
    bp = 1.0 if hyp_len >= ref_len else math.exp(1.0 - ref_len / hyp_len)
    logs = [math.log(p) for p, t in zip(precisions, totals) if t > 0]
    score = 100.0 * bp * math.exp(sum(logs) / len(logs))
    return BleuReport(score, precisions, bp, hyp_len, ref_len)


def exact_match(hyps: Sequence[Sequence[Hashable]], refs: Sequence[Sequence[Hashable]]) -> float:
    if len(hyps) != len(refs):
        raise ValueError("hypothesis and reference counts differ")
    if not hyps:
        raise ValueError("empty corpus")
    return sum(list(h) == list(r) for h, r in zip(hyps, refs)) / len(hyps)


def token_accuracy(hyps: Sequence[Sequence[Hashable]], refs: Sequence[Sequence[Hashable]]) -> float:
    """Position-wise token agreement over ``max(len(hyp), len(ref))`` slots per pair."""
    correct = slots = 0
    for h, r in zip(hyps, refs):
        correct += sum(a == b for a, b in zip(h, r))
        slots += max(len(h), len(r))
    return correct / slots if slots else 1.0


def chrf(hyps: Sequence[Sequence[Hashable]], refs: Sequence[Sequence[Hashable]], n: int = 6, beta: float = 2.0) -> float:
    """Character n-gram F-beta (0-100); each symbol of a sequence is one character.

    Match statistics are summed over the corpus per order, an F-beta is taken
    per order, and the orders that occur in both hypotheses and references
    are averaged.
    """
    if len(hyps) != len(refs):
        raise ValueError("hypothesis and reference counts differ")
    if not hyps:
        raise ValueError("empty corpus")
    stats = [[0, 0, 0] for _ in range(n)]  # hyp, ref, match
    for hyp, ref in zip(hyps, refs):
        for k in range(1, n + 1):
            h, r = ngrams(hyp, k), ngrams(ref, k)
            stats[k - 1][0] += sum(h.values())
            stats[k - 1][1] += sum(r.values())
            stats[k - 1][2] += sum((h & r).values())
    b2 = beta * beta
    total, orders = 0.0, 0
    for n_hyp, n_ref, n_match in stats:
        if n_hyp == 0 or n_ref == 0:
            continue
        orders += 1
        prec, rec = n_match / n_hyp, n_match / n_ref
        denom = b2 * prec + rec
        total += (1 + b2) * prec * rec / denom if denom > 0 else 0.0
    return 100.0 * total / orders if orders else 0.0


def write_metric_rows(path: str | Path, rows: Sequence[dict], append: bool = False) -> None:
    """CSV rows of (dataset, model, pass, metric, value)."""
    path = Path(path)
    new = not (append and path.exists())
    with open(path, "a" if append else "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRIC_HEADER)
        if new:
            writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in METRIC_HEADER})
