"""Decode a dataset and score the outputs against its references."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch

from .data import Example
from .metrics import chrf, corpus_bleu, exact_match, token_accuracy
from .models import S2STModel, SpeechToText
from .search import BeamConfig, DecodeResult, decode, first_pass_text


def decode_dataset(
    model: S2STModel, examples: Sequence[Example], cfg: BeamConfig, force_unit_len: bool = False
) -> list[DecodeResult]:
    """Decode every example; ``force_unit_len`` pins unit outputs to the reference length."""
    model.eval()
    with torch.no_grad():
        return [
            decode(model, ex.features, cfg, ex.id, len(ex.units) if force_unit_len else None) for ex in examples
        ]


@dataclass
class Scores:
    text_bleu: float
    text_exact: float
    text_token_acc: float
    unit_bleu: float
    unit_exact: float
    unit_chrf: float
    truncated: int

    def rows(self, dataset: str, model: str, pass_: str = "all") -> list[dict]:
        return [
            {"dataset": dataset, "model": model, "pass": pass_, "metric": k, "value": v}
            for k, v in vars(self).items()
        ]


def score(results: Sequence[DecodeResult], examples: Sequence[Example], model: S2STModel | None = None) -> Scores:
    """Text and unit metrics; a metric is NaN when the model has no such output.

    Without ``model`` an output kind counts as present when any result holds it.
    """
    if len(results) != len(examples):
        raise ValueError("decode and reference counts differ")
    nan = float("nan")
    ref_text = [ex.text for ex in examples]
    if isinstance(model, SpeechToText) and model.cfg.arch == "asr":
        ref_text = [ex.source for ex in examples]
    hyp_text = [r.text for r in results]
    hyp_units = [r.units for r in results]
    if model is None:
        has_text, has_units = any(hyp_text), any(hyp_units)
    else:
        has_text = model.cfg.arch in ("unity", "s2spect2", "s2tt", "asr")
        has_units = model.cfg.arch in ("unity", "s2ut")
    ref_units = [ex.units for ex in examples]
    return Scores(
        corpus_bleu(hyp_text, ref_text).score if has_text else nan,
        exact_match(hyp_text, ref_text) if has_text else nan,
        token_accuracy(hyp_text, ref_text) if has_text else nan,
        corpus_bleu(hyp_units, ref_units).score if has_units else nan,
        exact_match(hyp_units, ref_units) if has_units else nan,
        chrf(hyp_units, ref_units) if has_units else nan,
        sum(r.flags != "none" for r in results),
    )


def text_accuracy(model: S2STModel, examples: Sequence[Example], cfg: BeamConfig | None = None) -> float:
    """Token accuracy of first-pass text decoded with beam ``cfg.b1`` (greedy by default)."""
    cfg = cfg or BeamConfig(b1=1)
    model.eval()
    with torch.no_grad():
        hyps = [first_pass_text(model, ex.features, cfg) for ex in examples]
    return token_accuracy(hyps, [ex.text for ex in examples])
