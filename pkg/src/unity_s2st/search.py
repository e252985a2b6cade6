"""Beam search over cached decoders and the two-pass UnitY decoding procedure."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
import torch
from torch import Tensor

from .data import BOS, EOS, MASK, PAD
from .models import S2SpecT, S2SpecT2, S2UT, S2STModel, SpeechToText, UnitY
from .nn import Decoder, IncrementalState


@dataclass(frozen=True)
class BeamConfig:
    b1: int = 10
    b2: int = 1
    max_text_len: int = 32
    max_unit_len: int = 256
    text_len_penalty: float = 1.0
    unit_len_penalty: float = 0.0
    unit_len_ratio: int = 10
    eos_threshold: float = 0.5

    def __post_init__(self) -> None:
        if self.b1 < 1 or self.b2 < 1:
            raise ValueError("beam sizes must be >= 1")
        if self.max_text_len < 1 or self.max_unit_len < 1:
            raise ValueError("maximum lengths must be >= 1")
        if self.text_len_penalty < 0 or self.unit_len_penalty < 0:
            raise ValueError("length-penalty exponents must be >= 0")


@dataclass
class Hypothesis:
    tokens: list[int]
    score: float  # cumulative log-probability
    finished: bool = False
    states: list[Tensor] = field(default_factory=list)  # pre-logit state that emitted each token
    step_scores: list[float] = field(default_factory=list)

    def normalized(self, penalty: float) -> float:
        return self.score / (max(len(self.tokens), 1) ** penalty) if penalty else self.score

    @property
    def output(self) -> list[int]:
        """Tokens without the terminating EOS."""
        return self.tokens[:-1] if self.finished else list(self.tokens)


@dataclass
class BeamResult:
    hypotheses: list[Hypothesis]
    truncated: bool

    @property
    def best(self) -> Hypothesis:
        return self.hypotheses[0]


class Scorer(Protocol):
    vocab: int

    def start(self) -> object: ...

    def step(self, prev: Tensor, state: object) -> tuple[Tensor, Tensor]: ...

    def reorder(self, state: object, index: Tensor) -> None: ...


class DecoderScorer:
    """Next-token log-probabilities from a :class:`Decoder` with incremental state."""

    def __init__(self, decoder: Decoder, contexts: Sequence[Tensor] = (), ctx_masks=None) -> None:
        self.decoder = decoder
        self.contexts = list(contexts)
        self.ctx_masks = ctx_masks
        self.vocab = decoder.vocab

    def start(self) -> IncrementalState:
        return self.decoder.init_state(self.contexts, self.ctx_masks)

    def step(self, prev: Tensor, state: IncrementalState) -> tuple[Tensor, Tensor]:
        logits, states = self.decoder.step(prev, state)
        return torch.log_softmax(logits, dim=-1), states

    def reorder(self, state: IncrementalState, index: Tensor) -> None:
        state.reorder(index)


@torch.no_grad()
def beam_search(
    scorer: Scorer,
    beam: int,
    max_len: int,
    length_penalty: float = 0.0,
    eos: int = EOS,
    banned: Sequence[int] = (PAD, BOS),
    exact_len: int | None = None,
) -> BeamResult:
    """Beam search over ``scorer``; lengths count the EOS token.

    Every live hypothesis is expanded over the whole vocabulary and the pool
    (new candidates plus already finished hypotheses) is cut to the ``beam``
    best by ``score / len**length_penalty``, ties broken by the
    lexicographically smaller token sequence. A candidate ending in ``eos``
    is finished and stops expanding. With ``length_penalty == 0`` the search
    stops early once no live hypothesis can overtake the best finished one.
    ``exact_len`` forces exactly that many tokens before EOS.
    """
    if beam < 1:
        raise ValueError("beam must be >= 1")
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    if exact_len is not None:
        max_len = exact_len + 1
    state = scorer.start()
    live = [Hypothesis([], 0.0)]
    finished: list[Hypothesis] = []
    prev = torch.tensor([BOS])
    for t in range(max_len):
        lprobs, hidden = scorer.step(prev, state)
        lprobs = lprobs.to(torch.float64)
        if banned:
            lprobs[:, list(banned)] = -math.inf
        if exact_len is not None and t < exact_len:
            lprobs[:, eos] = -math.inf
        elif exact_len is not None:
            keep = lprobs[:, eos].clone()
            lprobs.fill_(-math.inf)
            lprobs[:, eos] = keep
        scores = torch.tensor([h.score for h in live], dtype=torch.float64)
        cand = scores.unsqueeze(1) + lprobs
        norm = cand / float(t + 1) ** length_penalty if length_penalty else cand
        flat = norm.reshape(-1)
        k = min(beam, flat.numel())
        thr = torch.topk(flat, k).values[-1]
        picks = torch.nonzero(flat >= thr).reshape(-1).tolist() if math.isfinite(thr) else \
            torch.nonzero(torch.isfinite(flat)).reshape(-1).tolist()
        vocab = lprobs.shape[1]
        pool = []
        for i in picks:
            val = float(flat[i])
            if val == -math.inf:
                continue
            h, tok = divmod(i, vocab)
            pool.append((val, live[h].tokens + [tok], h, tok))
        pool += [(f.normalized(length_penalty), f.tokens, -1, -1) for f in finished]
        pool.sort(key=lambda e: (-e[0], e[1]))
        pool = pool[:beam]

        new_live, parents, new_finished = [], [], []
        for val, tokens, h, tok in pool:
            if h < 0:
                new_finished.append(next(f for f in finished if f.tokens == tokens))
                continue
            parent = live[h]
            step_lp = float(lprobs[h, tok])
            hyp = Hypothesis(
                tokens,
                float(cand[h, tok]),
                tok == eos,
                parent.states + [hidden[h]],
                parent.step_scores + [step_lp],
            )
            if hyp.finished:
                new_finished.append(hyp)
            else:
                new_live.append(hyp)
                parents.append(h)
        finished = new_finished
        live = new_live
        if not live:
            break
        if not length_penalty and finished and max(f.score for f in finished) >= max(h.score for h in live):
            break
        scorer.reorder(state, torch.tensor(parents))
        prev = torch.tensor([h.tokens[-1] for h in live])

    if finished:
        ranked = sorted(finished, key=lambda f: (-f.normalized(length_penalty), f.tokens))
        return BeamResult(ranked, False)
    ranked = sorted(live, key=lambda h: (-h.normalized(length_penalty), h.tokens))
    return BeamResult(ranked, True)


# --------------------------------------------------------------------------
# model-level decoding


@dataclass
class DecodeResult:
    id: str
    text: list[int]
    units: list[int]
    text_score: float = float("nan")
    unit_score: float = float("nan")
    text_truncated: bool = False
    unit_truncated: bool = False
    d_text: Tensor | None = None
    spectrogram: np.ndarray | None = None

    @property
    def flags(self) -> str:
        names = [n for n, f in (("text", self.text_truncated), ("unit", self.unit_truncated)) if f]
        return ",".join(names) or "none"


def _encode(model: S2STModel, feats: np.ndarray | Tensor) -> tuple[Tensor, Tensor]:
    x = torch.as_tensor(feats, dtype=torch.get_default_dtype()).unsqueeze(0)
    return model.encoder(x)


# special symbols never emitted by model-level decoding
OUTPUT_BANNED = (PAD, BOS, MASK)


def _text_pass(decoder: Decoder, h: Tensor, h_mask: Tensor, cfg: BeamConfig, text_len: int | None = None) -> BeamResult:
    return beam_search(
        DecoderScorer(decoder, [h], [h_mask]),
        cfg.b1,
        cfg.max_text_len if text_len is None else text_len + 1,
        cfg.text_len_penalty,
        banned=OUTPUT_BANNED,
        exact_len=text_len,
    )


@torch.no_grad()
def first_pass_text(model: S2STModel, feats, cfg: BeamConfig) -> list[int]:
    """Best first-pass text hypothesis only; the second pass is skipped."""
    decoder = getattr(model, "text_decoder", None)
    if decoder is None:
        raise TypeError(f"{type(model).__name__} has no first-pass text decoder")
    h, h_mask = _encode(model, feats)
    return _text_pass(decoder, h, h_mask, cfg).best.output


def _unit_budget(cfg: BeamConfig, text_len: int) -> int:
    return max(1, min(cfg.max_unit_len, cfg.unit_len_ratio * max(text_len, 1)))


@torch.no_grad()
def two_pass_decode(
    model: UnitY, feats, cfg: BeamConfig, utt_id: str = "", unit_len: int | None = None, text_len: int | None = None
) -> DecodeResult:
    """Text beam search, cached D_text of the best hypothesis -> T2U encoder -> unit beam search.

    ``unit_len`` / ``text_len`` force a pass to emit exactly that many tokens
    before EOS (used for length-controlled benchmarking).
    """
    h, h_mask = _encode(model, feats)
    first = _text_pass(model.text_decoder, h, h_mask, cfg, text_len)
    best = first.best
    d_text = torch.stack(best.states).unsqueeze(0)
    z = model.t2u(d_text)
    contexts = [z] if model.cfg.cross_mode == "none" else [z, h]
    masks = [None] if model.cfg.cross_mode == "none" else [None, h_mask]
    max_units = _unit_budget(cfg, len(best.output)) if unit_len is None else unit_len + 1
    second = beam_search(
        DecoderScorer(model.unit_decoder, contexts, masks),
        cfg.b2,
        max_units,
        cfg.unit_len_penalty,
        banned=OUTPUT_BANNED,
        exact_len=unit_len,
    )
    return DecodeResult(
        utt_id, best.output, second.best.output, best.score, second.best.score,
        first.truncated, second.truncated, d_text[0],
    )


@torch.no_grad()
def spectrogram_greedy(decoder, contexts, masks, max_steps: int, threshold: float = 0.5) -> tuple[np.ndarray, bool]:
    """Greedy spectrogram generation; stops after the first step whose EOS probability exceeds ``threshold``.

    Returns the frames and a truncation flag.
    """
    state = decoder.init_state(contexts, masks)
    prev = torch.zeros(1, decoder.d_spec)
    out = []
    for _ in range(max_steps):
        frames, eos_logit = decoder.step(prev, state)
        out.append(frames[0])
        if torch.sigmoid(eos_logit[0]) > threshold:
            return torch.cat(out).numpy(), False
        prev = frames[:, -1]
    return torch.cat(out).numpy(), True


@torch.no_grad()
def single_pass_decode(
    model: S2STModel, feats, cfg: BeamConfig, utt_id: str = "", unit_len: int | None = None, text_len: int | None = None
) -> DecodeResult:
    """One beam search over an S2UT unit decoder (beam ``b1``), greedy spectrogram decoding,
    or a text beam search (``b1``) for S2TT/ASR models; ASR transcripts are returned as ``text``."""
    h, h_mask = _encode(model, feats)
    if isinstance(model, S2UT):
        res = beam_search(
            DecoderScorer(model.unit_decoder, [h], [h_mask]),
            cfg.b1,
            cfg.max_unit_len if unit_len is None else unit_len + 1,
            cfg.unit_len_penalty,
            banned=OUTPUT_BANNED,
            exact_len=unit_len,
        )
        return DecodeResult(utt_id, [], res.best.output, unit_score=res.best.score, unit_truncated=res.truncated)
    if isinstance(model, S2SpecT):
        frames, trunc = spectrogram_greedy(model.spec_decoder, [h], [h_mask], cfg.max_unit_len, cfg.eos_threshold)
        return DecodeResult(utt_id, [], [], unit_truncated=trunc, spectrogram=frames)
    if isinstance(model, S2SpecT2):
        first = _text_pass(model.text_decoder, h, h_mask, cfg, text_len)
        d_text = torch.stack(first.best.states).unsqueeze(0)
        z = model.t2u(d_text)
        frames, trunc = spectrogram_greedy(
            model.spec_decoder, [z], [None], _unit_budget(cfg, len(first.best.output)), cfg.eos_threshold
        )
        return DecodeResult(
            utt_id, first.best.output, [], first.best.score, text_truncated=first.truncated,
            unit_truncated=trunc, d_text=d_text[0], spectrogram=frames,
        )
    if isinstance(model, SpeechToText):
        first = _text_pass(model.text_decoder, h, h_mask, cfg, text_len)
        return DecodeResult(utt_id, first.best.output, [], first.best.score, text_truncated=first.truncated)
    raise TypeError(f"single-pass decoding does not apply to {type(model).__name__}")


def decode(
    model: S2STModel, feats, cfg: BeamConfig, utt_id: str = "", unit_len: int | None = None, text_len: int | None = None
) -> DecodeResult:
    if isinstance(model, UnitY):
        return two_pass_decode(model, feats, cfg, utt_id, unit_len, text_len)
    return single_pass_decode(model, feats, cfg, utt_id, unit_len, text_len)


# --------------------------------------------------------------------------
# decode files

DECODE_HEADER = "id\ttext\tunits\ttext_score\tunit_score\ttruncated"


def write_decodes(path: str | Path, results: Sequence[DecodeResult]) -> None:
    """Tab-separated: id, text ids, unit ids, text score, unit score, truncation flags."""
    lines = [DECODE_HEADER]
    for r in results:
        lines.append(
            "\t".join(
                [
                    r.id,
                    " ".join(map(str, r.text)),
                    " ".join(map(str, r.units)),
                    repr(float(r.text_score)),
                    repr(float(r.unit_score)),
                    r.flags,
                ]
            )
        )
    Path(path).write_text("\n".join(lines) + "\n")


def read_decodes(path: str | Path) -> list[DecodeResult]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != DECODE_HEADER:
        raise ValueError(f"{path}: not a decode file")
    out = []
    for line in lines[1:]:
        rid, text, units, ts, us, flags = line.split("\t")
        fl = set(flags.split(","))
        out.append(
            DecodeResult(rid, [int(v) for v in text.split()], [int(v) for v in units.split()],
                         float(ts), float(us), "text" in fl, "unit" in fl)
        )
    return out
