import itertools
import math

import pytest
import torch

from unity_s2st.data import BOS, EOS
from unity_s2st.models import build_model
from unity_s2st.search import (
    OUTPUT_BANNED,
    BeamConfig,
    DecodeResult,
    DecoderScorer,
    beam_search,
    decode,
    read_decodes,
    spectrogram_greedy,
    two_pass_decode,
    write_decodes,
)
from tests.tiny import EXAMPLES, tiny


class TableScorer:
    """Prefix-dependent log-probabilities drawn from a seeded table; token ``eos`` ends a sequence."""

    def __init__(self, vocab: int, seed: int, sharpness: float = 2.0) -> None:
        self.vocab = vocab
        self.seed = seed
        self.sharpness = sharpness

    def lprobs(self, prefix: tuple[int, ...]) -> torch.Tensor:
        gen = torch.Generator().manual_seed(hash((self.seed,) + prefix) % (2**31))
        return torch.log_softmax(self.sharpness * torch.randn(self.vocab, generator=gen, dtype=torch.float64), -1)

    def start(self):
        return {"prefixes": None}

    def step(self, prev, state):
        if state["prefixes"] is None:
            prefixes = [()]  # first step consumes BOS
        else:
            prefixes = [p + (int(t),) for p, t in zip(state["prefixes"], prev)]
        state["prefixes"] = prefixes
        return torch.stack([self.lprobs(p) for p in prefixes]), torch.zeros(len(prefixes), 1)

    def reorder(self, state, index):
        state["prefixes"] = [state["prefixes"][i] for i in index.tolist()]

    def sequence_score(self, tokens: tuple[int, ...]) -> float:
        return sum(float(self.lprobs(tokens[:i])[t]) for i, t in enumerate(tokens))


def _exhaustive_best(scorer: TableScorer, eos: int, max_len: int) -> tuple[tuple[int, ...], float]:
    symbols = [t for t in range(scorer.vocab) if t != eos]
    best = None
    for n in range(max_len):
        for body in itertools.product(symbols, repeat=n):
            seq = body + (eos,)
            s = scorer.sequence_score(seq)
            if best is None or s > best[1] or (s == best[1] and seq < best[0]):
                best = (seq, s)
    return best


@pytest.mark.parametrize("seed", range(8))
def test_exhaustive_oracle_v3_len3(seed):
    # three regular symbols plus EOS; beam large enough to hold every prefix
    scorer = TableScorer(4, seed)
    res = beam_search(scorer, 27, 3, 0.0, eos=3, banned=())
    seq, score = _exhaustive_best(scorer, 3, 3)
    assert not res.truncated
    assert tuple(res.best.tokens) == seq
    assert res.best.score == pytest.approx(score, abs=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_beam_one_is_greedy(seed):
    scorer = TableScorer(5, seed, sharpness=1.0)
    res = beam_search(scorer, 1, 6, 0.0, eos=4, banned=())
    prefix: tuple[int, ...] = ()
    while len(prefix) < 6:
        tok = int(scorer.lprobs(prefix).argmax())
        prefix += (tok,)
        if tok == 4:
            break
    assert tuple(res.best.tokens) == prefix


@pytest.mark.parametrize("seed", range(10))
def test_wider_beam_scores_at_least_greedy(seed):
    scorer = TableScorer(5, seed, sharpness=1.0)
    b1 = beam_search(scorer, 1, 5, 0.0, eos=4, banned=())
    b5 = beam_search(scorer, 5, 5, 0.0, eos=4, banned=())
    assert b5.best.score >= b1.best.score


def test_hypothesis_invariants():
    scorer = TableScorer(5, 3)
    res = beam_search(scorer, 4, 5, 1.0, eos=4, banned=())
    for h in res.hypotheses:
        assert len(h.states) == len(h.tokens) == len(h.step_scores)
        assert h.score == pytest.approx(sum(h.step_scores), abs=1e-12)
        assert h.score == pytest.approx(scorer.sequence_score(tuple(h.tokens)), abs=1e-12)
    norm = [h.normalized(1.0) for h in res.hypotheses]
    assert norm == sorted(norm, reverse=True)


def test_truncation_flag():
    scorer = TableScorer(4, 0)
    res = beam_search(scorer, 3, 4, 0.0, eos=3, banned=(3,))
    assert res.truncated
    assert len(res.best.tokens) == 4 and not res.best.finished
    assert res.best.output == res.best.tokens


def test_ties_broken_lexicographically():
    class Uniform(TableScorer):
        def lprobs(self, prefix):
            return torch.full((self.vocab,), -math.log(self.vocab), dtype=torch.float64)

    res = beam_search(Uniform(4, 0), 3, 3, 0.0, eos=0, banned=())
    assert res.best.tokens == [0]
    res = beam_search(Uniform(4, 0), 3, 2, 0.0, eos=3, banned=(3,))
    assert [h.tokens for h in res.hypotheses] == [[0, 0], [0, 1], [0, 2]]


def test_bad_arguments():
    with pytest.raises(ValueError):
        beam_search(TableScorer(3, 0), 0, 3)
    with pytest.raises(ValueError):
        beam_search(TableScorer(3, 0), 1, 0)
    with pytest.raises(ValueError):
        BeamConfig(b2=0)
    with pytest.raises(ValueError):
        BeamConfig(max_text_len=0)


# --------------------------------------------------------------------------
# model-level decoding


@pytest.fixture
def unity64(f64):
    return build_model(tiny("unity", cross_mode="parallel")).double().eval()


def test_decoder_scorer_beam_one_matches_full_forward_argmax(unity64):
    ex = EXAMPLES[0]
    h, m = unity64.encoder(torch.as_tensor(ex.features).unsqueeze(0))
    res = beam_search(DecoderScorer(unity64.text_decoder, [h], [m]), 1, 6, 0.0, banned=OUTPUT_BANNED)
    tokens = [BOS]
    for _ in range(6):
        logits, _ = unity64.text_decoder(torch.tensor([tokens]), [h], [m])
        last = logits[0, -1].clone()
        last[list(OUTPUT_BANNED)] = -math.inf
        tokens.append(int(last.argmax()))
        if tokens[-1] == EOS:
            break
    assert res.best.tokens == tokens[1:]


@pytest.mark.parametrize("cross_mode", ["none", "parallel", "sequential"])
def test_cached_text_states_match_recompute(f64, cross_mode):
    model = build_model(tiny("unity", cross_mode=cross_mode)).double().eval()
    for ex in EXAMPLES[:3]:
        res = two_pass_decode(model, ex.features, BeamConfig(b1=4, max_text_len=6, max_unit_len=8))
        n = res.d_text.shape[0]
        tokens = res.text + ([EOS] if not res.text_truncated else [])
        assert n == len(tokens)
        inputs = torch.tensor([[BOS] + tokens[:-1]])
        h, m = model.encoder(torch.as_tensor(ex.features).unsqueeze(0))
        _, states = model.text_decoder(inputs, [h], [m])
        assert (states[0] - res.d_text).abs().max() < 1e-10


def test_cached_text_states_match_recompute_float32():
    model = build_model(tiny("unity")).eval()
    ex = EXAMPLES[1]
    res = two_pass_decode(model, ex.features, BeamConfig(b1=3, max_text_len=5, max_unit_len=8))
    tokens = res.text + ([EOS] if not res.text_truncated else [])
    h, m = model.encoder(torch.as_tensor(ex.features, dtype=torch.float32).unsqueeze(0))
    _, states = model.text_decoder(torch.tensor([[BOS] + tokens[:-1]]), [h], [m])
    assert (states[0] - res.d_text).abs().max() < 1e-5


def test_forced_lengths():
    model = build_model(tiny("unity")).eval()
    res = two_pass_decode(model, EXAMPLES[0].features, BeamConfig(b1=2), unit_len=7, text_len=3)
    assert len(res.text) == 3 and len(res.units) == 7
    assert not res.text_truncated and not res.unit_truncated


def test_decoding_deterministic_and_banned_symbols():
    model = build_model(tiny("s2ut")).eval()
    cfg = BeamConfig(b1=3, max_unit_len=12)
    a = decode(model, EXAMPLES[0].features, cfg)
    b = decode(model, EXAMPLES[0].features, cfg)
    assert a.units == b.units and a.unit_score == b.unit_score
    assert not set(a.units) & set(OUTPUT_BANNED)


@pytest.mark.parametrize("arch", ["s2spect", "s2spect2", "s2tt", "asr"])
def test_single_pass_decoders_run(arch):
    model = build_model(tiny(arch)).eval()
    res = decode(model, EXAMPLES[0].features, BeamConfig(b1=2, max_text_len=4, max_unit_len=5))
    if arch.startswith("s2spect"):
        assert res.spectrogram.shape[1] == 3 and res.spectrogram.shape[0] % model.cfg.reduction == 0
    else:
        assert res.spectrogram is None


def test_spectrogram_eos_threshold_stops_at_first_crossing():
    class Fixed:
        d_spec = 2

        def __init__(self, probs):
            self.probs = probs

        def init_state(self, contexts, masks):
            return {"t": 0}

        def step(self, prev, state):
            p = self.probs[state["t"]]
            state["t"] += 1
            return torch.full((1, 3, 2), float(state["t"])), torch.tensor([math.log(p / (1 - p))])

    frames, trunc = spectrogram_greedy(Fixed([0.1, 0.4, 0.6, 0.9]), [], [], 10, 0.5)
    assert not trunc and frames.shape == (9, 2)
    frames, trunc = spectrogram_greedy(Fixed([0.1, 0.2, 0.3]), [], [], 3, 0.5)
    assert trunc and frames.shape == (9, 2)


def test_decode_file_roundtrip(tmp_path):
    rows = [
        DecodeResult("u1", [4, 5], [6, 7, 8], -1.5, -2.25, False, True),
        DecodeResult("u2", [], [9], float("nan"), -0.5),
    ]
    path = tmp_path / "d.tsv"
    write_decodes(path, rows)
    back = read_decodes(path)
    assert [(r.id, r.text, r.units, r.text_truncated, r.unit_truncated) for r in back] == [
        ("u1", [4, 5], [6, 7, 8], False, True),
        ("u2", [], [9], False, False),
    ]
    assert back[0].unit_score == -2.25 and math.isnan(back[1].text_score)
    assert path.read_text().splitlines()[1].split("\t")[-1] == "unit"
