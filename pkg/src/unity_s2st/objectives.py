"""Training objectives and the R-Drop pair loss.

Cross entropies are token means per sequence averaged over the batch. Under
R-Drop every likelihood component is reported as the sum over the two
duplicated passes, so ``LossReport.total`` is always the plain weighted sum
of its components (see :meth:`LossReport.recompute`).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import Tensor

from . import core
from .models import Batch, ForwardOutputs, ModelConfig, S2STModel

COMPONENTS = ("s2u", "s2t", "asr", "ctc", "kl_s2u", "kl_s2t", "kl_asr", "l1", "l2", "eos")
KINDS = ("unity", "s2ut", "s2spect", "s2spect2", "s2tt", "asr")


@dataclass(frozen=True)
class LossWeights:
    w_s2t: float = 1.0
    w_ctc: float = 1.6
    w_asr: float = 0.0
    alpha: float = 1.0
    beta: float = 3.0
    gamma: float = 1.0
    label_smoothing: float = 0.2

    @classmethod
    def from_config(cls, cfg: ModelConfig) -> "LossWeights":
        return cls(cfg.w_s2t, cfg.w_ctc, cfg.w_asr, cfg.alpha, cfg.beta, cfg.gamma, cfg.label_smoothing)


@dataclass
class LossReport:
    kind: str
    total: Tensor
    components: dict[str, float] = field(default_factory=dict)
    weights: LossWeights = field(default_factory=LossWeights)

    def __getattr__(self, name: str):
        if name in COMPONENTS:
            return self.components.get(name)
        raise AttributeError(name)

    @property
    def value(self) -> float:
        return float(self.total.detach())

    def recompute(self) -> float:
        """Weighted sum of the present components under this report's objective."""
        return float(combine(self.kind, self.components, self.weights))

    def as_row(self) -> dict[str, float]:
        return {"total": self.value, **{k: self.components.get(k, float("nan")) for k in COMPONENTS}}


def _xent(logits: Tensor, seqs: list[list[int]], eps: float) -> Tensor:
    _, target, tmask = Batch.teacher(seqs)
    if logits.shape[:2] != target.shape:
        raise ValueError(f"logits cover {tuple(logits.shape[:2])} positions, targets {tuple(target.shape)}")
    return core.sequence_xent(logits, target, tmask, eps)


def ctc_term(out: ForwardOutputs, text: list[list[int]]) -> Tensor:
    """CTC of the text over the unit-decoder states (blank = last class).

    Each sequence loss is divided by its target length, matching the token
    means of the cross-entropy terms, then averaged over the batch.
    """
    lprobs = torch.log_softmax(out.ctc_logits, dim=-1)
    lengths = out.unit_mask.sum(1)
    target_lens = torch.tensor([len(t) for t in text], dtype=lprobs.dtype)
    return (core.ctc_loss_batch(lprobs, lengths, text) / target_lens).mean()


def spectrogram_terms(pred: Tensor, eos_logits: Tensor, target: Tensor, step_mask: Tensor, r: int) -> dict[str, Tensor]:
    """Per-element mean L1, L2 and per-step EOS binary cross entropy, each averaged per sequence then over the batch.

    pred/target: (B, steps * r, d); eos_logits, step_mask: (B, steps). EOS is
    positive only at the last valid step of each sequence.
    """
    if pred.shape != target.shape:
        raise ValueError(f"prediction {tuple(pred.shape)} vs target {tuple(target.shape)}")
    b, n, d = pred.shape
    if eos_logits.shape != (b, n // r):
        raise ValueError("EOS logits do not match the number of decoder steps")
    frame_mask = step_mask.repeat_interleave(r, dim=1)[..., None].to(pred.dtype)
    elems = frame_mask.sum((1, 2)) * d
    diff = pred - target
    l1 = ((diff.abs() * frame_mask).sum((1, 2)) / elems).mean()
    l2 = ((diff.pow(2) * frame_mask).sum((1, 2)) / elems).mean()
    steps = step_mask.sum(1)
    eos_target = torch.zeros_like(eos_logits)
    eos_target[torch.arange(b), steps - 1] = 1.0
    bce = F.binary_cross_entropy_with_logits(eos_logits, eos_target, reduction="none")
    eos = ((bce * step_mask).sum(1) / steps).mean()
    return {"l1": l1, "l2": l2, "eos": eos}


def combine(kind: str, terms: dict, w: LossWeights):
    """Weighted total of loss components for objective ``kind``; absent components count as zero."""
    get = lambda k: terms.get(k, 0.0)  # noqa: E731
    aux = w.w_asr * (get("asr") + w.gamma * get("kl_asr"))
    if kind in ("unity", "s2ut"):
        total = get("s2u") + w.alpha * get("kl_s2u") + w.w_s2t * (get("s2t") + w.beta * get("kl_s2t")) + aux
        return total + w.w_ctc * get("ctc") if kind == "s2ut" else total
    if kind in ("s2spect", "s2spect2"):
        return get("l1") + get("l2") + get("eos") + w.w_s2t * (get("s2t") + w.beta * get("kl_s2t")) + aux
    if kind == "s2tt":
        return get("s2t") + w.beta * get("kl_s2t")
    return get("asr") + w.gamma * get("kl_asr")


def _report(kind: str, terms: dict[str, Tensor], weights: LossWeights) -> LossReport:
    total = combine(kind, terms, weights)
    if not isinstance(total, Tensor):
        total = torch.tensor(float(total))
    return LossReport(kind, total, {k: float(v.detach()) for k, v in terms.items()}, weights)


def _terms(kind: str, out: ForwardOutputs, batch: Batch, weights: LossWeights, r: int) -> dict[str, Tensor]:
    eps = weights.label_smoothing
    terms: dict[str, Tensor] = {}
    if kind in ("unity", "s2ut"):
        terms["s2u"] = _xent(out.unit_logits, batch.units, eps)
    if kind == "s2ut" and weights.w_ctc:
        terms["ctc"] = ctc_term(out, batch.text)
    if kind in ("s2spect", "s2spect2"):
        terms.update(spectrogram_terms(out.spec_pred, out.eos_logits, batch.spec, out.spec_mask, r))
    if out.text_logits is not None and kind != "asr":
        terms["s2t"] = _xent(out.text_logits, batch.text, eps)
    if out.asr_logits is not None:
        terms["asr"] = _xent(out.asr_logits, batch.source, eps)
    return terms


def objective(kind: str, out: ForwardOutputs, batch: Batch, weights: LossWeights, r: int = 1) -> LossReport:
    """Single-pass objective of architecture ``kind`` on teacher-forced outputs."""
    if kind not in KINDS:
        raise ValueError(f"unknown objective {kind!r}")
    return _report(kind, _terms(kind, out, batch, weights, r), weights)


def unity_loss(out: ForwardOutputs, batch: Batch, weights: LossWeights) -> LossReport:
    """``L_s2u + w_s2t * L_s2t`` (+ ``w_asr * L_asr`` when an ASR head is present)."""
    return objective("unity", out, batch, weights)


def s2ut_loss(out: ForwardOutputs, batch: Batch, weights: LossWeights) -> LossReport:
    return objective("s2ut", out, batch, weights)


def s2spect_loss(out: ForwardOutputs, batch: Batch, weights: LossWeights, r: int, kind: str = "s2spect") -> LossReport:
    """``L1 + L2 + L_eos + w_s2t * L_s2t + w_asr * L_asr``."""
    return objective(kind, out, batch, weights, r)


def single_pass_loss(model: S2STModel, batch: Batch, weights: LossWeights | None = None, rng=None) -> LossReport:
    """Forward once and apply the objective of the model's architecture."""
    weights = weights or LossWeights.from_config(model.cfg)
    return objective(model.cfg.arch, model(batch, rng), batch, weights, model.cfg.reduction)


def _half(t: Tensor | None, i: int, n: int) -> Tensor | None:
    return None if t is None else t[i * n : (i + 1) * n]


def _split(out: ForwardOutputs, n: int) -> tuple[ForwardOutputs, ForwardOutputs]:
    names = [f for f in out.__dataclass_fields__ if f != "extras"]
    return tuple(ForwardOutputs(**{f: _half(getattr(out, f), i, n) for f in names}) for i in range(2))


def rdrop_pair_loss(kind: str, model: S2STModel, batch: Batch, weights: LossWeights | None = None, seed: int = 0,
                    dropout: bool = True) -> LossReport:
    """R-Drop objective on a physically duplicated batch.

    Both copies run in one forward call; their dropout masks are independent
    draws from a generator seeded with ``seed``. KL terms use the symmetric
    form ``0.5 * (KL(P1||P2) + KL(P2||P1))`` and cover discrete heads only.
    With ``dropout=False`` no masks are drawn.
    """
    if kind == "s2spect":
        raise ValueError("R-Drop is not defined for a continuous (spectrogram) primary head")
    if kind != model.cfg.arch:
        raise ValueError(f"objective {kind!r} does not match model architecture {model.cfg.arch!r}")
    weights = weights or LossWeights.from_config(model.cfg)
    rng = torch.Generator().manual_seed(seed) if dropout else None
    o1, o2 = _split(model(batch.repeat(2), rng), batch.size)
    t1 = _terms(kind, o1, batch, weights, model.cfg.reduction)
    t2 = _terms(kind, o2, batch, weights, model.cfg.reduction)
    terms = {k: t1[k] + t2[k] for k in t1}
    if kind in ("unity", "s2ut"):
        terms["kl_s2u"] = core.symmetric_kl(o1.unit_logits, o2.unit_logits, o1.unit_mask)
    if o1.text_logits is not None and kind != "asr":
        terms["kl_s2t"] = core.symmetric_kl(o1.text_logits, o2.text_logits, o1.text_mask)
    if o1.asr_logits is not None:
        terms["kl_asr"] = core.symmetric_kl(o1.asr_logits, o2.asr_logits, o1.asr_mask)
    return _report(kind, terms, weights)
