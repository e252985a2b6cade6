"""Numeric core: precision mode, multiply-add counting, gradient checking and losses.

Autograd itself is delegated to PyTorch. Everything the models need on top of
it (counted linear maps, seeded dropout, label-smoothed cross entropy,
categorical KL, log-space CTC) lives here.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import torch
import torch.nn.functional as F
from torch import Tensor

CATEGORIES = ("attention", "feed_forward", "projection", "other")


# --------------------------------------------------------------------------
# precision mode


_PRECISIONS = {"float32": torch.float32, "float64": torch.float64}


def set_precision(name: str) -> None:
    """Select the global engine precision: ``float64`` (test) or ``float32`` (train)."""
    if name not in _PRECISIONS:
        raise ValueError(f"unknown precision {name!r}, expected one of {sorted(_PRECISIONS)}")
    torch.set_default_dtype(_PRECISIONS[name])


def get_precision() -> str:
    return "float64" if torch.get_default_dtype() == torch.float64 else "float32"


@contextlib.contextmanager
def precision(name: str) -> Iterator[None]:
    previous = get_precision()
    set_precision(name)
    try:
        yield
    finally:
        set_precision(previous)


# --------------------------------------------------------------------------
# multiply-add counter


@dataclass
class OpCounter:
    """Multiply-add tally with a per-category breakdown."""

    counts: dict[str, int] = field(default_factory=lambda: {c: 0 for c in CATEGORIES})

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def add(self, n: int, category: str = "other") -> None:
        if n < 0:
            raise ValueError("multiply-add count must be non-negative")
        if category not in self.counts:
            raise ValueError(f"unknown category {category!r}")
        self.counts[category] += int(n)

    def reset(self) -> None:
        for c in self.counts:
            self.counts[c] = 0


_COUNTERS: list[OpCounter] = []


@contextlib.contextmanager
def count_ops(counter: OpCounter | None = None) -> Iterator[OpCounter]:
    """Open a counting scope; every counted op inside adds to ``counter``.

    Scopes nest: an op is added to every active counter.
    """
    counter = OpCounter() if counter is None else counter
    _COUNTERS.append(counter)
    try:
        yield counter
    finally:
        _COUNTERS.remove(counter)


def record(n: int, category: str) -> None:
    for counter in _COUNTERS:
        counter.add(n, category)


def counting() -> bool:
    return bool(_COUNTERS)


def flops_linear_expected(m: int, k: int, n: int) -> int:
    """Multiply-adds of an (m x k) @ (k x n) product."""
    return m * k * n


def matmul(a: Tensor, b: Tensor, category: str = "other") -> Tensor:
    """Batched matrix product that reports ``prod(batch) * m * k * n`` multiply-adds."""
    out = torch.matmul(a, b)
    if _COUNTERS:
        k = a.shape[-1]
        record(out.numel() * k, category)
    return out


def linear(x: Tensor, weight: Tensor, bias: Tensor | None, category: str) -> Tensor:
    out = F.linear(x, weight, bias)
    if _COUNTERS:
        record(out.numel() * weight.shape[1], category)
    return out


def dropout(x: Tensor, p: float, rng: torch.Generator | None) -> Tensor:
    """Inverted dropout drawing its mask from ``rng``; identity when ``rng`` is None or p == 0."""
    if rng is None or p <= 0.0:
        return x
    keep = torch.rand(x.shape, generator=rng, dtype=x.dtype) >= p
    return x * keep / (1.0 - p)


# --------------------------------------------------------------------------
# gradient checking


class NonFiniteError(ValueError):
    pass


def grad_check(fn: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-6) -> float:
    """Max relative error between autograd and central differences of scalar ``fn`` at ``x``.

    The relative error of one entry is ``|a - c| / max(|a|, |c|, 1e-8)``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x = x.detach().clone().requires_grad_(True)
    out = fn(x)
    if out.numel() != 1:
        out = out.sum()
    if not torch.isfinite(out).all():
        raise NonFiniteError("non-finite forward")
    (analytic,) = torch.autograd.grad(out, x, allow_unused=True)
    if analytic is None:
        analytic = torch.zeros_like(x)
    analytic = analytic.detach().reshape(-1)

    base = x.detach().clone().reshape(-1)
    numeric = torch.empty_like(base)
    with torch.no_grad():
        for i in range(base.numel()):
            orig = base[i].item()
            base[i] = orig + step
            f_plus = fn(base.view_as(x)).sum().item()
            base[i] = orig - step
            f_minus = fn(base.view_as(x)).sum().item()
            base[i] = orig
            if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                raise NonFiniteError("non-finite forward")
            numeric[i] = (f_plus - f_minus) / (2 * step)
    denom = torch.clamp(torch.maximum(analytic.abs(), numeric.abs()), min=1e-8)
    return float(((analytic - numeric).abs() / denom).max()) if base.numel() else 0.0


def directional_grad_check(
    fn: Callable[[], Tensor], params: dict[str, Tensor], step: float = 1e-6, seed: int = 0
) -> dict[str, float]:
    """Per-tensor relative error of the directional derivative along a random unit direction.

    ``fn`` evaluates a scalar from the current values of ``params`` (leaf
    tensors, perturbed in place). Returns ``{name: relative error}``.
    """
    gen = torch.Generator().manual_seed(seed)
    out = fn()
    if not torch.isfinite(out).all():
        raise NonFiniteError("non-finite forward")
    names = list(params)
    grads = torch.autograd.grad(out, [params[n] for n in names], allow_unused=True)
    errors = {}
    with torch.no_grad():
        for name, grad in zip(names, grads):
            p = params[name]
            v = torch.randn(p.shape, generator=gen, dtype=p.dtype)
            v /= v.norm()
            analytic = float((grad * v).sum()) if grad is not None else 0.0
            p.add_(step * v)
            f_plus = float(fn())
            p.sub_(2 * step * v)
            f_minus = float(fn())
            p.add_(step * v)
            if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                raise NonFiniteError("non-finite forward")
            numeric = (f_plus - f_minus) / (2 * step)
            errors[name] = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
    return errors


# --------------------------------------------------------------------------
# losses


def xent_label_smoothed(logits: Tensor, target: int | Tensor, eps: float) -> Tensor:
    """``(1 - eps) * NLL(target) + eps * mean_c NLL(c)`` along the last axis.

    ``target`` is a class id (scalar logits row) or an integer tensor matching
    ``logits.shape[:-1]``; the result has that leading shape.
    """
    if not 0.0 <= eps < 1.0:
        raise ValueError("label smoothing must lie in [0, 1)")
    vocab = logits.shape[-1]
    if vocab < 2:
        raise ValueError("need at least two classes")
    target = torch.as_tensor(target, dtype=torch.long)
    if target.numel() and (int(target.min()) < 0 or int(target.max()) >= vocab):
        raise ValueError(f"target out of range [0, {vocab})")
    lprobs = torch.log_softmax(logits, dim=-1)
    nll = -lprobs.gather(-1, target.unsqueeze(-1)).squeeze(-1)
    smooth = -lprobs.mean(dim=-1)
    return (1.0 - eps) * nll + eps * smooth


def sequence_xent(logits: Tensor, target: Tensor, mask: Tensor, eps: float) -> Tensor:
    """Token-mean smoothed cross entropy per sequence, averaged over the batch.

    logits: (B, L, V); target, mask: (B, L).
    """
    safe = target.masked_fill(~mask, 0)
    tok = xent_label_smoothed(logits, safe, eps) * mask
    return (tok.sum(1) / mask.sum(1)).mean()


def kl_categorical(p_logits: Tensor, q_logits: Tensor, mask: Tensor | None = None) -> Tensor:
    """``D_kl(softmax(p) || softmax(q))`` summed over positions and divided by length.

    Inputs are (..., L, V) or (L, V); with a batch axis the per-sequence values are
    averaged. ``mask`` (..., L) marks valid positions.
    """
    if p_logits.shape != q_logits.shape:
        raise ValueError(f"shape mismatch {tuple(p_logits.shape)} vs {tuple(q_logits.shape)}")
    lp = torch.log_softmax(p_logits, dim=-1)
    lq = torch.log_softmax(q_logits, dim=-1)
    per_pos = (lp.exp() * (lp - lq)).sum(-1)
    if per_pos.dim() == 0:
        return per_pos
    if mask is None:
        mask = torch.ones_like(per_pos, dtype=torch.bool)
    per_seq = (per_pos * mask).sum(-1) / mask.sum(-1)
    return per_seq.mean() if per_seq.dim() else per_seq


def symmetric_kl(p_logits: Tensor, q_logits: Tensor, mask: Tensor | None = None) -> Tensor:
    return 0.5 * (kl_categorical(p_logits, q_logits, mask) + kl_categorical(q_logits, p_logits, mask))


def ctc_min_frames(target: Sequence[int]) -> int:
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


# finite stand-in for log(0) in the CTC recursion
CTC_NEG = -1e30


def ctc_loss_batch(
    log_probs: Tensor, lengths: Tensor, targets: Sequence[Sequence[int]]
) -> Tensor:
    """Per-sequence CTC negative log-likelihood, blank = last class.

    log_probs: (B, T, V+1) log-softmax outputs; lengths: (B,) valid frames.
    Impossible paths carry ``CTC_NEG`` instead of -inf so that gradients
    through ``logsumexp`` stay finite.
    """
    batch, _, classes = log_probs.shape
    blank = classes - 1
    for b, tgt in enumerate(targets):
        if ctc_min_frames(tgt) > int(lengths[b]):
            raise ValueError("target too long")
        if any(t < 0 or t >= blank for t in tgt):
            raise ValueError("target id out of range")
    s_max = 2 * max(len(t) for t in targets) + 1
    ext = torch.full((batch, s_max), blank, dtype=torch.long)
    s_len = torch.empty(batch, dtype=torch.long)
    skip = torch.zeros(batch, s_max, dtype=torch.bool)
    for b, tgt in enumerate(targets):
        s_len[b] = 2 * len(tgt) + 1
        for j, t in enumerate(tgt):
            ext[b, 2 * j + 1] = t
            if j > 0 and tgt[j - 1] != t:
                skip[b, 2 * j + 1] = True
    neg_inf = torch.tensor(CTC_NEG, dtype=log_probs.dtype)
    valid_s = torch.arange(s_max).unsqueeze(0) < s_len.unsqueeze(1)

    emit = log_probs.gather(2, ext.unsqueeze(1).expand(-1, log_probs.shape[1], -1))
    alpha = torch.full((batch, s_max), CTC_NEG, dtype=log_probs.dtype)
    alpha[:, 0] = emit[:, 0, 0]
    if s_max > 1:
        alpha[:, 1] = torch.where(s_len > 1, emit[:, 0, 1], neg_inf)
    finals = [None] * batch
    for t in range(1, log_probs.shape[1]):
        prev1 = F.pad(alpha, (1, 0), value=CTC_NEG)[:, :s_max]
        prev2 = F.pad(alpha, (2, 0), value=CTC_NEG)[:, :s_max]
        prev2 = torch.where(skip, prev2, neg_inf)
        stacked = torch.stack([alpha, prev1, prev2])
        alpha = torch.logsumexp(stacked, dim=0) + emit[:, t]
        alpha = torch.where(valid_s, alpha, neg_inf)
        for b in range(batch):
            if int(lengths[b]) == t + 1:
                finals[b] = alpha[b]
    losses = []
    for b in range(batch):
        a = finals[b] if finals[b] is not None else alpha[b]
        if int(lengths[b]) == 1:
            a = _first_alpha(emit[b, 0], int(s_len[b]))
        end = int(s_len[b])
        tail = a[end - 2:end] if end >= 2 else a[:end]
        losses.append(-torch.logsumexp(tail, dim=0))
    return torch.stack(losses)


def _first_alpha(emit0: Tensor, s_len: int) -> Tensor:
    alpha = torch.full_like(emit0, CTC_NEG)
    alpha[0] = emit0[0]
    if s_len > 1:
        alpha[1] = emit0[1]
    return alpha


def ctc_loss(log_probs: Tensor, target: Sequence[int]) -> Tensor:
    """CTC negative log-likelihood of one sequence; ``log_probs`` is (T, V+1)."""
    lengths = torch.tensor([log_probs.shape[0]])
    return ctc_loss_batch(log_probs.unsqueeze(0), lengths, [list(target)])[0]
