"""Training loop, learning-rate schedule, checkpoint averaging and text-decoder pretraining."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from torch import Tensor, nn

from .data import MASK, PAD, Example
from .models import Batch, ModelConfig, S2STModel, freeze_text_decoder_ffn, load_params, read_checkpoint, save_checkpoint
from .nn import Decoder, TransformerEncoder, sinusoidal_positions
from .objectives import COMPONENTS, LossWeights, objective, rdrop_pair_loss
from . import core

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer: Adam with betas (0.9, 0.999), eps 1e-8, no weight decay."""

    lr: float = 1e-3
    warmup: int = 400
    label_smoothing: float = 0.2
    dropout: float = 0.1
    accum: int = 1
    max_steps: int = 3000
    batch_size: int = 32
    seed: int = 0
    rdrop: bool = False
    clip_norm: float = 1.0

    def __post_init__(self) -> None:
        if self.warmup < 1:
            raise ValueError("warmup must be >= 1")
        if self.accum < 1:
            raise ValueError("accumulation factor must be >= 1")
        if self.batch_size < 1 or self.max_steps < 0:
            raise ValueError("batch_size must be >= 1 and max_steps >= 0")


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int) -> None:
        super().__init__(f"loss became non-finite at step {step}")
        self.step = step


def lr_at(step: int, peak: float, warmup: int) -> float:
    """Linear warmup to ``peak`` at ``warmup``, then inverse square-root decay."""
    if step < 1:
        return 0.0
    return peak * min(step / warmup, math.sqrt(warmup / step))


def set_dropout(model: nn.Module, p: float) -> None:
    """Override the dropout rate of every block of ``model``."""
    for module in model.modules():
        if hasattr(module, "p") and isinstance(module.p, float):
            module.p = p


@dataclass
class TrainResult:
    checkpoint: dict[str, Tensor]
    log: list[dict] = field(default_factory=list)
    steps: int = 0
    stopped_early: bool = False


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    while True:
        order = rng.permutation(n)
        for i in range(0, n - batch_size + 1 if n >= batch_size else 1, batch_size):
            yield order[i : i + batch_size].tolist()


def optimize(
    model: nn.Module,
    n_items: int,
    loss_fn: Callable[[list[int], int, torch.Generator | None], tuple[Tensor, dict]],
    cfg: TrainConfig,
    callback: Callable[[int, nn.Module], bool] | None = None,
) -> TrainResult:
    """Generic loop: ``loss_fn(indices, step, rng)`` returns (loss, log row).

    ``callback(step, model)`` runs after each update; returning True stops
    training.
    """
    if n_items < 1:
        raise ValueError("dataset is empty")
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=cfg.lr, betas=(0.9, 0.999), eps=1e-8)
    order_rng = np.random.default_rng([cfg.seed, 11])
    batches = _batches(n_items, min(cfg.batch_size, n_items), order_rng)
    rows: list[dict] = []
    model.train()
    stopped = False
    step = 0
    for step in range(1, cfg.max_steps + 1):
        lr = lr_at(step, cfg.lr, cfg.warmup)
        for group in opt.param_groups:
            group["lr"] = lr
        opt.zero_grad(set_to_none=True)
        acc: dict[str, float] = {}
        for micro in range(cfg.accum):
            rng = None
            if cfg.dropout > 0:
                rng = torch.Generator().manual_seed(cfg.seed * 1_000_003 + step * 97 + micro)
            loss, row = loss_fn(next(batches), step * cfg.accum + micro, rng)
            if not torch.isfinite(loss):
                raise TrainingDiverged(step)
            (loss / cfg.accum).backward()
            for k, v in row.items():
                acc[k] = acc.get(k, 0.0) + v / cfg.accum
        if cfg.clip_norm > 0:
            torch.nn.utils.clip_grad_norm_(params, cfg.clip_norm)
        opt.step()
        rows.append({"step": step, "lr": lr, **acc})
        if callback is not None:
            model.eval()
            stop = callback(step, model)
            model.train()
            if stop:
                stopped = True
                break
    model.eval()
    return TrainResult({k: v.detach().clone() for k, v in model.state_dict().items()}, rows, step, stopped)


def train(
    model: S2STModel,
    dataset: Sequence[Example],
    cfg: TrainConfig,
    callback: Callable[[int, nn.Module], bool] | None = None,
) -> TrainResult:
    """Train ``model`` on ``dataset`` with the objective of its architecture.

    With ``cfg.rdrop`` the R-Drop pair loss is used; its dropout generator
    is seeded from the training seed and step.
    """
    if not dataset:
        raise ValueError("dataset is empty")
    set_dropout(model, cfg.dropout)
    weights = replace(LossWeights.from_config(model.cfg), label_smoothing=cfg.label_smoothing)
    arch = model.cfg.arch

    def loss_fn(idx: list[int], step: int, rng):
        batch = Batch.from_examples([dataset[i] for i in idx], model.cfg)
        if cfg.rdrop:
            seed = cfg.seed * 1_000_003 + step
            report = rdrop_pair_loss(arch, model, batch, weights, seed=seed, dropout=cfg.dropout > 0)
        else:
            report = objective(arch, model(batch, rng), batch, weights, model.cfg.reduction)
        row = {"total": float(report.total.detach()), **{k: report.components[k] for k in COMPONENTS if k in report.components}}
        return report.total, row

    return optimize(model, len(dataset), loss_fn, cfg, callback)


def write_loss_log(path: str | Path, rows: Sequence[dict]) -> None:
    """CSV with step, lr, total and one column per loss component (empty when absent)."""
    header = ["step", "lr", "total", *COMPONENTS]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=header, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(row[k]) if k in row else "") for k in header})


def read_loss_log(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: float(v) for k, v in row.items() if v != ""} for row in csv.DictReader(fh)]


def average_checkpoints(paths: Sequence[str | Path]) -> tuple[dict[str, Tensor], dict]:
    """Element-wise mean of parameters; returns (params, config of the first checkpoint)."""
    if not paths:
        raise ValueError("no checkpoints given")
    total: dict[str, Tensor] | None = None
    config: dict = {}
    for path in paths:
        params, cfg, _ = read_checkpoint(path)
        if total is None:
            total = {k: v.to(torch.float64).clone() for k, v in params.items()}
            config = cfg
            continue
        if set(params) != set(total):
            raise ValueError(f"{path}: parameter names differ")
        for k, v in params.items():
            if v.shape != total[k].shape:
                raise ValueError(f"{path}: shape mismatch for {k!r}")
            total[k] += v.to(torch.float64)
    return {k: (v / len(paths)).to(torch.get_default_dtype()) for k, v in total.items()}, config


# --------------------------------------------------------------------------
# denoising pretraining of the first-pass text decoder


class TextDenoiser(nn.Module):
    """Text encoder plus a decoder shaped exactly like the first-pass text decoder."""

    def __init__(self, cfg: ModelConfig, n_text_enc: int = 2) -> None:
        super().__init__()
        self.cfg = cfg
        blk = cfg.block
        self.embed = nn.Embedding(cfg.text_vocab, cfg.d_model)
        nn.init.normal_(self.embed.weight, std=cfg.d_model ** -0.5)
        self.encoder = TransformerEncoder(n_text_enc, blk)
        self.text_decoder = Decoder(cfg.text_vocab, cfg.n_1st, blk, "single")

    def encode(self, tokens: Tensor, rng=None) -> tuple[Tensor, Tensor]:
        valid = tokens != PAD
        x = self.embed(tokens) * math.sqrt(self.cfg.d_model) + sinusoidal_positions(tokens.shape[1], self.cfg.d_model)
        return self.encoder(core.dropout(x, self.cfg.dropout if rng is not None else 0.0, rng), valid, rng), valid

    def forward(self, noisy: Tensor, targets_in: Tensor, rng=None) -> Tensor:
        h, valid = self.encode(noisy, rng)
        logits, _ = self.text_decoder(targets_in, [h], [valid], rng)
        return logits


def span_mask(tokens: Sequence[int], ratio: float, rng: np.random.Generator, max_span: int = 3) -> list[int]:
    """Replace about ``ratio * len(tokens)`` tokens, in spans of up to ``max_span``, by MASK."""
    if not 0.0 <= ratio < 1.0:
        raise ValueError("mask ratio must lie in [0, 1)")
    out = list(tokens)
    budget = int(round(ratio * len(out)))
    masked = 0
    guard = 0
    while masked < budget and guard < 100:
        guard += 1
        span = int(rng.integers(1, max_span + 1))
        start = int(rng.integers(0, len(out)))
        for i in range(start, min(start + span, len(out))):
            if masked < budget and out[i] != MASK:
                out[i] = MASK
                masked += 1
    return out


def denoise_pretrain_text_decoder(
    corpus: Sequence[Sequence[int]],
    mask_ratio: float,
    cfg: TrainConfig,
    model_cfg: ModelConfig,
    callback: Callable[[int, nn.Module], bool] | None = None,
    n_text_enc: int = 2,
) -> tuple[TextDenoiser, TrainResult]:
    """Train span-masked text -> original text; the decoder exports into a UnitY first pass."""
    if not 0.0 <= mask_ratio < 1.0:
        raise ValueError("mask ratio must lie in [0, 1)")
    torch_state = torch.random.get_rng_state()
    torch.manual_seed(cfg.seed)
    try:
        model = TextDenoiser(model_cfg, n_text_enc)
    finally:
        torch.random.set_rng_state(torch_state)
    set_dropout(model, cfg.dropout)
    noise_rng = np.random.default_rng([cfg.seed, 21])

    def loss_fn(idx: list[int], step: int, rng):
        seqs = [list(corpus[i]) for i in idx]
        noisy = Batch.teacher([span_mask(s, mask_ratio, noise_rng) for s in seqs])[1]
        y_in, y_out, y_mask = Batch.teacher(seqs)
        logits = model(noisy, y_in, rng)
        loss = core.sequence_xent(logits, y_out, y_mask, cfg.label_smoothing)
        return loss, {"total": float(loss.detach())}

    result = optimize(model, len(corpus), loss_fn, cfg, callback)
    return model, result


def denoise_accuracy(model: TextDenoiser, corpus: Sequence[Sequence[int]], mask_ratio: float = 0.0, seed: int = 0) -> float:
    """Teacher-forced token accuracy of the denoiser on ``corpus``."""
    rng = np.random.default_rng(seed)
    seqs = [list(s) for s in corpus]
    noisy = Batch.teacher([span_mask(s, mask_ratio, rng) for s in seqs])[1]
    y_in, y_out, y_mask = Batch.teacher(seqs)
    with torch.no_grad():
        pred = model(noisy, y_in).argmax(-1)
    return float(((pred == y_out) & y_mask).sum() / y_mask.sum())


def export_text_decoder(model: nn.Module, path: str | Path) -> None:
    """Save the ``text_decoder`` sub-module parameters as a checkpoint."""
    dec = model.text_decoder
    cfg = model.cfg.to_dict() if hasattr(model, "cfg") else {}
    save_checkpoint(path, dict(dec.state_dict()), cfg, {"component": "text_decoder"})


def load_text_decoder(model: S2STModel, path: str | Path, freeze_ffn: bool = True) -> S2STModel:
    """Load an exported text decoder into ``model.text_decoder`` and optionally freeze its FFNs."""
    params, _, extra = read_checkpoint(path)
    if extra.get("component") != "text_decoder":
        raise ValueError(f"{path}: not an exported text decoder")
    load_params(model.text_decoder, params)
    return freeze_text_decoder_ffn(model) if freeze_ffn else model
