"""Finite-difference gradient suites for the numeric ops, blocks and full architectures (64-bit)."""

from __future__ import annotations

import torch

from . import core
from .data import TaskSpec, gen_dataset
from .models import ARCHS, Batch, ModelConfig, build_model
from .nn import BlockConfig, ConformerBlock, ConvModule, DecoderLayer, FeedForward, MultiheadAttention, lengths_to_mask
from .objectives import LossWeights, objective

TINY_TASK = TaskSpec(n_symbols=5, text_vocab=9, unit_vocab=10, frames_per_symbol=4, units_per_subword=2, min_len=2, max_len=3, d_feat=4)
TINY_BLOCK = BlockConfig(d_model=8, d_ff=16, n_head=2, conv_kernel=3, dropout=0.0)


def _rand(*shape: int, seed: int = 0) -> torch.Tensor:
    return torch.randn(*shape, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)


def core_suite() -> dict[str, float]:
    """Max relative error per op or block, gradients taken with respect to inputs."""
    torch.manual_seed(0)
    w = _rand(5, 4, seed=1)
    target = torch.tensor([[1, 3, 0], [2, 2, 4]])
    mask = torch.tensor([[True, True, True], [True, True, False]])
    q = _rand(2, 3, 5, seed=2)
    out = {
        "linear": core.grad_check(lambda x: core.linear(x, w, None, "other").pow(2).sum(), _rand(3, 4)),
        "matmul": core.grad_check(lambda x: core.matmul(x, w).sin().sum(), _rand(2, 5)),
        "xent_label_smoothed": core.grad_check(lambda x: core.xent_label_smoothed(x, 2, 0.2), _rand(6)),
        "sequence_xent": core.grad_check(lambda x: core.sequence_xent(x, target, mask, 0.1), _rand(2, 3, 5)),
        "kl_categorical": core.grad_check(lambda x: core.kl_categorical(x, q, mask), _rand(2, 3, 5, seed=3)),
        "symmetric_kl": core.grad_check(lambda x: core.symmetric_kl(x, q, mask), _rand(2, 3, 5, seed=4)),
        "ctc_loss": core.grad_check(lambda x: core.ctc_loss(torch.log_softmax(x, -1), [0, 1, 1]), _rand(6, 3)),
        "dropout": core.grad_check(
            lambda x: core.dropout(x, 0.3, torch.Generator().manual_seed(5)).pow(2).sum(), _rand(4, 4)
        ),
    }
    cfg = TINY_BLOCK
    valid = lengths_to_mask(torch.tensor([5, 3]), 5)
    blocks = {
        "feed_forward": (FeedForward(cfg.d_model, cfg.d_ff, 0.0, "swish"), lambda m, x: m(x)),
        "attention": (MultiheadAttention(cfg.d_model, cfg.n_head), lambda m, x: m(x, x, None)),
        "conv_module": (ConvModule(cfg.d_model, cfg.conv_kernel, 0.0), lambda m, x: m(x, valid, None)),
        "conformer_block": (ConformerBlock(cfg), lambda m, x: m(x, valid)),
    }
    # random readout weights: a squared-norm readout is nearly constant after a final LayerNorm
    readout = _rand(2, 5, cfg.d_model, seed=9)
    for name, (module, call) in blocks.items():
        module.double()
        out[name] = core.grad_check(lambda x, m=module, c=call: (c(m, x) * readout).sum(), _rand(2, 5, cfg.d_model, seed=6))
    ctx = _rand(2, 4, cfg.d_model, seed=7)
    for mode in ("single", "parallel", "sequential"):
        layer = DecoderLayer(cfg, mode).double()
        contexts = [ctx] if mode == "single" else [ctx, ctx.flip(1)]
        out[f"decoder_layer_{mode}"] = core.grad_check(
            lambda x, l=layer, c=contexts: (l(x, c, [None] * len(c)) * readout[:, :3]).sum(),
            _rand(2, 3, cfg.d_model, seed=8),
        )
    return out


def tiny_model_config(arch: str, **overrides) -> ModelConfig:
    """d_model 8, depth-1 components, vocabularies of :data:`TINY_TASK`."""
    b = TINY_BLOCK
    base = dict(
        arch=arch, d_feat=TINY_TASK.d_feat, d_model=b.d_model, d_ff=b.d_ff, n_head=b.n_head, conv_kernel=b.conv_kernel,
        dropout=0.0, n_enc=1, n_1st=1, n_2nd=1, n_t2u=1, n_aux=1, text_vocab=TINY_TASK.text_vocab,
        unit_vocab=TINY_TASK.unit_vocab, src_vocab=TINY_TASK.src_vocab, d_spec=3, reduction=2, prenet_dim=4,
        w_asr=0.5,
    )
    base.update(overrides)
    return ModelConfig(**base)


def model_suite(archs=ARCHS, step: float = 1e-5, jitter: float = 0.05) -> dict[str, float]:
    """Max relative directional-derivative error over all parameter tensors of each architecture.

    Parameters are jittered by seeded Gaussian noise first, so the check runs at
    a generic point rather than at zero-initialized biases where ReLU kinks sit.
    """
    examples = gen_dataset(TINY_TASK, 2, "gc")
    out = {}
    variants = [(a, {}) for a in archs]
    if "unity" in archs:
        variants += [("unity", {"cross_mode": "parallel"}), ("unity", {"cross_mode": "sequential"})]
    with core.precision("float64"):
        for arch, extra in variants:
            cfg = tiny_model_config(arch, **extra)
            model = build_model(cfg, seed=0)
            gen = torch.Generator().manual_seed(1)
            with torch.no_grad():
                for p in model.parameters():
                    p.add_(jitter * torch.randn(p.shape, generator=gen))
            batch = Batch.from_examples(examples, cfg)
            weights = LossWeights.from_config(cfg)
            params = dict(model.named_parameters())
            errs = core.directional_grad_check(
                lambda: objective(arch, model(batch), batch, weights, cfg.reduction).total, params, step
            )
            name = arch if not extra else f"{arch}_{extra['cross_mode']}"
            out[name] = max(errs.values())
    return out


def run_all() -> dict[str, float]:
    with core.precision("float64"):
        results = {f"op:{k}": v for k, v in core_suite().items()}
    results.update({f"model:{k}": v for k, v in model_suite().items()})
    return results
