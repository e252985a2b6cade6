"""Encoder/decoder building blocks.

All blocks are pre-norm, use fixed sinusoidal positions, and take an optional
``rng`` generator on every forward call; dropout is active only when one is
passed. Masks are boolean with True marking valid positions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from . import core

CROSS_MODES = ("none", "single", "parallel", "sequential")


@dataclass(frozen=True)
class BlockConfig:
    d_model: int = 64
    d_ff: int = 128
    n_head: int = 4
    conv_kernel: int = 7
    dropout: float = 0.1

    def __post_init__(self) -> None:
        if min(self.d_model, self.d_ff, self.n_head, self.conv_kernel) <= 0:
            raise ValueError("block dimensions must be positive")
        if self.d_model % self.n_head:
            raise ValueError("d_model must be divisible by n_head")
        if self.conv_kernel % 2 == 0:
            raise ValueError("conv_kernel must be odd")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")


def sinusoidal_positions(length: int, dim: int, offset: int = 0) -> Tensor:
    pos = torch.arange(offset, offset + length, dtype=torch.get_default_dtype()).unsqueeze(1)
    half = torch.arange(0, dim, 2, dtype=torch.get_default_dtype())
    freq = torch.exp(-math.log(10000.0) * half / dim)
    pe = torch.zeros(length, dim)
    pe[:, 0::2] = torch.sin(pos * freq)
    pe[:, 1::2] = torch.cos(pos * freq)[:, : dim // 2]
    return pe


class Linear(nn.Module):
    """Affine map whose multiply-adds are reported under a fixed category."""

    def __init__(self, d_in: int, d_out: int, category: str, bias: bool = True) -> None:
        super().__init__()
        self.category = category
        self.weight = nn.Parameter(torch.empty(d_out, d_in))
        self.bias = nn.Parameter(torch.zeros(d_out)) if bias else None
        nn.init.xavier_uniform_(self.weight)

    def forward(self, x: Tensor) -> Tensor:
        return core.linear(x, self.weight, self.bias, self.category)


class FeedForward(nn.Module):
    def __init__(self, d_model: int, d_ff: int, dropout: float, activation: str = "relu") -> None:
        super().__init__()
        self.fc1 = Linear(d_model, d_ff, "feed_forward")
        self.fc2 = Linear(d_ff, d_model, "feed_forward")
        self.act = F.silu if activation == "swish" else F.relu
        self.p = dropout

    def forward(self, x: Tensor, rng: torch.Generator | None = None) -> Tensor:
        h = core.dropout(self.act(self.fc1(x)), self.p, rng)
        return self.fc2(h)


class MultiheadAttention(nn.Module):
    def __init__(self, d_model: int, n_head: int) -> None:
        super().__init__()
        self.n_head = n_head
        self.d_head = d_model // n_head
        self.q_proj = Linear(d_model, d_model, "attention")
        # a key bias shifts every score of a query equally, so softmax ignores it
        self.k_proj = Linear(d_model, d_model, "attention", bias=False)
        self.v_proj = Linear(d_model, d_model, "attention")
        self.out_proj = Linear(d_model, d_model, "attention")

    def split(self, x: Tensor) -> Tensor:
        b, t, _ = x.shape
        return x.view(b, t, self.n_head, self.d_head).transpose(1, 2)

    def project_kv(self, ctx: Tensor) -> tuple[Tensor, Tensor]:
        return self.split(self.k_proj(ctx)), self.split(self.v_proj(ctx))

    def attend(self, q: Tensor, k: Tensor, v: Tensor, mask: Tensor | None) -> Tensor:
        """q: (B, H, Tq, dh); k, v: (B, H, Tk, dh); mask broadcastable to (B, 1, Tq, Tk)."""
        scores = core.matmul(q, k.transpose(-1, -2), "attention") / math.sqrt(self.d_head)
        if mask is not None:
            scores = scores.masked_fill(~mask, -math.inf)
        attn = torch.softmax(scores, dim=-1)
        ctx = core.matmul(attn, v, "attention")
        b, _, t, _ = ctx.shape
        return self.out_proj(ctx.transpose(1, 2).reshape(b, t, -1))

    def forward(self, x: Tensor, ctx: Tensor, mask: Tensor | None = None) -> Tensor:
        q = self.split(self.q_proj(x))
        k, v = self.project_kv(ctx)
        return self.attend(q, k, v, mask)


def key_mask(valid: Tensor | None) -> Tensor | None:
    """(B, Tk) validity -> (B, 1, 1, Tk) attention mask."""
    return None if valid is None else valid[:, None, None, :]


def lengths_to_mask(lengths: Tensor, max_len: int | None = None) -> Tensor:
    max_len = int(lengths.max()) if max_len is None else max_len
    return torch.arange(max_len).unsqueeze(0) < lengths.unsqueeze(1)


# --------------------------------------------------------------------------
# speech encoder


def subsampled_length(frames: int) -> int:
    """Output length of two stride-2, kernel-3, padding-1 convolutions: each maps T to floor((T-1)/2)+1."""
    return ((frames - 1) // 2) // 2 + 1


class ConvSubsampler(nn.Module):
    """Two strided 1-D convolutions over time, reducing length by 4."""

    def __init__(self, d_feat: int, d_model: int) -> None:
        super().__init__()
        self.conv1 = nn.Conv1d(d_feat, d_model, 3, stride=2, padding=1)
        self.conv2 = nn.Conv1d(d_model, d_model, 3, stride=2, padding=1)

    def _conv(self, conv: nn.Conv1d, x: Tensor) -> Tensor:
        out = conv(x)
        if core.counting():
            core.record(out.numel() * conv.in_channels * conv.kernel_size[0], "other")
        return out

    def forward(self, feats: Tensor, lengths: Tensor | None = None) -> tuple[Tensor, Tensor]:
        """feats: (B, T, d_feat) -> ((B, T', d_model), output lengths)."""
        b, t, _ = feats.shape
        if lengths is None:
            lengths = torch.full((b,), t, dtype=torch.long)
        if int(lengths.min()) < 4:
            raise ValueError("utterance too short")
        x = feats.masked_fill(~lengths_to_mask(lengths, t)[..., None], 0.0).transpose(1, 2)
        x = F.gelu(self._conv(self.conv1, x))
        len1 = (lengths - 1) // 2 + 1
        x = x.masked_fill(~lengths_to_mask(len1, x.shape[-1])[:, None, :], 0.0)
        x = F.gelu(self._conv(self.conv2, x))
        len2 = (len1 - 1) // 2 + 1
        return x.transpose(1, 2), len2


class ConvModule(nn.Module):
    """Pointwise conv + GLU, depthwise conv, layer norm, swish, pointwise conv."""

    def __init__(self, d_model: int, kernel: int, dropout: float) -> None:
        super().__init__()
        self.pw1 = Linear(d_model, 2 * d_model, "other")
        self.depthwise = nn.Conv1d(d_model, d_model, kernel, padding=kernel // 2, groups=d_model)
        self.norm = nn.LayerNorm(d_model)
        self.pw2 = Linear(d_model, d_model, "other")
        self.p = dropout

    def forward(self, x: Tensor, valid: Tensor | None, rng: torch.Generator | None) -> Tensor:
        h = F.glu(self.pw1(x), dim=-1)
        if valid is not None:
            h = h.masked_fill(~valid[..., None], 0.0)
        h = self.depthwise(h.transpose(1, 2)).transpose(1, 2)
        if core.counting():
            core.record(h.numel() * self.depthwise.kernel_size[0], "other")
        h = self.pw2(F.silu(self.norm(h)))
        return core.dropout(h, self.p, rng)


class ConformerBlock(nn.Module):
    """Macaron block: half FFN, self-attention, conv module, half FFN, final norm."""

    def __init__(self, cfg: BlockConfig) -> None:
        super().__init__()
        d = cfg.d_model
        self.cfg = cfg
        self.ffn1_norm = nn.LayerNorm(d)
        self.ffn1 = FeedForward(d, cfg.d_ff, cfg.dropout, "swish")
        self.attn_norm = nn.LayerNorm(d)
        self.attn = MultiheadAttention(d, cfg.n_head)
        self.conv_norm = nn.LayerNorm(d)
        self.conv = ConvModule(d, cfg.conv_kernel, cfg.dropout)
        self.ffn2_norm = nn.LayerNorm(d)
        self.ffn2 = FeedForward(d, cfg.d_ff, cfg.dropout, "swish")
        self.final_norm = nn.LayerNorm(d)

    def forward(self, x: Tensor, valid: Tensor | None = None, rng: torch.Generator | None = None) -> Tensor:
        if x.shape[-1] != self.cfg.d_model:
            raise ValueError(f"expected d_model={self.cfg.d_model}, got {x.shape[-1]}")
        p = self.cfg.dropout
        x = x + 0.5 * core.dropout(self.ffn1(self.ffn1_norm(x), rng), p, rng)
        h = self.attn_norm(x)
        x = x + core.dropout(self.attn(h, h, key_mask(valid)), p, rng)
        x = x + self.conv(self.conv_norm(x), valid, rng)
        x = x + 0.5 * core.dropout(self.ffn2(self.ffn2_norm(x), rng), p, rng)
        return self.final_norm(x)


class SpeechEncoder(nn.Module):
    def __init__(self, d_feat: int, n_layers: int, cfg: BlockConfig) -> None:
        super().__init__()
        self.d_feat = d_feat
        self.subsample = ConvSubsampler(d_feat, cfg.d_model)
        self.layers = nn.ModuleList(ConformerBlock(cfg) for _ in range(n_layers))
        self.p = cfg.dropout

    def forward(
        self, feats: Tensor, lengths: Tensor | None = None, rng: torch.Generator | None = None
    ) -> tuple[Tensor, Tensor]:
        """Returns encoder states H (B, T', d) and their validity mask (B, T')."""
        if feats.shape[-1] != self.d_feat:
            raise ValueError(f"expected feature dim {self.d_feat}, got {feats.shape[-1]}")
        x, out_len = self.subsample(feats, lengths)
        valid = lengths_to_mask(out_len, x.shape[1])
        x = core.dropout(x + sinusoidal_positions(x.shape[1], x.shape[2]), self.p, rng)
        for layer in self.layers:
            x = layer(x, valid, rng)
        return x, valid


# --------------------------------------------------------------------------
# bidirectional encoder (T2U / T2S / text encoder)


class EncoderLayer(nn.Module):
    def __init__(self, cfg: BlockConfig) -> None:
        super().__init__()
        self.attn_norm = nn.LayerNorm(cfg.d_model)
        self.attn = MultiheadAttention(cfg.d_model, cfg.n_head)
        self.ffn_norm = nn.LayerNorm(cfg.d_model)
        self.ffn = FeedForward(cfg.d_model, cfg.d_ff, cfg.dropout)
        self.p = cfg.dropout

    def forward(self, x: Tensor, valid: Tensor | None, rng: torch.Generator | None) -> Tensor:
        h = self.attn_norm(x)
        x = x + core.dropout(self.attn(h, h, key_mask(valid)), self.p, rng)
        return x + core.dropout(self.ffn(self.ffn_norm(x), rng), self.p, rng)


class TransformerEncoder(nn.Module):
    """Length-preserving bidirectional stack; with zero layers it is the identity."""

    def __init__(self, n_layers: int, cfg: BlockConfig) -> None:
        super().__init__()
        self.layers = nn.ModuleList(EncoderLayer(cfg) for _ in range(n_layers))
        self.norm = nn.LayerNorm(cfg.d_model) if n_layers else None

    def forward(self, x: Tensor, valid: Tensor | None = None, rng: torch.Generator | None = None) -> Tensor:
        for layer in self.layers:
            x = layer(x, valid, rng)
        return self.norm(x) if self.norm is not None else x


# --------------------------------------------------------------------------
# autoregressive decoder


class IncrementalState:
    """Per-layer self-attention key/value caches plus projected cross-attention contexts.

    Every tensor has the hypothesis batch on axis 0 so beam reordering is one
    ``index_select`` per entry.
    """

    def __init__(self, n_layers: int) -> None:
        self.self_kv: list[tuple[Tensor, Tensor] | None] = [None] * n_layers
        self.cross_kv: list[list[tuple[Tensor, Tensor]]] = [[] for _ in range(n_layers)]
        self.cross_mask: list[Tensor | None] = []
        self.length = 0

    def reorder(self, index: Tensor) -> None:
        self.self_kv = [
            None if kv is None else (kv[0].index_select(0, index), kv[1].index_select(0, index))
            for kv in self.self_kv
        ]
        self.cross_kv = [
            [(k.index_select(0, index), v.index_select(0, index)) for k, v in layer]
            for layer in self.cross_kv
        ]
        self.cross_mask = [None if m is None else m.index_select(0, index) for m in self.cross_mask]


class DecoderLayer(nn.Module):
    def __init__(self, cfg: BlockConfig, mode: str) -> None:
        super().__init__()
        if mode not in CROSS_MODES:
            raise ValueError(f"unknown cross-attention mode {mode!r}")
        d = cfg.d_model
        self.mode = mode
        self.p = cfg.dropout
        self.self_norm = nn.LayerNorm(d)
        self.self_attn = MultiheadAttention(d, cfg.n_head)
        n_cross = {"none": 0, "single": 1, "parallel": 2, "sequential": 2}[mode]
        self.cross_norms = nn.ModuleList(nn.LayerNorm(d) for _ in range(1 if mode == "parallel" else n_cross))
        self.cross_attns = nn.ModuleList(MultiheadAttention(d, cfg.n_head) for _ in range(n_cross))
        self.ffn_norm = nn.LayerNorm(d)
        self.ffn = FeedForward(d, cfg.d_ff, cfg.dropout)

    @property
    def n_contexts(self) -> int:
        return len(self.cross_attns)

    def _cross(self, x: Tensor, kvs: list[tuple[Tensor, Tensor]], masks: list[Tensor | None], rng) -> Tensor:
        if self.mode == "none":
            return x
        if self.mode == "parallel":
            h = self.cross_norms[0](x)
            out = 0
            for attn, (k, v), m in zip(self.cross_attns, kvs, masks):
                out = out + attn.attend(attn.split(attn.q_proj(h)), k, v, m)
            return x + core.dropout(out, self.p, rng)
        for attn, norm, (k, v), m in zip(self.cross_attns, self.cross_norms, kvs, masks):
            q = attn.split(attn.q_proj(norm(x)))
            x = x + core.dropout(attn.attend(q, k, v, m), self.p, rng)
        return x

    def cross_kv(self, contexts: list[Tensor]) -> list[tuple[Tensor, Tensor]]:
        return [attn.project_kv(ctx) for attn, ctx in zip(self.cross_attns, contexts)]

    def forward(
        self,
        x: Tensor,
        contexts: list[Tensor],
        ctx_masks: list[Tensor | None],
        rng: torch.Generator | None = None,
    ) -> Tensor:
        """Full causal pass over x (B, L, d)."""
        length = x.shape[1]
        causal = torch.ones(length, length, dtype=torch.bool).tril()
        h = self.self_norm(x)
        x = x + core.dropout(self.self_attn(h, h, causal), self.p, rng)
        x = self._cross(x, self.cross_kv(contexts), [key_mask(m) for m in ctx_masks], rng)
        return x + core.dropout(self.ffn(self.ffn_norm(x), rng), self.p, rng)

    def step(self, x: Tensor, state: IncrementalState, index: int) -> Tensor:
        """One new position x (B, 1, d); extends ``state.self_kv[index]`` by one."""
        h = self.self_norm(x)
        attn = self.self_attn
        q = attn.split(attn.q_proj(h))
        k, v = attn.project_kv(h)
        cached = state.self_kv[index]
        if cached is not None:
            k = torch.cat([cached[0], k], dim=2)
            v = torch.cat([cached[1], v], dim=2)
        state.self_kv[index] = (k, v)
        x = x + attn.attend(q, k, v, None)
        x = self._cross(x, state.cross_kv[index], [key_mask(m) for m in state.cross_mask], None)
        return x + self.ffn(self.ffn_norm(x))


class DecoderStack(nn.Module):
    """Causal decoder layers plus a final norm over already-embedded inputs.

    ``forward`` and ``step`` return the pre-projection states.
    """

    def __init__(self, n_layers: int, cfg: BlockConfig, mode: str = "single") -> None:
        super().__init__()
        if mode not in CROSS_MODES:
            raise ValueError(f"unknown cross-attention mode {mode!r}")
        self.mode = mode
        self.layers = nn.ModuleList(DecoderLayer(cfg, mode) for _ in range(n_layers))
        self.norm = nn.LayerNorm(cfg.d_model)
        self.p = cfg.dropout

    @property
    def n_contexts(self) -> int:
        return {"none": 0, "single": 1, "parallel": 2, "sequential": 2}[self.mode]

    def _contexts(self, contexts, ctx_masks) -> tuple[list[Tensor], list[Tensor | None]]:
        contexts = list(contexts)
        if len(contexts) < self.n_contexts:
            raise ValueError(
                f"cross-attention mode {self.mode!r} needs {self.n_contexts} context(s), got {len(contexts)}"
            )
        ctx_masks = list(ctx_masks) if ctx_masks is not None else [None] * len(contexts)
        return contexts[: self.n_contexts], ctx_masks[: self.n_contexts]

    def forward(self, x: Tensor, contexts=(), ctx_masks=None, rng: torch.Generator | None = None) -> Tensor:
        contexts, ctx_masks = self._contexts(contexts, ctx_masks)
        x = core.dropout(x, self.p, rng)
        for layer in self.layers:
            x = layer(x, contexts, ctx_masks, rng)
        return self.norm(x)

    def init_state(self, contexts=(), ctx_masks=None) -> IncrementalState:
        contexts, ctx_masks = self._contexts(contexts, ctx_masks)
        state = IncrementalState(len(self.layers))
        for i, layer in enumerate(self.layers):
            state.cross_kv[i] = layer.cross_kv(contexts)
        state.cross_mask = ctx_masks
        return state

    def step(self, x: Tensor, state: IncrementalState) -> Tensor:
        """x: (B, 1, d) embedded input at position ``state.length`` -> states (B, d)."""
        for i, layer in enumerate(self.layers):
            x = layer.step(x, state, i)
        state.length += 1
        return self.norm(x)[:, 0]


class Decoder(nn.Module):
    """Token decoder: embedding, sinusoidal positions, causal stack, vocabulary projection.

    ``forward`` returns (logits, pre-logit states); the states are what the
    second pass consumes.
    """

    def __init__(self, vocab: int, n_layers: int, cfg: BlockConfig, mode: str = "single") -> None:
        super().__init__()
        self.cfg = cfg
        self.vocab = vocab
        self.embed = nn.Embedding(vocab, cfg.d_model)
        nn.init.normal_(self.embed.weight, std=cfg.d_model ** -0.5)
        self.stack = DecoderStack(n_layers, cfg, mode)
        self.out_proj = Linear(cfg.d_model, vocab, "projection")

    @property
    def mode(self) -> str:
        return self.stack.mode

    @property
    def layers(self) -> nn.ModuleList:
        return self.stack.layers

    def embed_tokens(self, tokens: Tensor, offset: int = 0) -> Tensor:
        x = self.embed(tokens) * math.sqrt(self.cfg.d_model)
        return x + sinusoidal_positions(tokens.shape[1], self.cfg.d_model, offset)

    def forward(self, tokens: Tensor, contexts=(), ctx_masks=None, rng: torch.Generator | None = None) -> tuple[Tensor, Tensor]:
        """tokens (B, L) -> logits (B, L, V), states (B, L, d)."""
        states = self.stack(self.embed_tokens(tokens), contexts, ctx_masks, rng)
        return self.out_proj(states), states

    def init_state(self, contexts=(), ctx_masks=None) -> IncrementalState:
        return self.stack.init_state(contexts, ctx_masks)

    def step(self, tokens: Tensor, state: IncrementalState) -> tuple[Tensor, Tensor]:
        """Consume one token per hypothesis (B,) -> next-token logits (B, V) and states (B, d)."""
        states = self.stack.step(self.embed_tokens(tokens.unsqueeze(1), offset=state.length), state)
        return self.out_proj(states), states
