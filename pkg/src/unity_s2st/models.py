"""Direct S2ST architectures: UnitY, S2UT, S2SpecT, S2SpecT2, plus S2TT/ASR models.

Every model consumes a :class:`Batch` and returns :class:`ForwardOutputs`.
Decoders are fed BOS-prefixed inputs and predict EOS-terminated outputs, so
first-pass states ``text_states`` have one row per target token including EOS.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import Tensor, nn

from .data import BOS, EOS, PAD, Example, ceil_div, unit_spectrogram
from .nn import BlockConfig, Decoder, DecoderStack, Linear, SpeechEncoder, TransformerEncoder, lengths_to_mask, sinusoidal_positions

ARCHS = ("unity", "s2ut", "s2spect", "s2spect2", "s2tt", "asr")


@dataclass(frozen=True)
class ModelConfig:
    arch: str = "unity"
    d_feat: int = 16
    d_model: int = 64
    d_ff: int = 128
    n_head: int = 4
    conv_kernel: int = 7
    dropout: float = 0.1
    n_enc: int = 2
    n_1st: int = 4
    n_2nd: int = 2
    n_t2u: int = 2
    n_aux: int = 2
    text_vocab: int = 20
    unit_vocab: int = 28
    src_vocab: int = 16
    d_spec: int = 8
    reduction: int = 3
    prenet_dim: int = 16
    w_s2t: float = 1.0
    w_ctc: float = 1.6
    w_asr: float = 0.0
    alpha: float = 1.0
    beta: float = 3.0
    gamma: float = 1.0
    label_smoothing: float = 0.2
    cross_mode: str = "none"
    t2u_ablation: bool = False

    def __post_init__(self) -> None:
        if self.arch not in ARCHS:
            raise ValueError(f"unknown architecture {self.arch!r}")
        for name in ("n_enc", "n_1st", "n_2nd", "n_t2u", "n_aux"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.n_t2u == 0 and not self.t2u_ablation and self.arch in ("unity", "s2spect2"):
            raise ValueError("n_t2u = 0 requires t2u_ablation")
        if self.t2u_ablation and self.n_t2u != 0:
            raise ValueError("t2u_ablation requires n_t2u = 0")
        if self.reduction < 1:
            raise ValueError("reduction factor must be >= 1")
        if self.cross_mode not in ("none", "parallel", "sequential"):
            raise ValueError(f"unknown second-pass cross-attention mode {self.cross_mode!r}")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError("label smoothing must lie in [0, 1)")
        self.block  # validates dimensions

    @property
    def block(self) -> BlockConfig:
        return BlockConfig(self.d_model, self.d_ff, self.n_head, self.conv_kernel, self.dropout)

    @classmethod
    def preset(cls, arch: str, **overrides) -> "ModelConfig":
        """Default depths per architecture: UnitY (4, 2, 2), S2SpecT2 (4, 6, 2), six-layer single-pass decoders."""
        depth = {
            "unity": dict(n_1st=4, n_2nd=2, n_t2u=2),
            "s2spect2": dict(n_1st=4, n_2nd=6, n_t2u=2),
            "s2ut": dict(n_2nd=6),
            "s2spect": dict(n_2nd=6),
            "s2tt": dict(n_1st=6),
            "asr": dict(n_1st=6),
        }[arch]
        return cls(**{"arch": arch, **depth, **overrides})

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


# --------------------------------------------------------------------------
# batches


def _pad(seqs: Sequence[Sequence[int]], value: int = PAD) -> Tensor:
    width = max(len(s) for s in seqs)
    return torch.tensor([list(s) + [value] * (width - len(s)) for s in seqs], dtype=torch.long)


@dataclass
class Batch:
    feats: Tensor  # (B, T, d_feat)
    feat_lens: Tensor
    text: list[list[int]]
    units: list[list[int]]
    source: list[list[int]]
    spec: Tensor | None = None  # (B, steps * r, d_spec), zero-padded
    spec_steps: Tensor | None = None

    @property
    def size(self) -> int:
        return self.feats.shape[0]

    @staticmethod
    def teacher(seqs: Sequence[Sequence[int]]) -> tuple[Tensor, Tensor, Tensor]:
        """(BOS + y, y + EOS, validity mask)."""
        if any(len(s) == 0 for s in seqs):
            raise ValueError("empty target sequence")
        inp = _pad([[BOS] + list(s) for s in seqs])
        out = _pad([list(s) + [EOS] for s in seqs])
        return inp, out, out != PAD

    @classmethod
    def from_examples(cls, examples: Sequence[Example], cfg: ModelConfig | None = None, spec_seed: int = 0) -> "Batch":
        lens = torch.tensor([ex.features.shape[0] for ex in examples])
        width = int(lens.max())
        d_feat = examples[0].features.shape[1]
        feats = np.zeros((len(examples), width, d_feat))
        for i, ex in enumerate(examples):
            feats[i, : ex.features.shape[0]] = ex.features
        batch = cls(
            torch.tensor(feats, dtype=torch.get_default_dtype()),
            lens,
            [list(ex.text) for ex in examples],
            [list(ex.units) for ex in examples],
            [list(ex.source) for ex in examples],
        )
        if cfg is not None and cfg.arch in ("s2spect", "s2spect2"):
            frames = [unit_spectrogram(ex.units, cfg.unit_vocab, cfg.d_spec, spec_seed) for ex in examples]
            batch.spec, batch.spec_steps = pack_spectrograms(frames, cfg.reduction)
        return batch

    def repeat(self, times: int = 2) -> "Batch":
        """Physically duplicated batch, copies stacked along the batch axis."""
        return Batch(
            self.feats.repeat(times, 1, 1),
            self.feat_lens.repeat(times),
            self.text * times,
            self.units * times,
            self.source * times,
            None if self.spec is None else self.spec.repeat(times, 1, 1),
            None if self.spec_steps is None else self.spec_steps.repeat(times),
        )


def pack_spectrograms(frames: Sequence[np.ndarray], r: int) -> tuple[Tensor, Tensor]:
    steps = torch.tensor([ceil_div(len(f), r) for f in frames])
    width = int(steps.max()) * r
    d_spec = frames[0].shape[1]
    out = np.zeros((len(frames), width, d_spec))
    for i, f in enumerate(frames):
        out[i, : len(f)] = f
    return torch.tensor(out, dtype=torch.get_default_dtype()), steps


@dataclass
class ForwardOutputs:
    text_logits: Tensor | None = None  # (B, M, V_t)
    text_states: Tensor | None = None  # D_text (B, M, d)
    text_mask: Tensor | None = None
    z: Tensor | None = None  # T2U / T2S encoder output (B, M, d)
    unit_logits: Tensor | None = None  # (B, L, V_u)
    unit_states: Tensor | None = None  # D_unit
    unit_mask: Tensor | None = None
    ctc_logits: Tensor | None = None  # (B, L, V_t + 1)
    asr_logits: Tensor | None = None
    asr_mask: Tensor | None = None
    spec_pred: Tensor | None = None  # (B, steps * r, d_spec)
    eos_logits: Tensor | None = None  # (B, steps)
    spec_mask: Tensor | None = None  # (B, steps)
    extras: dict = field(default_factory=dict)


# --------------------------------------------------------------------------
# modules


class SpectrogramDecoder(nn.Module):
    """Autoregressive decoder emitting ``r`` frames and one EOS logit per step."""

    def __init__(self, cfg: ModelConfig, n_layers: int, mode: str = "single") -> None:
        super().__init__()
        self.d_spec = cfg.d_spec
        self.r = cfg.reduction
        self.d_model = cfg.d_model
        self.prenet = Linear(cfg.d_spec, cfg.prenet_dim, "other")
        self.prenet_out = Linear(cfg.prenet_dim, cfg.d_model, "other")
        self.stack = DecoderStack(n_layers, cfg.block, mode)
        self.frame_proj = Linear(cfg.d_model, cfg.reduction * cfg.d_spec, "projection")
        self.eos_proj = Linear(cfg.d_model, 1, "projection")

    def embed_frames(self, prev: Tensor, offset: int = 0) -> Tensor:
        x = self.prenet_out(torch.relu(self.prenet(prev)))
        return x + sinusoidal_positions(prev.shape[1], self.d_model, offset)

    def shifted_inputs(self, target: Tensor) -> Tensor:
        """Last frame of each previous group, a zero frame first. target: (B, steps * r, d_spec)."""
        b, n, d = target.shape
        if d != self.d_spec:
            raise ValueError(f"expected spectrogram dim {self.d_spec}, got {d}")
        last = target.view(b, n // self.r, self.r, d)[:, :, -1]
        return torch.cat([torch.zeros(b, 1, d), last[:, :-1]], dim=1)

    def forward(self, target: Tensor, contexts, ctx_masks, rng=None) -> tuple[Tensor, Tensor, Tensor]:
        states = self.stack(self.embed_frames(self.shifted_inputs(target)), contexts, ctx_masks, rng)
        b, steps, _ = states.shape
        frames = self.frame_proj(states).view(b, steps * self.r, self.d_spec)
        return frames, self.eos_proj(states).squeeze(-1), states

    def init_state(self, contexts, ctx_masks=None):
        return self.stack.init_state(contexts, ctx_masks)

    def step(self, prev_frame: Tensor, state) -> tuple[Tensor, Tensor]:
        """prev_frame: (B, d_spec) -> (frames (B, r, d_spec), eos logit (B,))."""
        states = self.stack.step(self.embed_frames(prev_frame.unsqueeze(1), state.length), state)
        return self.frame_proj(states).view(-1, self.r, self.d_spec), self.eos_proj(states).squeeze(-1)


class S2STModel(nn.Module):
    """Shared speech encoder plus helpers; subclasses wire the decoders."""

    def __init__(self, cfg: ModelConfig) -> None:
        super().__init__()
        self.cfg = cfg
        self.encoder = SpeechEncoder(cfg.d_feat, cfg.n_enc, cfg.block)

    def encode(self, batch: Batch, rng=None) -> tuple[Tensor, Tensor]:
        return self.encoder(batch.feats, batch.feat_lens, rng)

    def _asr(self, out: ForwardOutputs, batch: Batch, h: Tensor, h_mask: Tensor, rng) -> None:
        if getattr(self, "asr_decoder", None) is not None:
            inp, _, mask = Batch.teacher(batch.source)
            out.asr_logits, _ = self.asr_decoder(inp, [h], [h_mask], rng)
            out.asr_mask = mask

    def _asr_decoder(self) -> Decoder | None:
        cfg = self.cfg
        return Decoder(cfg.src_vocab, cfg.n_aux, cfg.block) if cfg.w_asr > 0 else None

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())


class UnitY(S2STModel):
    """Speech encoder -> first-pass text decoder -> T2U encoder -> second-pass unit decoder."""

    def __init__(self, cfg: ModelConfig) -> None:
        super().__init__(cfg)
        blk = cfg.block
        self.text_decoder = Decoder(cfg.text_vocab, cfg.n_1st, blk, "single")
        self.t2u = TransformerEncoder(cfg.n_t2u, blk)
        mode = "single" if cfg.cross_mode == "none" else cfg.cross_mode
        self.unit_decoder = Decoder(cfg.unit_vocab, cfg.n_2nd, blk, mode)
        self.asr_decoder = self._asr_decoder()

    def second_pass(
        self, d_text: Tensor, text_mask: Tensor, units_in: Tensor, h: Tensor | None = None, h_mask: Tensor | None = None, rng=None
    ) -> tuple[Tensor, Tensor, Tensor]:
        """(Z, unit logits, D_unit) from first-pass states; ``h`` is read only in parallel/sequential mode."""
        z = self.t2u(d_text, text_mask, rng)
        contexts, masks = [z], [text_mask]
        if self.cfg.cross_mode != "none":
            if h is None:
                raise ValueError(f"cross-attention mode {self.cfg.cross_mode!r} needs the speech encoder output")
            contexts.append(h)
            masks.append(h_mask)
        logits, states = self.unit_decoder(units_in, contexts, masks, rng)
        return z, logits, states

    def forward(self, batch: Batch, rng=None) -> ForwardOutputs:
        h, h_mask = self.encode(batch, rng)
        y_in, _, y_mask = Batch.teacher(batch.text)
        u_in, _, u_mask = Batch.teacher(batch.units)
        text_logits, d_text = self.text_decoder(y_in, [h], [h_mask], rng)
        z, unit_logits, d_unit = self.second_pass(d_text, y_mask, u_in, h, h_mask, rng)
        out = ForwardOutputs(text_logits, d_text, y_mask, z, unit_logits, d_unit, u_mask)
        self._asr(out, batch, h, h_mask, rng)
        return out


class S2UT(S2STModel):
    """Single unit decoder over the speech encoder, auxiliary S2TT decoder and a CTC head on D_unit."""

    def __init__(self, cfg: ModelConfig) -> None:
        super().__init__(cfg)
        self.unit_decoder = Decoder(cfg.unit_vocab, cfg.n_2nd, cfg.block, "single")
        self.aux_text_decoder = Decoder(cfg.text_vocab, cfg.n_aux, cfg.block) if cfg.n_aux > 0 else None
        self.ctc_proj = Linear(cfg.d_model, cfg.text_vocab + 1, "projection")
        self.asr_decoder = self._asr_decoder()

    def forward(self, batch: Batch, rng=None, with_aux: bool = True) -> ForwardOutputs:
        h, h_mask = self.encode(batch, rng)
        u_in, _, u_mask = Batch.teacher(batch.units)
        unit_logits, d_unit = self.unit_decoder(u_in, [h], [h_mask], rng)
        out = ForwardOutputs(unit_logits=unit_logits, unit_states=d_unit, unit_mask=u_mask)
        out.ctc_logits = self.ctc_proj(d_unit)
        if with_aux and self.aux_text_decoder is not None:
            y_in, _, y_mask = Batch.teacher(batch.text)
            out.text_logits, out.text_states = self.aux_text_decoder(y_in, [h], [h_mask], rng)
            out.text_mask = y_mask
        if with_aux:
            self._asr(out, batch, h, h_mask, rng)
        return out


class S2SpecT(S2STModel):
    """Single spectrogram decoder over the speech encoder plus an auxiliary S2TT decoder."""

    def __init__(self, cfg: ModelConfig) -> None:
        super().__init__(cfg)
        self.spec_decoder = SpectrogramDecoder(cfg, cfg.n_2nd)
        self.aux_text_decoder = Decoder(cfg.text_vocab, cfg.n_aux, cfg.block) if cfg.n_aux > 0 else None
        self.asr_decoder = self._asr_decoder()

    def forward(self, batch: Batch, rng=None) -> ForwardOutputs:
        h, h_mask = self.encode(batch, rng)
        out = ForwardOutputs()
        out.spec_pred, out.eos_logits, _ = self.spec_decoder(batch.spec, [h], [h_mask], rng)
        out.spec_mask = lengths_to_mask(batch.spec_steps, out.eos_logits.shape[1])
        if self.aux_text_decoder is not None:
            y_in, _, y_mask = Batch.teacher(batch.text)
            out.text_logits, out.text_states = self.aux_text_decoder(y_in, [h], [h_mask], rng)
            out.text_mask = y_mask
        self._asr(out, batch, h, h_mask, rng)
        return out


class S2SpecT2(S2STModel):
    """Two-pass spectrogram model: text decoder -> T2S encoder -> spectrogram decoder attending Z only."""

    def __init__(self, cfg: ModelConfig) -> None:
        super().__init__(cfg)
        self.text_decoder = Decoder(cfg.text_vocab, cfg.n_1st, cfg.block, "single")
        self.t2u = TransformerEncoder(cfg.n_t2u, cfg.block)
        self.spec_decoder = SpectrogramDecoder(cfg, cfg.n_2nd)
        self.asr_decoder = self._asr_decoder()

    def forward(self, batch: Batch, rng=None) -> ForwardOutputs:
        h, h_mask = self.encode(batch, rng)
        y_in, _, y_mask = Batch.teacher(batch.text)
        text_logits, d_text = self.text_decoder(y_in, [h], [h_mask], rng)
        z = self.t2u(d_text, y_mask, rng)
        out = ForwardOutputs(text_logits, d_text, y_mask, z)
        out.spec_pred, out.eos_logits, _ = self.spec_decoder(batch.spec, [z], [y_mask], rng)
        out.spec_mask = lengths_to_mask(batch.spec_steps, out.eos_logits.shape[1])
        self._asr(out, batch, h, h_mask, rng)
        return out


class SpeechToText(S2STModel):
    """S2TT (target text) or ASR (source transcript) model: speech encoder plus one text decoder."""

    def __init__(self, cfg: ModelConfig) -> None:
        super().__init__(cfg)
        vocab = cfg.text_vocab if cfg.arch == "s2tt" else cfg.src_vocab
        self.text_decoder = Decoder(vocab, cfg.n_1st, cfg.block, "single")

    def targets(self, batch: Batch) -> list[list[int]]:
        return batch.text if self.cfg.arch == "s2tt" else batch.source

    def forward(self, batch: Batch, rng=None) -> ForwardOutputs:
        h, h_mask = self.encode(batch, rng)
        y_in, _, y_mask = Batch.teacher(self.targets(batch))
        logits, states = self.text_decoder(y_in, [h], [h_mask], rng)
        if self.cfg.arch == "s2tt":
            return ForwardOutputs(logits, states, y_mask)
        return ForwardOutputs(asr_logits=logits, asr_mask=y_mask)


_CLASSES = {"unity": UnitY, "s2ut": S2UT, "s2spect": S2SpecT, "s2spect2": S2SpecT2, "s2tt": SpeechToText, "asr": SpeechToText}


def build_model(cfg: ModelConfig, seed: int = 0) -> S2STModel:
    """Construct a model with parameters initialized from ``seed``."""
    state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    try:
        return _CLASSES[cfg.arch](cfg)
    finally:
        torch.random.set_rng_state(state)


# --------------------------------------------------------------------------
# FFN freezing


def text_decoder_ffn_parameters(model: nn.Module) -> list[nn.Parameter]:
    dec = getattr(model, "text_decoder", None)
    if dec is None:
        raise ValueError("model has no first-pass text decoder")
    return [p for layer in dec.layers for p in layer.ffn.parameters()]


def freeze_text_decoder_ffn(model: nn.Module) -> nn.Module:
    for p in text_decoder_ffn_parameters(model):
        p.requires_grad_(False)
    return model


def unfreeze_text_decoder_ffn(model: nn.Module) -> nn.Module:
    for p in text_decoder_ffn_parameters(model):
        p.requires_grad_(True)
    return model


# --------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = b"UNITYCKP"
CKPT_VERSION = 1


def save_checkpoint(path: str | Path, params: dict[str, Tensor], config: dict, extra: dict | None = None) -> None:
    """Write a versioned checkpoint.

    Layout: 8-byte magic, uint32 version, uint64 header length, UTF-8 JSON
    header (config echo, tensor table, sha256 of the payload), then the
    payload of little-endian float32 values in table order.
    """
    table, chunks, offset = [], [], 0
    for name, t in params.items():
        raw = t.detach().to(torch.float32).contiguous().numpy().astype("<f4").tobytes()
        table.append({"name": name, "shape": list(t.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = {
        "config": config,
        "tensors": table,
        "sha256": hashlib.sha256(payload).hexdigest(),
        "extra": extra or {},
    }
    head = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<IQ", CKPT_VERSION, len(head)) + head + payload)


def read_checkpoint(path: str | Path) -> tuple[dict[str, Tensor], dict, dict]:
    """Returns (params, config, extra); raises ValueError on a corrupt or foreign file."""
    blob = Path(path).read_bytes()
    if blob[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint")
    version, head_len = struct.unpack("<IQ", blob[8:20])
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(blob[20 : 20 + head_len])
    payload = blob[20 + head_len :]
    if hashlib.sha256(payload).hexdigest() != header["sha256"]:
        raise ValueError(f"{path}: checksum mismatch")
    params = {}
    for entry in header["tensors"]:
        raw = payload[entry["offset"] : entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype="<f4").reshape(entry["shape"])
        params[entry["name"]] = torch.tensor(arr.copy(), dtype=torch.get_default_dtype())
    return params, header["config"], header.get("extra", {})


def save_model(path: str | Path, model: S2STModel, extra: dict | None = None) -> None:
    save_checkpoint(path, dict(model.state_dict()), model.cfg.to_dict(), extra)


def load_model(path: str | Path) -> S2STModel:
    params, config, _ = read_checkpoint(path)
    model = build_model(ModelConfig.from_dict(config))
    load_params(model, params)
    return model


def load_params(model: nn.Module, params: dict[str, Tensor], prefix: str = "") -> None:
    own = dict(model.state_dict())
    for name, value in params.items():
        key = prefix + name
        if key not in own:
            raise ValueError(f"unexpected parameter {key!r}")
        if tuple(own[key].shape) != tuple(value.shape):
            raise ValueError(f"shape mismatch for {key!r}: {tuple(own[key].shape)} vs {tuple(value.shape)}")
    with torch.no_grad():
        for name, value in params.items():
            own[prefix + name].copy_(value)

