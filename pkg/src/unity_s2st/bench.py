"""Decoding-efficiency harness: wall-clock, multiply-adds and quality across beam sweeps and capacities.

Multiply-adds cover linear maps, attention matrix products and convolutions
(softmax, normalization and activations are not counted). Vocoder time is
out of scope.
"""

from __future__ import annotations

import csv
import logging
import statistics
import time
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Sequence

import torch

from . import core
from .data import Example
from .evaluation import score
from .metrics import corpus_bleu
from .models import ModelConfig, S2STModel, build_model
from .search import BeamConfig, DecodeResult, decode
from .training import TrainConfig, TrainingDiverged, train

log = logging.getLogger(__name__)

BENCH_HEADER = ["model", "n1", "n2", "b1", "b2", "n_utts", "wall_s", "mean_ms", "flops", "text_bleu", "unit_bleu", "truncated"]


@dataclass
class BenchRow:
    """``truncated`` counts utterances whose decode hit a length limit or failed."""

    model: str
    n1: int
    n2: int
    b1: int
    b2: int
    n_utts: int
    wall_s: float
    mean_ms: float
    flops: int
    text_bleu: float
    unit_bleu: float
    truncated: int


def ensure_single_thread() -> None:
    torch.set_num_threads(1)
    if torch.get_num_threads() != 1:
        raise RuntimeError("benchmark requires single-threaded execution")


def decoder_depths(model: S2STModel) -> tuple[int, int]:
    """(first-pass, second-pass) decoder layers; single-pass models report their one decoder as first."""
    cfg = model.cfg
    if cfg.arch == "unity":
        return cfg.n_1st, cfg.n_2nd
    if cfg.arch == "s2spect2":
        return cfg.n_1st, cfg.n_2nd
    if cfg.arch in ("s2ut", "s2spect"):
        return cfg.n_2nd, 0
    return cfg.n_1st, 0


def _run(model: S2STModel, examples: Sequence[Example], cfg: BeamConfig, force: bool) -> list[DecodeResult | None]:
    out: list[DecodeResult | None] = []
    with torch.no_grad():
        for ex in examples:
            try:
                out.append(
                    decode(
                        model, ex.features, cfg, ex.id,
                        unit_len=len(ex.units) if force else None,
                        text_len=len(ex.text) if force else None,
                    )
                )
            except Exception as exc:  # a failed utterance flags the row
                log.warning("decode failed for %s: %s", ex.id, exc)
                out.append(None)
    return out


def count_decode_flops(model: S2STModel, examples: Sequence[Example], cfg: BeamConfig, force: bool = False) -> int:
    model.eval()
    with core.count_ops() as counter:
        _run(model, examples, cfg, force)
    return counter.total


def bench_decode(
    models: Sequence[tuple[str, S2STModel]],
    examples: Sequence[Example],
    sweep: Sequence[tuple[int, int]],
    repeats: int = 3,
    base: BeamConfig | None = None,
    force_lengths: bool = False,
) -> list[BenchRow]:
    """One row per (model, (b1, b2)).

    A counted warm-up pass supplies the multiply-add total and is discarded
    from timing; wall-clock is the median over ``repeats`` timed passes.
    Single-pass models use ``b1`` as their only beam and report ``b2 = 0``.
    """
    if repeats < 3:
        raise ValueError("repeats must be >= 3")
    if not examples:
        raise ValueError("no utterances to decode")
    ensure_single_thread()
    base = base or BeamConfig()
    rows = []
    for name, model in models:
        model.eval()
        n1, n2 = decoder_depths(model)
        two_pass = model.cfg.arch in ("unity", "s2spect2")
        seen: set[tuple[int, int]] = set()
        for b1, b2 in sweep:
            b2 = b2 if two_pass else 0
            if (b1, b2) in seen:
                continue
            seen.add((b1, b2))
            cfg = replace(base, b1=b1, b2=max(b2, 1))
            with core.count_ops() as counter:
                results = _run(model, examples, cfg, force_lengths)
            times = []
            for _ in range(repeats):
                t0 = time.perf_counter()
                _run(model, examples, cfg, force_lengths)
                times.append(time.perf_counter() - t0)
            wall = statistics.median(times)
            ok = [(r, ex) for r, ex in zip(results, examples) if r is not None]
            failed = len(examples) - len(ok)
            rows.append(
                BenchRow(
                    name, n1, n2, b1, b2, len(examples), wall, 1000.0 * wall / len(examples), counter.total,
                    _bleu([r.text for r, _ in ok], [ex.text for _, ex in ok]),
                    _bleu([r.units for r, _ in ok], [ex.units for _, ex in ok]),
                    failed + sum(r.flags != "none" for r, _ in ok),
                )
            )
            log.info("bench %s b=%d:%d wall=%.3fs flops=%d", name, b1, b2, wall, counter.total)
    return rows


def _bleu(hyps, refs) -> float:
    if not hyps or not any(hyps):
        return float("nan")
    return corpus_bleu(hyps, refs).score


def write_bench_csv(path: str | Path, rows: Sequence[BenchRow]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(BENCH_HEADER)
        for row in rows:
            writer.writerow([getattr(row, k) for k in BENCH_HEADER])


def read_bench_csv(path: str | Path) -> list[BenchRow]:
    types = {f.name: f.type for f in fields(BenchRow)}
    cast = {"int": int, "float": float, "str": str}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != BENCH_HEADER:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        return [BenchRow(**{k: cast[types[k]](v) for k, v in r.items()}) for r in reader]


def speedup(rows: Sequence[BenchRow], model: str, b: tuple[int, int], baseline: str, b_base: tuple[int, int]) -> tuple[float, float]:
    """(wall-clock ratio, multiply-add ratio) of ``baseline`` over ``model``."""

    def pick(name: str, b1: int, b2: int) -> BenchRow:
        for r in rows:
            if r.model == name and r.b1 == b1 and r.b2 == b2:
                return r
        raise KeyError(f"no row for {name} at {b1}:{b2}")

    fast, slow = pick(model, *b), pick(baseline, *b_base)
    return slow.wall_s / fast.wall_s, slow.flops / fast.flops


# --------------------------------------------------------------------------
# capacity sweep


@dataclass
class CapacityRow:
    n1: int
    n2: int
    params: int
    text_bleu: float
    unit_bleu: float
    text_exact: float
    unit_exact: float
    mean_ms: float
    flops: int
    speedup: float
    diverged: bool


CAPACITY_HEADER = [f.name for f in fields(CapacityRow)]


def capacity_sweep(
    train_set: Sequence[Example],
    eval_set: Sequence[Example],
    configs: Sequence[tuple[int, int]],
    train_cfg: TrainConfig,
    beam_cfg: BeamConfig,
    model_cfg: ModelConfig,
    repeats: int = 3,
) -> list[CapacityRow]:
    """Train one UnitY per (N_1st, N_2nd) with identical settings and seed.

    Speed-up is relative to the first configuration's median wall-clock.
    """
    if not configs:
        raise ValueError("no capacity configurations")
    ensure_single_thread()
    rows: list[CapacityRow] = []
    for n1, n2 in configs:
        cfg = replace(model_cfg, arch="unity", n_1st=n1, n_2nd=n2)
        model = build_model(cfg, train_cfg.seed)
        diverged = False
        try:
            train(model, train_set, train_cfg)
        except TrainingDiverged as exc:
            log.warning("config %d:%d diverged: %s", n1, n2, exc)
            diverged = True
        model.eval()
        bench = bench_decode([(f"unity-{n1}-{n2}", model)], eval_set, [(beam_cfg.b1, beam_cfg.b2)], repeats, beam_cfg)[0]
        results = _run(model, eval_set, beam_cfg, False)
        if any(r is None for r in results):
            s = None
        else:
            s = score(results, eval_set, model)
        nan = float("nan")
        rows.append(
            CapacityRow(
                n1, n2, model.num_parameters(),
                s.text_bleu if s else nan, s.unit_bleu if s else nan,
                s.text_exact if s else nan, s.unit_exact if s else nan,
                bench.mean_ms, bench.flops, nan, diverged,
            )
        )
    base_ms = rows[0].mean_ms
    for row in rows:
        row.speedup = base_ms / row.mean_ms
    return rows


def write_capacity_csv(path: str | Path, rows: Sequence[CapacityRow]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CAPACITY_HEADER)
        writer.writeheader()
        for row in rows:
            writer.writerow(asdict(row))
