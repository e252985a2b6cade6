"""Command-line entry point: ``unity-s2st <subcommand> [--config F] [--seed N] [--out DIR] [--override k=v ...]``.

Exit codes: 0 success, 1 validation error (arguments, config, missing inputs),
2 runtime failure. Every run writes ``config.resolved`` and ``manifest.json``
into its output directory.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
import time
from pathlib import Path
from typing import Callable, Sequence

import torch

from . import __version__
from .config import ConfigError, ResolvedConfig, load_config, parse_pairs
from .data import gen_splits, gen_text_corpus, read_dataset, task_spec_from_header, write_dataset

log = logging.getLogger("unity_s2st")

SUBCOMMANDS = ("gen-data", "pretrain-text", "train", "decode", "eval", "bench", "sweep", "grad-check")
GRAD_TOLERANCE = 1e-4


class ValidationError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # exit 1 instead of argparse's 2
        self.print_usage(sys.stderr)
        raise ValidationError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="unity-s2st", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("subcommand", choices=SUBCOMMANDS)
    parser.add_argument("--config", help="flat key = value config file")
    parser.add_argument("--seed", type=int, help="sets train.seed and pretrain.seed")
    parser.add_argument("--out", help="run directory (default runs/<subcommand>)")
    parser.add_argument("--override", action="append", nargs="+", default=[], metavar="KEY=VALUE")
    return parser


# --------------------------------------------------------------------------
# helpers


def _data_file(cfg: ResolvedConfig, name: str) -> Path:
    if not cfg.paths.data:
        raise ValidationError("paths.data is not set")
    path = Path(cfg.paths.data) / name
    if not path.exists():
        raise ValidationError(f"missing input file {path}")
    return path


def _load_split(cfg: ResolvedConfig, split: str):
    path = _data_file(cfg, f"{split}.tsv")
    spec = task_spec_from_header(path)
    if spec is not None and spec != cfg.data:
        raise ValidationError(f"{path}: dataset was generated with a different data section ({spec})")
    return read_dataset(path)


def _checkpoint(path: str, key: str) -> Path:
    if not path:
        raise ValidationError(f"{key} is not set")
    if not Path(path).exists():
        raise ValidationError(f"missing checkpoint {path}")
    return Path(path)


def _read_corpus(path: Path) -> list[list[int]]:
    return [[int(t) for t in line.split()] for line in path.read_text().splitlines() if line.strip()]


# --------------------------------------------------------------------------
# subcommands; each returns the list of files it wrote


def cmd_gen_data(cfg: ResolvedConfig, out: Path) -> list[Path]:
    split = cfg.split
    splits = gen_splits(cfg.data, {"train": split.train, "dev": split.dev, "test": split.test})
    files = []
    for name, examples in splits.items():
        write_dataset(out / f"{name}.tsv", examples, cfg.data)
        files.append(out / f"{name}.tsv")
    corpus = gen_text_corpus(cfg.data, split.text_corpus)
    (out / "text_corpus.txt").write_text("".join(" ".join(map(str, s)) + "\n" for s in corpus))
    files.append(out / "text_corpus.txt")
    return files


def cmd_pretrain_text(cfg: ResolvedConfig, out: Path) -> list[Path]:
    from .plotting import plot_loss
    from .training import denoise_pretrain_text_decoder, export_text_decoder, write_loss_log

    corpus = _read_corpus(_data_file(cfg, "text_corpus.txt"))
    model_cfg = cfg.model_config(arch="unity")
    model, result = denoise_pretrain_text_decoder(
        corpus, cfg.pretrain.mask_ratio, cfg.pretrain.train_config(), model_cfg, n_text_enc=cfg.pretrain.n_text_enc
    )
    export_text_decoder(model, out / "text_decoder.ckpt")
    write_loss_log(out / "pretrain_loss.csv", result.log)
    plot_loss(result.log, out / "pretrain_loss.png")
    return [out / "text_decoder.ckpt", out / "pretrain_loss.csv", out / "pretrain_loss.png"]


def cmd_train(cfg: ResolvedConfig, out: Path) -> list[Path]:
    from .models import build_model, save_model
    from .plotting import plot_loss
    from .training import load_text_decoder, train, write_loss_log

    examples = _load_split(cfg, "train")
    model_cfg = cfg.model_config()
    model = build_model(model_cfg, cfg.train.seed)
    if cfg.paths.pretrained:
        if model_cfg.arch != "unity":
            raise ValidationError("paths.pretrained applies to unity models only")
        load_text_decoder(model, _checkpoint(cfg.paths.pretrained, "paths.pretrained"), cfg.pretrain.freeze_ffn)
    result = train(model, examples, cfg.train)
    save_model(out / "model.ckpt", model, {"steps": result.steps})
    write_loss_log(out / "loss_log.csv", result.log)
    plot_loss(result.log, out / "loss.png")
    return [out / "model.ckpt", out / "loss_log.csv", out / "loss.png"]


def cmd_decode(cfg: ResolvedConfig, out: Path) -> list[Path]:
    from .evaluation import decode_dataset
    from .models import load_model
    from .search import write_decodes

    model = load_model(_checkpoint(cfg.paths.checkpoint, "paths.checkpoint"))
    examples = _load_split(cfg, cfg.paths.split)
    results = decode_dataset(model, examples, cfg.beam)
    write_decodes(out / "decodes.tsv", results)
    return [out / "decodes.tsv"]


def cmd_eval(cfg: ResolvedConfig, out: Path) -> list[Path]:
    from .evaluation import score
    from .metrics import write_metric_rows
    from .search import read_decodes

    decodes_path = _checkpoint(cfg.paths.decodes, "paths.decodes")
    results = read_decodes(decodes_path)
    examples = {ex.id: ex for ex in _load_split(cfg, cfg.paths.split)}
    missing = [r.id for r in results if r.id not in examples]
    if missing:
        raise ValidationError(f"decodes reference unknown ids, e.g. {missing[0]!r}")
    scores = score(results, [examples[r.id] for r in results])
    write_metric_rows(out / "metrics.csv", scores.rows(cfg.paths.split, str(decodes_path)))
    for key, value in vars(scores).items():
        print(f"{key}\t{value}")
    return [out / "metrics.csv"]


def cmd_bench(cfg: ResolvedConfig, out: Path) -> list[Path]:
    from .bench import bench_decode, write_bench_csv
    from .models import load_model
    from .plotting import plot_bench

    paths = [p.strip() for p in cfg.paths.checkpoints.split(",") if p.strip()]
    if not paths:
        raise ValidationError("paths.checkpoints is empty")
    models = []
    for p in paths:
        model = load_model(_checkpoint(p, "paths.checkpoints"))
        models.append((model.cfg.arch, model))
    examples = _load_split(cfg, cfg.paths.split)[: cfg.bench.n_utts]
    rows = bench_decode(models, examples, cfg.bench.pairs(), cfg.bench.repeats, cfg.beam, cfg.bench.force_lengths)
    write_bench_csv(out / "bench.csv", rows)
    plot_bench(rows, out / "bench.png")
    return [out / "bench.csv", out / "bench.png"]


def cmd_sweep(cfg: ResolvedConfig, out: Path) -> list[Path]:
    from .bench import capacity_sweep, write_capacity_csv
    from .plotting import plot_capacity

    train_set = _load_split(cfg, "train")
    eval_set = _load_split(cfg, cfg.paths.split)[: cfg.bench.n_utts]
    rows = capacity_sweep(
        train_set, eval_set, parse_pairs(cfg.bench.capacity), cfg.train, cfg.beam, cfg.model_config(arch="unity"),
        cfg.bench.repeats,
    )
    write_capacity_csv(out / "capacity.csv", rows)
    plot_capacity(rows, out / "capacity.png")
    return [out / "capacity.csv", out / "capacity.png"]


class GradCheckFailed(RuntimeError):
    pass


def cmd_grad_check(cfg: ResolvedConfig, out: Path) -> list[Path]:
    from .gradcheck import run_all

    results = run_all()
    lines = ["check,max_rel_error"] + [f"{k},{v!r}" for k, v in results.items()]
    (out / "gradcheck.csv").write_text("\n".join(lines) + "\n")
    for key, value in results.items():
        print(f"{key:32s} {value:.3e}")
    worst = max(results, key=results.get)
    print(f"max relative error {results[worst]:.3e} ({worst})")
    if results[worst] >= GRAD_TOLERANCE:
        raise GradCheckFailed(f"{worst}: relative error {results[worst]:.3e} >= {GRAD_TOLERANCE}")
    return [out / "gradcheck.csv"]


COMMANDS: dict[str, Callable[[ResolvedConfig, Path], list[Path]]] = {
    "gen-data": cmd_gen_data,
    "pretrain-text": cmd_pretrain_text,
    "train": cmd_train,
    "decode": cmd_decode,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "sweep": cmd_sweep,
    "grad-check": cmd_grad_check,
}


# --------------------------------------------------------------------------


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_manifest(out: Path, args, status: str, files: Sequence[Path], started: float, error: str = "") -> None:
    manifest = {
        "subcommand": args.subcommand,
        "argv": sys.argv[1:] if args.argv is None else list(args.argv),
        "seed": args.seed,
        "status": status,
        "error": error,
        "started": started,
        "elapsed_s": time.time() - started,
        "outputs": {p.name: _sha256(p) for p in files if p.exists()},
        "versions": {"package": __version__, "python": platform.python_version(), "torch": torch.__version__},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


def run(argv: Sequence[str] | None = None) -> int:
    """Parse ``argv``, execute one subcommand and return its exit code."""
    try:
        args = build_parser().parse_args(argv)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    args.argv = argv
    overrides = [item for group in args.override for item in group]
    if args.seed is not None:
        overrides += [f"train.seed={args.seed}", f"pretrain.seed={args.seed}"]
    try:
        cfg = load_config(args.config, overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1

    out = Path(args.out or Path("runs") / args.subcommand)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out / "config.resolved")
    handler = logging.FileHandler(out / "run.log", mode="w")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    log.addHandler(handler)
    log.setLevel(logging.INFO)
    torch.set_num_threads(1)
    started = time.time()
    files: list[Path] = [out / "config.resolved"]
    try:
        files += COMMANDS[args.subcommand](cfg, out)
    except (ValidationError, ConfigError) as exc:
        log.error("validation error: %s", exc)
        print(f"error: {exc}", file=sys.stderr)
        _write_manifest(out, args, "invalid", files, started, str(exc))
        return 1
    except Exception as exc:
        log.exception("run failed")
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        _write_manifest(out, args, "failed", files, started, f"{type(exc).__name__}: {exc}")
        return 2
    finally:
        log.removeHandler(handler)
        handler.close()
    _write_manifest(out, args, "ok", files, started)
    print(f"wrote {len(files)} files to {out}")
    return 0


def main() -> None:
    sys.exit(run())
