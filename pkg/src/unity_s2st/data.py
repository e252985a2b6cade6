"""Synthetic speech/text/unit triples and the preprocessing applied to them.

Every vocabulary (source symbols, text subwords, units) reserves the first
four ids for PAD, BOS, EOS and MASK. A sentence is a walk of a seeded Markov
chain over source symbols. Each symbol is rendered as ``frames_per_symbol``
noisy copies of a template feature vector, maps injectively to one subword,
and each subword maps to a fixed string of ``units_per_subword`` units.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD, BOS, EOS, MASK = 0, 1, 2, 3
N_SPECIAL = 4

DATASET_MAGIC = "#unity-s2st-dataset"
DATASET_VERSION = 1


@dataclass(frozen=True)
class TaskSpec:
    n_symbols: int = 12
    text_vocab: int = 20
    unit_vocab: int = 28
    frames_per_symbol: int = 8
    units_per_subword: int = 4
    noise: float = 0.05
    min_len: int = 3
    max_len: int = 8
    d_feat: int = 16
    branching: int = 3
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_symbols < 2:
            raise ValueError("need at least two source symbols")
        if self.text_vocab - N_SPECIAL < self.n_symbols:
            raise ValueError("text vocabulary too small for an injective symbol mapping")
        if self.unit_vocab - N_SPECIAL < 2:
            raise ValueError("unit vocabulary too small")
        if self.frames_per_symbol < 2 or self.units_per_subword < 2:
            raise ValueError("frames_per_symbol and units_per_subword must be >= 2")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError("invalid sentence length range")
        if not 1 <= self.branching < self.n_symbols:
            raise ValueError("branching must lie in [1, n_symbols)")

    @property
    def src_vocab(self) -> int:
        return self.n_symbols + N_SPECIAL


@dataclass
class Example:
    id: str
    features: np.ndarray  # (T, d_feat)
    text: list[int]  # subword ids, no BOS/EOS
    units: list[int]  # collapsed unit ids, no EOS
    source: list[int] = field(default_factory=list)  # source-symbol ids (ASR target)

    @property
    def length_ratio(self) -> float:
        return len(self.units) / self.features.shape[0]


@dataclass
class Task:
    """The fixed lookup tables a :class:`TaskSpec` expands into."""

    spec: TaskSpec
    templates: np.ndarray  # (n_symbols, d_feat)
    symbol_to_subword: np.ndarray  # (n_symbols,)
    subword_units: dict[int, list[int]]
    initial: np.ndarray  # (n_symbols,)
    transition: np.ndarray  # (n_symbols, n_symbols)

    @classmethod
    def build(cls, spec: TaskSpec) -> "Task":
        rng = np.random.default_rng([spec.seed, 1])
        templates = rng.standard_normal((spec.n_symbols, spec.d_feat))
        subwords = rng.permutation(spec.text_vocab - N_SPECIAL)[: spec.n_symbols] + N_SPECIAL
        unit_ids = np.arange(N_SPECIAL, spec.unit_vocab)
        subword_units = {}
        for sw in sorted(subwords.tolist()):
            seq: list[int] = []
            while len(seq) < spec.units_per_subword:
                u = int(rng.choice(unit_ids))
                if not seq or seq[-1] != u:
                    seq.append(u)
            subword_units[sw] = seq
        initial = rng.dirichlet(np.ones(spec.n_symbols))
        transition = np.zeros((spec.n_symbols, spec.n_symbols))
        for s in range(spec.n_symbols):
            others = [o for o in range(spec.n_symbols) if o != s]
            succ = rng.choice(others, size=spec.branching, replace=False)
            transition[s, succ] = rng.dirichlet(np.ones(spec.branching))
        return cls(spec, templates, subwords, subword_units, initial, transition)

    def sample_symbols(self, rng: np.random.Generator) -> list[int]:
        spec = self.spec
        length = int(rng.integers(spec.min_len, spec.max_len + 1))
        sym = [int(rng.choice(spec.n_symbols, p=self.initial))]
        while len(sym) < length:
            sym.append(int(rng.choice(spec.n_symbols, p=self.transition[sym[-1]])))
        return sym

    def text_of(self, symbols: Sequence[int]) -> list[int]:
        return [int(self.symbol_to_subword[s]) for s in symbols]

    def units_of(self, text: Sequence[int]) -> list[int]:
        raw = [u for sw in text for u in self.subword_units[sw]]
        return collapse_units(raw)

    def render(self, symbols: Sequence[int], rng: np.random.Generator) -> np.ndarray:
        f = self.spec.frames_per_symbol
        feats = np.repeat(self.templates[list(symbols)], f, axis=0)
        if self.spec.noise > 0:
            feats = feats + self.spec.noise * rng.standard_normal(feats.shape)
        return normalize_utterance(feats)

    def make_example(self, idx: str, symbols: Sequence[int], rng: np.random.Generator) -> Example:
        text = self.text_of(symbols)
        return Example(idx, self.render(symbols, rng), text, self.units_of(text), [s + N_SPECIAL for s in symbols])

    def unigram_distribution(self) -> np.ndarray:
        """Exact expected subword frequencies of sampled sentences, indexed by text id."""
        spec = self.spec
        lengths = np.arange(spec.min_len, spec.max_len + 1)
        counts = np.zeros(spec.n_symbols)
        dist = self.initial.copy()
        for pos in range(spec.max_len):
            weight = np.mean(lengths > pos)
            counts += weight * dist
            dist = dist @ self.transition
        out = np.zeros(spec.text_vocab)
        out[self.symbol_to_subword] = counts / counts.sum()
        return out


def normalize_utterance(feats: np.ndarray) -> np.ndarray:
    """Per-utterance mean/variance normalization of every feature dimension."""
    mu = feats.mean(axis=0, keepdims=True)
    sd = feats.std(axis=0, keepdims=True)
    return (feats - mu) / np.maximum(sd, 1e-8)


def collapse_units(raw: Iterable[int]) -> list[int]:
    out: list[int] = []
    for u in raw:
        if not out or out[-1] != u:
            out.append(int(u))
    return out


def length_ratio_filter(example: Example, threshold: float) -> bool:
    """Keep iff |U| / T <= threshold."""
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    frames = example.features.shape[0]
    if frames == 0:
        raise ValueError("utterance has no frames")
    return len(example.units) / frames <= threshold


def _unique_sentences(task: Task, n: int, rng: np.random.Generator) -> list[list[int]]:
    seen: set[tuple[int, ...]] = set()
    out = []
    attempts = 0
    while len(out) < n:
        attempts += 1
        if attempts > 200 * n + 1000:
            raise ValueError(f"cannot draw {n} distinct sentences from this task")
        sym = task.sample_symbols(rng)
        key = tuple(sym)
        if key not in seen:
            seen.add(key)
            out.append(sym)
    return out


def gen_dataset(spec: TaskSpec, n: int, prefix: str = "utt") -> list[Example]:
    """``n`` examples over distinct sentences, fully determined by ``spec.seed``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return gen_splits(spec, {prefix: n})[prefix]


def gen_splits(spec: TaskSpec, sizes: dict[str, int]) -> dict[str, list[Example]]:
    """Disjoint splits: one pool of distinct sentences is drawn and then partitioned."""
    task = Task.build(spec)
    rng = np.random.default_rng([spec.seed, 2])
    sentences = _unique_sentences(task, sum(sizes.values()), rng)
    splits: dict[str, list[Example]] = {}
    start = 0
    for name, size in sizes.items():
        exs = []
        for i, sym in enumerate(sentences[start : start + size]):
            noise_rng = np.random.default_rng([spec.seed, 3, start + i])
            exs.append(task.make_example(f"{name}-{i:05d}", sym, noise_rng))
        splits[name] = exs
        start += size
    return splits


def gen_text_corpus(spec: TaskSpec, n: int) -> list[list[int]]:
    """Unlabeled subword sentences from the task's text distribution (not de-duplicated)."""
    task = Task.build(spec)
    rng = np.random.default_rng([spec.seed, 4])
    return [task.text_of(task.sample_symbols(rng)) for _ in range(n)]


# --------------------------------------------------------------------------
# dataset files


def write_dataset(path: str | Path, examples: Sequence[Example], spec: TaskSpec | None = None) -> None:
    """Line-per-example TSV: id, row-major features, text ids, unit ids, source ids.

    The first line is a header carrying the format version and the feature dim.
    """
    if not examples:
        raise ValueError("no examples to write")
    d_feat = examples[0].features.shape[1]
    header = f"{DATASET_MAGIC}\tversion={DATASET_VERSION}\td_feat={d_feat}"
    if spec is not None:
        header += "\ttask=" + ",".join(f"{k}:{v}" for k, v in asdict(spec).items())
    lines = [header]
    for ex in examples:
        feats = " ".join(repr(float(v)) for v in ex.features.reshape(-1))
        lines.append(
            "\t".join(
                [ex.id, feats, " ".join(map(str, ex.text)), " ".join(map(str, ex.units)), " ".join(map(str, ex.source))]
            )
        )
    Path(path).write_text("\n".join(lines) + "\n")


def read_dataset(path: str | Path) -> list[Example]:
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith(DATASET_MAGIC):
        raise ValueError(f"{path}: missing dataset header")
    meta = dict(kv.split("=", 1) for kv in lines[0].split("\t")[1:])
    if int(meta.get("version", -1)) != DATASET_VERSION:
        raise ValueError(f"{path}: unsupported dataset version {meta.get('version')}")
    d_feat = int(meta["d_feat"])
    out = []
    for lineno, line in enumerate(lines[1:], start=2):
        cols = line.split("\t")
        if len(cols) not in (4, 5):
            raise ValueError(f"{path}:{lineno}: expected 4 or 5 tab-separated fields")
        vals = np.array([float(v) for v in cols[1].split()])
        if vals.size % d_feat:
            raise ValueError(f"{path}:{lineno}: feature count not divisible by d_feat={d_feat}")
        ints = [[int(v) for v in c.split()] for c in cols[2:]]
        source = ints[2] if len(ints) > 2 else []
        out.append(Example(cols[0], vals.reshape(-1, d_feat), ints[0], ints[1], source))
    return out


def task_spec_from_header(path: str | Path) -> TaskSpec | None:
    with open(path) as fh:
        first = fh.readline().rstrip("\n")
    meta = dict(kv.split("=", 1) for kv in first.split("\t")[1:])
    if "task" not in meta:
        return None
    fields = {}
    for item in meta["task"].split(","):
        k, v = item.split(":", 1)
        fields[k] = float(v) if k == "noise" else int(v)
    return TaskSpec(**fields)


def ceil_div(a: int, b: int) -> int:
    return -(-a // b)


def unit_spectrogram(units: Sequence[int], unit_vocab: int, d_spec: int, seed: int = 0) -> np.ndarray:
    """Synthetic target spectrogram: a fixed random frame per unit id repeated by a per-unit duration (1 or 2)."""
    rng = np.random.default_rng([seed, 5])
    table = rng.standard_normal((unit_vocab, d_spec))
    frames = [table[u] for u in units for _ in range(1 + u % 2)]
    return np.stack(frames) if frames else np.zeros((0, d_spec))

