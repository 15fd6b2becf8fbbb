"""Data ingestion and generation.

Covers the Criteo-style 40-column TSV and the libffm text interchange format,
vocabulary building with a reserved unknown/missing index 0 per field,
instance encoding, deterministic train/test splits, and synthetic datasets
labelled by a randomly drawn field-aware factorization teacher.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .diffcore import rng_stream, sigmoid
from .errors import ConfigError, DataError, ParseError

DEFAULT_MIN_COUNT = 10
DEFAULT_MAX_BUCKET = 40


@dataclass(frozen=True)
class CriteoSchema:
    """Column layout of the Criteo display-ads TSV."""

    n_continuous: int = 13
    n_categorical: int = 26

    @property
    def n_fields(self) -> int:
        return self.n_continuous + self.n_categorical

    @property
    def n_columns(self) -> int:
        return 1 + self.n_fields


@dataclass(frozen=True)
class RawInstance:
    """One parsed example before encoding; absent fields are None."""

    label: int
    continuous: tuple
    categorical: tuple


@dataclass(frozen=True)
class Instance:
    """One encoded example: exactly one (feature index, value) per field."""

    label: int
    fields: tuple


def parse_criteo_line(line: str, schema: CriteoSchema = CriteoSchema(), lineno=None) -> RawInstance:
    """Parse one tab-separated Criteo row: label, I1..I13, C1..C26.

    Empty columns become None. Raises ParseError on a wrong column count or a
    non-binary label.
    """
    cols = line.rstrip("\n").split("\t")
    if len(cols) != schema.n_columns:
        raise ParseError(
            f"expected {schema.n_columns} tab-separated columns, got {len(cols)}", lineno
        )
    if cols[0] not in ("0", "1"):
        raise ParseError(f"label must be 0 or 1, got {cols[0]!r}", lineno)
    label = int(cols[0])
    cont = []
    for raw in cols[1 : 1 + schema.n_continuous]:
        if raw == "":
            cont.append(None)
        else:
            try:
                cont.append(float(raw))
            except ValueError:
                raise ParseError(f"bad continuous value {raw!r}", lineno) from None
    cat = tuple(tok if tok != "" else None for tok in cols[1 + schema.n_continuous :])
    return RawInstance(label=label, continuous=tuple(cont), categorical=cat)


def parse_ffm_line(line: str, n_fields: int, lineno=None) -> Instance:
    """Parse one libffm line: "label field:index:value ...".

    After grouping, every field in [0, n_fields) must appear exactly once.
    """
    tokens = line.split()
    if not tokens:
        raise ParseError("empty line", lineno)
    if tokens[0] not in ("0", "1"):
        raise ParseError(f"label must be 0 or 1, got {tokens[0]!r}", lineno)
    label = int(tokens[0])
    seen = {}
    for tok in tokens[1:]:
        parts = tok.split(":")
        if len(parts) != 3:
            raise ParseError(f"malformed entry {tok!r} (want field:index:value)", lineno)
        try:
            f, i, v = int(parts[0]), int(parts[1]), float(parts[2])
        except ValueError:
            raise ParseError(f"malformed entry {tok!r}", lineno) from None
        if f < 0 or f >= n_fields:
            raise ParseError(f"field {f} outside [0, {n_fields})", lineno)
        if i < 0:
            raise ParseError(f"negative feature index in {tok!r}", lineno)
        if f in seen:
            raise ParseError(f"duplicate field {f}", lineno)
        seen[f] = (i, v)
    missing = [f for f in range(n_fields) if f not in seen]
    if missing:
        raise ParseError(f"missing fields {missing}", lineno)
    return Instance(label=label, fields=tuple(seen[f] for f in range(n_fields)))


def bucketize_continuous(v, max_bucket: int = DEFAULT_MAX_BUCKET) -> int:
    """Log-scale bucket for a continuous value; 0 is reserved for absent."""
    if v is None:
        return 0
    if v < 0:
        raise DataError(f"continuous value must be non-negative, got {v}")
    return min(1 + int(math.floor(math.log2(1.0 + v))), max_bucket)


@dataclass
class FieldVocab:
    """Per-field token -> index map.

    kind is "categorical" (counted tokens, index 0 reserved for
    unknown/missing/rare), "bucket" (identity over log buckets, bucket 0 is
    the missing bucket) or "indexed" (already-encoded libffm input).
    """

    kind: str
    size: int
    tokens: dict = field(default_factory=dict)

    def encode_token(self, token) -> int:
        if self.kind == "categorical":
            if token is None:
                return 0
            return self.tokens.get(token, 0)
        raise ConfigError(f"encode_token is only defined for categorical fields, not {self.kind}")


class Vocabulary:
    """All per-field maps plus the thresholds they were built with."""

    def __init__(self, fields, min_count: int, max_bucket: int):
        self.fields = list(fields)
        self.min_count = min_count
        self.max_bucket = max_bucket

    @property
    def n_fields(self) -> int:
        return len(self.fields)

    @property
    def sizes(self):
        return tuple(fv.size for fv in self.fields)

    def to_json(self) -> dict:
        out_fields = []
        for fv in self.fields:
            entry = {"kind": fv.kind, "size": fv.size}
            if fv.kind == "categorical":
                entry["tokens"] = fv.tokens
            out_fields.append(entry)
        return {
            "version": 1,
            "min_count": self.min_count,
            "max_bucket": self.max_bucket,
            "fields": out_fields,
        }

    @classmethod
    def from_json(cls, blob: dict) -> "Vocabulary":
        if blob.get("version") != 1:
            raise ConfigError(f"unsupported vocabulary version {blob.get('version')!r}")
        fields = [
            FieldVocab(kind=e["kind"], size=int(e["size"]), tokens=e.get("tokens", {}))
            for e in blob["fields"]
        ]
        return cls(fields, int(blob["min_count"]), int(blob["max_bucket"]))

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=1, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))


def build_vocab(
    instances,
    schema: CriteoSchema = CriteoSchema(),
    min_count: int = DEFAULT_MIN_COUNT,
    max_bucket: int = DEFAULT_MAX_BUCKET,
) -> Vocabulary:
    """One pass over training RawInstances.

    Categorical tokens seen fewer than `min_count` times share index 0 with
    unknowns; kept tokens get contiguous indices from 1 in first-seen order.
    Continuous fields map straight to their log buckets (identity vocabulary
    of size max_bucket + 1), so the encoded index equals the bucket.
    """
    counters = [Counter() for _ in range(schema.n_categorical)]
    n_seen = 0
    for raw in instances:
        n_seen += 1
        for slot, tok in enumerate(raw.categorical):
            if tok is not None:
                counters[slot][tok] += 1
    if n_seen == 0:
        raise ConfigError("cannot build a vocabulary from an empty stream")

    fields = [FieldVocab(kind="bucket", size=max_bucket + 1) for _ in range(schema.n_continuous)]
    for counter in counters:
        tokens = {}
        for tok, cnt in counter.items():  # first-seen order
            if cnt >= min_count:
                tokens[tok] = len(tokens) + 1
        fields.append(FieldVocab(kind="categorical", size=len(tokens) + 1, tokens=tokens))
    return Vocabulary(fields, min_count=min_count, max_bucket=max_bucket)


def encode(raw: RawInstance, vocab: Vocabulary) -> Instance:
    """Encode a RawInstance against a built vocabulary; unknowns go to 0."""
    entries = []
    for slot, v in enumerate(raw.continuous):
        fv = vocab.fields[slot]
        entries.append((bucketize_continuous(v, fv.size - 1), 1.0))
    offset = len(raw.continuous)
    for slot, tok in enumerate(raw.categorical):
        entries.append((vocab.fields[offset + slot].encode_token(tok), 1.0))
    return Instance(label=raw.label, fields=tuple(entries))


@dataclass
class Dataset:
    """Column-major view of encoded instances: one active feature per field."""

    idx: np.ndarray  # (N, n) int64 per-field feature indices
    val: np.ndarray  # (N, n) float32 instance values
    y: np.ndarray  # (N,) int8 labels

    @property
    def n_rows(self) -> int:
        return self.idx.shape[0]

    @property
    def n_fields(self) -> int:
        return self.idx.shape[1]

    @classmethod
    def empty(cls, n_fields: int) -> "Dataset":
        return cls(
            idx=np.zeros((0, n_fields), dtype=np.int64),
            val=np.zeros((0, n_fields), dtype=np.float32),
            y=np.zeros(0, dtype=np.int8),
        )

    @classmethod
    def from_instances(cls, instances, n_fields: int) -> "Dataset":
        rows = list(instances)
        if not rows:
            return cls.empty(n_fields)
        idx = np.array([[f[0] for f in inst.fields] for inst in rows], dtype=np.int64)
        val = np.array([[f[1] for f in inst.fields] for inst in rows], dtype=np.float32)
        y = np.array([inst.label for inst in rows], dtype=np.int8)
        return cls(idx=idx, val=val, y=y)

    def subset(self, indices) -> "Dataset":
        return Dataset(idx=self.idx[indices], val=self.val[indices], y=self.y[indices])


def _format_value(v: float) -> str:
    if v == int(v):
        return str(int(v))
    return repr(float(v))


def write_ffm_file(path, dataset: Dataset) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in range(dataset.n_rows):
            parts = [str(int(dataset.y[r]))]
            for f in range(dataset.n_fields):
                parts.append(
                    f"{f}:{int(dataset.idx[r, f])}:{_format_value(float(dataset.val[r, f]))}"
                )
            fh.write(" ".join(parts))
            fh.write("\n")


def load_ffm_file(path, n_fields: int) -> Dataset:
    instances = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            instances.append(parse_ffm_line(line, n_fields, lineno=lineno))
    return Dataset.from_instances(instances, n_fields)


def sniff_ffm_fields(path) -> int:
    """Field count of the first non-empty libffm line (0 for an empty file)."""
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            tokens = line.split()
            if tokens:
                return len(tokens) - 1
    return 0


def split_indices(n_rows: int, train_fraction: float, seed: int):
    """Deterministic disjoint, exhaustive permutation split."""
    if not 0.0 < train_fraction < 1.0:
        raise ConfigError(f"split ratio must be in (0, 1), got {train_fraction}")
    perm = rng_stream(seed, "split").permutation(n_rows)
    n_train = int(round(train_fraction * n_rows))
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


def write_split_manifest(path, seed: int, ratio: float, counts: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"seed={seed}\n")
        fh.write(f"ratio={ratio!r}\n")
        for name, count in counts.items():
            fh.write(f"rows_{name}={count}\n")


@dataclass
class Teacher:
    """A randomly drawn field-aware factorization scorer used as ground truth.

    Parameter names mirror the trainable FFM variant so the teacher can be
    saved as an ordinary checkpoint and evaluated with the same tooling.
    """

    embed: np.ndarray  # (m, n, k) float64
    linear_w: np.ndarray  # (m,) float64
    linear_b: np.ndarray  # (1,) float64
    vocab_sizes: tuple

    @property
    def n_fields(self) -> int:
        return len(self.vocab_sizes)

    @property
    def embed_dim(self) -> int:
        return self.embed.shape[2]

    @property
    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.vocab_sizes)[:-1]]).astype(np.int64)

    def scores(self, dataset: Dataset) -> np.ndarray:
        rows = dataset.idx + self.offsets[None, :]
        lin = self.linear_b[0] + np.sum(self.linear_w[rows] * dataset.val, axis=1)
        n = self.n_fields
        ii, jj = np.triu_indices(n, k=1)
        em = self.embed[rows] * dataset.val[:, :, None, None]
        pair = np.einsum("bpk,bpk->bp", em[:, ii, jj, :], em[:, jj, ii, :])
        return lin + pair.sum(axis=1)

    def probabilities(self, dataset: Dataset) -> np.ndarray:
        return sigmoid(self.scores(dataset))

    def params(self) -> dict:
        return {"embed": self.embed, "linear_w": self.linear_w, "linear_b": self.linear_b}


@dataclass
class SynthResult:
    train: Dataset
    test: Dataset
    teacher: Teacher


def synth_generate(
    n_fields: int,
    vocab_sizes,
    k: int,
    seed: int,
    count: int,
    test_count: int = 0,
    flip_prob: float = 0.0,
    score_std: float = 1.6,
    linear_std: float = 0.3,
) -> SynthResult:
    """Draw an FFM teacher, sample uniform instances and Bernoulli labels.

    The teacher's embedding scale is set so the pairwise-interaction score has
    roughly `score_std` standard deviation, which keeps the label signal
    strong without saturating the sigmoid. `flip_prob` optionally flips each
    label independently, simulating label noise.
    """
    if isinstance(vocab_sizes, int):
        vocab_sizes = (vocab_sizes,) * n_fields
    vocab_sizes = tuple(int(s) for s in vocab_sizes)
    if len(vocab_sizes) != n_fields:
        raise ConfigError(f"expected {n_fields} vocab sizes, got {len(vocab_sizes)}")
    if k < 1:
        raise ConfigError(f"embedding size must be >= 1, got {k}")
    if any(s < 2 for s in vocab_sizes):
        raise ConfigError("every synthetic field needs at least 2 features")
    if not 0.0 <= flip_prob < 1.0:
        raise ConfigError(f"flip probability must be in [0, 1), got {flip_prob}")
    if count < 0 or test_count < 0:
        raise ConfigError("row counts must be non-negative")

    m = sum(vocab_sizes)
    n_pairs = n_fields * (n_fields - 1) // 2
    emb_scale = (score_std**2 / max(n_pairs * k, 1)) ** 0.25

    g = rng_stream(seed, "teacher")
    teacher = Teacher(
        embed=g.normal(0.0, emb_scale, size=(m, n_fields, k)),
        linear_w=g.normal(0.0, linear_std, size=m),
        linear_b=np.zeros(1, dtype=np.float64),
        vocab_sizes=vocab_sizes,
    )

    total = count + test_count
    rows_rng = rng_stream(seed, "rows")
    idx = np.empty((total, n_fields), dtype=np.int64)
    for f, size in enumerate(vocab_sizes):
        idx[:, f] = rows_rng.integers(0, size, size=total)
    val = np.ones((total, n_fields), dtype=np.float32)
    full = Dataset(idx=idx, val=val, y=np.zeros(total, dtype=np.int8))

    if total:
        probs = teacher.probabilities(full)
        y = (rng_stream(seed, "labels").random(total) < probs).astype(np.int8)
        if flip_prob > 0.0:
            flips = rng_stream(seed, "noise").random(total) < flip_prob
            y = np.where(flips, 1 - y, y).astype(np.int8)
        full.y = y

    return SynthResult(
        train=full.subset(slice(0, count)),
        test=full.subset(slice(count, total)),
        teacher=teacher,
    )
