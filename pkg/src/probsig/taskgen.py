"""Composite addition tasks over anchor/key/label token sets.

Datasets are sampled i.i.d. with replacement using numpy's PCG64 generator,
so a (spec, seed) pair always produces the same file.
"""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np


class TaskError(ValueError):
    pass


class TaskKind(str, enum.Enum):
    ADD = "add"
    ADD_SAME_DOMAIN = "add_same"
    MOD_ADD = "mod"

    @classmethod
    def parse(cls, value: "str | TaskKind") -> "TaskKind":
        if isinstance(value, cls):
            return value
        aliases = {"add": cls.ADD, "add_same": cls.ADD_SAME_DOMAIN, "addsame": cls.ADD_SAME_DOMAIN,
                   "same": cls.ADD_SAME_DOMAIN, "mod": cls.MOD_ADD, "modadd": cls.MOD_ADD}
        try:
            return aliases[str(value).lower().replace("-", "_")]
        except KeyError:
            raise TaskError(f"unknown task kind {value!r}") from None


DEFAULT_ANCHORS = tuple(range(11, 21))
DEFAULT_KEYS = tuple(range(101, 141))


@dataclass(frozen=True)
class TaskSpec:
    kind: TaskKind
    anchors: tuple[int, ...] = DEFAULT_ANCHORS
    keys: tuple[int, ...] = DEFAULT_KEYS
    # label domain Y; only consulted by ADD_SAME_DOMAIN (defaults to the keys)
    labels: tuple[int, ...] | None = None
    n_samples: int = 50000
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", TaskKind.parse(self.kind))
        object.__setattr__(self, "anchors", tuple(sorted(set(int(a) for a in self.anchors))))
        object.__setattr__(self, "keys", tuple(sorted(set(int(z) for z in self.keys))))
        if self.labels is not None:
            object.__setattr__(self, "labels", tuple(sorted(set(int(y) for y in self.labels))))
        if not self.anchors or not self.keys:
            raise TaskError("anchor and key sets must be nonempty")
        if min(self.anchors) < 1 or min(self.keys) < 1:
            raise TaskError("tokens must be positive integers")
        if self.kind is not TaskKind.ADD_SAME_DOMAIN and set(self.anchors) & set(self.keys):
            raise TaskError("anchor set A and key set Z must be disjoint")
        if self.kind is TaskKind.ADD_SAME_DOMAIN:
            lo = min(self.label_domain) - 2 * max(self.anchors)
            if lo < 1:
                raise TaskError("label domain too small: keys Y - a1 - a2 would be non-positive")

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "anchors": list(self.anchors), "keys": list(self.keys),
                "labels": None if self.labels is None else list(self.labels),
                "n_samples": self.n_samples, "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        labels = d.get("labels")
        return cls(d["kind"], tuple(d["anchors"]), tuple(d["keys"]), None if labels is None else tuple(labels),
                   int(d["n_samples"]), int(d["seed"]))

    @property
    def label_domain(self) -> tuple[int, ...]:
        """Y for ADD_SAME_DOMAIN, Z for MOD_ADD, attainable sums for ADD."""
        if self.kind is TaskKind.ADD_SAME_DOMAIN:
            return self.labels if self.labels is not None else self.keys
        if self.kind is TaskKind.MOD_ADD:
            return self.keys
        sums = {z + a + b for z in self.keys for a in self.anchors for b in self.anchors}
        return tuple(sorted(sums))


def key_domain(kind: TaskKind | str, a1: int, a2: int, spec: TaskSpec) -> tuple[int, ...]:
    kind = TaskKind.parse(kind)
    if kind is TaskKind.ADD_SAME_DOMAIN:
        return tuple(y - a1 - a2 for y in spec.label_domain)
    return spec.keys


def eval_task(kind: TaskKind | str, z: int, a1: int, a2: int, spec: TaskSpec) -> int:
    kind = TaskKind.parse(kind)
    for a in (a1, a2):
        if a not in spec.anchors:
            raise TaskError(f"anchor {a} is not in the anchor set A")
    if kind is TaskKind.ADD_SAME_DOMAIN:
        if z + a1 + a2 not in spec.label_domain:
            raise TaskError(f"key {z} is not in Z_({a1},{a2}) = Y - {a1} - {a2}")
    elif z not in spec.keys:
        raise TaskError(f"key {z} is not in the key set Z")
    s = z + a1 + a2
    if kind is TaskKind.MOD_ADD:
        return min(spec.keys) + s % len(spec.keys)
    return s


@dataclass(frozen=True)
class Sample:
    sequence: tuple[int, int, int]
    label: int


class Vocabulary:
    """Bijection between raw token values and compact ids 0..n-1 (sorted order)."""

    def __init__(self, raw_tokens: Iterable[int]):
        self.raw_tokens = sorted(set(int(t) for t in raw_tokens))
        self._to_id = {t: i for i, t in enumerate(self.raw_tokens)}
        self._lookup = None

    def __len__(self) -> int:
        return len(self.raw_tokens)

    def __contains__(self, tok) -> bool:
        return int(tok) in self._to_id

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and other.raw_tokens == self.raw_tokens

    def __repr__(self) -> str:
        return f"Vocabulary(size={len(self)})"

    def to_id(self, tok: int) -> int:
        try:
            return self._to_id[int(tok)]
        except KeyError:
            raise TaskError(f"token {tok} is not in the vocabulary") from None

    def to_raw(self, idx: int) -> int:
        return self.raw_tokens[idx]

    def ids(self, toks) -> np.ndarray:
        """Vectorised raw -> id mapping."""
        toks = np.asarray(toks, dtype=np.int64)
        if self._lookup is None:
            lut = np.full(self.raw_tokens[-1] + 1, -1, dtype=np.int64)
            lut[self.raw_tokens] = np.arange(len(self))
            self._lookup = lut
        bad = (toks < 0) | (toks >= self._lookup.size)
        out = np.where(bad, -1, self._lookup[np.clip(toks, 0, self._lookup.size - 1)])
        if (out < 0).any():
            raise TaskError(f"token {int(toks[out < 0].flat[0])} is not in the vocabulary")
        return out

    def to_json(self) -> str:
        return json.dumps({str(t): i for i, t in enumerate(self.raw_tokens)}, indent=0)

    @classmethod
    def from_json(cls, text: str) -> "Vocabulary":
        mapping = json.loads(text)
        vocab = cls(int(k) for k in mapping)
        for k, v in mapping.items():
            if vocab.to_id(int(k)) != v:
                raise TaskError("vocabulary file is not in sorted-id order")
        return vocab


@dataclass
class Dataset:
    spec: TaskSpec
    sequences: np.ndarray  # (N, 3) raw tokens [z, a1, a2]
    labels: np.ndarray  # (N,) raw tokens
    vocab: Vocabulary = field(default=None)

    def __post_init__(self):
        self.sequences = np.asarray(self.sequences, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.vocab is None:
            self.vocab = Vocabulary(np.r_[self.sequences.ravel(), self.labels])

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def samples(self) -> list[Sample]:
        return [Sample(tuple(int(t) for t in s), int(y)) for s, y in zip(self.sequences, self.labels)]

    @property
    def seq_ids(self) -> np.ndarray:
        return self.vocab.ids(self.sequences)

    @property
    def label_ids(self) -> np.ndarray:
        return self.vocab.ids(self.labels)

    def to_csv(self) -> str:
        head = f"# task={self.spec.kind.value} seed={self.spec.seed} N={len(self)}\n"
        body = "\n".join(f"{s[0]},{s[1]},{s[2]},{y}" for s, y in zip(self.sequences.tolist(), self.labels.tolist()))
        return head + body + "\n"

    def save(self, path, vocab_path=None) -> None:
        Path(path).write_text(self.to_csv())
        if vocab_path is not None:
            Path(vocab_path).write_text(self.vocab.to_json())

    @classmethod
    def load(cls, path, spec: TaskSpec | None = None) -> "Dataset":
        text = Path(path).read_text().splitlines()
        header = {}
        if text and text[0].startswith("#"):
            for part in text[0][1:].split():
                k, _, v = part.partition("=")
                header[k] = v
            text = text[1:]
        rows = np.array([[int(x) for x in line.split(",")] for line in text if line.strip()], dtype=np.int64)
        if rows.size == 0:
            raise TaskError(f"{path}: no samples")
        if spec is None:
            kind = TaskKind.parse(header.get("task", "add"))
            seed = int(header.get("seed", 0))
            spec = TaskSpec(kind, n_samples=len(rows), seed=seed)
        return cls(spec, rows[:, :3], rows[:, 3])


def generate_dataset(spec: TaskSpec) -> Dataset:
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    anchors = np.array(spec.anchors, dtype=np.int64)
    n = spec.n_samples
    a1 = anchors[rng.integers(0, len(anchors), size=n)]
    a2 = anchors[rng.integers(0, len(anchors), size=n)]
    if spec.kind is TaskKind.ADD_SAME_DOMAIN:
        ys = np.array(spec.label_domain, dtype=np.int64)
        y = ys[rng.integers(0, len(ys), size=n)]
        z = y - a1 - a2
    else:
        keys = np.array(spec.keys, dtype=np.int64)
        z = keys[rng.integers(0, len(keys), size=n)]
        s = z + a1 + a2
        y = min(spec.keys) + s % len(spec.keys) if spec.kind is TaskKind.MOD_ADD else s
    return Dataset(spec, np.stack([z, a1, a2], axis=1), y, task_vocabulary(spec))


def task_vocabulary(spec: TaskSpec) -> Vocabulary:
    """Every token the generator can emit for ``spec`` (anchors, keys, labels)."""
    toks = set(spec.anchors) | set(spec.label_domain)
    if spec.kind is TaskKind.ADD_SAME_DOMAIN:
        toks |= {y - a - b for y in spec.label_domain for a in spec.anchors for b in spec.anchors}
    else:
        toks |= set(spec.keys)
    return Vocabulary(toks)


def vocab_of(dataset: Dataset) -> Vocabulary:
    if len(dataset) == 0:
        raise TaskError("empty dataset")
    return Vocabulary(np.r_[dataset.sequences.ravel(), dataset.labels])
