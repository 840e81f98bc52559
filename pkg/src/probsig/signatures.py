"""Probability signatures of addition datasets and token corpora.

Signature vectors are numpy arrays indexed by vocabulary id; matrices are
``(d_vob, d_vob)`` with row = label token and column = co-occurring token.
Token arguments are *raw* token values.

"x in X" always means set membership: a sequence ``[z, a, a]`` contains
``a`` once.

The analytic signatures are exact conditionals of the sampling process in
:mod:`probsig.taskgen`. Given that an anchor ``a`` occurs, the other anchor
is not uniform: it equals ``a`` with probability ``1/(2|A|-1)`` and every
other anchor with probability ``2/(2|A|-1)``. The pure convolution tables
(uniform other anchor) are exposed too, for comparison.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from .taskgen import Dataset, TaskKind, TaskSpec, Vocabulary, task_vocabulary

Which = Literal["phi_y", "phi_X", "phi_X_given_y", "varphi_X"]


class SignatureError(ValueError):
    pass


# -- empirical ----------------------------------------------------------------

def membership(dataset: Dataset) -> np.ndarray:
    """(N, d_vob) 0/1 matrix: token present in sequence (set semantics)."""
    ids = dataset.seq_ids
    m = np.zeros((len(dataset), len(dataset.vocab)))
    m[np.repeat(np.arange(len(dataset)), ids.shape[1]), ids.ravel()] = 1.0
    return m


def _rows_with(dataset: Dataset, x: int, mem: np.ndarray | None) -> tuple[np.ndarray, np.ndarray]:
    if x not in dataset.vocab:
        raise SignatureError(f"token {x} never appears in the dataset")
    mem = membership(dataset) if mem is None else mem
    rows = mem[:, dataset.vocab.to_id(x)] > 0
    if not rows.any():
        raise SignatureError(f"token {x} never appears in any sequence")
    return mem, rows


def empirical_phi_y(dataset: Dataset, x: int, mem: np.ndarray | None = None) -> np.ndarray:
    _, rows = _rows_with(dataset, x, mem)
    return np.bincount(dataset.label_ids[rows], minlength=len(dataset.vocab)) / rows.sum()


def empirical_phi_X(dataset: Dataset, x: int, mem: np.ndarray | None = None) -> np.ndarray:
    mem, rows = _rows_with(dataset, x, mem)
    return mem[rows].mean(axis=0)


def empirical_phi_X_given_y(dataset: Dataset, x: int, mem: np.ndarray | None = None) -> np.ndarray:
    mem, rows = _rows_with(dataset, x, mem)
    v = len(dataset.vocab)
    labels = dataset.label_ids[rows]
    sums = np.zeros((v, v))
    np.add.at(sums, labels, mem[rows])
    n = np.bincount(labels, minlength=v).astype(np.float64)
    out = np.zeros((v, v))
    nz = n > 0
    out[nz] = sums[nz] / n[nz, None]
    return out


def empirical_varphi_X(dataset: Dataset, nu: int, mem: np.ndarray | None = None) -> np.ndarray:
    rows = dataset.labels == nu
    if not rows.any():
        raise SignatureError(f"token {nu} is never a label")
    mem = membership(dataset) if mem is None else mem
    return mem[rows].mean(axis=0)


def empirical_signature(dataset: Dataset, which: Which, index: int, mem: np.ndarray | None = None) -> np.ndarray:
    fn = {"phi_y": empirical_phi_y, "phi_X": empirical_phi_X,
          "phi_X_given_y": empirical_phi_X_given_y, "varphi_X": empirical_varphi_X}.get(which)
    if fn is None:
        raise SignatureError(f"unknown signature {which!r}")
    return fn(dataset, index, mem)


# -- convolution tables ---------------------------------------------------------

def _uniform(values) -> dict[int, float]:
    values = list(values)
    return {int(v): 1.0 / len(values) for v in values}


def convolve(p: dict[int, float], q: dict[int, float]) -> dict[int, float]:
    out: dict[int, float] = {}
    for a, pa in p.items():
        for b, qb in q.items():
            out[a + b] = out.get(a + b, 0.0) + pa * qb
    return out


def mod_table(p: dict[int, float], k: int) -> dict[int, float]:
    out: dict[int, float] = {}
    for a, pa in p.items():
        out[a % k] = out.get(a % k, 0.0) + pa
    return out


@dataclass(frozen=True)
class ConvolutionTable:
    """Sum distributions of independent uniform anchors A and keys Z."""
    a_plus_z: dict[int, float]
    a_plus_a: dict[int, float]
    a_plus_a_mod: dict[int, float]
    a_plus_z_mod: dict[int, float]

    @classmethod
    def for_spec(cls, spec: TaskSpec) -> "ConvolutionTable":
        ua, uz = _uniform(spec.anchors), _uniform(spec.keys)
        k = len(spec.keys)
        apz, apa = convolve(ua, uz), convolve(ua, ua)
        return cls(apz, apa, mod_table(apa, k), mod_table(apz, k))


# -- analytic -------------------------------------------------------------------

class _TaskModel:
    """Exact joint law of (anchor pair, key, label) for one TaskSpec.

    Everything reduces to the anchor-sum distribution plus a kernel
    ``P(z, y | a1 + a2 = s)`` that depends on the task kind only.
    """

    def __init__(self, spec: TaskSpec):
        self.spec = spec
        self.vocab = task_vocabulary(spec)
        self.anchors = list(spec.anchors)
        na = len(self.anchors)
        self.p_in = (2 * na - 1) / na ** 2  # P(a in X)
        key_tokens = set(spec.keys)
        if spec.kind is TaskKind.ADD_SAME_DOMAIN:
            key_tokens = {y - a - b for y in spec.label_domain for a in self.anchors for b in self.anchors}
        if key_tokens & set(self.anchors):
            raise SignatureError("analytic signatures need keys disjoint from anchors")
        self.sum_dist = convolve(_uniform(self.anchors), _uniform(self.anchors))
        self._kernels: dict[int, dict[tuple[int, int], float]] = {}

    def other_anchor(self, a: int) -> dict[int, float]:
        na = len(self.anchors)
        return {b: (1.0 if b == a else 2.0) / (2 * na - 1) for b in self.anchors}

    def kernel(self, s: int) -> dict[tuple[int, int], float]:
        """P(z, y | a1 + a2 = s) as {(z, y): prob}."""
        if s in self._kernels:
            return self._kernels[s]
        spec = self.spec
        if spec.kind is TaskKind.ADD:
            ker = {(z, z + s): 1.0 / len(spec.keys) for z in spec.keys}
        elif spec.kind is TaskKind.ADD_SAME_DOMAIN:
            ys = spec.label_domain
            ker = {(y - s, y): 1.0 / len(ys) for y in ys}
        else:
            k, lo = len(spec.keys), min(spec.keys)
            ker = {}
            for z in spec.keys:
                key = (z, lo + (z + s) % k)
                ker[key] = ker.get(key, 0.0) + 1.0 / len(spec.keys)
        self._kernels[s] = ker
        return ker

    def _vec(self, entries: dict[int, float]) -> np.ndarray:
        out = np.zeros(len(self.vocab))
        for tok, p in entries.items():
            out[self.vocab.to_id(tok)] += p
        return out

    def _check_anchor(self, a: int) -> None:
        if a not in self.spec.anchors:
            raise SignatureError(f"analytic signatures are indexed by anchors; {a} is not an anchor")

    def phi_y(self, a: int) -> np.ndarray:
        self._check_anchor(a)
        out: dict[int, float] = {}
        for b, q in self.other_anchor(a).items():
            for (_, y), p in self.kernel(a + b).items():
                out[y] = out.get(y, 0.0) + q * p
        return self._vec(out)

    def phi_X(self, a: int) -> np.ndarray:
        self._check_anchor(a)
        out: dict[int, float] = dict(self.other_anchor(a))
        out[a] = 1.0
        for b, q in self.other_anchor(a).items():
            for (z, _), p in self.kernel(a + b).items():
                out[z] = out.get(z, 0.0) + q * p
        return self._vec(out)

    def phi_X_given_y(self, a: int) -> np.ndarray:
        self._check_anchor(a)
        v = len(self.vocab)
        joint = np.zeros((v, v))  # row label, col co-occurring token: P(tok in X, y | a in X)
        label_mass = np.zeros(v)
        ida = self.vocab.to_id(a)
        for b, q in self.other_anchor(a).items():
            idb = self.vocab.to_id(b)
            for (z, y), p in self.kernel(a + b).items():
                iy, iz = self.vocab.to_id(y), self.vocab.to_id(z)
                w = q * p
                label_mass[iy] += w
                joint[iy, iz] += w
                joint[iy, idb] += w if b != a else 0.0
                joint[iy, ida] += w
        out = np.zeros((v, v))
        nz = label_mass > 0
        out[nz] = joint[nz] / label_mass[nz, None]
        return out

    def varphi_X(self, nu: int) -> np.ndarray:
        v = len(self.vocab)
        joint = np.zeros(v)
        total = 0.0
        na = len(self.anchors)
        for a1 in self.anchors:
            for a2 in self.anchors:
                for (z, y), p in self.kernel(a1 + a2).items():
                    if y != nu:
                        continue
                    w = p / na ** 2
                    total += w
                    joint[self.vocab.to_id(z)] += w
                    joint[self.vocab.to_id(a1)] += w
                    if a2 != a1:
                        joint[self.vocab.to_id(a2)] += w
        if total == 0:
            raise SignatureError(f"token {nu} is never a label")
        return joint / total

    def outcomes(self):
        """Yield (probability, member tokens, label) over the whole sample space."""
        na = len(self.anchors)
        for a1 in self.anchors:
            for a2 in self.anchors:
                for (z, y), p in self.kernel(a1 + a2).items():
                    yield p / na ** 2, {z, a1, a2}, y

    def co_inclusion(self) -> np.ndarray:
        """S[x, x'] = P(x in X, x' in X); the diagonal is P(x in X)."""
        v = len(self.vocab)
        s = np.zeros((v, v))
        for p, members, _ in self.outcomes():
            ids = [self.vocab.to_id(t) for t in members]
            s[np.ix_(ids, ids)] += p
        return s

    def label_prob(self, nu: int) -> float:
        return sum(p * ps for s, ps in self.sum_dist.items() for (_, y), p in self.kernel(s).items() if y == nu)


def analytic_signature(spec: TaskSpec, which: Which, index: int) -> np.ndarray:
    """Closed-form signature over ``task_vocabulary(spec)`` (exact to rounding)."""
    model = _TaskModel(spec)
    fn = getattr(model, which, None) if which in ("phi_y", "phi_X", "phi_X_given_y", "varphi_X") else None
    if fn is None:
        raise SignatureError(f"unsupported signature {which!r} for task {spec.kind.value}")
    return fn(index)


def analytic_all(spec: TaskSpec, which: Which, indices=None) -> np.ndarray:
    """Stack analytic signatures as columns (vectors) or a 3-D array (matrices)."""
    model = _TaskModel(spec)
    if indices is None:
        indices = spec.anchors if which != "varphi_X" else spec.label_domain
    return np.stack([getattr(model, which)(i) for i in indices], axis=-1)


def label_probability(spec: TaskSpec, nu: int) -> float:
    return _TaskModel(spec).label_prob(nu)


def anchor_probability(spec: TaskSpec) -> float:
    return _TaskModel(spec).p_in


def uniform_coanchor_form(spec: TaskSpec, which: Which, a: int) -> np.ndarray:
    """Signatures with a uniform co-anchor, as given by the convolution tables.

    Only the key block is filled: ``phi_y`` (ADD) and ``phi_X`` keys (ADD_SAME_DOMAIN).
    """
    table = ConvolutionTable.for_spec(spec)
    vocab = task_vocabulary(spec)
    out = np.zeros(len(vocab))
    if spec.kind is TaskKind.ADD and which == "phi_y":
        for s, p in table.a_plus_z.items():
            out[vocab.to_id(s + a)] += p
    elif spec.kind is TaskKind.ADD_SAME_DOMAIN and which == "phi_X":
        y_minus_a = convolve(_uniform(spec.label_domain), {-b: 1.0 / len(spec.anchors) for b in spec.anchors})
        for t, p in y_minus_a.items():
            z = t - a
            if z in vocab and z not in spec.anchors:
                out[vocab.to_id(z)] += p
    else:
        raise SignatureError(f"no convolution-table form for {which} on {spec.kind.value}")
    return out


def align_to(values: np.ndarray, src: Vocabulary, dst: Vocabulary) -> np.ndarray:
    """Re-index a signature vector (or leading axes of a matrix) onto another vocabulary."""
    idx = [src.to_id(t) if t in src else -1 for t in dst.raw_tokens]
    out = np.zeros((len(dst),) * values.ndim)
    sel = np.array(idx)
    ok = sel >= 0
    if values.ndim == 1:
        out[ok] = values[sel[ok]]
    else:
        out[np.ix_(ok, ok)] = values[np.ix_(sel[ok], sel[ok])]
    return out


# -- corpus signatures -------------------------------------------------------------

def corpus_phi_next(counts, s: int) -> np.ndarray:
    """Next-token distribution of ``s``, pooled over positions."""
    row = counts.next_counts(s)
    total = row.sum()
    if total == 0:
        raise SignatureError(f"token {s} never occurs in a non-final position")
    return row / total


def corpus_varphi_pre(counts, s: int) -> np.ndarray:
    """Previous-token distribution of ``s``, pooled over positions."""
    col = counts.prev_counts(s)
    total = col.sum()
    if total == 0:
        raise SignatureError(f"token {s} never occurs in a non-initial position")
    return col / total


def tilde_phi(counts, s: int) -> np.ndarray:
    return corpus_phi_next(counts, s) + corpus_varphi_pre(counts, s)


def corpus_signature_matrix(counts, which: str, tokens) -> np.ndarray:
    """Columns = signatures of ``tokens`` (each over the full id range)."""
    fn = {"next": corpus_phi_next, "pre": corpus_varphi_pre, "tilde": tilde_phi}[which]
    return np.stack([fn(counts, s) for s in tokens], axis=1)
