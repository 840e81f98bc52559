"""Structure metrics linking embedding geometry to signatures.

All correlations skip the diagonal: only the strict upper triangle of a
similarity matrix enters.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .linalg import LinalgError, cosine_matrix, pearson, percentile_rank


class MetricError(ValueError):
    pass


def _upper(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise MetricError(f"expected a square matrix, got shape {m.shape}")
    return m[np.triu_indices(m.shape[0], 1)]


def r_order(cos: np.ndarray, anchors: Sequence[int]) -> float:
    """Pearson between pairwise cosine and |alpha - alpha'| over distinct pairs."""
    cos = np.asarray(cos, dtype=np.float64)
    if len(anchors) < 3:
        raise MetricError("r_order needs at least 3 anchors")
    if cos.shape != (len(anchors), len(anchors)):
        raise MetricError(f"cosine matrix {cos.shape} does not match {len(anchors)} anchors")
    if np.abs(cos - cos.T).max() > 1e-9:
        raise MetricError("cosine matrix is not symmetric")
    a = np.asarray(anchors, dtype=np.float64)
    dist = np.abs(a[:, None] - a[None, :])
    try:
        return pearson(_upper(cos), _upper(dist))
    except LinalgError:
        raise MetricError("degenerate structure: cosine entries are constant") from None


def r_cos(sim_a: np.ndarray, sim_b: np.ndarray) -> float:
    sim_a, sim_b = np.asarray(sim_a), np.asarray(sim_b)
    if sim_a.shape != sim_b.shape:
        raise MetricError(f"shape mismatch: {sim_a.shape} vs {sim_b.shape}")
    try:
        return pearson(_upper(sim_a), _upper(sim_b))
    except LinalgError as exc:
        raise MetricError(f"degenerate similarity matrix ({exc})") from None


def per_token_alignment(emb_sim: np.ndarray, sig_sim: np.ndarray, s: int) -> tuple[float, float]:
    """(R_D(s), Mean(s)): row-wise Pearson and mean embedding similarity, diagonal excluded."""
    emb_sim, sig_sim = np.asarray(emb_sim), np.asarray(sig_sim)
    if emb_sim.shape != sig_sim.shape:
        raise MetricError(f"shape mismatch: {emb_sim.shape} vs {sig_sim.shape}")
    n = emb_sim.shape[0]
    if not 0 <= s < n:
        raise MetricError(f"row {s} out of range for {n} tokens")
    keep = np.arange(n) != s
    try:
        r = pearson(emb_sim[s, keep], sig_sim[s, keep])
    except LinalgError:
        raise MetricError(f"row {s} has zero variance") from None
    return r, float(emb_sim[s, keep].mean())


@dataclass
class AlignmentCurve:
    decile: list[int]
    mean: list[float]
    count: list[int]
    quartiles: list[tuple[float, float, float]] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["decile", "mean_p_sig", "count", "q25", "q50", "q75"])
        for k, m, c, q in zip(self.decile, self.mean, self.count, self.quartiles):
            w.writerow([k, f"{m:.12g}", c, *(f"{v:.12g}" for v in q)])
        return buf.getvalue()


def percentile_alignment(emb_sim: np.ndarray, sig_sim: np.ndarray) -> AlignmentCurve:
    """Bucket token pairs by embedding-similarity percentile; average signature percentile.

    Decile k (1..10) holds pairs with (k-1)/10 <= p_emb < k/10. Empty
    buckets report NaN.
    """
    emb, sg = _upper(emb_sim), _upper(sig_sim)
    if emb.shape != sg.shape:
        raise MetricError("similarity matrices differ in shape")
    p_emb = percentile_rank(emb)
    p_sig = percentile_rank(sg)
    bucket = np.minimum((p_emb * 10).astype(int), 9)
    curve = AlignmentCurve([], [], [], [])
    for k in range(10):
        vals = p_sig[bucket == k]
        curve.decile.append(k + 1)
        curve.count.append(int(vals.size))
        if vals.size:
            curve.mean.append(float(vals.mean()))
            curve.quartiles.append(tuple(float(q) for q in np.quantile(vals, [0.25, 0.5, 0.75])))
        else:
            curve.mean.append(float("nan"))
            curve.quartiles.append((float("nan"),) * 3)
    return curve


@dataclass
class TimelinePoint:
    epoch: int
    r_order: float | None  # None when the cosine structure is degenerate
    mean_cos: float


def mean_offdiag(cos: np.ndarray) -> float:
    return float(_upper(cos).mean())


def anchor_structure(W_E: np.ndarray, anchor_ids: Sequence[int], anchors: Sequence[int]) -> TimelinePoint:
    cos = cosine_matrix(np.asarray(W_E)[:, list(anchor_ids)])
    try:
        r = r_order(cos, anchors)
    except MetricError:
        r = None
    return TimelinePoint(-1, r, mean_offdiag(cos))


def structure_timeline(snapshots: Mapping[int, np.ndarray], anchor_ids: Sequence[int],
                       anchors: Sequence[int]) -> list[TimelinePoint]:
    """R_order and mean pairwise anchor cosine per snapshot (``snapshots``: epoch -> W_E)."""
    if len(snapshots) < 2:
        raise MetricError("structure_timeline needs at least 2 snapshots")
    out = []
    for epoch in sorted(snapshots):
        pt = anchor_structure(snapshots[epoch], anchor_ids, anchors)
        pt.epoch = int(epoch)
        out.append(pt)
    return out


def first_crossing(timeline: Sequence[TimelinePoint], threshold: float = -0.8) -> int | None:
    """First epoch whose R_order is at or below ``threshold``."""
    for pt in timeline:
        if pt.r_order is not None and pt.r_order <= threshold:
            return pt.epoch
    return None


def timeline_csv(timeline: Sequence[TimelinePoint]) -> str:
    lines = ["epoch,r_order,mean_cos"]
    for pt in timeline:
        r = "" if pt.r_order is None else f"{pt.r_order:.12g}"
        lines.append(f"{pt.epoch},{r},{pt.mean_cos:.12g}")
    return "\n".join(lines) + "\n"


def ring_diagnostic(label_cos: np.ndarray, labels: Sequence[int]) -> dict[str, float | bool]:
    """Does the wrap-around pair (min Z, max Z) look like neighbours?

    Passes when cos(W_U[min], W_U[max]) exceeds the median off-diagonal
    similarity. Also reports the correlation with circular distance.
    """
    labels = list(labels)
    n = len(labels)
    if label_cos.shape != (n, n):
        raise MetricError(f"cosine matrix {label_cos.shape} does not match {n} labels")
    lo, hi = labels.index(min(labels)), labels.index(max(labels))
    wrap = float(label_cos[lo, hi])
    median = float(np.median(_upper(label_cos)))
    lab = np.asarray(labels, dtype=np.float64)
    diff = np.abs(lab[:, None] - lab[None, :])
    circ = np.minimum(diff, n - diff)
    try:
        r_circ = pearson(_upper(label_cos), _upper(circ))
    except LinalgError:
        r_circ = float("nan")
    return {"wrap_similarity": wrap, "median_offdiag": median, "r_circular": r_circ, "passes": wrap > median}


def pca_monotone_count(projection: np.ndarray) -> int:
    """Largest number of points lying on a monotone run of a 1-D projection.

    Uses the longest non-decreasing or non-increasing subsequence, so a
    fully ordered projection scores ``len(projection)``.
    """
    x = np.asarray(projection, dtype=np.float64).ravel()

    def longest(seq):
        best = [1] * len(seq)
        for i in range(len(seq)):
            for j in range(i):
                if seq[j] <= seq[i]:
                    best[i] = max(best[i], best[j] + 1)
        return max(best, default=0)

    return max(longest(list(x)), longest(list(-x)))
