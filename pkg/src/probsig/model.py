"""Embedding-based models with hand-written gradients and AdamW.

Layout follows the embedding convention throughout: ``W_E`` is ``d x d_vob``
(one column per token) and ``W_U`` is ``d_vob x d`` (one row per token).
A batch is described by a count matrix ``(B, d_vob)`` holding how often each
token occurs in each sequence, so duplicated anchors add up twice.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .linalg import log_softmax, softmax

log = logging.getLogger(__name__)

ACTIVATIONS = ("identity", "relu", "quadratic")


class NumericError(FloatingPointError):
    pass


@dataclass
class ModelParams:
    W_E: np.ndarray
    W_U: np.ndarray
    activation: str = "identity"
    tied: bool = False

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}; expected one of {ACTIVATIONS}")
        d, v = self.W_E.shape
        if self.W_U.shape != (v, d):
            raise ValueError(f"W_U shape {self.W_U.shape} does not match W_E shape {self.W_E.shape}")

    @property
    def d(self) -> int:
        return self.W_E.shape[0]

    @property
    def d_vob(self) -> int:
        return self.W_E.shape[1]

    def copy(self) -> "ModelParams":
        return ModelParams(self.W_E.copy(), self.W_U.copy(), self.activation, self.tied)

    def tie(self) -> None:
        self.W_U = self.W_E.T


@dataclass
class TrainConfig:
    d: int = 200
    init_exponent: float = 0.8
    lr: float = 1e-5
    batch_size: int = 100
    epochs: int = 1000
    weight_decay: float = 0.01
    seed: int = 0
    log_every: int = 0  # steps; 0 logs once per epoch
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    snapshot_every: int = 10
    snapshot_epochs: tuple[int, ...] = (1, 2, 5, 120)
    lm_init: bool = False  # fan-in^-1 variances instead of d^-gamma
    cosine_schedule: bool = False

    def __post_init__(self):
        if self.d < 1 or self.batch_size < 1 or self.epochs < 0 or self.lr <= 0:
            raise ValueError("d, batch_size, lr must be positive and epochs non-negative")
        self.snapshot_epochs = tuple(int(e) for e in self.snapshot_epochs)
        self.betas = tuple(self.betas)

    def wants_snapshot(self, epoch: int) -> bool:
        if epoch == 0 or epoch in self.snapshot_epochs:
            return True
        return self.snapshot_every > 0 and epoch % self.snapshot_every == 0


def init_params(d: int, d_vob: int, gamma: float = 0.8, seed: int = 0, activation: str = "identity",
                lm_init: bool = False, tied: bool = False) -> ModelParams:
    """Gaussian init with variance ``d**-gamma``; with ``lm_init`` use 1/fan-in per matrix."""
    if d < 1 or d_vob < 1:
        raise ValueError("d and d_vob must be >= 1")
    rng = np.random.Generator(np.random.PCG64(seed))
    if lm_init:
        # a tied matrix also acts as W_U, so it takes the unembedding fan-in d
        std_e, std_u = (d ** -0.5 if tied else d_vob ** -0.5), d ** -0.5
    else:
        std_e = std_u = d ** (-gamma / 2)
    W_E = rng.normal(0.0, std_e, size=(d, d_vob))
    W_U = W_E.T.copy() if tied else rng.normal(0.0, std_u, size=(d_vob, d))
    p = ModelParams(W_E, W_U, activation, tied)
    if tied:
        p.tie()
    return p


def _act(kind: str, x: np.ndarray) -> np.ndarray:
    if kind == "identity":
        return x
    if kind == "relu":
        return np.maximum(x, 0.0)
    return x + 0.5 * x * x


def _act_grad(kind: str, x: np.ndarray) -> np.ndarray:
    if kind == "identity":
        return np.ones_like(x)
    if kind == "relu":
        return (x > 0).astype(np.float64)
    return 1.0 + x


def count_matrix(seq_ids: np.ndarray, d_vob: int) -> np.ndarray:
    """(B, L) token ids -> (B, d_vob) multiplicity counts."""
    seq_ids = np.atleast_2d(np.asarray(seq_ids, dtype=np.int64))
    if seq_ids.size and (seq_ids.min() < 0 or seq_ids.max() >= d_vob):
        raise ValueError(f"token id out of range for vocabulary of size {d_vob}")
    b = seq_ids.shape[0]
    out = np.zeros((b, d_vob))
    np.add.at(out, (np.repeat(np.arange(b), seq_ids.shape[1]), seq_ids.ravel()), 1.0)
    return out


def hidden(params: ModelParams, counts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Pre-activation sum and activated hidden state, both (d, B)."""
    pre = params.W_E @ counts.T
    return pre, _act(params.activation, pre)


def forward(params: ModelParams, seq_ids) -> np.ndarray:
    """Logits for one sequence of token ids."""
    counts = count_matrix(np.asarray(seq_ids)[None, :], params.d_vob)
    _, h = hidden(params, counts)
    return (params.W_U @ h)[:, 0]


def logits_batch(params: ModelParams, counts: np.ndarray) -> np.ndarray:
    _, h = hidden(params, counts)
    return params.W_U @ h


def loss_and_grads(params: ModelParams, counts: np.ndarray, labels: np.ndarray,
                   weights: np.ndarray | None = None) -> tuple[float, dict[str, np.ndarray], np.ndarray]:
    """Mean cross-entropy and exact gradients.

    ``weights`` (summing to 1) replaces the uniform 1/B average; the bigram
    trainer uses it to fold repeated pairs. Returns ``(loss, grads, logits)``.
    For tied parameters ``grads["W_E"]`` already includes the unembedding
    contribution and ``grads["W_U"]`` is its transpose.
    """
    labels = np.asarray(labels, dtype=np.int64)
    b = counts.shape[0]
    if b == 0:
        raise ValueError("empty batch")
    w = np.full(b, 1.0 / b) if weights is None else np.asarray(weights, dtype=np.float64)
    pre, h = hidden(params, counts)
    logits = params.W_U @ h
    logp = log_softmax(logits, axis=0)
    cols = np.arange(b)
    loss = float(-(w * logp[labels, cols]).sum())
    dlogits = np.exp(logp)
    dlogits[labels, cols] -= 1.0
    dlogits *= w
    dW_U = dlogits @ h.T
    dh = params.W_U.T @ dlogits
    if params.activation != "identity":
        dh *= _act_grad(params.activation, pre)
    dW_E = dh @ counts
    if params.tied:
        dW_E = dW_E + dW_U.T
        dW_U = dW_E.T
    return loss, {"W_E": dW_E, "W_U": dW_U}, logits


def full_gradient(params: ModelParams, counts: np.ndarray, labels: np.ndarray, chunk: int = 10000):
    """Full-dataset mean loss and gradient, evaluated in chunks."""
    n = counts.shape[0]
    total = 0.0
    g = {"W_E": np.zeros_like(params.W_E), "W_U": np.zeros_like(params.W_U)}
    for start in range(0, n, chunk):
        sl = slice(start, min(n, start + chunk))
        m = sl.stop - sl.start
        loss, gr, _ = loss_and_grads(params, counts[sl], labels[sl], np.full(m, 1.0 / n))
        total += loss
        g["W_E"] += gr["W_E"]
        g["W_U"] += gr["W_U"]
    if params.tied:
        g["W_U"] = g["W_E"].T
    return total, g


def accuracy(params: ModelParams, counts: np.ndarray, labels: np.ndarray, chunk: int = 10000) -> float:
    hits = 0
    for start in range(0, counts.shape[0], chunk):
        lg = logits_batch(params, counts[start:start + chunk])
        hits += int((lg.argmax(axis=0) == labels[start:start + chunk]).sum())
    return hits / counts.shape[0]


@dataclass
class OptState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "OptState":
        names = ("W_E",) if params.tied else ("W_E", "W_U")
        return cls({k: np.zeros_like(getattr(params, k)) for k in names},
                   {k: np.zeros_like(getattr(params, k)) for k in names})


def adamw_step(params: ModelParams, grads: dict[str, np.ndarray], opt: OptState, cfg: TrainConfig,
               lr: float | None = None) -> ModelParams:
    """Decoupled-weight-decay Adam, updating ``params`` in place."""
    lr = cfg.lr if lr is None else lr
    b1, b2 = cfg.betas
    opt.step += 1
    bc1 = 1.0 - b1 ** opt.step
    bc2 = 1.0 - b2 ** opt.step
    for name in opt.m:
        p = getattr(params, name)
        g = grads[name]
        if cfg.weight_decay:
            p *= 1.0 - lr * cfg.weight_decay
        m, v = opt.m[name], opt.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= (lr / bc1) * m / (np.sqrt(v / bc2) + cfg.eps)
    if params.tied:
        params.tie()
    return params


@dataclass
class TrainResult:
    params: ModelParams
    timeline: list[dict] = field(default_factory=list)
    snapshots: dict[int, ModelParams] = field(default_factory=dict)

    def write_timeline(self, path) -> None:
        with open(path, "w") as fh:
            for rec in self.timeline:
                fh.write(json.dumps(rec) + "\n")


def _lr_at(cfg: TrainConfig, step: int, total: int) -> float:
    if not cfg.cosine_schedule or total <= 1:
        return cfg.lr
    return 0.5 * cfg.lr * (1.0 + math.cos(math.pi * step / total))


def fit(params: ModelParams, counts: np.ndarray, labels: np.ndarray, cfg: TrainConfig,
        callback: Callable[[int, ModelParams], None] | None = None) -> TrainResult:
    """Mini-batch AdamW over precomputed ``counts``/``labels``.

    ``callback(epoch, params)`` runs after every epoch (and once at epoch 0)
    and must not mutate ``params``.
    """
    rng = np.random.Generator(np.random.PCG64(cfg.seed + 1))
    n = counts.shape[0]
    opt = OptState.zeros_like(params)
    result = TrainResult(params)
    result.snapshots[0] = params.copy()
    if callback:
        callback(0, params)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = steps_per_epoch * cfg.epochs
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        loss_sum = hit_sum = seen = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, grads, logits = loss_and_grads(params, counts[idx], labels[idx])
            if not math.isfinite(loss):
                raise NumericError(f"non-finite loss {loss} at step {step + 1} (epoch {epoch})")
            adamw_step(params, grads, opt, cfg, _lr_at(cfg, step, total_steps))
            step += 1
            loss_sum += loss * len(idx)
            hit_sum += float((logits.argmax(axis=0) == labels[idx]).sum())
            seen += len(idx)
            if cfg.log_every and step % cfg.log_every == 0:
                result.timeline.append({"step": step, "epoch": epoch, "loss": loss_sum / seen,
                                        "accuracy": hit_sum / seen})
        if not cfg.log_every:
            result.timeline.append({"step": step, "epoch": epoch, "loss": loss_sum / seen,
                                    "accuracy": hit_sum / seen})
        if cfg.wants_snapshot(epoch) or epoch == cfg.epochs:
            result.snapshots[epoch] = params.copy()
            result.timeline[-1]["snapshot"] = epoch
        if callback:
            callback(epoch, params)
    return result


def train(dataset, cfg: TrainConfig, activation: str = "identity",
          callback: Callable[[int, ModelParams], None] | None = None) -> TrainResult:
    """Train F_lin (identity) or F_ffn (relu/quadratic) on an addition dataset."""
    vocab = dataset.vocab
    counts = count_matrix(dataset.seq_ids, len(vocab))
    labels = dataset.label_ids
    params = init_params(cfg.d, len(vocab), cfg.init_exponent, cfg.seed, activation, cfg.lm_init)
    result = fit(params, counts, labels, cfg, callback)
    final_acc = accuracy(params, counts, labels)
    if result.timeline:
        result.timeline[-1]["final_accuracy"] = final_acc
    log.info("trained %s on %d samples: final accuracy %.4f", activation, len(labels), final_acc)
    return result


def bigram_pairs(stream) -> tuple[np.ndarray, np.ndarray]:
    """All within-sequence (s, s_next) pairs of a token stream."""
    ctx, nxt = [], []
    for seq in stream.sequences:
        seq = np.asarray(seq, dtype=np.int64)
        if seq.size >= 2:
            ctx.append(seq[:-1])
            nxt.append(seq[1:])
    if not ctx:
        raise ValueError("stream has no bigrams")
    return np.concatenate(ctx), np.concatenate(nxt)


def train_bigram_lm(stream, cfg: TrainConfig, d_vob: int | None = None, tied: bool = False,
                    callback: Callable[[int, ModelParams], None] | None = None) -> TrainResult:
    """Next-token F_lin over a single-token context: logits = W_U W_E[:, s].

    Initialisation follows ``cfg``: variance ``d**-gamma`` by default, or the
    fan-in variances when ``cfg.lm_init`` is set. Every epoch visits each
    distinct (context, next) pair once as a weighted row, so the objective
    is the same as iterating over raw pairs.
    """
    ctx, nxt = bigram_pairs(stream)
    v = int(d_vob or stream.d_vob)
    pair_counts = np.zeros((v, v))
    np.add.at(pair_counts, (ctx, nxt), 1.0)
    params = init_params(cfg.d, v, cfg.init_exponent, cfg.seed, "identity", cfg.lm_init, tied)
    # expand to (context, next) rows weighted by count
    s_idx, t_idx = np.nonzero(pair_counts)
    weights = pair_counts[s_idx, t_idx]
    counts = np.zeros((s_idx.size, v))
    counts[np.arange(s_idx.size), s_idx] = 1.0
    result = _fit_weighted(params, counts, t_idx, weights, cfg, callback)
    acc = lm_accuracy(params, pair_counts)
    if result.timeline:
        result.timeline[-1]["final_accuracy"] = acc
    return result


def _fit_weighted(params, counts, labels, weights, cfg: TrainConfig, callback):
    rng = np.random.Generator(np.random.PCG64(cfg.seed + 1))
    opt = OptState.zeros_like(params)
    result = TrainResult(params)
    result.snapshots[0] = params.copy()
    if callback:
        callback(0, params)
    n = counts.shape[0]
    total_w = weights.sum()
    total_steps = math.ceil(n / cfg.batch_size) * cfg.epochs
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        loss_sum = hit_sum = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            w = weights[idx]
            loss, grads, logits = loss_and_grads(params, counts[idx], labels[idx], w / w.sum())
            if not math.isfinite(loss):
                raise NumericError(f"non-finite loss {loss} at step {step + 1} (epoch {epoch})")
            adamw_step(params, grads, opt, cfg, _lr_at(cfg, step, total_steps))
            step += 1
            loss_sum += loss * w.sum()
            hit_sum += float((w * (logits.argmax(axis=0) == labels[idx])).sum())
        result.timeline.append({"step": step, "epoch": epoch, "loss": loss_sum / total_w,
                                "accuracy": hit_sum / total_w})
        if cfg.wants_snapshot(epoch) or epoch == cfg.epochs:
            result.snapshots[epoch] = params.copy()
            result.timeline[-1]["snapshot"] = epoch
        if callback:
            callback(epoch, params)
    return result


def lm_accuracy(params: ModelParams, pair_counts: np.ndarray) -> float:
    """Fraction of bigram occurrences whose next token is the argmax prediction."""
    pred = (params.W_U @ params.W_E).argmax(axis=0)
    return float(pair_counts[np.arange(pair_counts.shape[0]), pred].sum() / pair_counts.sum())


def lm_next_distribution(params: ModelParams) -> np.ndarray:
    """Column s holds softmax(W_U W_E[:, s])."""
    return softmax(params.W_U @ params.W_E, axis=0)


# -- checkpoints -------------------------------------------------------------

def save_checkpoint(path, params: ModelParams, meta: dict | None = None) -> None:
    header = {"shapes": {"W_E": list(params.W_E.shape), "W_U": list(params.W_U.shape)},
              "activation": params.activation, "tied": params.tied, **(meta or {})}
    blob = np.ascontiguousarray(params.W_E, dtype="<f8").tobytes()
    if not params.tied:
        blob += np.ascontiguousarray(params.W_U, dtype="<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(blob)


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    raw = Path(path).read_bytes()
    nl = raw.index(b"\n")
    header = json.loads(raw[:nl])
    body = raw[nl + 1:]
    d, v = header["shapes"]["W_E"]
    W_E = np.frombuffer(body, dtype="<f8", count=d * v).reshape(d, v).astype(np.float64)
    if header.get("tied"):
        W_U = W_E.T
    else:
        W_U = np.frombuffer(body, dtype="<f8", count=d * v, offset=8 * d * v).reshape(v, d).astype(np.float64)
    params = ModelParams(W_E, W_U, header.get("activation", "identity"), bool(header.get("tied")))
    if params.tied:
        params.tie()
    return params, header


def config_dict(cfg: TrainConfig) -> dict:
    out = asdict(cfg)
    out["betas"] = list(cfg.betas)
    out["snapshot_epochs"] = list(cfg.snapshot_epochs)
    return out
