"""Gradient-flow predictions built from probability signatures.

Exact decompositions regroup the full-dataset gradient by label; the
leading-order predictions replace the per-sample sums by signatures and are
compared against ``-(full-dataset mean gradient)``.

Every predictor keeps each piece of its prediction in ``terms`` so reports
can show how large the neglected parts are.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from . import signatures as sig
from .linalg import softmax
from .model import ModelParams, count_matrix, full_gradient, hidden
from .taskgen import Dataset, TaskSpec

SignVariant = Literal["main", "appendix"]


class OracleError(ValueError):
    pass


@dataclass
class GradPrediction:
    target: tuple[str, int]  # ("emb", token) or ("unemb", token)
    predicted: np.ndarray
    basis: str
    sign_variant: str | None = None
    terms: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def term_norms(self) -> dict[str, float]:
        return {k: float(np.linalg.norm(v)) for k, v in self.terms.items()}


@dataclass
class AlignmentReport:
    cosine: float
    rel_norm_error: float
    term_norms: dict[str, float] = field(default_factory=dict)
    token: int | None = None
    basis: str | None = None
    sign_variant: str | None = None

    def to_json(self) -> str:
        return json.dumps({"token": self.token, "basis": self.basis, "sign_variant": self.sign_variant,
                           "cosine": self.cosine, "rel_norm_error": self.rel_norm_error,
                           "term_norms": self.term_norms}, sort_keys=True)


def compare(prediction, measured) -> AlignmentReport:
    pred_vec = prediction.predicted if isinstance(prediction, GradPrediction) else np.asarray(prediction, float)
    measured = np.asarray(measured, dtype=np.float64).ravel()
    pred_vec = np.asarray(pred_vec, dtype=np.float64).ravel()
    if pred_vec.size != measured.size:
        raise OracleError(f"length mismatch: prediction {pred_vec.size} vs measured {measured.size}")
    mn = np.linalg.norm(measured)
    if mn == 0:
        raise OracleError("measured gradient has zero norm")
    pn = np.linalg.norm(pred_vec)
    cos = 0.0 if pn == 0 else float(np.clip(pred_vec @ measured / (pn * mn), -1.0, 1.0))
    rep = AlignmentReport(cos, float(np.linalg.norm(pred_vec - measured) / mn))
    if isinstance(prediction, GradPrediction):
        rep.term_norms = prediction.term_norms
        rep.token = prediction.target[1]
        rep.basis = prediction.basis
        rep.sign_variant = prediction.sign_variant
    return rep


# -- exact decompositions --------------------------------------------------------

@dataclass
class Decomposition:
    label_terms: dict[int, np.ndarray]  # raw label -> summed contribution
    output_term: np.ndarray

    def total(self) -> np.ndarray:
        out = self.output_term.copy()
        for v in self.label_terms.values():
            out = out + v
        return out


def _arrays(dataset: Dataset, d_vob: int):
    if len(dataset.vocab) != d_vob:
        raise OracleError(f"dataset vocabulary ({len(dataset.vocab)}) does not match model ({d_vob})")
    return count_matrix(dataset.seq_ids, d_vob), dataset.label_ids


def _check_act(params: ModelParams, allowed: tuple[str, ...]) -> None:
    if params.activation not in allowed:
        raise OracleError(f"activation {params.activation!r} not supported here (need one of {allowed})")


def exact_grad_decomposition_emb(params: ModelParams, dataset: Dataset, x: int) -> Decomposition:
    """Regroup -dL/dW_E[:, x] into per-label sums and the output-probability sum."""
    _check_act(params, ("identity", "quadratic"))
    counts, labels = _arrays(dataset, params.d_vob)
    n = counts.shape[0]
    if x not in dataset.vocab:
        return Decomposition({}, np.zeros(params.d))
    ix = dataset.vocab.to_id(x)
    rows = np.flatnonzero(counts[:, ix] > 0)
    if rows.size == 0:
        return Decomposition({}, np.zeros(params.d))
    pre, h = hidden(params, counts[rows])
    gprime = counts[rows, ix][None, :] * (1.0 + pre if params.activation == "quadratic" else 1.0)
    p = softmax(params.W_U @ h, axis=0)
    out_term = -((params.W_U.T @ p) * gprime).sum(axis=1) / n
    terms: dict[int, np.ndarray] = {}
    for lab in np.unique(labels[rows]):
        sel = labels[rows] == lab
        terms[dataset.vocab.to_raw(int(lab))] = params.W_U[lab] * gprime[:, sel].sum(axis=1) / n
    return Decomposition(terms, out_term)


def exact_grad_decomposition_unemb(params: ModelParams, dataset: Dataset, nu: int) -> Decomposition:
    """Regroup -dL/dW_U[nu, :] into the label-nu sum and the output-probability sum."""
    _check_act(params, ("identity", "quadratic", "relu"))
    counts, labels = _arrays(dataset, params.d_vob)
    n = counts.shape[0]
    _, h = hidden(params, counts)
    if nu not in dataset.vocab:
        raise OracleError(f"token {nu} not in vocabulary")
    inu = dataset.vocab.to_id(nu)
    p = softmax(params.W_U @ h, axis=0)
    out_term = -(h * p[inu]).sum(axis=1) / n
    sel = labels == inu
    terms = {nu: h[:, sel].sum(axis=1) / n} if sel.any() else {}
    return Decomposition(terms, out_term)


def measured_gradients(params: ModelParams, dataset: Dataset) -> dict[str, np.ndarray]:
    """Negated full-dataset mean gradients."""
    counts, labels = _arrays(dataset, params.d_vob)
    _, g = full_gradient(params, counts, labels)
    return {"W_E": -g["W_E"], "W_U": -g["W_U"]}


def lm_measured_gradients(params: ModelParams, pair_counts: np.ndarray) -> dict[str, np.ndarray]:
    """Negated mean gradients of the bigram LM over all (context, next) pairs.

    ``pair_counts[c, t]`` counts context ``c`` followed by ``t``. In tied mode
    the embedding entry carries both the context and the output path.
    """
    pair_counts = np.asarray(pair_counts, dtype=np.float64)
    if pair_counts.shape != (params.d_vob, params.d_vob):
        raise OracleError(f"pair counts {pair_counts.shape} do not match d_vob={params.d_vob}")
    total = pair_counts.sum()
    if total <= 0:
        raise OracleError("empty bigram table")
    pi = pair_counts.sum(axis=1) / total
    p = softmax(params.W_U @ params.W_E, axis=0)
    g_logits = p * pi[None, :] - pair_counts.T / total  # column c = dL/df_c
    g_U = g_logits @ params.W_E.T
    g_E = params.W_U.T @ g_logits
    if params.tied:
        g_E = g_E + g_U.T
        g_U = g_E.T.copy()
    return {"W_E": -g_E, "W_U": -g_U}


# -- rates and signatures on the model vocabulary -----------------------------------

@dataclass
class TaskSignatures:
    """Analytic signatures and rates of a task, aligned to a model vocabulary."""
    spec: TaskSpec
    vocab: object  # taskgen.Vocabulary of the model

    def __post_init__(self):
        self._model = sig._TaskModel(self.spec)

    def _align(self, values: np.ndarray) -> np.ndarray:
        return sig.align_to(values, self._model.vocab, self.vocab)

    def phi_y(self, a):
        return self._align(self._model.phi_y(a))

    def phi_X(self, a):
        return self._align(self._model.phi_X(a))

    def phi_X_given_y(self, a):
        return self._align(self._model.phi_X_given_y(a))

    def varphi_X(self, nu):
        return self._align(self._model.varphi_X(nu))

    def r_in(self, a) -> float:
        return self._model.p_in

    def r_joint(self, a) -> np.ndarray:
        """r_{a,nu} for every nu, as a vector over the vocabulary."""
        return self._model.p_in * self.phi_y(a)

    def r_out(self, nu) -> float:
        return self._model.label_prob(nu)

    def co_inclusion(self) -> np.ndarray:
        return sig.align_to(self._model.co_inclusion(), self._model.vocab, self.vocab)

    def inclusion(self) -> np.ndarray:
        """P(x in X) for every token."""
        m = self._model
        out = np.zeros(len(m.vocab))
        for s, ps in m.sum_dist.items():
            for (z, _), p in m.kernel(s).items():
                out[m.vocab.to_id(z)] += ps * p
        for a in m.anchors:
            out[m.vocab.to_id(a)] = m.p_in
        return self._align(out)


# -- signature-based predictions ---------------------------------------------------------
#
# ``order`` controls how much of the softmax output is kept:
#   0  signature terms only
#   1  plus the uniform output p = 1/d_vob (and the self-embedding piece)
#   2  plus the first-order output p = (1 + f - mean f) / d_vob

def _masked(vec: np.ndarray, idx: int | None) -> np.ndarray:
    if idx is None:
        return vec
    out = vec.copy()
    out[idx] = 0.0
    return out


def predict_emb_linear(params: ModelParams, phi_y: np.ndarray, phi_X: np.ndarray, r_in: float,
                       sign_variant: SignVariant = "main", order: int = 2, token_id: int | None = None,
                       token: int | None = None) -> GradPrediction:
    """W_U^T r_in (phi_y -/+ (1/d_vob) W_U W_E phi_X) plus output terms up to ``order``.

    ``sign_variant="main"`` subtracts the co-occurrence term, ``"appendix"``
    adds it. With ``token_id`` given, the self-entry of ``phi_X`` is split off
    into its own ``self`` term (kept from order 1 on).
    """
    _check_act(params, ("identity",))
    if sign_variant not in ("main", "appendix"):
        raise OracleError(f"unknown sign variant {sign_variant!r}")
    v = params.d_vob
    sign = -1.0 if sign_variant == "main" else 1.0
    WtW = params.W_U.T @ params.W_U
    terms = {"phi_y": r_in * params.W_U.T @ phi_y,
             "phi_X": sign * r_in / v * WtW @ (params.W_E @ _masked(phi_X, token_id))}
    if order >= 1:
        terms["uniform"] = -r_in / v * params.W_U.sum(axis=0)
        if token_id is not None:
            terms["self"] = sign * r_in / v * WtW @ params.W_E[:, token_id]
    if order >= 2:
        fbar = float((params.W_U @ (params.W_E @ phi_X)).mean())
        terms["centering"] = -sign * r_in / v * fbar * params.W_U.sum(axis=0)
    return GradPrediction(("emb", token), sum(terms.values()), "cor1", sign_variant, terms)


def ffn_contraction(params: ModelParams, phi_X_given_y: np.ndarray, r_joint: np.ndarray) -> np.ndarray:
    """sum_nu r_{a,nu} diag(W_U[nu]) W_E phi^{X|y}[nu]^T."""
    return ((params.W_E @ phi_X_given_y.T) * (params.W_U.T * r_joint)).sum(axis=1)


def ffn_contraction_loop(params: ModelParams, phi_X_given_y: np.ndarray, r_joint: np.ndarray) -> np.ndarray:
    """Explicit triple loop over (hidden unit, label, token); reference only."""
    d, v = params.W_E.shape
    out = np.zeros(d)
    for i in range(d):
        for nu in range(v):
            acc = 0.0
            for x in range(v):
                acc += params.W_E[i, x] * phi_X_given_y[nu, x]
            out[i] += r_joint[nu] * params.W_U[nu, i] * acc
    return out


def predict_emb_ffn(params: ModelParams, phi_X_given_y: np.ndarray, r_joint: np.ndarray, phi_y: np.ndarray,
                    phi_X: np.ndarray, r_in: float, token_id: int, include_eta_y: bool = True, order: int = 2,
                    token: int | None = None) -> GradPrediction:
    """Leading co-occurrence contraction for the quadratic surrogate x + x^2/2.

    ``eta_phi_y`` is ``W_U^T r_in phi_y * (1 + W_E[:, a])``; the self-entry of
    ``phi^{X|y}`` is then masked so that ``W_E[:, a]`` is counted once.
    """
    if params.activation != "quadratic":
        raise OracleError("the FFN prediction is derived for the quadratic surrogate activation only")
    v = params.d_vob
    cond = phi_X_given_y.copy() if include_eta_y else phi_X_given_y
    if include_eta_y:
        cond[:, token_id] = 0.0
    terms = {"contraction": ffn_contraction(params, cond, r_joint)}
    if include_eta_y:
        terms["eta_phi_y"] = (params.W_U.T @ (r_in * phi_y)) * (1.0 + params.W_E[:, token_id])
    pre = params.W_E @ phi_X
    if order >= 1:
        terms["uniform"] = -(r_in / v) * params.W_U.sum(axis=0) * (1.0 + pre)
    if order >= 2:
        centered = params.W_U - params.W_U.mean(axis=0)
        terms["first_order"] = -(r_in / v) * params.W_U.T @ (centered @ pre)
    return GradPrediction(("emb", token), sum(terms.values()), "cor2", None, terms)


def predict_unemb_linear(params: ModelParams, varphi_X: np.ndarray, r_out: float, L: int = 3,
                         inclusion: np.ndarray | None = None, co_inclusion: np.ndarray | None = None,
                         order: int = 2, token_id: int | None = None, token: int | None = None) -> GradPrediction:
    """L r_out (W_E varphi_X)^T plus the output term up to ``order``.

    Order 1 needs ``inclusion`` (P(x in X)); order 2 also needs
    ``co_inclusion`` (P(x, x' in X)) and ``token_id``.
    """
    _check_act(params, ("identity",))
    v = params.d_vob
    terms = {"varphi_X": L * r_out * params.W_E @ varphi_X}
    if order >= 1:
        if inclusion is None:
            raise OracleError("order >= 1 needs the token inclusion probabilities")
        terms["uniform"] = -(L / v) * params.W_E @ inclusion
    if order >= 2:
        if co_inclusion is None or token_id is None:
            raise OracleError("order 2 needs co_inclusion and token_id")
        centered = params.W_U[token_id] - params.W_U.mean(axis=0)
        terms["first_order"] = -(L / v) * params.W_E @ (co_inclusion @ (params.W_E.T @ centered))
    return GradPrediction(("unemb", token), sum(terms.values()), "cor3", None, terms)


def predict_lm(params: ModelParams, phi_next: np.ndarray, varphi_pre: np.ndarray, r_in: float, r_out: float,
               token_id: int, context_dist: np.ndarray | None = None, tied: bool = False,
               order: int = 2, token: int | None = None) -> dict[str, GradPrediction]:
    """Bigram-LM predictions for W_E[:, s] and W_U[s, :] (and the tied column).

    ``r_in`` / ``r_out`` are the shares of bigrams with ``s`` as context / as
    next token, and ``context_dist`` holds ``r_in`` for every token (needed
    from order 1 on). With ``tied`` the column prediction is
    ``r_s W_E (phi_next + varphi_pre)`` with ``r_s`` the mean of the two rates.
    """
    v = params.d_vob
    if context_dist is None:
        context_dist = np.full(v, 1.0 / v)
    emb = {"phi_next": r_in * params.W_U.T @ phi_next}
    unemb = {"varphi_pre": r_out * params.W_E @ varphi_pre}
    if order >= 1:
        emb["uniform"] = -(r_in / v) * params.W_U.sum(axis=0)
        unemb["uniform"] = -(1.0 / v) * params.W_E @ context_dist
    if order >= 2:
        f = params.W_U @ params.W_E  # column c = logits for context c
        fc = f - f.mean(axis=0)
        emb["first_order"] = -(r_in / v) * params.W_U.T @ fc[:, token_id]
        unemb["first_order"] = -(1.0 / v) * params.W_E @ (context_dist * fc[token_id])
    out = {
        "emb": GradPrediction(("emb", token), sum(emb.values()), "cor4", None, emb),
        "unemb": GradPrediction(("unemb", token), sum(unemb.values()), "cor4", None, unemb),
    }
    if tied:
        r_s = 0.5 * (r_in + r_out)
        terms = {"tilde_phi": r_s * params.W_E @ (phi_next + varphi_pre)}
        for k in ("uniform", "first_order"):
            if k in emb:
                terms[k] = emb[k] + unemb[k]
        out["tied"] = GradPrediction(("emb", token), sum(terms.values()), "cor4-tied", None, terms)
    return out


def softmax_linearization_check(f) -> float:
    """max |softmax(f) - 1/d - f/d + mean(f)/d| for small logits f."""
    f = np.asarray(f, dtype=np.float64)
    d = f.size
    approx = (1.0 + f - f.mean()) / d
    return float(np.abs(softmax(f) - approx).max())
