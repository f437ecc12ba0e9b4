"""CTC, contrastive and diversity losses, and the composite training objectives."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import DiffValue

NEG_INF = -np.inf
DEFAULT_DIVERSITY_WEIGHT = 0.1


class CTCAlignmentError(ValueError):
    """The target cannot be aligned to this many frames."""


@dataclass
class Stage1Coeffs:
    alpha: float = 0.01
    beta: float = 0.02

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError(f"stage-1 coefficients must be non-negative, got alpha={self.alpha}, beta={self.beta}")


@dataclass
class Stage2Coeffs:
    gamma: float = 1e-4
    delta: float = 1e-4

    def __post_init__(self):
        if self.gamma < 0 or self.delta < 0:
            raise ValueError(f"stage-2 coefficients must be non-negative, got gamma={self.gamma}, delta={self.delta}")


@dataclass
class LossBundle:
    """Named scalar terms and their weighted sum."""

    terms: dict
    coefficients: dict
    total: DiffValue
    info: dict = field(default_factory=dict)

    def values(self) -> dict:
        return {name: float(t.data) for name, t in self.terms.items()}

    def recompose(self) -> float:
        acc = 0.0
        for name, term in self.terms.items():
            acc = acc + self.coefficients[name] * float(term.data)
        return acc


def compose(terms: dict, coefficients: dict, info: Optional[dict] = None) -> LossBundle:
    if set(terms) != set(coefficients):
        raise ValueError(f"terms {sorted(terms)} and coefficients {sorted(coefficients)} differ")
    total = None
    for name, term in terms.items():
        term = ad.as_value(term)
        if term.shape != ():
            raise ValueError(f"loss term {name!r} is not a scalar (shape {term.shape})")
        if not np.isfinite(term.data):
            raise FloatingPointError(f"loss term {name!r} is not finite ({float(term.data)})")
        terms[name] = term
        weighted = ad.scale(term, coefficients[name])
        total = weighted if total is None else ad.add(total, weighted)
    return LossBundle(dict(terms), dict(coefficients), total, dict(info or {}))


# --------------------------------------------------------------------------
# CTC


def min_frames(target: Sequence[int]) -> int:
    """Frames needed to emit ``target``: one per token plus a blank between repeats."""
    return len(target) + sum(1 for a, b in zip(target, target[1:]) if a == b)


def _ctc_node(log_probs: DiffValue, lengths: np.ndarray, targets: Sequence[Sequence[int]], blank: int):
    """Per-utterance -log p(y|x) for a padded batch; infeasible rows give +inf."""
    lp = log_probs.data
    b, t_max, _ = lp.shape
    ext_len = np.array([2 * len(y) + 1 for y in targets])
    s_max = int(ext_len.max())
    ext = np.full((b, s_max), blank, dtype=np.int64)
    for i, y in enumerate(targets):
        if len(y):
            ext[i, 1 : 2 * len(y) : 2] = y
    # skip transition s-2 -> s allowed for labels that differ from the label two back
    skip = np.zeros((b, s_max), dtype=bool)
    skip[:, 2:] = (ext[:, 2:] != blank) & (ext[:, 2:] != ext[:, :-2])
    rows = np.arange(b)[:, None]
    emit = lp[rows[:, :, None], np.arange(t_max)[None, :, None], ext[:, None, :]]  # (B, T, S)

    alpha = np.full((b, t_max, s_max), NEG_INF)
    alpha[:, 0, 0] = emit[:, 0, 0]
    has_label = ext_len > 1
    if s_max > 1:
        alpha[has_label, 0, 1] = emit[has_label, 0, 1]
    for t in range(1, t_max):
        prev = alpha[:, t - 1]
        s1 = np.full_like(prev, NEG_INF)
        s1[:, 1:] = prev[:, :-1]
        s2 = np.full_like(prev, NEG_INF)
        s2[:, 2:] = np.where(skip[:, 2:], prev[:, :-2], NEG_INF)
        alpha[:, t] = np.logaddexp(np.logaddexp(prev, s1), s2) + emit[:, t]

    last = lengths - 1
    end_a = alpha[np.arange(b), last, ext_len - 1]
    end_b = np.where(ext_len > 1, alpha[np.arange(b), last, np.maximum(ext_len - 2, 0)], NEG_INF)
    log_like = np.logaddexp(end_a, end_b)
    feasible = np.isfinite(log_like)
    nll = np.where(feasible, -log_like, np.inf)

    def bw(g):
        beta = np.full((b, t_max, s_max), NEG_INF)
        for t in range(t_max - 1, -1, -1):
            at_end = last == t
            nxt = beta[:, t + 1] if t + 1 < t_max else np.full((b, s_max), NEG_INF)
            n1 = np.full_like(nxt, NEG_INF)
            n1[:, :-1] = nxt[:, 1:]
            n2 = np.full_like(nxt, NEG_INF)
            n2[:, :-2] = np.where(skip[:, 2:], nxt[:, 2:], NEG_INF)
            rec = np.logaddexp(np.logaddexp(nxt, n1), n2) + emit[:, t]
            init = np.full((b, s_max), NEG_INF)
            idx = np.arange(b)
            init[idx, ext_len - 1] = emit[idx, t, ext_len - 1]
            init[idx[ext_len > 1], ext_len[ext_len > 1] - 2] = emit[idx[ext_len > 1], t, ext_len[ext_len > 1] - 2]
            live = (t < last)[:, None]
            beta[:, t] = np.where(at_end[:, None], init, np.where(live, rec, NEG_INF))
        post = alpha + beta - emit - np.where(feasible, log_like, 0.0)[:, None, None]
        occ = np.where(np.isfinite(post), np.exp(post), 0.0)  # state occupancy
        occ *= np.where(feasible, g, 0.0)[:, None, None]
        grad = np.zeros_like(lp)
        np.add.at(grad, (rows[:, :, None], np.arange(t_max)[None, :, None], ext[:, None, :]), -occ)
        return (grad,)

    # infeasible rows carry no gradient; the caller must drop them
    out = ad.custom_op(np.where(feasible, nll, 0.0), (log_probs,), bw, "ctc")
    return out, feasible


def _check_targets(targets, vocab: int, blank: int) -> None:
    for y in targets:
        for tok in y:
            if tok == blank or not 0 <= tok < vocab:
                raise ValueError(f"ctc: target token {tok} outside [0, {vocab}) or equal to blank {blank}")


def ctc_loss(log_probs, target: Sequence[int], blank: int = 0) -> DiffValue:
    """-log p(target | log_probs) for one utterance of shape (T, vocab).

    Consumes normalised log-probabilities. An empty target scores the all-blank
    path. Raises :class:`CTCAlignmentError` if T is too short for the target.
    """
    log_probs = ad.as_value(log_probs)
    if log_probs.ndim != 2:
        raise ad.ShapeError("ctc_loss", log_probs.shape)
    t, v = log_probs.shape
    target = [int(x) for x in target]
    _check_targets([target], v, blank)
    if t < min_frames(target):
        raise CTCAlignmentError(f"ctc: {t} frames cannot align a target needing {min_frames(target)}")
    batch = ad.reshape(log_probs, (1, t, v))
    per, _ = _ctc_node(batch, np.array([t]), [target], blank)
    return ad.reshape(per, ())


@dataclass
class CTCBatchResult:
    loss: Optional[DiffValue]  # None when every utterance was skipped
    per_utterance: np.ndarray  # raw -log p, nan where skipped
    kept: np.ndarray
    skipped: int


def ctc_batch_loss(log_probs, lengths, targets: Sequence[Optional[Sequence[int]]], blank: int = 0) -> CTCBatchResult:
    """Mean over utterances of -log p(y|x) / |y|.

    Utterances with no target, an empty target, or no valid alignment are
    skipped and counted rather than zero-filled.
    """
    log_probs = ad.as_value(log_probs)
    b, _, v = log_probs.shape
    lengths = np.asarray(lengths)
    usable = np.array([y is not None and len(y) > 0 for y in targets])
    clean = [list(y) if ok else [] for y, ok in zip(targets, usable)]
    _check_targets(clean, v, blank)
    per, feasible = _ctc_node(log_probs, lengths, clean, blank)
    kept = usable & feasible
    per_utt = np.where(kept, per.data, np.nan)
    if not kept.any():
        return CTCBatchResult(None, per_utt, kept, int(b))
    weights = np.where(kept, 1.0 / np.maximum([len(y) for y in clean], 1), 0.0) / kept.sum()
    loss = ad.sum_(ad.mul(per, weights))
    return CTCBatchResult(loss, per_utt, kept, int(b - kept.sum()))


# --------------------------------------------------------------------------
# self-supervision


def contrastive_loss(context, targets, distractors: np.ndarray, temperature: float) -> DiffValue:
    """InfoNCE over masked frames with cosine similarity at ``temperature``.

    context, targets: (M, F) rows for the masked frames; distractors: (M, K)
    row indices into ``targets``. Mean over the M frames. K=0 gives 0.
    """
    context, targets = ad.as_value(context), ad.as_value(targets)
    if context.ndim != 2 or context.shape != targets.shape:
        raise ad.ShapeError("contrastive_loss", context.shape, targets.shape)
    distractors = np.asarray(distractors, dtype=np.int64)
    m = context.shape[0]
    if m == 0:
        raise ValueError("contrastive_loss: no masked frames")
    if distractors.shape[0] != m:
        raise ad.ShapeError("contrastive_loss", context.shape, distractors.shape)
    pos = ad.reshape(ad.cosine_similarity(context, targets), (m, 1))
    if distractors.shape[1] == 0:
        parts = [pos]
    else:
        negs = targets[distractors]  # (M, K, F)
        parts = [pos, ad.cosine_similarity(ad.reshape(context, (m, 1, context.shape[1])), negs)]
    logits = ad.scale(ad.concat(parts, axis=1), 1.0 / temperature)
    picked = ad.log_softmax(logits, axis=1)[:, 0]
    return ad.scale(ad.mean(picked), -1.0)


def diversity_loss(codebook_probs) -> DiffValue:
    """1 - sum_g exp(H(p_g)) / (G V): zero at uniform usage, 1 - 1/V at collapse."""
    p = ad.as_value(codebook_probs)
    if p.ndim != 2:
        raise ad.ShapeError("diversity_loss", p.shape)
    if np.any(p.data < 0):
        raise ValueError("diversity_loss: negative probabilities")
    if not np.allclose(p.data.sum(axis=1), 1.0, atol=1e-6, rtol=0):
        raise ValueError("diversity_loss: rows must sum to 1")
    g, v = p.shape
    safe = ad.where(p.data > 0, p, 1.0)
    entropy = ad.scale(ad.sum_(ad.mul(p, ad.log(safe)), axis=1), -1.0)
    perplexity = ad.sum_(ad.exp(entropy))
    return ad.sub(1.0, ad.scale(perplexity, 1.0 / (g * v)))


def ssl_loss(out, temperature: float, diversity_weight: float = DEFAULT_DIVERSITY_WEIGHT):
    """Contrastive loss plus weighted diversity penalty for one with_ssl forward."""
    if out.masked_context is None:
        raise ValueError("ssl_loss: forward output has no masked frames (run mode='with_ssl' with mask_prob > 0)")
    contrastive = contrastive_loss(out.masked_context, out.masked_targets, out.distractors, temperature)
    diversity = diversity_loss(out.codebook_probs)
    total = ad.add(contrastive, ad.scale(diversity, diversity_weight)) if diversity_weight else contrastive
    return total, {"contrastive": float(contrastive.data), "diversity": float(diversity.data)}


# --------------------------------------------------------------------------
# composite objectives


def ctc_term(out, targets, blank: int = 0):
    res = ctc_batch_loss(out.ctc_log_probs, out.lengths, targets, blank)
    if res.loss is None:
        return ad.DiffValue(0.0), res
    return res.loss, res


def m2ds2_loss(
    teacher_out_source,
    teacher_out_target,
    y_s,
    coeffs: Stage1Coeffs,
    temperature: float,
    ctc_out_source=None,
    diversity_weight: float = DEFAULT_DIVERSITY_WEIGHT,
) -> LossBundle:
    """ctc_source + alpha * L_s(source) + beta * L_s(target).

    The CTC term comes from ``ctc_out_source`` when given (an unmasked pass),
    otherwise from the masked source pass.
    """
    if y_s is None or any(y is None for y in y_s):
        raise ValueError("m2ds2_loss: source batch needs labels")
    ctc_out = ctc_out_source if ctc_out_source is not None else teacher_out_source
    ctc, res = ctc_term(ctc_out, y_s)
    ssl_s, parts_s = ssl_loss(teacher_out_source, temperature, diversity_weight)
    ssl_t, parts_t = ssl_loss(teacher_out_target, temperature, diversity_weight)
    info = {"ctc_skipped": res.skipped}
    info.update({f"{k}_source": v for k, v in parts_s.items()})
    info.update({f"{k}_target": v for k, v in parts_t.items()})
    return compose(
        {"ctc_source": ctc, "ssl_source": ssl_s, "ssl_target": ssl_t},
        {"ctc_source": 1.0, "ssl_source": coeffs.alpha, "ssl_target": coeffs.beta},
        info,
    )


def stage2_teacher_loss(feedback, teacher_ctc_source, teacher_diversity_target, coeffs: Stage2Coeffs) -> LossBundle:
    """feedback + gamma * ctc_source + delta * diversity_target."""
    return compose(
        {"feedback": feedback, "ctc_source": teacher_ctc_source, "diversity_target": teacher_diversity_target},
        {"feedback": 1.0, "ctc_source": coeffs.gamma, "diversity_target": coeffs.delta},
    )


def ablation_teacher_loss(feedback, ssl_source, ssl_target) -> LossBundle:
    """feedback + L_s(source) + L_s(target), unit weights."""
    return compose(
        {"feedback": feedback, "ssl_source": ssl_source, "ssl_target": ssl_target},
        {"feedback": 1.0, "ssl_source": 1.0, "ssl_target": 1.0},
    )


def student_loss(ctc_target_pseudo) -> LossBundle:
    return compose({"ctc_target_pseudo": ctc_target_pseudo}, {"ctc_target_pseudo": 1.0})


def ablation_student_loss(ctc_target_pseudo, ssl_target) -> LossBundle:
    """ctc on pseudo-labels + L_s(target), unit weights."""
    return compose(
        {"ctc_target_pseudo": ctc_target_pseudo, "ssl_target": ssl_target},
        {"ctc_target_pseudo": 1.0, "ssl_target": 1.0},
    )
