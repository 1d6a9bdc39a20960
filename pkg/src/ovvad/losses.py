"""Training objectives: Top-K video BCE, category cross entropy, the
knowledge-similarity pair losses, frame-level BCE, and the two composite
losses used by the training and fine-tuning stages.

All losses are built on the tape and return scalar Vars; every log argument
is clamped so the terms stay finite for any finite input.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numkernel as nk
from .errors import UsageError
from .model import ClassCatalog, ForwardOutput, KnowledgeBank
from .numkernel import Var

SIM_TEMPERATURE = 1.0 / 0.07  # shared with the classifier logit scale
PROB_CLAMP = 1e-7  # sigmoid outputs
LOG_CLAMP = 1e-12  # softmax probabilities


def abnormal_topk(n: int) -> int:
    """K = n/16 rounded up, floored at 1."""
    return max(1, math.ceil(n / 16))


def topk_mean(p: Var, k: int) -> Var:
    """Mean of the k largest logits; ties broken by lower frame index."""
    n = p.shape[0]
    if not 1 <= k <= n:
        raise UsageError(f"k={k} out of range for {n} frames")
    flat = p.reshape((1, n))
    idx = np.argsort(-flat.data[0], kind="stable")[:k]
    return nk.vmean(nk.take_cols(flat, idx))


def video_bce(p: Var, is_abnormal: bool) -> Var:
    """BCE between the sigmoid of the Top-K mean logit and the video label."""
    n = p.shape[0]
    k = abnormal_topk(n) if is_abnormal else n
    s = nk.clip_v(nk.sigmoid_v(topk_mean(p, k)), PROB_CLAMP, 1.0 - PROB_CLAMP)
    return -nk.log_v(s) if is_abnormal else -nk.log_v(1.0 - s)


def class_ce(class_logits: Var, y: int) -> Var:
    """Negative log softmax probability of the labeled class."""
    k = class_logits.shape[-1]
    if not 0 <= y < k:
        raise UsageError(f"class index {y} out of range for {k} classes")
    probs = nk.row_softmax_v(class_logits.reshape((1, k)))
    picked = nk.take_cols(probs, np.array([y]))
    return -nk.log_v(nk.clip_v(nk.vsum(picked), LOG_CLAMP, 1.0))


def _group_scores(x_t: Var, knowledge: Var, group_idx: np.ndarray) -> Var:
    """Per frame: mean of the top 10% similarities against one bank group. (n, 1)."""
    sims = nk.take_cols(x_t @ knowledge.T, group_idx)
    q = max(1, math.ceil(0.1 * group_idx.size))
    top = np.argsort(-sims.data, axis=1, kind="stable")[:, :q]
    return nk.vmean(nk.take_along_cols(sims, top), axis=1, keepdims=True)


def ski_sim_loss(
    x_t: Var,
    knowledge: Var,
    bank: KnowledgeBank,
    p: Var,
    is_abnormal: bool,
    temperature: float = SIM_TEMPERATURE,
) -> Var:
    """Two-way normal-vs-abnormal contrast on knowledge similarities.

    Normal videos contrast every frame toward the normal group; abnormal
    videos contrast only the Top-K frames by detector logit toward the
    abnormal group.
    """
    s_normal = _group_scores(x_t, knowledge, bank.normal_idx)
    s_abnormal = _group_scores(x_t, knowledge, bank.abnormal_idx)
    pair = nk.concat_cols(s_normal, s_abnormal)
    if is_abnormal:
        k = abnormal_topk(p.shape[0])
        rows = np.argsort(-p.data.reshape(-1), kind="stable")[:k]
        pair = nk.take_rows(pair, rows)
        target = 1
    else:
        target = 0
    probs = nk.row_softmax_v(pair * temperature)
    picked = nk.take_cols(probs, np.array([target]))
    return nk.vmean(-nk.log_v(nk.clip_v(picked, LOG_CLAMP, 1.0)))


def frame_bce(p: Var, frame_gt) -> Var:
    """Mean per-frame BCE against exact 0/1 labels."""
    gt = np.asarray(frame_gt, dtype=np.float64).reshape(-1, 1)
    if gt.shape[0] != p.shape[0]:
        raise ValueError(f"{gt.shape[0]} labels for {p.shape[0]} frames")
    s = nk.clip_v(nk.sigmoid_v(p), PROB_CLAMP, 1.0 - PROB_CLAMP)
    return nk.vmean(-(gt * nk.log_v(s) + (1.0 - gt) * nk.log_v(1.0 - s)))


@dataclass
class LossBreakdown:
    """Scalar loss terms; None marks a term that did not apply."""

    l_bce: float | None = None
    l_ce: float | None = None
    l_sim_n: float | None = None
    l_sim_a: float | None = None
    l_bce2: float | None = None
    l_ce2: float | None = None
    total: float = 0.0

    def as_row(self) -> dict[str, float | None]:
        return {
            "l_bce": self.l_bce,
            "l_ce": self.l_ce,
            "l_sim_n": self.l_sim_n,
            "l_sim_a": self.l_sim_a,
            "l_bce2": self.l_bce2,
            "l_ce2": self.l_ce2,
            "total": self.total,
        }


def _mean(terms: list[Var]) -> Var:
    acc = terms[0]
    for t in terms[1:]:
        acc = acc + t
    return acc / float(len(terms))


def train_loss(
    outputs: list[tuple[ForwardOutput, str, bool]],
    catalog: ClassCatalog,
    bank: KnowledgeBank,
    knowledge_var: Var,
) -> tuple[Var, LossBreakdown]:
    """Composite weak-supervision loss over one batch.

    ``outputs`` pairs each forward pass with its video label and abnormal
    flag. Classification and abnormal-similarity terms run over abnormal
    videos only; the normal-similarity term over normal videos only.
    """
    bce_terms: list[Var] = []
    ce_terms: list[Var] = []
    sim_n_terms: list[Var] = []
    sim_a_terms: list[Var] = []
    for out, label, is_abnormal in outputs:
        bce_terms.append(video_bce(out.p, is_abnormal))
        sim = ski_sim_loss(out.x_t, knowledge_var, bank, out.p, is_abnormal)
        if is_abnormal:
            ce_terms.append(class_ce(out.class_logits, catalog.class_index(label)))
            sim_a_terms.append(sim)
        else:
            sim_n_terms.append(sim)

    total = _mean(bce_terms)
    breakdown = LossBreakdown(l_bce=float(total.data))
    if ce_terms:
        ce = _mean(ce_terms)
        breakdown.l_ce = float(ce.data)
        total = total + ce
    if sim_n_terms:
        sim_n = _mean(sim_n_terms)
        breakdown.l_sim_n = float(sim_n.data)
        total = total + sim_n
    if sim_a_terms:
        sim_a = _mean(sim_a_terms)
        breakdown.l_sim_a = float(sim_a.data)
        total = total + sim_a
    breakdown.total = float(total.data)
    return total, breakdown


def tune_loss(
    pseudo_outputs: list[tuple[ForwardOutput, str, np.ndarray]],
    base_outputs: list[tuple[ForwardOutput, str]],
    catalog: ClassCatalog,
    lam: float,
) -> tuple[Var, LossBreakdown]:
    """Fine-tuning loss: fully supervised terms on pseudo videos plus the
    lambda-weighted weak terms on base anomaly videos.

    Pseudo entries carry (output, category, frame_gt); labels may name novel
    classes. Base entries carry (output, category) with weak labels only.
    """
    if not pseudo_outputs:
        raise UsageError("fine-tuning needs at least one pseudo video")
    for _, _, gt in pseudo_outputs:
        if gt is None:
            raise UsageError("pseudo video lacks frame-level labels")

    bce2 = _mean([frame_bce(out.p, gt) for out, _, gt in pseudo_outputs])
    ce2 = _mean(
        [class_ce(out.class_logits, catalog.class_index(label)) for out, label, _ in pseudo_outputs]
    )
    breakdown = LossBreakdown(l_bce2=float(bce2.data), l_ce2=float(ce2.data))
    total = bce2 + ce2
    if base_outputs and lam != 0.0:
        base_bce = _mean([video_bce(out.p, True) for out, _ in base_outputs])
        base_ce = _mean(
            [class_ce(out.class_logits, catalog.class_index(label)) for out, label in base_outputs]
        )
        breakdown.l_bce = float(base_bce.data)
        breakdown.l_ce = float(base_ce.data)
        total = total + lam * (base_bce + base_ce)
    breakdown.total = float(total.data)
    return total, breakdown
