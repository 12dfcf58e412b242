"""Training objectives: word-score hinges, identity loss, ranking loss.

The two word-score hinges open a gap around the decision boundary:
matched pairs pay ``max(-slope*s + bias, 0)`` per word until every word
score clears +bias/slope, while mismatched pairs pay
``max(slope*s_min + bias, 0)`` until their weakest word drops below
-bias/slope. With the default weights the zero-loss regions are
s >= 0.001 and s_min <= -0.15, so no score distribution can satisfy both
inside the open band in between.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .errors import ConfigError, InputError, ShapeError
from .numerics import Tensor


@dataclass(frozen=True)
class LossWeights:
    """Slopes, biases, margins, and mixing weights for every objective."""

    matched_slope: float = 1.0        # slope of the matched-word hinge
    matched_bias: float = 0.001       # its bias: zero loss iff s >= bias/slope
    mismatched_slope: float = 1.0     # slope of the mismatched-word hinge
    mismatched_bias: float = 0.15     # its bias: zero loss iff s_min <= -bias/slope
    identity_local_weight: float = 0.5    # local identity terms vs global ones
    ranking_margin: float = 0.2
    ranking_local_weight: float = 0.5     # local ranking term
    ranking_localneg_weight: float = 0.25  # negative-adjusted local ranking term
    w_word: float = 1.0               # top-level weight of the two hinges
    w_identity: float = 1.0
    w_ranking: float = 1.0

    def __post_init__(self):
        for name in ("matched_slope", "matched_bias", "mismatched_slope", "mismatched_bias",
                     "identity_local_weight", "ranking_margin", "ranking_local_weight",
                     "ranking_localneg_weight", "w_word", "w_identity", "w_ranking"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ConfigError(f"{name} must be finite and >= 0, got {v}")


@dataclass(frozen=True)
class LossReport:
    """Per-term values for one batch; ``total`` is the weighted sum."""

    matched: float
    mismatched: float
    identity: float
    rank_global: float
    rank_local: float
    rank_local_neg: float
    total: float

    def to_json(self) -> dict:
        return {
            "matched": self.matched,
            "mismatched": self.mismatched,
            "identity": self.identity,
            "rank_global": self.rank_global,
            "rank_local": self.rank_local,
            "rank_local_neg": self.rank_local_neg,
            "total": self.total,
        }


def matched_word_loss(word_scores, weights: LossWeights, boundary=0.0) -> Tensor:
    """Mean hinge pushing every word score of a matched pair positive.

    (1/length) * sum_i max(-slope*(s_i - boundary) + bias, 0); zero exactly
    when every score clears boundary + bias/slope.
    """
    ws = word_scores if isinstance(word_scores, Tensor) else Tensor(word_scores)
    if ws.ndim != 1 or ws.size < 1:
        raise ShapeError("matched_word_loss expects a nonempty score vector")
    if isinstance(boundary, Tensor) or boundary != 0.0:
        ws = nm.sub(ws, boundary)
    per_word = nm.relu(nm.add(nm.mul(ws, -weights.matched_slope), weights.matched_bias))
    return nm.mean(per_word)


def mismatched_word_loss(word_scores, weights: LossWeights, boundary=0.0) -> Tensor:
    """Hinge pushing the weakest word score of a mismatched pair negative.

    max(slope*(min_i s_i - boundary) + bias, 0); zero exactly when the
    minimum drops to boundary - bias/slope or lower.
    """
    ws = word_scores if isinstance(word_scores, Tensor) else Tensor(word_scores)
    if ws.ndim != 1 or ws.size < 1:
        raise ShapeError("mismatched_word_loss expects a nonempty score vector")
    s_min = ws.min(axis=0)
    if isinstance(boundary, Tensor) or boundary != 0.0:
        s_min = nm.sub(s_min, boundary)
    return nm.relu(nm.add(nm.mul(s_min, weights.mismatched_slope), weights.mismatched_bias))


def identity_loss(x, label: int, classifier) -> Tensor:
    """Cross-entropy of softmax(classifier @ x) at the true identity."""
    xv = x if isinstance(x, Tensor) else Tensor(x)
    w = classifier if isinstance(classifier, Tensor) else Tensor(classifier)
    if xv.ndim != 1 or w.ndim != 2 or w.shape[1] != xv.shape[0]:
        raise ShapeError(f"classifier {w.shape} does not apply to embedding {xv.shape}")
    n_classes = w.shape[0]
    if not 0 <= label < n_classes:
        raise InputError(f"label {label} out of range [0, {n_classes})")
    logits = nm.matmul(w, xv.reshape((xv.size, 1))).reshape((n_classes,))
    lse = nm.logsumexp(logits, axis=0)
    return nm.sub(lse, nm.take_rows(logits, [label]).reshape(()))


def mean_identity_loss(embeddings, labels, classifier) -> Tensor:
    """Batched identity cross-entropy, averaged over rows."""
    xs = embeddings if isinstance(embeddings, Tensor) else Tensor(embeddings)
    w = classifier if isinstance(classifier, Tensor) else Tensor(classifier)
    labels = np.asarray(labels, dtype=np.intp)
    n, n_classes = xs.shape[0], w.shape[0]
    if labels.shape != (n,):
        raise ShapeError(f"labels must be ({n},), got {labels.shape}")
    if labels.min(initial=0) < 0 or labels.max(initial=-1) >= n_classes:
        raise InputError("identity label out of classifier range")
    logits = nm.matmul(xs, w.T)
    lse = nm.logsumexp(logits, axis=1)
    picked = nm.take_rows(logits.reshape((n * n_classes,)), np.arange(n) * n_classes + labels)
    return nm.mean(nm.sub(lse, picked))


def ranking_loss(s_matched, s_img_negtext, s_negimg_text, margin: float) -> Tensor:
    """Two-sided hinge: the matched pair must beat both negatives by ``margin``."""
    pos = s_matched if isinstance(s_matched, Tensor) else Tensor(s_matched)
    nt = s_img_negtext if isinstance(s_img_negtext, Tensor) else Tensor(s_img_negtext)
    ni = s_negimg_text if isinstance(s_negimg_text, Tensor) else Tensor(s_negimg_text)
    return nm.add(nm.relu(nm.add(nm.sub(nt, pos), margin)),
                  nm.relu(nm.add(nm.sub(ni, pos), margin)))


def combined_ranking(rank_global, rank_local, rank_local_neg, weights: LossWeights) -> Tensor:
    """Weighted sum of the three ranking terms (local ones down-weighted)."""
    total = rank_global if isinstance(rank_global, Tensor) else Tensor(rank_global)
    total = nm.add(total, nm.mul(_as_t(rank_local), weights.ranking_local_weight))
    return nm.add(total, nm.mul(_as_t(rank_local_neg), weights.ranking_localneg_weight))


def _as_t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def total_loss(matched, mismatched, identity, rank_global, rank_local, rank_local_neg,
               weights: LossWeights) -> tuple[Tensor, LossReport]:
    """Assemble the weighted total; every term is reported separately.

    Disabled terms are passed as 0.0. The ranking family is combined with
    its internal weights first, then the three families are mixed with the
    top-level weights.
    """
    terms = [_as_t(t) for t in (matched, mismatched, identity,
                                rank_global, rank_local, rank_local_neg)]
    ranking = combined_ranking(terms[3], terms[4], terms[5], weights)
    total = nm.add(
        nm.add(nm.mul(nm.add(terms[0], terms[1]), weights.w_word),
               nm.mul(terms[2], weights.w_identity)),
        nm.mul(ranking, weights.w_ranking))
    report = LossReport(
        matched=terms[0].item(),
        mismatched=terms[1].item(),
        identity=terms[2].item(),
        rank_global=terms[3].item(),
        rank_local=terms[4].item(),
        rank_local_neg=terms[5].item(),
        total=total.item(),
    )
    return total, report
