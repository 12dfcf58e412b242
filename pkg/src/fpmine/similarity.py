"""Similarity branches and the mined-negative fusion rule.

Three signals per (image, text) pair:

* ``global_similarity``  - cosine of the pooled embeddings,
* ``local_similarity``   - cosine of the region-major concatenated local
  embeddings,
* the mining branch      - word-region cosine scores, max-pooled over
  regions per word; scores below the decision boundary (zero by default)
  pass the mining mask and sum into negative evidence that lowers the
  pair's overall similarity.

At inference the overall similarity is the sum of the global score, the
local score, and the negative-adjusted local score.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .encoders import EmbeddingBundle
from .errors import ShapeError
from .numerics import Tensor


@dataclass(frozen=True)
class MiningParams:
    """Bias-free projections into the shared word-region scoring space."""

    region_proj: Tensor  # (M, C), applied to region features
    word_proj: Tensor    # (M, C), applied to word features

    def __post_init__(self):
        if self.region_proj.ndim != 2 or self.word_proj.ndim != 2:
            raise ShapeError("mining projections must be 2-D")
        if self.region_proj.shape != self.word_proj.shape:
            raise ShapeError(
                f"projection shapes disagree: {self.region_proj.shape} vs {self.word_proj.shape}")


@dataclass(frozen=True)
class SimilarityBreakdown:
    """Every per-pair similarity signal, plus per-word max scores."""

    global_score: float
    local_score: float
    word_scores: np.ndarray     # (length,) max-over-regions score per word
    negative_score: float       # sum of masked word scores, <= 0 under the mask
    local_negative_score: float
    overall_score: float

    def to_json(self) -> dict:
        masked = np.minimum(self.word_scores, 0.0)
        return {
            "global_score": self.global_score,
            "local_score": self.local_score,
            "word_scores": self.word_scores.tolist(),
            "masked_word_scores": masked.tolist(),
            "negative_score": self.negative_score,
            "local_negative_score": self.local_negative_score,
            "overall_score": self.overall_score,
        }


def global_similarity(img_global, txt_global) -> Tensor:
    """Cosine of the two pooled embeddings."""
    return nm.cosine(img_global, txt_global)


def local_similarity(img_local, txt_local) -> Tensor:
    """Cosine of the flattened (region-major) local embeddings."""
    a = img_local if isinstance(img_local, Tensor) else Tensor(img_local)
    b = txt_local if isinstance(txt_local, Tensor) else Tensor(txt_local)
    if a.ndim != 2 or b.ndim != 2 or a.shape != b.shape:
        raise ShapeError(f"local embeddings must share a (K, P) shape, got {a.shape} and {b.shape}")
    return nm.cosine(a.reshape((a.size,)), b.reshape((b.size,)))


def word_region_scores(region_feats, word_feats, params: MiningParams) -> Tensor:
    """Cosine of projected region/word features for every (region, word) pair.

    ``region_feats`` is (K, C), ``word_feats`` is (C, length); the result is
    a (K, length) matrix with entries in [-1, 1].
    """
    v = region_feats if isinstance(region_feats, Tensor) else Tensor(region_feats)
    e = word_feats if isinstance(word_feats, Tensor) else Tensor(word_feats)
    if v.ndim != 2 or e.ndim != 2:
        raise ShapeError("word_region_scores expects 2-D feature matrices")
    if v.shape[1] != params.region_proj.shape[1] or e.shape[0] != params.word_proj.shape[1]:
        raise ShapeError(
            f"feature widths {v.shape}/{e.shape} do not match projections {params.region_proj.shape}")
    pv = nm.l2_normalize(nm.matmul(v, params.region_proj.T), axis=-1)
    pe = nm.l2_normalize(nm.matmul(e.T, params.word_proj.T), axis=-1)
    return nm.clamp(nm.matmul(pv, pe.T), -1.0, 1.0)


def word_max_scores(scores) -> Tensor:
    """Per-word max over regions; gradient goes to the first maximizing region."""
    return nm.max_pool_cols(scores)


def mining_mask(score, boundary=0.0) -> Tensor:
    """Zero out scores above the decision boundary, pass the rest unchanged.

    With the default boundary 0 this is exactly min(s, 0): positive scores
    carry no mismatch evidence, negative ones pass through, and the
    boundary itself maps to 0. A nonzero ``boundary`` (the learnable
    variant) moves the cut to tau while still passing the raw score below
    it; the boundary receives no gradient through the mask (it trains
    through the shifted hinge losses instead).
    """
    s = score if isinstance(score, Tensor) else Tensor(score)
    if isinstance(boundary, Tensor):
        keep = (s.data < boundary.data).astype(np.float64)
        return nm.mul(s, keep)
    if boundary != 0.0:
        return nm.mul(s, (s.data < boundary).astype(np.float64))
    return nm.minimum(s, 0.0)


def negative_similarity(word_scores, local_score, *, use_mask: bool = True,
                        boundary=0.0) -> tuple[Tensor, Tensor]:
    """Sum word evidence into (negative_score, local_negative_score).

    ``word_scores`` must already exclude padding. With ``use_mask`` off
    (ablation) the raw scores are summed instead of the masked ones.
    """
    ws = word_scores if isinstance(word_scores, Tensor) else Tensor(word_scores)
    if ws.size < 1:
        raise ShapeError("negative_similarity needs at least one word score")
    contrib = mining_mask(ws, boundary) if use_mask else ws
    neg = contrib.sum()
    return neg, nm.add(local_score, neg)


def overall_similarity(global_score, local_score, local_negative_score) -> Tensor:
    """Inference fusion: global + local + negative-adjusted local."""
    return nm.add(nm.add(global_score, local_score), local_negative_score)


def pair_breakdown(image: EmbeddingBundle, text: EmbeddingBundle, params: MiningParams,
                   *, use_mask: bool = True, boundary: float = 0.0) -> SimilarityBreakdown:
    """Compute every similarity signal for one encoded pair."""
    s_global = global_similarity(image.global_embed, text.global_embed).item()
    s_local = local_similarity(image.local_embed, text.local_embed)
    scores = word_region_scores(image.raw_parts, text.raw_parts, params)
    per_word = word_max_scores(scores)
    neg, local_neg = negative_similarity(per_word, s_local, use_mask=use_mask,
                                         boundary=boundary)
    return SimilarityBreakdown(
        global_score=s_global,
        local_score=s_local.item(),
        word_scores=np.array(per_word.data),
        negative_score=neg.item(),
        local_negative_score=local_neg.item(),
        overall_score=overall_similarity(s_global, s_local.item(), local_neg.item()).item(),
    )
