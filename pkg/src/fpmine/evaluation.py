"""Retrieval protocol, Recall@K, ablation harness, and evidence reports.

Queries are captions, the gallery is every test image, and a query scores
at K if any of its top-K images shares its identity. Ties break to the
lower gallery index so tables are reproducible.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .dataset import SyntheticDataset, identity_split, twin_pairs
from .encoders import Sample, encode_image, encode_text
from .errors import ConfigError, InputError
from .model import Model
from .similarity import pair_breakdown, word_max_scores, word_region_scores


@dataclass(frozen=True)
class RetrievalResult:
    """Per-query rankings plus aggregate Recall@K percentages."""

    rankings: np.ndarray          # (n_queries, n_gallery) gallery indices, best first
    r_at: dict[int, float]        # K -> percentage in [0, 100]
    query_count: int
    gallery_count: int
    fusion: str

    def to_json(self) -> dict:
        return {
            "fusion": self.fusion,
            "query_count": self.query_count,
            "gallery_count": self.gallery_count,
            "r_at": {str(k): v for k, v in self.r_at.items()},
            "rankings": self.rankings.tolist(),
        }


def rank_rows(scores: np.ndarray) -> np.ndarray:
    """Descending ranking per row; equal scores keep the lower index first."""
    return np.argsort(-scores, axis=-1, kind="stable")


def rank_gallery(model: Model, query: Sample, gallery: list[Sample],
                 fusion: str) -> np.ndarray:
    """Rank a gallery of images for one caption under the chosen fusion."""
    if len(gallery) == 0:
        raise InputError("empty gallery")
    scores = model.score_matrix(gallery, [query], fusion)[:, 0]
    return rank_rows(scores)


def recall_at_k(rankings: np.ndarray, query_ids: np.ndarray, gallery_ids: np.ndarray,
                k: int) -> float:
    """Percentage of queries with a same-identity gallery item in the top K."""
    rankings = np.asarray(rankings)
    query_ids = np.asarray(query_ids)
    gallery_ids = np.asarray(gallery_ids)
    if k < 1:
        raise InputError(f"K must be >= 1, got {k}")
    top = gallery_ids[rankings[:, :k]]
    hits = int((top == query_ids[:, None]).any(axis=1).sum())
    return 100.0 * hits / rankings.shape[0]


def evaluate_retrieval(model: Model, dataset: SyntheticDataset, indices,
                       fusion: str, *, ks: tuple[int, ...] = (1, 5, 10),
                       threads: int = 1) -> RetrievalResult:
    """Text-to-image retrieval over one identity-disjoint split."""
    indices = np.asarray(indices, dtype=np.intp)
    if indices.size == 0:
        raise InputError("empty evaluation split")
    samples = [dataset.samples[i] for i in indices]
    ids = np.array([s.identity_id for s in samples])
    scores = model.score_matrix(samples, samples, fusion).T  # (queries, gallery)
    if threads > 1:
        chunks = np.array_split(np.arange(scores.shape[0]), threads)
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(lambda c: rank_rows(scores[c]), chunks))
        rankings = np.vstack([p for p in parts if p.size])
    else:
        rankings = rank_rows(scores)
    r_at = {k: recall_at_k(rankings, ids, ids, k) for k in ks}
    return RetrievalResult(rankings, r_at, len(samples), len(samples), fusion)


def mining_activity(model: Model, dataset: SyntheticDataset, indices) -> dict:
    """How often the mining branch fires on a split.

    Reports the fraction of cross-identity (image, text) pairs with
    strictly negative summed evidence, and the same for matched pairs.
    """
    indices = np.asarray(indices, dtype=np.intp)
    samples = [dataset.samples[i] for i in indices]
    if not model.flags.use_mining:
        return {"enabled": False, "mismatched_active_fraction": 0.0,
                "matched_active_fraction": 0.0, "mean_negative_mismatched": 0.0,
                "mean_negative_matched": 0.0}
    comps = model.score_components(samples, samples)
    neg = comps["negative"]
    ids = np.array([s.identity_id for s in samples])
    mismatched = ids[:, None] != ids[None, :]
    matched = ~mismatched
    return {
        "enabled": True,
        "mismatched_active_fraction": float((neg[mismatched] < 0).mean()),
        "matched_active_fraction": float((neg[matched] < 0).mean()),
        "mean_negative_mismatched": float(neg[mismatched].mean()),
        "mean_negative_matched": float(neg[matched].mean()),
    }


def negative_evidence_report(model: Model, image_sample: Sample, text_sample: Sample) -> dict:
    """Per-word mismatch evidence for one pair (machine-readable).

    Each word record carries its max-over-regions score, the masked value,
    and the index of the region attaining the max.
    """
    bound = model.bind(None)
    img = encode_image(image_sample.image_raw, bound, model.config)
    txt = encode_text(text_sample.text_raw, bound, model.config)
    mining = model.mining_params(bound)
    tau = float(model.params["boundary_tau"]) if model.flags.learnable_boundary else 0.0
    breakdown = pair_breakdown(img, txt, mining,
                               use_mask=model.flags.use_mining_mask, boundary=tau)
    scores = word_region_scores(img.raw_parts, txt.raw_parts, mining)
    per_word = word_max_scores(scores)
    argmax_regions = np.argmax(scores.data, axis=0)
    masked = (per_word.data * (per_word.data < tau) if model.flags.use_mining_mask
              else np.array(per_word.data))
    words = [
        {"index": i, "score": float(per_word.data[i]), "masked": float(masked[i]),
         "argmax_region": int(argmax_regions[i])}
        for i in range(per_word.size)
    ]
    doc = breakdown.to_json()
    doc["masked_word_scores"] = masked.tolist()  # boundary-aware when tau != 0
    doc.update({
        "image_identity": image_sample.identity_id,
        "text_identity": text_sample.identity_id,
        "matched": image_sample.identity_id == text_sample.identity_id,
        "boundary": tau,
        "words": words,
    })
    return doc


def planted_contradiction_pairs(dataset: SyntheticDataset, indices) -> list[tuple[int, int]]:
    """(image idx, text idx) pairs whose identities are twins within a split.

    These pairs agree on every attribute except the planted flips, so they
    are the canonical probes for the evidence report.
    """
    indices = np.asarray(indices, dtype=np.intp)
    ids_present: dict[int, list[int]] = {}
    for i in indices:
        ids_present.setdefault(dataset.samples[i].identity_id, []).append(int(i))
    pairs = []
    for twin, parent, _flips in twin_pairs(dataset):
        if twin in ids_present and parent in ids_present:
            pairs.append((ids_present[parent][0], ids_present[twin][0]))
            pairs.append((ids_present[twin][0], ids_present[parent][0]))
    return pairs


# ------------------------------------------------------------------ ablations

BRANCH_VARIANTS = ("global", "local", "global+local", "local+mining", "global+local+mining")
DESIGN_VARIANTS = ("baseline", "no_local_neg_ranking", "no_mining_mask",
                   "no_balanced_sample", "learnable_boundary", "full")


def _branch_flags(variant: str, base) -> "ModelFlags":
    from .model import ModelFlags

    table = {
        "global": dict(use_global=True, use_local=False, use_mining=False),
        "local": dict(use_global=False, use_local=True, use_mining=False),
        "global+local": dict(use_global=True, use_local=True, use_mining=False),
        "local+mining": dict(use_global=False, use_local=True, use_mining=True),
        "global+local+mining": dict(use_global=True, use_local=True, use_mining=True),
    }
    return replace(base, **table[variant])


@dataclass(frozen=True)
class AblationRow:
    name: str
    fusion: str
    r_at: dict[int, float]


@dataclass(frozen=True)
class AblationTables:
    branches: list[AblationRow]
    design: list[AblationRow]

    def to_json(self) -> dict:
        return {
            "branches": [{"name": r.name, "fusion": r.fusion,
                          "r_at": {str(k): v for k, v in r.r_at.items()}}
                         for r in self.branches],
            "design": [{"name": r.name, "fusion": r.fusion,
                        "r_at": {str(k): v for k, v in r.r_at.items()}}
                       for r in self.design],
        }

    def format_text(self) -> str:
        lines = []
        for title, rows in (("Branch ablation", self.branches),
                            ("Mining-branch design ablation", self.design)):
            lines.append(title)
            lines.append(f"{'variant':<28}{'R@1':>8}{'R@5':>8}{'R@10':>8}")
            for r in rows:
                lines.append(f"{r.name:<28}{r.r_at[1]:>8.2f}{r.r_at[5]:>8.2f}{r.r_at[10]:>8.2f}")
            lines.append("")
        return "\n".join(lines)


def ablation_suite(dataset: SyntheticDataset, base_config) -> AblationTables:
    """Train every variant with the same seed and tabulate validation R@K.

    Branch rows toggle similarity branches; design rows toggle the mining
    branch internals (ranking term, mask, balanced sampling, learnable
    boundary). Rows that coincide (baseline == global+local, full ==
    global+local+mining) reuse the same trained run.
    """
    from .training import train

    _, val_idx = identity_split(dataset, base_config.val_fraction, seed=base_config.seed)
    if val_idx.size == 0:
        raise ConfigError("ablation requires a nonempty validation split")

    cache: dict = {}

    def run(config) -> Model:
        key = (config.flags, config.balanced_sampling)
        if key not in cache:
            cache[key] = train(dataset, config).model
        return cache[key]

    branches = []
    for variant in BRANCH_VARIANTS:
        flags = _branch_flags(variant, base_config.flags)
        model = run(replace(base_config, flags=flags))
        result = evaluate_retrieval(model, dataset, val_idx, flags.fusion())
        branches.append(AblationRow(variant, flags.fusion(), result.r_at))

    design = []
    full_flags = _branch_flags("global+local+mining", base_config.flags)
    design_configs = {
        "baseline": replace(base_config, flags=_branch_flags("global+local", base_config.flags)),
        "no_local_neg_ranking": replace(
            base_config, flags=replace(full_flags, use_local_neg_ranking=False)),
        "no_mining_mask": replace(base_config, flags=replace(full_flags, use_mining_mask=False)),
        "no_balanced_sample": replace(base_config, flags=full_flags, balanced_sampling=False),
        "learnable_boundary": replace(
            base_config, flags=replace(full_flags, learnable_boundary=True)),
        "full": replace(base_config, flags=full_flags),
    }
    for name in DESIGN_VARIANTS:
        config = design_configs[name]
        model = run(config)
        result = evaluate_retrieval(model, dataset, val_idx, config.flags.fusion())
        design.append(AblationRow(name, config.flags.fusion(), result.r_at))
    return AblationTables(branches, design)
