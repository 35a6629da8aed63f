"""PredDet evaluation: Recall@k with and without graph constraints,
per-predicate recall, and rare-predicate subset restriction.

Ground-truth pairs are given (PredDet), so a prediction set maps each
annotated (image, subject, object) pair to a score per predicate. With
graph constraints each pair contributes only its top-1 predicate to the
per-image ranking; without, every (pair, predicate) candidate competes.
Score ties break by (subject_id, object_id, predicate) so results are
deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dataio import ContextInput, EmbeddingTable, SceneRecord, iter_contexts
from .features import PrecomputedFeatureSource
from .fewshot import (ClassifierHead, KNNIndex, baseline_features, embed_contexts,
                      knn_score_map, predict_scores)
from .model import RelVAE
from .trainer import Checkpoint, build_model

__all__ = ["PredictionSet", "RecallReport", "EvalError",
           "recall_at_k", "per_predicate_recall", "evaluate", "pair_accuracy",
           "score_contexts"]

PairKey = tuple[str, int, int]


class EvalError(ValueError):
    pass


class PredictionSet:
    """Score maps keyed by (image_id, subject_id, object_id), one per pair."""

    def __init__(self):
        self._scores: dict[PairKey, dict[str, float]] = {}

    def add(self, image_id: str, subject_id: int, object_id: int,
            scores: dict[str, float]) -> None:
        key = (image_id, subject_id, object_id)
        if key in self._scores:
            raise EvalError(f"duplicate score map for pair {key}")
        if not scores:
            raise EvalError(f"empty score map for pair {key}")
        for p, s in scores.items():
            if not np.isfinite(s):
                raise EvalError(f"non-finite score for {p!r} at pair {key}")
        self._scores[key] = dict(scores)

    def scores_for(self, image_id: str, subject_id: int, object_id: int) -> dict[str, float]:
        try:
            return self._scores[(image_id, subject_id, object_id)]
        except KeyError:
            raise EvalError(f"no score map for pair {(image_id, subject_id, object_id)}") from None

    def pairs(self) -> list[PairKey]:
        return list(self._scores)

    def __len__(self) -> int:
        return len(self._scores)


@dataclass
class RecallReport:
    recall_at_k: float
    k: int
    n_gt: int
    per_predicate: dict[str, tuple[int, int]]  # predicate -> (hits, total)
    subset: str = "all"

    def to_dict(self) -> dict:
        return {
            "recall_at_k": self.recall_at_k,
            "k": self.k,
            "n_gt": self.n_gt,
            "per_predicate": {p: [h, t] for p, (h, t) in sorted(self.per_predicate.items())},
            "subset": self.subset,
        }


def _gt_by_image(scenes: list[SceneRecord], subset: set[str] | None
                 ) -> dict[str, list[tuple[int, int, str]]]:
    out: dict[str, list[tuple[int, int, str]]] = {}
    for s in scenes:
        triplets = [(r.subject_id, r.object_id, r.predicate) for r in s.relations
                    if subset is None or r.predicate in subset]
        if triplets:
            out[s.image_id] = triplets
    return out


def _restrict(scores: dict[str, float], subset: set[str] | None) -> dict[str, float]:
    if subset is None:
        return scores
    kept = {p: v for p, v in scores.items() if p in subset}
    if not kept:
        raise EvalError("score map has no predicates inside the evaluation subset")
    return kept


def _top_candidates(image_id: str, gt_pairs: list[tuple[int, int]], preds: PredictionSet,
                    graph_constraints: bool, subset: set[str] | None
                    ) -> list[tuple[float, int, int, str]]:
    """Ranked candidate list [(score, sid, oid, predicate)] for one image."""
    candidates: list[tuple[float, int, int, str]] = []
    for sid, oid in gt_pairs:
        scores = _restrict(preds.scores_for(image_id, sid, oid), subset)
        if graph_constraints:
            best_p = min((p for p in scores), key=lambda p: (-scores[p], p))
            candidates.append((scores[best_p], sid, oid, best_p))
        else:
            candidates.extend((v, sid, oid, p) for p, v in scores.items())
    candidates.sort(key=lambda c: (-c[0], c[1], c[2], c[3]))
    return candidates


def recall_at_k(preds: PredictionSet, gt_scenes: list[SceneRecord], k: int,
                graph_constraints: bool = True, subset: list[str] | None = None
                ) -> RecallReport:
    """Fraction of g.t. triplets among the top-k scored predictions per image."""
    if k < 1:
        raise EvalError(f"k must be >= 1 (got {k})")
    subset_set = set(subset) if subset is not None else None
    gt = _gt_by_image(gt_scenes, subset_set)
    if not gt:
        raise EvalError("empty evaluation set (no ground-truth triplets)")
    per_pred: dict[str, list[int]] = {}
    for image_id, triplets in gt.items():
        pairs = sorted({(sid, oid) for sid, oid, _ in triplets})
        kept = {(sid, oid, p) for _, sid, oid, p in
                _top_candidates(image_id, pairs, preds, graph_constraints, subset_set)[:k]}
        for sid, oid, p in triplets:
            hits_total = per_pred.setdefault(p, [0, 0])
            hits_total[1] += 1
            if (sid, oid, p) in kept:
                hits_total[0] += 1
    hits = sum(h for h, _ in per_pred.values())
    total = sum(t for _, t in per_pred.values())
    return RecallReport(
        recall_at_k=hits / total,
        k=k,
        n_gt=total,
        per_predicate={p: (h, t) for p, (h, t) in per_pred.items()},
        subset="all" if subset is None else f"subset-{len(subset_set)}",
    )


def per_predicate_recall(preds: PredictionSet, gt_scenes: list[SceneRecord], k: int,
                         graph_constraints: bool = True) -> dict[str, float]:
    """Recall@k grouped by ground-truth predicate (zero-instance predicates omitted)."""
    report = recall_at_k(preds, gt_scenes, k, graph_constraints)
    return {p: h / t for p, (h, t) in report.per_predicate.items()}


def pair_accuracy(preds: PredictionSet, gt_scenes: list[SceneRecord],
                  subset: list[str] | None = None) -> float:
    """Fraction of g.t. triplets whose pair's argmax predicate matches."""
    subset_set = set(subset) if subset is not None else None
    gt = _gt_by_image(gt_scenes, subset_set)
    if not gt:
        raise EvalError("empty evaluation set (no ground-truth triplets)")
    hits = 0
    total = 0
    for image_id, triplets in gt.items():
        for sid, oid, p in triplets:
            scores = _restrict(preds.scores_for(image_id, sid, oid), subset_set)
            best = min((q for q in scores), key=lambda q: (-scores[q], q))
            hits += int(best == p)
            total += 1
    return hits / total


# ---------------------------------------------------------------------------
# End-to-end scoring of scenes with a trained head


def score_contexts(model: RelVAE | Checkpoint, head: ClassifierHead | KNNIndex,
                   scenes: list[SceneRecord], table: EmbeddingTable,
                   feature_source: PrecomputedFeatureSource | None = None
                   ) -> PredictionSet:
    """Score every annotated pair in the scenes with the given head."""
    if isinstance(model, Checkpoint):
        model = build_model(model)
    # one context per distinct pair; relations may repeat pairs with
    # different predicates but the context (and so the scores) is shared
    pair_ctx: dict[PairKey, ContextInput] = {}
    for ctx, _ in iter_contexts(scenes, include_predicates=True):
        key = (ctx.scene.image_id, ctx.subject.id, ctx.object.id)
        pair_ctx.setdefault(key, ctx)
    keys = sorted(pair_ctx)
    contexts = [pair_ctx[k] for k in keys]
    preds = PredictionSet()
    if isinstance(head, KNNIndex):
        feats = embed_contexts(model, contexts, table, feature_source)
        for key, f in zip(keys, feats):
            preds.add(*key, scores=knn_score_map(head, f.vector))
        return preds
    if not isinstance(head, ClassifierHead):
        raise TypeError(f"unsupported head type {type(head).__name__}")
    if head.feature_kind == "latent":
        feats = embed_contexts(model, contexts, table, feature_source)
        vectors = [f.vector for f in feats]
    elif head.feature_kind == "baseline-ls":
        vectors = [baseline_features(c, table) for c in contexts]
    else:
        raise ValueError(f"unknown feature kind {head.feature_kind!r}")
    for key, v in zip(keys, vectors):
        preds.add(*key, scores=predict_scores(head, v))
    return preds


def evaluate(model: RelVAE | Checkpoint, head: ClassifierHead | KNNIndex,
             scenes: list[SceneRecord], table: EmbeddingTable, k: int = 50,
             subset: list[str] | None = None,
             feature_source: PrecomputedFeatureSource | None = None) -> RecallReport:
    """Full PredDet pipeline on test scenes, optionally restricted to a predicate subset."""
    if subset is not None:
        vocab = set(head.vocab)
        unknown = [p for p in subset if p not in vocab]
        if unknown:
            raise EvalError(f"subset predicates outside vocabulary: {unknown}")
    preds = score_contexts(model, head, scenes, table, feature_source)
    report = recall_at_k(preds, scenes, k, graph_constraints=True, subset=subset)
    if subset is not None:
        report.subset = f"rare-{len(set(subset))}"
    return report
