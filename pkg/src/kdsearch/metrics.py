"""Person-search evaluation: detection AP/recall, per-query AP (mAP) and CMC.

A gallery detection is relevant to a query when it overlaps (IoU >= 0.5) a
ground-truth box of the query identity; each such box can be claimed by at
most one detection, the highest-ranked one. Per-query AP divides by the
number of ground-truth boxes of the identity in the gallery, so identities the
detector misses cost recall.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .data import Query, Scene
from .types import Rng, boxes_to_array, iou_matrix

log = logging.getLogger(__name__)

CMC_KS = (1, 5, 10)


# --- detection ----------------------------------------------------------------


def detection_pr_curve(predictions, ground_truth, iou_thresh: float = 0.5):
    """Greedy score-ordered matching over all scenes.

    ``predictions[s]`` is ``(boxes (K, 4), scores (K,))`` for scene ``s``;
    ``ground_truth[s]`` is a (G, 4) box array. Returns recall and precision
    after each prediction in descending score order, plus the GT count.
    """
    if not 0 < iou_thresh < 1:
        raise ValueError("iou_thresh must lie in (0, 1)")
    gts = [np.asarray(g, dtype=np.float64).reshape(-1, 4) for g in ground_truth]
    n_gt = sum(len(g) for g in gts)
    if n_gt == 0:
        raise ValueError("no ground-truth boxes: recall is undefined")
    entries = []
    for s, (boxes, scores) in enumerate(predictions):
        boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
        scores = np.asarray(scores, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(scores)):
            raise ValueError("prediction scores must be finite")
        entries += [(float(sc), s, k) for k, sc in enumerate(scores)]
    # descending score, ties by scene then index
    entries.sort(key=lambda e: (-e[0], e[1], e[2]))
    taken = [np.zeros(len(g), dtype=bool) for g in gts]
    tp = np.zeros(len(entries))
    for r, (_, s, k) in enumerate(entries):
        if len(gts[s]) == 0:
            continue
        ious = iou_matrix(np.asarray(predictions[s][0]).reshape(-1, 4)[k], gts[s])[0]
        ious[taken[s]] = -1.0
        best = int(np.argmax(ious))
        if ious[best] >= iou_thresh:
            taken[s][best] = True
            tp[r] = 1.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, len(entries) + 1)
    return recall, precision, n_gt


def area_under_pr(recall: np.ndarray, precision: np.ndarray) -> float:
    """All-points interpolated area under a precision-recall curve."""
    mrec = np.concatenate([[0.0], recall, [recall[-1] if len(recall) else 0.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    return float(np.sum((mrec[1:] - mrec[:-1]) * mpre[1:]))


def detection_ap_recall(predictions, ground_truth, iou_thresh: float = 0.5) -> tuple[float, float]:
    recall, precision, _ = detection_pr_curve(predictions, ground_truth, iou_thresh)
    if len(recall) == 0:
        return 0.0, 0.0
    return area_under_pr(recall, precision), float(recall[-1])


# --- retrieval ------------------------------------------------------------------


@dataclass
class RankedGallery:
    """Gallery detections for one query, best match first."""

    boxes: np.ndarray
    scene_ids: list
    scores: np.ndarray
    relevant: np.ndarray
    n_relevant: int = 0

    def __post_init__(self):
        if np.any(np.diff(self.scores) > 0):
            raise ValueError("ranked scores must be non-increasing")


def query_ap(relevant: Sequence[bool] | RankedGallery, n_relevant: int | None = None) -> float:
    if isinstance(relevant, RankedGallery):
        n_relevant = relevant.n_relevant if n_relevant is None else n_relevant
        relevant = relevant.relevant
    if n_relevant is None or n_relevant < 1:
        raise ValueError("query has no relevant ground truth; exclude it upstream")
    rel = np.asarray(relevant, dtype=bool)
    hits = np.cumsum(rel)
    ranks = np.flatnonzero(rel) + 1
    return float(np.sum(hits[rel] / ranks) / n_relevant)


def cmc_at_k(relevant: Sequence[bool] | RankedGallery, k: int) -> int:
    if k < 1:
        raise ValueError("k must be >= 1")
    if isinstance(relevant, RankedGallery):
        relevant = relevant.relevant
    return int(np.any(np.asarray(relevant, dtype=bool)[:k]))


def cosine_scores(query: np.ndarray, gallery: np.ndarray) -> np.ndarray:
    q = np.asarray(query, dtype=np.float64)
    g = np.asarray(gallery, dtype=np.float64).reshape(-1, q.shape[-1])
    qn = np.linalg.norm(q)
    gn = np.linalg.norm(g, axis=1)
    denom = np.where((gn > 0) & (qn > 0), gn * qn, 1.0)
    return np.where((gn > 0) & (qn > 0), g @ q / denom, 0.0)


def rank_gallery(query_emb, identity: int, gallery: Sequence[Scene], outputs, iou_thresh=0.5) -> RankedGallery:
    """Rank every detection in ``gallery`` against one query embedding.

    ``outputs[scene_id]`` holds ``(boxes, scores, embeddings)`` for that scene.
    """
    boxes, scene_ids, sims = [], [], []
    gt = {}
    for scene in gallery:
        b, _, emb = outputs[scene.scene_id]
        gt[scene.scene_id] = boxes_to_array([a for a in scene.annotations if a.identity == identity])
        if len(b):
            boxes.append(b)
            scene_ids += [scene.scene_id] * len(b)
            sims.append(cosine_scores(query_emb, emb))
    n_relevant = sum(len(g) for g in gt.values())
    if not boxes:
        return RankedGallery(np.zeros((0, 4)), [], np.zeros(0), np.zeros(0, dtype=bool), n_relevant)
    boxes = np.concatenate(boxes)
    sims = np.concatenate(sims)
    order = np.argsort(-sims, kind="stable")
    relevant = np.zeros(len(order), dtype=bool)
    claimed = {sid: np.zeros(len(g), dtype=bool) for sid, g in gt.items()}
    for r, i in enumerate(order):
        g = gt[scene_ids[i]]
        if len(g) == 0:
            continue
        ious = iou_matrix(boxes[i], g)[0]
        ious[claimed[scene_ids[i]]] = -1.0
        j = int(np.argmax(ious))
        if ious[j] >= iou_thresh:
            claimed[scene_ids[i]][j] = True
            relevant[r] = True
    return RankedGallery(boxes[order], [scene_ids[i] for i in order], sims[order], relevant, n_relevant)


@dataclass
class MetricsReport:
    detection_ap: float
    detection_recall: float
    reid_map: float
    cmc: dict = field(default_factory=dict)
    gallery_size: int = 0
    n_queries: int = 0

    @property
    def top1(self) -> float:
        return self.cmc.get(1, 0.0)

    def to_text(self) -> str:
        rows = [
            ("gallery_size", self.gallery_size),
            ("n_queries", self.n_queries),
            ("detection_ap", self.detection_ap),
            ("detection_recall", self.detection_recall),
            ("reid_map", self.reid_map),
        ] + [(f"cmc@{k}", v) for k, v in sorted(self.cmc.items())]
        return "".join(f"{k}\t{v!r}\n" for k, v in rows)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cmc"] = {str(k): v for k, v in self.cmc.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        d = dict(d)
        d["cmc"] = {int(k): v for k, v in d["cmc"].items()}
        return cls(**d)

    def save(self, stem) -> None:
        stem = Path(stem)
        stem.with_suffix(".txt").write_text(self.to_text())
        stem.with_suffix(".json").write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))


def write_pr_curve(path, recall, precision):
    np.savetxt(path, np.column_stack([recall, precision]), fmt="%.10g", header="recall precision")


# --- end-to-end protocol -----------------------------------------------------------


class Searcher(Protocol):
    def search_outputs(self, image: np.ndarray): ...

    def embed(self, image: np.ndarray, boxes: np.ndarray) -> np.ndarray: ...


class OracleSearcher:
    """Cheating searcher: ground-truth boxes and one-hot identity embeddings."""

    def __init__(self, scenes: Sequence[Scene], n_classes: int):
        self.by_image = {id(s.image): s for s in scenes}
        self.n_classes = n_classes

    def _onehot(self, scene: Scene, boxes) -> np.ndarray:
        out = np.zeros((len(boxes), self.n_classes + 1))
        gt = boxes_to_array(scene.annotations)
        for r, b in enumerate(np.asarray(boxes).reshape(-1, 4)):
            j = int(np.argmax(iou_matrix(b, gt)[0]))
            ident = scene.annotations[j].identity
            out[r, self.n_classes if ident is None else ident] = 1.0
        return out

    def search_outputs(self, image):
        scene = self.by_image[id(image)]
        boxes = boxes_to_array(scene.annotations)
        return boxes, np.ones(len(boxes)), self._onehot(scene, boxes)

    def embed(self, image, boxes):
        return self._onehot(self.by_image[id(image)], boxes)


def gallery_orders(queries: Sequence[Query], gallery: Sequence[Scene], seed: int):
    """Per query: scenes with the identity first, then distractors in seeded order.

    Both lists are built from scene ids rather than positions, so the
    protocol does not depend on the order the gallery is stored in.
    """
    by_id = sorted(range(len(gallery)), key=lambda i: gallery[i].scene_id)
    orders = []
    for q, rng in zip(queries, Rng(seed).split(len(queries))):
        pos = [i for i in by_id if any(a.identity == q.identity for a in gallery[i].annotations)]
        taken = set(pos)
        neg = [i for i in by_id if i not in taken]
        orders.append((pos, [neg[k] for k in rng.permutation(len(neg))]))
    return orders


def _subset(order, size, gallery):
    """Scenes of a query's size-``size`` gallery, in scene-id order (ties rank consistently)."""
    pos, neg = order
    picked = pos + neg[: max(size - len(pos), 0)]
    return sorted(picked, key=lambda i: gallery[i].scene_id)


def evaluate_search(
    searcher,
    queries: Sequence[Query],
    gallery: Sequence[Scene],
    gallery_sizes: Sequence[int] | int | None = None,
    seed: int = 0,
    det_thresh: float = 0.5,
    iou_thresh: float = 0.5,
) -> dict[int, MetricsReport]:
    """Detection and retrieval metrics for each requested gallery size.

    Galleries are nested: the gallery of a query at size n contains every
    scene holding its identity plus the first distractor scenes of a seeded
    per-query order, so larger galleries only add distractors.
    """
    if gallery_sizes is None:
        gallery_sizes = [len(gallery)]
    elif isinstance(gallery_sizes, int):
        gallery_sizes = [gallery_sizes]
    if any(n > len(gallery) or n < 1 for n in gallery_sizes):
        raise ValueError(f"gallery sizes must be within 1..{len(gallery)}")

    outputs = {s.scene_id: searcher.search_outputs(s.image) for s in gallery}
    det_ap, det_recall = detection_ap_recall(
        [outputs[s.scene_id][:2] for s in gallery],
        [boxes_to_array(s.annotations) for s in gallery],
        iou_thresh,
    )
    kept = {}
    for sid, (b, sc, e) in outputs.items():
        m = sc >= det_thresh
        kept[sid] = (b[m], sc[m], e[m])
    q_embs = [searcher.embed(q.scene.image, q.box.as_array()[None])[0] for q in queries]
    orders = gallery_orders(queries, gallery, seed)

    reports = {}
    for size in gallery_sizes:
        aps, cmcs = [], {k: [] for k in CMC_KS}
        for q, emb, order in zip(queries, q_embs, orders):
            if not order[0]:
                log.warning("query %s: identity %s absent from gallery, skipped", q.scene.scene_id, q.identity)
                continue
            if len(order[0]) > size:
                log.warning("query %s: %d positive scenes exceed gallery size %d", q.scene.scene_id, len(order[0]), size)
            scenes = [gallery[i] for i in _subset(order, size, gallery)]
            ranked = rank_gallery(emb, q.identity, scenes, kept, iou_thresh)
            aps.append(query_ap(ranked))
            for k in CMC_KS:
                cmcs[k].append(cmc_at_k(ranked, k))
        reports[size] = MetricsReport(
            detection_ap=det_ap,
            detection_recall=det_recall,
            reid_map=float(np.mean(aps)) if aps else 0.0,
            cmc={k: float(np.mean(v)) if v else 0.0 for k, v in cmcs.items()},
            gallery_size=size,
            n_queries=len(aps),
        )
    return reports
