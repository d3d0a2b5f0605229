"""Evaluation metrics: recognition accuracy, retrieval ranks, temporal
detection/proposal metrics, and Soft-NMS.

All functions are pure; deterministic tie-breaks are spelled out per metric so
results replay exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict

import numpy as np

from .video import Proposal


@dataclass
class Detection:
    proposal: Proposal
    class_id: int
    confidence: float
    video_id: str = ""


@dataclass
class GroundTruthInstance:
    video_id: str
    class_id: int
    start: float
    end: float

    def __post_init__(self):
        if not self.start < self.end:
            raise ValueError(f"degenerate instance [{self.start}, {self.end})")


def top_k_accuracy(scores: np.ndarray, labels, k: int) -> float:
    """Fraction of rows whose label ranks in the top k; ties rank the lower
    class id first."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.intp)
    n, c = scores.shape
    if n == 0:
        raise ValueError("no rows to score")
    if k > c:
        raise ValueError(f"k={k} exceeds {c} classes")
    # sort by (-score, class id): lexsort's last key is primary
    class_ids = np.broadcast_to(np.arange(c), (n, c))
    order = np.lexsort((class_ids, -scores), axis=1)
    hits = (order[:, :k] == labels[:, None]).any(axis=1)
    return float(hits.mean())


def retrieval_ranks(similarities: np.ndarray):
    """Per-query 1-based rank of the true (diagonal) item, ties ranked worst.

    Returns (ranks, {"R@1", "R@5", "R@10"}, median-rank); median uses the
    lower median for even n.
    """
    s = np.asarray(similarities, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise ValueError("similarity matrix must be square")
    n = s.shape[0]
    diag = s[np.arange(n), np.arange(n)]
    better = (s > diag[:, None]).sum(axis=1)
    tied = (s == diag[:, None]).sum(axis=1) - 1  # exclude the diagonal itself
    ranks = (1 + better + tied).astype(int)
    recalls = {f"R@{k}": float((ranks <= k).mean()) for k in (1, 5, 10)}
    mdr = int(np.sort(ranks)[(n - 1) // 2])
    return ranks.tolist(), recalls, mdr


def interval_iou(a: Proposal, b: Proposal) -> float:
    inter = max(0.0, min(a.end, b.end) - max(a.start, b.start))
    if inter == 0.0:
        return 0.0
    union = (a.end - a.start) + (b.end - b.start) - inter
    return inter / union


def soft_nms(detections: list[Detection], iou_threshold: float,
             score_floor: float = 1e-3) -> list[Detection]:
    """Linear-decay Soft-NMS over one class.

    Iteratively keep the highest-scoring detection and rescale the remaining
    scores by (1 - IoU) whenever the overlap exceeds the threshold; detections
    whose score drops below the floor are removed. Ties break by earlier
    start, then lower input index.
    """
    pool = [(d.confidence, i, d) for i, d in enumerate(detections)]
    kept: list[Detection] = []
    while pool:
        best = max(range(len(pool)),
                   key=lambda j: (pool[j][0], -pool[j][2].proposal.start, -pool[j][1]))
        score, idx, det = pool.pop(best)
        kept.append(Detection(det.proposal, det.class_id, score, det.video_id))
        survivors = []
        for s, i, d in pool:
            iou = interval_iou(det.proposal, d.proposal)
            if iou > iou_threshold:
                s = s * (1.0 - iou)
            if s >= score_floor:
                survivors.append((s, i, d))
        pool = survivors
    return kept


def _match_detections(dets: list[Detection], gts: list[GroundTruthInstance],
                      threshold: float) -> list[bool]:
    """Greedy one-to-one matching in confidence order; within a detection the
    unmatched ground truth with highest IoU (>= threshold) wins, earliest
    index on ties. Returns a true-positive flag per detection (input order)."""
    matched = [False] * len(gts)
    tp = [False] * len(dets)
    for i, det in enumerate(dets):
        best_iou, best_j = 0.0, -1
        for j, gt in enumerate(gts):
            if matched[j] or gt.video_id != det.video_id:
                continue
            iou = interval_iou(det.proposal, Proposal(gt.start, gt.end))
            if iou >= threshold and iou > best_iou:
                best_iou, best_j = iou, j
        if best_j >= 0:
            matched[best_j] = True
            tp[i] = True
    return tp


def _average_precision(tp: list[bool], num_gt: int) -> float:
    """All-point interpolated AP from confidence-ordered TP flags."""
    if num_gt == 0:
        raise ValueError("AP undefined without ground truth")
    if not tp:
        return 0.0
    flags = np.asarray(tp, dtype=np.float64)
    cum_tp = np.cumsum(flags)
    cum_fp = np.cumsum(1.0 - flags)
    recall = cum_tp / num_gt
    precision = cum_tp / (cum_tp + cum_fp)
    # monotone precision envelope, then integrate over recall steps
    env = np.maximum.accumulate(precision[::-1])[::-1]
    prev_r, ap = 0.0, 0.0
    for r, p in zip(recall, env):
        ap += (r - prev_r) * p
        prev_r = r
    return float(ap)


def _sorted_by_confidence(dets: list[Detection]) -> list[Detection]:
    # tie-break: earlier start, then input order
    return [d for _, _, _, d in sorted(
        ((-d.confidence, d.proposal.start, i, d) for i, d in enumerate(dets)),
        key=lambda t: t[:3])]


def detection_map(detections: list[Detection],
                  ground_truth: list[GroundTruthInstance],
                  iou_set: list[float]):
    """Per-threshold AP table, mAP per threshold, and the threshold-averaged
    mAP. Classes without ground truth are excluded from the class mean."""
    classes = sorted({gt.class_id for gt in ground_truth})
    if not classes:
        raise ValueError("no ground-truth instances")
    per_threshold: dict[float, dict[int, float]] = {}
    map_per_threshold: dict[float, float] = {}
    for thr in iou_set:
        ap_by_class = {}
        for cls in classes:
            dets = _sorted_by_confidence([d for d in detections if d.class_id == cls])
            gts = [g for g in ground_truth if g.class_id == cls]
            tp = _match_detections(dets, gts, thr)
            ap_by_class[cls] = _average_precision(tp, len(gts))
        per_threshold[thr] = ap_by_class
        map_per_threshold[thr] = float(np.mean(list(ap_by_class.values())))
    avg = float(np.mean(list(map_per_threshold.values())))
    return per_threshold, map_per_threshold, avg


def average_recall_at_an(proposals_by_video: dict[str, list[Proposal]],
                         ground_truth: list[GroundTruthInstance],
                         an: int, iou_grid: list[float]) -> float:
    """Recall of ground truth by the top-AN proposals per video, averaged over
    the IoU grid. Proposals must already be sorted by score descending."""
    if an < 1:
        raise ValueError("AN must be >= 1")
    total_gt = len(ground_truth)
    if total_gt == 0:
        raise ValueError("no ground-truth instances")
    recalls = []
    for thr in iou_grid:
        matched_total = 0
        for vid in sorted(proposals_by_video):
            props = proposals_by_video[vid][:an]
            gts = [g for g in ground_truth if g.video_id == vid]
            matched = [False] * len(gts)
            for p in props:
                best_iou, best_j = 0.0, -1
                for j, gt in enumerate(gts):
                    if matched[j]:
                        continue
                    iou = interval_iou(p, Proposal(gt.start, gt.end))
                    if iou >= thr and iou > best_iou:
                        best_iou, best_j = iou, j
                if best_j >= 0:
                    matched[best_j] = True
            matched_total += sum(matched)
        recalls.append(matched_total / total_gt)
    return float(np.mean(recalls))


def proposal_classification_accuracy(proposals: list[Proposal],
                                     class_scores: np.ndarray,
                                     ground_truth: list[GroundTruthInstance],
                                     video_id: str = "") -> float | None:
    """TOP1 over proposals that overlap any ground-truth instance.

    Each retained proposal is labeled by the instance with highest IoU
    (earliest on ties). Returns None when nothing is retained.
    """
    class_scores = np.asarray(class_scores, dtype=np.float64)
    retained_scores, retained_labels = [], []
    for p, row in zip(proposals, class_scores):
        best_iou, best_cls = 0.0, None
        for gt in ground_truth:
            if gt.video_id != video_id:
                continue
            iou = interval_iou(p, Proposal(gt.start, gt.end))
            if iou > best_iou:
                best_iou, best_cls = iou, gt.class_id
        if best_cls is not None:
            retained_scores.append(row)
            retained_labels.append(best_cls)
    if not retained_labels:
        return None
    return top_k_accuracy(np.asarray(retained_scores), retained_labels, k=1)


def write_metric_records(path, records: list[dict]) -> None:
    """JSON-lines report, one record per (metric, split, trial)."""
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
