"""
Comparators Module
Metric functions and per-task divergence predicates comparing original
(reference) against optimized (test) inference records.
"""

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import stats

from src.core_types import (
    AnswerTensor, BinaryLabel, ComparatorConfig, ComparisonRecord, Detection, Detections,
    ErrorPayload, GeneratedText, InferenceRecord, RankedLabels, Task,
)
from src.errors import ComparatorError, InvalidBox, InvalidK

Box = Tuple[float, float, float, float]


# ---------------------------------------------------------------------------
# Ranked labels
# ---------------------------------------------------------------------------

def kendall_tau_topk(ref_labels: Sequence[int], test_labels: Sequence[int], k: int) -> float:
    """
    Kendall tau-b between two top-K label lists

    Ranks are taken over the union of both top-K sets; a label missing from
    one list gets the tied rank K+1 there. Lists whose orders agree but where
one stops early score the share of labels they have in common.

    Args:
        ref_labels: Reference ranking, best first
        test_labels: Test ranking, best first
        k: Cutoff

    Returns:
        Tau in [-1, 1]; exactly 1 iff the top-K lists are identical
    """
    if not isinstance(k, (int, np.integer)) or k <= 0:
        raise InvalidK(f"K must be a positive integer, got {k!r}")
    ref_top = list(ref_labels)[:k]
    test_top = list(test_labels)[:k]
    if not ref_top and not test_top:
        raise ComparatorError("Kendall tau is undefined for two empty label lists")
    if ref_top == test_top:
        return 1.0

    union = list(dict.fromkeys(ref_top + test_top))
    ref_rank = {label: i + 1 for i, label in enumerate(ref_top)}
    test_rank = {label: i + 1 for i, label in enumerate(test_top)}
    x = [ref_rank.get(label, k + 1) for label in union]
    y = [test_rank.get(label, k + 1) for label in union]
    if len(union) < 2:
        return 0.0
    tau, _ = stats.kendalltau(x, y)
    # constant ranks on one side (one list empty)
    if tau is None or math.isnan(tau):
        return 0.0
    if tau >= 1.0 - 1e-12:
        # orders agree but one list stops early
        shared = set(ref_top) & set(test_top)
        return len(shared) / len(union)
    return float(np.clip(tau, -1.0, 1.0))


@dataclass(frozen=True)
class ClassificationDivergence:
    taus: Dict[int, float]
    top1_changed: bool

    @property
    def diverged_at(self) -> Tuple[int, ...]:
        return tuple(k for k, tau in self.taus.items() if tau < 1.0)

    @property
    def diverged(self) -> bool:
        return bool(self.diverged_at)


def classification_divergence(ref: RankedLabels, test: RankedLabels,
                              top_k_values: Sequence[int]) -> ClassificationDivergence:
    taus = {k: kendall_tau_topk(ref.labels, test.labels, k) for k in top_k_values}
    return ClassificationDivergence(taus=taus, top1_changed=ref.top(1) != test.top(1))


# ---------------------------------------------------------------------------
# Detection
# ---------------------------------------------------------------------------

def _check_box(box: Sequence[float]):
    if len(box) != 4 or box[0] > box[2] or box[1] > box[3]:
        raise InvalidBox(f"malformed box {tuple(box)}: expected (x1, y1, x2, y2) with x1 <= x2, y1 <= y2")


def iou(box_a: Sequence[float], box_b: Sequence[float]) -> float:
    """Intersection over union; zero-area boxes score 0"""
    _check_box(box_a)
    _check_box(box_b)
    ax1, ay1, ax2, ay2 = box_a
    bx1, by1, bx2, by2 = box_b
    area_a = (ax2 - ax1) * (ay2 - ay1)
    area_b = (bx2 - bx1) * (by2 - by1)
    if area_a <= 0 or area_b <= 0:
        return 0.0
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    return inter / (area_a + area_b - inter)


@dataclass(frozen=True)
class DetectionMatch:
    pairs: Tuple[Tuple[int, int, float], ...] = ()
    unmatched_ref: Tuple[int, ...] = ()
    unmatched_test: Tuple[int, ...] = ()

    @property
    def matched_test(self) -> Dict[int, float]:
        return {t: value for _, t, value in self.pairs}


def _score_order(dets: Sequence[Detection]) -> List[int]:
    return sorted(range(len(dets)), key=lambda i: -dets[i].score)


def match_detections(ref: Detections, test: Detections, threshold: float) -> DetectionMatch:
    """
    Greedy class-aware one-to-one matching

    Test detections are visited by score descending; each claims the
    unclaimed same-label reference detection with the highest IoU at or
    above the threshold.
    """
    claimed = set()
    pairs = []
    unmatched_test = []
    for t in _score_order(test.items):
        det = test.items[t]
        best, best_iou = None, -1.0
        for r, ref_det in enumerate(ref.items):
            if r in claimed or ref_det.label != det.label:
                continue
            value = iou(ref_det.box, det.box)
            if value >= threshold and value > best_iou:
                best, best_iou = r, value
        if best is None:
            unmatched_test.append(t)
        else:
            claimed.add(best)
            pairs.append((best, t, best_iou))
    unmatched_ref = tuple(r for r in range(len(ref.items)) if r not in claimed)
    return DetectionMatch(pairs=tuple(pairs), unmatched_ref=unmatched_ref,
                          unmatched_test=tuple(sorted(unmatched_test)))


def average_precision(tp_flags: Sequence[bool], total_ref: int) -> float:
    """
    All-point AP over score-ranked test detections

    Args:
        tp_flags: True positive flag per test detection, best score first
        total_ref: Number of reference detections

    Returns:
        Area under the interpolated precision-recall envelope
    """
    if total_ref <= 0:
        raise ComparatorError("AP is undefined without reference detections")
    if len(tp_flags) == 0:
        return 0.0
    tp = np.cumsum(np.asarray(tp_flags, dtype=np.float64))
    fp = np.cumsum(1.0 - np.asarray(tp_flags, dtype=np.float64))
    rec = tp / total_ref
    prec = tp / np.maximum(tp + fp, np.finfo(np.float64).eps)

    mrec = np.concatenate(([0.0], rec, [1.0]))
    mpre = np.concatenate(([0.0], prec, [0.0]))
    for i in range(mpre.size - 1, 0, -1):
        mpre[i - 1] = np.maximum(mpre[i - 1], mpre[i])
    i = np.where(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[i + 1] - mrec[i]) * mpre[i + 1]))


@dataclass(frozen=True)
class ThresholdMetrics:
    precision: float
    recall: float
    f1: float
    ap: float
    map: float
    mean_iou: float
    mean_precision: float = 0.0
    mean_recall: float = 0.0
    mean_f1: float = 0.0
    class_ap: Dict[int, float] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "ap": self.ap,
            "map": self.map,
            "mean_iou": self.mean_iou,
            "mean_precision": self.mean_precision,
            "mean_recall": self.mean_recall,
            "mean_f1": self.mean_f1,
            "class_ap": {str(label): value for label, value in sorted(self.class_ap.items())},
        }


@dataclass(frozen=True)
class DetectionMetrics:
    per_threshold: Dict[float, ThresholdMetrics]
    ar: float

    def to_dict(self) -> Dict[str, Any]:
        return {
            "thresholds": {f"{t:g}": m.to_dict() for t, m in self.per_threshold.items()},
            "ar": self.ar,
        }


def f1_score(precision: float, recall: float) -> float:
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def detection_metrics(scenes: Sequence[Tuple[Detections, Detections]],
                      thresholds: Sequence[float]) -> Optional[DetectionMetrics]:
    """
    Dataset-level detection metrics with the reference model as ground truth

    Precision, recall and F1 are pooled over all detections; the mean_*
    variants score every input on its own and average those scores, an
    input without test (reference) detections counting precision (recall) 1.

    Args:
        scenes: (reference, test) detections per input
        thresholds: IoU thresholds

    Returns:
        Metrics per threshold plus AR, or None when the reference holds no
        detections at all
    """
    total_ref = sum(len(ref.items) for ref, _ in scenes)
    if total_ref == 0:
        return None
    total_test = sum(len(test.items) for _, test in scenes)
    ref_per_class = Counter(d.label for ref, _ in scenes for d in ref.items)

    per_threshold: Dict[float, ThresholdMetrics] = {}
    for threshold in thresholds:
        ranked: List[Tuple[float, int, bool]] = []
        ious: List[float] = []
        matched = 0
        per_input: List[Tuple[float, float]] = []
        for ref, test in scenes:
            match = match_detections(ref, test, threshold)
            hits = match.matched_test
            matched += len(match.pairs)
            per_input.append((len(match.pairs) / len(test.items) if test.items else 1.0,
                              len(match.pairs) / len(ref.items) if ref.items else 1.0))
            ious.extend(value for _, _, value in match.pairs)
            for t in _score_order(test.items):
                ranked.append((test.items[t].score, test.items[t].label, t in hits))
        ranked.sort(key=lambda row: -row[0])

        precision = matched / total_test if total_test else 0.0
        recall = matched / total_ref
        class_ap = {
            label: average_precision([hit for _, l, hit in ranked if l == label], count)
            for label, count in sorted(ref_per_class.items())
        }
        per_threshold[threshold] = ThresholdMetrics(
            precision=precision,
            recall=recall,
            f1=f1_score(precision, recall),
            ap=average_precision([hit for _, _, hit in ranked], total_ref),
            map=float(np.mean(list(class_ap.values()))),
            mean_iou=float(np.mean(ious)) if ious else 0.0,
            mean_precision=float(np.mean([p for p, _ in per_input])),
            mean_recall=float(np.mean([r for _, r in per_input])),
            mean_f1=float(np.mean([f1_score(p, r) for p, r in per_input])),
            class_ap=class_ap,
        )
    ar = float(np.mean([m.recall for m in per_threshold.values()]))
    return DetectionMetrics(per_threshold=per_threshold, ar=ar)


# ---------------------------------------------------------------------------
# Text, binary labels and tensors
# ---------------------------------------------------------------------------

def _tokens(text: str) -> List[str]:
    return text.casefold().split()


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _modified_precision(candidate: Sequence[str], reference: Sequence[str], n: int) -> Tuple[int, int]:
    counts = _ngrams(candidate, n)
    ref_counts = _ngrams(reference, n)
    clipped = sum(min(count, ref_counts[gram]) for gram, count in counts.items())
    return clipped, max(1, sum(counts.values()))


def _brevity_penalty(cand_len: int, ref_len: int) -> float:
    if cand_len >= ref_len:
        return 1.0
    return math.exp(1 - ref_len / cand_len)


def bleu(reference_text: str, candidate_text: str, max_n: int = 4) -> float:
    """
    Sentence BLEU with uniform weights over 1..max_n

    Zero-count n-gram precisions are smoothed by adding one to numerator
    and denominator; orders with no candidate n-grams count one n-gram.

    Raises:
        ComparatorError: If the reference is empty
    """
    reference = _tokens(reference_text)
    candidate = _tokens(candidate_text)
    if not reference:
        raise ComparatorError("BLEU is undefined for an empty reference")
    if not candidate:
        return 0.0
    if candidate == reference:
        return 1.0
    log_sum = 0.0
    for n in range(1, max_n + 1):
        matched, total = _modified_precision(candidate, reference, n)
        if matched == 0:
            matched, total = 1, total + 1
        log_sum += math.log(matched / total) / max_n
    return _brevity_penalty(len(candidate), len(reference)) * math.exp(log_sum)


def binary_diff_rate(ref_labels: Sequence[int], test_labels: Sequence[int]) -> float:
    if len(ref_labels) != len(test_labels):
        raise ComparatorError(f"label lists differ in length: {len(ref_labels)} vs {len(test_labels)}")
    if not ref_labels:
        return 0.0
    return float(np.mean(np.asarray(ref_labels) != np.asarray(test_labels)))


SHAPE_MISMATCH = "SHAPE_MISMATCH"


@dataclass(frozen=True)
class TensorComparison:
    equal: bool
    max_abs_diff: float
    diverged: bool
    reason: Optional[str] = None


def tensor_compare(ref_tensor, test_tensor, abs_tol: float = 0.0, rel_tol: float = 0.0) -> TensorComparison:
    """Elementwise |a - b| <= abs_tol + rel_tol * |b|; a shape mismatch is divergence"""
    a = np.asarray(ref_tensor, dtype=np.float64)
    b = np.asarray(test_tensor, dtype=np.float64)
    if a.shape != b.shape:
        return TensorComparison(equal=False, max_abs_diff=math.inf, diverged=True, reason=SHAPE_MISMATCH)
    if a.size == 0:
        return TensorComparison(equal=True, max_abs_diff=0.0, diverged=False)
    close = np.isclose(a, b, rtol=rel_tol, atol=abs_tol, equal_nan=True)
    diff = np.abs(a - b)
    diff[np.isnan(a) & np.isnan(b)] = 0.0
    max_abs_diff = float(np.max(diff))
    diverged = not bool(np.all(close))
    return TensorComparison(equal=not diverged, max_abs_diff=max_abs_diff, diverged=diverged)


# ---------------------------------------------------------------------------
# Dispatch
# ---------------------------------------------------------------------------

COMPARATORS = {
    Task.CLASSIFICATION: "classification_divergence",
    Task.DETECTION: "detection",
    Task.TEXT_GENERATION: "bleu",
    Task.SENTIMENT: "binary_diff_rate",
    Task.QUESTION_ANSWERING: "tensor_compare",
}


def select_comparator(task: Task) -> str:
    return COMPARATORS[Task(task)]


def _expect(payload, kind, task: Task):
    if not isinstance(payload, kind):
        raise ComparatorError(f"{task.value} comparator got a {type(payload).__name__} payload")
    return payload


def _ranked_metrics(ref: RankedLabels, test: RankedLabels, top_k_values: Sequence[int]) -> Tuple[Dict[str, float], bool]:
    if not ref.labels and not test.labels:
        return {f"tau@{k}": 1.0 for k in top_k_values}, False
    result = classification_divergence(ref, test, top_k_values)
    metrics = {f"tau@{k}": tau for k, tau in result.taus.items()}
    metrics["top1_changed"] = float(result.top1_changed)
    return metrics, result.diverged


def compare_records(task: Task, ref: InferenceRecord, test: InferenceRecord,
                    config: Optional[ComparatorConfig] = None) -> ComparisonRecord:
    """
    Compare one input's reference and test records with the task's comparator

    Records carrying an error payload on either side are diverged with
    metric error = 1.
    """
    task = Task(task)
    config = config or ComparatorConfig()
    if ref.input_id != test.input_id:
        raise ComparatorError(f"comparing different inputs: {ref.input_id} vs {test.input_id}")
    if isinstance(ref.payload, ErrorPayload) or isinstance(test.payload, ErrorPayload):
        return ComparisonRecord(ref.input_id, {"error": 1.0}, True)

    comparator = select_comparator(task)
    if comparator == "classification_divergence":
        metrics, diverged = _ranked_metrics(_expect(ref.payload, RankedLabels, task),
                                            _expect(test.payload, RankedLabels, task), config.top_k_values)
    elif comparator == "detection":
        ref_dets = _expect(ref.payload, Detections, task)
        test_dets = _expect(test.payload, Detections, task)
        metrics, diverged = _ranked_metrics(ref_dets.ranked_labels(), test_dets.ranked_labels(),
                                            config.top_k_values)
        for threshold in config.iou_thresholds:
            match = match_detections(ref_dets, test_dets, threshold)
            imperfect = bool(match.unmatched_ref or match.unmatched_test)
            diverged = diverged or imperfect
            if test_dets.items:
                metrics[f"precision@{threshold:g}"] = len(match.pairs) / len(test_dets.items)
            if ref_dets.items:
                metrics[f"recall@{threshold:g}"] = len(match.pairs) / len(ref_dets.items)
            if match.pairs:
                metrics[f"iou@{threshold:g}"] = float(np.mean([v for _, _, v in match.pairs]))
    elif comparator == "bleu":
        score = bleu(_expect(ref.payload, GeneratedText, task).text,
                     _expect(test.payload, GeneratedText, task).text, config.bleu_max_n)
        metrics, diverged = {"bleu": score}, score < 1.0
    elif comparator == "binary_diff_rate":
        rate = binary_diff_rate([_expect(ref.payload, BinaryLabel, task).value],
                                [_expect(test.payload, BinaryLabel, task).value])
        metrics, diverged = {"diff": rate}, rate > 0
    else:
        ref_t = _expect(ref.payload, AnswerTensor, task)
        test_t = _expect(test.payload, AnswerTensor, task)
        result = tensor_compare(np.reshape(ref_t.values, ref_t.shape), np.reshape(test_t.values, test_t.shape),
                                config.tensor_abs_tol, config.tensor_rel_tol)
        metrics = {"shape_mismatch": float(result.reason == SHAPE_MISMATCH)}
        if result.reason != SHAPE_MISMATCH:
            metrics["max_abs_diff"] = result.max_abs_diff
        diverged = result.diverged
    return ComparisonRecord(ref.input_id, metrics, diverged)


def compare_runs(task: Task, ref_records: Sequence[InferenceRecord], test_records: Sequence[InferenceRecord],
                 config: Optional[ComparatorConfig] = None) -> List[ComparisonRecord]:
    """Pairwise comparison by input id, in reference order"""
    test_by_id = {r.input_id: r for r in test_records}
    missing = [r.input_id for r in ref_records if r.input_id not in test_by_id]
    if missing or len(test_by_id) != len(ref_records):
        raise ComparatorError(f"reference and test runs cover different inputs (missing: {missing[:5]})")
    return [compare_records(task, ref, test_by_id[ref.input_id], config) for ref in ref_records]


def aggregate_comparisons(task: Task, comparisons: Sequence[ComparisonRecord],
                          ref_records: Sequence[InferenceRecord] = (),
                          test_records: Sequence[InferenceRecord] = (),
                          config: Optional[ComparatorConfig] = None) -> Dict[str, Any]:
    """
    Dataset-level aggregate block

    Returns:
        Input and divergence counts plus task-specific aggregates: per-K
        divergence rate (classification, detection), the detection metric
        table per threshold, mean BLEU, differing-label rate or max abs diff
    """
    task = Task(task)
    config = config or ComparatorConfig()
    count = len(comparisons)
    diverged = sum(1 for c in comparisons if c.diverged)
    aggregate: Dict[str, Any] = {
        "inputs": count,
        "diverged": diverged,
        "divergence_rate": diverged / count if count else 0.0,
        "errors": sum(1 for c in comparisons if c.metrics.get("error")),
    }
    valid = [c for c in comparisons if not c.metrics.get("error")]

    if task in (Task.CLASSIFICATION, Task.DETECTION):
        for k in config.top_k_values:
            key = f"tau@{k}"
            rate = sum(1 for c in valid if c.metrics.get(key, 1.0) < 1.0) / count if count else 0.0
            aggregate[f"divergence_rate@{k}"] = rate
        aggregate["top1_change_rate"] = (
            sum(c.metrics.get("top1_changed", 0.0) for c in valid) / count if count else 0.0
        )
    if task is Task.DETECTION:
        test_by_id = {r.input_id: r for r in test_records}
        scenes = [
            (ref.payload, test_by_id[ref.input_id].payload)
            for ref in ref_records
            if ref.input_id in test_by_id
            and isinstance(ref.payload, Detections)
            and isinstance(test_by_id[ref.input_id].payload, Detections)
        ]
        metrics = detection_metrics(scenes, config.iou_thresholds)
        aggregate["detection"] = metrics.to_dict() if metrics else None
    elif task is Task.TEXT_GENERATION:
        scores = [c.metrics["bleu"] for c in valid if "bleu" in c.metrics]
        aggregate["mean_bleu"] = float(np.mean(scores)) if scores else None
    elif task is Task.SENTIMENT:
        pairs = [(r.payload.value, t.payload.value) for r, t in _paired(ref_records, test_records)
                 if isinstance(r.payload, BinaryLabel) and isinstance(t.payload, BinaryLabel)]
        aggregate["diff_rate"] = binary_diff_rate([p[0] for p in pairs], [p[1] for p in pairs])
    elif task is Task.QUESTION_ANSWERING:
        diffs = [c.metrics["max_abs_diff"] for c in valid if "max_abs_diff" in c.metrics]
        aggregate["max_abs_diff"] = max(diffs) if diffs else None
        aggregate["shape_mismatches"] = sum(1 for c in valid if c.metrics.get("shape_mismatch"))
    return aggregate


def _paired(ref_records: Sequence[InferenceRecord], test_records: Sequence[InferenceRecord]):
    test_by_id = {r.input_id: r for r in test_records}
    return [(r, test_by_id[r.input_id]) for r in ref_records if r.input_id in test_by_id]
