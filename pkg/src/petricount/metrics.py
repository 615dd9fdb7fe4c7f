"""Detection evaluation: greedy matching, AP/mAP, count MAPE, confusion tables.

All metrics operate on lists of Instance objects that may span several
images; matching itself is always per image. Only kept (non-excluded)
predictions participate anywhere.
"""

from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError
from .model import ClassLabel, Instance
from .pipeline import _pair_iou

log = logging.getLogger(__name__)

CONFUSION_ROWS = ("BVG-", "BVG+", "Invented")
CONFUSION_COLS = ("BVG-", "BVG+", "Missed")


def _default_thresholds() -> tuple:
    return tuple(round(0.50 + 0.05 * k, 2) for k in range(10))


@dataclass(frozen=True)
class EvalConfig:
    iou_thresholds: tuple = field(default_factory=_default_thresholds)
    match_iou_for_confusion: float = 0.50
    interpolation_points: int = 101
    mape_pooled: bool = False  # pool counts across images instead of per-image averaging

    def __post_init__(self):
        ts = tuple(self.iou_thresholds)
        object.__setattr__(self, "iou_thresholds", ts)
        if not ts:
            raise DomainError("iou_thresholds must be non-empty")
        if any(not (0.0 < t <= 1.0) for t in ts):
            raise DomainError("iou_thresholds must lie in (0, 1]")
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise DomainError("iou_thresholds must be strictly increasing")
        if not (0.0 < self.match_iou_for_confusion <= 1.0):
            raise DomainError("match_iou_for_confusion must lie in (0, 1]")
        if self.interpolation_points < 2:
            raise DomainError("interpolation_points must be >= 2")


@dataclass
class MatchResult:
    pairs: list  # (prediction_id, gt_id, iou)
    unmatched_predictions: list
    unmatched_gt: list


def _id_key(v):
    # stable ordering even when int and str ids are mixed
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        return (1, str(v))
    return (0, float(v))


def _score_order(preds: list[Instance]) -> list[Instance]:
    return sorted(preds, key=lambda p: (-p.score, _id_key(p.id)))


def match_instances(
    preds: list[Instance], gts: list[Instance], iou_threshold: float, class_aware: bool = True
) -> MatchResult:
    """Greedy one-to-one matching for a single image.

    Predictions are visited in descending score order (ties by id); each
    claims the still-unmatched ground truth with the highest IoU at or above
    the threshold, restricted to its own class when ``class_aware``.
    """
    preds = [p for p in preds if p.kept]
    ordered = _score_order(preds)
    taken = set()
    pairs = []
    matched_preds = set()
    for p in ordered:
        best = None
        for g in gts:
            if g.id in taken:
                continue
            if class_aware and g.label is not p.label:
                continue
            iou = _pair_iou(p, g)
            if iou < iou_threshold:
                continue
            if best is None or iou > best[1] or (iou == best[1] and _id_key(g.id) < _id_key(best[0].id)):
                best = (g, iou)
        if best is not None:
            g, iou = best
            taken.add(g.id)
            matched_preds.add(p.id)
            pairs.append((p.id, g.id, iou))
    return MatchResult(
        pairs=pairs,
        unmatched_predictions=[p.id for p in ordered if p.id not in matched_preds],
        unmatched_gt=[g.id for g in gts if g.id not in taken],
    )


def _by_image(instances: list[Instance]) -> dict:
    out = defaultdict(list)
    for inst in instances:
        out[inst.image_id].append(inst)
    return out


def average_precision(
    preds: list[Instance],
    gts: list[Instance],
    label: ClassLabel,
    iou_threshold: float,
    cfg: EvalConfig | None = None,
) -> float | None:
    """Interpolated AP (percent) for one class at one IoU threshold.

    Returns None when the ground truth contains no instance of the class
    (undefined; the caller omits it from averages).
    """
    cfg = cfg or EvalConfig()
    preds = [p for p in preds if p.kept and p.label is label]
    gts = [g for g in gts if g.label is label]
    n_gt = len(gts)
    if n_gt == 0:
        return None
    gt_img = _by_image(gts)
    flags = {}  # prediction id -> is true positive
    for image_id, img_preds in _by_image(preds).items():
        res = match_instances(img_preds, gt_img.get(image_id, []), iou_threshold, class_aware=True)
        matched = {pid for pid, _, _ in res.pairs}
        for p in img_preds:
            flags[p.id] = p.id in matched
    ranked = _score_order(preds)
    tp = np.cumsum([1 if flags[p.id] else 0 for p in ranked])
    fp = np.cumsum([0 if flags[p.id] else 1 for p in ranked])
    if len(ranked) == 0:
        return 0.0
    precision = tp / (tp + fp)
    recall = tp / n_gt
    # highest precision at recall >= r, evaluated on an even recall grid
    levels = np.linspace(0.0, 1.0, cfg.interpolation_points)
    best_at = np.zeros(len(precision))
    running = 0.0
    for i in range(len(precision) - 1, -1, -1):
        running = max(running, precision[i])
        best_at[i] = running
    idx = np.searchsorted(recall, levels, side="left")
    interp = np.where(idx < len(precision), best_at[np.minimum(idx, len(precision) - 1)], 0.0)
    return float(interp.mean() * 100.0)


def mean_average_precision(preds: list[Instance], gts: list[Instance], cfg: EvalConfig | None = None) -> dict:
    """mAP per threshold and averaged over the threshold list.

    Classes without ground truth are omitted; if no class is defined the
    values are None.
    """
    cfg = cfg or EvalConfig()
    map_at = {}
    for thr in cfg.iou_thresholds:
        aps = [average_precision(preds, gts, lab, thr, cfg) for lab in ClassLabel]
        defined = [a for a in aps if a is not None]
        map_at[thr] = float(np.mean(defined)) if defined else None
    defined = [v for v in map_at.values() if v is not None]
    return {
        "map_avg": float(np.mean(defined)) if defined else None,
        "map_at": map_at,
    }


def mape_counts(
    preds: list[Instance],
    gts: list[Instance],
    class_filter: ClassLabel | None = None,
    pooled: bool = False,
) -> float | None:
    """Mean absolute percentage error of per-image counts (percent).

    By default each image contributes one percentage error; images whose
    ground-truth count for the filter is zero are skipped. With ``pooled``
    the counts are summed across images first and a single error returned.
    Returns None when undefined (no usable image / zero pooled GT).
    """
    gt_counts = defaultdict(int)
    pred_counts = defaultdict(int)
    for g in gts:
        if class_filter is None or g.label is class_filter:
            gt_counts[g.image_id] += 1
    for p in preds:
        if p.kept and (class_filter is None or p.label is class_filter):
            pred_counts[p.image_id] += 1
    if pooled:
        total_gt = sum(gt_counts.values())
        if total_gt == 0:
            return None
        return 100.0 * abs(sum(pred_counts.values()) - total_gt) / total_gt
    errors = []
    skipped = 0
    image_ids = {g.image_id for g in gts} | {p.image_id for p in preds}
    for image_id in image_ids:
        n_gt = gt_counts[image_id]
        if n_gt == 0:
            skipped += 1
            continue
        errors.append(100.0 * abs(pred_counts[image_id] - n_gt) / n_gt)
    if skipped:
        log.info("mape_counts: skipped %d image(s) with zero ground-truth count", skipped)
    if not errors:
        return None
    return float(np.mean(errors))


@dataclass
class ConfusionMatrix:
    """Class-confusion counts with Missed / Invented extensions.

    Rows are actual classes plus Invented (prediction with no ground truth);
    columns are predicted classes plus Missed (ground truth never predicted).
    The (Invented, Missed) cell cannot occur and is undefined.
    """

    counts: dict

    @classmethod
    def empty(cls) -> "ConfusionMatrix":
        counts = {
            row: {col: 0 for col in CONFUSION_COLS if not (row == "Invented" and col == "Missed")}
            for row in CONFUSION_ROWS
        }
        return cls(counts=counts)

    def add(self, row: str, col: str, n: int = 1) -> None:
        if row == "Invented" and col == "Missed":
            raise DomainError("the (Invented, Missed) cell is undefined")
        self.counts[row][col] += n

    def cell(self, row: str, col: str):
        return self.counts[row].get(col)

    def row_sum(self, row: str) -> int:
        return sum(self.counts[row].values())

    def as_grid(self) -> list:
        """Rows in fixed order; the undefined cell is None."""
        return [
            [self.counts[row].get(col) for col in CONFUSION_COLS]
            for row in CONFUSION_ROWS
        ]


def confusion_matrix(preds: list[Instance], gts: list[Instance], cfg: EvalConfig | None = None) -> ConfusionMatrix:
    """Tabulate (actual, predicted) pairs from class-agnostic matching."""
    cfg = cfg or EvalConfig()
    m = ConfusionMatrix.empty()
    gt_img = _by_image(gts)
    pred_img = _by_image([p for p in preds if p.kept])
    for image_id in sorted(set(gt_img) | set(pred_img), key=_id_key):
        img_preds = pred_img.get(image_id, [])
        img_gts = gt_img.get(image_id, [])
        res = match_instances(img_preds, img_gts, cfg.match_iou_for_confusion, class_aware=False)
        gt_by_id = {g.id: g for g in img_gts}
        pred_by_id = {p.id: p for p in img_preds}
        for pid, gid, _ in res.pairs:
            m.add(gt_by_id[gid].label.value, pred_by_id[pid].label.value)
        for gid in res.unmatched_gt:
            m.add(gt_by_id[gid].label.value, "Missed")
        for pid in res.unmatched_predictions:
            m.add("Invented", pred_by_id[pid].label.value)
    return m


def normalize_confusion(m: ConfusionMatrix) -> dict:
    """Scale each defined row to percentages summing to 100.

    Zero rows are omitted. Values are unrounded; presentation layers round
    to one decimal.
    """
    out = {}
    for row in CONFUSION_ROWS:
        total = m.row_sum(row)
        if total == 0:
            continue
        out[row] = [
            (100.0 * m.counts[row][col] / total) if col in m.counts[row] else None
            for col in CONFUSION_COLS
        ]
    return out


VARIABILITY_METRICS = ("total", "BVG+", "BVG-")


@dataclass
class VariabilityReport:
    pairs: dict  # (reference_name, other_name) -> {metric: percent | None}
    user_to_user: dict  # metric -> percent | None
    user_to_model: dict  # metric -> percent | None


def _pair_mape(ref_counts: dict, other_counts: dict, metric: str) -> float | None:
    errors = []
    for image_id, ref in ref_counts.items():
        a = _metric_count(ref, metric)
        bcounts = other_counts[image_id]
        if a == 0:
            continue
        errors.append(100.0 * abs(_metric_count(bcounts, metric) - a) / a)
    return float(np.mean(errors)) if errors else None


def _metric_count(counts: dict, metric: str) -> int:
    if metric == "total":
        return sum(counts.values())
    return counts.get(metric, 0)


def variability_report(count_sets: dict, model_rater: str = "model") -> VariabilityReport:
    """Pairwise count-MAPE between named raters over one image set.

    ``count_sets`` maps rater name to {image_id: {"BVG-": n, "BVG+": n}}.
    The first-named rater of each pair is the reference (denominator).
    User-vs-model values are averaged over users.
    """
    names = list(count_sets)
    if len(names) < 2:
        raise DomainError("need at least two raters")
    image_sets = [frozenset(count_sets[n]) for n in names]
    if len(set(image_sets)) != 1:
        raise DomainError("raters cover different image sets")
    pairs = {}
    for i in range(len(names)):
        for j in range(i + 1, len(names)):
            ref, other = names[i], names[j]
            pairs[(ref, other)] = {
                met: _pair_mape(count_sets[ref], count_sets[other], met)
                for met in VARIABILITY_METRICS
            }
    def _avg(selected):
        out = {}
        for met in VARIABILITY_METRICS:
            vals = [pairs[k][met] for k in selected if pairs[k][met] is not None]
            out[met] = float(np.mean(vals)) if vals else None
        return out

    u2u = [k for k in pairs if model_rater not in k]
    u2m = [k for k in pairs if model_rater in k]
    return VariabilityReport(pairs=pairs, user_to_user=_avg(u2u), user_to_model=_avg(u2m))


@dataclass
class EvalReport:
    """Everything one evaluation run produces, ready for rendering.

    Percentages are unrounded; ``map_at`` is keyed by IoU threshold and
    ``mape_per_class`` by class name. Values are None when undefined
    (e.g. a class without ground truth).
    """

    map_avg: float | None
    map_at: dict  # iou threshold -> percent | None
    mape_per_class: dict  # class name -> percent | None
    mape_total: float | None
    confusion: ConfusionMatrix
    per_image_counts: list  # rows: {image_id, ground_truth: {...}, predicted: {...}}


def per_image_count_rows(preds: list[Instance], gts: list[Instance]) -> list:
    """Kept-prediction and ground-truth counts per image and class."""
    gt_by_image = defaultdict(lambda: {"BVG-": 0, "BVG+": 0})
    pred_by_image = defaultdict(lambda: {"BVG-": 0, "BVG+": 0})
    for g in gts:
        gt_by_image[g.image_id][g.label.value] += 1
    for p in preds:
        if p.kept:
            pred_by_image[p.image_id][p.label.value] += 1
    image_ids = sorted(set(gt_by_image) | set(pred_by_image), key=_id_key)
    return [
        {
            "image_id": image_id,
            "ground_truth": dict(gt_by_image[image_id]),
            "predicted": dict(pred_by_image[image_id]),
        }
        for image_id in image_ids
    ]


def build_eval_report(preds: list[Instance], gts: list[Instance], cfg: EvalConfig | None = None) -> EvalReport:
    """Run the full evaluation battery over one prediction/ground-truth set."""
    cfg = cfg or EvalConfig()
    ap = mean_average_precision(preds, gts, cfg)
    return EvalReport(
        map_avg=ap["map_avg"],
        map_at=ap["map_at"],
        mape_per_class={
            lab.value: mape_counts(preds, gts, class_filter=lab, pooled=cfg.mape_pooled)
            for lab in ClassLabel
        },
        mape_total=mape_counts(preds, gts, pooled=cfg.mape_pooled),
        confusion=confusion_matrix(preds, gts, cfg),
        per_image_counts=per_image_count_rows(preds, gts),
    )
