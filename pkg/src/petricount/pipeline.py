"""The four-stage exclusion pipeline applied to one image's predictions.

Stages run in a fixed order: score cut, cross-class duplicate resolution,
dish-boundary containment, per-image area outlier rejection. Nothing is ever
deleted; instances only gain an exclusion reason (and possibly an "unsure"
flag) so reviewers can overturn any decision later.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np

from .errors import DomainError, LaplaceFitError, MissingEllipseError
from .geometry import EllipseModel, iou_bbox, iou_mask, shrink_ellipse, instance_touches_ellipse
from .model import ClassLabel, ExclusionReason, ImageRecord, Instance, Origin, other_label


@dataclass(frozen=True)
class PostProcConfig:
    """Filter parameters; the defaults are the published operating point."""

    score_threshold: float = 0.70
    dup_iou_threshold: float = 0.70
    ellipse_shrink: float = 0.98
    laplace_ci: float = 0.99
    min_instances_for_area_filter: int = 5

    def __post_init__(self):
        if not (0.0 <= self.score_threshold <= 1.0):
            raise DomainError(f"score_threshold must be in [0, 1], got {self.score_threshold}")
        if not (0.0 < self.dup_iou_threshold <= 1.0):
            raise DomainError(f"dup_iou_threshold must be in (0, 1], got {self.dup_iou_threshold}")
        if not (0.0 < self.ellipse_shrink <= 1.0):
            raise DomainError(f"ellipse_shrink must be in (0, 1], got {self.ellipse_shrink}")
        if not (0.0 < self.laplace_ci < 1.0):
            raise DomainError(f"laplace_ci must be in (0, 1), got {self.laplace_ci}")
        if self.min_instances_for_area_filter < 3:
            raise DomainError("min_instances_for_area_filter must be >= 3")

    def to_dict(self) -> dict:
        return {
            "score_threshold": self.score_threshold,
            "dup_iou_threshold": self.dup_iou_threshold,
            "ellipse_shrink": self.ellipse_shrink,
            "laplace_ci": self.laplace_ci,
            "min_instances_for_area_filter": self.min_instances_for_area_filter,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PostProcConfig":
        known = {f: d[f] for f in cls.__dataclass_fields__ if f in d}
        extra = set(d) - set(cls.__dataclass_fields__)
        if extra:
            raise DomainError(f"unknown config keys: {sorted(extra)}")
        return cls(**known)

    @classmethod
    def from_file(cls, path) -> "PostProcConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass(frozen=True)
class LaplaceParams:
    """Location/scale of a Laplace distribution over colony areas."""

    mu: float
    b: float

    def __post_init__(self):
        if self.b <= 0:
            raise LaplaceFitError(f"scale must be positive, got {self.b}")


def fit_laplace(areas) -> LaplaceParams:
    """Maximum-likelihood Laplace fit: median location, mean absolute deviation scale."""
    vals = np.asarray(areas, dtype=float)
    if vals.size < 2:
        raise LaplaceFitError(f"need at least 2 values, got {vals.size}")
    mu = float(np.median(vals))
    b = float(np.mean(np.abs(vals - mu)))
    if b <= 0:
        raise LaplaceFitError("zero deviation: all values equal")
    return LaplaceParams(mu=mu, b=b)


def laplace_quantile(p: LaplaceParams, q: float) -> float:
    """Inverse CDF of the fitted Laplace distribution."""
    if not (0.0 < q < 1.0):
        raise DomainError(f"quantile level must be in (0, 1), got {q}")
    if q < 0.5:
        return p.mu + p.b * np.log(2.0 * q)
    return p.mu - p.b * np.log(2.0 * (1.0 - q))


def _pair_iou(p: Instance, q: Instance) -> float:
    if p.mask is not None and q.mask is not None:
        return iou_mask(p.mask, q.mask)
    return iou_bbox(p.bbox, q.bbox)


def filter_by_score(instances: list[Instance], cfg: PostProcConfig) -> list[Instance]:
    """Stage 1: exclude predictions scoring strictly below the threshold."""
    out = []
    for inst in instances:
        if inst.kept and inst.origin is Origin.MODEL and inst.score < cfg.score_threshold:
            inst = replace(inst, excluded=ExclusionReason.BELOW_SCORE_THRESHOLD)
        out.append(inst)
    return out


def resolve_cross_class_duplicates(instances: list[Instance], cfg: PostProcConfig) -> list[Instance]:
    """Stage 2: drop the weaker of two cross-class detections of one object.

    Candidate pairs (different labels, IoU >= threshold) are processed in
    descending pair IoU; a loser of an earlier pair cannot knock out anyone
    later. The survivor is flagged unsure with the loser's class as the
    alternative. Score ties keep the BVG+ member.
    """
    out = list(instances)
    active = [k for k, inst in enumerate(out) if inst.kept and inst.origin is Origin.MODEL]
    pairs = []
    for ai in range(len(active)):
        for bi in range(ai + 1, len(active)):
            i, j = active[ai], active[bi]
            if out[i].label is out[j].label:
                continue
            iou = _pair_iou(out[i], out[j])
            if iou >= cfg.dup_iou_threshold:
                pairs.append((iou, i, j))
    # descending IoU; index pair as a deterministic tie-break
    pairs.sort(key=lambda t: (-t[0], t[1], t[2]))
    for _, i, j in pairs:
        if not (out[i].kept and out[j].kept):
            continue
        if out[i].score > out[j].score:
            win, lose = i, j
        elif out[j].score > out[i].score:
            win, lose = j, i
        else:
            win, lose = (i, j) if out[i].label is ClassLabel.BVG_PLUS else (j, i)
        out[lose] = replace(out[lose], excluded=ExclusionReason.CROSS_CLASS_DUPLICATE)
        if not out[win].unsure:
            out[win] = replace(out[win], unsure=True, alt_label=out[lose].label)
    return out


def filter_by_dish(
    instances: list[Instance], ellipse: EllipseModel | None, cfg: PostProcConfig
) -> list[Instance]:
    """Stage 3: exclude predictions outside the shrunken dish ellipse."""
    if ellipse is None:
        raise MissingEllipseError("no dish ellipse available for this image")
    shrunk = shrink_ellipse(ellipse, cfg.ellipse_shrink)
    out = []
    for inst in instances:
        if (
            inst.kept
            and inst.origin is Origin.MODEL
            and not instance_touches_ellipse(inst, shrunk)
        ):
            inst = replace(inst, excluded=ExclusionReason.OUTSIDE_DISH)
        out.append(inst)
    return out


def filter_area_outliers(instances: list[Instance], cfg: PostProcConfig):
    """Stage 4: exclude instances whose area leaves the fitted Laplace band.

    The Laplace distribution is fitted on the areas of the instances still
    kept at this point. Skipped (no exclusions, params None) when fewer than
    ``min_instances_for_area_filter`` survivors exist or the fit degenerates.

    Returns (instances, LaplaceParams | None).
    """
    survivors = [k for k, inst in enumerate(instances) if inst.kept and inst.origin is Origin.MODEL]
    if len(survivors) < cfg.min_instances_for_area_filter:
        return list(instances), None
    areas = [instances[k].area() for k in survivors]
    try:
        params = fit_laplace(areas)
    except LaplaceFitError:
        return list(instances), None
    tail = (1.0 - cfg.laplace_ci) / 2.0
    lo = laplace_quantile(params, tail)
    hi = laplace_quantile(params, 1.0 - tail)
    out = list(instances)
    for k, area in zip(survivors, areas):
        if area < lo or area > hi:
            out[k] = replace(out[k], excluded=ExclusionReason.AREA_OUTLIER)
    return out, params


@dataclass
class PipelineResult:
    instances: list[Instance]
    laplace: LaplaceParams | None
    ellipse_used: EllipseModel

    @property
    def kept(self) -> list[Instance]:
        return [i for i in self.instances if i.kept]

    @property
    def excluded(self) -> list[Instance]:
        return [i for i in self.instances if not i.kept]

    def exclusion_counts(self) -> dict:
        counts = {reason.value: 0 for reason in ExclusionReason}
        for inst in self.instances:
            if inst.excluded is not None:
                counts[inst.excluded.value] += 1
        return counts


def run_pipeline(image: ImageRecord, instances: list[Instance], cfg: PostProcConfig) -> PipelineResult:
    """Apply the four filters in order to one image's predictions.

    Deterministic; input instances are never mutated. Each excluded instance
    records the first (and only) stage that removed it. Requires the image's
    dish ellipse.
    """
    if image.dish_ellipse is None:
        raise MissingEllipseError(f"image {image.id} has no dish ellipse")
    staged = filter_by_score(instances, cfg)
    staged = resolve_cross_class_duplicates(staged, cfg)
    staged = filter_by_dish(staged, image.dish_ellipse, cfg)
    staged, laplace = filter_area_outliers(staged, cfg)
    return PipelineResult(instances=staged, laplace=laplace, ellipse_used=image.dish_ellipse)


PIPELINE_REASONS = (
    ExclusionReason.BELOW_SCORE_THRESHOLD,
    ExclusionReason.CROSS_CLASS_DUPLICATE,
    ExclusionReason.OUTSIDE_DISH,
    ExclusionReason.AREA_OUTLIER,
)


def reset_pipeline_marks(instances: list[Instance]) -> list[Instance]:
    """Undo what a previous run left on model predictions.

    Pipeline-reason exclusions and unsure/alternative flags are cleared so a
    rerun starts from a clean slate; user deletions and non-model instances
    pass through untouched.
    """
    out = []
    for inst in instances:
        if inst.origin is Origin.MODEL:
            if inst.excluded in PIPELINE_REASONS:
                inst = replace(inst, excluded=None)
            if inst.unsure or inst.alt_label is not None:
                inst = replace(inst, unsure=False, alt_label=None)
        out.append(inst)
    return out
