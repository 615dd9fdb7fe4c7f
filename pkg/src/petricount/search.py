"""Exhaustive grid search over the post-processing parameters.

The objective is the mean of the total-count and BVG+-count MAPEs over the
train+val images, minimized over the Cartesian product of the value lists.
Ties go to the higher mAP at IoU 0.5, then to the smaller parameter tuple.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import DomainError, SearchError
from .metrics import EvalConfig, mape_counts, mean_average_precision
from .model import ClassLabel, Dataset, Split
from .pipeline import PostProcConfig, reset_pipeline_marks, run_pipeline

DEFAULT_SPLITS = (Split.TRAIN, Split.VAL)


def _default_values():
    # brackets the published operating point on every axis
    return {
        "score_threshold": (0.60, 0.70, 0.80),
        "dup_iou_threshold": (0.60, 0.70, 0.80),
        "ellipse_shrink": (0.90, 0.98, 1.00),
        "laplace_ci": (0.95, 0.99, 0.999),
    }


@dataclass(frozen=True)
class SearchSpace:
    score_threshold: tuple[float, ...] = field(default_factory=lambda: _default_values()["score_threshold"])
    dup_iou_threshold: tuple[float, ...] = field(default_factory=lambda: _default_values()["dup_iou_threshold"])
    ellipse_shrink: tuple[float, ...] = field(default_factory=lambda: _default_values()["ellipse_shrink"])
    laplace_ci: tuple[float, ...] = field(default_factory=lambda: _default_values()["laplace_ci"])

    def __post_init__(self):
        for name in ("score_threshold", "dup_iou_threshold", "ellipse_shrink", "laplace_ci"):
            values = getattr(self, name)
            if not isinstance(values, tuple):
                object.__setattr__(self, name, tuple(values))
                values = getattr(self, name)
            if not values:
                raise SearchError(f"{name}: empty value list")
            for v in values:
                try:
                    PostProcConfig(**{name: v})
                except DomainError as exc:
                    raise SearchError(f"{name}: {exc}") from exc

    def configs(self) -> list[PostProcConfig]:
        """The Cartesian product in ascending tuple order."""
        product = itertools.product(
            sorted(self.score_threshold),
            sorted(self.dup_iou_threshold),
            sorted(self.ellipse_shrink),
            sorted(self.laplace_ci),
        )
        return [
            PostProcConfig(
                score_threshold=s, dup_iou_threshold=d, ellipse_shrink=e, laplace_ci=c
            )
            for s, d, e, c in product
        ]

    def size(self) -> int:
        return (
            len(self.score_threshold)
            * len(self.dup_iou_threshold)
            * len(self.ellipse_shrink)
            * len(self.laplace_ci)
        )

    @classmethod
    def from_dict(cls, d: dict) -> "SearchSpace":
        known = _default_values()
        unknown = sorted(set(d) - set(known))
        if unknown:
            raise SearchError(f"unknown search-space keys: {unknown}")
        merged = {k: tuple(d.get(k, v)) for k, v in known.items()}
        return cls(**merged)

    @classmethod
    def from_file(cls, path) -> "SearchSpace":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise SearchError(f"cannot read search space {path}: {exc}") from exc


def _config_key(cfg: PostProcConfig) -> tuple:
    return (cfg.score_threshold, cfg.dup_iou_threshold, cfg.ellipse_shrink, cfg.laplace_ci)


@dataclass(frozen=True)
class SearchRow:
    config: PostProcConfig
    mape_total: float | None
    mape_bvg_plus: float | None
    map_at_50: float | None
    objective: float


@dataclass(frozen=True)
class SearchResult:
    best_config: PostProcConfig
    objective: float
    table: tuple[SearchRow, ...]

    def row_for(self, cfg: PostProcConfig) -> SearchRow:
        for row in self.table:
            if row.config == cfg:
                return row
        raise SearchError(f"config not in table: {cfg}")


def evaluate_config(
    images, preds_by_image, gts, cfg: PostProcConfig, eval_cfg: EvalConfig
) -> SearchRow:
    """Post-process every image with ``cfg`` and score the surviving counts."""
    processed = []
    for im in images:
        fresh = reset_pipeline_marks(preds_by_image.get(im.id, []))
        processed.extend(run_pipeline(im, fresh, cfg).instances)
    mape_total = mape_counts(processed, gts)
    mape_plus = mape_counts(processed, gts, class_filter=ClassLabel.BVG_PLUS)
    at50 = replace(eval_cfg, iou_thresholds=(0.5,))
    map_at_50 = mean_average_precision(processed, gts, at50)["map_avg"]
    parts = [m for m in (mape_total, mape_plus) if m is not None]
    if not parts:
        raise SearchError("objective undefined: no usable ground-truth counts")
    return SearchRow(
        config=cfg,
        mape_total=mape_total,
        mape_bvg_plus=mape_plus,
        map_at_50=map_at_50,
        objective=float(np.mean(parts)),
    )


def grid_search(
    dataset: Dataset,
    space: SearchSpace,
    eval_cfg: EvalConfig | None = None,
    splits: tuple[Split, ...] = DEFAULT_SPLITS,
) -> SearchResult:
    """Evaluate every config in the space on the images of ``splits``."""
    eval_cfg = eval_cfg or EvalConfig()
    images = [im for im in dataset.images if im.split in splits]
    if not images:
        raise SearchError(f"no images in splits {[s.value for s in splits]}")
    for im in images:
        if im.dish_ellipse is None:
            raise SearchError(f"image {im.id} has no dish ellipse")
    image_ids = {im.id for im in images}
    gts = [g for g in dataset.ground_truth if g.image_id in image_ids]
    if not gts:
        raise SearchError("no ground truth in the searched splits")
    preds_by_image: dict = {}
    for p in dataset.predictions:
        if p.image_id in image_ids:
            preds_by_image.setdefault(p.image_id, []).append(p)

    rows = [
        evaluate_config(images, preds_by_image, gts, cfg, eval_cfg)
        for cfg in space.configs()
    ]
    best = min(
        rows,
        key=lambda r: (
            r.objective,
            -(r.map_at_50 if r.map_at_50 is not None else float("-inf")),
            _config_key(r.config),
        ),
    )
    return SearchResult(best_config=best.config, objective=best.objective, table=tuple(rows))
