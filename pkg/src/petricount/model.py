"""Shared domain types: labels, instances, images, datasets, and their validation."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .geometry import BBox, EllipseModel, RleMask


class ClassLabel(str, Enum):
    BVG_MINUS = "BVG-"
    BVG_PLUS = "BVG+"


def other_label(label: ClassLabel) -> ClassLabel:
    return ClassLabel.BVG_PLUS if label is ClassLabel.BVG_MINUS else ClassLabel.BVG_MINUS


class Origin(str, Enum):
    MODEL = "model"
    USER = "user"
    GROUND_TRUTH = "gt"


class ExclusionReason(str, Enum):
    BELOW_SCORE_THRESHOLD = "below_score_threshold"
    CROSS_CLASS_DUPLICATE = "cross_class_duplicate"
    OUTSIDE_DISH = "outside_dish"
    AREA_OUTLIER = "area_outlier"
    USER_DELETED = "user_deleted"


class Split(str, Enum):
    TRAIN = "train"
    VAL = "val"
    TEST = "test"
    UNSPLIT = "unsplit"


class EllipseSource(str, Enum):
    FITTED = "fitted"
    USER_OVERRIDE = "user"
    NONE = "none"


@dataclass
class Instance:
    """One detected or annotated colony."""

    id: int | str
    image_id: int | str
    label: ClassLabel
    score: float
    bbox: BBox
    mask: RleMask | None = None
    unsure: bool = False
    alt_label: ClassLabel | None = None
    origin: Origin = Origin.MODEL
    excluded: ExclusionReason | None = None

    @property
    def kept(self) -> bool:
        return self.excluded is None

    def area(self) -> float:
        """Mask pixel count, or bbox area when no mask is stored."""
        if self.mask is not None:
            return float(self.mask.area())
        return self.bbox.area()


@dataclass
class ImageRecord:
    id: int | str
    width: int
    height: int
    pixel_data_ref: str | None = None
    dish_ellipse: EllipseModel | None = None
    ellipse_source: EllipseSource = EllipseSource.NONE
    split: Split = Split.UNSPLIT


@dataclass
class Dataset:
    id: str
    name: str
    images: list[ImageRecord] = field(default_factory=list)
    ground_truth: list[Instance] = field(default_factory=list)
    predictions: list[Instance] = field(default_factory=list)

    def image_by_id(self) -> dict:
        return {im.id: im for im in self.images}

    def all_instances(self) -> list[Instance]:
        return list(self.ground_truth) + list(self.predictions)

    def instances_for_image(self, image_id) -> list[Instance]:
        return [i for i in self.predictions if i.image_id == image_id]

    def ground_truth_for_image(self, image_id) -> list[Instance]:
        return [i for i in self.ground_truth if i.image_id == image_id]


@dataclass(frozen=True)
class Violation:
    entity: str
    message: str

    def __str__(self):
        return f"{self.entity}: {self.message}"


_BBOX_TOL = 1e-6


def validate_dataset(d: Dataset) -> list[Violation]:
    """Check every type invariant; returns one Violation per breach, [] if clean.

    Pure and idempotent; violations are data, not exceptions.
    """
    out: list[Violation] = []
    seen_images = set()
    for im in d.images:
        ent = f"image {im.id}"
        if im.id in seen_images:
            out.append(Violation(ent, "duplicate image id"))
        seen_images.add(im.id)
        if im.width <= 0 or im.height <= 0:
            out.append(Violation(ent, f"non-positive dimensions {im.width}x{im.height}"))
        if im.ellipse_source is not EllipseSource.NONE and im.dish_ellipse is None:
            out.append(Violation(ent, "ellipse_source set but dish_ellipse missing"))

    images = d.image_by_id()
    seen_instances = set()
    for inst in d.all_instances():
        ent = f"instance {inst.id}"
        if inst.id in seen_instances:
            out.append(Violation(ent, "duplicate instance id"))
        seen_instances.add(inst.id)
        if not (0.0 <= inst.score <= 1.0):
            out.append(Violation(ent, f"score out of range: {inst.score}"))
        if inst.origin in (Origin.GROUND_TRUTH, Origin.USER) and inst.score != 1.0:
            out.append(Violation(ent, f"{inst.origin.value} instance must carry score 1.0"))
        if inst.unsure:
            if inst.alt_label is None:
                out.append(Violation(ent, "unsure instance missing alt_label"))
            elif inst.alt_label is inst.label:
                out.append(Violation(ent, "alt_label equals label"))
        im = images.get(inst.image_id)
        if im is None:
            out.append(Violation(ent, f"dangling image reference {inst.image_id}"))
            continue
        b = inst.bbox
        if (
            b.x_min < -_BBOX_TOL
            or b.y_min < -_BBOX_TOL
            or b.x_max > im.width + _BBOX_TOL
            or b.y_max > im.height + _BBOX_TOL
        ):
            out.append(Violation(ent, f"bbox {b} outside image bounds {im.width}x{im.height}"))
        if inst.mask is not None:
            if (inst.mask.width, inst.mask.height) != (im.width, im.height):
                out.append(Violation(ent, "mask dimensions differ from image"))
            elif inst.mask.area() == 0:
                out.append(Violation(ent, "mask has no foreground"))
            else:
                tight = inst.mask.tight_bbox()
                if max(
                    abs(tight.x_min - b.x_min),
                    abs(tight.y_min - b.y_min),
                    abs(tight.x_max - b.x_max),
                    abs(tight.y_max - b.y_max),
                ) > _BBOX_TOL:
                    out.append(Violation(ent, f"bbox {b} is not the mask's tight bbox {tight}"))
    return out


def reviewed_counts_by_image(d: Dataset) -> dict:
    """Colony counts per image and class: kept, non-ground-truth instances.

    This is the number a technician reads off after review, and the count
    quantification works from.
    """
    out = {im.id: {"BVG-": 0, "BVG+": 0} for im in d.images}
    for inst in d.predictions:
        if inst.origin is not Origin.GROUND_TRUTH and inst.kept:
            out[inst.image_id][inst.label.value] += 1
    return out


def images_with_unsure(d: Dataset) -> list:
    """Ids of images still carrying kept-but-unsure predictions."""
    return sorted({i.image_id for i in d.predictions if i.kept and i.unsure}, key=str)


def assign_splits(images: list[ImageRecord], seed: int, fractions=(0.65, 0.15, 0.20)) -> None:
    """Randomly partition images into train/val/test with the given fractions."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("split fractions must sum to 1")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(images))
    n_train = round(fractions[0] * len(images))
    n_val = round(fractions[1] * len(images))
    for rank, idx in enumerate(order):
        if rank < n_train:
            images[idx].split = Split.TRAIN
        elif rank < n_train + n_val:
            images[idx].split = Split.VAL
        else:
            images[idx].split = Split.TEST
