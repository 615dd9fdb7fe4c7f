"""A dataset where the published filter settings are the unique optimum.

Four images, one per parameter axis. On each, the default config keeps
exactly the ground-truth count, and moving that axis to either neighbouring
grid value breaks the count by one. The other three axes cannot touch the
image: scores stay above every candidate cut (except on the score image),
no cross-class overlaps exist (except on the duplicate image), everything
sits deep inside the dish (except on the rim image), and instance areas are
all equal so the area fit degenerates and is skipped (except on the area
image). The grid optimum is therefore strict: any deviation leaves at least
one image with a wrong count and a positive objective.
"""

import math

from petricount.geometry import BBox, EllipseModel
from petricount.model import (
    ClassLabel,
    Dataset,
    EllipseSource,
    ImageRecord,
    Instance,
    Origin,
    Split,
)

DISH = EllipseModel(100.0, 100.0, 90.0, 90.0, 0.0)

PLANTED_GRID = {
    "score_threshold": (0.60, 0.70, 0.80),
    "dup_iou_threshold": (0.60, 0.70, 0.80),
    "ellipse_shrink": (0.90, 0.98, 1.00),
    "laplace_ci": (0.95, 0.99, 0.999),
}


def _image(image_id, split):
    return ImageRecord(
        id=image_id,
        width=200,
        height=200,
        dish_ellipse=DISH,
        ellipse_source=EllipseSource.FITTED,
        split=split,
    )


def _central_slots(count):
    """Grid positions well inside even the tightest candidate shrink."""
    slots = []
    for y in range(55, 150, 15):
        for x in range(50, 155, 15):
            if math.hypot(x - 100, y - 100) <= 70:
                slots.append((float(x), float(y)))
    assert len(slots) >= count
    return slots[:count]


def _box(cx, cy, w, h):
    return BBox(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)


def _gt(image_id, k, box, label):
    return Instance(
        id=f"{image_id}-g{k}",
        image_id=image_id,
        label=label,
        score=1.0,
        bbox=box,
        origin=Origin.GROUND_TRUTH,
    )


def _pred(image_id, k, box, label, score):
    return Instance(
        id=f"{image_id}-p{k}",
        image_id=image_id,
        label=label,
        score=score,
        bbox=box,
        origin=Origin.MODEL,
    )


def _score_image(gts, preds):
    """Axis 1: one genuine detection at 0.75, one spurious at 0.65.

    Cut 0.70 keeps exactly the ten real colonies; 0.80 loses the 0.75
    detection; 0.60 admits the 0.65 spurious one.
    """
    slots = _central_slots(11)
    labels = [ClassLabel.BVG_PLUS] * 8 + [ClassLabel.BVG_MINUS] * 2
    for k in range(10):
        box = _box(*slots[k], 10, 10)
        gts.append(_gt("score", k, box, labels[k]))
        score = 0.75 if k == 9 else 0.90
        preds.append(_pred("score", k, box, labels[k], score))
    preds.append(_pred("score", 10, _box(*slots[10], 10, 10), ClassLabel.BVG_PLUS, 0.65))


def _dup_image(gts, preds):
    """Axis 2: a genuine cross-class pair at IoU 0.65, a fake twin at 0.75.

    Threshold 0.70 removes only the twin; 0.60 also removes the genuine
    pair's weaker member; 0.80 removes nothing.
    """

    w, h = 20.0, 10.0
    # shifts are picked binary-exact so every box area is exactly 200 and the
    # area stage sees zero deviation (and stays out of the way) on this image
    a = _box(55.0, 60.0, w, h)
    dx = 4.25  # IoU 15.75/24.25 = 0.649, between the 0.60 and 0.70 candidates
    b = BBox(a.x_min + dx, a.y_min, a.x_max + dx, a.y_max)
    gts.append(_gt("dup", 0, a, ClassLabel.BVG_PLUS))
    gts.append(_gt("dup", 1, b, ClassLabel.BVG_MINUS))
    preds.append(_pred("dup", 0, a, ClassLabel.BVG_PLUS, 0.90))
    preds.append(_pred("dup", 1, b, ClassLabel.BVG_MINUS, 0.88))

    host = _box(115.0, 60.0, w, h)
    gts.append(_gt("dup", 2, host, ClassLabel.BVG_PLUS))
    preds.append(_pred("dup", 2, host, ClassLabel.BVG_PLUS, 0.90))
    dx = 2.875  # IoU 17.125/22.875 = 0.749, between the 0.70 and 0.80 candidates
    twin = BBox(host.x_min + dx, host.y_min, host.x_max + dx, host.y_max)
    preds.append(_pred("dup", 3, twin, ClassLabel.BVG_MINUS, 0.84))

    singles = [(55.0, 85.0), (115.0, 85.0), (55.0, 110.0), (115.0, 110.0),
               (55.0, 135.0), (115.0, 135.0), (85.0, 158.0)]
    labels = [ClassLabel.BVG_PLUS] * 5 + [ClassLabel.BVG_MINUS] * 2
    for k, (pos, label) in enumerate(zip(singles, labels)):
        box = _box(*pos, w, h)
        gts.append(_gt("dup", 3 + k, box, label))
        preds.append(_pred("dup", 4 + k, box, label, 0.90))


def _rim_image(gts, preds):
    """Axis 3: one real colony and one artefact in the rim annulus.

    With shrink 0.98 the boundary lands at radius 88.2: the colony whose
    probes span 82-88 stays, the artefact whose probes span 89-95 goes.
    Shrink 0.90 (radius 81) drops the colony; 1.00 (radius 90) admits the
    artefact through its innermost corner at radius 89.05.
    """
    slots = _central_slots(9)
    for k in range(9):
        box = _box(*slots[k], 6, 6)
        label = ClassLabel.BVG_PLUS if k < 7 else ClassLabel.BVG_MINUS
        gts.append(_gt("rim", k, box, label))
        preds.append(_pred("rim", k, box, label, 0.90))
    rim_box = _box(185.0, 100.0, 6, 6)
    gts.append(_gt("rim", 9, rim_box, ClassLabel.BVG_PLUS))
    preds.append(_pred("rim", 9, rim_box, ClassLabel.BVG_PLUS, 0.90))
    preds.append(_pred("rim", 10, _box(192.0, 100.0, 6, 6), ClassLabel.BVG_MINUS, 0.90))


def _area_image(gts, preds):
    """Axis 4: an oversized colony and an undersized artefact near the band.

    The survivor areas fit a Laplace band; at 99% cover the oversized colony
    (3.8 scale units out) stays and the artefact (6.0 units out) goes. The
    95% band also cuts the colony; the 99.9% band also keeps the artefact.
    """
    base = [96.0, 96.0, 98.0, 98.0, 102.0, 102.0, 104.0, 104.0] + [100.0] * 8
    b = 24.0 / 8.2  # solves the self-consistent mean absolute deviation
    edge_area = 100.0 + 3.8 * b
    dust_area = 100.0 - 6.0 * b
    slots = _central_slots(len(base) + 2)
    labels = [ClassLabel.BVG_PLUS if k % 3 else ClassLabel.BVG_MINUS for k in range(len(base))]
    for k, area in enumerate(base):
        box = _box(*slots[k], area / 10.0, 10.0)
        gts.append(_gt("area", k, box, labels[k]))
        preds.append(_pred("area", k, box, labels[k], 0.90))
    edge_box = _box(*slots[len(base)], edge_area / 10.0, 10.0)
    gts.append(_gt("area", len(base), edge_box, ClassLabel.BVG_PLUS))
    preds.append(_pred("area", len(base), edge_box, ClassLabel.BVG_PLUS, 0.90))
    dust_box = _box(*slots[len(base) + 1], dust_area / 10.0, 10.0)
    preds.append(_pred("area", len(base) + 1, dust_box, ClassLabel.BVG_MINUS, 0.90))


def planted_search_fixture() -> Dataset:
    gts: list[Instance] = []
    preds: list[Instance] = []
    _score_image(gts, preds)
    _dup_image(gts, preds)
    _rim_image(gts, preds)
    _area_image(gts, preds)
    images = [
        _image("score", Split.TRAIN),
        _image("dup", Split.TRAIN),
        _image("rim", Split.VAL),
        _image("area", Split.VAL),
        # a held-out image with garbage predictions; the search must ignore it
        _image("held", Split.TEST),
    ]
    for k in range(5):
        preds.append(_pred("held", k, _box(60.0 + 12 * k, 100.0, 8, 8), ClassLabel.BVG_PLUS, 0.90))
    gts.append(_gt("held", 0, _box(130.0, 70.0, 8, 8), ClassLabel.BVG_MINUS))
    return Dataset(id="planted", name="planted", images=images, ground_truth=gts, predictions=preds)
