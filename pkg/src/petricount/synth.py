"""Synthetic Petri-dish cases with known ground truth and planted rule breaks.

Every acceptance check that needs a dataset with a knowable right answer runs
on these. Colonies are filled ellipses packed without overlap inside the dish;
predictions are derived from the ground truth by configurable perturbations.
Four of the perturbations plant instances that exactly one post-processing
rule must catch, and the generator proves that to itself before returning:
scores sit on the safe side of the threshold with margin, duplicate twins
overlap only their host, border plants miss the shrunken dish at every probe
point, and dust falls outside an independently computed area band. A case
that cannot be certified is regenerated from the next attempt seed, so output
is still a pure function of the config.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import SynthesisError
from .geometry import BBox, EllipseModel, RleMask, inscribed_ellipse, iou_bbox, shrink_ellipse
from .model import (
    ClassLabel,
    Dataset,
    EllipseSource,
    ExclusionReason,
    ImageRecord,
    Instance,
    Origin,
    other_label,
    validate_dataset,
)

# class balance observed on the reference test set: 401 of 485 colonies
DEFAULT_CLASS_RATIO = 401 / 485

RING_STROKE = 2.0
RING_DEPTH = 215.0


@dataclass(frozen=True)
class Perturbation:
    """How predictions deviate from ground truth.

    The last four rates plant instances violating exactly one filter rule
    each; counts are max(1, round(rate * n_colonies)) when the rate is
    positive. drop/false-positive/flip shape evaluation metrics instead and
    plant nothing.
    """

    drop_rate: float = 0.0
    false_positive_rate: float = 0.0
    jitter_px: float = 0.0
    score_noise: float = 0.0
    class_flip_rate: float = 0.0
    low_score_rate: float = 0.0
    duplicate_rate: float = 0.0
    border_rate: float = 0.0
    dust_rate: float = 0.0

    def __post_init__(self):
        for name in (
            "drop_rate",
            "false_positive_rate",
            "score_noise",
            "class_flip_rate",
            "low_score_rate",
            "duplicate_rate",
            "border_rate",
            "dust_rate",
        ):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise SynthesisError(f"{name} must be in [0, 1], got {v}")
        if self.jitter_px < 0:
            raise SynthesisError(f"jitter_px must be >= 0, got {self.jitter_px}")


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    width: int = 512
    height: int = 512
    dish: EllipseModel | None = None  # None: inscribed in the frame
    n_colonies: int = 30
    class_ratio: float = DEFAULT_CLASS_RATIO
    # narrow by default: the area band must stay tight enough that planted
    # dust falls outside it even though the dust itself joins the fit
    radius_range: tuple[float, float] = (9.0, 10.5)
    perturbation: Perturbation = field(default_factory=Perturbation)

    def __post_init__(self):
        if self.width < 64 or self.height < 64:
            raise SynthesisError(f"frame too small: {self.width}x{self.height}")
        if self.n_colonies < 0:
            raise SynthesisError(f"negative n_colonies: {self.n_colonies}")
        if not (0.0 <= self.class_ratio <= 1.0):
            raise SynthesisError(f"class_ratio must be in [0, 1], got {self.class_ratio}")
        lo, hi = self.radius_range
        if not (0 < lo <= hi):
            raise SynthesisError(f"bad radius_range {self.radius_range}")

    def resolved_dish(self) -> EllipseModel:
        if self.dish is not None:
            return self.dish
        return inscribed_ellipse(self.width, self.height, margin=0.95)


@dataclass
class SynthCase:
    config: SynthConfig
    image: np.ndarray  # uint8 grayscale, height x width
    image_record: ImageRecord
    ground_truth: list[Instance]
    predictions: list[Instance]
    planted_violations: dict[str, ExclusionReason]

    def to_dataset(self, dataset_id: str = "synth") -> Dataset:
        return Dataset(
            id=dataset_id,
            name=dataset_id,
            images=[replace(self.image_record)],
            ground_truth=[replace(i) for i in self.ground_truth],
            predictions=[replace(i) for i in self.predictions],
        )


# thresholds the plants are calibrated against (the published operating point)
SCORE_CUT = 0.70
DUP_IOU = 0.70
SHRINK = 0.98
AREA_CI = 0.99
MARGIN = 0.005


class _Placer:
    """Non-overlapping box placement inside an elliptical region."""

    def __init__(self, rng, region: EllipseModel, width: int, height: int, gap: float = 2.0):
        self.rng = rng
        self.region = region
        self.width = width
        self.height = height
        self.gap = gap
        self.boxes: list[BBox] = []

    def _fits(self, box: BBox, inside: bool) -> bool:
        if box.x_min < 0 or box.y_min < 0 or box.x_max > self.width or box.y_max > self.height:
            return False
        if inside:
            g = self.gap
            for x, y in BBox(box.x_min - g, box.y_min - g, box.x_max + g, box.y_max + g).corners():
                if self.region.value(x, y) > 1.0:
                    return False
        grown = BBox(
            box.x_min - self.gap, box.y_min - self.gap, box.x_max + self.gap, box.y_max + self.gap
        )
        return all(iou_bbox(grown, other) == 0.0 for other in self.boxes)

    def place(self, w: float, h: float, inside: bool = True, tries: int = 400) -> BBox:
        for _ in range(tries):
            if inside:
                # rejection-sample a centre in the region's bounding box
                cx = self.region.cx + self.rng.uniform(-self.region.a, self.region.a)
                cy = self.region.cy + self.rng.uniform(-self.region.a, self.region.a)
                if self.region.value(cx, cy) > 1.0:
                    continue
            else:
                cx = self.rng.uniform(0, self.width)
                cy = self.rng.uniform(0, self.height)
            box = BBox(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)
            if self._fits(box, inside):
                self.boxes.append(box)
                return box
        raise SynthesisError(
            f"could not place a {w:.0f}x{h:.0f} box after {tries} tries "
            f"({len(self.boxes)} already placed)"
        )


def _colony_mask(width, height, cx, cy, ra, rb, phi) -> RleMask:
    """Pixels whose centres fall inside the colony ellipse."""
    x0 = max(0, int(math.floor(cx - ra - 2)))
    x1 = min(width, int(math.ceil(cx + ra + 2)))
    y0 = max(0, int(math.floor(cy - ra - 2)))
    y1 = min(height, int(math.ceil(cy + ra + 2)))
    dense = np.zeros((height, width), dtype=np.uint8)
    xs = np.arange(x0, x1) + 0.5
    ys = np.arange(y0, y1) + 0.5
    gx, gy = np.meshgrid(xs - cx, ys - cy)
    c, s = math.cos(phi), math.sin(phi)
    u = gx * c + gy * s
    v = -gx * s + gy * c
    dense[y0:y1, x0:x1] = ((u / ra) ** 2 + (v / rb) ** 2 <= 1.0).astype(np.uint8)
    return RleMask.from_dense(dense)


def _render(cfg: SynthConfig, dish: EllipseModel, colonies) -> np.ndarray:
    """White frame, dark dish ring, soft-edged dark colonies."""
    h, w = cfg.height, cfg.width
    ys, xs = np.mgrid[0:h, 0:w]
    px = xs + 0.5
    py = ys + 0.5
    dx = px - dish.cx
    dy = py - dish.cy
    rho = np.hypot(dx, dy)
    c, s = math.cos(dish.theta), math.sin(dish.theta)
    u = dx * c + dy * s
    v = -dx * s + dy * c
    val = (u / dish.a) ** 2 + (v / dish.b) ** 2
    dist = rho * (1.0 - 1.0 / np.sqrt(np.maximum(val, 1e-12)))
    img = 255.0 - RING_DEPTH * np.exp(-((dist / RING_STROKE) ** 2))
    for cx, cy, ra, rb, phi, label in colonies:
        x0 = max(0, int(cx - ra - 3))
        x1 = min(w, int(cx + ra + 4))
        y0 = max(0, int(cy - ra - 3))
        y1 = min(h, int(cy + ra + 4))
        gx = (np.arange(x0, x1) + 0.5) - cx
        gy = (np.arange(y0, y1) + 0.5) - cy
        mx, my = np.meshgrid(gx, gy)
        c, s = math.cos(phi), math.sin(phi)
        u = mx * c + my * s
        v = -mx * s + my * c
        radius = np.sqrt((u / ra) ** 2 + (v / rb) ** 2)
        depth = 140.0 if label is ClassLabel.BVG_PLUS else 95.0
        fade = np.clip((1.18 - radius) / 0.18, 0.0, 1.0)
        patch = img[y0:y1, x0:x1]
        np.minimum(patch, 255.0 - depth * fade, out=patch)
    return np.clip(np.round(img), 0, 255).astype(np.uint8)


def _ellipse_value(dish: EllipseModel, x: float, y: float) -> float:
    return dish.value(x, y)


def _plant_count(rate: float, n: int) -> int:
    return max(1, round(rate * n)) if rate > 0 else 0


def _rand_label(rng) -> ClassLabel:
    return ClassLabel.BVG_PLUS if rng.random() < 0.5 else ClassLabel.BVG_MINUS


def _laplace_band(areas) -> tuple[float, float, float]:
    """Independent area band: median centre, mean-abs-dev scale, 99% cover."""
    arr = np.asarray(areas, dtype=float)
    mu = float(np.median(arr))
    b = float(np.mean(np.abs(arr - mu)))
    half = b * math.log(100.0)  # ln(2 * 0.995 / 0.01) collapses to ln 100
    return mu - half, mu + half, b


def generate_case(cfg: SynthConfig, max_attempts: int = 20) -> SynthCase:
    """Build one certified case; deterministic for a given config."""
    last = None
    for attempt in range(max_attempts):
        rng = np.random.default_rng((cfg.seed, attempt))
        try:
            return _build(cfg, rng)
        except SynthesisError as exc:
            last = exc
    raise SynthesisError(f"gave up after {max_attempts} attempts: {last}")


def _build(cfg: SynthConfig, rng) -> SynthCase:
    dish = cfg.resolved_dish()
    region = shrink_ellipse(dish, 0.95)
    pert = cfg.perturbation
    placer = _Placer(rng, region, cfg.width, cfg.height)

    n = cfg.n_colonies
    n_plus = round(cfg.class_ratio * n)
    labels = [ClassLabel.BVG_PLUS] * n_plus + [ClassLabel.BVG_MINUS] * (n - n_plus)
    rng.shuffle(labels)

    colonies = []  # (cx, cy, ra, rb, phi, label)
    ground_truth = []
    for k in range(n):
        ra = rng.uniform(*cfg.radius_range)
        rb = ra * rng.uniform(0.95, 1.0)
        phi = rng.uniform(0, math.pi)
        box = placer.place(2 * ra + 2, 2 * ra + 2)
        cx, cy = box.center()
        mask = _colony_mask(cfg.width, cfg.height, cx, cy, ra, rb, phi)
        colonies.append((cx, cy, ra, rb, phi, labels[k]))
        ground_truth.append(
            Instance(
                id=f"gt-{k}",
                image_id="synth-1",
                label=labels[k],
                score=1.0,
                bbox=mask.tight_bbox(),
                mask=mask,
                origin=Origin.GROUND_TRUTH,
            )
        )

    predictions = []
    clean_ids = []
    next_id = 0

    def pred_score() -> float:
        base = 0.95
        if pert.score_noise > 0:
            base -= abs(rng.normal(0.0, pert.score_noise))
        return float(min(0.999, max(SCORE_CUT + MARGIN, base)))

    for gt in ground_truth:
        if pert.drop_rate > 0 and rng.random() < pert.drop_rate:
            continue
        label = gt.label
        if pert.class_flip_rate > 0 and rng.random() < pert.class_flip_rate:
            label = other_label(label)
        box = gt.bbox
        if pert.jitter_px > 0:
            dx = rng.uniform(-pert.jitter_px, pert.jitter_px)
            dy = rng.uniform(-pert.jitter_px, pert.jitter_px)
            box = BBox(box.x_min + dx, box.y_min + dy, box.x_max + dx, box.y_max + dy)
        pid = f"p-{next_id}"
        next_id += 1
        predictions.append(
            Instance(
                id=pid,
                image_id="synth-1",
                label=label,
                score=pred_score(),
                bbox=box,
                origin=Origin.MODEL,
            )
        )
        clean_ids.append(pid)

    mean_r = sum(cfg.radius_range) / 2
    for _ in range(round(pert.false_positive_rate * n)):
        side = 2 * rng.uniform(*cfg.radius_range)
        box = placer.place(side, side)
        pid = f"p-{next_id}"
        next_id += 1
        predictions.append(
            Instance(
                id=pid,
                image_id="synth-1",
                label=_rand_label(rng),
                score=pred_score(),
                bbox=box,
                origin=Origin.MODEL,
            )
        )
        clean_ids.append(pid)

    planted: dict[str, ExclusionReason] = {}

    for _ in range(_plant_count(pert.low_score_rate, n)):
        side = 2 * mean_r
        box = placer.place(side, side)
        pid = f"low-{next_id}"
        next_id += 1
        predictions.append(
            Instance(
                id=pid,
                image_id="synth-1",
                label=_rand_label(rng),
                score=float(rng.uniform(0.2, SCORE_CUT - 0.05)),
                bbox=box,
                origin=Origin.MODEL,
            )
        )
        planted[pid] = ExclusionReason.BELOW_SCORE_THRESHOLD

    n_twins = _plant_count(pert.duplicate_rate, n)
    if n_twins > len(clean_ids):
        raise SynthesisError("not enough surviving predictions to host duplicate twins")
    by_id = {p.id: p for p in predictions}
    host_ids = [str(h) for h in rng.choice(clean_ids, size=n_twins, replace=False)] if n_twins else []
    twin_host: dict[str, str] = {}
    for host_id in host_ids:
        host = by_id[host_id]
        w = host.bbox.width
        target = rng.uniform(DUP_IOU + 0.02, 0.95)
        dx = w * (1.0 - target) / (1.0 + target)
        # shift toward the dish centre so the twin cannot leave the frame
        direction = 1.0 if host.bbox.center()[0] < dish.cx else -1.0
        box = BBox(
            host.bbox.x_min + direction * dx,
            host.bbox.y_min,
            host.bbox.x_max + direction * dx,
            host.bbox.y_max,
        )
        pid = f"dup-{next_id}"
        next_id += 1
        predictions.append(
            Instance(
                id=pid,
                image_id="synth-1",
                label=other_label(host.label),
                score=max(SCORE_CUT + MARGIN, host.score - float(rng.uniform(0.02, 0.05))),
                bbox=box,
                origin=Origin.MODEL,
            )
        )
        planted[pid] = ExclusionReason.CROSS_CLASS_DUPLICATE
        twin_host[pid] = host_id

    shrunk = shrink_ellipse(dish, SHRINK)
    for _ in range(_plant_count(pert.border_rate, n)):
        box = _place_border(rng, dish, shrunk, cfg.width, cfg.height, placer)
        pid = f"border-{next_id}"
        next_id += 1
        predictions.append(
            Instance(
                id=pid,
                image_id="synth-1",
                label=_rand_label(rng),
                score=pred_score(),
                bbox=box,
                origin=Origin.MODEL,
            )
        )
        planted[pid] = ExclusionReason.OUTSIDE_DISH

    for _ in range(_plant_count(pert.dust_rate, n)):
        box = placer.place(2.0, 2.0)
        pid = f"dust-{next_id}"
        next_id += 1
        predictions.append(
            Instance(
                id=pid,
                image_id="synth-1",
                label=_rand_label(rng),
                score=pred_score(),
                bbox=box,
                origin=Origin.MODEL,
            )
        )
        planted[pid] = ExclusionReason.AREA_OUTLIER

    _certify(cfg, dish, shrunk, predictions, planted, clean_ids, twin_host)

    image = _render(cfg, dish, colonies)
    record = ImageRecord(
        id="synth-1",
        width=cfg.width,
        height=cfg.height,
        dish_ellipse=dish,
        ellipse_source=EllipseSource.FITTED,
    )
    case = SynthCase(
        config=cfg,
        image=image,
        image_record=record,
        ground_truth=ground_truth,
        predictions=predictions,
        planted_violations=planted,
    )
    issues = validate_dataset(case.to_dataset())
    if issues:
        raise SynthesisError(f"generated dataset failed validation: {issues[:3]}")
    return case


def _place_border(rng, dish, shrunk, width, height, placer: _Placer, tries: int = 400) -> BBox:
    """A small box between the shrunken ellipse and the frame edge."""
    side = 6.0
    for _ in range(tries):
        angle = rng.uniform(0, 2 * math.pi)
        scale = rng.uniform(1.01, 1.08)
        c, s = math.cos(dish.theta), math.sin(dish.theta)
        ex = scale * dish.a * math.cos(angle)
        ey = scale * dish.b * math.sin(angle)
        cx = dish.cx + ex * c - ey * s
        cy = dish.cy + ex * s + ey * c
        box = BBox(cx - side / 2, cy - side / 2, cx + side / 2, cy + side / 2)
        if box.x_min < 0 or box.y_min < 0 or box.x_max > width or box.y_max > height:
            continue
        probes = list(box.corners()) + [box.center()]
        if all(shrunk.value(x, y) > 1.0 + 1e-6 for x, y in probes):
            grown = BBox(box.x_min - 2, box.y_min - 2, box.x_max + 2, box.y_max + 2)
            if all(iou_bbox(grown, other) == 0.0 for other in placer.boxes):
                placer.boxes.append(box)
                return box
    raise SynthesisError("no room for a border plant between dish and frame")


def _certify(cfg, dish, shrunk, predictions, planted, clean_ids, twin_host):
    """Prove each plant is caught by its rule alone, with margins.

    Raises SynthesisError (triggering a regeneration) when any check fails.
    """
    by_id = {p.id: p for p in predictions}
    reasons = dict(planted)

    for p in predictions:
        if reasons.get(p.id) is ExclusionReason.BELOW_SCORE_THRESHOLD:
            if not p.score <= SCORE_CUT - 0.04:
                raise SynthesisError(f"{p.id}: planted score {p.score} too close to the cut")
        elif not p.score >= SCORE_CUT + MARGIN:
            raise SynthesisError(f"{p.id}: clean score {p.score} below the cut")

    # each twin overlaps exactly its host, decisively and from below
    for twin_id, host_id in twin_host.items():
        twin, host = by_id[twin_id], by_id[host_id]
        iou = iou_bbox(twin.bbox, host.bbox)
        if not (DUP_IOU + 0.01 <= iou <= 0.96):
            raise SynthesisError(f"twin {twin_id} IoU {iou:.3f} with its host out of range")
        if twin.label is host.label:
            raise SynthesisError(f"twin {twin_id} shares the host class")
        if not host.score > twin.score:
            raise SynthesisError(f"twin {twin_id} outranks its host")
    # and no other cross-class pair comes near the duplicate threshold
    planted_pairs = {frozenset(kv) for kv in twin_host.items()}
    ids = [p.id for p in predictions if reasons.get(p.id) is not ExclusionReason.BELOW_SCORE_THRESHOLD]
    for i, a_id in enumerate(ids):
        for b_id in ids[i + 1 :]:
            a, b = by_id[a_id], by_id[b_id]
            if a.label is b.label or frozenset((a_id, b_id)) in planted_pairs:
                continue
            iou = iou_bbox(a.bbox, b.bbox)
            if iou >= DUP_IOU - 0.05:
                raise SynthesisError(f"unplanned cross-class overlap {a_id}/{b_id} at {iou:.3f}")

    for pid, reason in reasons.items():
        if reason is ExclusionReason.OUTSIDE_DISH:
            probes = list(by_id[pid].bbox.corners()) + [by_id[pid].bbox.center()]
            if not all(shrunk.value(x, y) > 1.0 + 1e-6 for x, y in probes):
                raise SynthesisError(f"border plant {pid} still touches the dish")
    for pid in clean_ids:
        cx, cy = by_id[pid].bbox.center()
        if not shrunk.value(cx, cy) <= 1.0:
            raise SynthesisError(f"clean prediction {pid} drifted outside the dish")

    # everyone reaching the area stage: clean, hosts, and the dust itself
    survivors_13 = [
        p
        for p in predictions
        if reasons.get(p.id) in (None, ExclusionReason.AREA_OUTLIER)
    ]
    areas = [p.area() for p in survivors_13]
    if len(areas) >= 5:
        lo, hi, b = _laplace_band(areas)
        guard = max(0.05 * b, 1e-9)
        for p in survivors_13:
            if reasons.get(p.id) is ExclusionReason.AREA_OUTLIER:
                if not p.area() < lo - guard:
                    raise SynthesisError(f"dust {p.id} area {p.area():.1f} inside the band")
            elif not (lo + guard < p.area() < hi - guard):
                raise SynthesisError(f"{p.id} area {p.area():.1f} too close to the band edge")
    elif any(r is ExclusionReason.AREA_OUTLIER for r in reasons.values()):
        raise SynthesisError("dust planted but fewer than 5 instances reach the area stage")


def write_case(case: SynthCase, out_dir, dataset_id: str = "synth") -> None:
    """Write image.png, dataset.json (interchange), and violations.json."""
    from pathlib import Path

    from PIL import Image as PILImage

    from .store import canonical_json, save_interchange

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray(case.image).save(out / "image.png")
    ds = case.to_dataset(dataset_id)
    ds.images[0].pixel_data_ref = "image.png"
    save_interchange(ds, out / "dataset.json")
    (out / "violations.json").write_text(
        canonical_json({k: v.value for k, v in sorted(case.planted_violations.items())}) + "\n"
    )
