"""Interchange files and the append-only, replayable edit store.

A dataset on disk is a directory: ``base.json`` (the ingested interchange
document, canonicalized), ``events.ndjson`` (one edit event per line, strictly
increasing ``seq``), and ``cache.json`` (latest materialized snapshot, purely
an optimization; always verifiable against a full replay).

The interchange document layout::

    {
      "images": [{"id", "width", "height", "file_name"?, "dish_ellipse"?,
                  "ellipse_source"?, "split"?}],
      "annotations": [{"id", "image_id", "category_id", "bbox": [x,y,w,h],
                       "segmentation"?: [[x0,y0,...], ...] |
                                        {"size": [h,w], "counts": [...]},
                       "score"?, "origin"?, "unsure"?, "alt_category_id"?,
                       "excluded"?}],
      "categories": [{"id": 1, "name": "BVG-"}, {"id": 2, "name": "BVG+"}]
    }

RLE counts are column-major and background-first, exactly as in RleMask.
Instances without a "score" default to ground-truth origin with score 1.0.
"""

from __future__ import annotations

import contextlib
import copy
import dataclasses
import json
import os
import tempfile
import threading
from dataclasses import dataclass, field
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path

from .dilution import DilutionFactor, Experiment, TriplicateGroup
from .errors import EditRejected, MaskShapeError, SchemaError, StoreError
from .geometry import BBox, EllipseModel, RleMask, rasterize_polygons
from .model import (
    ClassLabel,
    Dataset,
    EllipseSource,
    ExclusionReason,
    ImageRecord,
    Instance,
    Origin,
    Split,
    validate_dataset,
)
from .pipeline import (
    PIPELINE_REASONS,
    PostProcConfig,
    filter_area_outliers,
    filter_by_dish,
    reset_pipeline_marks,
    run_pipeline,
)

CATEGORIES = ({"id": 1, "name": "BVG-"}, {"id": 2, "name": "BVG+"})
_LABEL_BY_CATEGORY = {1: ClassLabel.BVG_MINUS, 2: ClassLabel.BVG_PLUS}
_CATEGORY_BY_LABEL = {v: k for k, v in _LABEL_BY_CATEGORY.items()}


def canonical_json(doc) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


# ---------------------------------------------------------------------------
# schema helpers


def _expect(cond: bool, path: str, message: str):
    if not cond:
        raise SchemaError(path, message)


def _get(obj: dict, key: str, path: str, types, required=True, default=None):
    if key not in obj:
        _expect(not required, f"{path}.{key}", "missing required field")
        return default
    val = obj[key]
    if types is not None:
        ok = isinstance(val, types) and not (isinstance(val, bool) and bool not in _as_tuple(types))
        _expect(ok, f"{path}.{key}", f"expected {_type_names(types)}, got {type(val).__name__}")
    return val


def _as_tuple(types):
    return types if isinstance(types, tuple) else (types,)


def _type_names(types):
    return "/".join(t.__name__ for t in _as_tuple(types))


_NUM = (int, float)
_ID = (int, str)


def _parse_ellipse(obj, path) -> EllipseModel:
    _expect(isinstance(obj, dict), path, "expected object")
    vals = {}
    for key in ("cx", "cy", "a", "b", "theta"):
        vals[key] = float(_get(obj, key, path, _NUM))
    try:
        return EllipseModel(**vals)
    except Exception as exc:
        raise SchemaError(path, str(exc)) from exc


def _parse_rle(obj: dict, path: str, image: ImageRecord) -> RleMask:
    size = _get(obj, "size", path, list)
    _expect(len(size) == 2, f"{path}.size", "expected [height, width]")
    h, w = size
    _expect(isinstance(h, int) and isinstance(w, int), f"{path}.size", "expected integers")
    _expect(
        (w, h) == (image.width, image.height),
        f"{path}.size",
        f"mask size {h}x{w} does not match image {image.height}x{image.width}",
    )
    counts = _get(obj, "counts", path, list)
    for k, c in enumerate(counts):
        _expect(isinstance(c, int) and c >= 0, f"{path}.counts[{k}]", "expected non-negative integer")
    try:
        return RleMask(width=w, height=h, counts=tuple(counts))
    except MaskShapeError as exc:
        raise SchemaError(f"{path}.counts", str(exc)) from exc


def _parse_segmentation(seg, path: str, image: ImageRecord) -> RleMask:
    if isinstance(seg, dict):
        return _parse_rle(seg, path, image)
    _expect(isinstance(seg, list) and seg, path, "expected polygon list or RLE object")
    for i, poly in enumerate(seg):
        _expect(isinstance(poly, list), f"{path}[{i}]", "expected flat coordinate list")
        _expect(
            len(poly) >= 6 and len(poly) % 2 == 0,
            f"{path}[{i}]",
            "polygon needs an even number of >= 6 coordinates",
        )
        for k, v in enumerate(poly):
            _expect(isinstance(v, _NUM) and not isinstance(v, bool), f"{path}[{i}][{k}]", "expected number")
    try:
        return rasterize_polygons(seg, image.width, image.height)
    except MaskShapeError as exc:
        raise SchemaError(path, str(exc)) from exc


def parse_interchange(doc, dataset_id: str = "dataset", name: str | None = None) -> Dataset:
    """Build a Dataset from a parsed interchange document."""
    _expect(isinstance(doc, dict), "$", "expected top-level object")
    images_raw = _get(doc, "images", "$", list)
    anns_raw = _get(doc, "annotations", "$", list, required=False, default=[])
    cats = _get(doc, "categories", "$", list, required=False)
    if cats is not None:
        got = [(c.get("id"), c.get("name")) for c in cats if isinstance(c, dict)]
        want = [(c["id"], c["name"]) for c in CATEGORIES]
        _expect(sorted(got) == sorted(want), "$.categories", f"categories must be {want}")

    images = []
    for i, obj in enumerate(images_raw):
        path = f"$.images[{i}]"
        _expect(isinstance(obj, dict), path, "expected object")
        image_id = _get(obj, "id", path, _ID)
        width = _get(obj, "width", path, int)
        height = _get(obj, "height", path, int)
        _expect(width > 0 and height > 0, path, f"non-positive dimensions {width}x{height}")
        ellipse = None
        if obj.get("dish_ellipse") is not None:
            ellipse = _parse_ellipse(obj["dish_ellipse"], f"{path}.dish_ellipse")
        source_raw = _get(obj, "ellipse_source", path, str, required=False)
        if source_raw is None:
            source = EllipseSource.FITTED if ellipse is not None else EllipseSource.NONE
        else:
            _expect(source_raw in [s.value for s in EllipseSource], f"{path}.ellipse_source", f"unknown value {source_raw!r}")
            source = EllipseSource(source_raw)
        _expect(
            not (source is not EllipseSource.NONE and ellipse is None),
            f"{path}.ellipse_source",
            "set but dish_ellipse missing",
        )
        split_raw = _get(obj, "split", path, str, required=False, default="unsplit")
        _expect(split_raw in [s.value for s in Split], f"{path}.split", f"unknown value {split_raw!r}")
        images.append(
            ImageRecord(
                id=image_id,
                width=width,
                height=height,
                pixel_data_ref=_get(obj, "file_name", path, str, required=False),
                dish_ellipse=ellipse,
                ellipse_source=source,
                split=Split(split_raw),
            )
        )
    by_id = {}
    for i, im in enumerate(images):
        _expect(im.id not in by_id, f"$.images[{i}].id", f"duplicate image id {im.id!r}")
        by_id[im.id] = im

    ground_truth, predictions = [], []
    seen = set()
    for i, obj in enumerate(anns_raw):
        path = f"$.annotations[{i}]"
        _expect(isinstance(obj, dict), path, "expected object")
        ann_id = _get(obj, "id", path, _ID)
        _expect(ann_id not in seen, f"{path}.id", f"duplicate annotation id {ann_id!r}")
        seen.add(ann_id)
        image_id = _get(obj, "image_id", path, _ID)
        _expect(image_id in by_id, f"{path}.image_id", f"unknown image {image_id!r}")
        image = by_id[image_id]
        category = _get(obj, "category_id", path, int)
        _expect(category in _LABEL_BY_CATEGORY, f"{path}.category_id", f"unknown category {category}")
        bbox_raw = _get(obj, "bbox", path, list)
        _expect(len(bbox_raw) == 4, f"{path}.bbox", "expected [x, y, w, h]")
        for k, v in enumerate(bbox_raw):
            _expect(isinstance(v, _NUM) and not isinstance(v, bool), f"{path}.bbox[{k}]", "expected number")
        _expect(bbox_raw[2] > 0 and bbox_raw[3] > 0, f"{path}.bbox", "width and height must be positive")
        score = _get(obj, "score", path, _NUM, required=False)
        if score is not None:
            _expect(0.0 <= score <= 1.0, f"{path}.score", f"score {score} outside [0, 1]")
        origin_raw = _get(obj, "origin", path, str, required=False)
        if origin_raw is None:
            origin = Origin.MODEL if score is not None else Origin.GROUND_TRUTH
        else:
            _expect(origin_raw in [o.value for o in Origin], f"{path}.origin", f"unknown value {origin_raw!r}")
            origin = Origin(origin_raw)
        unsure = _get(obj, "unsure", path, bool, required=False, default=False)
        alt_raw = obj.get("alt_category_id")
        alt = None
        if alt_raw is not None:
            _expect(alt_raw in _LABEL_BY_CATEGORY, f"{path}.alt_category_id", f"unknown category {alt_raw}")
            alt = _LABEL_BY_CATEGORY[alt_raw]
        excl_raw = obj.get("excluded")
        excluded = None
        if excl_raw is not None:
            _expect(
                excl_raw in [r.value for r in ExclusionReason],
                f"{path}.excluded",
                f"unknown value {excl_raw!r}",
            )
            excluded = ExclusionReason(excl_raw)
        mask = None
        if obj.get("segmentation") is not None:
            mask = _parse_segmentation(obj["segmentation"], f"{path}.segmentation", image)
        inst = Instance(
            id=ann_id,
            image_id=image_id,
            label=_LABEL_BY_CATEGORY[category],
            score=float(score) if score is not None else 1.0,
            bbox=BBox.from_xywh(bbox_raw),
            mask=mask,
            unsure=unsure,
            alt_label=alt,
            origin=origin,
            excluded=excluded,
        )
        (ground_truth if origin is Origin.GROUND_TRUTH else predictions).append(inst)
    return Dataset(
        id=dataset_id,
        name=name or dataset_id,
        images=images,
        ground_truth=ground_truth,
        predictions=predictions,
    )


def load_interchange(path, dataset_id: str | None = None) -> Dataset:
    """Read and validate an interchange JSON file."""
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise StoreError(f"cannot read {p}: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError("$", f"invalid JSON: {exc}") from exc
    ds = parse_interchange(doc, dataset_id=dataset_id or p.stem, name=p.stem)
    # resolve image files relative to the document location
    for im in ds.images:
        if im.pixel_data_ref and not os.path.isabs(im.pixel_data_ref):
            im.pixel_data_ref = str((p.parent / im.pixel_data_ref).resolve())
    return ds


def _instance_to_obj(inst: Instance) -> dict:
    obj = {
        "id": inst.id,
        "image_id": inst.image_id,
        "category_id": _CATEGORY_BY_LABEL[inst.label],
        "bbox": inst.bbox.to_xywh(),
        "score": inst.score,
        "origin": inst.origin.value,
        "unsure": inst.unsure,
        "alt_category_id": _CATEGORY_BY_LABEL[inst.alt_label] if inst.alt_label else None,
        "excluded": inst.excluded.value if inst.excluded else None,
    }
    if inst.mask is not None:
        obj["segmentation"] = {
            "size": [inst.mask.height, inst.mask.width],
            "counts": list(inst.mask.counts),
        }
    return obj


def dataset_to_interchange(ds: Dataset) -> dict:
    images = []
    for im in ds.images:
        obj = {
            "id": im.id,
            "width": im.width,
            "height": im.height,
            "ellipse_source": im.ellipse_source.value,
            "split": im.split.value,
        }
        if im.pixel_data_ref:
            obj["file_name"] = im.pixel_data_ref
        if im.dish_ellipse is not None:
            obj["dish_ellipse"] = im.dish_ellipse.to_dict()
        images.append(obj)
    return {
        "images": images,
        "annotations": [_instance_to_obj(i) for i in ds.ground_truth + ds.predictions],
        "categories": [dict(c) for c in CATEGORIES],
    }


def save_interchange(ds: Dataset, path) -> None:
    Path(path).write_text(canonical_json(dataset_to_interchange(ds)) + "\n")


# ---------------------------------------------------------------------------
# edit events


class EditAction(str, Enum):
    CREATE_INSTANCE = "CreateInstance"
    DELETE_INSTANCE = "DeleteInstance"
    CHANGE_CLASS = "ChangeClass"
    VALIDATE_UNSURE = "ValidateUnsure"
    INVALIDATE_UNSURE = "InvalidateUnsure"
    RESTORE_EXCLUDED = "RestoreExcluded"
    MOVE_ELLIPSE = "MoveEllipse"
    SET_DILUTION = "SetDilution"
    SET_SPLIT = "SetSplit"
    APPLY_PIPELINE = "ApplyPipeline"


@dataclass(frozen=True)
class EditEvent:
    seq: int
    actor: str
    timestamp: str  # ISO-8601; carried as data, never used in replay logic
    action: EditAction
    payload: dict

    def to_obj(self) -> dict:
        return {
            "seq": self.seq,
            "actor": self.actor,
            "timestamp": self.timestamp,
            "action": self.action.value,
            "payload": self.payload,
        }

    @classmethod
    def from_obj(cls, obj: dict) -> "EditEvent":
        return cls(
            seq=int(obj["seq"]),
            actor=str(obj["actor"]),
            timestamp=str(obj["timestamp"]),
            action=EditAction(obj["action"]),
            payload=obj.get("payload", {}),
        )


@dataclass
class Snapshot:
    """Dataset state after replaying the log up to ``seq``."""

    dataset: Dataset
    seq: int
    experiments: dict = field(default_factory=dict)  # id -> Experiment
    last_pipeline_config: dict | None = None

    def to_obj(self) -> dict:
        return {
            "seq": self.seq,
            "dataset": dataset_to_interchange(self.dataset),
            "experiments": [
                {
                    "id": e.id,
                    "triplicates": [
                        {"image_ids": list(t.image_ids), "dilution": t.dilution.value}
                        for t in e.triplicates
                    ],
                    "created_at": e.created_at.isoformat(),
                }
                for _, e in sorted(self.experiments.items(), key=lambda kv: str(kv[0]))
            ],
            "last_pipeline_config": self.last_pipeline_config,
        }


def _find_instance(ds: Dataset, instance_id):
    for inst in ds.all_instances():
        if inst.id == instance_id:
            return inst
    raise EditRejected(f"unknown instance {instance_id!r}")


def _find_image(ds: Dataset, image_id) -> ImageRecord:
    for im in ds.images:
        if im.id == image_id:
            return im
    raise EditRejected(f"unknown image {image_id!r}")


def _rerun_dish_and_area(snapshot: Snapshot, image: ImageRecord) -> None:
    """Recompute stages 3-4 for one image with the last applied config."""
    if snapshot.last_pipeline_config is None:
        return
    cfg = PostProcConfig.from_dict(snapshot.last_pipeline_config)
    ds = snapshot.dataset
    idx = [k for k, inst in enumerate(ds.predictions) if inst.image_id == image.id]
    staged = []
    for k in idx:
        inst = ds.predictions[k]
        if inst.excluded in (ExclusionReason.OUTSIDE_DISH, ExclusionReason.AREA_OUTLIER):
            inst = _replace(inst, excluded=None)
        staged.append(inst)
    staged = filter_by_dish(staged, image.dish_ellipse, cfg)
    staged, _ = filter_area_outliers(staged, cfg)
    for k, inst in zip(idx, staged):
        ds.predictions[k] = inst


def _replace(inst: Instance, **kw) -> Instance:
    return dataclasses.replace(inst, **kw)


def apply_event(snapshot: Snapshot, event: EditEvent) -> Snapshot:
    """Pure fold step: returns a new snapshot; the input is never modified."""
    snap = Snapshot(
        dataset=copy.deepcopy(snapshot.dataset),
        seq=event.seq,
        experiments=dict(snapshot.experiments),
        last_pipeline_config=copy.deepcopy(snapshot.last_pipeline_config),
    )
    ds = snap.dataset
    p = event.payload
    action = event.action

    if action is EditAction.CREATE_INSTANCE:
        image = _find_image(ds, p.get("image_id"))
        instance_id = p.get("id", f"user-{event.seq}")
        if any(i.id == instance_id for i in ds.all_instances()):
            raise EditRejected(f"instance id {instance_id!r} already exists")
        label_raw = p.get("label")
        if label_raw not in [lab.value for lab in ClassLabel]:
            raise EditRejected(f"unknown class label {label_raw!r}")
        bbox_raw = p.get("bbox")
        try:
            bbox = BBox.from_xywh(bbox_raw)
        except Exception as exc:
            raise EditRejected(f"bad bbox {bbox_raw!r}: {exc}") from exc
        mask = None
        if p.get("segmentation") is not None:
            try:
                mask = _parse_segmentation(p["segmentation"], "$.payload.segmentation", image)
            except SchemaError as exc:
                raise EditRejected(str(exc)) from exc
        ds.predictions.append(
            Instance(
                id=instance_id,
                image_id=image.id,
                label=ClassLabel(label_raw),
                score=1.0,
                bbox=bbox,
                mask=mask,
                origin=Origin.USER,
            )
        )
    elif action is EditAction.DELETE_INSTANCE:
        inst = _find_instance(ds, p.get("instance_id"))
        _set_instance(ds, _replace(inst, excluded=ExclusionReason.USER_DELETED))
    elif action is EditAction.CHANGE_CLASS:
        inst = _find_instance(ds, p.get("instance_id"))
        label_raw = p.get("label")
        if label_raw not in [lab.value for lab in ClassLabel]:
            raise EditRejected(f"unknown class label {label_raw!r}")
        _set_instance(ds, _replace(inst, label=ClassLabel(label_raw), unsure=False, alt_label=None))
    elif action is EditAction.VALIDATE_UNSURE:
        inst = _find_instance(ds, p.get("instance_id"))
        if not inst.unsure:
            raise EditRejected(f"instance {inst.id!r} is not flagged unsure")
        _set_instance(ds, _replace(inst, unsure=False, alt_label=None))
    elif action is EditAction.INVALIDATE_UNSURE:
        inst = _find_instance(ds, p.get("instance_id"))
        if not inst.unsure or inst.alt_label is None:
            raise EditRejected(f"instance {inst.id!r} is not flagged unsure")
        _set_instance(ds, _replace(inst, label=inst.alt_label, unsure=False, alt_label=None))
    elif action is EditAction.RESTORE_EXCLUDED:
        inst = _find_instance(ds, p.get("instance_id"))
        if inst.excluded is None:
            raise EditRejected(f"instance {inst.id!r} is not excluded")
        _set_instance(ds, _replace(inst, excluded=None))
    elif action is EditAction.MOVE_ELLIPSE:
        image = _find_image(ds, p.get("image_id"))
        try:
            ellipse = EllipseModel.from_dict(p.get("ellipse") or {})
        except Exception as exc:
            raise EditRejected(f"bad ellipse: {exc}") from exc
        source_raw = p.get("source", EllipseSource.USER_OVERRIDE.value)
        if source_raw not in [s.value for s in EllipseSource]:
            raise EditRejected(f"unknown ellipse source {source_raw!r}")
        image.dish_ellipse = ellipse
        image.ellipse_source = EllipseSource(source_raw)
        _rerun_dish_and_area(snap, image)
    elif action is EditAction.SET_SPLIT:
        image = _find_image(ds, p.get("image_id"))
        split_raw = p.get("split")
        if split_raw not in [s.value for s in Split]:
            raise EditRejected(f"unknown split {split_raw!r}")
        image.split = Split(split_raw)
    elif action is EditAction.SET_DILUTION:
        exp_id = p.get("experiment_id")
        if not exp_id:
            raise EditRejected("missing experiment_id")
        trips_raw = p.get("triplicates")
        if not isinstance(trips_raw, list) or not trips_raw:
            raise EditRejected("triplicates must be a non-empty list")
        trips = []
        for t in trips_raw:
            ids = t.get("image_ids") if isinstance(t, dict) else None
            if not isinstance(ids, list):
                raise EditRejected("each triplicate needs an image_ids list")
            for iid in ids:
                _find_image(ds, iid)
            try:
                trips.append(TriplicateGroup(image_ids=list(ids), dilution=DilutionFactor(t.get("dilution"))))
            except Exception as exc:
                raise EditRejected(str(exc)) from exc
        try:
            created = datetime.fromisoformat(event.timestamp)
        except ValueError:
            created = datetime(1970, 1, 1, tzinfo=timezone.utc)
        try:
            exp = Experiment(id=str(exp_id), triplicates=trips, created_at=created)
        except Exception as exc:
            raise EditRejected(str(exc)) from exc
        snap.experiments[str(exp_id)] = exp
    elif action is EditAction.APPLY_PIPELINE:
        try:
            cfg = PostProcConfig.from_dict(p.get("config") or {})
        except Exception as exc:
            raise EditRejected(f"bad config: {exc}") from exc
        image_ids = p.get("image_ids")
        targets = [
            im for im in ds.images if image_ids is None or im.id in set(image_ids)
        ]
        for im in targets:
            if im.dish_ellipse is None:
                raise EditRejected(f"image {im.id!r} has no dish ellipse")
        for im in targets:
            idx = [k for k, inst in enumerate(ds.predictions) if inst.image_id == im.id]
            fresh = reset_pipeline_marks([ds.predictions[k] for k in idx])
            result = run_pipeline(im, fresh, cfg)
            for k, inst in zip(idx, result.instances):
                ds.predictions[k] = inst
        snap.last_pipeline_config = cfg.to_dict()
    else:  # pragma: no cover - enum is closed
        raise EditRejected(f"unknown action {action}")

    return snap


def _set_instance(ds: Dataset, inst: Instance) -> None:
    for pool in (ds.ground_truth, ds.predictions):
        for k, existing in enumerate(pool):
            if existing.id == inst.id:
                pool[k] = inst
                return
    raise EditRejected(f"unknown instance {inst.id!r}")


# ---------------------------------------------------------------------------
# on-disk store


class DatasetStore:
    """Directory-per-dataset persistence with serialized writes per dataset."""

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._locks: dict[str, threading.Lock] = {}
        self._locks_guard = threading.Lock()

    def _lock(self, dataset_id: str) -> threading.Lock:
        with self._locks_guard:
            return self._locks.setdefault(dataset_id, threading.Lock())

    def _dir(self, dataset_id: str) -> Path:
        if not dataset_id or "/" in dataset_id or dataset_id.startswith("."):
            raise StoreError(f"bad dataset id {dataset_id!r}")
        return self.root / dataset_id

    def dataset_dir(self, dataset_id: str) -> Path:
        """Directory holding one dataset's files (may not exist yet)."""
        return self._dir(dataset_id)

    def list_datasets(self) -> list[str]:
        return sorted(p.name for p in self.root.iterdir() if (p / "base.json").exists())

    def exists(self, dataset_id: str) -> bool:
        return (self._dir(dataset_id) / "base.json").exists()

    def create_dataset(self, ds: Dataset) -> None:
        d = self._dir(ds.id)
        if (d / "base.json").exists():
            raise StoreError(f"dataset {ds.id!r} already exists")
        d.mkdir(parents=True, exist_ok=True)
        (d / "base.json").write_text(canonical_json(dataset_to_interchange(ds)) + "\n")
        (d / "events.ndjson").touch()

    def ingest_file(self, path, dataset_id: str | None = None) -> str:
        ds = load_interchange(path, dataset_id=dataset_id)
        self.create_dataset(ds)
        return ds.id

    def base_dataset(self, dataset_id: str) -> Dataset:
        d = self._dir(dataset_id)
        if not (d / "base.json").exists():
            raise StoreError(f"unknown dataset {dataset_id!r}")
        return load_interchange(d / "base.json", dataset_id=dataset_id)

    def events(self, dataset_id: str) -> list[EditEvent]:
        d = self._dir(dataset_id)
        if not (d / "base.json").exists():
            raise StoreError(f"unknown dataset {dataset_id!r}")
        out = []
        log = d / "events.ndjson"
        if log.exists():
            text = log.read_text()
            # a line missing its newline is an append still in flight (or one
            # that never became durable); lock-free readers skip it
            body, _, _tail = text.rpartition("\n")
            lines = body.split("\n") if body else []
            for line_no, line in enumerate(lines, start=1):
                if not line.strip():
                    continue
                try:
                    out.append(EditEvent.from_obj(json.loads(line)))
                except (json.JSONDecodeError, KeyError, ValueError) as exc:
                    raise StoreError(f"{log}:{line_no}: corrupt event: {exc}") from exc
        return out

    def materialize(self, dataset_id: str, upto_seq: int | None = None) -> Snapshot:
        """Replay the log over the base dataset (using the cache when current)."""
        events = self.events(dataset_id)
        if upto_seq is not None:
            events = [e for e in events if e.seq <= upto_seq]
        target_seq = events[-1].seq if events else 0
        if upto_seq is None:
            cached = self._load_cache(dataset_id)
            if cached is not None and cached.seq == target_seq:
                return cached
        snap = Snapshot(dataset=self.base_dataset(dataset_id), seq=0)
        for event in events:
            snap = apply_event(snap, event)
        if upto_seq is None:
            self._write_cache(dataset_id, snap)
        return snap

    def append_edit(self, dataset_id: str, action: EditAction, payload: dict, actor: str = "user") -> int:
        """Validate against the current snapshot, then durably append."""
        with self._lock(dataset_id):
            snap = self.materialize(dataset_id)
            before = {(v.entity, v.message) for v in validate_dataset(snap.dataset)}
            seq = snap.seq + 1
            event = EditEvent(
                seq=seq,
                actor=actor,
                timestamp=datetime.now(timezone.utc).isoformat(),
                action=EditAction(action),
                payload=payload,
            )
            after = apply_event(snap, event)  # raises EditRejected on bad references
            introduced = [
                v for v in validate_dataset(after.dataset) if (v.entity, v.message) not in before
            ]
            if introduced:
                raise EditRejected("; ".join(str(v) for v in introduced))
            log = self._dir(dataset_id) / "events.ndjson"
            with open(log, "a") as fh:
                fh.write(canonical_json(event.to_obj()) + "\n")
                fh.flush()
                os.fsync(fh.fileno())
            self._write_cache(dataset_id, after)
            return seq

    # -- snapshot cache -----------------------------------------------------

    def _cache_path(self, dataset_id: str) -> Path:
        return self._dir(dataset_id) / "cache.json"

    def _write_cache(self, dataset_id: str, snap: Snapshot) -> None:
        # unique temp name: read paths may warm the cache concurrently with a
        # writer, and the cache is disposable, so losing the race is fine
        fd, tmp_name = tempfile.mkstemp(prefix="cache-", suffix=".tmp",
                                        dir=self._dir(dataset_id))
        try:
            with os.fdopen(fd, "w") as fh:
                fh.write(canonical_json(snap.to_obj()) + "\n")
            os.replace(tmp_name, self._cache_path(dataset_id))
        except OSError:
            with contextlib.suppress(OSError):
                os.unlink(tmp_name)

    def _load_cache(self, dataset_id: str) -> Snapshot | None:
        path = self._cache_path(dataset_id)
        if not path.exists():
            return None
        try:
            obj = json.loads(path.read_text())
            ds = parse_interchange(obj["dataset"], dataset_id=dataset_id)
            experiments = {}
            for e in obj.get("experiments", []):
                experiments[e["id"]] = Experiment(
                    id=e["id"],
                    triplicates=[
                        TriplicateGroup(image_ids=list(t["image_ids"]), dilution=DilutionFactor(t["dilution"]))
                        for t in e["triplicates"]
                    ],
                    created_at=datetime.fromisoformat(e["created_at"]),
                )
            return Snapshot(
                dataset=ds,
                seq=int(obj["seq"]),
                experiments=experiments,
                last_pipeline_config=obj.get("last_pipeline_config"),
            )
        except Exception:
            return None  # cache is disposable; fall back to full replay
