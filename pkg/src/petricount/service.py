"""HTTP review service built on the event-sourced dataset store.

All endpoints live under ``/v1``. JSON responses are canonical (sorted keys,
compact separators, trailing newline); the report endpoints return exactly
the strings produced by the shared renderers in :mod:`petricount.reports`,
which is what keeps CLI and API output byte-identical.

Every mutation is persisted as an edit event through ``DatasetStore``, so
writes are serialized per dataset and any state is reproducible by replay.

Errors use one shape::

    {"error": {"status": 409, "code": "missing_ellipse", "message": ..., "details": ...}}

with status in {400, 404, 409, 422, 500} and machine-stable codes.

Image, instance and experiment routes address entities by their own id. If
the id exists in more than one dataset the request must pin one with the
``dataset`` query parameter, otherwise the service answers 409.
"""

from __future__ import annotations

import base64
import binascii
import itertools
import threading

import numpy as np
from fastapi import Body, FastAPI, Request, Response
from fastapi.exceptions import RequestValidationError
from PIL import Image as PILImage
from starlette.exceptions import HTTPException as StarletteHTTPException

from .dilution import aggregate_ci, validate_experiment
from .errors import DomainError, EditRejected, SchemaError
from .geometry import EllipseModel, estimate_dish_ellipse
from .metrics import EvalConfig, _id_key, build_eval_report, variability_report
from .model import (Dataset, ExclusionReason, ImageRecord, Instance,
                    images_with_unsure, reviewed_counts_by_image)
from .pipeline import PostProcConfig
from .reports import render_eval_report, render_quant_report
from .store import DatasetStore, EditAction, Snapshot, canonical_json, parse_interchange

MEDIA_TYPES = {
    "json": "application/json",
    "text": "text/plain; charset=utf-8",
    "csv": "text/csv; charset=utf-8",
}


class ApiException(Exception):
    def __init__(self, status: int, code: str, message: str, details=None):
        super().__init__(message)
        self.status = status
        self.code = code
        self.message = message
        self.details = details

    def to_obj(self) -> dict:
        err = {"status": self.status, "code": self.code, "message": self.message}
        if self.details is not None:
            err["details"] = self.details
        return {"error": err}


def _cjson(obj, status: int = 200) -> Response:
    return Response(content=canonical_json(obj) + "\n",
                    media_type="application/json", status_code=status)


def _not_found(kind: str, entity_id) -> ApiException:
    return ApiException(404, "not_found", f"{kind} {entity_id!r} not found")


def _instance_obj(inst: Instance) -> dict:
    return {
        "id": inst.id,
        "image_id": inst.image_id,
        "label": inst.label.value,
        "score": inst.score,
        "bbox": inst.bbox.to_xywh(),
        "area": float(inst.mask.area()) if inst.mask is not None else inst.bbox.area(),
        "origin": inst.origin.value,
        "unsure": inst.unsure,
        "alt_label": inst.alt_label.value if inst.alt_label else None,
        "excluded": inst.excluded.value if inst.excluded else None,
        "has_mask": inst.mask is not None,
    }


def _image_obj(im: ImageRecord) -> dict:
    return {
        "id": im.id,
        "width": im.width,
        "height": im.height,
        "split": im.split.value,
        "ellipse_source": im.ellipse_source.value,
        "dish_ellipse": im.dish_ellipse.to_dict() if im.dish_ellipse else None,
        "has_pixels": im.pixel_data_ref is not None,
    }


def _reason_counts(ds: Dataset) -> dict:
    counts = {"kept": 0, "unsure": 0}
    for reason in ExclusionReason:
        counts[reason.value] = 0
    for inst in ds.predictions:
        if inst.excluded is None:
            counts["kept"] += 1
            if inst.unsure:
                counts["unsure"] += 1
        else:
            counts[inst.excluded.value] += 1
    return counts


def create_app(data_dir, default_config: PostProcConfig | None = None) -> FastAPI:
    store = DatasetStore(data_dir)
    base_config = default_config or PostProcConfig()
    app = FastAPI(title="petricount", docs_url=None, redoc_url=None)
    jobs: dict = {}
    jobs_lock = threading.Lock()
    job_counter = itertools.count(1)

    # -------------------------------------------------------------- plumbing

    @app.exception_handler(ApiException)
    async def _api_exc(request: Request, exc: ApiException):
        return _cjson(exc.to_obj(), status=exc.status)

    @app.exception_handler(RequestValidationError)
    async def _validation_exc(request: Request, exc: RequestValidationError):
        return _cjson(
            ApiException(422, "invalid_request", "malformed request body").to_obj(),
            status=422,
        )

    @app.exception_handler(StarletteHTTPException)
    async def _http_exc(request: Request, exc: StarletteHTTPException):
        code = "not_found" if exc.status_code == 404 else "http_error"
        return _cjson(ApiException(exc.status_code, code, str(exc.detail)).to_obj(),
                      status=exc.status_code)

    @app.exception_handler(Exception)
    async def _fallback_exc(request: Request, exc: Exception):
        return _cjson(ApiException(500, "internal", f"{type(exc).__name__}: {exc}").to_obj(),
                      status=500)

    def snapshot_of(dataset_id: str) -> Snapshot:
        if not store.exists(dataset_id):
            raise _not_found("dataset", dataset_id)
        return store.materialize(dataset_id)

    def append(dataset_id: str, action: EditAction, payload: dict, actor: str = "user") -> int:
        try:
            return store.append_edit(dataset_id, action, payload, actor=actor)
        except EditRejected as exc:
            raise ApiException(422, "edit_rejected", str(exc)) from exc

    def resolve(entity: str, entity_id, dataset_q, finder):
        """Locate an entity by id, scanning datasets unless one is pinned."""
        if dataset_q is not None:
            snap = snapshot_of(dataset_q)
            found = finder(snap, entity_id)
            if found is None:
                raise _not_found(entity, entity_id)
            return dataset_q, snap, found
        hits = []
        for ds_id in store.list_datasets():
            snap = store.materialize(ds_id)
            found = finder(snap, entity_id)
            if found is not None:
                hits.append((ds_id, snap, found))
        if not hits:
            raise _not_found(entity, entity_id)
        if len(hits) > 1:
            raise ApiException(
                409, "ambiguous_id",
                f"{entity} {entity_id!r} exists in datasets {[h[0] for h in hits]}; "
                "pin one with ?dataset=",
            )
        return hits[0]

    # ids in interchange may be ints or strings; path segments are always
    # strings, so match on the textual form
    def find_image(snap: Snapshot, image_id):
        return next((im for im in snap.dataset.images if str(im.id) == str(image_id)), None)

    def find_instance(snap: Snapshot, instance_id):
        return next((i for i in snap.dataset.all_instances() if str(i.id) == str(instance_id)), None)

    def find_experiment(snap: Snapshot, experiment_id):
        return snap.experiments.get(str(experiment_id))

    def parse_format(fmt: str, allowed=("json", "text", "csv")) -> str:
        if fmt not in allowed:
            raise ApiException(422, "invalid_format",
                               f"format must be one of {', '.join(allowed)}")
        return fmt

    def merged_config(overrides: dict) -> PostProcConfig:
        merged = base_config.to_dict()
        if overrides:
            if not isinstance(overrides, dict):
                raise ApiException(422, "invalid_config", "config must be an object")
            merged.update(overrides)
        try:
            return PostProcConfig.from_dict(merged)
        except DomainError as exc:
            raise ApiException(422, "invalid_config", str(exc)) from exc

    # -------------------------------------------------------------- datasets

    @app.get("/v1/health")
    def health():
        return _cjson({"status": "ok", "datasets": len(store.list_datasets())})

    @app.post("/v1/datasets")
    def upload_dataset(payload: dict = Body(...)):
        dataset_id = _next_dataset_id(store)
        pixel_blobs = _pop_pixel_data(payload)
        try:
            name = payload.get("name") if isinstance(payload.get("name"), str) else None
            ds = parse_interchange(payload, dataset_id=dataset_id, name=name)
        except SchemaError as exc:
            raise ApiException(422, "schema_invalid", str(exc),
                               details={"path": exc.path}) from exc
        _store_pixel_blobs(store, dataset_id, ds, pixel_blobs)
        store.create_dataset(ds)
        return _cjson({
            "id": ds.id,
            "name": ds.name,
            "images": len(ds.images),
            "ground_truth": len(ds.ground_truth),
            "predictions": len(ds.predictions),
        }, status=201)

    @app.get("/v1/datasets")
    def list_datasets():
        rows = []
        for ds_id in store.list_datasets():
            snap = store.materialize(ds_id)
            rows.append({
                "id": ds_id,
                "name": snap.dataset.name,
                "images": len(snap.dataset.images),
                "seq": snap.seq,
            })
        return _cjson({"datasets": rows})

    @app.get("/v1/datasets/{dataset_id}")
    def get_dataset(dataset_id: str):
        snap = snapshot_of(dataset_id)
        return _cjson({
            "id": dataset_id,
            "name": snap.dataset.name,
            "seq": snap.seq,
            "images": [_image_obj(im) for im in snap.dataset.images],
            "counts": _reason_counts(snap.dataset),
            "experiments": sorted(snap.experiments, key=str),
            "last_pipeline_config": snap.last_pipeline_config,
        })

    @app.get("/v1/datasets/{dataset_id}/events")
    def get_events(dataset_id: str):
        if not store.exists(dataset_id):
            raise _not_found("dataset", dataset_id)
        return _cjson({"events": [e.to_obj() for e in store.events(dataset_id)]})

    # --------------------------------------------------------- pipeline runs

    def run_postprocess(dataset_id: str, payload: dict) -> dict:
        snap = snapshot_of(dataset_id)
        cfg = merged_config(payload.get("config") or {})
        image_ids = payload.get("image_ids")
        if image_ids is not None:
            known = {im.id for im in snap.dataset.images}
            missing = [i for i in image_ids if i not in known]
            if missing:
                raise _not_found("image", missing[0])
        targets = [im for im in snap.dataset.images
                   if image_ids is None or im.id in set(image_ids)]
        for im in targets:
            if im.dish_ellipse is None:
                _auto_fit_ellipse(store, dataset_id, im)
        seq = append(dataset_id, EditAction.APPLY_PIPELINE,
                     {"config": cfg.to_dict(), "image_ids": image_ids}, actor="system")
        after = store.materialize(dataset_id)
        per_image = []
        for im in targets:
            insts = [i for i in after.dataset.predictions if i.image_id == im.id]
            row = {"image_id": im.id, "kept": sum(1 for i in insts if i.excluded is None)}
            for reason in ExclusionReason:
                row[reason.value] = sum(1 for i in insts if i.excluded is reason)
            per_image.append(row)
        return {
            "seq": seq,
            "config": cfg.to_dict(),
            "counts": _reason_counts(after.dataset),
            "per_image": per_image,
        }

    @app.post("/v1/datasets/{dataset_id}/postprocess")
    def postprocess(dataset_id: str, payload: dict = Body(default={}),
                    wait: bool = True):
        if wait:
            return _cjson(run_postprocess(dataset_id, payload))
        job_id = f"job-{next(job_counter)}"
        with jobs_lock:
            jobs[job_id] = {"id": job_id, "status": "running"}

        def worker():
            try:
                result = run_postprocess(dataset_id, payload)
                record = {"id": job_id, "status": "done", "result": result}
            except ApiException as exc:
                record = {"id": job_id, "status": "failed", "error": exc.to_obj()["error"]}
            except Exception as exc:  # noqa: BLE001 - job must always resolve
                record = {"id": job_id, "status": "failed",
                          "error": {"status": 500, "code": "internal", "message": str(exc)}}
            with jobs_lock:
                jobs[job_id] = record

        threading.Thread(target=worker, daemon=True).start()
        return _cjson({"job_id": job_id, "status": "running"}, status=202)

    @app.get("/v1/jobs/{job_id}")
    def job_status(job_id: str):
        with jobs_lock:
            record = jobs.get(job_id)
        if record is None:
            raise _not_found("job", job_id)
        return _cjson(record)

    # ----------------------------------------------------- images, instances

    @app.get("/v1/images/{image_id}/instances")
    def image_instances(image_id: str, dataset: str | None = None,
                        include_excluded: bool = False):
        ds_id, snap, im = resolve("image", image_id, dataset, find_image)
        rows = [i for i in snap.dataset.predictions if i.image_id == im.id]
        if not include_excluded:
            rows = [i for i in rows if i.excluded is None]
        rows.sort(key=lambda i: _id_key(i.id))
        return _cjson({
            "dataset": ds_id,
            "image_id": im.id,
            "instances": [_instance_obj(i) for i in rows],
        })

    @app.get("/v1/images/{image_id}/pixels")
    def image_pixels(image_id: str, dataset: str | None = None):
        _, _, im = resolve("image", image_id, dataset, find_image)
        if not im.pixel_data_ref:
            raise _not_found("pixel data for image", im.id)
        try:
            with open(im.pixel_data_ref, "rb") as fh:
                blob = fh.read()
        except OSError as exc:
            raise _not_found("pixel data for image", im.id) from exc
        return Response(content=blob, media_type="image/png")

    @app.put("/v1/images/{image_id}/ellipse")
    def move_ellipse(image_id: str, payload: dict = Body(...),
                     dataset: str | None = None):
        ds_id, _, im = resolve("image", image_id, dataset, find_image)
        try:
            ellipse = EllipseModel.from_dict(payload)
        except (DomainError, TypeError, KeyError) as exc:
            raise ApiException(422, "invalid_geometry", f"bad ellipse: {exc}") from exc
        seq = append(ds_id, EditAction.MOVE_ELLIPSE,
                     {"image_id": im.id, "ellipse": ellipse.to_dict()})
        after = store.materialize(ds_id)
        insts = [i for i in after.dataset.predictions if i.image_id == im.id]
        return _cjson({
            "seq": seq,
            "image_id": im.id,
            "ellipse": ellipse.to_dict(),
            "kept": sum(1 for i in insts if i.excluded is None),
            "outside_dish": sorted(
                (i.id for i in insts if i.excluded is ExclusionReason.OUTSIDE_DISH),
                key=_id_key),
            "area_outlier": sorted(
                (i.id for i in insts if i.excluded is ExclusionReason.AREA_OUTLIER),
                key=_id_key),
        })

    @app.post("/v1/images/{image_id}/instances")
    def create_instance(image_id: str, payload: dict = Body(...),
                        dataset: str | None = None):
        ds_id, _, im = resolve("image", image_id, dataset, find_image)
        event_payload = {"image_id": im.id, "label": payload.get("label"),
                         "bbox": payload.get("bbox")}
        if payload.get("id") is not None:
            event_payload["id"] = payload["id"]
        if payload.get("segmentation") is not None:
            event_payload["segmentation"] = payload["segmentation"]
        seq = append(ds_id, EditAction.CREATE_INSTANCE, event_payload)
        after = store.materialize(ds_id)
        created = next(i for i in after.dataset.predictions
                       if i.id == event_payload.get("id", f"user-{seq}"))
        return _cjson({"seq": seq, "instance": _instance_obj(created)}, status=201)

    INSTANCE_OPS = {
        "change_class": EditAction.CHANGE_CLASS,
        "validate_unsure": EditAction.VALIDATE_UNSURE,
        "invalidate_unsure": EditAction.INVALIDATE_UNSURE,
        "restore": EditAction.RESTORE_EXCLUDED,
    }

    @app.put("/v1/instances/{instance_id}")
    def edit_instance(instance_id: str, payload: dict = Body(...),
                      dataset: str | None = None):
        ds_id, _, inst = resolve("instance", instance_id, dataset, find_instance)
        op = payload.get("op")
        if op not in INSTANCE_OPS:
            raise ApiException(422, "invalid_request",
                               f"op must be one of {', '.join(sorted(INSTANCE_OPS))}")
        event_payload = {"instance_id": inst.id}
        if op == "change_class":
            event_payload["label"] = payload.get("label")
        seq = append(ds_id, INSTANCE_OPS[op], event_payload)
        after = store.materialize(ds_id)
        updated = find_instance(after, inst.id)
        return _cjson({"seq": seq, "instance": _instance_obj(updated)})

    @app.delete("/v1/instances/{instance_id}")
    def delete_instance(instance_id: str, dataset: str | None = None):
        ds_id, _, inst = resolve("instance", instance_id, dataset, find_instance)
        seq = append(ds_id, EditAction.DELETE_INSTANCE, {"instance_id": inst.id})
        return _cjson({"seq": seq, "instance_id": inst.id})

    # ------------------------------------------------------- quantification

    @app.put("/v1/experiments/{experiment_id}/dilutions")
    def set_dilutions(experiment_id: str, payload: dict = Body(...),
                      dataset: str | None = None):
        if dataset is not None:
            ds_id = dataset
            if not store.exists(ds_id):
                raise _not_found("dataset", ds_id)
        else:
            hits = [d for d in store.list_datasets()
                    if find_experiment(store.materialize(d), experiment_id)]
            if len(hits) > 1:
                raise ApiException(409, "ambiguous_id",
                                   f"experiment {experiment_id!r} exists in datasets {hits}; "
                                   "pin one with ?dataset=")
            if not hits:
                raise ApiException(422, "dataset_required",
                                   "new experiments need an explicit ?dataset=")
            ds_id = hits[0]
        seq = append(ds_id, EditAction.SET_DILUTION, {
            "experiment_id": experiment_id,
            "triplicates": payload.get("triplicates"),
        })
        snap = store.materialize(ds_id)
        exp = find_experiment(snap, experiment_id)
        diagnostics = validate_experiment(exp, images_with_unsure(snap.dataset))
        return _cjson({
            "seq": seq,
            "experiment_id": str(experiment_id),
            "dataset": ds_id,
            "diagnostics": [
                {"severity": d.severity, "code": d.code, "message": d.message}
                for d in diagnostics
            ],
        })

    @app.get("/v1/experiments/{experiment_id}/export")
    def export_experiment(experiment_id: str, dataset: str | None = None,
                          format: str = "csv", confidence_level: float = 0.95):
        fmt = parse_format(format)
        _, snap, exp = resolve("experiment", experiment_id, dataset, find_experiment)
        diagnostics = validate_experiment(exp, images_with_unsure(snap.dataset))
        blocking = [d for d in diagnostics if d.severity == "error"]
        if blocking:
            raise ApiException(
                409, "blocking_diagnostics",
                "experiment fails validation; fix the errors before exporting",
                details=[{"severity": d.severity, "code": d.code, "message": d.message}
                         for d in blocking],
            )
        counts = reviewed_counts_by_image(snap.dataset)
        try:
            report = aggregate_ci(exp, counts, confidence_level)
        except DomainError as exc:
            raise ApiException(422, "invalid_request", str(exc)) from exc
        warnings = [str(d) for d in diagnostics]
        body = render_quant_report(report, str(experiment_id), fmt, warnings=warnings)
        return Response(content=body, media_type=MEDIA_TYPES[fmt])

    # ------------------------------------------------------------ evaluation

    @app.post("/v1/datasets/{dataset_id}/evaluate")
    def evaluate(dataset_id: str, payload: dict = Body(default={}),
                 format: str = "json"):
        fmt = parse_format(format, allowed=("json", "text"))
        snap = snapshot_of(dataset_id)
        ds = snap.dataset
        if not ds.ground_truth:
            raise ApiException(409, "no_ground_truth",
                               f"dataset {dataset_id!r} has no ground truth to evaluate against")
        try:
            cfg_raw = payload.get("config") or {}
            if not isinstance(cfg_raw, dict):
                raise DomainError("config must be an object")
            eval_cfg = EvalConfig(**{
                k: tuple(v) if k == "iou_thresholds" else v for k, v in cfg_raw.items()
            })
        except (DomainError, TypeError) as exc:
            raise ApiException(422, "invalid_config", str(exc)) from exc
        report = build_eval_report(ds.predictions, ds.ground_truth, eval_cfg)
        variability = None
        raters = payload.get("raters")
        if raters:
            count_sets = dict(raters)
            count_sets["model"] = reviewed_counts_by_image(ds)
            try:
                variability = variability_report(count_sets, model_rater="model")
            except DomainError as exc:
                raise ApiException(422, "invalid_request", str(exc)) from exc
        body = render_eval_report(report, fmt, variability=variability)
        return Response(content=body, media_type=MEDIA_TYPES[fmt])

    return app


# ------------------------------------------------------------------ helpers


def _next_dataset_id(store: DatasetStore) -> str:
    taken = set(store.list_datasets())
    for n in itertools.count(1):
        candidate = f"ds-{n:04d}"
        if candidate not in taken:
            return candidate
    raise AssertionError("unreachable")


def _pop_pixel_data(doc) -> dict:
    """Strip inline base64 PNG payloads from an upload document."""
    blobs = {}
    if isinstance(doc, dict) and isinstance(doc.get("images"), list):
        for obj in doc["images"]:
            if isinstance(obj, dict) and "pixel_data" in obj:
                raw = obj.pop("pixel_data")
                if not isinstance(raw, str):
                    raise ApiException(422, "schema_invalid", "pixel_data must be a base64 string")
                try:
                    blobs[obj.get("id")] = base64.b64decode(raw, validate=True)
                except (binascii.Error, ValueError) as exc:
                    raise ApiException(422, "schema_invalid",
                                       f"pixel_data is not valid base64: {exc}") from exc
    return blobs


def _store_pixel_blobs(store: DatasetStore, dataset_id: str, ds: Dataset, blobs: dict) -> None:
    if not blobs:
        return
    pixel_dir = store.dataset_dir(dataset_id) / "pixels"
    pixel_dir.mkdir(parents=True, exist_ok=True)
    for im in ds.images:
        blob = blobs.get(im.id)
        if blob is None:
            continue
        path = pixel_dir / f"{im.id}.png"
        path.write_bytes(blob)
        im.pixel_data_ref = str(path)


def _auto_fit_ellipse(store: DatasetStore, dataset_id: str, im: ImageRecord) -> None:
    """Fit a dish ellipse from pixels and persist it, or answer 409."""
    if not im.pixel_data_ref:
        raise ApiException(
            409, "missing_ellipse",
            f"image {im.id!r} has no dish ellipse and no pixel data to fit one from")
    try:
        with PILImage.open(im.pixel_data_ref) as img:
            pixels = np.asarray(img.convert("L"), dtype=float)
    except OSError as exc:
        raise ApiException(
            409, "missing_ellipse",
            f"image {im.id!r} has no dish ellipse and its pixel data is unreadable: {exc}",
        ) from exc
    ellipse, _ = estimate_dish_ellipse(pixels)
    try:
        store.append_edit(dataset_id, EditAction.MOVE_ELLIPSE,
                          {"image_id": im.id, "ellipse": ellipse.to_dict(),
                           "source": "fitted"},
                          actor="system")
    except EditRejected as exc:
        raise ApiException(422, "edit_rejected", str(exc)) from exc
