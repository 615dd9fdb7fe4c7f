import { describe, expect, it } from "vitest";
import { ApiClient, ApiError, type FetchLike } from "../src/api.js";

interface RecordedCall {
  url: string;
  method: string;
  body: unknown;
}

interface CannedResponse {
  status?: number;
  body?: unknown;
  text?: string;
}

/** fetch stub: replays canned responses and records every request. */
function makeStub(...canned: CannedResponse[]) {
  const calls: RecordedCall[] = [];
  const queue = [...canned];
  const fetchImpl: FetchLike = async (url, init) => {
    calls.push({
      url,
      method: init?.method ?? "GET",
      body: typeof init?.body === "string" ? JSON.parse(init.body) : undefined,
    });
    const next = queue.shift() ?? { status: 200, body: {} };
    const payload = next.text !== undefined ? next.text : JSON.stringify(next.body ?? {});
    return new Response(payload, {
      status: next.status ?? 200,
      headers: { "content-type": next.text !== undefined ? "text/plain" : "application/json" },
    });
  };
  return { calls, fetchImpl };
}

function client(...canned: CannedResponse[]) {
  const stub = makeStub(...canned);
  return { api: new ApiClient("http://host:9", stub.fetchImpl), calls: stub.calls };
}

describe("request shapes", () => {
  it("normalizes a trailing slash in the base url", async () => {
    const stub = makeStub({ body: { status: "ok", datasets: 0 } });
    const api = new ApiClient("http://host:9///", stub.fetchImpl);
    await api.health();
    expect(stub.calls[0]?.url).toBe("http://host:9/v1/health");
  });

  it("builds query strings and skips undefined params", async () => {
    const { api, calls } = client({ body: { dataset: "d", image_id: "i", instances: [] } });
    await api.getInstances("dish a", { dataset: "ds-0001", includeExcluded: true });
    expect(calls[0]?.url)
      .toBe("http://host:9/v1/images/dish%20a/instances?dataset=ds-0001&include_excluded=true");
    expect(calls[0]?.method).toBe("GET");
  });

  it("omits the query entirely when no params are set", async () => {
    const { api, calls } = client({ body: { dataset: "d", image_id: "i", instances: [] } });
    await api.getInstances("im-1");
    expect(calls[0]?.url).toBe("http://host:9/v1/images/im-1/instances");
  });
});

describe("one call per mutation", () => {
  it("uploadDataset posts the document once", async () => {
    const { api, calls } = client({ status: 201, body: { id: "ds-0001" } });
    const doc = { images: [], annotations: [], categories: [] };
    const out = await api.uploadDataset(doc);
    expect(out.id).toBe("ds-0001");
    expect(calls).toHaveLength(1);
    expect(calls[0]).toMatchObject({ method: "POST", url: "http://host:9/v1/datasets", body: doc });
  });

  it("postprocess posts config and image subset in one request", async () => {
    const { api, calls } = client({ body: { seq: 1, config: {}, counts: {}, per_image: [] } });
    await api.postprocess("ds-0001", {
      config: { score_threshold: 0.5 },
      imageIds: ["dish-a"],
    });
    expect(calls).toHaveLength(1);
    expect(calls[0]).toMatchObject({
      method: "POST",
      url: "http://host:9/v1/datasets/ds-0001/postprocess",
      body: { config: { score_threshold: 0.5 }, image_ids: ["dish-a"] },
    });
  });

  it("async postprocess only differs by wait=false", async () => {
    const { api, calls } = client({ status: 202, body: { job_id: "job-1", status: "running" } });
    const ticket = await api.postprocessAsync("ds-0001");
    expect(ticket.job_id).toBe("job-1");
    expect(calls[0]?.url).toBe("http://host:9/v1/datasets/ds-0001/postprocess?wait=false");
  });

  it("instance ops put exactly one body, label only for change_class", async () => {
    const { api, calls } = client(
      { body: { seq: 2, instance: {} } },
      { body: { seq: 3, instance: {} } },
    );
    await api.updateInstance("p-1", "invalidate_unsure", { dataset: "ds-0001" });
    await api.updateInstance("p-1", "change_class", { label: "BVG-", dataset: "ds-0001" });
    expect(calls).toHaveLength(2);
    expect(calls[0]).toMatchObject({
      method: "PUT",
      url: "http://host:9/v1/instances/p-1?dataset=ds-0001",
      body: { op: "invalidate_unsure" },
    });
    expect(calls[0]?.body).not.toHaveProperty("label");
    expect(calls[1]?.body).toEqual({ op: "change_class", label: "BVG-" });
  });

  it("deleteInstance issues a single DELETE", async () => {
    const { api, calls } = client({ body: { seq: 4, instance_id: "p-1" } });
    await api.deleteInstance("p-1", "ds-0001");
    expect(calls).toHaveLength(1);
    expect(calls[0]?.method).toBe("DELETE");
    expect(calls[0]?.url).toBe("http://host:9/v1/instances/p-1?dataset=ds-0001");
    expect(calls[0]?.body).toBeUndefined();
  });

  it("putEllipse sends the geometry as the whole body", async () => {
    const ellipse = { cx: 1, cy: 2, a: 3, b: 4, theta: 0.5 };
    const { api, calls } = client({
      body: { seq: 5, image_id: "im", ellipse, kept: 9, outside_dish: [], area_outlier: [] },
    });
    await api.putEllipse("im", ellipse, "ds-0001");
    expect(calls).toHaveLength(1);
    expect(calls[0]).toMatchObject({ method: "PUT", body: ellipse });
  });

  it("putDilutions wraps triplicates and pins the dataset", async () => {
    const { api, calls } = client({
      body: { seq: 6, experiment_id: "e", dataset: "ds-0001", diagnostics: [] },
    });
    const trip = [{ dilution: 0.001, image_ids: ["a", "b", "c"] }];
    await api.putDilutions("exp 1", trip, "ds-0001");
    expect(calls).toHaveLength(1);
    expect(calls[0]?.url).toBe("http://host:9/v1/experiments/exp%201/dilutions?dataset=ds-0001");
    expect(calls[0]?.body).toEqual({ triplicates: trip });
  });

  it("createInstance posts label and bbox", async () => {
    const { api, calls } = client({ status: 201, body: { seq: 7, instance: {} } });
    await api.createInstance("im-1", { label: "BVG+", bbox: [1, 2, 3, 4] });
    expect(calls).toHaveLength(1);
    expect(calls[0]?.body).toEqual({ label: "BVG+", bbox: [1, 2, 3, 4] });
  });
});

describe("report passthrough", () => {
  it("export returns the raw body untouched", async () => {
    const csv = "experiment,scope\ne,total\n";
    const { api, calls } = client({ text: csv });
    const out = await api.exportExperiment("e", { format: "csv", dataset: "ds-0001" });
    expect(out).toBe(csv);
    expect(calls[0]?.url)
      .toBe("http://host:9/v1/experiments/e/export?format=csv&dataset=ds-0001");
  });

  it("evaluate posts the config and returns raw text", async () => {
    const { api, calls } = client({ text: "mAP 100.0" });
    const out = await api.evaluate("ds-0001", { format: "text", config: { map_iou: [0.5] } });
    expect(out).toBe("mAP 100.0");
    expect(calls[0]?.url).toBe("http://host:9/v1/datasets/ds-0001/evaluate?format=text");
    expect(calls[0]?.body).toEqual({ config: { map_iou: [0.5] } });
  });
});

describe("error handling", () => {
  it("unpacks the server's error envelope", async () => {
    const { api } = client({
      status: 409,
      body: {
        error: {
          status: 409,
          code: "blocking_diagnostics",
          message: "experiment fails validation",
          details: [{ severity: "error", code: "wrong_group_size", message: "…" }],
        },
      },
    });
    const err = await api.exportExperiment("e").catch((e: unknown) => e);
    expect(err).toBeInstanceOf(ApiError);
    const apiErr = err as ApiError;
    expect(apiErr.status).toBe(409);
    expect(apiErr.code).toBe("blocking_diagnostics");
    expect(apiErr.message).toMatch(/fails validation/);
    expect(Array.isArray(apiErr.details)).toBe(true);
  });

  it("copes with non-JSON error bodies", async () => {
    const { api } = client({ status: 502, text: "bad gateway" });
    const err = await api.health().catch((e: unknown) => e);
    expect(err).toBeInstanceOf(ApiError);
    expect((err as ApiError).status).toBe(502);
    expect((err as ApiError).code).toBe("unknown");
    expect((err as ApiError).message).toBe("bad gateway");
  });

  it("a failed mutation settles in a single request", async () => {
    const { api, calls } = client({
      status: 422,
      body: { error: { status: 422, code: "edit_rejected", message: "no" } },
    });
    await expect(api.deleteInstance("p-1")).rejects.toThrow("no");
    expect(calls).toHaveLength(1);
  });
});
