import type {
  DatasetDetail,
  DatasetSummary,
  DilutionsResult,
  Ellipse,
  EllipseUpdateResult,
  ErrorEnvelope,
  EditEventView,
  HealthView,
  InstanceDeleteResult,
  InstanceListing,
  InstanceMutationResult,
  InstanceOp,
  JobStarted,
  JobStatus,
  PostprocessConfig,
  PostprocessResult,
  Triplicate,
  UploadResult,
  BBox,
  ClassName,
} from "./types.js";

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

/** Raised for any non-2xx response; carries the server's error envelope. */
export class ApiError extends Error {
  readonly status: number;
  readonly code: string;
  readonly details: unknown;

  constructor(status: number, code: string, message: string, details?: unknown) {
    super(message);
    this.name = "ApiError";
    this.status = status;
    this.code = code;
    this.details = details;
  }
}

interface RequestOptions {
  body?: unknown;
  query?: Record<string, string | number | boolean | undefined>;
}

/**
 * Thin client over the counting service. Every mutating endpoint has exactly
 * one method here; UI gestures must route through these so each gesture maps
 * to one server-side edit event.
 */
export class ApiClient {
  private readonly baseUrl: string;
  private readonly fetchImpl: FetchLike;

  constructor(baseUrl: string, fetchImpl?: FetchLike) {
    this.baseUrl = baseUrl.replace(/\/+$/, "");
    const impl = fetchImpl ?? (globalThis.fetch as FetchLike | undefined);
    if (!impl) throw new Error("no fetch implementation available");
    // bind so window.fetch keeps its receiver when called through us
    this.fetchImpl = fetchImpl ?? ((url, init) => impl(url, init));
  }

  private url(path: string, query?: RequestOptions["query"]): string {
    const params = new URLSearchParams();
    for (const [key, value] of Object.entries(query ?? {})) {
      if (value !== undefined) params.set(key, String(value));
    }
    const qs = params.toString();
    return this.baseUrl + path + (qs ? `?${qs}` : "");
  }

  private async send(method: string, path: string, opts: RequestOptions = {}): Promise<Response> {
    const init: RequestInit = { method };
    if (opts.body !== undefined) {
      init.body = JSON.stringify(opts.body);
      init.headers = { "content-type": "application/json" };
    }
    const res = await this.fetchImpl(this.url(path, opts.query), init);
    if (!res.ok) throw await this.toError(res);
    return res;
  }

  private async toError(res: Response): Promise<ApiError> {
    const text = await res.text();
    try {
      const envelope = JSON.parse(text) as ErrorEnvelope;
      const e = envelope.error;
      return new ApiError(e.status ?? res.status, e.code ?? "unknown", e.message, e.details);
    } catch {
      return new ApiError(res.status, "unknown", text || res.statusText);
    }
  }

  private async json<T>(method: string, path: string, opts: RequestOptions = {}): Promise<T> {
    const res = await this.send(method, path, opts);
    return (await res.json()) as T;
  }

  // ------------------------------------------------------------ read side

  health(): Promise<HealthView> {
    return this.json("GET", "/v1/health");
  }

  async listDatasets(): Promise<DatasetSummary[]> {
    const body = await this.json<{ datasets: DatasetSummary[] }>("GET", "/v1/datasets");
    return body.datasets;
  }

  getDataset(datasetId: string): Promise<DatasetDetail> {
    return this.json("GET", `/v1/datasets/${encodeURIComponent(datasetId)}`);
  }

  async getEvents(datasetId: string): Promise<EditEventView[]> {
    const body = await this.json<{ events: EditEventView[] }>(
      "GET", `/v1/datasets/${encodeURIComponent(datasetId)}/events`);
    return body.events;
  }

  getInstances(
    imageId: string | number,
    opts: { dataset?: string; includeExcluded?: boolean } = {},
  ): Promise<InstanceListing> {
    return this.json("GET", `/v1/images/${encodeURIComponent(String(imageId))}/instances`, {
      query: { dataset: opts.dataset, include_excluded: opts.includeExcluded },
    });
  }

  async getPixels(imageId: string | number, dataset?: string): Promise<ArrayBuffer> {
    const res = await this.send("GET",
      `/v1/images/${encodeURIComponent(String(imageId))}/pixels`, { query: { dataset } });
    return res.arrayBuffer();
  }

  getJob(jobId: string): Promise<JobStatus> {
    return this.json("GET", `/v1/jobs/${encodeURIComponent(jobId)}`);
  }

  /** Raw report body; format "csv" | "json" | "text". */
  async exportExperiment(
    experimentId: string,
    opts: { format?: string; dataset?: string; confidenceLevel?: number } = {},
  ): Promise<string> {
    const res = await this.send("GET",
      `/v1/experiments/${encodeURIComponent(experimentId)}/export`, {
        query: {
          format: opts.format,
          dataset: opts.dataset,
          confidence_level: opts.confidenceLevel,
        },
      });
    return res.text();
  }

  /** Raw report body; format "json" | "text". */
  async evaluate(
    datasetId: string,
    opts: { format?: string; config?: Record<string, unknown>; raters?: unknown } = {},
  ): Promise<string> {
    const body: Record<string, unknown> = {};
    if (opts.config) body.config = opts.config;
    if (opts.raters) body.raters = opts.raters;
    const res = await this.send("POST",
      `/v1/datasets/${encodeURIComponent(datasetId)}/evaluate`,
      { body, query: { format: opts.format } });
    return res.text();
  }

  // -------------------------------------------------------- mutating side

  uploadDataset(doc: Record<string, unknown>): Promise<UploadResult> {
    return this.json("POST", "/v1/datasets", { body: doc });
  }

  postprocess(
    datasetId: string,
    opts: { config?: PostprocessConfig; imageIds?: (string | number)[] } = {},
  ): Promise<PostprocessResult> {
    const body: Record<string, unknown> = {};
    if (opts.config) body.config = opts.config;
    if (opts.imageIds) body.image_ids = opts.imageIds;
    return this.json("POST",
      `/v1/datasets/${encodeURIComponent(datasetId)}/postprocess`, { body });
  }

  postprocessAsync(
    datasetId: string,
    opts: { config?: PostprocessConfig; imageIds?: (string | number)[] } = {},
  ): Promise<JobStarted> {
    const body: Record<string, unknown> = {};
    if (opts.config) body.config = opts.config;
    if (opts.imageIds) body.image_ids = opts.imageIds;
    return this.json("POST",
      `/v1/datasets/${encodeURIComponent(datasetId)}/postprocess`,
      { body, query: { wait: false } });
  }

  putEllipse(
    imageId: string | number,
    ellipse: Ellipse,
    dataset?: string,
  ): Promise<EllipseUpdateResult> {
    return this.json("PUT", `/v1/images/${encodeURIComponent(String(imageId))}/ellipse`, {
      body: ellipse,
      query: { dataset },
    });
  }

  createInstance(
    imageId: string | number,
    inst: { label: ClassName; bbox: BBox; id?: string; segmentation?: unknown },
    dataset?: string,
  ): Promise<InstanceMutationResult> {
    return this.json("POST", `/v1/images/${encodeURIComponent(String(imageId))}/instances`, {
      body: inst,
      query: { dataset },
    });
  }

  updateInstance(
    instanceId: string | number,
    op: InstanceOp,
    opts: { label?: ClassName; dataset?: string } = {},
  ): Promise<InstanceMutationResult> {
    const body: Record<string, unknown> = { op };
    if (op === "change_class") body.label = opts.label;
    return this.json("PUT", `/v1/instances/${encodeURIComponent(String(instanceId))}`, {
      body,
      query: { dataset: opts.dataset },
    });
  }

  deleteInstance(instanceId: string | number, dataset?: string): Promise<InstanceDeleteResult> {
    return this.json("DELETE", `/v1/instances/${encodeURIComponent(String(instanceId))}`, {
      query: { dataset },
    });
  }

  putDilutions(
    experimentId: string,
    triplicates: Triplicate[],
    dataset?: string,
  ): Promise<DilutionsResult> {
    return this.json("PUT", `/v1/experiments/${encodeURIComponent(experimentId)}/dilutions`, {
      body: { triplicates },
      query: { dataset },
    });
  }
}
