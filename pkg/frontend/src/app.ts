import { ApiClient, ApiError } from "./api.js";
import {
  activeImage,
  beginEdit,
  canExport,
  commitEdit,
  datasetLoaded,
  discardEdit,
  formatDiagnostic,
  initialState,
  instancesLoaded,
  select,
  setActiveImage,
  setTransform,
  sidebarCounts,
  toggleClass,
  toggleExcluded,
  visibleInstances,
  type PendingEdit,
  type ViewState,
} from "./state.js";
import {
  drawDishEllipse,
  drawInstances,
  fitTransform,
  hitTestHandle,
  hitTestInstance,
  hoverCrop,
  isValidEllipse,
  panBy,
  resizeEllipse,
  screenToWorld,
  zoomAt,
  type DrawContext,
  type EllipseHandle,
  type Point,
} from "./overlay.js";
import type { ClassName, Diagnostic, Ellipse, ReasonCounts } from "./types.js";

const COUNT_ROWS: (keyof ReasonCounts)[] = [
  "kept", "unsure", "below_score_threshold", "cross_class_duplicate",
  "outside_dish", "area_outlier", "user_deleted",
];

type DragMode =
  | { kind: "idle" }
  | { kind: "pan"; last: Point }
  | { kind: "handle"; handle: EllipseHandle; draft: Ellipse };

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  attrs: Record<string, string> = {},
  text?: string,
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  for (const [k, v] of Object.entries(attrs)) node.setAttribute(k, v);
  if (text !== undefined) node.textContent = text;
  return node;
}

export class App {
  private st: ViewState = initialState();
  private drag: DragMode = { kind: "idle" };
  private bitmap: ImageBitmap | null = null;
  private lastDiagnostics: Diagnostic[] = [];
  private statusLine = "";

  private readonly canvas: HTMLCanvasElement;
  private readonly magnifier: HTMLCanvasElement;
  private readonly sidebar: HTMLElement;

  constructor(private readonly root: HTMLElement, private readonly client: ApiClient) {
    this.sidebar = el("div", { class: "sidebar" });
    this.canvas = el("canvas", { width: "900", height: "700", class: "viewport" });
    this.magnifier = el("canvas", { width: "160", height: "160", class: "magnifier" });
    const stage = el("div", { class: "stage" });
    stage.append(this.canvas, this.magnifier);
    root.append(this.sidebar, stage);
    this.bindCanvas();
  }

  async start(): Promise<void> {
    const datasets = await this.client.listDatasets();
    const first = datasets[0];
    if (first) await this.loadDataset(first.id);
    this.render();
  }

  // ----------------------------------------------------------- data loading

  async loadDataset(id: string): Promise<void> {
    const detail = await this.client.getDataset(id);
    this.st = datasetLoaded(this.st, detail);
    await this.loadActiveImage(true);
  }

  /** Re-pull the authoritative view; every count shown comes from here. */
  private async refresh(): Promise<void> {
    if (!this.st.datasetId) return;
    const detail = await this.client.getDataset(this.st.datasetId);
    this.st = datasetLoaded(this.st, detail);
    await this.loadActiveImage(false);
  }

  private async loadActiveImage(refit: boolean): Promise<void> {
    const im = activeImage(this.st);
    const datasetId = this.st.datasetId;
    if (!im || !datasetId) return;
    const listing = await this.client.getInstances(im.id, {
      dataset: datasetId,
      includeExcluded: true,
    });
    this.st = instancesLoaded(this.st, im.id, listing.instances);
    if (refit) {
      this.st = setTransform(
        this.st, fitTransform(im.width, im.height, this.canvas.width, this.canvas.height));
      this.bitmap = null;
      if (im.has_pixels) {
        const buf = await this.client.getPixels(im.id, datasetId);
        this.bitmap = await createImageBitmap(new Blob([buf], { type: "image/png" }));
      }
    }
    this.render();
  }

  // -------------------------------------------------------------- mutations

  /**
   * Single funnel for every gesture that changes data: exactly one client
   * call, then commit with the server's sequence number and refetch. On any
   * failure the pending edit is dropped whole.
   */
  private async mutate(
    pending: PendingEdit,
    run: () => Promise<{ seq: number }>,
  ): Promise<void> {
    try {
      this.st = beginEdit(this.st, pending);
    } catch {
      return; // a gesture is already in flight; ignore the new one
    }
    this.render();
    try {
      const res = await run();
      this.st = commitEdit(this.st, res.seq);
      await this.refresh();
      this.statusLine = "";
    } catch (err) {
      this.st = discardEdit(this.st);
      this.statusLine = err instanceof ApiError
        ? `${err.code}: ${err.message}`
        : String(err);
    }
    this.render();
  }

  private runPipeline(): Promise<void> {
    const id = this.st.datasetId;
    if (!id) return Promise.resolve();
    return this.mutate({ kind: "postprocess", target: id },
      () => this.client.postprocess(id));
  }

  private instanceOp(op: "validate_unsure" | "invalidate_unsure" | "restore"): Promise<void> {
    const target = this.st.selectedId;
    if (target === null || !this.st.datasetId) return Promise.resolve();
    const dataset = this.st.datasetId;
    return this.mutate({ kind: "instance_op", target: String(target) },
      () => this.client.updateInstance(target, op, { dataset }));
  }

  private changeClass(label: ClassName): Promise<void> {
    const target = this.st.selectedId;
    if (target === null || !this.st.datasetId) return Promise.resolve();
    const dataset = this.st.datasetId;
    return this.mutate({ kind: "instance_op", target: String(target) },
      () => this.client.updateInstance(target, "change_class", { label, dataset }));
  }

  private deleteSelected(): Promise<void> {
    const target = this.st.selectedId;
    if (target === null || !this.st.datasetId) return Promise.resolve();
    const dataset = this.st.datasetId;
    return this.mutate({ kind: "delete", target: String(target) },
      () => this.client.deleteInstance(target, dataset));
  }

  private submitEllipse(draft: Ellipse): Promise<void> {
    const im = activeImage(this.st);
    if (!im || !this.st.datasetId) return Promise.resolve();
    if (!isValidEllipse(draft)) {
      this.statusLine = "invalid ellipse geometry, not submitted";
      this.render();
      return Promise.resolve();
    }
    const dataset = this.st.datasetId;
    return this.mutate({ kind: "ellipse", target: String(im.id) },
      () => this.client.putEllipse(im.id, draft, dataset));
  }

  private applyDilutions(experimentId: string, dilutions: Map<string, number>): Promise<void> {
    if (!this.st.datasetId || !experimentId) return Promise.resolve();
    const dataset = this.st.datasetId;
    const byDilution = new Map<number, (string | number)[]>();
    for (const [imageId, dilution] of dilutions) {
      const group = byDilution.get(dilution) ?? [];
      group.push(imageId);
      byDilution.set(dilution, group);
    }
    const triplicates = [...byDilution.entries()]
      .map(([dilution, image_ids]) => ({ dilution, image_ids }));
    return this.mutate({ kind: "dilutions", target: experimentId }, async () => {
      const res = await this.client.putDilutions(experimentId, triplicates, dataset);
      this.lastDiagnostics = res.diagnostics;
      return res;
    });
  }

  private async downloadExport(experimentId: string): Promise<void> {
    if (!this.st.datasetId || !canExport(this.lastDiagnostics)) return;
    try {
      const csv = await this.client.exportExperiment(experimentId, {
        format: "csv",
        dataset: this.st.datasetId,
      });
      const url = URL.createObjectURL(new Blob([csv], { type: "text/csv" }));
      const link = el("a", { href: url, download: `${experimentId}.csv` });
      link.click();
      URL.revokeObjectURL(url);
    } catch (err) {
      this.statusLine = err instanceof ApiError ? `${err.code}: ${err.message}` : String(err);
      this.render();
    }
  }

  // ------------------------------------------------------------ canvas input

  private bindCanvas(): void {
    this.canvas.addEventListener("wheel", (ev) => {
      ev.preventDefault();
      const anchor = this.eventPoint(ev);
      const factor = ev.deltaY < 0 ? 1.15 : 1 / 1.15;
      this.st = setTransform(this.st, zoomAt(this.st.transform, anchor, factor));
      this.render();
    });

    this.canvas.addEventListener("mousedown", (ev) => {
      const screen = this.eventPoint(ev);
      const im = activeImage(this.st);
      if (im?.dish_ellipse) {
        const handle = hitTestHandle(im.dish_ellipse, this.st.transform, screen);
        if (handle) {
          this.drag = { kind: "handle", handle, draft: { ...im.dish_ellipse } };
          return;
        }
      }
      this.drag = { kind: "pan", last: screen };
    });

    this.canvas.addEventListener("mousemove", (ev) => {
      const screen = this.eventPoint(ev);
      if (this.drag.kind === "pan") {
        this.st = setTransform(this.st,
          panBy(this.st.transform, screen.x - this.drag.last.x, screen.y - this.drag.last.y));
        this.drag = { kind: "pan", last: screen };
      } else if (this.drag.kind === "handle") {
        const world = screenToWorld(this.st.transform, screen);
        this.drag = {
          ...this.drag,
          draft: resizeEllipse(this.drag.draft, this.drag.handle.kind, world),
        };
      }
      this.render();
      this.renderMagnifier(screen);
    });

    this.canvas.addEventListener("mouseup", (ev) => {
      const wasDrag = this.drag;
      this.drag = { kind: "idle" };
      if (wasDrag.kind === "handle") {
        void this.submitEllipse(wasDrag.draft);
        return;
      }
      const world = screenToWorld(this.st.transform, this.eventPoint(ev));
      const hit = hitTestInstance(visibleInstances(this.st), world);
      this.st = select(this.st, hit ? hit.id : null);
      this.render();
    });

    this.canvas.addEventListener("mouseleave", () => {
      this.drag = { kind: "idle" };
      const ctx = this.magnifier.getContext("2d");
      ctx?.clearRect(0, 0, this.magnifier.width, this.magnifier.height);
    });
  }

  private eventPoint(ev: MouseEvent): Point {
    const rect = this.canvas.getBoundingClientRect();
    return { x: ev.clientX - rect.left, y: ev.clientY - rect.top };
  }

  // ---------------------------------------------------------------- render

  private render(): void {
    this.renderSidebar();
    this.renderCanvas();
  }

  private renderCanvas(): void {
    const ctx = this.canvas.getContext("2d");
    if (!ctx) return;
    ctx.clearRect(0, 0, this.canvas.width, this.canvas.height);
    ctx.fillStyle = "#101418";
    ctx.fillRect(0, 0, this.canvas.width, this.canvas.height);
    const im = activeImage(this.st);
    if (!im) return;
    const t = this.st.transform;
    if (this.bitmap) {
      ctx.save();
      ctx.setTransform(t.scale, 0, 0, t.scale, t.tx, t.ty);
      ctx.drawImage(this.bitmap, 0, 0);
      ctx.restore();
    } else {
      ctx.strokeStyle = "#2a3038";
      ctx.strokeRect(t.tx, t.ty, im.width * t.scale, im.height * t.scale);
    }
    const dctx = ctx as unknown as DrawContext;
    const ellipse = this.drag.kind === "handle" ? this.drag.draft : im.dish_ellipse;
    if (ellipse) drawDishEllipse(dctx, t, ellipse, true);
    drawInstances(dctx, t, visibleInstances(this.st), this.st.selectedId);
  }

  private renderMagnifier(screen: Point): void {
    const ctx = this.magnifier.getContext("2d");
    const im = activeImage(this.st);
    if (!ctx || !im || !this.bitmap) return;
    const world = screenToWorld(this.st.transform, screen);
    const crop = hoverCrop(im.width, im.height, world, 4,
      this.magnifier.width, this.magnifier.height);
    ctx.clearRect(0, 0, this.magnifier.width, this.magnifier.height);
    ctx.drawImage(this.bitmap, crop.sx, crop.sy, crop.sw, crop.sh,
      0, 0, this.magnifier.width, this.magnifier.height);
  }

  private renderSidebar(): void {
    this.sidebar.replaceChildren();
    this.sidebar.append(el("h2", {}, this.st.datasetId ?? "no dataset"));

    const imageList = el("div", { class: "images" });
    for (const im of this.st.images) {
      const btn = el("button", { type: "button" }, String(im.id));
      if (im.id === this.st.activeImageId) btn.setAttribute("disabled", "");
      btn.addEventListener("click", () => {
        this.st = setActiveImage(this.st, im.id);
        void this.loadActiveImage(true);
      });
      imageList.append(btn);
    }
    this.sidebar.append(imageList);

    const counts = sidebarCounts(this.st);
    const countsBox = el("dl", { class: "counts" });
    for (const key of COUNT_ROWS) {
      countsBox.append(el("dt", {}, key));
      countsBox.append(el("dd", {}, counts ? String(counts[key]) : "-"));
    }
    this.sidebar.append(countsBox);

    for (const label of ["BVG+", "BVG-"] as ClassName[]) {
      const row = el("label", {});
      const box = el("input", { type: "checkbox" });
      box.checked = this.st.classVisibility[label];
      box.addEventListener("change", () => {
        this.st = toggleClass(this.st, label);
        this.render();
      });
      row.append(box, document.createTextNode(` show ${label}`));
      this.sidebar.append(row);
    }
    const exRow = el("label", {});
    const exBox = el("input", { type: "checkbox" });
    exBox.checked = this.st.showExcluded;
    exBox.addEventListener("change", () => {
      this.st = toggleExcluded(this.st);
      this.render();
    });
    exRow.append(exBox, document.createTextNode(" show excluded"));
    this.sidebar.append(exRow);

    const pipelineBtn = el("button", { type: "button" }, "run pipeline");
    if (this.st.pendingEdit) pipelineBtn.setAttribute("disabled", "");
    pipelineBtn.addEventListener("click", () => void this.runPipeline());
    this.sidebar.append(pipelineBtn);

    const selected = this.st.instances.find((i) => i.id === this.st.selectedId);
    if (selected) {
      const box = el("div", { class: "selection" });
      box.append(el("h3", {}, `${selected.id} (${selected.label})`));
      const actions: [string, () => Promise<void>][] = [];
      if (selected.unsure) {
        actions.push(["confirm call", () => this.instanceOp("validate_unsure")]);
        actions.push(["reject call", () => this.instanceOp("invalidate_unsure")]);
      }
      if (selected.excluded !== null && selected.excluded !== "user_deleted") {
        actions.push(["restore", () => this.instanceOp("restore")]);
      }
      const other: ClassName = selected.label === "BVG+" ? "BVG-" : "BVG+";
      actions.push([`mark ${other}`, () => this.changeClass(other)]);
      actions.push(["delete", () => this.deleteSelected()]);
      for (const [title, action] of actions) {
        const btn = el("button", { type: "button" }, title);
        if (this.st.pendingEdit) btn.setAttribute("disabled", "");
        btn.addEventListener("click", () => void action());
        box.append(btn);
      }
      this.sidebar.append(box);
    }

    this.sidebar.append(this.buildExperimentPanel());
    if (this.statusLine) {
      this.sidebar.append(el("p", { class: "status" }, this.statusLine));
    }
  }

  private buildExperimentPanel(): HTMLElement {
    const panel = el("div", { class: "experiment" });
    panel.append(el("h3", {}, "experiment"));
    const idInput = el("input", { type: "text", placeholder: "experiment id" });
    panel.append(idInput);
    const dilutionInputs = new Map<string, HTMLInputElement>();
    for (const im of this.st.images) {
      const row = el("label", {}, `${im.id} dilution `);
      const input = el("input", { type: "number", step: "any", min: "0" });
      dilutionInputs.set(String(im.id), input);
      row.append(input);
      panel.append(row);
    }
    const applyBtn = el("button", { type: "button" }, "set dilutions");
    applyBtn.addEventListener("click", () => {
      const dilutions = new Map<string, number>();
      for (const [imageId, input] of dilutionInputs) {
        const v = Number(input.value);
        if (input.value !== "" && Number.isFinite(v) && v > 0) dilutions.set(imageId, v);
      }
      void this.applyDilutions(idInput.value.trim(), dilutions);
    });
    panel.append(applyBtn);

    for (const d of this.lastDiagnostics) {
      panel.append(el("p", { class: `diag-${d.severity}` }, formatDiagnostic(d)));
    }
    const exportBtn = el("button", { type: "button" }, "export csv");
    // blocking validation errors keep the export path closed
    if (!canExport(this.lastDiagnostics)) exportBtn.setAttribute("disabled", "");
    exportBtn.addEventListener("click", () => void this.downloadExport(idInput.value.trim()));
    panel.append(exportBtn);
    return panel;
  }
}

export function bootstrap(): void {
  const root = document.getElementById("app");
  if (!root) return;
  const client = new ApiClient(window.location.origin);
  const app = new App(root, client);
  void app.start();
}

if (typeof document !== "undefined" && typeof window !== "undefined") {
  if (document.readyState === "loading") {
    window.addEventListener("DOMContentLoaded", bootstrap);
  } else {
    bootstrap();
  }
}
