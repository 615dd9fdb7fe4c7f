import type { ClassName, Ellipse, InstanceView } from "./types.js";

// ---------------------------------------------------------------- transform

/** screen = world * scale + (tx, ty) */
export interface ViewTransform {
  scale: number;
  tx: number;
  ty: number;
}

export interface Point {
  x: number;
  y: number;
}

export const MIN_SCALE = 0.05;
export const MAX_SCALE = 40;

export function identityTransform(): ViewTransform {
  return { scale: 1, tx: 0, ty: 0 };
}

export function worldToScreen(t: ViewTransform, p: Point): Point {
  return { x: p.x * t.scale + t.tx, y: p.y * t.scale + t.ty };
}

export function screenToWorld(t: ViewTransform, p: Point): Point {
  return { x: (p.x - t.tx) / t.scale, y: (p.y - t.ty) / t.scale };
}

/** Rescale about a fixed screen point, so the pixel under the cursor stays put. */
export function zoomAt(t: ViewTransform, anchor: Point, factor: number): ViewTransform {
  const scale = Math.min(MAX_SCALE, Math.max(MIN_SCALE, t.scale * factor));
  const k = scale / t.scale;
  return {
    scale,
    tx: anchor.x - (anchor.x - t.tx) * k,
    ty: anchor.y - (anchor.y - t.ty) * k,
  };
}

export function panBy(t: ViewTransform, dx: number, dy: number): ViewTransform {
  return { scale: t.scale, tx: t.tx + dx, ty: t.ty + dy };
}

/** Center the image in a viewport with a small margin. */
export function fitTransform(
  imageW: number,
  imageH: number,
  viewW: number,
  viewH: number,
  margin = 16,
): ViewTransform {
  const usableW = Math.max(1, viewW - 2 * margin);
  const usableH = Math.max(1, viewH - 2 * margin);
  const scale = Math.min(usableW / imageW, usableH / imageH);
  return {
    scale,
    tx: (viewW - imageW * scale) / 2,
    ty: (viewH - imageH * scale) / 2,
  };
}

// ------------------------------------------------------------------ styling

export interface InstanceStyle {
  stroke: string;
  lineWidth: number;
  dash: number[];
  opacity: number;
  /** Short marker next to the box, e.g. "? BVG-" for an unsure call. */
  badge: string | null;
  /** Longer caption, e.g. the exclusion reason. */
  label: string | null;
}

export const CLASS_COLORS: Record<ClassName, string> = {
  "BVG+": "#e4572e",
  "BVG-": "#17bebb",
};

export function instanceStyle(inst: InstanceView, selected = false): InstanceStyle {
  const style: InstanceStyle = {
    stroke: CLASS_COLORS[inst.label],
    lineWidth: selected ? 3 : 1.5,
    dash: [],
    opacity: 1,
    badge: null,
    label: null,
  };
  if (inst.excluded !== null) {
    style.opacity = 0.35;
    style.dash = [4, 3];
    style.label = inst.excluded;
  }
  if (inst.unsure) {
    style.badge = inst.alt_label ? `? ${inst.alt_label}` : "?";
  }
  if (inst.origin === "user") style.dash = style.dash.length ? style.dash : [1, 2];
  return style;
}

// ------------------------------------------------------------------ ellipse

export type HandleKind = "major+" | "major-" | "minor+" | "minor-";

export interface EllipseHandle extends Point {
  kind: HandleKind;
}

/** The four resize handles sit on the axis endpoints, in world coordinates. */
export function ellipseHandles(e: Ellipse): EllipseHandle[] {
  const cos = Math.cos(e.theta);
  const sin = Math.sin(e.theta);
  return [
    { kind: "major+", x: e.cx + e.a * cos, y: e.cy + e.a * sin },
    { kind: "major-", x: e.cx - e.a * cos, y: e.cy - e.a * sin },
    { kind: "minor+", x: e.cx - e.b * sin, y: e.cy + e.b * cos },
    { kind: "minor-", x: e.cx + e.b * sin, y: e.cy - e.b * cos },
  ];
}

/**
 * Drag a handle to a new world point: the grabbed semi-axis becomes the
 * projection of the drag onto that axis. Clamped away from zero so a drag
 * across the center cannot produce degenerate geometry.
 */
export function resizeEllipse(e: Ellipse, handle: HandleKind, to: Point): Ellipse {
  const cos = Math.cos(e.theta);
  const sin = Math.sin(e.theta);
  const dx = to.x - e.cx;
  const dy = to.y - e.cy;
  const minAxis = 1e-3;
  if (handle === "major+" || handle === "major-") {
    const a = Math.max(minAxis, Math.abs(dx * cos + dy * sin));
    return { ...e, a };
  }
  const b = Math.max(minAxis, Math.abs(-dx * sin + dy * cos));
  return { ...e, b };
}

export function moveEllipseTo(e: Ellipse, center: Point): Ellipse {
  return { ...e, cx: center.x, cy: center.y };
}

export function scaleEllipse(e: Ellipse, factor: number): Ellipse {
  return { ...e, a: e.a * factor, b: e.b * factor };
}

/** Gate before submitting to the server; degenerate shapes never leave the client. */
export function isValidEllipse(e: Ellipse): boolean {
  const values = [e.cx, e.cy, e.a, e.b, e.theta];
  if (!values.every(Number.isFinite)) return false;
  return e.a > 0 && e.b > 0;
}

export function pointInEllipse(e: Ellipse, p: Point): boolean {
  const cos = Math.cos(e.theta);
  const sin = Math.sin(e.theta);
  const dx = p.x - e.cx;
  const dy = p.y - e.cy;
  const u = (dx * cos + dy * sin) / e.a;
  const v = (-dx * sin + dy * cos) / e.b;
  return u * u + v * v <= 1;
}

export function hitTestHandle(
  e: Ellipse,
  t: ViewTransform,
  screen: Point,
  radiusPx = 8,
): EllipseHandle | null {
  for (const handle of ellipseHandles(e)) {
    const s = worldToScreen(t, handle);
    const dx = s.x - screen.x;
    const dy = s.y - screen.y;
    if (dx * dx + dy * dy <= radiusPx * radiusPx) return handle;
  }
  return null;
}

// ----------------------------------------------------------------- hit test

function bboxContains(inst: InstanceView, p: Point): boolean {
  const [x, y, w, h] = inst.bbox;
  return p.x >= x && p.x <= x + w && p.y >= y && p.y <= y + h;
}

function bboxArea(inst: InstanceView): number {
  return inst.bbox[2] * inst.bbox[3];
}

/** Smallest box under the cursor wins, so nested colonies stay reachable. */
export function hitTestInstance(instances: InstanceView[], world: Point): InstanceView | null {
  let best: InstanceView | null = null;
  for (const inst of instances) {
    if (!bboxContains(inst, world)) continue;
    if (best === null || bboxArea(inst) < bboxArea(best)) best = inst;
  }
  return best;
}

// ----------------------------------------------------------------- hover zoom

export interface CropRect {
  sx: number;
  sy: number;
  sw: number;
  sh: number;
}

/**
 * Source rect for the magnifier: a (outW/zoom x outH/zoom) window centred on
 * the cursor, shifted back inside the image when the cursor is near an edge.
 */
export function hoverCrop(
  imageW: number,
  imageH: number,
  center: Point,
  zoom: number,
  outW: number,
  outH: number,
): CropRect {
  const sw = Math.min(imageW, outW / zoom);
  const sh = Math.min(imageH, outH / zoom);
  let sx = center.x - sw / 2;
  let sy = center.y - sh / 2;
  sx = Math.max(0, Math.min(imageW - sw, sx));
  sy = Math.max(0, Math.min(imageH - sh, sy));
  return { sx, sy, sw, sh };
}

// ------------------------------------------------------------------ drawing

/** The slice of CanvasRenderingContext2D the renderer needs; keeps draw code testable. */
export interface DrawContext {
  strokeStyle: string | CanvasGradient | CanvasPattern;
  fillStyle: string | CanvasGradient | CanvasPattern;
  lineWidth: number;
  globalAlpha: number;
  font: string;
  setLineDash(segments: number[]): void;
  beginPath(): void;
  rect(x: number, y: number, w: number, h: number): void;
  ellipse(
    x: number, y: number, rx: number, ry: number,
    rotation: number, start: number, end: number,
  ): void;
  arc(x: number, y: number, r: number, start: number, end: number): void;
  stroke(): void;
  fill(): void;
  fillText(text: string, x: number, y: number): void;
  save(): void;
  restore(): void;
}

export function drawInstances(
  ctx: DrawContext,
  t: ViewTransform,
  instances: InstanceView[],
  selectedId: string | number | null,
): void {
  for (const inst of instances) {
    const style = instanceStyle(inst, inst.id === selectedId);
    const [x, y, w, h] = inst.bbox;
    const p = worldToScreen(t, { x, y });
    ctx.save();
    ctx.globalAlpha = style.opacity;
    ctx.strokeStyle = style.stroke;
    ctx.lineWidth = style.lineWidth;
    ctx.setLineDash(style.dash);
    ctx.beginPath();
    ctx.rect(p.x, p.y, w * t.scale, h * t.scale);
    ctx.stroke();
    ctx.setLineDash([]);
    ctx.fillStyle = style.stroke;
    ctx.font = "11px sans-serif";
    if (style.badge) ctx.fillText(style.badge, p.x, p.y - 4);
    if (style.label) ctx.fillText(style.label, p.x, p.y + h * t.scale + 12);
    ctx.restore();
  }
}

export function drawDishEllipse(
  ctx: DrawContext,
  t: ViewTransform,
  e: Ellipse,
  withHandles: boolean,
): void {
  const c = worldToScreen(t, { x: e.cx, y: e.cy });
  ctx.save();
  ctx.strokeStyle = "#f2c14e";
  ctx.lineWidth = 1.5;
  ctx.setLineDash([8, 5]);
  ctx.beginPath();
  ctx.ellipse(c.x, c.y, e.a * t.scale, e.b * t.scale, e.theta, 0, Math.PI * 2);
  ctx.stroke();
  ctx.setLineDash([]);
  if (withHandles) {
    ctx.fillStyle = "#f2c14e";
    for (const handle of ellipseHandles(e)) {
      const s = worldToScreen(t, handle);
      ctx.beginPath();
      ctx.arc(s.x, s.y, 5, 0, Math.PI * 2);
      ctx.fill();
    }
  }
  ctx.restore();
}
