import type {
  ClassName,
  DatasetDetail,
  Diagnostic,
  ImageView,
  InstanceView,
  ReasonCounts,
} from "./types.js";
import type { ViewTransform } from "./overlay.js";
import { identityTransform } from "./overlay.js";

// One in-flight edit at a time. A pending edit is either committed with the
// server's response or discarded whole; there is no local-merge path.
export interface PendingEdit {
  kind: "instance_op" | "create" | "delete" | "ellipse" | "dilutions" | "postprocess";
  target: string | null;
}

export interface ViewState {
  datasetId: string | null;
  serverSeq: number;
  /** Authoritative tallies, copied verbatim from the last server response. */
  serverCounts: ReasonCounts | null;
  images: ImageView[];
  activeImageId: string | number | null;
  /** Instances of the active image, excluded ones included. */
  instances: InstanceView[];
  classVisibility: Record<ClassName, boolean>;
  showExcluded: boolean;
  selectedId: string | number | null;
  pendingEdit: PendingEdit | null;
  transform: ViewTransform;
}

export function initialState(): ViewState {
  return {
    datasetId: null,
    serverSeq: -1,
    serverCounts: null,
    images: [],
    activeImageId: null,
    instances: [],
    classVisibility: { "BVG+": true, "BVG-": true },
    showExcluded: false,
    selectedId: null,
    pendingEdit: null,
    transform: identityTransform(),
  };
}

export function datasetLoaded(state: ViewState, detail: DatasetDetail): ViewState {
  const first = detail.images[0];
  const activeStillThere = detail.images.some((im) => im.id === state.activeImageId);
  return {
    ...state,
    datasetId: detail.id,
    serverSeq: detail.seq,
    serverCounts: { ...detail.counts },
    images: detail.images,
    activeImageId: activeStillThere ? state.activeImageId : first ? first.id : null,
  };
}

export function instancesLoaded(
  state: ViewState,
  imageId: string | number,
  instances: InstanceView[],
): ViewState {
  if (imageId !== state.activeImageId) return state; // stale fetch, drop it
  const selectionAlive = instances.some((i) => i.id === state.selectedId);
  return {
    ...state,
    instances,
    selectedId: selectionAlive ? state.selectedId : null,
  };
}

export function setActiveImage(state: ViewState, imageId: string | number): ViewState {
  if (!state.images.some((im) => im.id === imageId)) {
    throw new Error(`unknown image ${String(imageId)}`);
  }
  if (imageId === state.activeImageId) return state;
  return {
    ...state,
    activeImageId: imageId,
    instances: [],
    selectedId: null,
    transform: identityTransform(),
  };
}

export function toggleClass(state: ViewState, label: ClassName): ViewState {
  return {
    ...state,
    classVisibility: { ...state.classVisibility, [label]: !state.classVisibility[label] },
  };
}

export function toggleExcluded(state: ViewState): ViewState {
  return { ...state, showExcluded: !state.showExcluded };
}

export function select(state: ViewState, id: string | number | null): ViewState {
  if (id !== null && !state.instances.some((i) => i.id === id)) {
    return { ...state, selectedId: null };
  }
  return { ...state, selectedId: id };
}

export function setTransform(state: ViewState, transform: ViewTransform): ViewState {
  return { ...state, transform };
}

/** Marks a gesture in flight. Refuses to stack a second one. */
export function beginEdit(state: ViewState, edit: PendingEdit): ViewState {
  if (state.pendingEdit !== null) {
    throw new Error(`edit already pending (${state.pendingEdit.kind})`);
  }
  return { ...state, pendingEdit: edit };
}

/**
 * Folds the server's post-edit truth into the view. Counts come from the
 * response; nothing is recomputed locally.
 */
export function commitEdit(
  state: ViewState,
  serverSeq: number,
  counts?: ReasonCounts,
): ViewState {
  if (state.pendingEdit === null) throw new Error("no edit pending");
  if (serverSeq <= state.serverSeq) {
    throw new Error(`stale seq ${serverSeq} (have ${state.serverSeq})`);
  }
  return {
    ...state,
    pendingEdit: null,
    serverSeq,
    serverCounts: counts ? { ...counts } : state.serverCounts,
  };
}

export function discardEdit(state: ViewState): ViewState {
  if (state.pendingEdit === null) return state;
  return { ...state, pendingEdit: null };
}

export function visibleInstances(state: ViewState): InstanceView[] {
  return state.instances.filter((inst) => {
    if (!state.classVisibility[inst.label]) return false;
    if (inst.excluded !== null && !state.showExcluded) return false;
    return true;
  });
}

/**
 * What the sidebar shows. Always the server's own numbers; the local instance
 * list is never summed, so a half-loaded view cannot invent a count.
 */
export function sidebarCounts(state: ViewState): ReasonCounts | null {
  return state.serverCounts;
}

export function activeImage(state: ViewState): ImageView | null {
  return state.images.find((im) => im.id === state.activeImageId) ?? null;
}

/** Export stays enabled only while no blocking diagnostic is present. */
export function canExport(diagnostics: Diagnostic[]): boolean {
  return diagnostics.every((d) => d.severity !== "error");
}

export function formatDiagnostic(d: Diagnostic): string {
  return `${d.severity}[${d.code}]: ${d.message}`;
}
