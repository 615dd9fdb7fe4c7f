import { describe, expect, it } from "vitest";
import {
  beginEdit,
  canExport,
  commitEdit,
  datasetLoaded,
  discardEdit,
  initialState,
  instancesLoaded,
  select,
  setActiveImage,
  sidebarCounts,
  toggleClass,
  toggleExcluded,
  visibleInstances,
} from "../src/state.js";
import type {
  DatasetDetail,
  ImageView,
  InstanceView,
  ReasonCounts,
} from "../src/types.js";

function counts(overrides: Partial<ReasonCounts> = {}): ReasonCounts {
  return {
    kept: 0,
    unsure: 0,
    below_score_threshold: 0,
    cross_class_duplicate: 0,
    outside_dish: 0,
    area_outlier: 0,
    user_deleted: 0,
    ...overrides,
  };
}

function image(id: string): ImageView {
  return {
    id,
    width: 512,
    height: 512,
    split: "unsplit",
    ellipse_source: "fitted",
    dish_ellipse: { cx: 256, cy: 256, a: 240, b: 240, theta: 0 },
    has_pixels: false,
  };
}

function detail(overrides: Partial<DatasetDetail> = {}): DatasetDetail {
  return {
    id: "ds-0001",
    name: null,
    seq: 0,
    images: [image("dish-a"), image("dish-b")],
    counts: counts({ kept: 12, unsure: 2 }),
    experiments: [],
    last_pipeline_config: null,
    ...overrides,
  };
}

function inst(id: string, overrides: Partial<InstanceView> = {}): InstanceView {
  return {
    id,
    image_id: "dish-a",
    label: "BVG+",
    score: 0.9,
    bbox: [10, 10, 20, 20],
    area: 314,
    origin: "model",
    unsure: false,
    alt_label: null,
    excluded: null,
    has_mask: false,
    ...overrides,
  };
}

describe("dataset loading", () => {
  it("adopts server counts and picks the first image", () => {
    const st = datasetLoaded(initialState(), detail());
    expect(st.datasetId).toBe("ds-0001");
    expect(st.activeImageId).toBe("dish-a");
    expect(sidebarCounts(st)).toEqual(counts({ kept: 12, unsure: 2 }));
  });

  it("keeps the active image across a refresh when it still exists", () => {
    let st = datasetLoaded(initialState(), detail());
    st = setActiveImage(st, "dish-b");
    st = datasetLoaded(st, detail({ seq: 3 }));
    expect(st.activeImageId).toBe("dish-b");
    expect(st.serverSeq).toBe(3);
  });

  it("drops stale instance responses for a different image", () => {
    let st = datasetLoaded(initialState(), detail());
    st = instancesLoaded(st, "dish-b", [inst("p-1")]);
    expect(st.instances).toEqual([]);
  });

  it("clears selection when the selected instance disappears", () => {
    let st = datasetLoaded(initialState(), detail());
    st = instancesLoaded(st, "dish-a", [inst("p-1")]);
    st = select(st, "p-1");
    st = instancesLoaded(st, "dish-a", [inst("p-2")]);
    expect(st.selectedId).toBeNull();
  });
});

describe("sidebar counts", () => {
  it("returns the server tally verbatim, never a local sum", () => {
    // Local list on purpose disagrees with the server: 1 instance loaded,
    // server says 12 kept. The sidebar must show 12.
    let st = datasetLoaded(initialState(), detail());
    st = instancesLoaded(st, "dish-a", [inst("p-1")]);
    expect(sidebarCounts(st)?.kept).toBe(12);
  });

  it("is null before any server response", () => {
    expect(sidebarCounts(initialState())).toBeNull();
  });
});

describe("pending edits", () => {
  it("commits only with a fresh server sequence number", () => {
    let st = datasetLoaded(initialState(), detail({ seq: 4 }));
    st = beginEdit(st, { kind: "instance_op", target: "p-1" });
    expect(() => commitEdit(st, 4)).toThrow(/stale/);
    const done = commitEdit(st, 5, counts({ kept: 11 }));
    expect(done.pendingEdit).toBeNull();
    expect(done.serverSeq).toBe(5);
    expect(sidebarCounts(done)?.kept).toBe(11);
  });

  it("refuses to stack a second gesture", () => {
    let st = beginEdit(initialState(), { kind: "ellipse", target: "dish-a" });
    expect(() => beginEdit(st, { kind: "delete", target: "p-1" })).toThrow(/pending/);
  });

  it("cannot commit without a pending edit", () => {
    expect(() => commitEdit(initialState(), 1)).toThrow(/no edit pending/);
  });

  it("discard drops the edit and leaves counts untouched", () => {
    let st = datasetLoaded(initialState(), detail());
    st = beginEdit(st, { kind: "delete", target: "p-9" });
    st = discardEdit(st);
    expect(st.pendingEdit).toBeNull();
    expect(sidebarCounts(st)?.kept).toBe(12);
  });
});

describe("visibility filters", () => {
  const loaded = () => {
    let st = datasetLoaded(initialState(), detail());
    return instancesLoaded(st, "dish-a", [
      inst("p-1", { label: "BVG+" }),
      inst("p-2", { label: "BVG-" }),
      inst("p-3", { label: "BVG+", excluded: "outside_dish" }),
    ]);
  };

  it("hides excluded instances by default", () => {
    expect(visibleInstances(loaded()).map((i) => i.id)).toEqual(["p-1", "p-2"]);
  });

  it("shows excluded instances when toggled", () => {
    const st = toggleExcluded(loaded());
    expect(visibleInstances(st).map((i) => i.id)).toEqual(["p-1", "p-2", "p-3"]);
  });

  it("class toggle hides one class at a time", () => {
    const st = toggleClass(loaded(), "BVG+");
    expect(visibleInstances(st).map((i) => i.id)).toEqual(["p-2"]);
    const back = toggleClass(st, "BVG+");
    expect(visibleInstances(back).map((i) => i.id)).toEqual(["p-1", "p-2"]);
  });
});

describe("export gating", () => {
  it("any blocking diagnostic disables export", () => {
    expect(canExport([])).toBe(true);
    expect(canExport([{ severity: "warning", code: "w", message: "m" }])).toBe(true);
    expect(canExport([
      { severity: "warning", code: "w", message: "m" },
      { severity: "error", code: "image_count", message: "m" },
    ])).toBe(false);
  });
});

describe("image switching", () => {
  it("rejects unknown image ids", () => {
    const st = datasetLoaded(initialState(), detail());
    expect(() => setActiveImage(st, "nope")).toThrow(/unknown image/);
  });

  it("resets selection and instances on switch", () => {
    let st = datasetLoaded(initialState(), detail());
    st = instancesLoaded(st, "dish-a", [inst("p-1")]);
    st = select(st, "p-1");
    st = setActiveImage(st, "dish-b");
    expect(st.instances).toEqual([]);
    expect(st.selectedId).toBeNull();
  });
});
