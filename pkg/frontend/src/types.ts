// Wire types for the colony counting service. Field names and string values
// mirror the HTTP responses exactly; do not rename.

export type ClassName = "BVG+" | "BVG-";

export type Origin = "model" | "user" | "gt";

export type ExclusionReason =
  | "below_score_threshold"
  | "cross_class_duplicate"
  | "outside_dish"
  | "area_outlier"
  | "user_deleted";

export type SplitName = "train" | "val" | "test" | "unsplit";

export type EllipseSource = "fitted" | "user" | "none";

export interface Ellipse {
  cx: number;
  cy: number;
  a: number;
  b: number;
  theta: number;
}

/** [x, y, width, height] in image pixels. */
export type BBox = [number, number, number, number];

export interface InstanceView {
  id: string | number;
  image_id: string | number;
  label: ClassName;
  score: number | null;
  bbox: BBox;
  area: number;
  origin: Origin;
  unsure: boolean;
  alt_label: ClassName | null;
  excluded: ExclusionReason | null;
  has_mask: boolean;
}

export interface ImageView {
  id: string | number;
  width: number;
  height: number;
  split: SplitName;
  ellipse_source: EllipseSource;
  dish_ellipse: Ellipse | null;
  has_pixels: boolean;
}

/** kept + unsure + one bucket per exclusion reason. */
export interface ReasonCounts {
  kept: number;
  unsure: number;
  below_score_threshold: number;
  cross_class_duplicate: number;
  outside_dish: number;
  area_outlier: number;
  user_deleted: number;
}

export interface DatasetSummary {
  id: string;
  name: string | null;
  images: number;
  seq: number;
}

export interface DatasetDetail {
  id: string;
  name: string | null;
  seq: number;
  images: ImageView[];
  counts: ReasonCounts;
  experiments: string[];
  last_pipeline_config: Record<string, number> | null;
}

export interface UploadResult {
  id: string;
  name: string | null;
  images: number;
  ground_truth: number;
  predictions: number;
}

export interface EditEventView {
  seq: number;
  actor: string;
  timestamp: string;
  action: string;
  payload: Record<string, unknown>;
}

export interface PostprocessConfig {
  score_threshold?: number;
  dup_iou_threshold?: number;
  ellipse_shrink?: number;
  laplace_ci?: number;
  min_instances?: number;
}

export interface PerImageCounts extends Partial<Record<ExclusionReason, number>> {
  image_id: string | number;
  kept: number;
}

export interface PostprocessResult {
  seq: number;
  config: Required<PostprocessConfig>;
  counts: ReasonCounts;
  per_image: PerImageCounts[];
}

export interface JobStatus {
  id: string;
  status: "running" | "done" | "failed";
  result?: PostprocessResult;
  error?: ErrorBody;
}

export interface JobStarted {
  job_id: string;
  status: "running";
}

export interface InstanceListing {
  dataset: string;
  image_id: string | number;
  instances: InstanceView[];
}

export interface EllipseUpdateResult {
  seq: number;
  image_id: string | number;
  ellipse: Ellipse;
  kept: number;
  outside_dish: (string | number)[];
  area_outlier: (string | number)[];
}

export interface InstanceMutationResult {
  seq: number;
  instance: InstanceView;
}

export interface InstanceDeleteResult {
  seq: number;
  instance_id: string | number;
}

export type InstanceOp =
  | "change_class"
  | "validate_unsure"
  | "invalidate_unsure"
  | "restore";

export interface Triplicate {
  dilution: number;
  image_ids: (string | number)[];
}

export type DiagnosticSeverity = "error" | "warning";

export interface Diagnostic {
  severity: DiagnosticSeverity;
  code: string;
  message: string;
}

export interface DilutionsResult {
  seq: number;
  experiment_id: string;
  dataset: string;
  diagnostics: Diagnostic[];
}

export interface EstimateView {
  point_estimate: number;
  ci_low: number;
  ci_high: number;
  confidence_level: number;
  n_dishes: number;
}

export interface QuantReportView {
  experiment_id: string;
  estimates: Record<string, EstimateView>;
  per_dish: {
    image_id: string | number;
    dilution: number;
    counts: Record<string, number>;
  }[];
  warnings: string[];
}

export interface HealthView {
  status: "ok";
  datasets: number;
}

export interface ErrorBody {
  status: number;
  code: string;
  message: string;
  details?: unknown;
}

export interface ErrorEnvelope {
  error: ErrorBody;
}
