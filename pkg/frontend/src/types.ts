/** Wire formats shared with the annotation service.
 *
 * Document key order matters: serialization walks fields in exactly the
 * order declared here so a load followed by an untouched save reproduces
 * the same bytes (the server only ever changes the version counter).
 */

export interface WireVertex {
  id: number;
  x: number;
  y: number;
  /** Stroke radius in pixels. */
  thickness: number;
  /** Shared identifier matching this point across images; null when unlabeled. */
  keypoint: string | null;
}

export interface AnnotationDoc {
  image_id: string;
  camera_id: string;
  width: number;
  height: number;
  vertices: WireVertex[];
  edges: [number, number][];
}

export interface ImageInfo {
  id: string;
  width: number;
  height: number;
  version: number;
}

export interface Violation {
  rule: string;
  subject: string;
  detail: string;
}

/** Implicit line a*x + b*y + c = 0 in image coordinates. */
export type EpipolarLine = [number, number, number];

export interface TraceResult {
  points: [number, number][];
  thickness: number[];
  termination: string;
}

export interface FlowParams {
  r?: number;
  sigma?: number;
  n?: number;
  scales?: number[];
  threshold?: number;
}

export interface TraceParams {
  step?: number;
  max_steps?: number;
  settle_iterations?: number;
  capture_radius?: number;
}

export interface OverlayResult {
  image_id: string;
  camera_id: string;
  polylines: { points: [number, number][]; thickness: (number | null)[] }[];
}

export type ToolMode = "draw" | "edit" | "keypoint" | "stereo-transfer" | "auto-trace";

export interface OverlayToggles {
  flow: boolean;
  reprojection: boolean;
  mask: boolean;
}

export interface Point {
  x: number;
  y: number;
}
