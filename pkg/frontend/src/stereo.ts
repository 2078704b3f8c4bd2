import type { AnnotationApi } from "./api.js";
import { closestPointOnLine, distanceToLine } from "./geometry.js";
import type { AnnotationDoc, EpipolarLine, Point } from "./types.js";

/** How far a vertex may sit from its epipolar line and still count as on it. */
export const ON_LINE_TOLERANCE_PX = 0.5;

export interface DraftVertex {
  /** Vertex id in the source document this draft vertex came from. */
  sourceId: number;
  x: number;
  y: number;
  /** Epipolar line of the source vertex in the target image. */
  line: EpipolarLine;
  /** True once a modifier drag moved the vertex off its line. */
  offLine: boolean;
  keypoint: string | null;
  thickness: number;
}

/**
 * A stereo-transfer draft: the source curves re-seated in the target image,
 * each vertex tied to its epipolar line. Drafts live outside the working
 * document until committed, so abandoning one never touches the annotation.
 */
export interface StereoDraft {
  sourceImageId: string;
  targetImageId: string;
  vertices: DraftVertex[];
  /** Index pairs into vertices, mirroring the source connectivity. */
  edges: [number, number][];
}

/**
 * Build a draft for the target pane from the source document. Each source
 * vertex gets its epipolar line in the target camera and starts at the
 * point on that line closest to its source position, which lines up
 * exactly for rectified pairs and stays a sane seed otherwise.
 */
export async function buildStereoDraft(
  api: AnnotationApi,
  sourceDoc: AnnotationDoc,
  targetImageId: string,
  targetCameraId: string,
): Promise<StereoDraft> {
  const indexById = new Map<number, number>();
  const vertices: DraftVertex[] = [];
  for (const v of sourceDoc.vertices) {
    const line = await api.epipolarLine(sourceDoc.camera_id, targetCameraId, v.x, v.y);
    const seed = closestPointOnLine(line, { x: v.x, y: v.y });
    indexById.set(v.id, vertices.length);
    vertices.push({
      sourceId: v.id,
      x: seed.x,
      y: seed.y,
      line,
      offLine: false,
      keypoint: v.keypoint,
      thickness: v.thickness,
    });
  }
  const edges: [number, number][] = [];
  for (const [a, b] of sourceDoc.edges) {
    const ia = indexById.get(a);
    const ib = indexById.get(b);
    if (ia !== undefined && ib !== undefined) {
      edges.push([ia, ib]);
    }
  }
  return { sourceImageId: sourceDoc.image_id, targetImageId, vertices, edges };
}

/**
 * Default drag: the vertex slides along its epipolar line, landing on the
 * point of the line closest to the pointer.
 */
export function dragDraftVertex(draft: StereoDraft, index: number, pointer: Point): void {
  const v = draft.vertices[index];
  if (v === undefined) {
    throw new Error(`draft has no vertex ${index}`);
  }
  const p = closestPointOnLine(v.line, pointer);
  v.x = p.x;
  v.y = p.y;
  v.offLine = false;
}

/**
 * Modifier drag: the vertex follows the pointer freely. Leaving the line
 * beyond the tolerance flags the vertex so the renderer can mark it.
 */
export function freeDragDraftVertex(
  draft: StereoDraft,
  index: number,
  pointer: Point,
  tolerancePx: number = ON_LINE_TOLERANCE_PX,
): void {
  const v = draft.vertices[index];
  if (v === undefined) {
    throw new Error(`draft has no vertex ${index}`);
  }
  v.x = pointer.x;
  v.y = pointer.y;
  v.offLine = distanceToLine(v.line, pointer) > tolerancePx;
}
