import type { AnnotationDoc, ImageInfo, Violation, WireVertex } from "./types.js";

/** Pure operations on annotation documents.
 *
 * The client never sends a document the server would reject, so the
 * validation rules here mirror the service rule for rule, by name. A
 * mutation that would introduce a violation is refused up front instead
 * of surfacing as a 422 after the fact.
 */

export function emptyDocument(info: ImageInfo, cameraId?: string): AnnotationDoc {
  return {
    image_id: info.id,
    camera_id: cameraId ?? info.id,
    width: info.width,
    height: info.height,
    vertices: [],
    edges: [],
  };
}

/** Deep copy through JSON so snapshots share no structure with the working doc. */
export function cloneDocument(doc: AnnotationDoc): AnnotationDoc {
  return JSON.parse(JSON.stringify(doc)) as AnnotationDoc;
}

/** Rebuild the document with every key in canonical order. Mutations can
 * construct objects however they like; this is the one place order is fixed. */
export function toWire(doc: AnnotationDoc): AnnotationDoc {
  return {
    image_id: doc.image_id,
    camera_id: doc.camera_id,
    width: doc.width,
    height: doc.height,
    vertices: doc.vertices.map((v) => ({
      id: v.id,
      x: v.x,
      y: v.y,
      thickness: v.thickness,
      keypoint: v.keypoint ?? null,
    })),
    edges: doc.edges.map(([a, b]) => [a, b] as [number, number]),
  };
}

/** Canonical byte form; equal strings mean equal documents. */
export function serializeDocument(doc: AnnotationDoc): string {
  return JSON.stringify(toWire(doc));
}

export function parseDocument(text: string): AnnotationDoc {
  return toWire(JSON.parse(text) as AnnotationDoc);
}

export function degrees(doc: AnnotationDoc): Map<number, number> {
  const deg = new Map<number, number>();
  for (const v of doc.vertices) {
    deg.set(v.id, 0);
  }
  for (const [a, b] of doc.edges) {
    if (deg.has(a)) {
      deg.set(a, deg.get(a)! + 1);
    }
    if (deg.has(b)) {
      deg.set(b, deg.get(b)! + 1);
    }
  }
  return deg;
}

export function vertexMap(doc: AnnotationDoc): Map<number, WireVertex> {
  return new Map(doc.vertices.map((v) => [v.id, v]));
}

export function nextVertexId(doc: AnnotationDoc): number {
  let max = -1;
  for (const v of doc.vertices) {
    max = Math.max(max, v.id);
  }
  return max + 1;
}

export function validateDocument(doc: AnnotationDoc): Violation[] {
  const out: Violation[] = [];

  const ids = doc.vertices.map((v) => v.id);
  const idSet = new Set(ids);
  if (ids.length !== idSet.size) {
    const seen = new Set<number>();
    const dupes = new Set<number>();
    for (const i of ids) {
      (seen.has(i) ? dupes : seen).add(i);
    }
    for (const i of [...dupes].sort((a, b) => a - b)) {
      out.push({ rule: "DuplicateVertexId", subject: `vertex ${i}`, detail: "id used more than once" });
    }
  }

  for (const v of doc.vertices) {
    if (!(v.thickness > 0)) {
      out.push({
        rule: "ThicknessViolation",
        subject: `vertex ${v.id}`,
        detail: `thickness ${v.thickness} must be > 0`,
      });
    }
    if (!(v.x >= 0 && v.x < doc.width && v.y >= 0 && v.y < doc.height)) {
      out.push({
        rule: "OutOfBounds",
        subject: `vertex ${v.id}`,
        detail: `(${v.x}, ${v.y}) outside ${doc.width}x${doc.height}`,
      });
    }
  }

  const keypoints = new Map<string, number>();
  for (const v of doc.vertices) {
    if (v.keypoint !== null && v.keypoint !== undefined) {
      const prior = keypoints.get(v.keypoint);
      if (prior !== undefined) {
        out.push({
          rule: "DuplicateKeypoint",
          subject: `vertex ${v.id}`,
          detail: `keypoint '${v.keypoint}' also on vertex ${prior}`,
        });
      } else {
        keypoints.set(v.keypoint, v.id);
      }
    }
  }

  const seenEdges = new Set<string>();
  for (const [a, b] of doc.edges) {
    if (!idSet.has(a) || !idSet.has(b)) {
      out.push({ rule: "DanglingEdge", subject: `edge (${a}, ${b})`, detail: "references a missing vertex" });
      continue;
    }
    if (a === b) {
      out.push({ rule: "SelfLoop", subject: `edge (${a}, ${b})`, detail: "self loops are not allowed" });
      continue;
    }
    const key = `${Math.min(a, b)},${Math.max(a, b)}`;
    if (seenEdges.has(key)) {
      out.push({ rule: "DuplicateEdge", subject: `edge (${a}, ${b})`, detail: "edge appears twice" });
    }
    seenEdges.add(key);
  }

  for (const [vid, deg] of degrees(doc)) {
    if (deg < 1 || deg > 3) {
      out.push({
        rule: "DegreeViolation",
        subject: `vertex ${vid}`,
        detail: `degree ${deg} not in {1, 2, 3}`,
      });
    }
  }
  return out;
}
