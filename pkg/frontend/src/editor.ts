import { ApiError, StaleVersionError, type AnnotationApi } from "./api.js";
import {
  cloneDocument,
  degrees,
  emptyDocument,
  nextVertexId,
  parseDocument,
  serializeDocument,
  toWire,
  validateDocument,
  vertexMap,
} from "./document.js";
import type { StereoDraft } from "./stereo.js";
import type { AnnotationDoc, FlowParams, ImageInfo, OverlayToggles, Point, ToolMode, TraceParams } from "./types.js";

export interface EditResult {
  ok: boolean;
  message?: string;
  /** Ids of vertices created by the edit, in stroke order. */
  vertexIds?: number[];
}

export interface DrawJoins {
  /** Existing vertex id the stroke starts from instead of a new vertex. */
  joinStart?: number;
  /** Existing vertex id the stroke ends at instead of a new vertex. */
  joinEnd?: number;
}

/** Inline badge shown next to the cursor when an edit is refused. */
export interface RefusalBadge {
  rule: string;
  message: string;
}

/** Transient error banner, optionally pointing at the pixel that caused it. */
export interface Toast {
  kind: string;
  message: string;
  highlightPixel: [number, number] | null;
}

/** Raised save conflict; the UI renders it as a reload-or-overwrite prompt. */
export interface SaveConflict {
  imageId: string;
  currentVersion: number;
}

const MAX_DEGREE = 3;

/**
 * State for one editor pane: the active image, the working annotation
 * document, and the interaction bookkeeping around it.
 *
 * Every mutation goes through a single commit path that validates the
 * candidate document and rolls back on any violation, so the working
 * document is valid at all times and save never ships a bad document.
 * Undo and redo operate on full serialized snapshots, which makes a
 * sequence of edits followed by the same number of undos restore the
 * prior document byte for byte.
 */
export class EditorState {
  activeImage: ImageInfo | null = null;
  doc: AnnotationDoc | null = null;
  serverVersion = 0;
  tool: ToolMode = "draw";
  overlays: OverlayToggles = { flow: false, reprojection: false, mask: false };
  lastRefusal: RefusalBadge | null = null;
  lastToast: Toast | null = null;
  conflict: SaveConflict | null = null;

  private savedSerial = "";
  private undoStack: string[] = [];
  private redoStack: string[] = [];

  constructor(private readonly api: AnnotationApi) {}

  /** True when the working document differs from the last loaded or saved state. */
  get dirty(): boolean {
    return this.doc !== null && serializeDocument(this.doc) !== this.savedSerial;
  }

  get undoDepth(): number {
    return this.undoStack.length;
  }

  get redoDepth(): number {
    return this.redoStack.length;
  }

  serialize(): string {
    if (this.doc === null) {
      throw new Error("no document open");
    }
    return serializeDocument(this.doc);
  }

  degreeOf(vertexId: number): number {
    if (this.doc === null) {
      return 0;
    }
    return degrees(this.doc).get(vertexId) ?? 0;
  }

  /** Load the stored annotation for an image, or start an empty document. */
  async open(info: ImageInfo): Promise<void> {
    const stored = await this.api.getAnnotation(info.id);
    this.activeImage = info;
    this.serverVersion = stored.version;
    this.doc = stored.annotation !== null ? cloneDocument(stored.annotation) : emptyDocument(info);
    this.savedSerial = serializeDocument(this.doc);
    this.undoStack = [];
    this.redoStack = [];
    this.lastRefusal = null;
    this.lastToast = null;
    this.conflict = null;
  }

  /**
   * Append a polyline from a click sequence. Each point becomes a new
   * vertex; consecutive vertices are connected by edges. Joins attach the
   * stroke ends to existing vertices instead of creating new ones, and are
   * refused up front when the target vertex already meets three edges.
   */
  drawCurve(points: Point[], thickness: number | number[], joins: DrawJoins = {}): EditResult {
    if (this.doc === null) {
      return { ok: false, message: "no document open" };
    }
    const thicknesses = Array.isArray(thickness) ? thickness : points.map(() => thickness);
    if (thicknesses.length !== points.length) {
      return { ok: false, message: "one thickness per click is required" };
    }

    const deg = degrees(this.doc);
    const joinGain = new Map<number, number>();
    for (const target of [joins.joinStart, joins.joinEnd]) {
      if (target !== undefined) {
        joinGain.set(target, (joinGain.get(target) ?? 0) + 1);
      }
    }
    for (const [target, gain] of joinGain) {
      if (!vertexMap(this.doc).has(target)) {
        return { ok: false, message: `join target vertex ${target} does not exist` };
      }
      const current = deg.get(target) ?? 0;
      if (current + gain > MAX_DEGREE) {
        this.lastRefusal = {
          rule: "DegreeViolation",
          message: `vertex ${target} already meets ${current} edges; join refused`,
        };
        return { ok: false, message: this.lastRefusal.message };
      }
    }

    const chainLength = points.length + (joins.joinStart !== undefined ? 1 : 0) + (joins.joinEnd !== undefined ? 1 : 0);
    if (chainLength < 2) {
      return { ok: false, message: "a stroke needs at least two points" };
    }

    const newIds: number[] = [];
    let id = nextVertexId(this.doc);
    for (let i = 0; i < points.length; i++) {
      newIds.push(id);
      id += 1;
    }

    const chain: number[] = [];
    if (joins.joinStart !== undefined) {
      chain.push(joins.joinStart);
    }
    chain.push(...newIds);
    if (joins.joinEnd !== undefined) {
      chain.push(joins.joinEnd);
    }

    const result = this.commitEdit((doc) => {
      for (let i = 0; i < points.length; i++) {
        const p = points[i];
        const t = thicknesses[i];
        if (p === undefined || t === undefined) {
          continue;
        }
        doc.vertices.push({ id: newIds[i] ?? 0, x: p.x, y: p.y, thickness: t, keypoint: null });
      }
      for (let i = 1; i < chain.length; i++) {
        const a = chain[i - 1];
        const b = chain[i];
        if (a !== undefined && b !== undefined) {
          doc.edges.push([a, b]);
        }
      }
    });
    if (result.ok) {
      result.vertexIds = newIds;
    }
    return result;
  }

  moveVertex(vertexId: number, x: number, y: number): EditResult {
    return this.commitEdit((doc) => {
      const v = vertexMap(doc).get(vertexId);
      if (v === undefined) {
        throw new Error(`vertex ${vertexId} does not exist`);
      }
      v.x = x;
      v.y = y;
    });
  }

  setVertexThickness(vertexId: number, thickness: number): EditResult {
    return this.commitEdit((doc) => {
      const v = vertexMap(doc).get(vertexId);
      if (v === undefined) {
        throw new Error(`vertex ${vertexId} does not exist`);
      }
      v.thickness = thickness;
    });
  }

  setKeypoint(vertexId: number, name: string): EditResult {
    return this.commitEdit((doc) => {
      const v = vertexMap(doc).get(vertexId);
      if (v === undefined) {
        throw new Error(`vertex ${vertexId} does not exist`);
      }
      v.keypoint = name;
    });
  }

  clearKeypoint(vertexId: number): EditResult {
    return this.commitEdit((doc) => {
      const v = vertexMap(doc).get(vertexId);
      if (v === undefined) {
        throw new Error(`vertex ${vertexId} does not exist`);
      }
      v.keypoint = null;
    });
  }

  /** Commit a stereo-transfer draft into the working document as new curves. */
  importDraft(draft: StereoDraft): EditResult {
    if (this.doc === null) {
      return { ok: false, message: "no document open" };
    }
    if (this.activeImage === null || draft.targetImageId !== this.activeImage.id) {
      return { ok: false, message: "draft targets a different image" };
    }
    const base = nextVertexId(this.doc);
    const newIds = draft.vertices.map((_, i) => base + i);
    const result = this.commitEdit((doc) => {
      for (let i = 0; i < draft.vertices.length; i++) {
        const d = draft.vertices[i];
        if (d === undefined) {
          continue;
        }
        doc.vertices.push({ id: base + i, x: d.x, y: d.y, thickness: d.thickness, keypoint: d.keypoint });
      }
      for (const [a, b] of draft.edges) {
        const ia = newIds[a];
        const ib = newIds[b];
        if (ia !== undefined && ib !== undefined) {
          doc.edges.push([ia, ib]);
        }
      }
    });
    if (result.ok) {
      result.vertexIds = newIds;
    }
    return result;
  }

  /**
   * Ask the service to trace the medial axis between two endpoints and
   * insert the returned polyline, vertex for vertex, as an ordinary
   * editable curve. Requires the flow overlay to be active so the user
   * sees the field the trace follows.
   */
  async autoTrace(
    p0: [number, number],
    p1: [number, number],
    flow?: FlowParams,
    params?: TraceParams,
  ): Promise<EditResult> {
    if (this.doc === null || this.activeImage === null) {
      return { ok: false, message: "no document open" };
    }
    if (!this.overlays.flow) {
      return { ok: false, message: "auto trace needs the flow overlay" };
    }
    let traced;
    try {
      traced = await this.api.trace(this.activeImage.id, p0, p1, flow, params);
    } catch (err) {
      if (err instanceof ApiError) {
        this.lastToast = {
          kind: err.kind,
          message: err.message,
          highlightPixel: err.kind === "NoFlowAtStart" ? p0 : null,
        };
        return { ok: false, message: err.message };
      }
      throw err;
    }

    const base = nextVertexId(this.doc);
    const newIds = traced.points.map((_, i) => base + i);
    const result = this.commitEdit((doc) => {
      for (let i = 0; i < traced.points.length; i++) {
        const p = traced.points[i];
        const t = traced.thickness[i];
        if (p === undefined || t === undefined) {
          continue;
        }
        doc.vertices.push({ id: base + i, x: p[0], y: p[1], thickness: t, keypoint: null });
      }
      for (let i = 1; i < newIds.length; i++) {
        const a = newIds[i - 1];
        const b = newIds[i];
        if (a !== undefined && b !== undefined) {
          doc.edges.push([a, b]);
        }
      }
    });
    if (result.ok) {
      result.vertexIds = newIds;
      this.lastToast = null;
    }
    return result;
  }

  /**
   * Persist the working document with optimistic concurrency. A stale
   * version answer becomes a conflict prompt instead of an exception.
   */
  async save(): Promise<EditResult> {
    if (this.doc === null || this.activeImage === null) {
      return { ok: false, message: "no document open" };
    }
    const violations = validateDocument(this.doc);
    if (violations.length > 0) {
      const first = violations[0];
      const message = first === undefined ? "document is invalid" : `${first.rule}: ${first.detail}`;
      this.lastRefusal = { rule: first?.rule ?? "Invalid", message };
      return { ok: false, message };
    }
    return this.push(this.serverVersion);
  }

  /** Discard local edits and adopt the server's current document. */
  async resolveConflictReload(): Promise<void> {
    if (this.activeImage === null) {
      return;
    }
    await this.open(this.activeImage);
  }

  /** Keep local edits and overwrite the server's current version. */
  async resolveConflictOverwrite(): Promise<EditResult> {
    if (this.conflict === null) {
      return { ok: false, message: "no conflict to resolve" };
    }
    return this.push(this.conflict.currentVersion);
  }

  undo(): boolean {
    const snapshot = this.undoStack.pop();
    if (snapshot === undefined || this.doc === null) {
      return false;
    }
    this.redoStack.push(serializeDocument(this.doc));
    this.doc = parseDocument(snapshot);
    return true;
  }

  redo(): boolean {
    const snapshot = this.redoStack.pop();
    if (snapshot === undefined || this.doc === null) {
      return false;
    }
    this.undoStack.push(serializeDocument(this.doc));
    this.doc = parseDocument(snapshot);
    return true;
  }

  private async push(expectedVersion: number): Promise<EditResult> {
    if (this.doc === null || this.activeImage === null) {
      return { ok: false, message: "no document open" };
    }
    try {
      const version = await this.api.putAnnotation(this.activeImage.id, toWire(this.doc), expectedVersion);
      this.serverVersion = version;
      this.savedSerial = serializeDocument(this.doc);
      this.conflict = null;
      return { ok: true };
    } catch (err) {
      if (err instanceof StaleVersionError) {
        this.conflict = { imageId: this.activeImage.id, currentVersion: err.currentVersion };
        return { ok: false, message: err.message };
      }
      if (err instanceof ApiError) {
        this.lastToast = { kind: err.kind, message: err.message, highlightPixel: null };
        return { ok: false, message: err.message };
      }
      throw err;
    }
  }

  /**
   * Run a mutation against the working document, then validate. A clean
   * result pushes the pre-edit snapshot onto the undo stack and clears the
   * redo stack; any violation rolls the document back untouched and raises
   * an inline refusal badge instead.
   */
  private commitEdit(mutate: (doc: AnnotationDoc) => void): EditResult {
    if (this.doc === null) {
      return { ok: false, message: "no document open" };
    }
    const before = serializeDocument(this.doc);
    try {
      mutate(this.doc);
    } catch (err) {
      this.doc = parseDocument(before);
      const message = err instanceof Error ? err.message : String(err);
      return { ok: false, message };
    }
    const violations = validateDocument(this.doc);
    if (violations.length > 0) {
      this.doc = parseDocument(before);
      const first = violations[0];
      const message = first === undefined ? "edit would invalidate the document" : `${first.rule}: ${first.detail}`;
      this.lastRefusal = { rule: first?.rule ?? "Invalid", message };
      return { ok: false, message };
    }
    this.undoStack.push(before);
    this.redoStack.length = 0;
    this.lastRefusal = null;
    return { ok: true };
  }
}
