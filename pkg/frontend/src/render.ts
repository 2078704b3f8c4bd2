import { clipLineToImage } from "./geometry.js";
import type { FlowFieldData } from "./flowbytes.js";
import { flowCountAt, flowVectorAt } from "./flowbytes.js";
import type { StereoDraft } from "./stereo.js";
import type { AnnotationDoc, OverlayResult, OverlayToggles, Point } from "./types.js";

/**
 * Zoom and pan for one pane. The transform maps image coordinates to
 * screen coordinates and is the only place that mapping happens; all
 * document and draft geometry stays in image space.
 */
export interface ViewTransform {
  scale: number;
  tx: number;
  ty: number;
}

export function identityView(): ViewTransform {
  return { scale: 1, tx: 0, ty: 0 };
}

export function imageToScreen(view: ViewTransform, p: Point): Point {
  return { x: p.x * view.scale + view.tx, y: p.y * view.scale + view.ty };
}

export function screenToImage(view: ViewTransform, p: Point): Point {
  return { x: (p.x - view.tx) / view.scale, y: (p.y - view.ty) / view.scale };
}

/** Scale around a fixed screen point so the pixel under the cursor stays put. */
export function zoomAround(view: ViewTransform, screenPoint: Point, factor: number): ViewTransform {
  const anchor = screenToImage(view, screenPoint);
  const scale = Math.min(64, Math.max(1 / 16, view.scale * factor));
  return {
    scale,
    tx: screenPoint.x - anchor.x * scale,
    ty: screenPoint.y - anchor.y * scale,
  };
}

export function panBy(view: ViewTransform, dx: number, dy: number): ViewTransform {
  return { scale: view.scale, tx: view.tx + dx, ty: view.ty + dy };
}

/** Find the closest document vertex within a screen-space pick radius. */
export function hitTestVertex(
  doc: AnnotationDoc,
  view: ViewTransform,
  screenPoint: Point,
  pickRadiusPx = 8,
): number | null {
  const p = screenToImage(view, screenPoint);
  const radius = pickRadiusPx / view.scale;
  let best: number | null = null;
  let bestDist = radius;
  for (const v of doc.vertices) {
    const d = Math.hypot(v.x - p.x, v.y - p.y);
    if (d <= bestDist) {
      best = v.id;
      bestDist = d;
    }
  }
  return best;
}

export interface Scene {
  image: CanvasImageSource | null;
  width: number;
  height: number;
  doc: AnnotationDoc | null;
  draft: StereoDraft | null;
  flow: FlowFieldData | null;
  mask: CanvasImageSource | null;
  reprojection: OverlayResult | null;
  overlays: OverlayToggles;
  selectedVertex: number | null;
  highlightPixel: [number, number] | null;
}

const CURVE_COLOR = "#2e7d32";
const VERTEX_COLOR = "#1b5e20";
const SELECTED_COLOR = "#ef6c00";
const KEYPOINT_COLOR = "#4a148c";
const DRAFT_COLOR = "#1565c0";
const DRAFT_OFF_LINE_COLOR = "#c62828";
const EPIPOLAR_COLOR = "rgba(21, 101, 192, 0.55)";
const REPROJECTION_COLOR = "rgba(255, 193, 7, 0.9)";
const FLOW_COLOR = "rgba(0, 137, 123, 0.8)";
const HIGHLIGHT_COLOR = "#d50000";

export function renderScene(ctx: CanvasRenderingContext2D, scene: Scene, view: ViewTransform): void {
  ctx.save();
  ctx.setTransform(1, 0, 0, 1, 0, 0);
  ctx.clearRect(0, 0, ctx.canvas.width, ctx.canvas.height);
  ctx.setTransform(view.scale, 0, 0, view.scale, view.tx, view.ty);

  if (scene.image !== null) {
    ctx.drawImage(scene.image, 0, 0);
  } else {
    ctx.fillStyle = "#eceff1";
    ctx.fillRect(0, 0, scene.width, scene.height);
  }
  if (scene.overlays.mask && scene.mask !== null) {
    ctx.globalAlpha = 0.35;
    ctx.drawImage(scene.mask, 0, 0);
    ctx.globalAlpha = 1;
  }
  if (scene.overlays.flow && scene.flow !== null) {
    drawFlowQuiver(ctx, scene.flow, view);
  }
  if (scene.overlays.reprojection && scene.reprojection !== null) {
    drawReprojection(ctx, scene.reprojection, view);
  }
  if (scene.doc !== null) {
    drawDocument(ctx, scene.doc, view, scene.selectedVertex);
  }
  if (scene.draft !== null) {
    drawDraft(ctx, scene.draft, view, scene.width, scene.height);
  }
  if (scene.highlightPixel !== null) {
    const [hx, hy] = scene.highlightPixel;
    ctx.strokeStyle = HIGHLIGHT_COLOR;
    ctx.lineWidth = 2 / view.scale;
    ctx.beginPath();
    ctx.arc(hx, hy, 9 / view.scale, 0, Math.PI * 2);
    ctx.stroke();
  }
  ctx.restore();
}

function drawDocument(
  ctx: CanvasRenderingContext2D,
  doc: AnnotationDoc,
  view: ViewTransform,
  selected: number | null,
): void {
  const byId = new Map(doc.vertices.map((v) => [v.id, v]));
  ctx.strokeStyle = CURVE_COLOR;
  ctx.lineCap = "round";
  for (const [a, b] of doc.edges) {
    const va = byId.get(a);
    const vb = byId.get(b);
    if (va === undefined || vb === undefined) {
      continue;
    }
    ctx.lineWidth = Math.max(va.thickness + vb.thickness, 1 / view.scale);
    ctx.beginPath();
    ctx.moveTo(va.x, va.y);
    ctx.lineTo(vb.x, vb.y);
    ctx.stroke();
  }
  const handle = 3.5 / view.scale;
  for (const v of doc.vertices) {
    ctx.fillStyle = v.id === selected ? SELECTED_COLOR : VERTEX_COLOR;
    ctx.beginPath();
    ctx.arc(v.x, v.y, handle, 0, Math.PI * 2);
    ctx.fill();
    if (v.keypoint !== null) {
      ctx.fillStyle = KEYPOINT_COLOR;
      ctx.font = `${12 / view.scale}px sans-serif`;
      ctx.fillText(v.keypoint, v.x + 2 * handle, v.y - 2 * handle);
    }
  }
}

function drawDraft(
  ctx: CanvasRenderingContext2D,
  draft: StereoDraft,
  view: ViewTransform,
  width: number,
  height: number,
): void {
  ctx.save();
  ctx.setLineDash([6 / view.scale, 4 / view.scale]);
  ctx.strokeStyle = EPIPOLAR_COLOR;
  ctx.lineWidth = 1 / view.scale;
  for (const v of draft.vertices) {
    const span = clipLineToImage(v.line, width, height);
    if (span === null) {
      continue;
    }
    const [p0, p1] = span;
    ctx.beginPath();
    ctx.moveTo(p0.x, p0.y);
    ctx.lineTo(p1.x, p1.y);
    ctx.stroke();
  }
  ctx.restore();

  ctx.strokeStyle = DRAFT_COLOR;
  ctx.lineWidth = 1.5 / view.scale;
  for (const [a, b] of draft.edges) {
    const va = draft.vertices[a];
    const vb = draft.vertices[b];
    if (va === undefined || vb === undefined) {
      continue;
    }
    ctx.beginPath();
    ctx.moveTo(va.x, va.y);
    ctx.lineTo(vb.x, vb.y);
    ctx.stroke();
  }
  const handle = 4 / view.scale;
  for (const v of draft.vertices) {
    ctx.fillStyle = v.offLine ? DRAFT_OFF_LINE_COLOR : DRAFT_COLOR;
    ctx.beginPath();
    ctx.arc(v.x, v.y, handle, 0, Math.PI * 2);
    ctx.fill();
  }
}

function drawFlowQuiver(ctx: CanvasRenderingContext2D, flow: FlowFieldData, view: ViewTransform): void {
  const stride = Math.max(4, Math.round(12 / view.scale));
  const arrow = stride * 0.6;
  ctx.strokeStyle = FLOW_COLOR;
  ctx.lineWidth = 1 / view.scale;
  ctx.beginPath();
  for (let y = 0; y < flow.height; y += stride) {
    for (let x = 0; x < flow.width; x += stride) {
      const count = flowCountAt(flow, x, y);
      for (let k = 0; k < count; k++) {
        const [vx, vy] = flowVectorAt(flow, x, y, k);
        ctx.moveTo(x, y);
        ctx.lineTo(x + vx * arrow, y + vy * arrow);
      }
    }
  }
  ctx.stroke();
}

function drawReprojection(ctx: CanvasRenderingContext2D, overlay: OverlayResult, view: ViewTransform): void {
  ctx.strokeStyle = REPROJECTION_COLOR;
  for (const poly of overlay.polylines) {
    ctx.lineWidth = 1.5 / view.scale;
    ctx.beginPath();
    let started = false;
    for (const [x, y] of poly.points) {
      if (started) {
        ctx.lineTo(x, y);
      } else {
        ctx.moveTo(x, y);
        started = true;
      }
    }
    ctx.stroke();
  }
}
