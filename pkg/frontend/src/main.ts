import { ApiError, HttpAnnotationApi, type AnnotationApi } from "./api.js";
import { EditorState } from "./editor.js";
import type { FlowFieldData } from "./flowbytes.js";
import {
  hitTestVertex,
  identityView,
  panBy,
  renderScene,
  screenToImage,
  zoomAround,
  type Scene,
  type ViewTransform,
} from "./render.js";
import { buildStereoDraft, dragDraftVertex, freeDragDraftVertex, type StereoDraft } from "./stereo.js";
import type { ImageInfo, OverlayResult, Point, ToolMode } from "./types.js";

const TOOLS: ToolMode[] = ["draw", "edit", "keypoint", "stereo-transfer", "auto-trace"];

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  className = "",
  text = "",
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  if (className !== "") {
    node.className = className;
  }
  if (text !== "") {
    node.textContent = text;
  }
  return node;
}

interface Stroke {
  points: Point[];
  thicknesses: number[];
  joinStart: number | undefined;
}

/** One editor pane: an image, its working annotation, and the interaction state. */
class Pane {
  readonly editor: EditorState;
  private view: ViewTransform = identityView();
  private images: ImageInfo[] = [];
  private bitmap: ImageBitmap | null = null;
  private flow: FlowFieldData | null = null;
  private reprojection: OverlayResult | null = null;
  private draft: StereoDraft | null = null;
  private stroke: Stroke | null = null;
  private tracePoint: [number, number] | null = null;
  private selectedVertex: number | null = null;
  private dragVertex: number | null = null;
  private dragDraftIndex: number | null = null;
  private panAnchor: Point | null = null;

  private readonly canvas: HTMLCanvasElement;
  private readonly imageSelect: HTMLSelectElement;
  private readonly partnerSelect: HTMLSelectElement;
  private readonly transferButton: HTMLButtonElement;
  private readonly commitButton: HTMLButtonElement;
  private readonly discardButton: HTMLButtonElement;
  private readonly saveButton: HTMLButtonElement;
  private readonly versionLabel: HTMLSpanElement;
  private readonly statusLabel: HTMLDivElement;
  private readonly conflictBar: HTMLDivElement;
  private readonly thicknessInput: HTMLInputElement;
  private readonly toolButtons = new Map<ToolMode, HTMLButtonElement>();
  private readonly overlayBoxes = new Map<"flow" | "reprojection" | "mask", HTMLInputElement>();

  constructor(
    private readonly api: AnnotationApi,
    root: HTMLElement,
    title: string,
  ) {
    this.editor = new EditorState(api);

    const pane = el("section", "pane");
    const header = el("header", "pane-header");
    header.append(el("h2", "", title));

    this.imageSelect = el("select", "image-select");
    this.imageSelect.addEventListener("change", () => {
      void this.openSelected();
    });
    header.append(this.imageSelect);

    const toolbar = el("div", "toolbar");
    for (const tool of TOOLS) {
      const button = el("button", "tool", tool);
      button.addEventListener("click", () => {
        this.setTool(tool);
      });
      this.toolButtons.set(tool, button);
      toolbar.append(button);
    }
    header.append(toolbar);

    const overlays = el("div", "overlays");
    for (const name of ["flow", "reprojection", "mask"] as const) {
      const label = el("label", "", name);
      const box = el("input");
      box.type = "checkbox";
      box.addEventListener("change", () => {
        void this.toggleOverlay(name, box.checked);
      });
      this.overlayBoxes.set(name, box);
      label.prepend(box);
      overlays.append(label);
    }
    header.append(overlays);

    const thicknessLabel = el("label", "thickness", "thickness");
    this.thicknessInput = el("input");
    this.thicknessInput.type = "range";
    this.thicknessInput.min = "0.5";
    this.thicknessInput.max = "20";
    this.thicknessInput.step = "0.5";
    this.thicknessInput.value = "2";
    thicknessLabel.append(this.thicknessInput);
    header.append(thicknessLabel);

    this.partnerSelect = el("select", "partner-select");
    this.transferButton = el("button", "", "transfer from partner");
    this.transferButton.addEventListener("click", () => {
      void this.startTransfer();
    });
    this.commitButton = el("button", "", "commit draft");
    this.commitButton.addEventListener("click", () => {
      this.commitDraft();
    });
    this.discardButton = el("button", "", "discard draft");
    this.discardButton.addEventListener("click", () => {
      this.draft = null;
      this.render();
    });
    header.append(this.partnerSelect, this.transferButton, this.commitButton, this.discardButton);

    this.saveButton = el("button", "save", "save");
    this.saveButton.addEventListener("click", () => {
      void this.save();
    });
    this.versionLabel = el("span", "version");
    header.append(this.saveButton, this.versionLabel);

    this.conflictBar = el("div", "conflict-bar");
    const reload = el("button", "", "reload server version");
    reload.addEventListener("click", () => {
      void this.editor.resolveConflictReload().then(() => {
        void this.refreshBitmap();
        this.render();
      });
    });
    const overwrite = el("button", "", "overwrite server version");
    overwrite.addEventListener("click", () => {
      void this.editor.resolveConflictOverwrite().then(() => {
        this.render();
      });
    });
    this.conflictBar.append(el("span", "", "the document changed on the server"), reload, overwrite);

    this.canvas = el("canvas", "editor-canvas");
    this.canvas.tabIndex = 0;
    this.canvas.width = 768;
    this.canvas.height = 576;
    this.bindCanvasEvents();

    this.statusLabel = el("div", "status");

    pane.append(header, this.conflictBar, this.canvas, this.statusLabel);
    root.append(pane);
    this.setTool("draw");
  }

  async init(images: ImageInfo[], index: number): Promise<void> {
    this.images = images;
    for (const info of images) {
      const opt = el("option", "", `${info.id} (${info.width}x${info.height})`);
      opt.value = info.id;
      this.imageSelect.append(opt);
    }
    const start = images[Math.min(index, Math.max(0, images.length - 1))];
    if (start !== undefined) {
      this.imageSelect.value = start.id;
      await this.openSelected();
    }
  }

  private setTool(tool: ToolMode): void {
    this.editor.tool = tool;
    this.stroke = null;
    this.tracePoint = null;
    for (const [name, button] of this.toolButtons) {
      button.classList.toggle("active", name === tool);
    }
    this.render();
  }

  private async openSelected(): Promise<void> {
    const info = this.images.find((im) => im.id === this.imageSelect.value);
    if (info === undefined) {
      return;
    }
    await this.editor.open(info);
    this.view = identityView();
    this.flow = null;
    this.reprojection = null;
    this.draft = null;
    this.stroke = null;
    this.selectedVertex = null;
    for (const box of this.overlayBoxes.values()) {
      box.checked = false;
    }
    this.editor.overlays = { flow: false, reprojection: false, mask: false };
    this.canvas.width = info.width;
    this.canvas.height = info.height;
    await this.refreshBitmap();
    this.refreshPartnerChoices();
    this.render();
  }

  private async refreshBitmap(): Promise<void> {
    const info = this.editor.activeImage;
    if (info === null) {
      return;
    }
    const resp = await fetch(this.api.imageUrl(info.id));
    this.bitmap = await createImageBitmap(await resp.blob());
  }

  private refreshPartnerChoices(): void {
    this.partnerSelect.replaceChildren();
    const active = this.editor.activeImage;
    const partners = this.images.filter((im) => im.id !== active?.id);
    for (const info of partners) {
      const opt = el("option", "", info.id);
      opt.value = info.id;
      this.partnerSelect.append(opt);
    }
    const enabled = partners.length > 0;
    this.partnerSelect.disabled = !enabled;
    this.transferButton.disabled = !enabled;
    const stereoButton = this.toolButtons.get("stereo-transfer");
    if (stereoButton !== undefined) {
      stereoButton.disabled = !enabled;
    }
  }

  private async toggleOverlay(name: "flow" | "reprojection" | "mask", on: boolean): Promise<void> {
    const info = this.editor.activeImage;
    if (info === null) {
      return;
    }
    if (name === "flow") {
      if (on && this.flow === null) {
        try {
          this.flow = await this.api.flowField(info.id);
        } catch (err) {
          this.setBoxChecked(name, false);
          this.toastError(err);
          return;
        }
      }
      this.editor.overlays.flow = on;
    } else if (name === "reprojection") {
      if (on && this.reprojection === null) {
        try {
          this.reprojection = await this.api.overlay(info.id);
        } catch (err) {
          this.setBoxChecked(name, false);
          this.toastError(err);
          return;
        }
      }
      this.editor.overlays.reprojection = on;
    } else {
      this.editor.overlays.mask = on;
    }
    this.render();
  }

  private setBoxChecked(name: "flow" | "reprojection" | "mask", checked: boolean): void {
    const box = this.overlayBoxes.get(name);
    if (box !== undefined) {
      box.checked = checked;
    }
  }

  private toastError(err: unknown): void {
    const message = err instanceof Error ? err.message : String(err);
    const kind = err instanceof ApiError ? err.kind : "error";
    this.editor.lastToast = { kind, message, highlightPixel: null };
    this.render();
  }

  private async startTransfer(): Promise<void> {
    const active = this.editor.activeImage;
    const partnerId = this.partnerSelect.value;
    if (active === null || partnerId === "" || this.editor.doc === null) {
      return;
    }
    const stored = await this.api.getAnnotation(partnerId);
    if (stored.annotation === null) {
      this.editor.lastToast = {
        kind: "empty-partner",
        message: `${partnerId} has no annotation to transfer`,
        highlightPixel: null,
      };
      this.render();
      return;
    }
    this.setTool("stereo-transfer");
    this.draft = await buildStereoDraft(this.api, stored.annotation, active.id, this.editor.doc.camera_id);
    this.render();
  }

  private commitDraft(): void {
    if (this.draft === null) {
      return;
    }
    const result = this.editor.importDraft(this.draft);
    if (result.ok) {
      this.draft = null;
    }
    this.render();
  }

  private async save(): Promise<void> {
    await this.editor.save();
    this.render();
  }

  private bindCanvasEvents(): void {
    this.canvas.addEventListener("contextmenu", (ev) => {
      ev.preventDefault();
    });
    this.canvas.addEventListener("wheel", (ev) => {
      ev.preventDefault();
      const factor = ev.deltaY < 0 ? 1.2 : 1 / 1.2;
      this.view = zoomAround(this.view, this.eventPoint(ev), factor);
      this.render();
    });
    this.canvas.addEventListener("pointerdown", (ev) => {
      this.canvas.focus();
      const screen = this.eventPoint(ev);
      if (ev.button === 1) {
        this.panAnchor = screen;
        ev.preventDefault();
        return;
      }
      if (ev.button !== 0) {
        return;
      }
      this.onPrimaryDown(screen, ev.shiftKey);
    });
    this.canvas.addEventListener("pointermove", (ev) => {
      const screen = this.eventPoint(ev);
      if (this.panAnchor !== null) {
        this.view = panBy(this.view, screen.x - this.panAnchor.x, screen.y - this.panAnchor.y);
        this.panAnchor = screen;
        this.render();
        return;
      }
      if (this.dragDraftIndex !== null && this.draft !== null) {
        const image = screenToImage(this.view, screen);
        if (ev.shiftKey) {
          freeDragDraftVertex(this.draft, this.dragDraftIndex, image);
        } else {
          dragDraftVertex(this.draft, this.dragDraftIndex, image);
        }
        this.render();
      }
    });
    this.canvas.addEventListener("pointerup", (ev) => {
      this.panAnchor = null;
      if (this.dragVertex !== null && this.editor.tool === "edit") {
        const image = screenToImage(this.view, this.eventPoint(ev));
        this.editor.moveVertex(this.dragVertex, image.x, image.y);
        this.dragVertex = null;
        this.render();
      }
      this.dragDraftIndex = null;
    });
    this.canvas.addEventListener("dblclick", (ev) => {
      ev.preventDefault();
      if (this.editor.tool === "draw") {
        this.finishStroke(undefined);
      }
    });
    this.canvas.addEventListener("keydown", (ev) => {
      if ((ev.ctrlKey || ev.metaKey) && ev.key.toLowerCase() === "z") {
        ev.preventDefault();
        if (ev.shiftKey) {
          this.editor.redo();
        } else {
          this.editor.undo();
        }
        this.render();
        return;
      }
      if (ev.key === "Enter" && this.editor.tool === "draw") {
        this.finishStroke(undefined);
      }
      if (ev.key === "Escape") {
        this.stroke = null;
        this.tracePoint = null;
        this.draft = null;
        this.render();
      }
    });
  }

  private onPrimaryDown(screen: Point, shift: boolean): void {
    const doc = this.editor.doc;
    if (doc === null) {
      return;
    }
    const image = screenToImage(this.view, screen);
    const hit = hitTestVertex(doc, this.view, screen);
    switch (this.editor.tool) {
      case "draw":
        if (this.stroke === null) {
          this.stroke = { points: [], thicknesses: [], joinStart: hit ?? undefined };
          if (hit === null) {
            this.pushStrokePoint(image);
          }
        } else if (hit !== null) {
          this.finishStroke(hit);
        } else {
          this.pushStrokePoint(image);
        }
        break;
      case "edit":
        this.selectedVertex = hit;
        this.dragVertex = hit;
        break;
      case "keypoint":
        if (hit !== null) {
          this.selectedVertex = hit;
          const existing = doc.vertices.find((v) => v.id === hit)?.keypoint ?? "";
          const name = window.prompt("keypoint name (empty clears)", existing);
          if (name !== null) {
            if (name === "") {
              this.editor.clearKeypoint(hit);
            } else {
              this.editor.setKeypoint(hit, name);
            }
          }
        }
        break;
      case "stereo-transfer":
        if (this.draft !== null) {
          this.dragDraftIndex = this.nearestDraftVertex(image);
          if (this.dragDraftIndex !== null) {
            if (shift) {
              freeDragDraftVertex(this.draft, this.dragDraftIndex, image);
            } else {
              dragDraftVertex(this.draft, this.dragDraftIndex, image);
            }
          }
        }
        break;
      case "auto-trace":
        if (this.tracePoint === null) {
          this.tracePoint = [image.x, image.y];
        } else {
          const p0 = this.tracePoint;
          this.tracePoint = null;
          void this.editor.autoTrace(p0, [image.x, image.y]).then(() => {
            this.render();
          });
        }
        break;
    }
    this.render();
  }

  private pushStrokePoint(image: Point): void {
    if (this.stroke === null) {
      return;
    }
    this.stroke.points.push(image);
    this.stroke.thicknesses.push(Number(this.thicknessInput.value));
  }

  private finishStroke(joinEnd: number | undefined): void {
    if (this.stroke === null) {
      return;
    }
    const { points, thicknesses, joinStart } = this.stroke;
    this.stroke = null;
    this.editor.drawCurve(points, thicknesses, { joinStart, joinEnd });
    this.render();
  }

  private nearestDraftVertex(image: Point): number | null {
    if (this.draft === null) {
      return null;
    }
    const radius = 10 / this.view.scale;
    let best: number | null = null;
    let bestDist = radius;
    for (let i = 0; i < this.draft.vertices.length; i++) {
      const v = this.draft.vertices[i];
      if (v === undefined) {
        continue;
      }
      const d = Math.hypot(v.x - image.x, v.y - image.y);
      if (d <= bestDist) {
        best = i;
        bestDist = d;
      }
    }
    return best;
  }

  private eventPoint(ev: MouseEvent): Point {
    const rect = this.canvas.getBoundingClientRect();
    return { x: ev.clientX - rect.left, y: ev.clientY - rect.top };
  }

  private render(): void {
    const ctx = this.canvas.getContext("2d");
    const info = this.editor.activeImage;
    if (ctx === null || info === null) {
      return;
    }
    const scene: Scene = {
      image: this.bitmap,
      width: info.width,
      height: info.height,
      doc: this.editor.doc,
      draft: this.draft,
      flow: this.flow,
      mask: null,
      reprojection: this.reprojection,
      overlays: this.editor.overlays,
      selectedVertex: this.selectedVertex,
      highlightPixel: this.editor.lastToast?.highlightPixel ?? null,
    };
    renderScene(ctx, scene, this.view);
    this.drawTransients(ctx);

    this.versionLabel.textContent = `v${this.editor.serverVersion}${this.editor.dirty ? " *" : ""}`;
    this.saveButton.disabled = !this.editor.dirty;
    this.conflictBar.style.display = this.editor.conflict === null ? "none" : "flex";
    const badge = this.editor.lastRefusal;
    const toast = this.editor.lastToast;
    const parts: string[] = [];
    if (badge !== null) {
      parts.push(`refused: ${badge.message}`);
    }
    if (toast !== null) {
      parts.push(`${toast.kind}: ${toast.message}`);
    }
    if (this.stroke !== null) {
      parts.push(`stroke: ${this.stroke.points.length} points (Enter or double click to finish)`);
    }
    if (this.tracePoint !== null) {
      parts.push("trace: pick the second endpoint");
    }
    this.statusLabel.textContent = parts.join(" | ");
  }

  private drawTransients(ctx: CanvasRenderingContext2D): void {
    ctx.save();
    ctx.setTransform(this.view.scale, 0, 0, this.view.scale, this.view.tx, this.view.ty);
    if (this.stroke !== null && this.stroke.points.length > 0) {
      ctx.strokeStyle = "rgba(46, 125, 50, 0.6)";
      ctx.lineWidth = 1.5 / this.view.scale;
      ctx.beginPath();
      let started = false;
      for (const p of this.stroke.points) {
        if (started) {
          ctx.lineTo(p.x, p.y);
        } else {
          ctx.moveTo(p.x, p.y);
          started = true;
        }
      }
      ctx.stroke();
    }
    if (this.tracePoint !== null) {
      const [x, y] = this.tracePoint;
      ctx.fillStyle = "#00897b";
      ctx.beginPath();
      ctx.arc(x, y, 4 / this.view.scale, 0, Math.PI * 2);
      ctx.fill();
    }
    ctx.restore();
  }
}

async function boot(): Promise<void> {
  const root = document.getElementById("app");
  if (root === null) {
    throw new Error("missing #app element");
  }
  const base = new URLSearchParams(window.location.search).get("server") ?? "http://127.0.0.1:8000";
  const api = new HttpAnnotationApi(base);
  const images = await api.listImages();
  const left = new Pane(api, root, "left pane");
  const right = new Pane(api, root, "right pane");
  await left.init(images, 0);
  await right.init(images, 1);
}

void boot();
