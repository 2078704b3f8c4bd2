import type {
  AnnotationDoc,
  EpipolarLine,
  FlowParams,
  ImageInfo,
  OverlayResult,
  TraceParams,
  TraceResult,
  Violation,
} from "./types.js";
import { parseFlow, type FlowFieldData } from "./flowbytes.js";

/** Typed client for the annotation service. The editor only ever talks to
 * the service through this interface, which keeps state machines testable
 * against a stub and the browser build free of any other data path. */
export interface AnnotationApi {
  listImages(): Promise<ImageInfo[]>;
  getAnnotation(imageId: string): Promise<{ version: number; annotation: AnnotationDoc | null }>;
  putAnnotation(imageId: string, doc: AnnotationDoc, expectedVersion: number): Promise<number>;
  epipolarLine(srcCamera: string, dstCamera: string, x: number, y: number): Promise<EpipolarLine>;
  trace(imageId: string, p0: [number, number], p1: [number, number], flow?: FlowParams, params?: TraceParams): Promise<TraceResult>;
  flowField(imageId: string, params?: FlowParams): Promise<FlowFieldData>;
  overlay(imageId: string): Promise<OverlayResult>;
  imageUrl(imageId: string): string;
}

export class ApiError extends Error {
  constructor(
    readonly status: number,
    /** Machine-readable kind from the error body, e.g. "NoFlowAtStart". */
    readonly kind: string,
    message: string,
  ) {
    super(message);
    this.name = "ApiError";
  }
}

export class StaleVersionError extends ApiError {
  constructor(readonly currentVersion: number) {
    super(409, "stale-version", `document moved on to version ${currentVersion}`);
    this.name = "StaleVersionError";
  }
}

export class RejectedDocumentError extends ApiError {
  constructor(readonly violations: Violation[]) {
    super(422, "rejected-document", violations.map((v) => `${v.rule}: ${v.subject}`).join("; "));
    this.name = "RejectedDocumentError";
  }
}

interface ErrorDetail {
  error?: string;
  detail?: string;
  current?: number;
  violations?: Violation[];
}

async function raiseFor(resp: Response): Promise<never> {
  let detail: ErrorDetail = {};
  try {
    detail = ((await resp.json()) as { detail?: ErrorDetail }).detail ?? {};
  } catch {
    // non-JSON body; fall through to the generic error
  }
  if (resp.status === 409 && detail.error === "stale-version" && detail.current !== undefined) {
    throw new StaleVersionError(detail.current);
  }
  if (detail.violations !== undefined) {
    throw new RejectedDocumentError(detail.violations);
  }
  throw new ApiError(resp.status, detail.error ?? `http-${resp.status}`, detail.detail ?? resp.statusText);
}

export class HttpAnnotationApi implements AnnotationApi {
  constructor(readonly base: string) {}

  private async getJson<T>(path: string): Promise<T> {
    const resp = await fetch(this.base + path);
    if (!resp.ok) {
      await raiseFor(resp);
    }
    return (await resp.json()) as T;
  }

  async listImages(): Promise<ImageInfo[]> {
    const body = await this.getJson<{ images: ImageInfo[] }>("/images");
    return body.images;
  }

  async getAnnotation(imageId: string): Promise<{ version: number; annotation: AnnotationDoc | null }> {
    return this.getJson(`/annotations/${encodeURIComponent(imageId)}`);
  }

  async putAnnotation(imageId: string, doc: AnnotationDoc, expectedVersion: number): Promise<number> {
    const resp = await fetch(this.base + `/annotations/${encodeURIComponent(imageId)}`, {
      method: "PUT",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ annotation: doc, expected_version: expectedVersion }),
    });
    if (!resp.ok) {
      await raiseFor(resp);
    }
    const body = (await resp.json()) as { version: number };
    return body.version;
  }

  async epipolarLine(srcCamera: string, dstCamera: string, x: number, y: number): Promise<EpipolarLine> {
    const pair = `${encodeURIComponent(srcCamera)}:${encodeURIComponent(dstCamera)}`;
    const body = await this.getJson<{ line: EpipolarLine }>(`/epipolar/${pair}/${x}/${y}`);
    return body.line;
  }

  async trace(
    imageId: string,
    p0: [number, number],
    p1: [number, number],
    flow?: FlowParams,
    params?: TraceParams,
  ): Promise<TraceResult> {
    const payload: Record<string, unknown> = { p0, p1 };
    if (flow !== undefined) {
      payload.flow = flow;
    }
    if (params !== undefined) {
      payload.params = params;
    }
    const resp = await fetch(this.base + `/trace/${encodeURIComponent(imageId)}`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(payload),
    });
    if (!resp.ok) {
      await raiseFor(resp);
    }
    return (await resp.json()) as TraceResult;
  }

  async flowField(imageId: string, params?: FlowParams): Promise<FlowFieldData> {
    const q = new URLSearchParams();
    if (params?.r !== undefined) {
      q.set("r", String(params.r));
    }
    if (params?.sigma !== undefined) {
      q.set("sigma", String(params.sigma));
    }
    if (params?.n !== undefined) {
      q.set("n", String(params.n));
    }
    if (params?.threshold !== undefined) {
      q.set("threshold", String(params.threshold));
    }
    if (params?.scales !== undefined) {
      q.set("scales", params.scales.join(","));
    }
    const suffix = q.size > 0 ? `?${q.toString()}` : "";
    const resp = await fetch(this.base + `/flow/${encodeURIComponent(imageId)}${suffix}`);
    if (!resp.ok) {
      await raiseFor(resp);
    }
    return parseFlow(await resp.arrayBuffer());
  }

  async overlay(imageId: string): Promise<OverlayResult> {
    return this.getJson(`/overlay/${encodeURIComponent(imageId)}`);
  }

  imageUrl(imageId: string): string {
    return this.base + `/images/${encodeURIComponent(imageId)}`;
  }
}
