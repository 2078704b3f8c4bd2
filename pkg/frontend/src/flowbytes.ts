/** Parser for the service's binary flow format.
 *
 * Layout: "FFLD" magic, then three little-endian uint32 (version, width,
 * height), then row-major pixels, each a uint8 direction count followed by
 * count little-endian float32 (vx, vy) pairs. Count is at most 2.
 */

export interface FlowFieldData {
  width: number;
  height: number;
  /** Directions per pixel, row-major, length width*height. */
  count: Uint8Array;
  /** Packed [y][x][k][2] with k in {0, 1}; unset slots stay zero. */
  vectors: Float32Array;
}

const MAGIC = 0x46464c44; // "FFLD" read as big-endian u32

export function parseFlow(buf: ArrayBuffer): FlowFieldData {
  const view = new DataView(buf);
  if (buf.byteLength < 16 || view.getUint32(0, false) !== MAGIC) {
    throw new Error("bad flow header");
  }
  const version = view.getUint32(4, true);
  if (version !== 1) {
    throw new Error(`unsupported flow version ${version}`);
  }
  const width = view.getUint32(8, true);
  const height = view.getUint32(12, true);
  const count = new Uint8Array(width * height);
  const vectors = new Float32Array(width * height * 4);
  let pos = 16;
  for (let i = 0; i < width * height; i++) {
    const n = view.getUint8(pos);
    pos += 1;
    if (n > 2) {
      throw new Error(`pixel ${i}: direction count ${n} out of range`);
    }
    count[i] = n;
    for (let k = 0; k < n; k++) {
      vectors[i * 4 + k * 2] = view.getFloat32(pos, true);
      vectors[i * 4 + k * 2 + 1] = view.getFloat32(pos + 4, true);
      pos += 8;
    }
  }
  if (pos !== buf.byteLength) {
    throw new Error(`trailing bytes: consumed ${pos} of ${buf.byteLength}`);
  }
  return { width, height, count, vectors };
}

export function flowCountAt(flow: FlowFieldData, x: number, y: number): number {
  return flow.count[y * flow.width + x] ?? 0;
}

export function flowVectorAt(
  flow: FlowFieldData,
  x: number,
  y: number,
  k: number,
): [number, number] {
  const base = (y * flow.width + x) * 4 + k * 2;
  return [flow.vectors[base] ?? 0, flow.vectors[base + 1] ?? 0];
}
