import type { EpipolarLine, Point } from "./types.js";

/** Perpendicular distance from p to the line a*x + b*y + c = 0. */
export function distanceToLine(line: EpipolarLine, p: Point): number {
  const [a, b, c] = line;
  const norm = Math.hypot(a, b);
  if (norm === 0) {
    throw new Error("degenerate line: a and b are both zero");
  }
  return Math.abs(a * p.x + b * p.y + c) / norm;
}

/** Orthogonal projection of p onto the line a*x + b*y + c = 0. */
export function closestPointOnLine(line: EpipolarLine, p: Point): Point {
  const [a, b, c] = line;
  const n2 = a * a + b * b;
  if (n2 === 0) {
    throw new Error("degenerate line: a and b are both zero");
  }
  const k = (a * p.x + b * p.y + c) / n2;
  return { x: p.x - k * a, y: p.y - k * b };
}

/** Distance from p to the segment [s0, s1]. */
export function distanceToSegment(p: Point, s0: Point, s1: Point): number {
  const dx = s1.x - s0.x;
  const dy = s1.y - s0.y;
  const len2 = dx * dx + dy * dy;
  if (len2 === 0) {
    return Math.hypot(p.x - s0.x, p.y - s0.y);
  }
  let t = ((p.x - s0.x) * dx + (p.y - s0.y) * dy) / len2;
  t = Math.max(0, Math.min(1, t));
  return Math.hypot(p.x - (s0.x + t * dx), p.y - (s0.y + t * dy));
}

/** The two points where the line crosses a w-by-h image border, for drawing.
 * Returns null when the line misses the image entirely. */
export function clipLineToImage(
  line: EpipolarLine,
  width: number,
  height: number,
): [Point, Point] | null {
  const [a, b, c] = line;
  const hits: Point[] = [];
  const push = (x: number, y: number) => {
    if (x >= 0 && x <= width && y >= 0 && y <= height) {
      hits.push({ x, y });
    }
  };
  if (b !== 0) {
    push(0, -c / b);
    push(width, -(c + a * width) / b);
  }
  if (a !== 0) {
    push(-c / a, 0);
    push(-(c + b * height) / a, height);
  }
  // dedupe corner double-hits
  const uniq: Point[] = [];
  for (const h of hits) {
    if (!uniq.some((u) => Math.hypot(u.x - h.x, u.y - h.y) < 1e-9)) {
      uniq.push(h);
    }
  }
  if (uniq.length < 2) {
    return null;
  }
  return [uniq[0]!, uniq[1]!];
}
