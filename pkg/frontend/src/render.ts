import { ClassLabel, PALETTE } from "./labels.js";

export interface ComposeOptions {
  /** Fill opacity for labeled regions, 0..1. */
  fillAlpha: number;
  /** Region id under the cursor, or -1 for none. */
  hover: number;
}

export const DEFAULT_COMPOSE: ComposeOptions = { fillAlpha: 0.45, hover: -1 };

const BOUNDARY_RGB: readonly [number, number, number] = [20, 20, 20];
const HOVER_BOOST = 40;

/**
 * Blend label fills, region boundaries, and the hover highlight over the
 * base image. Pure function of arrays so it can run under tests without a
 * canvas; the caller hands the result to putImageData.
 */
export function composeOverlay(
  base: Uint8ClampedArray,
  raster: Int32Array,
  boundary: Uint8Array,
  labels: ReadonlyMap<number, ClassLabel>,
  options: ComposeOptions = DEFAULT_COMPOSE,
): Uint8ClampedArray<ArrayBuffer> {
  const n = raster.length;
  if (base.length !== 4 * n || boundary.length !== n) {
    throw new Error("overlay inputs disagree on pixel count");
  }
  const out = new Uint8ClampedArray(base);
  const alpha = options.fillAlpha;
  for (let i = 0; i < n; i++) {
    const region = raster[i] as number;
    const label = labels.get(region);
    const o = 4 * i;
    if (label !== undefined) {
      const [r, g, b] = PALETTE[label];
      out[o] = (out[o] as number) * (1 - alpha) + r * alpha;
      out[o + 1] = (out[o + 1] as number) * (1 - alpha) + g * alpha;
      out[o + 2] = (out[o + 2] as number) * (1 - alpha) + b * alpha;
    }
    if (region === options.hover) {
      out[o] = (out[o] as number) + HOVER_BOOST;
      out[o + 1] = (out[o + 1] as number) + HOVER_BOOST;
      out[o + 2] = (out[o + 2] as number) + HOVER_BOOST;
    }
    if (boundary[i]) {
      out[o] = BOUNDARY_RGB[0];
      out[o + 1] = BOUNDARY_RGB[1];
      out[o + 2] = BOUNDARY_RGB[2];
    }
    out[o + 3] = 255;
  }
  return out;
}
