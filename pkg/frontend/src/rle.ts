/** Run-length raster utilities for the superpixels payload. */

/**
 * Decode row-major [value, runLength, ...] pairs into a dense raster.
 * The runs must cover exactly `size` pixels.
 */
export function decodeRle(rle: ReadonlyArray<number>, size: number): Int32Array {
  if (rle.length % 2 !== 0) {
    throw new Error("run-length data must be (value, length) pairs");
  }
  const out = new Int32Array(size);
  let at = 0;
  for (let i = 0; i < rle.length; i += 2) {
    const value = rle[i]!;
    const run = rle[i + 1]!;
    if (run <= 0 || at + run > size) {
      throw new Error(`runs cover ${at + run} pixels of ${size}`);
    }
    out.fill(value, at, at + run);
    at += run;
  }
  if (at !== size) {
    throw new Error(`runs cover ${at} pixels of ${size}`);
  }
  return out;
}

/**
 * Mark every pixel whose 4-neighbor belongs to a different region.
 * Returns a 0/1 mask of the same length as the raster.
 */
export function boundaryMask(
  raster: Int32Array,
  width: number,
  height: number,
): Uint8Array {
  if (raster.length !== width * height) {
    throw new Error("raster size does not match dimensions");
  }
  const mask = new Uint8Array(raster.length);
  for (let y = 0; y < height; y++) {
    const row = y * width;
    for (let x = 0; x < width; x++) {
      const here = raster[row + x]!;
      if (
        (x + 1 < width && raster[row + x + 1] !== here) ||
        (x > 0 && raster[row + x - 1] !== here) ||
        (y + 1 < height && raster[row + width + x] !== here) ||
        (y > 0 && raster[row - width + x] !== here)
      ) {
        mask[row + x] = 1;
      }
    }
  }
  return mask;
}
