import { describe, expect, it } from "vitest";

import { boundaryMask, decodeRle } from "../src/rle.js";

describe("decodeRle", () => {
  it("expands value and run-length pairs in order", () => {
    const raster = decodeRle([5, 3, 2, 1, 5, 2], 6);
    expect([...raster]).toEqual([5, 5, 5, 2, 5, 5]);
  });

  it("rejects runs that do not cover the raster exactly", () => {
    expect(() => decodeRle([1, 3], 4)).toThrow();
    expect(() => decodeRle([1, 5], 4)).toThrow();
  });

  it("rejects odd-length and non-positive runs", () => {
    expect(() => decodeRle([1, 2, 3], 3)).toThrow();
    expect(() => decodeRle([1, 0, 2, 4], 4)).toThrow();
  });
});

describe("boundaryMask", () => {
  it("marks pixels whose 4-neighborhood crosses a region edge", () => {
    // 4x2 raster split into left and right halves: the two middle columns
    // touch the divide, the outer columns do not.
    const raster = Int32Array.from([0, 0, 1, 1, 0, 0, 1, 1]);
    const mask = boundaryMask(raster, 4, 2);
    expect([...mask]).toEqual([0, 1, 1, 0, 0, 1, 1, 0]);
  });

  it("is all zero for a single region", () => {
    const raster = new Int32Array(9).fill(7);
    expect([...boundaryMask(raster, 3, 3)]).toEqual(new Array(9).fill(0));
  });

  it("uses 4-connectivity, so diagonal contact alone marks via the sides", () => {
    // 2x2 checkerboard: every pixel differs from both its row and column
    // neighbor, so all four are boundary.
    const raster = Int32Array.from([0, 1, 1, 0]);
    expect([...boundaryMask(raster, 2, 2)]).toEqual([1, 1, 1, 1]);
  });
});
