import { describe, expect, it } from "vitest";

import {
  canonicalLabelJson,
  ClassLabel,
  isClassLabel,
  parseLabelJson,
} from "../src/labels.js";

describe("canonicalLabelJson", () => {
  it("serializes an empty map with an inline labels object", () => {
    expect(canonicalLabelJson("t000", new Map())).toBe(
      '{\n  "tile_id": "t000",\n  "labels": {}\n}\n',
    );
  });

  it("orders region keys numerically, not lexically", () => {
    const labels = new Map<number, ClassLabel>([
      [10, ClassLabel.ThickCloud],
      [3, ClassLabel.CirrusCloud],
    ]);
    expect(canonicalLabelJson("t000", labels)).toBe(
      '{\n  "tile_id": "t000",\n  "labels": {\n    "3": 1,\n    "10": 0\n  }\n}\n',
    );
  });

  it("ends with exactly one newline", () => {
    const text = canonicalLabelJson("t001", new Map([[0, ClassLabel.Building]]));
    expect(text.endsWith("}\n")).toBe(true);
    expect(text.endsWith("\n\n")).toBe(false);
  });
});

describe("parseLabelJson", () => {
  it("round-trips what canonicalLabelJson wrote", () => {
    const labels = new Map<number, ClassLabel>([
      [7, ClassLabel.OtherCulture],
      [2, ClassLabel.ThickCloud],
      [19, ClassLabel.Building],
    ]);
    const parsed = parseLabelJson(canonicalLabelJson("t042", labels));
    expect(parsed.tileId).toBe("t042");
    expect(parsed.labels).toEqual(labels);
  });

  it("rejects documents without the required fields", () => {
    expect(() => parseLabelJson("{}")).toThrow();
    expect(() => parseLabelJson('{"labels": {}}')).toThrow();
    expect(() => parseLabelJson('{"tile_id": "t0"}')).toThrow();
  });

  it("rejects label values outside the class range", () => {
    expect(() =>
      parseLabelJson('{"tile_id": "t0", "labels": {"1": 4}}'),
    ).toThrow();
    expect(() =>
      parseLabelJson('{"tile_id": "t0", "labels": {"1": -1}}'),
    ).toThrow();
    expect(() =>
      parseLabelJson('{"tile_id": "t0", "labels": {"x": 1}}'),
    ).toThrow();
  });
});

describe("isClassLabel", () => {
  it("accepts exactly the four wire values", () => {
    expect([0, 1, 2, 3].every(isClassLabel)).toBe(true);
    expect(isClassLabel(4)).toBe(false);
    expect(isClassLabel(1.5)).toBe(false);
  });
});
