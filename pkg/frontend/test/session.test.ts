import { describe, expect, it } from "vitest";

import { ClassLabel } from "../src/labels.js";
import { AnnotationSession } from "../src/session.js";

function fresh(nRegions = 100): AnnotationSession {
  return new AnnotationSession("t000", nRegions, new Map(), '"etag0"');
}

describe("AnnotationSession", () => {
  it("records labels and turns dirty", () => {
    const s = fresh();
    expect(s.dirty).toBe(false);
    s.setLabel(4, ClassLabel.Building);
    expect(s.getLabel(4)).toBe(ClassLabel.Building);
    expect(s.labeledCount).toBe(1);
    expect(s.dirty).toBe(true);
  });

  it("rejects region ids outside the tile", () => {
    const s = fresh(10);
    expect(() => s.setLabel(10, ClassLabel.ThickCloud)).toThrow();
    expect(() => s.setLabel(-1, ClassLabel.ThickCloud)).toThrow();
  });

  it("ignores a no-op relabel so undo stays meaningful", () => {
    const s = fresh();
    s.setLabel(1, ClassLabel.ThickCloud);
    s.setLabel(1, ClassLabel.ThickCloud);
    expect(s.undo()).toBe(true);
    expect(s.getLabel(1)).toBeUndefined();
    expect(s.undo()).toBe(false);
  });

  it("undoes back through at least 50 changes", () => {
    const s = fresh(100);
    for (let i = 0; i < 60; i++) {
      s.setLabel(i % 100, ((i % 4) as ClassLabel));
    }
    let undone = 0;
    while (s.undo()) {
      undone += 1;
    }
    expect(undone).toBeGreaterThanOrEqual(50);
  });

  it("redo reapplies what undo removed", () => {
    const s = fresh();
    s.setLabel(2, ClassLabel.CirrusCloud);
    s.setLabel(2, ClassLabel.Building);
    s.undo();
    expect(s.getLabel(2)).toBe(ClassLabel.CirrusCloud);
    s.redo();
    expect(s.getLabel(2)).toBe(ClassLabel.Building);
  });

  it("a new change clears the redo branch", () => {
    const s = fresh();
    s.setLabel(1, ClassLabel.ThickCloud);
    s.undo();
    s.setLabel(1, ClassLabel.OtherCulture);
    expect(s.redo()).toBe(false);
    expect(s.getLabel(1)).toBe(ClassLabel.OtherCulture);
  });

  it("markSaved clears dirty and adopts the new tag", () => {
    const s = fresh();
    s.setLabel(0, ClassLabel.ThickCloud);
    s.markSaved('"etag1"');
    expect(s.dirty).toBe(false);
    expect(s.etag).toBe('"etag1"');
  });

  it("merge keeps local edits and adopts server values elsewhere", () => {
    const s = new AnnotationSession(
      "t000",
      10,
      new Map([[5, ClassLabel.OtherCulture]]),
      '"etag0"',
    );
    s.setLabel(1, ClassLabel.ThickCloud);
    s.setLabel(2, ClassLabel.Building);
    const server = new Map<number, ClassLabel>([
      [1, ClassLabel.CirrusCloud],
      [3, ClassLabel.CirrusCloud],
      [5, ClassLabel.Building],
    ]);
    s.mergeServerState(server, '"etag9"');
    // regions 1 and 2 were touched here, so the local values survive
    expect(s.getLabel(1)).toBe(ClassLabel.ThickCloud);
    expect(s.getLabel(2)).toBe(ClassLabel.Building);
    // untouched regions follow the server, including ones we never saw
    expect(s.getLabel(3)).toBe(ClassLabel.CirrusCloud);
    expect(s.getLabel(5)).toBe(ClassLabel.Building);
    expect(s.etag).toBe('"etag9"');
    expect(s.dirty).toBe(true);
  });

  it("serializes through the canonical writer", () => {
    const s = fresh();
    s.setLabel(10, ClassLabel.ThickCloud);
    s.setLabel(3, ClassLabel.CirrusCloud);
    expect(s.toJson()).toBe(
      '{\n  "tile_id": "t000",\n  "labels": {\n    "3": 1,\n    "10": 0\n  }\n}\n',
    );
  });
});
