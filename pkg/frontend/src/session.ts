import { canonicalLabelJson, ClassLabel } from "./labels.js";

interface UndoEntry {
  region: number;
  previous: ClassLabel | undefined;
}

const UNDO_DEPTH = 200;

/**
 * One tile's labeling state: the label map, the ETag the server last gave
 * us, and undo history. Conflict handling keeps whatever the user changed
 * in this session: merging adopts server values only for untouched regions.
 */
export class AnnotationSession {
  readonly tileId: string;
  readonly nRegions: number;
  etag: string;
  dirty = false;

  private labels: Map<number, ClassLabel>;
  private undoStack: UndoEntry[] = [];
  private redoStack: UndoEntry[] = [];
  private touched = new Set<number>();

  constructor(
    tileId: string,
    nRegions: number,
    initial: ReadonlyMap<number, ClassLabel>,
    etag: string,
  ) {
    this.tileId = tileId;
    this.nRegions = nRegions;
    this.labels = new Map(initial);
    this.etag = etag;
  }

  getLabel(region: number): ClassLabel | undefined {
    return this.labels.get(region);
  }

  get labeledCount(): number {
    return this.labels.size;
  }

  allLabels(): ReadonlyMap<number, ClassLabel> {
    return this.labels;
  }

  setLabel(region: number, label: ClassLabel): void {
    if (!Number.isInteger(region) || region < 0 || region >= this.nRegions) {
      throw new Error(`region ${region} outside 0..${this.nRegions - 1}`);
    }
    const previous = this.labels.get(region);
    if (previous === label) {
      return;
    }
    this.undoStack.push({ region, previous });
    if (this.undoStack.length > UNDO_DEPTH) {
      this.undoStack.shift();
    }
    this.redoStack = [];
    this.labels.set(region, label);
    this.touched.add(region);
    this.dirty = true;
  }

  /** Revert the latest change. Returns false when there is nothing to undo. */
  undo(): boolean {
    const entry = this.undoStack.pop();
    if (!entry) {
      return false;
    }
    const current = this.labels.get(entry.region);
    this.redoStack.push({ region: entry.region, previous: current });
    if (entry.previous === undefined) {
      this.labels.delete(entry.region);
    } else {
      this.labels.set(entry.region, entry.previous);
    }
    this.dirty = true;
    return true;
  }

  redo(): boolean {
    const entry = this.redoStack.pop();
    if (!entry) {
      return false;
    }
    const current = this.labels.get(entry.region);
    this.undoStack.push({ region: entry.region, previous: current });
    if (entry.previous === undefined) {
      this.labels.delete(entry.region);
    } else {
      this.labels.set(entry.region, entry.previous);
    }
    this.dirty = true;
    return true;
  }

  toJson(): string {
    return canonicalLabelJson(this.tileId, this.labels);
  }

  /** The server accepted our state at `etag`. */
  markSaved(etag: string): void {
    this.etag = etag;
    this.dirty = false;
  }

  /**
   * Fold in the server's current state after a conflict. Regions changed
   * locally in this session win; everything else adopts the server value.
   * The next save retries against `etag`.
   */
  mergeServerState(server: ReadonlyMap<number, ClassLabel>, etag: string): void {
    const merged = new Map(server);
    for (const region of this.touched) {
      const mine = this.labels.get(region);
      if (mine === undefined) {
        merged.delete(region);
      } else {
        merged.set(region, mine);
      }
    }
    this.labels = merged;
    this.etag = etag;
    this.dirty = true;
  }
}
