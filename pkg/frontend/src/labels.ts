/** The four region classes, in wire order. */
export enum ClassLabel {
  ThickCloud = 0,
  CirrusCloud = 1,
  Building = 2,
  OtherCulture = 3,
}

export const CLASS_NAMES: readonly [string, string, string, string] = [
  "thick cloud",
  "cirrus cloud",
  "building",
  "other culture",
];

type Rgb = readonly [number, number, number];

/** Fill colors: white, red, green, blue. */
export const PALETTE: readonly [Rgb, Rgb, Rgb, Rgb] = [
  [255, 255, 255],
  [230, 60, 60],
  [70, 200, 90],
  [70, 110, 235],
];

export const ALL_LABELS: ReadonlyArray<ClassLabel> = [
  ClassLabel.ThickCloud,
  ClassLabel.CirrusCloud,
  ClassLabel.Building,
  ClassLabel.OtherCulture,
];

export function isClassLabel(value: number): value is ClassLabel {
  return Number.isInteger(value) && value >= 0 && value <= 3;
}

/**
 * Serialize labels exactly as the pipeline writes them: two-space indent,
 * region keys in numeric order, trailing newline. Saved files and server
 * responses are byte-identical to this.
 */
export function canonicalLabelJson(
  tileId: string,
  labels: ReadonlyMap<number, ClassLabel>,
): string {
  const regions = [...labels.keys()].sort((a, b) => a - b);
  const lines: string[] = ["{", `  "tile_id": ${JSON.stringify(tileId)},`];
  if (regions.length === 0) {
    lines.push('  "labels": {}');
  } else {
    lines.push('  "labels": {');
    regions.forEach((region, i) => {
      const comma = i < regions.length - 1 ? "," : "";
      lines.push(`    "${region}": ${labels.get(region)}${comma}`);
    });
    lines.push("  }");
  }
  lines.push("}");
  return lines.join("\n") + "\n";
}

/** Parse a label document. Malformed entries throw; nothing is dropped. */
export function parseLabelJson(text: string): {
  tileId: string;
  labels: Map<number, ClassLabel>;
} {
  const doc = JSON.parse(text) as { tile_id?: unknown; labels?: unknown };
  if (typeof doc.tile_id !== "string" || typeof doc.labels !== "object" || doc.labels === null) {
    throw new Error("label document must have tile_id and labels");
  }
  const labels = new Map<number, ClassLabel>();
  for (const [key, value] of Object.entries(doc.labels as Record<string, unknown>)) {
    const region = Number(key);
    if (!Number.isInteger(region) || region < 0 || typeof value !== "number" || !isClassLabel(value)) {
      throw new Error(`bad label entry ${key}: ${String(value)}`);
    }
    labels.set(region, value);
  }
  return { tileId: doc.tile_id, labels };
}
