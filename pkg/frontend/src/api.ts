import { ClassLabel, parseLabelJson } from "./labels.js";

export interface TileSummary {
  id: string;
  width: number;
  height: number;
  n_regions: number;
  n_labeled: number;
}

export interface SuperpixelPayload {
  tile_id: string;
  width: number;
  height: number;
  n_regions: number;
  rle: number[];
  adjacency: number[][];
}

export interface LabelState {
  etag: string;
  text: string;
  labels: Map<number, ClassLabel>;
}

export type PutResult =
  | { kind: "saved"; etag: string }
  | { kind: "conflict"; server: LabelState };

/** Thin fetch wrapper for the label server's JSON endpoints. */
export class ApiClient {
  constructor(private readonly base: string = "") {}

  private url(path: string): string {
    return `${this.base}${path}`;
  }

  async listTiles(): Promise<TileSummary[]> {
    const response = await fetch(this.url("/api/tiles"));
    if (!response.ok) {
      throw new Error(`tile listing failed: ${response.status}`);
    }
    return (await response.json()) as TileSummary[];
  }

  async fetchSuperpixels(tileId: string): Promise<SuperpixelPayload> {
    const response = await fetch(
      this.url(`/api/tiles/${tileId}/superpixels.json`),
    );
    if (!response.ok) {
      throw new Error(`superpixels for ${tileId} failed: ${response.status}`);
    }
    return (await response.json()) as SuperpixelPayload;
  }

  imageUrl(tileId: string): string {
    return this.url(`/api/tiles/${tileId}/image.png`);
  }

  async fetchLabels(tileId: string): Promise<LabelState> {
    const response = await fetch(this.url(`/api/tiles/${tileId}/labels`));
    if (!response.ok) {
      throw new Error(`labels for ${tileId} failed: ${response.status}`);
    }
    const etag = response.headers.get("ETag");
    if (!etag) {
      throw new Error("label response missing ETag header");
    }
    const text = await response.text();
    return { etag, text, labels: parseLabelJson(text).labels };
  }

  /**
   * Save with optimistic concurrency. A stale tag comes back as a conflict
   * carrying the server's current state so the caller can merge; nothing is
   * retried silently.
   */
  async putLabels(
    tileId: string,
    body: string,
    etag: string,
  ): Promise<PutResult> {
    const response = await fetch(this.url(`/api/tiles/${tileId}/labels`), {
      method: "PUT",
      headers: { "Content-Type": "application/json", "If-Match": etag },
      body,
    });
    if (response.status === 409) {
      const serverTag = response.headers.get("ETag");
      if (!serverTag) {
        throw new Error("conflict response missing ETag header");
      }
      const text = await response.text();
      return {
        kind: "conflict",
        server: { etag: serverTag, text, labels: parseLabelJson(text).labels },
      };
    }
    if (!response.ok) {
      throw new Error(`label save for ${tileId} failed: ${response.status}`);
    }
    const newTag = response.headers.get("ETag");
    if (!newTag) {
      throw new Error("save response missing ETag header");
    }
    return { kind: "saved", etag: newTag };
  }
}
