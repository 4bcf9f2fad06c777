import { ApiClient, SuperpixelPayload, TileSummary } from "./api.js";
import {
  ALL_LABELS,
  CLASS_NAMES,
  ClassLabel,
  PALETTE,
} from "./labels.js";
import { composeOverlay } from "./render.js";
import { boundaryMask, decodeRle } from "./rle.js";
import { AnnotationSession } from "./session.js";

const api = new ApiClient();

interface TileView {
  payload: SuperpixelPayload;
  raster: Int32Array;
  boundary: Uint8Array;
  base: Uint8ClampedArray;
  session: AnnotationSession;
}

let view: TileView | null = null;
let activeClass: ClassLabel = ClassLabel.ThickCloud;
let hoverRegion = -1;

const canvas = document.getElementById("tile-canvas") as HTMLCanvasElement;
const ctx = canvas.getContext("2d") as CanvasRenderingContext2D;
const tileList = document.getElementById("tile-list") as HTMLUListElement;
const statusLine = document.getElementById("status-line") as HTMLElement;
const progressLine = document.getElementById("progress-line") as HTMLElement;
const saveButton = document.getElementById("save-button") as HTMLButtonElement;
const classButtons: HTMLButtonElement[] = [];

function setStatus(text: string): void {
  statusLine.textContent = text;
}

function refreshProgress(): void {
  if (!view) {
    progressLine.textContent = "";
    return;
  }
  const { session } = view;
  const star = session.dirty ? " (unsaved)" : "";
  progressLine.textContent =
    `${session.labeledCount} / ${session.nRegions} regions labeled${star}`;
}

function redraw(): void {
  if (!view) {
    return;
  }
  const composed = composeOverlay(
    view.base,
    view.raster,
    view.boundary,
    view.session.allLabels(),
    { fillAlpha: 0.45, hover: hoverRegion },
  );
  const image = new ImageData(
    composed,
    view.payload.width,
    view.payload.height,
  );
  ctx.putImageData(image, 0, 0);
  refreshProgress();
}

function selectClass(label: ClassLabel): void {
  activeClass = label;
  classButtons.forEach((button, i) => {
    button.classList.toggle("active", i === label);
  });
  setStatus(`painting ${CLASS_NAMES[label]}`);
}

async function loadBaseImage(tileId: string, width: number, height: number) {
  const image = new Image();
  image.src = api.imageUrl(tileId);
  await image.decode();
  const scratch = document.createElement("canvas");
  scratch.width = width;
  scratch.height = height;
  const sctx = scratch.getContext("2d") as CanvasRenderingContext2D;
  sctx.drawImage(image, 0, 0);
  return sctx.getImageData(0, 0, width, height).data;
}

async function openTile(tileId: string): Promise<void> {
  setStatus(`loading ${tileId}...`);
  const payload = await api.fetchSuperpixels(tileId);
  const raster = decodeRle(payload.rle, payload.width * payload.height);
  const boundary = boundaryMask(raster, payload.width, payload.height);
  const base = await loadBaseImage(tileId, payload.width, payload.height);
  const state = await api.fetchLabels(tileId);
  canvas.width = payload.width;
  canvas.height = payload.height;
  view = {
    payload,
    raster,
    boundary,
    base,
    session: new AnnotationSession(
      tileId,
      payload.n_regions,
      state.labels,
      state.etag,
    ),
  };
  hoverRegion = -1;
  const url = new URL(window.location.href);
  url.searchParams.set("tile", tileId);
  window.history.replaceState(null, "", url.toString());
  setStatus(`loaded ${tileId}: ${payload.n_regions} regions`);
  redraw();
}

function pickRegion(event: MouseEvent): number {
  if (!view) {
    return -1;
  }
  const rect = canvas.getBoundingClientRect();
  const x = Math.floor(
    ((event.clientX - rect.left) / rect.width) * view.payload.width,
  );
  const y = Math.floor(
    ((event.clientY - rect.top) / rect.height) * view.payload.height,
  );
  if (x < 0 || y < 0 || x >= view.payload.width || y >= view.payload.height) {
    return -1;
  }
  return view.raster[y * view.payload.width + x] as number;
}

async function save(): Promise<void> {
  if (!view) {
    return;
  }
  const { session } = view;
  setStatus("saving...");
  const result = await api.putLabels(
    session.tileId,
    session.toJson(),
    session.etag,
  );
  if (result.kind === "saved") {
    session.markSaved(result.etag);
    setStatus("saved");
    redraw();
    return;
  }
  // Stale tag: someone else wrote this tile. Keep every local edit, adopt
  // the server's values for untouched regions, and let the user save again.
  window.alert(
    "This tile changed on the server. Your edits are kept; untouched " +
      "regions now show the server's labels. Review and save again.",
  );
  session.mergeServerState(result.server.labels, result.server.etag);
  setStatus("merged server changes; save again to confirm");
  redraw();
}

function buildSidebar(tiles: TileSummary[]): void {
  tileList.replaceChildren();
  for (const tile of tiles) {
    const item = document.createElement("li");
    const link = document.createElement("a");
    link.href = `?tile=${tile.id}`;
    link.textContent = `${tile.id} (${tile.n_labeled}/${tile.n_regions})`;
    link.addEventListener("click", (event) => {
      event.preventDefault();
      void openTile(tile.id);
    });
    item.appendChild(link);
    tileList.appendChild(item);
  }
}

function buildClassBar(): void {
  const bar = document.getElementById("class-bar") as HTMLElement;
  for (const label of ALL_LABELS) {
    const button = document.createElement("button");
    const [r, g, b] = PALETTE[label];
    button.textContent = `${label + 1}: ${CLASS_NAMES[label]}`;
    button.style.borderColor = `rgb(${r}, ${g}, ${b})`;
    button.addEventListener("click", () => selectClass(label));
    classButtons.push(button);
    bar.appendChild(button);
  }
}

canvas.addEventListener("mousemove", (event) => {
  const region = pickRegion(event);
  if (region !== hoverRegion) {
    hoverRegion = region;
    redraw();
  }
  if (view && region >= 0) {
    const label = view.session.getLabel(region);
    const name = label === undefined ? "unlabeled" : CLASS_NAMES[label];
    setStatus(`region ${region}: ${name}`);
  }
});

canvas.addEventListener("mouseleave", () => {
  if (hoverRegion !== -1) {
    hoverRegion = -1;
    redraw();
  }
});

canvas.addEventListener("click", (event) => {
  if (!view) {
    return;
  }
  const region = pickRegion(event);
  if (region >= 0) {
    view.session.setLabel(region, activeClass);
    redraw();
  }
});

window.addEventListener("keydown", (event) => {
  if (event.target instanceof HTMLInputElement) {
    return;
  }
  const digit = Number.parseInt(event.key, 10);
  if (digit >= 1 && digit <= ALL_LABELS.length) {
    const label = (digit - 1) as ClassLabel;
    selectClass(label);
    if (view && hoverRegion >= 0) {
      view.session.setLabel(hoverRegion, label);
      redraw();
    }
    return;
  }
  const lower = event.key.toLowerCase();
  if ((event.ctrlKey || event.metaKey) && lower === "z" && !event.shiftKey) {
    event.preventDefault();
    if (view?.session.undo()) {
      redraw();
    }
  } else if (
    (event.ctrlKey || event.metaKey) &&
    (lower === "y" || (lower === "z" && event.shiftKey))
  ) {
    event.preventDefault();
    if (view?.session.redo()) {
      redraw();
    }
  } else if (lower === "s" && (event.ctrlKey || event.metaKey)) {
    event.preventDefault();
    void save();
  }
});

saveButton.addEventListener("click", () => void save());

window.addEventListener("beforeunload", (event) => {
  if (view?.session.dirty) {
    event.preventDefault();
  }
});

async function start(): Promise<void> {
  buildClassBar();
  selectClass(ClassLabel.ThickCloud);
  const tiles = await api.listTiles();
  buildSidebar(tiles);
  const requested = new URL(window.location.href).searchParams.get("tile");
  const first = tiles[0];
  if (requested && tiles.some((t) => t.id === requested)) {
    await openTile(requested);
  } else if (first) {
    await openTile(first.id);
  } else {
    setStatus("no tiles in workspace");
  }
}

void start().catch((error) => {
  setStatus(`failed to start: ${error}`);
});
