"""HTTP server for interactive region labeling.

Serves tiles and segmentations out of a workspace directory and accepts
label updates. Writes are guarded by ETag preconditions: clients send the
ETag they last saw in If-Match, and a stale one gets 409 with the current
state so the client can merge and retry. Label files are replaced
atomically, so a crash never leaves a half-written file.

Runs on the standard library's threading HTTP server; state shared between
requests is protected by a single lock.
"""

from __future__ import annotations

import hashlib
import json
import mimetypes
import os
import re
import tempfile
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

import numpy as np

from . import superpixel
from .patchset import N_CLASSES, label_file_bytes

_TILE_ROUTE = re.compile(
    r"^/api/tiles/([A-Za-z0-9_.-]+)/(image\.png|superpixels\.json|labels)$"
)


def _etag(data: bytes) -> str:
    return '"' + hashlib.sha256(data).hexdigest() + '"'


def rle_encode(label: np.ndarray) -> list:
    """Row-major run-length pairs [region_id, run_length, ...]."""
    flat = label.ravel()
    if flat.size == 0:
        return []
    change = np.nonzero(np.diff(flat))[0] + 1
    starts = np.concatenate([[0], change])
    ends = np.concatenate([change, [flat.size]])
    out = np.empty(2 * starts.size, dtype=np.int64)
    out[0::2] = flat[starts]
    out[1::2] = ends - starts
    return out.tolist()


class LabelServer:
    def __init__(self, workspace: Path, host: str = "127.0.0.1", port: int = 0,
                 static_dir: Path | None = None):
        self.workspace = Path(workspace)
        self.static_dir = Path(static_dir).resolve() if static_dir else None
        self.lock = threading.Lock()
        self._spx_cache = {}
        self._httpd = ThreadingHTTPServer((host, port), _Handler)
        self._httpd.app = self
        self.port = self._httpd.server_address[1]

    # -- data access ----------------------------------------------------

    def tile_ids(self) -> list:
        root = self.workspace / "tiles"
        if not root.is_dir():
            return []
        return sorted(p.name for p in root.iterdir() if (p / "meta.json").is_file())

    def tile_exists(self, tile_id: str) -> bool:
        return (self.workspace / "tiles" / tile_id / "meta.json").is_file()

    def tile_summary(self, tile_id: str) -> dict:
        meta = json.loads(
            (self.workspace / "tiles" / tile_id / "meta.json").read_text())
        n_regions = 0
        map_path = self.workspace / "maps" / f"{tile_id}.spxm"
        if map_path.is_file():
            n_regions = self._load_map(tile_id).n_regions
        _, labels = self._current_labels(tile_id)
        return {
            "id": tile_id,
            "width": meta["width"],
            "height": meta["height"],
            "n_regions": n_regions,
            "n_labeled": len(labels),
        }

    def _load_map(self, tile_id: str) -> superpixel.SuperPixelMap:
        path = self.workspace / "maps" / f"{tile_id}.spxm"
        mtime = path.stat().st_mtime_ns
        cached = self._spx_cache.get(tile_id)
        if cached and cached[0] == mtime:
            return cached[1]
        spmap = superpixel.load_map(path)
        self._spx_cache[tile_id] = (mtime, spmap)
        return spmap

    def superpixels_payload(self, tile_id: str) -> bytes:
        spmap = self._load_map(tile_id)
        graph = superpixel.adjacency(spmap)
        doc = {
            "tile_id": tile_id,
            "width": spmap.width,
            "height": spmap.height,
            "n_regions": spmap.n_regions,
            "rle": rle_encode(spmap.label),
            "adjacency": [sorted(s) for s in graph.adjacency],
        }
        return json.dumps(doc).encode()

    def _labels_path(self, tile_id: str) -> Path:
        return self.workspace / "labels" / f"{tile_id}.json"

    def _current_labels(self, tile_id: str):
        """Returns (canonical bytes, labels dict); empty doc if unlabeled."""
        path = self._labels_path(tile_id)
        if path.is_file():
            data = path.read_bytes()
            labels = {
                int(k): int(v) for k, v in json.loads(data)["labels"].items()
            }
            return data, labels
        return label_file_bytes(tile_id, {}), {}

    def store_labels(self, tile_id: str, labels: dict, if_match: str):
        """Returns (status, payload, etag). 409 carries the winning state."""
        with self.lock:
            current, _ = self._current_labels(tile_id)
            etag = _etag(current)
            if if_match.strip() != etag:
                return 409, current, etag
            data = label_file_bytes(tile_id, labels)
            path = self._labels_path(tile_id)
            path.parent.mkdir(parents=True, exist_ok=True)
            fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".labels-")
            try:
                with os.fdopen(fd, "wb") as fh:
                    fh.write(data)
                os.replace(tmp, path)
            except BaseException:
                if os.path.exists(tmp):
                    os.unlink(tmp)
                raise
            return 204, b"", _etag(data)

    # -- lifecycle ------------------------------------------------------

    def serve_forever(self) -> None:
        self._httpd.serve_forever()

    def close(self) -> None:
        self._httpd.shutdown()
        self._httpd.server_close()


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"

    @property
    def app(self) -> LabelServer:
        return self.server.app

    def log_message(self, fmt, *args):
        pass

    def _cors(self):
        self.send_header("Access-Control-Allow-Origin", "*")
        self.send_header("Access-Control-Expose-Headers", "ETag")

    def _reply(self, status: int, body: bytes, content_type: str,
               etag: str | None = None):
        self.send_response(status)
        self._cors()
        if etag is not None:
            self.send_header("ETag", etag)
        self.send_header("Content-Type", content_type)
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        if self.command != "HEAD":
            self.wfile.write(body)

    def _json(self, status: int, doc, etag: str | None = None):
        self._reply(status, json.dumps(doc).encode(), "application/json", etag)

    def _error(self, status: int, message: str):
        self._json(status, {"error": message})

    def do_OPTIONS(self):
        self.send_response(204)
        self._cors()
        self.send_header("Access-Control-Allow-Methods", "GET, PUT, OPTIONS")
        self.send_header("Access-Control-Allow-Headers", "Content-Type, If-Match")
        self.send_header("Content-Length", "0")
        self.end_headers()

    def do_GET(self):
        app = self.app
        if self.path == "/api/tiles":
            self._json(200, [app.tile_summary(t) for t in app.tile_ids()])
            return
        m = _TILE_ROUTE.match(self.path)
        if m:
            tile_id, leaf = m.groups()
            if not app.tile_exists(tile_id):
                self._error(404, f"unknown tile {tile_id}")
                return
            if leaf == "image.png":
                path = app.workspace / "tiles" / tile_id / "rgb.png"
                self._reply(200, path.read_bytes(), "image/png")
            elif leaf == "superpixels.json":
                map_path = app.workspace / "maps" / f"{tile_id}.spxm"
                if not map_path.is_file():
                    self._error(404, f"tile {tile_id} is not segmented")
                    return
                self._reply(200, app.superpixels_payload(tile_id),
                            "application/json")
            else:
                with app.lock:
                    data, _ = app._current_labels(tile_id)
                self._reply(200, data, "application/json", etag=_etag(data))
            return
        if self.app.static_dir is not None:
            self._serve_static()
            return
        self._error(404, "not found")

    def do_PUT(self):
        m = _TILE_ROUTE.match(self.path)
        if not m or m.group(2) != "labels":
            self._error(404, "not found")
            return
        tile_id = m.group(1)
        if not self.app.tile_exists(tile_id):
            self._error(404, f"unknown tile {tile_id}")
            return
        if_match = self.headers.get("If-Match")
        if if_match is None:
            self._error(400, "If-Match header required; GET labels first")
            return
        try:
            length = int(self.headers.get("Content-Length", "0"))
            doc = json.loads(self.rfile.read(length))
            if doc.get("tile_id") != tile_id:
                raise ValueError("tile_id mismatch")
            labels = {int(k): int(v) for k, v in doc["labels"].items()}
            if any(not 0 <= v < N_CLASSES for v in labels.values()):
                raise ValueError("label out of range")
            if any(k < 0 for k in labels):
                raise ValueError("negative region id")
        except (ValueError, KeyError, TypeError, json.JSONDecodeError) as exc:
            self._error(400, f"bad label document: {exc}")
            return
        status, payload, etag = self.app.store_labels(tile_id, labels, if_match)
        if status == 409:
            self._reply(409, payload, "application/json", etag=etag)
        else:
            self._reply(204, b"", "application/json", etag=etag)

    def _serve_static(self):
        rel = self.path.split("?", 1)[0].lstrip("/") or "index.html"
        base = self.app.static_dir
        target = (base / rel).resolve()
        if not str(target).startswith(str(base)) or not target.is_file():
            self._error(404, "not found")
            return
        ctype = mimetypes.guess_type(target.name)[0] or "application/octet-stream"
        self._reply(200, target.read_bytes(), ctype)
