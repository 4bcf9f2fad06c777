"""Super-pixel segmentation: SLIC-like grid seeding refined by boundary-pixel
exchange, with an edge-probability term so boundaries snap to image edges.

Also hosts region statistics, the region adjacency graph, 32x32 patch
extraction and the SPXM map file format.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from skimage import measure

from .edgeprob import EdgeMap
from .patchset import Patch
from .raster import MultiBandImage

DEFAULT_N_SUPERPIXELS = 600
DEFAULT_COMPACTNESS = 10.0
DEFAULT_ITERATIONS = 10
DEFAULT_EDGE_WEIGHT = 10.0
DEFAULT_MIN_AREA = 10
PATCH_SIZE = 32

SPXM_MAGIC = b"SPXM"
SPXM_VERSION = 1


class SegmentationError(Exception):
    pass


class MapFormatError(Exception):
    """SPXM file is malformed, truncated, or from a newer version."""


@dataclass
class SuperPixelMap:
    width: int
    height: int
    n_regions: int
    label: np.ndarray  # (height, width) int32, ids dense in [0, n_regions)
    energy_history: list[float] = field(default_factory=list)

    def __post_init__(self):
        if self.label.shape != (self.height, self.width):
            raise SegmentationError(
                f"label raster {self.label.shape} != {self.height}x{self.width}"
            )
        if self.label.min() < 0 or self.label.max() >= self.n_regions:
            raise SegmentationError("region ids outside [0, n_regions)")
        present = np.bincount(self.label.ravel(), minlength=self.n_regions)
        if np.any(present == 0):
            raise SegmentationError("region ids are not dense")


@dataclass(frozen=True)
class RegionStats:
    id: int
    area: int
    centroid: tuple[float, float]  # (x, y)
    mean_rgb: tuple[float, float, float]
    mean_nir: float
    bbox: tuple[int, int, int, int]  # (x0, y0, x1, y1), inclusive


@dataclass
class RegionGraph:
    adjacency: list[set[int]]

    def neighbors_within(self, region: int, hops: int) -> set[int]:
        """Regions reachable in at most `hops` edges, excluding the start."""
        seen = {region}
        frontier = {region}
        for _ in range(hops):
            nxt = set()
            for r in frontier:
                nxt |= self.adjacency[r]
            frontier = nxt - seen
            seen |= frontier
        return seen - {region}


def _grid_labels(width: int, height: int, k: int) -> np.ndarray:
    """Tile the image into exactly k rectangles, close to the SLIC s-grid."""
    n_rows = round(math.sqrt(k * height / width)) if width else 1
    n_rows = max(n_rows, 1, math.ceil(k / width))
    n_rows = min(n_rows, height, k)
    base, extra = divmod(k, n_rows)
    labels = np.empty((height, width), dtype=np.int32)
    region = 0
    for r in range(n_rows):
        y0 = r * height // n_rows
        y1 = (r + 1) * height // n_rows
        cols = base + 1 if r < extra else base
        for c in range(cols):
            x0 = c * width // cols
            x1 = (c + 1) * width // cols
            labels[y0:y1, x0:x1] = region
            region += 1
    assert region == k
    return labels


def _total_energy(labels, rgb, edge_prob, sums, counts, spatial_w, edge_weight):
    """Energy of the full assignment under the current region means."""
    h, w = labels.shape
    cnt = np.maximum(counts, 1)
    mean_rgb = sums[:, :3] / cnt[:, None]
    mean_xy = sums[:, 3:5] / cnt[:, None]
    xs = np.tile(np.arange(w, dtype=np.float64), (h, 1))
    ys = np.tile(np.arange(h, dtype=np.float64).reshape(-1, 1), (1, w))
    d_color = ((rgb - mean_rgb[labels]) ** 2).sum(axis=2)
    d_space = (xs - mean_xy[labels, 0]) ** 2 + (ys - mean_xy[labels, 1]) ** 2
    boundary = np.zeros((h, w), dtype=bool)
    boundary[:, 1:] |= labels[:, 1:] != labels[:, :-1]
    boundary[:, :-1] |= labels[:, 1:] != labels[:, :-1]
    boundary[1:, :] |= labels[1:, :] != labels[:-1, :]
    boundary[:-1, :] |= labels[1:, :] != labels[:-1, :]
    return float(
        d_color.sum()
        + spatial_w * d_space.sum()
        + edge_weight * ((1.0 - edge_prob) * boundary).sum()
    )


def segment(
    img: MultiBandImage,
    edges: EdgeMap,
    n_superpixels: int = DEFAULT_N_SUPERPIXELS,
    compactness: float = DEFAULT_COMPACTNESS,
    iterations: int = DEFAULT_ITERATIONS,
    edge_weight: float = DEFAULT_EDGE_WEIGHT,
) -> SuperPixelMap:
    """Partition the tile into n_superpixels edge-snapped regions.

    Starts from a rectangular grid of exactly n_superpixels cells, then runs
    `iterations` row-major sweeps in which each boundary pixel may move to an
    adjacent region when that strictly lowers the total energy

        sum_p ||rgb(p) - mean_rgb(r)||^2
             + (compactness/s)^2 * ||p - centroid(r)||^2
             + edge_weight * (1 - edge_prob(p)) * [p lies on a boundary]

    with s = sqrt(W*H/K). Region means update incrementally after every
    accepted move. Moves that would empty a region or break its 4-connectivity
    are rejected, so regions stay connected throughout.
    """
    w, h = img.width, img.height
    if n_superpixels < 1:
        raise SegmentationError("n_superpixels must be >= 1")
    if iterations < 1:
        raise SegmentationError("iterations must be >= 1")
    if n_superpixels > w * h:
        raise SegmentationError(f"n_superpixels {n_superpixels} exceeds pixel count {w * h}")
    if edges.prob.shape != (h, w):
        raise SegmentationError("edge map does not match image dimensions")

    k = n_superpixels
    labels2d = _grid_labels(w, h, k)
    rgbf = img.rgb.astype(np.float64)
    step = math.sqrt(w * h / k)
    spatial_w = (compactness / step) ** 2

    # region accumulators: r, g, b, x, y sums and pixel counts
    flat = labels2d.ravel()
    counts = np.bincount(flat, minlength=k).astype(np.float64)
    xs = np.tile(np.arange(w, dtype=np.float64), h)
    ys = np.repeat(np.arange(h, dtype=np.float64), w)
    sums = np.stack(
        [
            np.bincount(flat, weights=rgbf[:, :, c].ravel(), minlength=k)
            for c in range(3)
        ]
        + [np.bincount(flat, weights=xs, minlength=k), np.bincount(flat, weights=ys, minlength=k)],
        axis=1,
    )

    energy_history = [
        _total_energy(labels2d, rgbf, edges.prob, sums, counts, spatial_w, edge_weight)
    ]

    # The sweep is pixel-serial; plain Python lists beat numpy scalar indexing
    # by an order of magnitude here.
    lab = labels2d.ravel().tolist()
    red = rgbf[:, :, 0].ravel().tolist()
    grn = rgbf[:, :, 1].ravel().tolist()
    blu = rgbf[:, :, 2].ravel().tolist()
    epl = edges.prob.ravel().tolist()
    s_r = sums[:, 0].tolist()
    s_g = sums[:, 1].tolist()
    s_b = sums[:, 2].tolist()
    s_x = sums[:, 3].tolist()
    s_y = sums[:, 4].tolist()
    cnt = counts.tolist()

    for _ in range(iterations):
        moves = _sweep(
            lab, red, grn, blu, epl, s_r, s_g, s_b, s_x, s_y, cnt,
            w, h, spatial_w, edge_weight,
        )
        labels2d = np.asarray(lab, dtype=np.int32).reshape(h, w)
        sums = np.stack([s_r, s_g, s_b, s_x, s_y], axis=1)
        counts = np.asarray(cnt)
        energy_history.append(
            _total_energy(labels2d, rgbf, edges.prob, sums, counts, spatial_w, edge_weight)
        )
        if moves == 0:
            break

    return SuperPixelMap(
        width=w, height=h, n_regions=k, label=labels2d, energy_history=energy_history
    )


def _sweep(lab, red, grn, blu, epl, s_r, s_g, s_b, s_x, s_y, cnt,
           w, h, spatial_w, edge_weight) -> int:
    """One row-major boundary-exchange pass. Returns the number of moves."""
    moves = 0
    for y in range(h):
        row = y * w
        up_ok = y > 0
        dn_ok = y < h - 1
        for x in range(w):
            i = row + x
            cur = lab[i]

            # candidate destination regions among 4-neighbors
            cands = []
            left = lab[i - 1] if x > 0 else -1
            right = lab[i + 1] if x < w - 1 else -1
            up = lab[i - w] if up_ok else -1
            down = lab[i + w] if dn_ok else -1
            for nb in (left, right, up, down):
                if nb != cur and nb >= 0 and nb not in cands:
                    cands.append(nb)
            if not cands:
                continue
            if cnt[cur] <= 1:
                continue  # move would empty the region

            # Yokoi connectivity number (4-connectivity): removing this pixel
            # keeps its region connected only when exactly one 4-component of
            # same-region neighbors touches it.
            e = x < w - 1 and lab[i + 1] == cur
            ne = x < w - 1 and up_ok and lab[i - w + 1] == cur
            n = up_ok and lab[i - w] == cur
            nw = x > 0 and up_ok and lab[i - w - 1] == cur
            wst = x > 0 and lab[i - 1] == cur
            sw = x > 0 and dn_ok and lab[i + w - 1] == cur
            s = dn_ok and lab[i + w] == cur
            se = x < w - 1 and dn_ok and lab[i + w + 1] == cur
            c4 = 0
            if e and not (ne and n):
                c4 += 1
            if n and not (nw and wst):
                c4 += 1
            if wst and not (sw and s):
                c4 += 1
            if s and not (se and e):
                c4 += 1
            if c4 != 1:
                continue

            r, g, b = red[i], grn[i], blu[i]
            px, py = float(x), float(y)

            c = cnt[cur]
            dr = r - s_r[cur] / c
            dg = g - s_g[cur] / c
            db = b - s_b[cur] / c
            dx = px - s_x[cur] / c
            dy = py - s_y[cur] / c
            e_cur = dr * dr + dg * dg + db * db + spatial_w * (dx * dx + dy * dy)

            # Per 4-neighbor u: does u have a differing neighbor besides p?
            # (decides whether u stays a boundary pixel after the move)
            others = []
            for nb_lab, ux, uy, ui in (
                (left, x - 1, y, i - 1),
                (right, x + 1, y, i + 1),
                (up, x, y - 1, i - w),
                (down, x, y + 1, i + w),
            ):
                if nb_lab < 0:
                    continue
                o = False
                if ux > 0 and ui - 1 != i and lab[ui - 1] != nb_lab:
                    o = True
                elif ux < w - 1 and ui + 1 != i and lab[ui + 1] != nb_lab:
                    o = True
                elif uy > 0 and ui - w != i and lab[ui - w] != nb_lab:
                    o = True
                elif uy < h - 1 and ui + w != i and lab[ui + w] != nb_lab:
                    o = True
                others.append((nb_lab, o, epl[ui]))

            ep_p = epl[i]
            best_delta = 0.0
            best_q = -1
            for q in cands:
                cq = cnt[q]
                dr = r - s_r[q] / cq
                dg = g - s_g[q] / cq
                db = b - s_b[q] / cq
                dx = px - s_x[q] / cq
                dy = py - s_y[q] / cq
                e_new = dr * dr + dg * dg + db * db + spatial_w * (dx * dx + dy * dy)

                # boundary-indicator change for p and its 4 neighbors
                bnd = 0.0
                p_after = False
                for nb_lab, o, ep_u in others:
                    if nb_lab != q:
                        p_after = True
                    before = o or (nb_lab != cur)
                    after = o or (nb_lab != q)
                    if after != before:
                        bnd += (1.0 - ep_u) if after else -(1.0 - ep_u)
                if not p_after:  # p had a differing neighbor before (it was boundary)
                    bnd -= 1.0 - ep_p

                delta = e_new - e_cur + edge_weight * bnd
                if delta < best_delta or (delta == best_delta and best_q >= 0 and q < best_q):
                    best_delta = delta
                    best_q = q

            if best_q >= 0 and best_delta < 0.0:
                lab[i] = best_q
                cnt[cur] -= 1
                cnt[best_q] += 1
                s_r[cur] -= r; s_r[best_q] += r
                s_g[cur] -= g; s_g[best_q] += g
                s_b[cur] -= b; s_b[best_q] += b
                s_x[cur] -= px; s_x[best_q] += px
                s_y[cur] -= py; s_y[best_q] += py
                moves += 1
    return moves


def enforce_connectivity(spmap: SuperPixelMap, min_area: int = DEFAULT_MIN_AREA) -> SuperPixelMap:
    """Split stray components and absorb those smaller than min_area.

    Every 4-connected component of the input becomes its own region; each
    component below min_area is merged into the neighbor it shares the longest
    boundary with (ties to the lower component id). Ids are re-densified in
    row-major first-appearance order.
    """
    comp = measure.label(spmap.label + 1, connectivity=1).astype(np.int64) - 1
    n_comp = int(comp.max()) + 1
    areas = np.bincount(comp.ravel(), minlength=n_comp).tolist()

    border: list[dict[int, int]] = [dict() for _ in range(n_comp)]
    for a, b in _boundary_pairs(comp):
        border[a][b] = border[a].get(b, 0) + 1
        border[b][a] = border[b].get(a, 0) + 1

    alive = [True] * n_comp
    remap = list(range(n_comp))
    while True:
        # smallest live undersized component with at least one neighbor
        cand = [
            (areas[c], c)
            for c in range(n_comp)
            if alive[c] and areas[c] < min_area and border[c]
        ]
        if not cand:
            break
        _, small = min(cand)
        target = max(border[small].items(), key=lambda kv: (kv[1], -kv[0]))[0]
        for nbr, length in border[small].items():
            if nbr == target:
                continue
            border[target][nbr] = border[target].get(nbr, 0) + length
            border[nbr][target] = border[nbr].get(target, 0) + length
        for nbr in border[small]:
            del border[nbr][small]
        border[target].pop(small, None)
        areas[target] += areas[small]
        border[small] = {}
        alive[small] = False
        remap[small] = target

    # resolve merge chains, then renumber by row-major first appearance
    roots = np.arange(n_comp)
    for c in range(n_comp):
        r = c
        while remap[r] != r:
            r = remap[r]
        roots[c] = r
    flat = roots[comp.ravel()]
    _, first, inverse = np.unique(flat, return_index=True, return_inverse=True)
    rank = np.empty(len(first), dtype=np.int64)
    rank[np.argsort(first)] = np.arange(len(first))
    dense = rank[inverse].reshape(comp.shape).astype(np.int32)
    return SuperPixelMap(
        width=spmap.width,
        height=spmap.height,
        n_regions=len(first),
        label=dense,
        energy_history=list(spmap.energy_history),
    )


def _boundary_pairs(label: np.ndarray):
    """Unordered pairs of distinct labels across 4-adjacent pixels, with
    multiplicity (one item per adjacent pixel pair)."""
    lh1, lh2 = label[:, :-1].ravel(), label[:, 1:].ravel()
    lv1, lv2 = label[:-1, :].ravel(), label[1:, :].ravel()
    a = np.concatenate([lh1, lv1])
    b = np.concatenate([lh2, lv2])
    mask = a != b
    return zip(a[mask].tolist(), b[mask].tolist())


def region_stats(spmap: SuperPixelMap, img: MultiBandImage) -> list[RegionStats]:
    """Exact per-region area, centroid, band means and bounding box."""
    if (img.height, img.width) != (spmap.height, spmap.width):
        raise SegmentationError("map and image dimensions differ")
    k = spmap.n_regions
    flat = spmap.label.ravel()
    area = np.bincount(flat, minlength=k)
    xs = np.tile(np.arange(spmap.width, dtype=np.float64), spmap.height)
    ys = np.repeat(np.arange(spmap.height, dtype=np.float64), spmap.width)
    sx = np.bincount(flat, weights=xs, minlength=k)
    sy = np.bincount(flat, weights=ys, minlength=k)
    rgbf = img.rgb.reshape(-1, 3).astype(np.float64)
    srgb = [np.bincount(flat, weights=rgbf[:, c], minlength=k) for c in range(3)]
    snir = np.bincount(flat, weights=img.nir.ravel().astype(np.float64), minlength=k)

    x0 = np.full(k, spmap.width, dtype=np.int64)
    x1 = np.full(k, -1, dtype=np.int64)
    y0 = np.full(k, spmap.height, dtype=np.int64)
    y1 = np.full(k, -1, dtype=np.int64)
    np.minimum.at(x0, flat, xs.astype(np.int64))
    np.maximum.at(x1, flat, xs.astype(np.int64))
    np.minimum.at(y0, flat, ys.astype(np.int64))
    np.maximum.at(y1, flat, ys.astype(np.int64))

    out = []
    for r in range(k):
        a = float(area[r])
        out.append(
            RegionStats(
                id=r,
                area=int(area[r]),
                centroid=(sx[r] / a, sy[r] / a),
                mean_rgb=(srgb[0][r] / a, srgb[1][r] / a, srgb[2][r] / a),
                mean_nir=snir[r] / a,
                bbox=(int(x0[r]), int(y0[r]), int(x1[r]), int(y1[r])),
            )
        )
    return out


def adjacency(spmap: SuperPixelMap) -> RegionGraph:
    """Region graph: r adj q iff some pixels of r and q are 4-neighbors."""
    adj: list[set[int]] = [set() for _ in range(spmap.n_regions)]
    for a, b in _boundary_pairs(spmap.label):
        adj[a].add(b)
        adj[b].add(a)
    return RegionGraph(adjacency=adj)


def extract_patch(
    img: MultiBandImage, region: RegionStats, size: int = PATCH_SIZE, tile_id: str = ""
) -> Patch:
    """Crop a size x size RGB window centered on the region's bbox.

    The window is clamped inside the image; when the image itself is smaller
    than `size`, missing rows/columns are filled by edge replication. Pixels
    of neighboring regions inside the window are kept as context.
    """
    x0, y0, x1, y1 = region.bbox
    cx = (x0 + x1) // 2
    cy = (y0 + y1) // 2
    half = size // 2
    sx = min(max(0, cx - half), max(0, img.width - size))
    sy = min(max(0, cy - half), max(0, img.height - size))
    crop = img.rgb[sy : sy + size, sx : sx + size]
    pad_y = size - crop.shape[0]
    pad_x = size - crop.shape[1]
    if pad_y or pad_x:
        crop = np.pad(crop, ((0, pad_y), (0, pad_x), (0, 0)), mode="edge")
    return Patch(
        pixels=crop.astype(np.float64) / 255.0,
        mean_nir=float(region.mean_nir),
        tile_id=tile_id,
        region_id=region.id,
    )


def save_map(spmap: SuperPixelMap, path: str | Path) -> None:
    """Write the SPXM binary map format."""
    with open(path, "wb") as f:
        f.write(SPXM_MAGIC)
        f.write(struct.pack("<B", SPXM_VERSION))
        f.write(struct.pack("<III", spmap.width, spmap.height, spmap.n_regions))
        f.write(spmap.label.astype("<u4").tobytes())


def load_map(path: str | Path) -> SuperPixelMap:
    data = Path(path).read_bytes()
    if len(data) < 17:
        raise MapFormatError(f"truncated SPXM file {path}")
    if data[:4] != SPXM_MAGIC:
        raise MapFormatError(f"bad magic in {path}")
    version = data[4]
    if version > SPXM_VERSION:
        raise MapFormatError(f"unsupported SPXM version {version}")
    width, height, n_regions = struct.unpack_from("<III", data, 5)
    expected = 17 + 4 * width * height
    if len(data) < expected:
        raise MapFormatError(f"truncated SPXM payload in {path}")
    label = np.frombuffer(data, dtype="<u4", count=width * height, offset=17)
    return SuperPixelMap(
        width=width,
        height=height,
        n_regions=n_regions,
        label=label.reshape(height, width).astype(np.int32),
    )
