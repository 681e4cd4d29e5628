"""Geometric substrate: components, distance transforms, edges, superpixels.

All functions are pure; images and masks are numpy arrays in row-major
(H, W[, C]) layout with pixels treated as integer grid points.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .imgdata import ImageTensor, LabelMap

_INF = 1e18


@dataclass
class ComponentLabeling:
    """Per-pixel component ids (0 = background), contiguous 1..count."""

    labels: np.ndarray
    sizes: np.ndarray
    count: int

    def largest(self) -> int:
        """Id of the largest component; equal sizes resolve to the one whose
        first pixel comes first in row-major order (ids are assigned in that
        order)."""
        if self.count == 0:
            raise ValidationError("no components")
        return int(np.argmax(self.sizes)) + 1


_OFFSETS4 = ((-1, 0), (1, 0), (0, -1), (0, 1))
_OFFSETS8 = _OFFSETS4 + ((-1, -1), (-1, 1), (1, -1), (1, 1))


class _UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, a: int) -> int:
        p = self.parent
        while p[a] != a:
            p[a] = p[p[a]]
            a = p[a]
        return a

    def union(self, a: int, b: int):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[max(ra, rb)] = min(ra, rb)


def _row_runs(row: np.ndarray) -> list[tuple[int, int]]:
    """Maximal [c0, c1] (inclusive) runs of True."""
    idx = np.flatnonzero(row)
    if idx.size == 0:
        return []
    breaks = np.flatnonzero(np.diff(idx) > 1)
    starts = np.concatenate([[0], breaks + 1])
    ends = np.concatenate([breaks, [idx.size - 1]])
    return [(int(idx[s]), int(idx[e])) for s, e in zip(starts, ends)]


def connected_components(mask: np.ndarray, connectivity: int = 8) -> ComponentLabeling:
    """Label foreground components with ids assigned in row-major
    first-encounter order (run-based union-find)."""
    if connectivity not in (4, 8):
        raise ValidationError("connectivity must be 4 or 8")
    mask = np.asarray(mask, dtype=bool)
    H, W = mask.shape
    runs: list[tuple[int, int, int]] = []  # (row, c0, c1)
    row_start: list[int] = []
    for r in range(H):
        row_start.append(len(runs))
        for c0, c1 in _row_runs(mask[r]):
            runs.append((r, c0, c1))
    row_start.append(len(runs))

    uf = _UnionFind(len(runs))
    reach = 1 if connectivity == 8 else 0
    for r in range(1, H):
        a, a_end = row_start[r - 1], row_start[r]
        b, b_end = row_start[r], row_start[r + 1]
        while a < a_end and b < b_end:
            _, a0, a1 = runs[a]
            _, b0, b1 = runs[b]
            if a0 <= b1 + reach and b0 <= a1 + reach:
                uf.union(a, b)
            if a1 < b1:
                a += 1
            else:
                b += 1

    labels = np.zeros((H, W), dtype=np.int32)
    ids: dict[int, int] = {}
    sizes: list[int] = []
    for i, (r, c0, c1) in enumerate(runs):
        root = uf.find(i)
        if root not in ids:
            ids[root] = len(ids) + 1
            sizes.append(0)
        lab = ids[root]
        labels[r, c0 : c1 + 1] = lab
        sizes[lab - 1] += c1 - c0 + 1
    return ComponentLabeling(labels, np.asarray(sizes, dtype=np.int64), len(sizes))


def _dt1d_sq(f: np.ndarray) -> np.ndarray:
    """1-D squared distance transform, lower envelope of parabolas."""
    n = len(f)
    d = np.empty(n)
    v = np.zeros(n, dtype=np.int64)
    z = np.empty(n + 1)
    k = 0
    z[0], z[1] = -_INF, _INF
    for q in range(1, n):
        s = ((f[q] + q * q) - (f[v[k]] + v[k] * v[k])) / (2 * q - 2 * v[k])
        while s <= z[k]:
            k -= 1
            s = ((f[q] + q * q) - (f[v[k]] + v[k] * v[k])) / (2 * q - 2 * v[k])
        k += 1
        v[k] = q
        z[k] = s
        z[k + 1] = _INF
    k = 0
    for q in range(n):
        while z[k + 1] < q:
            k += 1
        d[q] = (q - v[k]) ** 2 + f[v[k]]
    return d


def euclidean_dt(region: np.ndarray) -> np.ndarray:
    """Exact Euclidean distance from region pixels to the nearest non-region
    pixel; 0 outside the region.  A region covering the whole image measures
    against virtual outside pixels adjacent to the border."""
    region = np.asarray(region, dtype=bool)
    H, W = region.shape
    if not region.any():
        return np.zeros((H, W))
    if region.all():
        rows = np.minimum(np.arange(H) + 1, H - np.arange(H))[:, None]
        cols = np.minimum(np.arange(W) + 1, W - np.arange(W))[None, :]
        return np.minimum(rows, cols).astype(np.float64)
    f = np.where(region, _INF, 0.0)
    for c in range(W):
        f[:, c] = _dt1d_sq(f[:, c])
    for r in range(H):
        f[r, :] = _dt1d_sq(f[r, :])
    out = np.sqrt(f)
    out[~region] = 0.0
    return out


def label_edges(lbl: LabelMap) -> np.ndarray:
    """True where any in-bounds 4-neighbor carries a different label value
    (IGNORE counts as its own label)."""
    a = lbl.data
    edge = np.zeros(a.shape, dtype=bool)
    diff_v = a[:-1, :] != a[1:, :]
    diff_h = a[:, :-1] != a[:, 1:]
    edge[:-1, :] |= diff_v
    edge[1:, :] |= diff_v
    edge[:, :-1] |= diff_h
    edge[:, 1:] |= diff_h
    return edge


# ---------------------------------------------------------------------------
# SLIC superpixels


def rgb_to_lab(rgb: np.ndarray) -> np.ndarray:
    """sRGB in [0,1] to CIELAB (D65)."""
    c = np.asarray(rgb, dtype=np.float64)
    lin = np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)
    r, g, b = lin[..., 0], lin[..., 1], lin[..., 2]
    x = (0.4124564 * r + 0.3575761 * g + 0.1804375 * b) / 0.95047
    y = 0.2126729 * r + 0.7151522 * g + 0.0721750 * b
    z = (0.0193339 * r + 0.1191920 * g + 0.9503041 * b) / 1.08883
    eps = (6.0 / 29.0) ** 3

    def f(t):
        return np.where(t > eps, np.cbrt(t), t / (3 * (6.0 / 29.0) ** 2) + 4.0 / 29.0)

    fx, fy, fz = f(x), f(y), f(z)
    return np.stack([116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)], axis=-1)


def _grid_centers(H: int, W: int, k: int, step: float) -> list[tuple[int, int]]:
    rows_n = max(1, round(H / step))
    cols_n = max(1, round(W / step))
    while rows_n * cols_n > 2 * k:
        if rows_n >= cols_n and rows_n > 1:
            rows_n -= 1
        elif cols_n > 1:
            cols_n -= 1
        else:
            break
    rs = ((np.arange(rows_n) + 0.5) * H / rows_n).astype(int)
    cs = ((np.arange(cols_n) + 0.5) * W / cols_n).astype(int)
    return [(int(r), int(c)) for r in rs for c in cs]


def slic(img: ImageTensor, k: int, compactness: float = 10.0) -> np.ndarray:
    """SLIC superpixels: grid-seeded k-means in (l,a,b,y,x), then orphan
    regions are merged into their largest neighbor so segments are connected.
    Returns per-pixel segment ids 0..K-1."""
    H, W = img.height, img.width
    if not 1 <= k <= H * W:
        raise ValidationError("segment count must be in 1..H*W")
    lab = rgb_to_lab(img.data)
    step = math.sqrt(H * W / k)
    centers = _grid_centers(H, W, k, step)

    # move each seed to the lowest-gradient pixel in its 3x3 window
    gpad = np.pad(lab, ((1, 1), (1, 1), (0, 0)), mode="edge")
    grad = (
        ((gpad[2:, 1:-1] - gpad[:-2, 1:-1]) ** 2).sum(-1)
        + ((gpad[1:-1, 2:] - gpad[1:-1, :-2]) ** 2).sum(-1)
    )
    seeds = []
    for r, c in centers:
        r0, r1 = max(0, r - 1), min(H, r + 2)
        c0, c1 = max(0, c - 1), min(W, c + 2)
        win = grad[r0:r1, c0:c1]
        dr, dc = np.unravel_index(np.argmin(win), win.shape)
        seeds.append((r0 + int(dr), c0 + int(dc)))

    feat = np.concatenate([lab, np.mgrid[0:H, 0:W].transpose(1, 2, 0)], axis=-1)
    cen = np.array([feat[r, c] for r, c in seeds], dtype=np.float64)
    ratio2 = (compactness / step) ** 2
    half = int(math.ceil(step))
    yy, xx = np.mgrid[0:H, 0:W]
    for _ in range(10):
        best = np.full((H, W), np.inf)
        assign = np.full((H, W), -1, dtype=np.int32)
        for ci in range(len(cen)):
            cy, cx = cen[ci, 3], cen[ci, 4]
            r0, r1 = max(0, int(cy) - half), min(H, int(cy) + half + 1)
            c0, c1 = max(0, int(cx) - half), min(W, int(cx) + half + 1)
            dlab2 = ((lab[r0:r1, c0:c1] - cen[ci, :3]) ** 2).sum(-1)
            dxy2 = (yy[r0:r1, c0:c1] - cy) ** 2 + (xx[r0:r1, c0:c1] - cx) ** 2
            d = dlab2 + ratio2 * dxy2
            win_best = best[r0:r1, c0:c1]
            upd = d < win_best
            win_best[upd] = d[upd]
            assign[r0:r1, c0:c1][upd] = ci
        missing = assign < 0
        if missing.any():
            pts = feat[missing]
            scale = np.array([1.0, 1.0, 1.0, math.sqrt(ratio2), math.sqrt(ratio2)])
            d_all = (((pts[:, None, :] - cen[None, :, :]) * scale) ** 2).sum(-1)
            assign[missing] = np.argmin(d_all, axis=1)
        for ci in range(len(cen)):
            sel = assign == ci
            if sel.any():
                cen[ci] = feat[sel].mean(axis=0)

    return _enforce_connectivity(assign, k, step)


def _merge_region(rlab: np.ndarray, rsizes: np.ndarray, orphan: int) -> bool:
    """Reassign one region's pixels to its largest 4-adjacent neighbor
    (ties to the smaller region id)."""
    H, W = rlab.shape
    sel = rlab == orphan
    neigh: dict[int, int] = {}
    rs, cs = np.nonzero(sel)
    for r, c in zip(rs, cs):
        for dr, dc in _OFFSETS4:
            rr, cc = r + dr, c + dc
            if 0 <= rr < H and 0 <= cc < W and rlab[rr, cc] != orphan:
                rid = int(rlab[rr, cc])
                neigh[rid] = int(rsizes[rid - 1])
    if not neigh:
        return False
    best = max(sorted(neigh), key=lambda rid: (neigh[rid], -rid))
    rlab[sel] = best
    return True


def _enforce_connectivity(seg: np.ndarray, k: int, step: float) -> np.ndarray:
    """Split disconnected assignments into regions, then merge orphan
    fragments (smaller than a quarter of the nominal segment area, or the
    smallest while more than 2k remain) into their largest neighbor; ids come
    out contiguous in row-major first-encounter order."""
    H, W = seg.shape
    min_size = max(1, int(step * step) // 4)
    seg = _label_value_regions(seg)[0]
    while True:
        rlab, rsizes, _ = _label_value_regions(seg)
        count = len(rsizes)
        order = sorted(range(1, count + 1), key=lambda rid: (rsizes[rid - 1], rid))
        target = next((rid for rid in order if rsizes[rid - 1] < min_size), None)
        if target is None and count > 2 * k:
            target = order[0]
        if target is None or count == 1:
            break
        if not _merge_region(rlab, rsizes, target):
            break
        seg = rlab

    flat = seg.ravel()
    uniq, first = np.unique(flat, return_index=True)
    lut = np.empty(int(uniq.max()) + 1, dtype=np.int32)
    for pos, u in enumerate(uniq[np.argsort(first)]):
        lut[u] = pos
    return lut[flat].reshape(H, W)


def _label_value_regions(values: np.ndarray):
    """4-connected regions of equal value; returns (region labels 1..K,
    sizes, per-region value)."""
    H, W = values.shape
    runs: list[tuple[int, int, int, int]] = []  # (row, c0, c1, value)
    row_start: list[int] = []
    for r in range(H):
        row_start.append(len(runs))
        row = values[r]
        brk = np.flatnonzero(np.diff(row) != 0)
        starts = np.concatenate([[0], brk + 1])
        ends = np.concatenate([brk, [W - 1]])
        for s, e in zip(starts, ends):
            runs.append((r, int(s), int(e), int(row[s])))
    row_start.append(len(runs))

    uf = _UnionFind(len(runs))
    for r in range(1, H):
        a, a_end = row_start[r - 1], row_start[r]
        b, b_end = row_start[r], row_start[r + 1]
        while a < a_end and b < b_end:
            _, a0, a1, av = runs[a]
            _, b0, b1, bv = runs[b]
            if av == bv and a0 <= b1 and b0 <= a1:
                uf.union(a, b)
            if a1 < b1:
                a += 1
            else:
                b += 1

    labels = np.zeros((H, W), dtype=np.int32)
    ids: dict[int, int] = {}
    sizes: list[int] = []
    vals: list[int] = []
    for i, (r, c0, c1, val) in enumerate(runs):
        root = uf.find(i)
        if root not in ids:
            ids[root] = len(ids) + 1
            sizes.append(0)
            vals.append(val)
        lab = ids[root]
        labels[r, c0 : c1 + 1] = lab
        sizes[lab - 1] += c1 - c0 + 1
    return labels, np.asarray(sizes, dtype=np.int64), np.asarray(vals, dtype=np.int64)


# ---------------------------------------------------------------------------
# geodesic distances


def geodesic_field(img: ImageTensor, sources, gamma: float = 50.0) -> np.ndarray:
    """Multi-source Dijkstra on the 8-connected grid; an edge costs its
    spatial length (1 or sqrt(2)) plus gamma times the luminance jump."""
    sources = list(sources)
    if not sources:
        raise ValidationError("geodesic_field needs at least one source")
    H, W = img.height, img.width
    lum = img.data.mean(axis=2, dtype=np.float64)
    dist = np.full((H, W), np.inf)
    heap = []
    for r, c in sources:
        dist[r, c] = 0.0
        heapq.heappush(heap, (0.0, r, c))
    sqrt2 = math.sqrt(2.0)
    while heap:
        d, r, c = heapq.heappop(heap)
        if d > dist[r, c]:
            continue
        for dr, dc in _OFFSETS8:
            rr, cc = r + dr, c + dc
            if 0 <= rr < H and 0 <= cc < W:
                step = sqrt2 if dr and dc else 1.0
                nd = d + step + gamma * abs(lum[r, c] - lum[rr, cc])
                if nd < dist[rr, cc]:
                    dist[rr, cc] = nd
                    heapq.heappush(heap, (nd, rr, cc))
    return dist
