"""Feature extraction contract, frame subdivision and the raster extractor.

An extractor turns a frame (optionally restricted to a rectangle) into
``Detections``. Frames are split into a grid of segments that can be
processed in parallel; each segment is grown by a margin so that keypoints
near the seams are still found, and the merged result is de-duplicated.
"""
from __future__ import annotations

from concurrent.futures import Executor
from dataclasses import dataclass, field
from typing import NamedTuple, Protocol

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from ..descriptors import DESCRIPTOR_DIM

DEDUP_RADIUS_PX = 1.0


class Rect(NamedTuple):
    """Half-open pixel rectangle ``[x0, x1) x [y0, y1)``."""
    x0: int
    y0: int
    x1: int
    y1: int

    @property
    def width(self) -> int:
        return self.x1 - self.x0

    @property
    def height(self) -> int:
        return self.y1 - self.y0

    def contains(self, uv: np.ndarray) -> np.ndarray:
        return (uv[:, 0] >= self.x0) & (uv[:, 0] < self.x1) & (uv[:, 1] >= self.y0) & (uv[:, 1] < self.y1)


@dataclass
class Detections:
    uv: np.ndarray                     # (N, 2) float pixel coordinates
    response: np.ndarray               # (N,)
    descriptors: np.ndarray            # (N, D) float32, unit norm
    sources: np.ndarray | None = None  # (N, 3) hidden world points; synthetic input only
    source_ids: np.ndarray | None = None

    def __len__(self):
        return len(self.uv)

    def select(self, mask) -> "Detections":
        return Detections(self.uv[mask], self.response[mask], self.descriptors[mask],
                          None if self.sources is None else self.sources[mask],
                          None if self.source_ids is None else self.source_ids[mask])

    @classmethod
    def empty(cls, dim: int = DESCRIPTOR_DIM, synthetic: bool = False) -> "Detections":
        return cls(np.zeros((0, 2)), np.zeros(0), np.zeros((0, dim), np.float32),
                   np.zeros((0, 3)) if synthetic else None, np.zeros(0, np.int64) if synthetic else None)

    @classmethod
    def concat(cls, parts: list["Detections"]) -> "Detections":
        synthetic = parts[0].sources is not None
        return cls(np.concatenate([p.uv for p in parts]), np.concatenate([p.response for p in parts]),
                   np.concatenate([p.descriptors for p in parts]),
                   np.concatenate([p.sources for p in parts]) if synthetic else None,
                   np.concatenate([p.source_ids for p in parts]) if synthetic else None)


@dataclass
class ExtractionTask:
    frame_id: int
    segment: Rect      # core tile
    expanded: Rect     # tile grown by the margin, clamped to the frame
    result: Detections | None = field(default=None, repr=False)


class Extractor(Protocol):
    radius: int

    def extract(self, frame, segment: Rect | None = None) -> Detections: ...


def _edges(n: int, parts: int) -> list[int]:
    return [(i * n) // parts for i in range(parts + 1)]


def subdivide(frame, grid: tuple[int, int] = (2, 4), margin: int = 0) -> list[ExtractionTask]:
    """Tile a frame into ``grid = (columns, rows)`` segments grown by ``margin`` pixels.

    A 640x480 frame with grid (2, 4) gives eight 320x120 tiles.
    """
    cols, rows = int(grid[0]), int(grid[1])
    if cols < 1 or rows < 1:
        raise ValueError("grid must have at least one cell")
    if margin < 0:
        raise ValueError("margin must be non-negative")
    W, H = frame.width, frame.height
    xs, ys = _edges(W, cols), _edges(H, rows)
    tasks = []
    for r in range(rows):
        for c in range(cols):
            core = Rect(xs[c], ys[r], xs[c + 1], ys[r + 1])
            exp = Rect(max(0, core.x0 - margin), max(0, core.y0 - margin),
                       min(W, core.x1 + margin), min(H, core.y1 + margin))
            tasks.append(ExtractionTask(frame.frame_id, core, exp))
    return tasks


def merge_detections(parts: list[Detections], radius: float = DEDUP_RADIUS_PX) -> Detections:
    """Concatenate in order, dropping detections within ``radius`` px of an earlier kept one."""
    parts = [p for p in parts if len(p)]
    if not parts:
        return Detections.empty()
    det = Detections.concat(parts)
    pairs = cKDTree(det.uv).query_pairs(radius, output_type="ndarray")
    if not len(pairs):
        return det
    later = {}
    for i, j in pairs[np.lexsort((pairs[:, 1], pairs[:, 0]))].tolist():
        later.setdefault(i, []).append(j)
    keep = np.ones(len(det), bool)
    for i in sorted(later):
        if keep[i]:
            keep[later[i]] = False
    return det.select(keep)


def extract_frame(frame, extractor: Extractor, grid: tuple[int, int] = (2, 4), margin: int | None = None,
                  executor: Executor | None = None, max_keypoints: int | None = None) -> Detections:
    """Run ``extractor`` over the subdivided frame and merge the tiles deterministically."""
    tasks = subdivide(frame, grid, extractor.radius if margin is None else margin)
    if executor is None:
        results = [extractor.extract(frame, t.expanded) for t in tasks]
    else:
        results = list(executor.map(lambda t: extractor.extract(frame, t.expanded), tasks))
    for t, r in zip(tasks, results):
        t.result = r
    merged = merge_detections(results)
    if max_keypoints is not None and len(merged) > max_keypoints:
        order = np.lexsort((merged.uv[:, 0], merged.uv[:, 1], -merged.response))[:max_keypoints]
        merged = merged.select(np.sort(order))
    return merged


# ---------------------------------------------------------------------------
# raster extractor: Shi-Tomasi corners + gradient-histogram patch descriptor


def _window(img: np.ndarray, radius: int, sigma: float) -> np.ndarray:
    w = np.exp(-0.5 * (np.arange(-radius, radius + 1) / sigma) ** 2)
    w /= w.sum()
    # direct separable correlation keeps tile and whole-frame results identical
    return ndimage.correlate1d(ndimage.correlate1d(img, w, axis=0, mode="reflect"), w, axis=1, mode="reflect")


def shi_tomasi_response(img: np.ndarray, block_radius: int = 4, block_sigma: float = 1.5) -> np.ndarray:
    """Minimum eigenvalue of the Gaussian-weighted structure tensor.

    A Gaussian window peaks at the centre of X-junctions, where a small box
    window leaves a ring of maxima around the gradient-free saddle.
    """
    gx = ndimage.sobel(img, axis=1, mode="reflect")
    gy = ndimage.sobel(img, axis=0, mode="reflect")
    a = _window(gx * gx, block_radius, block_sigma)
    b = _window(gx * gy, block_radius, block_sigma)
    c = _window(gy * gy, block_radius, block_sigma)
    return 0.5 * (a + c) - np.sqrt(0.25 * (a - c) ** 2 + b * b)


class RasterExtractor:
    """Shi-Tomasi corners with a 16x16 gradient-orientation-histogram descriptor (D=128)."""

    patch = 16
    cells = 4
    bins = 8

    def __init__(self, min_response: float = 0.02, nms_radius: int = 4, block_radius: int = 4,
                 block_sigma: float = 1.5, max_keypoints: int | None = None):
        self.min_response = min_response
        self.nms_radius = nms_radius
        self.block_radius = block_radius
        self.block_sigma = block_sigma
        self.max_keypoints = max_keypoints
        support = 1 + block_radius               # sobel + structure-tensor window
        detect = support + nms_radius + 1        # NMS window over responses, sub-pixel fit
        describe = self.patch // 2 + 2           # patch half-width + gradient stencil + rounding
        self.radius = max(detect + support, describe)

    def extract(self, frame, segment: Rect | None = None) -> Detections:
        pix = frame.pixels if hasattr(frame, "pixels") else np.asarray(frame)
        H, W = pix.shape
        seg = Rect(0, 0, W, H) if segment is None else segment
        img = pix[seg.y0:seg.y1, seg.x0:seg.x1].astype(np.float64) / 255.0
        resp = shi_tomasi_response(img, self.block_radius, self.block_sigma)
        k = 2 * self.nms_radius + 1
        peak = (resp == ndimage.maximum_filter(resp, size=k, mode="constant", cval=-np.inf)) & \
               (resp > self.min_response)
        # keypoints must be far enough from every tile edge that lies inside the frame
        # and from the frame border, so their response and descriptor are exact
        r = self.radius
        ys, xs = np.nonzero(peak)
        gx, gy = xs + seg.x0, ys + seg.y0
        ok = (gx >= r) & (gx < W - r) & (gy >= r) & (gy < H - r)
        ok &= ((xs >= r) | (seg.x0 == 0)) & ((xs < seg.width - r) | (seg.x1 == W))
        ok &= ((ys >= r) | (seg.y0 == 0)) & ((ys < seg.height - r) | (seg.y1 == H))
        xs, ys = xs[ok], ys[ok]
        if len(xs) == 0:
            return Detections.empty()
        # equal-valued plateaus: keep one peak per 1-px neighbourhood (first in raster order)
        order = np.lexsort((xs, ys))
        xs, ys = xs[order], ys[order]
        # parabolic sub-pixel refinement along each axis
        c0 = resp[ys, xs]
        dx = _parabola(resp[ys, xs - 1], c0, resp[ys, xs + 1])
        dy = _parabola(resp[ys - 1, xs], c0, resp[ys + 1, xs])
        uv = np.column_stack([xs + seg.x0 + dx, ys + seg.y0 + dy])
        desc = self._describe(img, xs, ys)
        det = Detections(uv, c0.copy(), desc)
        det = merge_detections([det])
        return det

    def _describe(self, img: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
        h = self.patch // 2
        offs = np.arange(-h, h)
        py = ys[:, None, None] + offs[None, :, None]
        px = xs[:, None, None] + offs[None, None, :]
        gx = img[py, px + 1] - img[py, px - 1]
        gy = img[py + 1, px] - img[py - 1, px]
        mag = np.hypot(gx, gy)
        ang = np.mod(np.arctan2(gy, gx), 2 * np.pi)
        sigma = 0.5 * self.patch
        g = np.exp(-((offs[:, None] + 0.5) ** 2 + (offs[None, :] + 0.5) ** 2) / (2 * sigma * sigma))
        mag = mag * g[None]
        # soft orientation binning
        fb = ang / (2 * np.pi) * self.bins
        b0 = np.floor(fb).astype(int) % self.bins
        w1 = fb - np.floor(fb)
        b1 = (b0 + 1) % self.bins
        cell = self.patch // self.cells
        ci = (np.arange(self.patch) // cell)
        cell_idx = (ci[:, None] * self.cells + ci[None, :])  # (16, 16)
        n = len(xs)
        hist = np.zeros((n, self.cells * self.cells, self.bins))
        rows = np.repeat(np.arange(n), self.patch * self.patch)
        cidx = np.tile(cell_idx.ravel(), n)
        np.add.at(hist, (rows, cidx, b0.ravel()), (mag * (1 - w1)).ravel())
        np.add.at(hist, (rows, cidx, b1.ravel()), (mag * w1).ravel())
        d = hist.reshape(n, -1)
        d /= np.maximum(np.linalg.norm(d, axis=1, keepdims=True), 1e-12)
        d = np.minimum(d, 0.2)
        d /= np.maximum(np.linalg.norm(d, axis=1, keepdims=True), 1e-12)
        return d.astype(np.float32)


def _parabola(a, b, c):
    den = a - 2 * b + c
    off = np.where(np.abs(den) > 1e-12, 0.5 * (a - c) / np.where(np.abs(den) > 1e-12, den, 1.0), 0.0)
    return np.clip(off, -0.5, 0.5)
