"""Disparity refinement, triangulation, reprojection and PLY export.

Reconstructed points live in the frame of the imaginary centre view between
the two tilts: ``x = u + d/2``, ``y = v`` and ``z`` the depth along the
disparity axis (pixels).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .core import DisparityMap, ShapeError, TiltGeometry


def refine_disparity(
    disp: DisparityMap,
    det_left,
    det_right,
    radius: int = 3,
    threshold: float = 0.5,
) -> DisparityMap:
    """Snap warped left detections onto right detections along the epipolar row.

    Each masked left pixel ``(u, v)`` is warped to ``x = u + d`` in the right
    view.  If ``x`` falls inside a right detection pixel the disparity is
    kept; otherwise it snaps to the nearest right detection pixel within
    ``radius`` plus a three-point quadratic sub-pixel offset computed on the
    right detection response.  Pixels without a candidate are dropped.
    """
    det_left = np.asarray(det_left, np.float64)
    det_right = np.asarray(det_right, np.float64)
    if not (disp.shape == det_left.shape == det_right.shape):
        raise ShapeError("disparity and detection maps must share a shape")
    h, w = disp.shape
    out_d = disp.disp.copy()
    out_m = disp.mask & (det_left >= threshold)
    cand = det_right >= threshold
    for v, u in zip(*np.nonzero(out_m)):
        x = u + disp.disp[v, u]
        cols = np.flatnonzero(cand[v])
        if cols.size == 0:
            out_m[v, u] = False
            continue
        gap = np.abs(cols - x)
        k = int(np.argmin(gap))  # ties resolve to the left-most column
        j, g = int(cols[k]), float(gap[k])
        if g > radius:
            out_m[v, u] = False
            continue
        if g <= 0.5:
            continue
        delta = 0.0
        if 0 < j < w - 1:
            r_m, r_0, r_p = det_right[v, j - 1], det_right[v, j], det_right[v, j + 1]
            curv = r_m - 2.0 * r_0 + r_p
            if curv < 0:
                delta = float(np.clip(0.5 * (r_m - r_p) / curv, -0.5, 0.5))
        out_d[v, u] = j + delta - u
    return DisparityMap(np.where(out_m, out_d, 0.0), out_m)


def depth_from_disparity(d, phi: float):
    """Depth ``d / (2 sin(phi/2))`` for views ``phi`` degrees apart."""
    if not 0.0 < phi < 180.0:
        raise ValueError(f"phi must lie in (0, 180) degrees, got {phi}")
    scale = 2.0 * math.sin(math.radians(phi) / 2.0)
    if np.ndim(d) == 0:
        return float(d) / scale
    return np.asarray(d, np.float64) / scale


@dataclass
class Reconstruction:
    points: np.ndarray  # (n, 3)
    pixels: np.ndarray  # (n, 2) source (u, v) in the left view
    disparities: np.ndarray  # (n,)
    geometry: TiltGeometry
    cx: float = 0.0
    shape: tuple[int, int] = (0, 0)
    edges: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), int))

    def __len__(self) -> int:
        return len(self.points)


def trace_edges(pixels: np.ndarray) -> np.ndarray:
    """Link consecutive pixels of each 8-connected component into polylines.

    Within a component a greedy nearest-neighbour walk starts at the pixel
    farthest from the component centroid; consecutive pixels are linked when
    they touch (Chebyshev distance 1).
    """
    if len(pixels) == 0:
        return np.zeros((0, 2), int)
    pix = np.asarray(pixels, int)
    w, h = pix[:, 0].max() + 1, pix[:, 1].max() + 1
    grid = np.zeros((h, w), bool)
    grid[pix[:, 1], pix[:, 0]] = True
    labels, _ = ndimage.label(grid, structure=np.ones((3, 3)))
    lab = labels[pix[:, 1], pix[:, 0]]
    edges = []
    for comp in np.unique(lab):
        idx = np.flatnonzero(lab == comp)
        pts = pix[idx].astype(np.float64)
        start = int(np.argmax(((pts - pts.mean(0)) ** 2).sum(1)))
        left = np.ones(len(idx), bool)
        cur = start
        left[cur] = False
        for _ in range(len(idx) - 1):
            rem = np.flatnonzero(left)
            dist = ((pts[rem] - pts[cur]) ** 2).sum(1)
            nxt = int(rem[np.argmin(dist)])
            if np.abs(pts[nxt] - pts[cur]).max() <= 1:
                edges.append((idx[cur], idx[nxt]))
            left[nxt] = False
            cur = nxt
    return np.array(edges, int).reshape(-1, 2)


def triangulate(disp: DisparityMap, geo: TiltGeometry, cx: float | None = None) -> Reconstruction:
    """One 3D point per masked pixel: ``(u + d/2, v, depth(d))``."""
    h, w = disp.shape
    if cx is None:
        cx = (w - 1) / 2.0
    vv, uu = np.nonzero(disp.mask)
    d = disp.disp[vv, uu]
    pts = np.column_stack([uu + d / 2.0, vv.astype(np.float64), depth_from_disparity(d, geo.phi)])
    pixels = np.column_stack([uu, vv])
    return Reconstruction(pts.reshape(-1, 3), pixels, d, geo, float(cx), (h, w), trace_edges(pixels))


def reproject(rec: Reconstruction, alpha: float) -> np.ndarray:
    """Orthographic projection of the reconstruction at tilt ``alpha`` degrees -> ``(n, 2)``."""
    a = math.radians(alpha)
    x, y, z = rec.points.T
    u = (x - rec.cx) * math.cos(a) + z * math.sin(a) + rec.cx
    return np.column_stack([u, y])


def export_ply(rec: Reconstruction, path) -> None:
    """ASCII PLY with float vertices and polyline edges."""
    n, m = len(rec.points), len(rec.edges)
    lines = [
        "ply",
        "format ascii 1.0",
        "comment curvistereo reconstruction (x, y in pixels; z depth in pixels)",
        f"element vertex {n}",
        "property float x",
        "property float y",
        "property float z",
        f"element edge {m}",
        "property int vertex1",
        "property int vertex2",
        "end_header",
    ]
    pts = rec.points.astype(np.float32)
    lines += [f"{repr(float(x))} {repr(float(y))} {repr(float(z))}" for x, y, z in pts]
    lines += [f"{a} {b}" for a, b in rec.edges]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_ply(path) -> tuple[np.ndarray, np.ndarray]:
    """Read vertices ``(n, 3)`` and edges ``(m, 2)`` back from :func:`export_ply` output."""
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != "ply":
        raise ValueError(f"{path}: not a PLY file")
    n_v = n_e = 0
    i = 1
    while lines[i] != "end_header":
        parts = lines[i].split()
        if parts[:2] == ["element", "vertex"]:
            n_v = int(parts[2])
        elif parts[:2] == ["element", "edge"]:
            n_e = int(parts[2])
        i += 1
    body = lines[i + 1 :]
    verts = np.array([[float(t) for t in ln.split()] for ln in body[:n_v]], np.float32).reshape(-1, 3)
    edges = np.array([[int(t) for t in ln.split()] for ln in body[n_v : n_v + n_e]], int).reshape(-1, 2)
    return verts, edges
