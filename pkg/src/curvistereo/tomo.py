"""Toy parallel-beam tomography (WBP, SIRT) and the views sweep.

With the tilt axis vertical every image row is an independent 2D problem
over the ``(x, z)`` plane, so one sparse system matrix serves all rows.
Volumes are indexed ``[v, k, j]`` for ``y = v``, ``z = z_min + k``, ``x = j``.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from skimage.filters import threshold_otsu
from skimage.morphology import skeletonize

from .core import TiltGeometry
from .matcher import MatcherConfig, Weights, infer
from .metrics import curve_distance, gt_points, to_world
from .reconstruct import refine_disparity, triangulate
from .synth import RenderConfig, Scene3D, gt_disparity, render_view


@dataclass(frozen=True)
class TomoGrid:
    width: int  # voxels along x (= image columns)
    height: int  # rows
    nz: int
    z_min: float
    det_width: int
    det_offset: float  # detector column of u = 0

    @property
    def cx(self) -> float:
        return (self.width - 1) / 2.0

    @classmethod
    def for_scene(cls, scene: Scene3D, max_angle: float = 60.0) -> "TomoGrid":
        zmax = int(math.ceil(scene.depth))
        pad = int(math.ceil(scene.depth * math.sin(math.radians(max_angle)))) + 2
        return cls(scene.width, scene.height, 2 * zmax + 1, -float(zmax), scene.width + 2 * pad, float(pad))


def system_matrix(grid: TomoGrid, angles) -> sparse.csr_matrix:
    """Pixel-driven projector with linear splatting onto detector bins.

    Shape ``(n_angles * det_width, nz * width)``.
    """
    angles = np.asarray(angles, np.float64)
    kk, jj = np.mgrid[0 : grid.nz, 0 : grid.width]
    x = jj.ravel().astype(np.float64)
    z = grid.z_min + kk.ravel()
    vox = np.arange(x.size)
    rows, cols, vals = [], [], []
    for i, a in enumerate(np.radians(angles)):
        s = (x - grid.cx) * math.cos(a) + z * math.sin(a) + grid.cx + grid.det_offset
        b0 = np.floor(s).astype(int)
        f = s - b0
        for b, wgt in ((b0, 1.0 - f), (b0 + 1, f)):
            ok = (b >= 0) & (b < grid.det_width) & (wgt > 0)
            rows.append(i * grid.det_width + b[ok])
            cols.append(vox[ok])
            vals.append(wgt[ok])
    return sparse.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(len(angles) * grid.det_width, x.size),
    )


def _as_sinograms(projections, grid: TomoGrid) -> np.ndarray:
    """``(n_angles, H, det_width)`` -> ``(n_angles * det_width, H)`` columns per row."""
    p = np.asarray(projections, np.float64)
    if p.ndim != 3 or p.shape[1:] != (grid.height, grid.det_width):
        raise ValueError(f"projections must be (n, {grid.height}, {grid.det_width}), got {p.shape}")
    return p.transpose(0, 2, 1).reshape(-1, grid.height)


def _to_volume(cols: np.ndarray, grid: TomoGrid) -> np.ndarray:
    return cols.T.reshape(grid.height, grid.nz, grid.width)


def forward_project(volume, angles, grid: TomoGrid) -> np.ndarray:
    a = system_matrix(grid, angles)
    cols = a @ np.asarray(volume, np.float64).reshape(grid.height, -1).T
    return cols.reshape(len(angles), grid.det_width, grid.height).transpose(0, 2, 1)


def _row_chunks(n: int, threads: int):
    bounds = np.linspace(0, n, max(1, threads) + 1).astype(int)
    return [slice(a, b) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]


def _map_rows(fn, cols: np.ndarray, threads: int) -> np.ndarray:
    chunks = _row_chunks(cols.shape[1], threads)
    if len(chunks) == 1:
        return fn(cols)
    with ThreadPoolExecutor(len(chunks)) as ex:
        parts = list(ex.map(lambda sl: fn(cols[:, sl]), chunks))
    return np.concatenate(parts, axis=1)


def ramp_filter(sino: np.ndarray) -> np.ndarray:
    """Ram-Lak filter along the detector axis (axis 1), zero-padded to a power of two."""
    n = sino.shape[1]
    size = max(64, 1 << int(math.ceil(math.log2(2 * n))))
    # spatial-domain Ram-Lak kernel sampled on the detector grid
    k = np.arange(-(size // 2), size // 2)
    h = np.zeros(size)
    h[k == 0] = 0.25
    odd = (k % 2) == 1
    h[odd] = -1.0 / (math.pi * k[odd]) ** 2
    filt = np.abs(np.fft.fft(np.fft.ifftshift(h)))
    spec = np.fft.fft(sino, n=size, axis=1) * filt
    return np.real(np.fft.ifft(spec, axis=1))[:, :n]


def _angle_weight(angles: np.ndarray) -> float:
    if len(angles) < 2:
        return math.pi
    return math.radians(float(np.ptp(angles))) / (len(angles) - 1)


def wbp_reconstruct(projections, angles, grid: TomoGrid, threads: int = 1) -> np.ndarray:
    """Ramp-filtered backprojection, row by row.  Returns ``(H, nz, W)``."""
    angles = np.asarray(angles, np.float64)
    p = np.asarray(projections, np.float64)
    if p.shape[0] != angles.size or angles.size < 1:
        raise ValueError(f"{p.shape[0]} projections for {angles.size} angles")
    filtered = np.stack([ramp_filter(p[i].reshape(grid.height, -1)) for i in range(angles.size)])
    a = system_matrix(grid, angles)
    cols = _as_sinograms(filtered, grid)
    vol = _map_rows(lambda c: a.T @ c, cols, threads) * _angle_weight(angles)
    return _to_volume(vol, grid)


def sirt_reconstruct(
    projections,
    angles,
    grid: TomoGrid,
    iterations: int = 50,
    relaxation: float = 1.0,
    x0=None,
    threads: int = 1,
    return_residuals: bool = False,
    min_ray_fraction: float = 0.0,
):
    """SIRT: ``v <- v + lambda * C A^T R (p - A v)`` with inverse row/column sums.

    Rays whose path through the grid is shorter than ``min_ray_fraction``
    of the longest ray are left out: their large ``1 / row sum`` weights
    otherwise pump projection noise into the grid corners.

    Returns the ``(H, nz, W)`` volume and, optionally, the projection residual
    norm before the first and after every iteration.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    if not 0.0 < relaxation <= 1.0:
        raise ValueError("relaxation must lie in (0, 1]")
    if not 0.0 <= min_ray_fraction < 1.0:
        raise ValueError("min_ray_fraction must lie in [0, 1)")
    angles = np.asarray(angles, np.float64)
    p = np.asarray(projections, np.float64)
    if p.shape[0] != angles.size or angles.size < 1:
        raise ValueError(f"{p.shape[0]} projections for {angles.size} angles")
    a = system_matrix(grid, angles)
    at = a.T.tocsr()
    rs = np.asarray(a.sum(axis=1)).ravel()
    if min_ray_fraction > 0:
        keep = rs >= min_ray_fraction * rs.max()
        a = sparse.diags(keep.astype(np.float64)) @ a
        at = a.T.tocsr()
        rs = np.where(keep, rs, 0.0)
    cs = np.asarray(a.sum(axis=0)).ravel()
    r_inv = np.divide(1.0, rs, out=np.zeros_like(rs), where=rs > 0)[:, None]
    c_inv = np.divide(1.0, cs, out=np.zeros_like(cs), where=cs > 0)[:, None]
    b = _as_sinograms(p, grid)
    if x0 is None:
        x = np.zeros((a.shape[1], grid.height))
    else:
        x = np.asarray(x0, np.float64).reshape(grid.height, -1).T.copy()

    def run(bc, xc):
        res = [float(np.linalg.norm(bc - a @ xc))]
        for _ in range(iterations):
            xc = xc + relaxation * c_inv * (at @ (r_inv * (bc - a @ xc)))
            res.append(float(np.linalg.norm(bc - a @ xc)))
        return xc, np.array(res)

    chunks = _row_chunks(grid.height, threads)
    if len(chunks) == 1:
        parts = [run(b, x)]
    else:
        with ThreadPoolExecutor(len(chunks)) as ex:
            parts = list(ex.map(lambda sl: run(b[:, sl], x[:, sl]), chunks))
    vol = _to_volume(np.concatenate([q[0] for q in parts], axis=1), grid)
    if not return_residuals:
        return vol
    residuals = np.sqrt(np.sum([q[1] ** 2 for q in parts], axis=0))
    return vol, residuals


def skeleton_points(volume: np.ndarray, grid: TomoGrid, threshold: float | None = None):
    """Otsu-threshold and skeletonize a volume; returns world points and the threshold."""
    if threshold is None:
        threshold = float(threshold_otsu(volume)) if np.ptp(volume) > 0 else float(volume.max())
    binary = volume > threshold
    if not binary.any():
        return np.zeros((0, 3)), threshold
    skel = skeletonize(binary)
    v, k, j = np.nonzero(skel)
    return np.column_stack([j.astype(np.float64), v.astype(np.float64), grid.z_min + k]), threshold


def tilt_series(n_total: int = 45, lo: float = -48.0, hi: float = 48.0) -> np.ndarray:
    return np.linspace(lo, hi, n_total)


def regular_subset(series: np.ndarray, n: int) -> np.ndarray:
    """``n`` views taken at regular index spacing from ``series`` (endpoints included)."""
    if not 1 <= n <= len(series):
        raise ValueError(f"cannot take {n} views from {len(series)}")
    if n == 1:
        return series[[len(series) // 2]]
    idx = np.rint(np.linspace(0, len(series) - 1, n)).astype(int)
    return series[idx]


def render_projections(scene: Scene3D, angles, cfg: RenderConfig, grid: TomoGrid) -> np.ndarray:
    """Absorption-like projections: background minus rendered intensity."""
    out = []
    for a in angles:
        img, _ = render_view(scene, float(a), cfg, width=grid.det_width, offset=grid.det_offset)
        out.append(cfg.background - img)
    return np.stack(out)


def stereo_points(scene: Scene3D, phi: float, cfg: RenderConfig, weights: Weights | None,
                  mcfg: MatcherConfig | None = None, refine: bool = True) -> np.ndarray:
    """World-frame points from the two-view pipeline at ``+-phi/2``.

    Without weights an idealized matcher is used: ground-truth detections
    with disparities rounded to whole pixels.
    """
    geo = TiltGeometry(phi=phi)
    if weights is None:
        gt = gt_disparity(scene, phi, cfg)
        gt.disp = np.where(gt.mask, np.rint(gt.disp), 0.0)
        disp = gt
    else:
        mcfg = mcfg or MatcherConfig()
        left, _ = render_view(scene, -phi / 2.0, cfg)
        right, _ = render_view(scene, phi / 2.0, cfg)
        pred = infer(left, right, weights, mcfg)
        disp = pred.disparity
        if refine:
            disp = refine_disparity(disp, pred.det_left, pred.det_right, threshold=mcfg.threshold)
    rec = triangulate(disp, geo, cx=scene.cx)
    return to_world(rec.points, phi, scene.cx)


SWEEP_COLUMNS = ["n_views", "stereo_err", "wbp_err", "sirt_err"]


def views_sweep(
    scene: Scene3D,
    view_counts,
    weights: Weights | None = None,
    mcfg: MatcherConfig | None = None,
    phi: float = 8.0,
    cfg: RenderConfig = RenderConfig(),
    n_total: int = 45,
    max_angle: float = 48.0,
    sirt_iterations: int = 50,
    threads: int = 1,
    min_ray_fraction: float = 0.25,
) -> list[dict]:
    """Curve-distance error of stereo, WBP and SIRT against the number of views.

    The stereo entry always uses one pair ``phi`` apart; tomography uses
    ``n`` views regularly sampled from an ``n_total`` series over
    ``+-max_angle``.  Tomograms are Otsu-thresholded and skeletonized.
    SIRT ignores rays that clip a corner of the slab (``min_ray_fraction``);
    their inflated row weights otherwise paint bright streaks on the box faces
    that survive thresholding.
    """
    truth = gt_points(scene)
    stereo_err = curve_distance(stereo_points(scene, phi, cfg, weights, mcfg), truth)
    grid = TomoGrid.for_scene(scene, max_angle)
    series = tilt_series(n_total, -max_angle, max_angle)
    rows = []
    for n in view_counts:
        angles = regular_subset(series, int(n))
        proj = render_projections(scene, angles, cfg, grid)
        wbp_pts, t_wbp = skeleton_points(wbp_reconstruct(proj, angles, grid, threads), grid)
        sirt_pts, t_sirt = skeleton_points(
            sirt_reconstruct(proj, angles, grid, sirt_iterations, threads=threads, min_ray_fraction=min_ray_fraction),
            grid,
        )
        rows.append({
            "n_views": int(n),
            "stereo_err": stereo_err,
            "wbp_err": curve_distance(wbp_pts, truth),
            "sirt_err": curve_distance(sirt_pts, truth),
            "wbp_threshold": t_wbp,
            "sirt_threshold": t_sirt,
        })
    return rows


def write_sweep_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(SWEEP_COLUMNS)
        for r in rows:
            wr.writerow([r["n_views"]] + [repr(float(r[k])) for k in SWEEP_COLUMNS[1:]])
