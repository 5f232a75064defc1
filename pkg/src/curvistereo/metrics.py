"""Evaluation metrics for disparities, depth, curves and image quality."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .core import DisparityMap, ShapeError
from .reconstruct import Reconstruction
from .synth import Scene3D, dense_samples

SNR_CAP_DB = 120.0


@dataclass
class MetricsReport:
    epe: float
    pct_gt_1: float
    pct_gt_3: float
    pct_gt_5: float
    n_pixels: int
    depth_error: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def _joint_errors(pred: DisparityMap, gt: DisparityMap) -> np.ndarray:
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    joint = pred.mask & gt.mask
    if not joint.any():
        raise ValueError("no jointly valid pixels")
    return np.abs(pred.disp[joint] - gt.disp[joint])


def epe(pred: DisparityMap, gt: DisparityMap) -> float:
    """Mean absolute disparity error over jointly valid pixels."""
    return float(np.mean(_joint_errors(pred, gt)))


def threshold_pct(pred: DisparityMap, gt: DisparityMap, tau: float) -> float:
    """Percentage of jointly valid pixels with error above ``tau``."""
    err = _joint_errors(pred, gt)
    return 100.0 * float(np.count_nonzero(err > tau)) / err.size


def gt_points(scene: Scene3D, spacing: float = 0.1) -> np.ndarray:
    """Dense ground-truth curve samples ``(n, 3)`` in the world frame."""
    if not scene.curves:
        return np.zeros((0, 3))
    return np.concatenate([dense_samples(c, spacing) for c in scene.curves])


def to_center_view(points: np.ndarray, phi: float, cx: float) -> np.ndarray:
    """World points -> centre-view frame (x compressed by ``cos(phi/2)`` about ``cx``)."""
    out = np.array(points, np.float64, copy=True)
    out[:, 0] = (out[:, 0] - cx) * math.cos(math.radians(phi) / 2.0) + cx
    return out


def to_world(points: np.ndarray, phi: float, cx: float) -> np.ndarray:
    out = np.array(points, np.float64, copy=True)
    out[:, 0] = (out[:, 0] - cx) / math.cos(math.radians(phi) / 2.0) + cx
    return out


def depth_error(rec: Reconstruction, scene: Scene3D, radius: float = 1.0) -> float:
    """Mean z-distance from reconstructed points to ground-truth curve points.

    For each point the ground truth is searched among curve samples whose
    centre-view ``(x, y)`` lies within ``radius`` pixels; the smallest
    ``|z - z_gt|`` among them counts.  Points without any such sample are
    skipped.
    """
    if len(rec) == 0:
        raise ValueError("empty reconstruction")
    gt = to_center_view(gt_points(scene), rec.geometry.phi, rec.cx)
    if len(gt) == 0:
        raise ValueError("scene has no curves")
    tree = cKDTree(gt[:, :2])
    errs = []
    for p, near in zip(rec.points, tree.query_ball_point(rec.points[:, :2], r=radius)):
        if near:
            errs.append(np.min(np.abs(gt[near, 2] - p[2])))
    if not errs:
        raise ValueError("no reconstructed point has a ground-truth counterpart")
    return float(np.mean(errs))


def curve_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Symmetric mean nearest-neighbour distance between two point sets."""
    a = np.asarray(a, np.float64).reshape(-1, 3)
    b = np.asarray(b, np.float64).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        return float("inf")
    da, _ = cKDTree(b).query(a)
    db, _ = cKDTree(a).query(b)
    return float(0.5 * (da.mean() + db.mean()))


def _snr_db(values: np.ndarray) -> float:
    mu, sd = float(values.mean()), float(values.std())
    if sd == 0.0:
        return SNR_CAP_DB
    if mu <= 0.0:
        return -SNR_CAP_DB
    return min(SNR_CAP_DB, 20.0 * math.log10(mu / sd))


def snr_contrast(img, gt_mask, vicinity: int = 3) -> tuple[float, float, float]:
    """Structure and background SnR in dB, and contrast in 8-bit grey levels.

    Contrast is the mean intensity of background pixels within ``vicinity``
    pixels of a structure minus the mean structure intensity, times 255.
    """
    img = np.asarray(img, np.float64)
    mask = np.asarray(gt_mask) >= 0.5
    if img.shape != mask.shape:
        raise ShapeError("image and mask shapes differ")
    if mask.all() or not mask.any():
        raise ValueError("mask needs both structure and background pixels")
    near = ndimage.binary_dilation(mask, iterations=vicinity) & ~mask
    if not near.any():
        near = ~mask
    contrast = 255.0 * (img[near].mean() - img[mask].mean())
    return _snr_db(img[mask]), _snr_db(img[~mask]), float(contrast)


def metrics_report(pred: DisparityMap, gt: DisparityMap, rec: Reconstruction | None = None,
                   scene: Scene3D | None = None) -> MetricsReport:
    err = _joint_errors(pred, gt)
    report = MetricsReport(
        epe=float(err.mean()),
        pct_gt_1=100.0 * float(np.count_nonzero(err > 1)) / err.size,
        pct_gt_3=100.0 * float(np.count_nonzero(err > 3)) / err.size,
        pct_gt_5=100.0 * float(np.count_nonzero(err > 5)) / err.size,
        n_pixels=int(err.size),
    )
    if rec is not None and scene is not None and len(rec):
        report.depth_error = depth_error(rec, scene)
    return report
