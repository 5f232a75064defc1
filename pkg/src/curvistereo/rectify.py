"""Epipolar alignment of a raw tilt pair.

A left point ``p`` and its right counterpart ``q`` are related by

    q = p + d (cos theta, sin theta) + t

where ``d`` is the point's disparity, ``theta`` the angle of the tilt-axis
normal to the image x axis and ``t`` a global translation.  Correspondence
displacements are reported as ``p - q``.  Because a global horizontal shift
cannot be told apart from a constant disparity offset, the median
displacement of the inliers fixes the disparity origin.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from skimage.feature import corner_harris, corner_peaks

from .core import DegenerateError, TiltGeometry, check_image


@dataclass(frozen=True)
class Keypoint:
    x: float
    y: float
    score: float


@dataclass(frozen=True)
class Correspondence:
    left: Keypoint
    right: Keypoint
    similarity: float

    @property
    def displacement(self) -> np.ndarray:
        return np.array([self.left.x - self.right.x, self.left.y - self.right.y])


@dataclass(frozen=True)
class RansacConfig:
    iterations: int = 200
    inlier_threshold: float = 1.0
    min_inliers: int = 10
    seed: int = 0
    max_disparity: float = 48.0  # largest |residual| accepted as a disparity

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.inlier_threshold <= 0:
            raise ValueError("inlier_threshold must be positive")
        if self.min_inliers < 1:
            raise ValueError("min_inliers must be >= 1")


def _parabola_offset(r_m: float, r_0: float, r_p: float) -> float:
    curv = r_m - 2.0 * r_0 + r_p
    if curv >= 0:
        return 0.0
    return float(np.clip(0.5 * (r_m - r_p) / curv, -0.5, 0.5))


def detect_keypoints(img, max_n: int = 500, sigma: float = 1.5, min_distance: int = 2,
                     threshold_rel: float = 0.01, border: int = 5) -> list[Keypoint]:
    """Harris corners, strongest first, with quadratic sub-pixel localization."""
    img = check_image(img).astype(np.float64)
    if img.shape[0] < 16 or img.shape[1] < 16:
        raise ValueError("image must be at least 16x16")
    if np.ptp(img) == 0:
        return []
    resp = corner_harris(img, method="k", k=0.05, sigma=sigma)
    # the response rings at the image edge; judge strength on the interior only
    top = resp[border:-border, border:-border].max()
    if top <= 0:
        return []
    peaks = corner_peaks(resp, min_distance=min_distance, threshold_rel=None,
                         threshold_abs=threshold_rel * top, exclude_border=border)
    kps = []
    for r, c in peaks:
        dx = _parabola_offset(resp[r, c - 1], resp[r, c], resp[r, c + 1])
        dy = _parabola_offset(resp[r - 1, c], resp[r, c], resp[r + 1, c])
        kps.append(Keypoint(c + dx, r + dy, float(resp[r, c])))
    kps.sort(key=lambda k: (-k.score, k.y, k.x))
    return kps[:max_n]


def _patches(img: np.ndarray, kps, half: int):
    h, w = img.shape
    rows, keep = [], []
    for i, k in enumerate(kps):
        c, r = int(round(k.x)), int(round(k.y))
        if half <= r < h - half and half <= c < w - half:
            rows.append(img[r - half : r + half + 1, c - half : c + half + 1].ravel())
            keep.append(i)
    if not rows:
        return np.zeros((0, (2 * half + 1) ** 2)), keep
    z = np.array(rows, np.float64)
    z -= z.mean(axis=1, keepdims=True)
    norm = np.linalg.norm(z, axis=1, keepdims=True)
    z = np.divide(z, norm, out=np.zeros_like(z), where=norm > 1e-12)
    return z, keep


def _refine(left: np.ndarray, coeffs: np.ndarray, lp, rp, half: int, iters: int = 20):
    """Gauss-Newton alignment of the right patch to the left patch (zero-mean SSD)."""
    g = np.arange(-half, half + 1, dtype=np.float64)
    gy, gx = np.meshgrid(g, g, indexing="ij")
    tmpl = left[lp[1] - half : lp[1] + half + 1, lp[0] - half : lp[0] + half + 1].astype(np.float64)
    tmpl = tmpl - tmpl.mean()
    pos = np.array(rp, np.float64)
    for _ in range(iters):
        ys, xs = gy + pos[1], gx + pos[0]
        big = ndimage.map_coordinates(
            coeffs, [np.pad(ys, 1, mode="reflect", reflect_type="odd"),
                     np.pad(xs, 1, mode="reflect", reflect_type="odd")],
            order=3, prefilter=False, mode="nearest",
        )
        patch = big[1:-1, 1:-1]
        jx = 0.5 * (big[1:-1, 2:] - big[1:-1, :-2])
        jy = 0.5 * (big[2:, 1:-1] - big[:-2, 1:-1])
        jac = np.column_stack([(jx - jx.mean()).ravel(), (jy - jy.mean()).ravel()])
        err = (patch - patch.mean()).ravel() - tmpl.ravel()
        hess = jac.T @ jac
        if np.linalg.cond(hess) > 1e8:
            return None
        step = -np.linalg.solve(hess, jac.T @ err)
        pos += step
        if np.abs(pos - rp).max() > 3.0:
            return None
        if np.abs(step).max() < 1e-4:
            zp, zt = patch - patch.mean(), tmpl
            den = np.linalg.norm(zp) * np.linalg.norm(zt)
            return pos, float((zp * zt).sum() / den) if den > 0 else 0.0
    return None


def match_keypoints(left, right, kl, kr, patch: int = 11, min_similarity: float = 0.8,
                    refine: bool = True, min_refined_similarity: float = 0.98) -> list[Correspondence]:
    """Mutual-best ZNCC matching of keypoint patches.

    Left endpoints sit on whole pixels (the rounded left keypoint).  With
    ``refine`` the right endpoint is then moved to sub-pixel accuracy by
    Gauss-Newton alignment of the right patch onto the left patch; matches
    that do not converge, or whose ZNCC at the refined position is below
    ``min_refined_similarity``, are discarded, and the reported similarity
    is the refined one.
    """
    if patch < 5 or patch % 2 == 0:
        raise ValueError("patch must be odd and >= 5")
    left = check_image(left).astype(np.float64)
    right = check_image(right).astype(np.float64)
    half = patch // 2
    zl, il = _patches(left, kl, half)
    zr, ir = _patches(right, kr, half)
    if len(il) == 0 or len(ir) == 0:
        return []
    sim = zl @ zr.T
    best_r = np.argmax(sim, axis=1)
    best_l = np.argmax(sim, axis=0)
    coeffs = ndimage.spline_filter(right, order=3) if refine else None
    out = []
    h, w = right.shape
    for a, b in enumerate(best_r):
        s = float(sim[a, b])
        if best_l[b] != a or s < min_similarity:
            continue
        ka, kb = kl[il[a]], kr[ir[b]]
        lp = (int(round(ka.x)), int(round(ka.y)))
        rp = (int(round(kb.x)), int(round(kb.y)))
        pos = np.array(rp, np.float64)
        if refine:
            if not (half + 4 <= rp[1] < h - half - 4 and half + 4 <= rp[0] < w - half - 4):
                continue
            fit = _refine(left, coeffs, lp, rp, half)
            if fit is None:  # did not converge near the integer match
                continue
            pos, s = fit
            if s < min_refined_similarity:
                continue
        out.append(Correspondence(
            Keypoint(float(lp[0]), float(lp[1]), ka.score),
            Keypoint(float(pos[0]), float(pos[1]), kb.score),
            min(1.0, s),
        ))
    return out


def _canonical(cs: list[Correspondence]) -> tuple[np.ndarray, np.ndarray]:
    """Displacements sorted into an order that depends only on their content."""
    rows = np.array([[c.left.x, c.left.y, c.right.x, c.right.y, c.similarity] for c in cs], np.float64)
    order = np.lexsort(rows.T[::-1])
    disp = rows[order, :2] - rows[order, 2:4]
    return disp, order


def _direction(res: np.ndarray) -> float:
    """Median axial angle (mod pi) of residual vectors; 0 when none is measurable."""
    big = np.hypot(res[:, 0], res[:, 1]) > 0.5
    if not big.any():
        return 0.0
    r = res[big]
    ang = np.arctan2(r[:, 1], r[:, 0])
    ang = np.where(ang > math.pi / 2, ang - math.pi, ang)
    ang = np.where(ang <= -math.pi / 2, ang + math.pi, ang)
    return float(np.median(ang))


def _inliers(disp: np.ndarray, t: np.ndarray, cfg: RansacConfig) -> np.ndarray:
    res = disp + t
    psi = _direction(res)
    perp = -math.sin(psi) * res[:, 0] + math.cos(psi) * res[:, 1]
    along = math.cos(psi) * res[:, 0] + math.sin(psi) * res[:, 1]
    return (np.abs(perp) <= cfg.inlier_threshold) & (np.abs(along) <= cfg.max_disparity)


def _fit(disp: np.ndarray) -> np.ndarray:
    """Least-squares displacement line, anchored at the median horizontal displacement."""
    m = float(np.median(disp[:, 0]))
    dx = disp[:, 0] - m
    if len(disp) >= 2 and np.ptp(dx) > 1e-9:
        b, a = np.polyfit(dx, disp[:, 1], 1)
    else:
        a = float(np.mean(disp[:, 1]))
    return -np.array([m, a])


def estimate_translation(cs: list[Correspondence], cfg: RansacConfig = RansacConfig()):
    """RANSAC over single-correspondence hypotheses, then two least-squares refits.

    Returns ``((t_x, t_y), inliers)`` where ``inliers`` are indices into
    ``cs``.  The result does not depend on the order of ``cs``.
    """
    if len(cs) < cfg.min_inliers:
        raise DegenerateError("degenerate correspondences")
    disp, order = _canonical(cs)
    schedule = np.random.default_rng(cfg.seed).integers(0, len(disp), cfg.iterations)
    best, best_n = None, -1
    for j in schedule:
        mask = _inliers(disp, -disp[j], cfg)
        n = int(mask.sum())
        if n > best_n:
            best, best_n = mask, n
    for _ in range(2):
        if best.sum() < cfg.min_inliers:
            break
        t = _fit(disp[best])
        best = _inliers(disp, t, cfg)
    if best.sum() < cfg.min_inliers:
        raise DegenerateError("degenerate correspondences")
    t = _fit(disp[best])
    return (float(t[0]), float(t[1])), sorted(int(i) for i in order[best])


def estimate_tilt_angle(cs: list[Correspondence], t=(0.0, 0.0), min_count: int = 5) -> float:
    """Median angle, in degrees, of the residual displacements ``q - p - t``.

    Only residuals longer than 0.5 px take part.
    """
    if not cs:
        raise DegenerateError("degenerate: no measurable tilt displacement")
    disp, _ = _canonical(cs)
    res = -(disp + np.asarray(t, np.float64))  # q - p - t = d (cos, sin)
    big = np.hypot(res[:, 0], res[:, 1]) > 0.5
    if big.sum() < min_count:
        raise DegenerateError("degenerate: no measurable tilt displacement")
    r = res[big]
    # disparities may be signed: fold onto the right half plane
    r = np.where(r[:, :1] < 0, -r, r)
    return float(np.degrees(np.median(np.arctan2(r[:, 1], r[:, 0]))))


def _rotation(theta: float) -> tuple[float, float]:
    q, rem = divmod(float(theta), 90.0)
    if rem == 0.0:
        return [(1.0, 0.0), (0.0, 1.0), (-1.0, 0.0), (0.0, -1.0)][int(q) % 4]
    rad = math.radians(theta)
    return math.cos(rad), math.sin(rad)


def warp(img, theta: float = 0.0, t=(0.0, 0.0), fill: float | None = None) -> np.ndarray:
    """``out(p) = img(c + R(theta) (p - c) + t)`` with bilinear sampling.

    Samples falling outside the image take ``fill`` (default: the image
    median).  The identity transform returns an exact copy.
    """
    img = check_image(img)
    if theta == 0.0 and t[0] == 0.0 and t[1] == 0.0:
        return img.copy()
    h, w = img.shape
    cos, sin = _rotation(theta)
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dx, dy = xx - cx, yy - cy
    sx = cx + cos * dx - sin * dy + t[0]
    sy = cy + sin * dx + cos * dy + t[1]
    fill = float(np.median(img)) if fill is None else fill
    out = ndimage.map_coordinates(img.astype(np.float64), [sy, sx], order=1, mode="constant", cval=np.nan)
    # map_coordinates treats the last pixel as out of range for non-integer coordinates
    inside = (sx >= -1e-9) & (sx <= w - 1 + 1e-9) & (sy >= -1e-9) & (sy <= h - 1 + 1e-9)
    out = np.where(inside & np.isfinite(out), out, fill)
    return out.astype(img.dtype)


def derotate(img, theta: float) -> np.ndarray:
    """Resample ``img`` under a rotation by ``-theta`` degrees about its centre."""
    if abs(theta) > 45.0 and theta % 90.0 != 0.0:  # quarter turns are exact lattice maps
        raise ValueError("|theta| must not exceed 45 degrees")
    return warp(img, theta)


def aligned_displacements(cs: list[Correspondence], theta: float, t, shape) -> np.ndarray:
    """Displacements ``q' - p'`` after applying the rectifying warps to both endpoints."""
    h, w = shape
    c = np.array([(w - 1) / 2.0, (h - 1) / 2.0])
    cos, sin = _rotation(theta)
    inv = np.array([[cos, sin], [-sin, cos]])  # R(-theta)
    p = np.array([[k.left.x, k.left.y] for k in cs])
    q = np.array([[k.right.x, k.right.y] for k in cs]) - np.asarray(t)
    return (q - c) @ inv.T - (p - c) @ inv.T


def rectify_pair(left, right, cfg: RansacConfig = RansacConfig(), phi: float = 8.0,
                 max_keypoints: int = 1000, patch: int = 11, return_inliers: bool = False):
    """Estimate ``(t, theta)`` and resample both views so disparities run along rows.

    The right view is shifted by ``-t``; both views are then rotated by
    ``-theta`` about the image centre.  Returns
    ``(left_aligned, right_aligned, geometry)``, plus the inlier
    correspondences when ``return_inliers`` is set.
    """
    left = check_image(left, "left")
    right = check_image(right, "right")
    if left.shape != right.shape:
        raise ValueError(f"image shapes differ: {left.shape} vs {right.shape}")
    kl = detect_keypoints(left, max_keypoints)
    kr = detect_keypoints(right, max_keypoints)
    cs = match_keypoints(left, right, kl, kr, patch)
    t, idx = estimate_translation(cs, cfg)
    inl = [cs[i] for i in idx]
    theta = estimate_tilt_angle(inl, t)
    if abs(theta) > 10.0:
        raise DegenerateError(f"degenerate correspondences: implausible tilt axis angle {theta:.2f} deg")
    geo = TiltGeometry(phi=phi, theta=theta, t=t)
    out = (warp(left, theta), warp(right, theta, t), geo)
    return out + (inl,) if return_inliers else out
