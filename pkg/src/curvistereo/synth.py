"""Synthetic curvilinear scenes with exact projection and disparity ground truth.

Curves live in a slab ``[0, W] x [0, H] x [-Z, Z]``.  A view at tilt ``alpha``
is the orthographic projection after rotating about the vertical axis
through the image centre::

    u = (x - cx) cos(alpha) + z sin(alpha) + cx,   v = y,   cx = (W - 1) / 2

A stereo pair separated by ``phi`` uses ``alpha = -phi/2`` (left) and
``+phi/2`` (right), so the disparity of a point is ``2 z sin(phi/2)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage
from scipy.interpolate import CubicSpline
from scipy.spatial import cKDTree

from .core import DisparityMap


@dataclass
class Curve:
    control: np.ndarray  # (k, 3) control points x, y, z
    intensity: float = 1.0
    thickness: float = 1.0

    def __post_init__(self):
        self.control = np.asarray(self.control, dtype=np.float64).reshape(-1, 3)


@dataclass
class Scene3D:
    width: int
    height: int
    depth: float  # half-thickness Z of the slab
    curves: list[Curve] = field(default_factory=list)

    @property
    def cx(self) -> float:
        return (self.width - 1) / 2.0

    def to_json(self) -> str:
        doc = {
            "schema": 1,
            "width": self.width,
            "height": self.height,
            "depth": self.depth,
            "curves": [
                {
                    "control": c.control.tolist(),
                    "intensity": c.intensity,
                    "thickness": c.thickness,
                }
                for c in self.curves
            ],
        }
        return json.dumps(doc, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "Scene3D":
        doc = json.loads(text)
        curves = [Curve(np.array(c["control"]), c["intensity"], c["thickness"]) for c in doc["curves"]]
        return cls(int(doc["width"]), int(doc["height"]), float(doc["depth"]), curves)


@dataclass(frozen=True)
class RenderConfig:
    sigma: float = 1.0  # Gaussian line-profile width, pixels
    background: float = 0.7
    contrast: float = 0.4  # darkness of a line core
    noise: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if not (0.0 <= self.background - self.contrast and self.background <= 1.0):
            raise ValueError("background - contrast must stay within [0, 1]")


@dataclass
class StereoSample:
    """A rectified pair with ground truth in the left-view frame."""

    left: np.ndarray
    right: np.ndarray
    det_left: np.ndarray
    det_right: np.ndarray
    gt: DisparityMap
    detection_only: bool = False


def _spline(curve: Curve) -> CubicSpline:
    pts = curve.control
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    t = np.concatenate([[0.0], np.cumsum(seg)])
    t = t / t[-1]
    return CubicSpline(t, pts, axis=0, bc_type="natural")


def sample_curve(curve: Curve, n: int) -> np.ndarray:
    """``n`` points evenly spaced in the spline parameter, shape ``(n, 3)``."""
    return _spline(curve)(np.linspace(0.0, 1.0, n))


def dense_samples(curve: Curve, spacing: float = 0.1) -> np.ndarray:
    coarse = sample_curve(curve, 200)
    length = np.linalg.norm(np.diff(coarse, axis=0), axis=1).sum()
    return sample_curve(curve, max(200, int(math.ceil(length / spacing)) + 1))


def max_curvature(curve: Curve, n: int = 1000) -> float:
    sp = _spline(curve)
    t = np.linspace(0.0, 1.0, n)
    d1 = sp(t, 1)
    d2 = sp(t, 2)
    speed = np.linalg.norm(d1, axis=1)
    return float(np.max(np.linalg.norm(np.cross(d1, d2), axis=1) / np.maximum(speed, 1e-12) ** 3))


def _inside(pts: np.ndarray, scene: Scene3D) -> bool:
    x, y, z = pts.T
    return bool(
        np.all((x >= 0) & (x <= scene.width) & (y >= 0) & (y <= scene.height) & (np.abs(z) <= scene.depth))
    )


def generate_scene(
    rng: np.random.Generator,
    n_curves: int,
    width: int = 64,
    height: int = 32,
    depth: float = 100.0,
    curvature_bound: float = 0.25,
    x_margin: float | None = None,
    n_control: int = 4,
    z_step: float = 0.25,
) -> Scene3D:
    """Random smooth curves crossing the field of view from top to bottom.

    Each curve is a natural cubic spline through ``n_control`` control
    points evenly spaced in ``y``; ``x`` and ``z`` follow bounded random walks
    (``z`` steps of at most ``z_step * depth``) so depth varies smoothly.
    Candidates leaving the slab or exceeding ``curvature_bound``
    are redrawn from the same stream, so the result depends only on ``rng``.
    """
    if n_curves < 0:
        raise ValueError("n_curves must be >= 0")
    if x_margin is None:
        x_margin = max(4.0, width / 6.0)
    scene = Scene3D(width, height, float(depth))
    ys = np.linspace(0.0, float(height), n_control)
    for _ in range(n_curves):
        for _attempt in range(1000):
            x0 = rng.uniform(x_margin, width - x_margin)
            steps = rng.uniform(-width / 8.0, width / 8.0, n_control - 1)
            xs = np.clip(x0 + np.concatenate([[0.0], np.cumsum(steps)]), x_margin, width - x_margin)
            z0 = rng.uniform(-0.7 * depth, 0.7 * depth)
            zsteps = rng.uniform(-z_step * depth, z_step * depth, n_control - 1)
            zs = np.clip(z0 + np.concatenate([[0.0], np.cumsum(zsteps)]), -0.85 * depth, 0.85 * depth)
            curve = Curve(
                np.column_stack([xs, ys, zs]),
                intensity=float(rng.uniform(0.8, 1.0)),
                thickness=float(rng.uniform(0.9, 1.1)),
            )
            if _inside(sample_curve(curve, 1000), scene) and max_curvature(curve) <= curvature_bound:
                scene.curves.append(curve)
                break
        else:
            raise RuntimeError("could not draw a curve satisfying the slab and curvature bounds")
    return scene


def project(points: np.ndarray, alpha: float, cx: float) -> np.ndarray:
    """Orthographic projection of ``(n, 3)`` points at tilt ``alpha`` degrees -> ``(n, 2)``."""
    a = math.radians(alpha)
    u = (points[:, 0] - cx) * math.cos(a) + points[:, 2] * math.sin(a) + cx
    return np.column_stack([u, points[:, 1]])


def _pixel_centres(height: int, width: int) -> np.ndarray:
    vv, uu = np.mgrid[0:height, 0:width]
    return np.column_stack([uu.ravel(), vv.ravel()]).astype(np.float64)


def _nearest(scene: Scene3D, alpha: float, width: int, offset: float):
    """Per curve: distance to and index of the nearest dense sample, per pixel."""
    grid = _pixel_centres(scene.height, width)
    out = []
    for curve in scene.curves:
        pts = dense_samples(curve)
        uv = project(pts, alpha, scene.cx)
        uv[:, 0] += offset
        dist, idx = cKDTree(uv).query(grid)
        out.append((pts, dist.reshape(scene.height, width), idx.reshape(scene.height, width)))
    return out


def _view_rng(cfg: RenderConfig, alpha: float) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, int(round(alpha * 1e6)) % (2**32)])


def render_view(
    scene: Scene3D,
    alpha: float,
    cfg: RenderConfig = RenderConfig(),
    rng: np.random.Generator | None = None,
    width: int | None = None,
    offset: float = 0.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Render one tilted view and its ground-truth detection map.

    Curves are drawn as dark Gaussian profiles on a flat background, with
    additive Gaussian noise.  ``width``/``offset`` widen the canvas and shift
    the projected columns (used to avoid truncated tomography projections).

    Returns:
        ``(image, detection)`` both ``(H, width)``; detection is 1 within one
        profile sigma of a projected curve.
    """
    if abs(alpha) >= 60.0:
        raise ValueError("|alpha| must be below 60 degrees")
    width = scene.width if width is None else width
    if rng is None:
        rng = _view_rng(cfg, alpha)
    dark = np.zeros((scene.height, width))
    det = np.zeros((scene.height, width))
    for curve, (_, dist, _) in zip(scene.curves, _nearest(scene, alpha, width, offset)):
        s = cfg.sigma * curve.thickness
        dark = np.maximum(dark, cfg.contrast * curve.intensity * np.exp(-0.5 * (dist / s) ** 2))
        det[dist <= s] = 1.0
    img = cfg.background - dark
    if cfg.noise > 0:
        img = img + rng.normal(0.0, cfg.noise, img.shape)
    return np.clip(img, 0.0, 1.0), det


def _claims(scene: Scene3D, alpha: float, cfg: RenderConfig):
    """Z-buffered ownership of detection pixels: curve id (or -1) and source point."""
    h, w = scene.height, scene.width
    owner = np.full((h, w), -1)
    best_z = np.full((h, w), -np.inf)
    src = np.full((h, w, 3), np.nan)
    for k, (curve, (pts, dist, idx)) in enumerate(zip(scene.curves, _nearest(scene, alpha, w, 0.0))):
        s = cfg.sigma * curve.thickness
        z = pts[idx, 2]
        win = (dist <= s) & (z > best_z)
        owner[win] = k
        best_z[win] = z[win]
        src[win] = pts[idx[win]]
    return owner, src


def gt_disparity(scene: Scene3D, phi: float, cfg: RenderConfig = RenderConfig(), return_sources: bool = False):
    """Ground-truth disparity in the left view for a pair separated by ``phi``.

    A detection pixel takes the disparity ``u_right - u_left`` of its nearest
    source point on the camera-nearest (largest z) curve.  Pixels whose match
    in the right view is owned by a nearer, different curve are invalidated.

    Returns:
        ``DisparityMap``; with ``return_sources`` also the ``(H, W, 3)`` source
        points (NaN where invalid).
    """
    half = phi / 2.0
    owner_l, src = _claims(scene, -half, cfg)
    owner_r, src_r = _claims(scene, half, cfg)
    h, w = owner_l.shape
    mask = owner_l >= 0
    disp = np.zeros((h, w))
    pts = src[mask]
    u_l = project(pts, -half, scene.cx)[:, 0]
    u_r = project(pts, half, scene.cx)[:, 0]
    disp[mask] = u_r - u_l

    vv, uu = np.nonzero(mask)
    ur = np.rint(uu + disp[mask]).astype(int)
    inside = (ur >= 0) & (ur < w)
    occluded = np.zeros(vv.size, dtype=bool)
    o = owner_r[vv[inside], ur[inside]]
    zr = src_r[vv[inside], ur[inside], 2]
    occluded[inside] = (o >= 0) & (o != owner_l[vv[inside], uu[inside]]) & (zr > pts[inside, 2])
    mask[vv[occluded], uu[occluded]] = False
    src[~mask] = np.nan
    dm = DisparityMap(np.where(mask, disp, 0.0), mask)
    return (dm, src) if return_sources else dm


def make_stereo_sample(scene: Scene3D, phi: float, cfg: RenderConfig = RenderConfig()) -> StereoSample:
    left, det_l = render_view(scene, -phi / 2.0, cfg)
    right, det_r = render_view(scene, phi / 2.0, cfg)
    return StereoSample(left, right, det_l, det_r, gt_disparity(scene, phi, cfg))


@dataclass(frozen=True)
class DatasetConfig:
    n_pairs: int = 20
    phi: float = 8.0
    width: int = 64
    height: int = 32
    depth: float = 100.0
    n_curves: int = 3
    seed: int = 0
    render: RenderConfig = RenderConfig()

    def to_dict(self) -> dict:
        return asdict(self)


def make_dataset(cfg: DatasetConfig) -> tuple[list[Scene3D], list[StereoSample]]:
    """Independent scenes and rendered pairs; pair ``i`` uses seed stream ``(seed, i)``."""
    scenes, samples = [], []
    for i in range(cfg.n_pairs):
        rng = np.random.default_rng([cfg.seed, i])
        scene = generate_scene(rng, cfg.n_curves, cfg.width, cfg.height, cfg.depth)
        rcfg = RenderConfig(**{**asdict(cfg.render), "seed": cfg.render.seed * 100003 + cfg.seed * 1009 + i})
        scenes.append(scene)
        samples.append(make_stereo_sample(scene, cfg.phi, rcfg))
    return scenes, samples


@dataclass
class MisalignedPair:
    left: np.ndarray
    right: np.ndarray
    theta: float
    t: tuple[float, float]
    patches: list  # (x0, y0, x1, y1, disparity) in the aligned left frame


def _texture(rng: np.random.Generator, shape, sigma: float = 1.5) -> np.ndarray:
    tex = ndimage.gaussian_filter(rng.standard_normal(shape), sigma)
    lo, hi = np.percentile(tex, [1, 99])
    return np.clip(0.2 + 0.6 * (tex - lo) / (hi - lo), 0.0, 1.0)


def _box_alpha(x, y, box, soft: float = 0.5):
    x0, y0, x1, y1 = box
    ax = np.clip(np.minimum(x - x0, x1 - x) / (2 * soft) + 0.5, 0.0, 1.0)
    ay = np.clip(np.minimum(y - y0, y1 - y) / (2 * soft) + 0.5, 0.0, 1.0)
    return ax * ay


def make_misaligned_pair(
    rng: np.random.Generator,
    theta: float,
    t: tuple[float, float],
    size: tuple[int, int] = (128, 128),
    coverage: float = 0.35,
    disparity_range: tuple[float, float] = (3.0, 20.0),
    noise: float = 0.0,
    patch_size: tuple[float, float] = (20.0, 40.0),
) -> MisalignedPair:
    """Textured pair whose right view is offset by ``t`` along a tilt axis rotated by ``theta``.

    The aligned scene is a zero-disparity textured background with
    rectangular fronto-parallel patches, each carrying its own texture and a
    constant disparity drawn from ``disparity_range``; patches cover about
    ``coverage`` of the frame so the background dominates.  A left pixel
    ``p`` and its right counterpart ``q`` satisfy
    ``q = p + d (cos theta, sin theta) + t``.  Both views are sampled once
    from the continuous aligned scene, so no resampling error accumulates.
    """
    h, w = size
    margin = int(math.ceil(abs(t[0]) + abs(t[1]) + disparity_range[1] + 0.1 * max(h, w))) + 8
    big = (h + 2 * margin, w + 2 * margin)
    background = _texture(rng, big)
    patches, textures, area = [], [], 0.0
    while area < coverage * h * w:
        pw, ph = rng.uniform(*patch_size, 2)
        x0 = rng.uniform(2, w - pw - 2)
        y0 = rng.uniform(2, h - ph - 2)
        patches.append((x0, y0, x0 + pw, y0 + ph, float(rng.uniform(*disparity_range))))
        textures.append(_texture(rng, big))
        area += pw * ph
    order = np.argsort([p[4] for p in patches], kind="stable")  # larger disparity drawn on top

    def sample(tex, x, y):
        return ndimage.map_coordinates(tex, [y + margin, x + margin], order=3, mode="nearest")

    def view(x, y, right: bool):
        img = sample(background, x, y)
        for k in order:
            x0, y0, x1, y1, d = patches[k]
            xs = x - d if right else x
            a = _box_alpha(xs, y, (x0, y0, x1, y1))
            img = (1 - a) * img + a * sample(textures[k], xs, y)
        return img

    c = np.array([(w - 1) / 2.0, (h - 1) / 2.0])
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    rad = math.radians(theta)
    cos, sin = math.cos(rad), math.sin(rad)

    def aligned_coords(px, py):
        # inverse rotation by theta about the centre
        dx, dy = px - c[0], py - c[1]
        return c[0] + cos * dx + sin * dy, c[1] - sin * dx + cos * dy

    left = view(*aligned_coords(xx, yy), right=False)
    right = view(*aligned_coords(xx - t[0], yy - t[1]), right=True)
    if noise > 0:
        left = left + rng.normal(0.0, noise, left.shape)
        right = right + rng.normal(0.0, noise, right.shape)
    return MisalignedPair(
        np.clip(left, 0, 1).astype(np.float32),
        np.clip(right, 0, 1).astype(np.float32),
        float(theta),
        (float(t[0]), float(t[1])),
        patches,
    )
