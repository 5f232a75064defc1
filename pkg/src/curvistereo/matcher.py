"""Joint contour detection and stereo matching network.

A shallow full-resolution convolutional encoder runs on both views with
shared weights and yields feature maps plus a per-pixel detection
probability.  Left and right features are paired over every candidate
disparity into a feature volume, which a stack of 3D hourglass modules turns
into a matching-cost volume.  Disparities follow from the soft-argmin.

Weights are plain named float32 arrays (:class:`Weights`); the forward pass
is written against ``torch.nn.functional`` so gradients come for free.
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .core import DEFAULT_DISPARITIES, DEFAULT_FEATURES, DisparityMap, ShapeError, check_volume, soft_argmin_t

WEIGHTS_MAGIC = b"CSWT"
WEIGHTS_VERSION = 1


@dataclass(frozen=True)
class FeatureExtractorConfig:
    channels: tuple[int, ...] = (8, 8, DEFAULT_FEATURES)
    kernel: int = 3

    @property
    def n_features(self) -> int:
        return self.channels[-1]


@dataclass(frozen=True)
class CostNetworkConfig:
    hourglasses: int = 2
    channels: int = 8
    kernel: int = 3


@dataclass(frozen=True)
class MatcherConfig:
    features: FeatureExtractorConfig = field(default_factory=FeatureExtractorConfig)
    cost: CostNetworkConfig = field(default_factory=CostNetworkConfig)
    d_max: int = DEFAULT_DISPARITIES - 1
    d0: int = 0  # disparity origin: index d encodes disparity d - d0
    threshold: float = 0.5

    @property
    def n_disparities(self) -> int:
        return self.d_max + 1


class Weights:
    """Named parameter arrays with a flat-vector view."""

    def __init__(self, params=None):
        self.params: OrderedDict[str, np.ndarray] = OrderedDict()
        for name, arr in (params or {}).items():
            self.params[name] = np.ascontiguousarray(arr, dtype=np.float32)

    def __getitem__(self, name):
        return self.params[name]

    def __iter__(self):
        return iter(self.params)

    def __len__(self):
        return len(self.params)

    def items(self):
        return self.params.items()

    @property
    def size(self) -> int:
        return sum(a.size for a in self.params.values())

    def shapes(self) -> OrderedDict:
        return OrderedDict((k, a.shape) for k, a in self.params.items())

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.params.values()]) if self.params else np.zeros(0, np.float32)

    def with_flat(self, vec) -> "Weights":
        vec = np.asarray(vec, dtype=np.float32)
        if vec.size != self.size:
            raise ShapeError(f"flat vector has {vec.size} entries, expected {self.size}")
        out, i = OrderedDict(), 0
        for k, a in self.params.items():
            out[k] = vec[i : i + a.size].reshape(a.shape)
            i += a.size
        return Weights(out)

    def copy(self) -> "Weights":
        return Weights(OrderedDict((k, a.copy()) for k, a in self.params.items()))

    def equals(self, other: "Weights") -> bool:
        return list(self.params) == list(other.params) and all(
            np.array_equal(a, other.params[k]) for k, a in self.params.items()
        )

    def torch(self, dtype=torch.float32, requires_grad: bool = False) -> OrderedDict:
        return OrderedDict(
            (k, torch.tensor(a, dtype=dtype).requires_grad_(requires_grad)) for k, a in self.params.items()
        )


def weight_shapes(cfg: MatcherConfig) -> OrderedDict:
    fe, cn = cfg.features, cfg.cost
    k, k3 = fe.kernel, cn.kernel
    shapes = OrderedDict()
    c_in = 1
    for i, c in enumerate(fe.channels):
        shapes[f"fe.conv{i}.weight"] = (c, c_in, k, k)
        shapes[f"fe.conv{i}.bias"] = (c,)
        c_in = c
    shapes["det.weight"] = (1, c_in, k, k)
    shapes["det.bias"] = (1,)
    c = cn.channels
    shapes["cost.entry.weight"] = (c, 2 * fe.n_features, 1, 1, 1)
    shapes["cost.entry.bias"] = (c,)
    for h in range(cn.hourglasses):
        shapes[f"cost.hg{h}.down.weight"] = (c, c, k3, k3, k3)
        shapes[f"cost.hg{h}.down.bias"] = (c,)
        shapes[f"cost.hg{h}.mid.weight"] = (c, c, k3, k3, k3)
        shapes[f"cost.hg{h}.mid.bias"] = (c,)
        shapes[f"cost.hg{h}.up.weight"] = (c, c, k3, k3, k3)  # transposed conv: (in, out, ...)
        shapes[f"cost.hg{h}.up.bias"] = (c,)
    shapes["cost.out.weight"] = (1, c, k3, k3, k3)
    shapes["cost.out.bias"] = (1,)
    return shapes


def init_weights(cfg: MatcherConfig = MatcherConfig(), seed: int = 0) -> Weights:
    """He-normal kernels, zero biases, drawn from a seeded stream in name order."""
    rng = np.random.default_rng(seed)
    params = OrderedDict()
    for name, shape in weight_shapes(cfg).items():
        if name.endswith("bias"):
            params[name] = np.zeros(shape, np.float32)
        else:
            fan_in = int(np.prod(shape[1:])) if ".up." not in name else shape[0] * int(np.prod(shape[2:]))
            params[name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), shape).astype(np.float32)
    return Weights(params)


def zero_weights(cfg: MatcherConfig = MatcherConfig()) -> Weights:
    return Weights(OrderedDict((k, np.zeros(s, np.float32)) for k, s in weight_shapes(cfg).items()))


def check_weights(w: Weights, cfg: MatcherConfig) -> None:
    expected = weight_shapes(cfg)
    got = w.shapes()
    if list(expected) != list(got) or any(tuple(expected[k]) != tuple(got[k]) for k in expected):
        raise ShapeError("weights do not match the matcher configuration")


# --------------------------------------------------------------------------
# torch forward pieces; tensors carry a leading batch axis of 1.
# --------------------------------------------------------------------------


def features_t(img: torch.Tensor, p, cfg: MatcherConfig):
    """``img`` (1, 1, H, W) -> features (1, F, H, W), detection logits (1, 1, H, W)."""
    x = img
    pad = cfg.features.kernel // 2
    for i in range(len(cfg.features.channels)):
        x = F.relu(F.conv2d(x, p[f"fe.conv{i}.weight"], p[f"fe.conv{i}.bias"], padding=pad))
    logits = F.conv2d(x, p["det.weight"], p["det.bias"], padding=pad)
    return x, logits


def feature_volume_t(fl: torch.Tensor, fr: torch.Tensor, n_disp: int, d0: int = 0) -> torch.Tensor:
    """Pair ``fl(u)`` with ``fr(u + d - d0)`` for every disparity index; zeros outside the image."""
    _, c, h, w = fl.shape
    lo, hi = max(0, d0), max(0, n_disp - 1 - d0)
    fr_pad = F.pad(fr, (lo, hi))
    idx = torch.arange(w)[:, None] + torch.arange(n_disp)[None, :] - d0 + lo
    right = fr_pad[:, :, :, idx]  # (1, F, H, W, D)
    left = fl.unsqueeze(-1).expand(-1, -1, -1, -1, n_disp)
    return torch.cat([left, right], dim=1)


def _conv3d(x: torch.Tensor, w: torch.Tensor, b: torch.Tensor, stride: int = 1, padding: int = 0) -> torch.Tensor:
    """3D convolution folded into a single 2D convolution over (W, D).

    The H taps are stacked into the channel axis so every H row becomes one batch
    item. The CPU backend has no fast 3D kernel and this runs about three times
    quicker than ``F.conv3d`` while computing the same sum.
    """
    _, c, h, _, _ = x.shape
    k = w.shape[2]
    h_out = (h + 2 * padding - k) // stride + 1
    xp = F.pad(x, (0, 0, 0, 0, padding, padding))
    taps = torch.cat([xp[:, :, j : j + stride * (h_out - 1) + 1 : stride] for j in range(k)], dim=1)
    rows = taps[0].transpose(0, 1)  # (h_out, k*C, W, D)
    w2 = w.permute(0, 2, 1, 3, 4).reshape(w.shape[0], k * c, k, k)
    y = F.conv2d(rows, w2, b, stride=stride, padding=padding)
    return y.transpose(0, 1)[None]


def _conv_transpose3d_up2(x: torch.Tensor, w: torch.Tensor, b: torch.Tensor, padding: int) -> torch.Tensor:
    """Stride-2 transposed 3D convolution (output_padding 1) built from a 2D one.

    Each input row contributes ``k`` output rows, one per H tap; the taps are
    computed together and summed into place with ``index_add``.
    """
    _, c, h, _, _ = x.shape
    k, c_out = w.shape[2], w.shape[1]
    rows = x[0].transpose(0, 1)  # (h, C, W, D)
    w2 = w.permute(0, 2, 1, 3, 4).reshape(c, k * c_out, k, k)
    y = F.conv_transpose2d(rows, w2, None, stride=2, padding=padding, output_padding=1)
    y = y.reshape(h, k, c_out, *y.shape[-2:])
    out = y.new_zeros((2 * h + k, c_out, *y.shape[-2:]))
    for j in range(k):
        out = out.index_add(0, torch.arange(h) * 2 + j, y[:, j])
    out = out[padding : padding + 2 * h] + b[None, :, None, None]
    return out.transpose(0, 1)[None]


def cost_network_t(vf: torch.Tensor, p, cfg: MatcherConfig) -> torch.Tensor:
    """``vf`` (1, 2F, H, W, D) -> costs (H, W, D)."""
    _, _, h, w, d = vf.shape
    if h % 2 or w % 2 or d % 2:
        raise ShapeError(f"H, W and D must be even for the hourglass, got {(h, w, d)}; pad the inputs")
    pad = cfg.cost.kernel // 2
    x = F.relu(_conv3d(vf, p["cost.entry.weight"], p["cost.entry.bias"]))
    for k in range(cfg.cost.hourglasses):
        y = F.relu(_conv3d(x, p[f"cost.hg{k}.down.weight"], p[f"cost.hg{k}.down.bias"], stride=2, padding=pad))
        y = F.relu(_conv3d(y, p[f"cost.hg{k}.mid.weight"], p[f"cost.hg{k}.mid.bias"], padding=pad))
        y = _conv_transpose3d_up2(y, p[f"cost.hg{k}.up.weight"], p[f"cost.hg{k}.up.bias"], pad)
        x = F.relu(x + y)
    return _conv3d(x, p["cost.out.weight"], p["cost.out.bias"], padding=pad)[0, 0]


def forward_t(left: torch.Tensor, right: torch.Tensor, p, cfg: MatcherConfig) -> dict:
    """Full pass on (H, W) image tensors; returns cost, disparity and detections."""
    fl, logit_l = features_t(left[None, None], p, cfg)
    fr, logit_r = features_t(right[None, None], p, cfg)
    vf = feature_volume_t(fl, fr, cfg.n_disparities, cfg.d0)
    cost = cost_network_t(vf, p, cfg)
    return {
        "cost": cost,
        "disp": soft_argmin_t(cost, float(cfg.d0)),
        "det_left": torch.sigmoid(logit_l[0, 0]),
        "det_right": torch.sigmoid(logit_r[0, 0]),
        "logit_left": logit_l[0, 0],
        "logit_right": logit_r[0, 0],
    }


# --------------------------------------------------------------------------
# numpy-facing API
# --------------------------------------------------------------------------


def extract_features(img, w: Weights, cfg: MatcherConfig = MatcherConfig()):
    """Feature map ``(F, H, W)`` and detection probabilities ``(H, W)`` for one view."""
    check_weights(w, cfg)
    with torch.no_grad():
        feat, logits = features_t(torch.tensor(np.asarray(img, np.float32))[None, None], w.torch(), cfg)
    return feat[0].numpy(), torch.sigmoid(logits[0, 0]).numpy()


def build_feature_volume(fl, fr, d_max: int, d0: int = 0) -> np.ndarray:
    fl = np.asarray(fl)
    fr = np.asarray(fr)
    if fl.shape != fr.shape or fl.ndim != 3:
        raise ShapeError(f"feature maps must share an (F, H, W) shape, got {fl.shape} and {fr.shape}")
    if d_max < 0:
        raise ValueError("d_max must be >= 0")
    vf = feature_volume_t(torch.from_numpy(fl)[None], torch.from_numpy(fr)[None], d_max + 1, d0)
    return vf[0].numpy()


def cost_network(vf, w: Weights, cfg: MatcherConfig = MatcherConfig()) -> np.ndarray:
    check_weights(w, cfg)
    vf = np.asarray(vf, np.float32)
    if vf.ndim != 4 or vf.shape[0] != 2 * cfg.features.n_features:
        raise ShapeError(f"feature volume must be (2F, H, W, D), got {vf.shape}")
    with torch.no_grad():
        return cost_network_t(torch.from_numpy(vf)[None], w.torch(), cfg).numpy()


def predict_disparity(vc, detections, threshold: float = 0.5, d0: float = 0.0) -> DisparityMap:
    """Soft-argmin disparity everywhere, valid where detection >= ``threshold``."""
    vc = check_volume(vc)
    det = np.asarray(detections)
    if det.shape != vc.shape[:2]:
        raise ShapeError(f"detections {det.shape} and volume {vc.shape[:2]} differ")
    with torch.no_grad():
        disp = soft_argmin_t(torch.from_numpy(vc), float(d0)).numpy()
    return DisparityMap(disp, det >= threshold)


@dataclass
class Prediction:
    disparity: DisparityMap
    det_left: np.ndarray
    det_right: np.ndarray
    cost: np.ndarray


def infer(left, right, w: Weights, cfg: MatcherConfig = MatcherConfig()) -> Prediction:
    """Run the matcher on a rectified pair of any size (edge-padded to even)."""
    check_weights(w, cfg)
    left = np.asarray(left, np.float32)
    right = np.asarray(right, np.float32)
    if left.shape != right.shape:
        raise ShapeError("left and right images differ in shape")
    h, w_ = left.shape
    ph, pw = h % 2, w_ % 2
    if ph or pw:
        left = np.pad(left, ((0, ph), (0, pw)), mode="edge")
        right = np.pad(right, ((0, ph), (0, pw)), mode="edge")
    with torch.no_grad():
        out = forward_t(torch.from_numpy(left), torch.from_numpy(right), w.torch(), cfg)
    cost = out["cost"].numpy()[:h, :w_]
    det_l = out["det_left"].numpy()[:h, :w_]
    disp = out["disp"].numpy()[:h, :w_].astype(np.float64)
    return Prediction(
        DisparityMap(disp, det_l >= cfg.threshold),
        det_l.astype(np.float64),
        out["det_right"].numpy()[:h, :w_].astype(np.float64),
        cost,
    )


# --------------------------------------------------------------------------
# Weights file
# --------------------------------------------------------------------------


def save_weights(path, w: Weights, cfg: MatcherConfig | None = None) -> None:
    """Little-endian: magic, version u32, scalar count u64, then named f32 entries.

    When ``cfg`` is given the disparity range is stored as ``meta.*`` entries so
    that :func:`load_weights` can rebuild the full configuration.
    """
    entries = list(w.items())
    if cfg is not None:
        entries += [
            ("meta.d_max", np.array([cfg.d_max], np.float32)),
            ("meta.d0", np.array([cfg.d0], np.float32)),
            ("meta.threshold", np.array([cfg.threshold], np.float32)),
        ]
    count = sum(a.size for _, a in entries)
    with open(path, "wb") as fh:
        fh.write(WEIGHTS_MAGIC + struct.pack("<IQ", WEIGHTS_VERSION, count))
        for name, arr in entries:
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)) + raw)
            fh.write(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_weights(path) -> tuple[Weights, MatcherConfig]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != WEIGHTS_MAGIC:
        raise ValueError(f"{path}: not a weights file")
    version, count = struct.unpack_from("<IQ", buf, 4)
    if version != WEIGHTS_VERSION:
        raise ValueError(f"{path}: unsupported weights version {version}")
    pos, params, meta, seen = 16, OrderedDict(), {}, 0
    while pos < len(buf):
        (n,) = struct.unpack_from("<I", buf, pos)
        name = buf[pos + 4 : pos + 4 + n].decode("utf-8")
        pos += 4 + n
        (rank,) = struct.unpack_from("<I", buf, pos)
        dims = struct.unpack_from(f"<{rank}I", buf, pos + 4)
        pos += 4 + 4 * rank
        size = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(buf, dtype="<f4", count=size, offset=pos).reshape(dims).astype(np.float32)
        pos += 4 * size
        seen += size
        if name.startswith("meta."):
            meta[name[5:]] = float(arr.ravel()[0])
        else:
            params[name] = arr
    if seen != count:
        raise ValueError(f"{path}: header declares {count} values, found {seen}")
    return Weights(params), _infer_config(params, meta)


def _infer_config(params, meta) -> MatcherConfig:
    fe = []
    i = 0
    while f"fe.conv{i}.weight" in params:
        fe.append(params[f"fe.conv{i}.weight"].shape[0])
        i += 1
    hg = 0
    while f"cost.hg{hg}.down.weight" in params:
        hg += 1
    kernel = params["fe.conv0.weight"].shape[-1]
    cost = CostNetworkConfig(
        hourglasses=hg,
        channels=params["cost.entry.weight"].shape[0],
        kernel=params["cost.out.weight"].shape[-1],
    )
    return MatcherConfig(
        features=FeatureExtractorConfig(tuple(fe), kernel),
        cost=cost,
        d_max=int(meta.get("d_max", DEFAULT_DISPARITIES - 1)),
        d0=int(meta.get("d0", 0)),
        threshold=float(meta.get("threshold", 0.5)),
    )
