"""Loss terms, optimizer, augmentation and the training loop."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np
import torch
from scipy import ndimage

from .core import DisparityMap, ShapeError, check_volume, soft_argmin_t, variance_map_t
from .matcher import MatcherConfig, Weights, check_weights, features_t, forward_t, infer
from .synth import StereoSample

logger = logging.getLogger(__name__)

BCE_EPS = 1e-7


class TrainingDiverged(FloatingPointError):
    def __init__(self, epoch: int, what: str = "loss"):
        super().__init__(f"diverged: non-finite {what} at epoch {epoch}")
        self.epoch = epoch


@dataclass(frozen=True)
class LossWeights:
    gamma_disp: float = 1.0
    gamma_var: float = 1.0
    gamma_warp: float = 1.0

    def __post_init__(self):
        if min(self.gamma_disp, self.gamma_var, self.gamma_warp) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass(frozen=True)
class AugmentConfig:
    scale: tuple[float, float] = (0.7, 1.2)
    rotation: tuple[float, float] = (-60.0, 60.0)
    brightness: tuple[float, float] = (0.8, 1.2)
    seed: int = 0
    # integer shift of the right view, in pixels; adds the same offset to every disparity
    shift: tuple[int, int] = (0, 0)

    def __post_init__(self):
        for name in ("scale", "rotation", "brightness", "shift"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} range is not ordered: {(lo, hi)}")


# --------------------------------------------------------------------------
# Loss terms.  ``*_t`` variants take torch tensors and keep the graph.
# --------------------------------------------------------------------------


def smooth_l1_t(err: torch.Tensor) -> torch.Tensor:
    return torch.where(err < 1.0, 0.5 * err**2, err - 0.5)


def disparity_loss_t(pred: torch.Tensor, gt: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    if not bool(mask.any()):
        raise ValueError("no annotated pixels")
    return smooth_l1_t(torch.abs(pred[mask] - gt[mask])).mean()


def variance_loss_t(cost: torch.Tensor, gt: torch.Tensor, mask: torch.Tensor, d0: float = 0.0) -> torch.Tensor:
    if not bool(mask.any()):
        raise ValueError("no annotated pixels")
    return variance_map_t(cost[mask], gt[mask], d0).mean()


def warp_map_t(hr: torch.Tensor, disp: torch.Tensor) -> torch.Tensor:
    """Sample ``hr(u + disp(u, v), v)`` with linear interpolation along rows."""
    h, w = hr.shape
    x = torch.arange(w, dtype=disp.dtype).unsqueeze(0) + disp
    i0 = torch.floor(x).detach()
    frac = x - i0
    i0 = i0.long()
    i1 = i0 + 1

    def take(i):
        ok = (i >= 0) & (i < w)
        vals = torch.gather(hr, 1, i.clamp(0, w - 1))
        return torch.where(ok, vals, torch.zeros_like(vals))

    return (1.0 - frac) * take(i0) + frac * take(i1)


def bce_t(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    p = pred.clamp(BCE_EPS, 1.0 - BCE_EPS)
    return -(target * torch.log(p) + (1.0 - target) * torch.log1p(-p)).mean()


def warp_loss_t(hr: torch.Tensor, disp: torch.Tensor, hl_gt: torch.Tensor) -> torch.Tensor:
    return bce_t(warp_map_t(hr, disp), hl_gt)


# numpy-facing wrappers (float64)


def _t(a) -> torch.Tensor:
    return torch.as_tensor(np.asarray(a, dtype=np.float64))


def _agree(*shapes):
    if len(set(tuple(s) for s in shapes)) != 1:
        raise ShapeError(f"shapes disagree: {shapes}")


def disparity_loss(pred: DisparityMap, gt: DisparityMap) -> float:
    """Mean smooth-L1 of ``|pred - gt|`` over the ground-truth mask."""
    _agree(pred.shape, gt.shape)
    if gt.count == 0:
        raise ValueError("no annotated pixels")
    return float(disparity_loss_t(_t(pred.disp), _t(gt.disp), torch.from_numpy(gt.mask)))


def variance_loss(vc, gt: DisparityMap, d0: float = 0.0) -> float:
    vc = check_volume(vc)
    _agree(vc.shape[:2], gt.shape)
    if gt.count == 0:
        raise ValueError("no annotated pixels")
    return float(variance_loss_t(_t(vc), _t(gt.disp), torch.from_numpy(gt.mask), d0))


def warp_map(hr, disp: DisparityMap | np.ndarray) -> np.ndarray:
    d = disp.disp if isinstance(disp, DisparityMap) else np.asarray(disp, np.float64)
    hr = np.asarray(hr, np.float64)
    _agree(hr.shape, d.shape)
    return warp_map_t(_t(hr), _t(d)).numpy()


def bce_loss(pred, target) -> float:
    pred = np.asarray(pred, np.float64)
    target = np.asarray(target, np.float64)
    _agree(pred.shape, target.shape)
    return float(bce_t(_t(pred), _t(target)))


def warp_loss(hr, disp: DisparityMap | np.ndarray, hl_gt) -> float:
    return bce_loss(warp_map(hr, disp), hl_gt)


def composite_loss(terms: Sequence[float], w: LossWeights):
    """``gamma_disp * L_disp + gamma_var * L_var + gamma_warp * L_warp``."""
    l_disp, l_var, l_warp = terms
    return w.gamma_disp * l_disp + w.gamma_var * l_var + w.gamma_warp * l_warp


# --------------------------------------------------------------------------
# Adam
# --------------------------------------------------------------------------


@dataclass
class OptimizerState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(w, grads: Mapping[str, np.ndarray], state: OptimizerState):
    """One bias-corrected Adam update.

    ``w`` may be :class:`Weights` or a plain mapping of arrays; the return
    type matches.  Moments are kept in float64.  The state is updated in
    place and also returned.
    """
    params = w.params if isinstance(w, Weights) else w
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"diverged: non-finite gradient for {k}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    out = {}
    for k, p in params.items():
        g = np.asarray(grads.get(k, 0.0), dtype=np.float64)
        m = state.m.get(k, np.zeros(p.shape)) * b1 + (1.0 - b1) * g
        v = state.v.get(k, np.zeros(p.shape)) * b2 + (1.0 - b2) * g * g
        state.m[k], state.v[k] = m, v
        upd = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        out[k] = (p.astype(np.float64) - upd).astype(p.dtype)
    return (Weights(out) if isinstance(w, Weights) else out), state


# --------------------------------------------------------------------------
# Augmentation
# --------------------------------------------------------------------------


def _affine(img, mat, offset, order, cval=None, mode="nearest"):
    kw = {"mode": mode} if cval is None else {"mode": "constant", "cval": cval}
    return ndimage.affine_transform(img, mat, offset=offset, order=order, **kw)


def augment(sample: StereoSample, cfg: AugmentConfig, rng: np.random.Generator) -> StereoSample:
    """Scale/rotate both views and ground truth about the centre, then scale brightness.

    Rotation is only drawn for ``detection_only`` samples because it breaks
    the horizontal epipolar geometry the matcher relies on.  A nonzero
    ``cfg.shift`` range then translates the right view by a whole number of
    pixels, which offsets every ground-truth disparity by the same amount.
    Matching samples only; detection targets are per view.
    """
    s = float(rng.uniform(*cfg.scale))
    b = float(rng.uniform(*cfg.brightness))
    r = float(rng.uniform(*cfg.rotation)) if sample.detection_only else 0.0
    left, right = sample.left, sample.right
    det_l, det_r = sample.det_left, sample.det_right
    disp, mask = sample.gt.disp, sample.gt.mask
    if s != 1.0 or r != 0.0:
        h, w = left.shape
        c = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
        a = math.radians(r)
        # output (row, col) -> input (row, col): c + R(-r) (p - c) / s, in (y, x) order
        rot = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
        mat = rot / s
        off = c - mat @ c
        left = np.clip(_affine(left, mat, off, 1), 0.0, 1.0)
        right = np.clip(_affine(right, mat, off, 1), 0.0, 1.0)
        det_l = _affine(det_l, mat, off, 0, cval=0.0)
        det_r = _affine(det_r, mat, off, 0, cval=0.0)
        mask = _affine(mask.astype(np.float64), mat, off, 0, cval=0.0) > 0.5
        disp = _affine(disp, mat, off, 0, cval=0.0) * s
    if b != 1.0:
        left = np.clip(left * b, 0.0, 1.0)
        right = np.clip(right * b, 0.0, 1.0)
    if cfg.shift != (0, 0) and not sample.detection_only:
        k = int(rng.integers(cfg.shift[0], cfg.shift[1] + 1))
        if k != 0:
            right = ndimage.shift(right, (0, k), order=0, mode="nearest")
            det_r = ndimage.shift(det_r, (0, k), order=0, mode="constant", cval=0.0)
            disp = disp + k
            # drop pixels whose match now falls outside the right view
            cols = np.arange(disp.shape[1])[None, :] + disp
            mask = mask & (cols >= 0) & (cols <= disp.shape[1] - 1)
    return StereoSample(left, right, det_l, det_r, DisparityMap(np.where(mask, disp, 0.0), mask), sample.detection_only)


# --------------------------------------------------------------------------
# Training
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    det_epochs: int = 20
    lr: float = 1e-4
    lr_final: float | None = None
    lr_det: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    loss: LossWeights = LossWeights()
    augment: AugmentConfig | None = AugmentConfig()
    crop_height: int | None = 8
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        doc = dict(doc)
        doc.pop("schema", None)
        if "loss" in doc and isinstance(doc["loss"], dict):
            doc["loss"] = LossWeights(**doc["loss"])
        if doc.get("augment") is not None and isinstance(doc["augment"], dict):
            aug = {k: tuple(v) if isinstance(v, list) else v for k, v in doc["augment"].items()}
            doc["augment"] = AugmentConfig(**aug)
        if "betas" in doc:
            doc["betas"] = tuple(doc["betas"])
        return cls(**doc)


HISTORY_COLUMNS = ["epoch", "L_disp", "L_var", "L_warp", "total", "epe_val"]


def _matcher_lr(tc: TrainConfig, epoch: int) -> float:
    """Cosine decay from ``tc.lr`` to ``tc.lr_final`` over the matcher epochs (constant if unset)."""
    if tc.lr_final is None or tc.epochs < 2:
        return tc.lr
    frac = epoch / (tc.epochs - 1)
    return tc.lr_final + 0.5 * (tc.lr - tc.lr_final) * (1.0 + math.cos(math.pi * frac))


def _crop(sample: StereoSample, rng: np.random.Generator, height: int | None) -> StereoSample:
    h = sample.left.shape[0]
    if height is None or height >= h:
        return sample
    top = int(rng.integers(0, h - height + 1))
    sl = slice(top, top + height)
    return StereoSample(
        sample.left[sl], sample.right[sl], sample.det_left[sl], sample.det_right[sl],
        DisparityMap(sample.gt.disp[sl], sample.gt.mask[sl]), sample.detection_only,
    )


def _grads(params) -> dict:
    return {k: (p.grad.numpy().astype(np.float64) if p.grad is not None else np.zeros(tuple(p.shape)))
            for k, p in params.items()}


def sample_losses(sample: StereoSample, p, cfg: MatcherConfig) -> dict:
    """Forward one pair and return the three loss terms (torch scalars)."""
    t = lambda a: torch.as_tensor(np.asarray(a), dtype=next(iter(p.values())).dtype)  # noqa: E731
    out = forward_t(t(sample.left), t(sample.right), p, cfg)
    gt = t(sample.gt.disp)
    mask = torch.from_numpy(np.asarray(sample.gt.mask, bool))
    zero = out["disp"].sum() * 0.0
    if bool(mask.any()):
        l_disp = disparity_loss_t(out["disp"], gt, mask)
        l_var = variance_loss_t(out["cost"], gt, mask, float(cfg.d0))
    else:
        l_disp = l_var = zero
    l_warp = warp_loss_t(out["det_right"], out["disp"], t(sample.det_left))
    return {"L_disp": l_disp, "L_var": l_var, "L_warp": l_warp, "out": out}


def evaluate_epe(samples: Sequence[StereoSample], w: Weights, cfg: MatcherConfig) -> float:
    """Mean absolute disparity error over all ground-truth pixels of ``samples``."""
    total, n = 0.0, 0
    for s in samples:
        pred = infer(s.left, s.right, w, cfg)
        err = np.abs(pred.disparity.disp - s.gt.disp)[s.gt.mask]
        total += float(err.sum())
        n += err.size
    return total / n if n else float("nan")


def _pretrain_detection(dataset, w, cfg, tc, rng):
    state = OptimizerState(lr=tc.lr_det, beta1=tc.betas[0], beta2=tc.betas[1], eps=tc.eps)
    for epoch in range(tc.det_epochs):
        order = rng.permutation(len(dataset))
        acc = 0.0
        for i in order:
            s = replace(dataset[i], detection_only=True)
            if tc.augment is not None:
                s = augment(s, tc.augment, rng)
            s = _crop(s, rng, tc.crop_height)
            p = w.torch(requires_grad=True)
            loss = 0.0
            for img, target in ((s.left, s.det_left), (s.right, s.det_right)):
                _, logits = features_t(torch.tensor(img, dtype=torch.float32)[None, None], p, cfg)
                loss = loss + 0.5 * bce_t(torch.sigmoid(logits[0, 0]), torch.tensor(target, dtype=torch.float32))
            if not torch.isfinite(loss):
                raise TrainingDiverged(epoch, "detection loss")
            loss.backward()
            w, state = adam_step(w, _grads(p), state)
            acc += loss.item()
        logger.info("detection epoch %d bce %.4f", epoch, acc / len(dataset))
    return w


def train(
    dataset: Sequence[StereoSample],
    cfg: MatcherConfig,
    w0: Weights,
    tc: TrainConfig = TrainConfig(),
    val: Sequence[StereoSample] | None = None,
    val_every: int = 1,
) -> tuple[Weights, list[dict]]:
    """Detection pretraining followed by end-to-end matcher training.

    Batch size 1; samples are visited in a seeded random order every epoch.

    Returns:
        Final weights and one history row per matcher epoch (keys
        :data:`HISTORY_COLUMNS`).
    """
    if not dataset:
        raise ValueError("empty dataset")
    check_weights(w0, cfg)
    rng = np.random.default_rng(tc.seed)
    w = w0.copy()
    if tc.det_epochs > 0:
        w = _pretrain_detection(dataset, w, cfg, tc, rng)

    state = OptimizerState(lr=tc.lr, beta1=tc.betas[0], beta2=tc.betas[1], eps=tc.eps)
    lw = tc.loss
    history = []
    for epoch in range(tc.epochs):
        state.lr = _matcher_lr(tc, epoch)
        order = rng.permutation(len(dataset))
        sums = {"L_disp": 0.0, "L_var": 0.0, "L_warp": 0.0, "total": 0.0}
        for i in order:
            s = dataset[i]
            if tc.augment is not None:
                s = augment(s, tc.augment, rng)
            s = _crop(s, rng, tc.crop_height)
            p = w.torch(requires_grad=True)
            terms = sample_losses(s, p, cfg)
            total = composite_loss((terms["L_disp"], terms["L_var"], terms["L_warp"]), lw)
            if not torch.isfinite(total):
                raise TrainingDiverged(epoch)
            total.backward()
            w, state = adam_step(w, _grads(p), state)
            for k in ("L_disp", "L_var", "L_warp"):
                sums[k] += terms[k].item()
            sums["total"] += total.item()
        row = {"epoch": epoch, **{k: v / len(dataset) for k, v in sums.items()}}
        last = epoch == tc.epochs - 1
        row["epe_val"] = evaluate_epe(val, w, cfg) if val and (last or epoch % val_every == 0) else float("nan")
        history.append(row)
        logger.info("epoch %d total %.4f epe_val %.3f", epoch, row["total"], row["epe_val"])
    return w, history


def write_history(path, history: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=HISTORY_COLUMNS, lineterminator="\n")
        wr.writeheader()
        for row in history:
            wr.writerow({k: repr(float(row[k])) if k != "epoch" else int(row[k]) for k in HISTORY_COLUMNS})
