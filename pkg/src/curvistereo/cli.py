"""Command-line interface: ``curvistereo <command> [options]``.

Every command accepts ``--config FILE`` (JSON with ``"schema": 1``) whose
keys are the long option names with dashes replaced by underscores; flags
given on the command line override the file.  The resolved configuration is
written as ``<command>_config.json`` next to the outputs.

Exit codes: 0 success, 1 I/O or data error, 2 usage error, 3 degenerate
input, 4 training divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from .core import DegenerateError, TiltGeometry
from .io import read_disparity_csv, read_image, write_disparity_csv, write_image
from .learning import AugmentConfig, LossWeights, TrainConfig, TrainingDiverged, train, write_history
from .matcher import (
    CostNetworkConfig,
    FeatureExtractorConfig,
    MatcherConfig,
    infer,
    init_weights,
    load_weights,
    save_weights,
)
from .metrics import depth_error, metrics_report
from .rectify import RansacConfig, rectify_pair
from .reconstruct import export_ply, refine_disparity, triangulate
from .synth import (
    DatasetConfig,
    RenderConfig,
    Scene3D,
    StereoSample,
    generate_scene,
    make_dataset,
    make_stereo_sample,
)
from .tomo import views_sweep, write_sweep_csv

log = logging.getLogger("curvistereo")

CONFIG_SCHEMA = 1

EXIT_OK, EXIT_IO, EXIT_USAGE, EXIT_DEGENERATE, EXIT_DIVERGED = 0, 1, 2, 3, 4

# Built-in defaults per command; the config file and flags override them.
DEFAULTS: dict[str, dict] = {
    "synth": dict(curves=3, phi=8.0, seed=0, width=64, height=32, depth=100.0, noise=0.02,
                  sigma=1.0, background=0.7, contrast=0.4),
    "rectify": dict(iterations=200, inlier_threshold=1.0, min_inliers=10, seed=0, phi=8.0),
    "train": dict(data=None, pairs=20, curves=3, phi=8.0, seed=0, epochs=200, det_epochs=20,
                  lr=1e-4, lr_final=None, lr_det=1e-3, gamma=[1.0, 1.0, 1.0], d_max=47, d0=24, threshold=0.5,
                  crop_height=8, augment=True, shift=0, features=[8, 8, 8], channels=8, hourglasses=2),
    "infer": dict(),
    "reconstruct": dict(phi=8.0, refine=True, det_left=None, det_right=None, radius=3, threshold=0.5, cx=None,
                        pixel_size=1.0),
    "eval": dict(scene=None, phi=8.0),
    "tomo": dict(scene=None, curves=3, seed=0, width=64, height=32, depth=100.0, phi=8.0,
                 views=[2, 5, 10, 30, 45], weights=None, total_views=45, max_angle=48.0,
                 iterations=50, noise=0.02),
}


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------


def _common(p: argparse.ArgumentParser, seed: bool = True) -> None:
    S = argparse.SUPPRESS
    p.add_argument("--config", type=Path, default=None, help="JSON config file (schema 1)")
    p.add_argument("--threads", type=int, default=None,
                   help="worker threads for parallel stages (default: available cores)")
    if seed:
        p.add_argument("--seed", type=int, default=S, help="random seed")


def build_parser() -> argparse.ArgumentParser:
    S = argparse.SUPPRESS
    parser = argparse.ArgumentParser(prog="curvistereo", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render a synthetic stereo pair with ground truth")
    p.add_argument("-o", "--out", type=Path, required=True, help="output directory")
    p.add_argument("--curves", type=int, default=S)
    p.add_argument("--phi", type=float, default=S, help="angle between the views, degrees")
    p.add_argument("--width", type=int, default=S)
    p.add_argument("--height", type=int, default=S)
    p.add_argument("--depth", type=float, default=S, help="slab half-depth Z, pixels")
    p.add_argument("--noise", type=float, default=S)
    p.add_argument("--sigma", type=float, default=S, help="line profile sigma, pixels")
    p.add_argument("--background", type=float, default=S)
    p.add_argument("--contrast", type=float, default=S)
    _common(p)

    p = sub.add_parser("rectify", help="align a raw pair so epipolar lines are rows")
    p.add_argument("left", type=Path)
    p.add_argument("right", type=Path)
    p.add_argument("-o", "--out", type=Path, required=True)
    p.add_argument("--iterations", type=int, default=S, help="RANSAC iterations")
    p.add_argument("--inlier-threshold", type=float, default=S, help="pixels")
    p.add_argument("--min-inliers", type=int, default=S)
    p.add_argument("--phi", type=float, default=S)
    _common(p)

    p = sub.add_parser("train", help="train the matcher on synthetic pairs")
    p.add_argument("-o", "--out", type=Path, required=True)
    p.add_argument("--data", type=Path, nargs="+", default=S, help="synth output directories")
    p.add_argument("--pairs", type=int, default=S, help="generated pairs when --data is absent")
    p.add_argument("--curves", type=int, default=S)
    p.add_argument("--phi", type=float, default=S)
    p.add_argument("--epochs", type=int, default=S)
    p.add_argument("--det-epochs", type=int, default=S, help="detection pretraining epochs")
    p.add_argument("--lr", type=float, default=S)
    p.add_argument("--lr-final", type=float, default=S, help="cosine-decay the matcher lr to this value")
    p.add_argument("--lr-det", type=float, default=S)
    p.add_argument("--gamma", type=float, nargs=3, default=S, metavar=("DISP", "VAR", "WARP"))
    p.add_argument("--d-max", type=int, default=S, help="largest disparity index (D = d_max + 1)")
    p.add_argument("--d0", type=int, default=S, help="disparity origin index")
    p.add_argument("--threshold", type=float, default=S, help="detection threshold")
    p.add_argument("--crop-height", type=int, default=S)
    p.add_argument("--features", type=int, nargs="+", default=S, help="2D extractor channels")
    p.add_argument("--channels", type=int, default=S, help="3D cost network channels")
    p.add_argument("--hourglasses", type=int, default=S)
    p.add_argument("--augment", action=argparse.BooleanOptionalAction, default=S)
    p.add_argument("--shift", type=int, default=S,
                   help="largest right-view shift for augmentation, pixels (0 disables)")
    _common(p)

    p = sub.add_parser("infer", help="predict disparity and detections for a rectified pair")
    p.add_argument("left", type=Path)
    p.add_argument("right", type=Path)
    p.add_argument("--weights", type=Path, required=True)
    p.add_argument("-o", "--out", type=Path, required=True)
    _common(p, seed=False)

    p = sub.add_parser("reconstruct", help="triangulate a disparity map into a PLY point set")
    p.add_argument("disparity", type=Path, help="disparity CSV")
    p.add_argument("-o", "--out", type=Path, required=True)
    p.add_argument("--phi", type=float, default=S)
    p.add_argument("--refine", action=argparse.BooleanOptionalAction, default=S,
                   help="snap disparities onto right detections (default on)")
    p.add_argument("--det-left", type=Path, default=S)
    p.add_argument("--det-right", type=Path, default=S)
    p.add_argument("--radius", type=int, default=S, help="refinement search radius")
    p.add_argument("--threshold", type=float, default=S)
    p.add_argument("--cx", type=float, default=S, help="tilt axis column (default (W-1)/2)")
    p.add_argument("--pixel-size", type=float, default=S,
                   help="physical size of a pixel (e.g. nm); coordinates are scaled by it")
    _common(p, seed=False)

    p = sub.add_parser("eval", help="compare a predicted disparity CSV with ground truth")
    p.add_argument("pred", type=Path)
    p.add_argument("gt", type=Path)
    p.add_argument("-o", "--out", type=Path, required=True)
    p.add_argument("--scene", type=Path, default=S, help="scene JSON for the depth error")
    p.add_argument("--phi", type=float, default=S)
    _common(p, seed=False)

    p = sub.add_parser("tomo", help="stereo versus WBP/SIRT error against view count")
    p.add_argument("-o", "--out", type=Path, required=True)
    p.add_argument("--scene", type=Path, default=S, help="scene JSON (default: generate one)")
    p.add_argument("--curves", type=int, default=S)
    p.add_argument("--width", type=int, default=S)
    p.add_argument("--height", type=int, default=S)
    p.add_argument("--depth", type=float, default=S)
    p.add_argument("--phi", type=float, default=S)
    p.add_argument("--views", type=int, nargs="+", default=S)
    p.add_argument("--weights", type=Path, default=S, help="matcher weights (default: ideal matcher)")
    p.add_argument("--total-views", type=int, default=S)
    p.add_argument("--max-angle", type=float, default=S)
    p.add_argument("--iterations", type=int, default=S, help="SIRT iterations")
    p.add_argument("--noise", type=float, default=S)
    _common(p)
    return parser


def resolve(cmd: str, ns: argparse.Namespace) -> dict:
    """Merge built-in defaults, the optional config file and explicit flags."""
    cfg = dict(DEFAULTS[cmd])
    if ns.config is not None:
        try:
            doc = json.loads(Path(ns.config).read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"{ns.config}: invalid JSON ({exc})") from exc
        if doc.get("schema") != CONFIG_SCHEMA:
            raise UsageError(f"{ns.config}: expected \"schema\": {CONFIG_SCHEMA}")
        doc = {k: v for k, v in doc.items() if k not in ("schema", "command", "out")}
        unknown = set(doc) - set(cfg)
        if unknown:
            raise UsageError(f"{ns.config}: unknown keys {sorted(unknown)}")
        cfg.update(doc)
    skip = {"command", "config", "threads", "verbose"}
    for k, v in vars(ns).items():
        if k not in skip:
            cfg[k] = v
    return {k: (str(v) if isinstance(v, Path) else [str(x) for x in v] if isinstance(v, list) and v
                and isinstance(v[0], Path) else v) for k, v in cfg.items()}


def _write_config(out: Path, cmd: str, cfg: dict) -> None:
    # the output location is not part of the result, so runs into different
    # directories stay byte-identical
    doc = {"schema": CONFIG_SCHEMA, "command": cmd, **{k: v for k, v in cfg.items() if k != "out"}}
    (out / f"{cmd}_config.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _outdir(cfg: dict) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_scene(path) -> Scene3D:
    return Scene3D.from_json(Path(path).read_text())


def load_synth_dir(path) -> StereoSample:
    """Read a pair written by ``synth`` back as a training sample."""
    path = Path(path)
    left = read_image(path / "left.png")
    gt = read_disparity_csv(path / "gt_disparity.csv", shape=left.shape)
    return StereoSample(
        left,
        read_image(path / "right.png"),
        (read_image(path / "det_left.png") >= 0.5).astype(np.float32),
        (read_image(path / "det_right.png") >= 0.5).astype(np.float32),
        gt,
    )


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------


def cmd_synth(cfg: dict, threads: int) -> int:
    out = _outdir(cfg)
    rng = np.random.default_rng(cfg["seed"])
    scene = generate_scene(rng, cfg["curves"], cfg["width"], cfg["height"], cfg["depth"])
    rcfg = RenderConfig(cfg["sigma"], cfg["background"], cfg["contrast"], cfg["noise"], cfg["seed"])
    s = make_stereo_sample(scene, cfg["phi"], rcfg)
    write_image(out / "left.png", s.left)
    write_image(out / "right.png", s.right)
    write_image(out / "det_left.png", s.det_left)
    write_image(out / "det_right.png", s.det_right)
    write_disparity_csv(out / "gt_disparity.csv", s.gt)
    (out / "scene.json").write_text(scene.to_json() + "\n")
    _write_config(out, "synth", cfg)
    return EXIT_OK


def cmd_rectify(cfg: dict, threads: int) -> int:
    left, right = read_image(cfg["left"]), read_image(cfg["right"])
    rc = RansacConfig(cfg["iterations"], cfg["inlier_threshold"], cfg["min_inliers"], cfg["seed"])
    la, ra, geo, inl = rectify_pair(left, right, rc, phi=cfg["phi"], return_inliers=True)
    out = _outdir(cfg)
    write_image(out / "left_aligned.png", la)
    write_image(out / "right_aligned.png", ra)
    sidecar = {"t_x": geo.t[0], "t_y": geo.t[1], "theta_deg": geo.theta, "inliers": len(inl)}
    (out / "rectify.json").write_text(json.dumps(sidecar, indent=2) + "\n")
    _write_config(out, "rectify", cfg)
    return EXIT_OK


def _matcher_config(cfg: dict) -> MatcherConfig:
    return MatcherConfig(
        features=FeatureExtractorConfig(tuple(cfg["features"])),
        cost=CostNetworkConfig(hourglasses=cfg["hourglasses"], channels=cfg["channels"]),
        d_max=cfg["d_max"],
        d0=cfg["d0"],
        threshold=cfg["threshold"],
    )


def cmd_train(cfg: dict, threads: int) -> int:
    if cfg["data"]:
        dataset = [load_synth_dir(p) for p in cfg["data"]]
    else:
        dataset = make_dataset(DatasetConfig(n_pairs=cfg["pairs"], phi=cfg["phi"],
                                             n_curves=cfg["curves"], seed=cfg["seed"]))[1]
    mcfg = _matcher_config(cfg)
    if cfg["shift"] < 0:
        raise UsageError("--shift must be >= 0")
    aug = AugmentConfig(shift=(-cfg["shift"], cfg["shift"])) if cfg["augment"] else None
    tc = TrainConfig(
        epochs=cfg["epochs"], det_epochs=cfg["det_epochs"], lr=cfg["lr"], lr_final=cfg["lr_final"],
        lr_det=cfg["lr_det"],
        loss=LossWeights(*cfg["gamma"]), augment=aug,
        crop_height=cfg["crop_height"], seed=cfg["seed"],
    )
    w, history = train(dataset, mcfg, init_weights(mcfg, cfg["seed"]), tc)
    out = _outdir(cfg)
    save_weights(out / "weights.cswt", w, mcfg)
    write_history(out / "history.csv", history)
    _write_config(out, "train", cfg)
    return EXIT_OK


def cmd_infer(cfg: dict, threads: int) -> int:
    w, mcfg = load_weights(cfg["weights"])
    pred = infer(read_image(cfg["left"]), read_image(cfg["right"]), w, mcfg)
    out = _outdir(cfg)
    write_disparity_csv(out / "disparity.csv", pred.disparity)
    write_image(out / "det_left.png", pred.det_left)
    write_image(out / "det_right.png", pred.det_right)
    _write_config(out, "infer", cfg)
    return EXIT_OK


def cmd_reconstruct(cfg: dict, threads: int) -> int:
    disp = read_disparity_csv(cfg["disparity"])
    if cfg["refine"]:
        if not (cfg["det_left"] and cfg["det_right"]):
            raise UsageError("--refine needs --det-left and --det-right (or pass --no-refine)")
        dl, dr = read_image(cfg["det_left"]), read_image(cfg["det_right"])
        if dl.shape != disp.shape:  # the CSV may not reach the last row/column
            disp = read_disparity_csv(cfg["disparity"], shape=dl.shape)
        disp = refine_disparity(disp, dl, dr, cfg["radius"], cfg["threshold"])
    rec = triangulate(disp, TiltGeometry(phi=cfg["phi"]), cx=cfg["cx"])
    if cfg["pixel_size"] <= 0:
        raise UsageError("--pixel-size must be positive")
    rec.points = rec.points * cfg["pixel_size"]
    out = _outdir(cfg)
    export_ply(rec, out / "points.ply")
    _write_config(out, "reconstruct", cfg)
    return EXIT_OK


def cmd_eval(cfg: dict, threads: int) -> int:
    gt = read_disparity_csv(cfg["gt"])
    pred = read_disparity_csv(cfg["pred"], shape=gt.shape)
    try:
        report = metrics_report(pred, gt)
    except ValueError as exc:
        raise DegenerateError(str(exc)) from exc
    if cfg["scene"]:
        scene = _load_scene(cfg["scene"])
        rec = triangulate(pred, TiltGeometry(phi=cfg["phi"]), cx=scene.cx)
        if len(rec):
            report.depth_error = depth_error(rec, scene)
    out = _outdir(cfg)
    (out / "metrics.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    _write_config(out, "eval", cfg)
    return EXIT_OK


def cmd_tomo(cfg: dict, threads: int) -> int:
    if cfg["scene"]:
        scene = _load_scene(cfg["scene"])
    else:
        scene = generate_scene(np.random.default_rng(cfg["seed"]), cfg["curves"], cfg["width"],
                               cfg["height"], cfg["depth"])
    weights = mcfg = None
    if cfg["weights"]:
        weights, mcfg = load_weights(cfg["weights"])
    rcfg = RenderConfig(noise=cfg["noise"], seed=cfg["seed"])
    rows = views_sweep(scene, cfg["views"], weights, mcfg, phi=cfg["phi"], cfg=rcfg,
                       n_total=cfg["total_views"], max_angle=cfg["max_angle"],
                       sirt_iterations=cfg["iterations"], threads=threads)
    out = _outdir(cfg)
    write_sweep_csv(out / "sweep.csv", rows)
    _write_config(out, "tomo", cfg)
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "rectify": cmd_rectify,
    "train": cmd_train,
    "infer": cmd_infer,
    "reconstruct": cmd_reconstruct,
    "eval": cmd_eval,
    "tomo": cmd_tomo,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)  # exits with status 2 on usage errors
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    threads = ns.threads if ns.threads is not None else (os.cpu_count() or 1)
    if threads < 1:
        parser.error("--threads must be >= 1")
    # Tensor kernels stay single-threaded so results do not depend on --threads.
    torch.set_num_threads(1)
    try:
        cfg = resolve(ns.command, ns)
        return COMMANDS[ns.command](cfg, threads)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"curvistereo {ns.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DegenerateError as exc:
        print(f"curvistereo {ns.command}: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except TrainingDiverged as exc:
        print(f"curvistereo {ns.command}: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, ValueError, KeyError) as exc:
        print(f"curvistereo {ns.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
