"""Command-line front end: ``augsplat <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .camera import load_cameras
from .config import load_config
from .errors import AugSplatError, ConfigError
from .evaluate import decompose, linear_to_srgb, metrics_record
from .optim import baseline_train
from .pipeline import default_workers, enhance
from .primitives import SH_C0, GaussianCloud, logit
from .render import render_3d
from .scene_io import load_dataset, load_scene, save_image, save_scene
from .synthetic import SyntheticSpec, generate_synthetic

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("augsplat")


class UsageError(Exception):
    pass


class NumericFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _write_json(path, payload) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(payload, indent=2))


def _background(text: str):
    parts = [float(x) for x in text.split(",")]
    if len(parts) == 1:
        parts *= 3
    if len(parts) != 3:
        raise UsageError("--background takes one value or three comma-separated values")
    return tuple(parts)


def _overrides(args) -> dict:
    out = {}
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _views(dataset, split):
    views = load_dataset(dataset)
    if split != "all":
        views = [v for v in views if v.split == split]
    if not views:
        raise UsageError(f"dataset {dataset} has no {split} views")
    return views


def _check_finite(cloud: GaussianCloud) -> None:
    for f in GaussianCloud.PARAMS:
        if not np.all(np.isfinite(getattr(cloud, f))):
            raise NumericFailure(f"non-finite values in {f}")


def random_init(n: int, extent: float, sh_order: int, seed: int) -> GaussianCloud:
    rng = np.random.default_rng(seed)
    k = (sh_order + 1) ** 2
    sh = np.zeros((n, k, 3))
    sh[:, 0] = (rng.uniform(0.2, 0.8, size=(n, 3)) - 0.5) / SH_C0
    return GaussianCloud(
        positions=rng.uniform(-extent, extent, size=(n, 3)),
        quats=np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)),
        log_scales=np.full((n, 3), np.log(extent * 2.0 / max(n, 1) ** (1 / 3))),
        opacity_logits=np.full(n, logit(0.5)), sh=sh,
    )


def _metrics(scene, views, background):
    return [metrics_record(v.name, render_3d(scene, v.camera, background).rgb, v.image) for v in views]


def cmd_train_base(args) -> dict:
    views = _views(args.dataset, "train")
    cfg = load_config(args.config, _overrides(args))
    if args.init:
        init = load_scene(args.init).with_sh_order(cfg.sh_order)
    else:
        init = random_init(args.count, args.extent, cfg.sh_order, cfg.seed)
    iters = args.iterations if args.iterations is not None else cfg.baseline_iterations
    t0 = time.perf_counter()
    scene = baseline_train(init, views, iters, background=args.background, seed=cfg.seed,
                           lambda_ssim=cfg.lambda_ssim)
    _check_finite(scene)
    save_scene(scene, args.out)
    report = {"command": "train-base", "iterations": iters, "count": len(scene),
              "seconds": time.perf_counter() - t0, "metrics": _metrics(scene, views, args.background)}
    _write_json(Path(args.out).with_suffix(".metrics.json"), report)
    return report


def cmd_enhance(args) -> dict:
    overrides = _overrides(args)
    if args.ratio is not None:
        overrides["ratio"] = args.ratio
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.no_lobes:
        overrides["lobes"] = "false"
    cfg = load_config(args.config, overrides)
    scene = load_scene(args.scene)
    views = _views(args.dataset, "train")
    result = enhance(scene, views, cfg, args.background, workers=args.workers or default_workers())
    _check_finite(result.scene)
    out = Path(args.out)
    save_scene(result.scene, out)
    save_scene(result.original, out.with_name(out.stem + ".original.ply"))
    save_scene(result.added, out.with_name(out.stem + ".added.ply"))
    report = {"command": "enhance", "config": cfg.to_dict(), **result.report}
    _write_json(args.report or out.with_suffix(".report.json"), report)
    return report


def cmd_render(args) -> dict:
    scene = load_scene(args.scene)
    cams = load_cameras(args.cameras)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    names = []
    for i, cam in enumerate(cams):
        name = cam.name or f"view_{i:03d}"
        save_image(render_3d(scene, cam, args.background).rgb, out / f"{name}.png")
        names.append(name)
    report = {"command": "render", "views": names}
    _write_json(out / "render.json", report)
    return report


def cmd_decompose(args) -> dict:
    original = load_scene(args.original)
    added = load_scene(args.added) if args.added else GaussianCloud.empty(original.sh_order)
    cams = load_cameras(args.cameras)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, cam in enumerate(cams):
        name = cam.name or f"view_{i:03d}"
        diffuse, specular = decompose(original, added, cam, args.background)
        save_image(linear_to_srgb(diffuse), out / f"{name}_diffuse.png")
        save_image(linear_to_srgb(specular), out / f"{name}_specular.png")
        rows.append({"view_id": name, "specular_energy": float(specular.sum())})
    report = {"command": "decompose", "views": rows}
    _write_json(out / "decompose.json", report)
    return report


def cmd_eval(args) -> dict:
    scene = load_scene(args.scene)
    views = _views(args.dataset, args.split)
    rows = _metrics(scene, views, args.background)
    report = {"command": "eval", "split": args.split, "views": rows,
              "mean_psnr": float(np.mean([r["psnr"] for r in rows])),
              "mean_ssim": float(np.mean([r["ssim"] for r in rows]))}
    if args.out:
        _write_json(args.out, report)
    return report


def cmd_gen_synthetic(args) -> dict:
    data = {} if args.spec in (None, "-") else json.loads(Path(args.spec).read_text())
    spec = SyntheticSpec.from_dict(data)
    scene = generate_synthetic(spec, args.seed)
    scene.save(args.out)
    report = {"command": "gen-synthetic", "seed": args.seed, "views": len(scene.cameras),
              "diffuse": len(scene.diffuse), "specular": len(scene.specular)}
    _write_json(Path(args.out) / "synthetic.json", report)
    return report


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="augsplat", description="Augment a Gaussian splatting scene with lobed Gaussians.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, config=True):
        sp.add_argument("--background", type=_background, default=(0.0, 0.0, 0.0))
        if config:
            sp.add_argument("--config", help="flat key = value config file")
            sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")

    sp = sub.add_parser("train-base", help="fit a baseline scene to a dataset")
    sp.add_argument("dataset")
    sp.add_argument("out")
    sp.add_argument("--init", help="initial scene PLY (default: random cloud)")
    sp.add_argument("--count", type=int, default=200)
    sp.add_argument("--extent", type=float, default=1.0)
    sp.add_argument("--iterations", type=int)
    common(sp)
    sp.set_defaults(func=cmd_train_base)

    sp = sub.add_parser("enhance", help="add lobed Gaussians to a trained scene")
    sp.add_argument("scene")
    sp.add_argument("dataset")
    sp.add_argument("out")
    sp.add_argument("--ratio", type=float)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--no-lobes", action="store_true")
    sp.add_argument("--workers", type=int, default=0, help="parallel views (default: available cores)")
    sp.add_argument("--report")
    common(sp)
    sp.set_defaults(func=cmd_enhance)

    sp = sub.add_parser("render", help="render a scene from a camera file")
    sp.add_argument("scene")
    sp.add_argument("cameras")
    sp.add_argument("out")
    common(sp, config=False)
    sp.set_defaults(func=cmd_render)

    sp = sub.add_parser("decompose", help="write diffuse and specular images")
    sp.add_argument("original")
    sp.add_argument("cameras")
    sp.add_argument("out")
    sp.add_argument("--added", help="PLY of the added Gaussians")
    common(sp, config=False)
    sp.set_defaults(func=cmd_decompose)

    sp = sub.add_parser("eval", help="PSNR/SSIM of a scene against a dataset")
    sp.add_argument("scene")
    sp.add_argument("dataset")
    sp.add_argument("--split", choices=("train", "test", "all"), default="test")
    sp.add_argument("--out")
    common(sp, config=False)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("gen-synthetic", help="generate a synthetic dataset")
    sp.add_argument("spec", nargs="?", help="JSON spec file ('-' or omitted for defaults)")
    sp.add_argument("out")
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_gen_synthetic)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"augsplat: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        report = args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"augsplat: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericFailure, FloatingPointError) as exc:
        print(f"augsplat: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (AugSplatError, OSError, ValueError) as exc:
        print(f"augsplat: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    print(json.dumps({k: v for k, v in report.items() if k not in ("metrics", "views", "config")}, indent=2))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
