"""Command line interface.

Subcommands: generate-data, train, render-olat, relight-envmap, eval.
Exit codes: 0 ok, 2 invalid input, 3 numerical failure. PRTG_THREADS
overrides --threads.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import dataset as ds
from . import field as fm
from . import lighting as lt
from . import render as vr
from . import scenegen as sg
from . import training as tr
from .config import load_render_config, load_train_config
from .errors import InvalidInputError, NumericalError


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="prtgrad",
                                description="Relightable neural fields from OLAT captures")
    p.add_argument("--seed", type=int, default=None, help="override config seeds")
    p.add_argument("--threads", type=int, default=None,
                   help="BLAS thread cap (PRTG_THREADS wins if set)")
    p.add_argument("--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate-data", help="render an oracle OLAT dataset")
    g.add_argument("scene", help="scene description JSON")
    g.add_argument("rig", help="capture rig JSON")
    g.add_argument("out", help="output dataset directory")

    t = sub.add_parser("train", help="optimize a field on a dataset")
    t.add_argument("dataset", help="dataset directory (contains manifest.json)")
    t.add_argument("cfg", help="training config (key = value text)")
    t.add_argument("out", help="output directory for checkpoints")

    r = sub.add_parser("render-olat", help="render a view under one OLAT direction")
    r.add_argument("ckpt", help="field checkpoint")
    r.add_argument("--view", required=True, help="camera: index or group:index")
    r.add_argument("--light", required=True, help="'x,y,z' direction or light index")
    r.add_argument("--dataset", required=True, help="dataset directory (cameras/bounds)")
    r.add_argument("--out", default="render.pfm", help="output PFM path")
    r.add_argument("--render-cfg", default=None, help="render config file")

    e = sub.add_parser("relight-envmap", help="relight a view under an envmap")
    e.add_argument("ckpt", help="field checkpoint")
    e.add_argument("envmap", help="equirectangular HDR envmap (PFM)")
    e.add_argument("--lights", type=int, default=64, help="median-cut light count (power of two)")
    e.add_argument("--view", required=True, help="camera: index or group:index")
    e.add_argument("--dataset", required=True, help="dataset directory (cameras/bounds)")
    e.add_argument("--out", default="relight.pfm", help="output PFM path")
    e.add_argument("--render-cfg", default=None, help="render config file")
    e.add_argument("--save-lights", default=None,
                   help="also export the extracted light list as JSON")

    v = sub.add_parser("eval", help="held-out evaluation of a checkpoint")
    v.add_argument("ckpt", help="field checkpoint")
    v.add_argument("dataset", help="dataset directory")
    v.add_argument("--report", default="report.json", help="report JSON path")
    v.add_argument("--render-cfg", default=None, help="render config file")
    return p


def _setup_threads(args) -> None:
    n = os.environ.get("PRTG_THREADS")
    n = int(n) if n else args.threads
    if n:
        import threadpoolctl

        threadpoolctl.threadpool_limits(limits=n)


def _resolve_camera(manifest: ds.Manifest, spec: str) -> ds.Camera:
    if ":" in spec:
        group, idx = spec.split(":", 1)
    else:
        group, idx = manifest.groups[0], spec
    try:
        cam = manifest.cameras[group][int(idx)]
    except (KeyError, IndexError, ValueError) as e:
        raise InvalidInputError(f"no camera {spec!r} in the dataset") from e
    return cam


def _resolve_light(manifest: ds.Manifest, spec: str) -> np.ndarray:
    if "," in spec:
        try:
            v = np.array([float(x) for x in spec.split(",")], dtype=np.float64)
        except ValueError as e:
            raise InvalidInputError(f"bad light direction {spec!r}") from e
        if v.shape != (3,):
            raise InvalidInputError("light direction needs three components")
        n = np.linalg.norm(v)
        if n == 0:
            raise InvalidInputError("light direction must be nonzero")
        return v / n
    try:
        group = manifest.groups[0]
        return manifest.lights[group][int(spec)].omega
    except (KeyError, IndexError, ValueError) as e:
        raise InvalidInputError(f"no light {spec!r} in the dataset") from e


def _render_cfg(args, seed) -> vr.RenderConfig:
    cfg = load_render_config(args.render_cfg) if args.render_cfg else vr.RenderConfig(seed=None)
    if seed is not None:
        cfg.seed = seed
    return cfg


def _near_far(dataset: ds.OlatDataset, cam: ds.Camera, cfg: vr.RenderConfig):
    if cfg.near is not None and cfg.far is not None:
        return cfg.near, cfg.far
    return dataset.near_far(cam)


def _cmd_generate(args) -> int:
    scene = sg.load_scene(args.scene)
    with open(args.rig) as f:
        try:
            rig_spec = json.load(f)
        except json.JSONDecodeError as e:
            raise InvalidInputError(f"{args.rig}: invalid JSON ({e})") from e
    try:
        rig = sg.build_rig(**rig_spec)
    except TypeError as e:
        raise InvalidInputError(f"{args.rig}: {e}") from e
    manifest = sg.generate_dataset(scene, rig, args.out, verbose=args.verbose)
    print(f"wrote {len(manifest.images)} images to {args.out}")
    return 0


def _cmd_train(args) -> int:
    from .report import plot_loss_history

    cfg = load_train_config(args.cfg)
    if args.seed is not None:
        cfg.seed = args.seed
    dataset = ds.OlatDataset(args.dataset)

    def progress(r):
        if args.verbose and r.step % 100 == 0:
            print(f"step {r.step}: total {r.total:.5f} color {r.color:.5f} mask {r.mask:.6f}")

    params, state, history = tr.train(dataset, cfg, out_dir=args.out, callback=progress)
    plot_loss_history(history, os.path.join(args.out, "loss_curve.png"))
    print(f"trained {state.step} steps; final loss {history[-1].total:.5f}"
          if history else "no steps run")
    print(f"checkpoint: {os.path.join(args.out, 'field.prtg')}")
    return 0


def _cmd_render_olat(args) -> int:
    from .report import save_preview_png

    params = fm.load_checkpoint(args.ckpt)
    dataset = ds.OlatDataset(args.dataset)
    cam = _resolve_camera(dataset.manifest, args.view)
    omega = _resolve_light(dataset.manifest, args.light)
    cfg = _render_cfg(args, args.seed)
    near, far = _near_far(dataset, cam, cfg)
    img = vr.render_image(params, cam, omega, cfg, near, far)
    ds.write_pfm(args.out, img.astype(np.float32))
    save_preview_png(img, os.path.splitext(args.out)[0] + ".png")
    print(f"wrote {args.out}")
    return 0


def _cmd_relight(args) -> int:
    from .report import save_preview_png

    params = fm.load_checkpoint(args.ckpt)
    dataset = ds.OlatDataset(args.dataset)
    cam = _resolve_camera(dataset.manifest, args.view)
    env = lt.Envmap(ds.read_pfm(args.envmap).astype(np.float64))
    lights = lt.median_cut(env, args.lights)
    if args.save_lights:
        lt.save_lights(lights, args.save_lights)
    cfg = _render_cfg(args, args.seed)
    near, far = _near_far(dataset, cam, cfg)
    img = lt.relight_image(params, cam, lights, cfg, near, far)
    ds.write_pfm(args.out, img.astype(np.float32))
    save_preview_png(img, os.path.splitext(args.out)[0] + ".png")
    print(f"wrote {args.out} ({len(lights)} lights)")
    return 0


def _cmd_eval(args) -> int:
    from .evaluation import evaluate
    from .report import write_report

    params = fm.load_checkpoint(args.ckpt)
    dataset = ds.OlatDataset(args.dataset)
    cfg = _render_cfg(args, args.seed)
    report = evaluate(params, dataset, split="test", cfg=cfg)
    written = write_report(report, args.report)
    print(f"{len(report.cases)} cases: PSNR {report.psnr_avg:.2f} dB, "
          f"SSIM {report.ssim_avg:.4f}")
    for path in written:
        print(f"wrote {path}")
    return 0


COMMANDS = {
    "generate-data": _cmd_generate,
    "train": _cmd_train,
    "render-olat": _cmd_render_olat,
    "relight-envmap": _cmd_relight,
    "eval": _cmd_eval,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    _setup_threads(args)
    try:
        return COMMANDS[args.command](args)
    except InvalidInputError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (FileNotFoundError, IsADirectoryError, PermissionError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
