"""Command-line entry points: dataset generation, training, rendering,
animation, mesh extraction, evaluation, and the gradient verification suite."""

import argparse
import json
import os
import sys

import numpy as np

from .body import PoseParams, builtin_capsule_proxy
from .checkpoint import load_checkpoint, save_checkpoint
from .config import AblationFlags, RunConfig
from .dataset import (
    CaptureDataset,
    SyntheticSceneSpec,
    generate_synthetic,
    load_capture,
    save_image_png,
    save_mask_png,
)
from .features import MultiViewInput
from .fields import pretrain_canonical_sdf
from .marching import marching_cubes
from .metrics import EvalReport, eval_mask_from_bbox, psnr, silhouette_iou, ssim
from .model import NnaModel, SceneBundle
from .neural import engine as E
from .renderer import render_image
from .spatial import save_obj, save_stl
from .training import DivergenceError, Trainer, finetune


def _seed_override(seed):
    env = os.environ.get("NNA_SEED")
    return int(env) if env else seed


def _apply_dtype(cfg):
    E.set_default_dtype(np.float32 if cfg.train.dtype == "float32" else np.float64)
    E.set_check_finite(cfg.train.check_finite)


def _expand_data_dirs(paths):
    out = []
    for p in paths:
        if os.path.exists(os.path.join(p, "meta.json")):
            out.append(p)
            continue
        subs = sorted(
            os.path.join(p, d) for d in os.listdir(p)
            if os.path.exists(os.path.join(p, d, "meta.json"))
        )
        if not subs:
            raise FileNotFoundError(f"{p}: no capture (meta.json) found here or in subdirectories")
        out.extend(subs)
    return out


def _parse_frame_ref(ref):
    root, _, frame = ref.rpartition("/")
    if not root or not frame.isdigit():
        root, _, frame = ref.rpartition(":")
    if not root or not frame.isdigit():
        raise ValueError(f"expected DIR/FRAME or DIR:FRAME, got {ref!r}")
    return root, int(frame)


def _input_views(dataset, n_views, exclude=None):
    views = [v for v in range(dataset.n_views) if v != exclude]
    if n_views > len(views):
        raise ValueError(f"requested {n_views} input views, capture offers {len(views)}")
    return views[:n_views]


def _scene_for(model, template, dataset, frame, views, driving_pose=None):
    mv = MultiViewInput.from_capture(dataset, frame, views)
    return SceneBundle(model, template, mv, driving_pose or dataset.pose(frame))


# ---------------------------------------------------------------------------


def cmd_make_synthetic(args):
    with open(args.spec) as f:
        spec = SyntheticSceneSpec(**json.load(f))
    ds = generate_synthetic(spec, args.out)
    print(f"wrote capture: {ds.n_frames} frames x {ds.n_views} views at {args.out}")
    return 0


def cmd_train(args):
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.ablate:
        cfg.model.ablation = AblationFlags.from_list(args.ablate.split(","))
    if args.iters is not None:
        total = args.iters
        cfg.train.perceptual_iters = min(cfg.train.perceptual_iters, total // 5)
        cfg.train.stage2_iters = total - cfg.train.perceptual_iters
    cfg.train.seed = _seed_override(cfg.train.seed)
    _apply_dtype(cfg)
    os.makedirs(args.out, exist_ok=True)
    cfg.save(os.path.join(args.out, "config.resolved.json"))

    data_dirs = _expand_data_dirs(args.data)
    datasets = [load_capture(d) for d in data_dirs]
    template = datasets[0].template()

    if args.finetune:
        model, ck_template, ck_cfg, meta = load_checkpoint(args.finetune)
        _apply_dtype(cfg)
        frame = args.finetune_frame
        finetune(model, ck_template, datasets[0], frame, cfg,
                 n_iters=args.finetune_iters, seed=cfg.train.seed,
                 log_fn=lambda d: print(f"finetune {d['iter']}: loss {d['loss']:.4f}"))
        out_path = os.path.join(args.out, "ckpt_final.nar")
        save_checkpoint(out_path, model, ck_template, cfg, iteration=meta["iteration"],
                        seed=cfg.train.seed)
        print(f"fine-tuned checkpoint: {out_path}")
        return 0

    model = NnaModel(cfg.model, template.n_joints, seed=cfg.train.seed)
    if not args.skip_pretrain:
        print(f"stage 1: pretraining the canonical SDF ({cfg.train.pretrain_iters} iters)")
        pretrain_canonical_sdf(
            model.sdf, template, cfg.train.pretrain_iters, lr=cfg.train.pretrain_lr,
            batch=cfg.train.pretrain_batch, seed=cfg.train.seed,
            log_every=max(cfg.train.pretrain_iters // 10, 1),
        )
        save_checkpoint(os.path.join(args.out, "ckpt_pretrain.nar"), model, template, cfg,
                        iteration=0, seed=cfg.train.seed)

    def save_ck(trainer):
        p = os.path.join(args.out, f"ckpt_{trainer.iteration:06d}.nar")
        save_checkpoint(p, model, template, cfg, iteration=trainer.iteration,
                        seed=cfg.train.seed)

    trainer = Trainer(model, template, datasets, cfg, out_dir=args.out,
                      log_fn=lambda d: (d["iter"] % 50 == 0) and print(
                          f"iter {d['iter']}: loss {d['loss']:.4f} color {d['color']:.4f} "
                          f"mask {d['mask']:.4f} eik {d['eikonal']:.4f} lr {d['lr']:.2e}"))
    try:
        trainer.train(checkpoint_fn=save_ck)
    except DivergenceError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    finally:
        trainer.close()
    out_path = os.path.join(args.out, "ckpt_final.nar")
    save_checkpoint(out_path, model, template, cfg, iteration=trainer.iteration,
                    seed=cfg.train.seed)
    print(f"final checkpoint: {out_path}")
    return 0


def cmd_render(args):
    model, template, cfg, meta = load_checkpoint(args.ckpt)
    cfg.render.workers = args.workers
    ds = load_capture(args.data)
    views = _input_views(ds, args.views, exclude=args.target_view)
    scene = _scene_for(model, template, ds, args.frame, views)
    cam = ds.cameras[args.target_view]
    seed = _seed_override(args.seed)
    rgb, mask, _ = render_image(scene, cam, cfg.render, seed=seed)
    save_image_png(args.out, rgb)
    if args.mask_out:
        save_mask_png(args.mask_out, mask >= 0.5)
    print(f"wrote {args.out}")
    return 0


def cmd_animate(args):
    model, template, cfg, meta = load_checkpoint(args.ckpt)
    cfg.render.workers = args.workers
    root, frame = _parse_frame_ref(args.input_frame)
    ds = load_capture(root)
    views = _input_views(ds, args.views)
    with open(args.pose_seq) as f:
        seq = json.load(f)
    os.makedirs(args.out, exist_ok=True)

    app_scene = None
    if args.appearance_from:
        aroot, aframe = _parse_frame_ref(args.appearance_from)
        ads = load_capture(aroot)
        aviews = _input_views(ads, min(args.views, ads.n_views))
        app_scene = _scene_for(model, ads.template(), ads, aframe, aviews,
                               driving_pose=ads.pose(aframe))

    shape_override = {}
    if args.geometry_shape:
        for part in args.geometry_shape.split(","):
            key, val = part.split("=")
            shape_override[int(key.strip().lstrip("b"))] = float(val)

    cam = ds.cameras[args.camera_view]
    seed = _seed_override(args.seed)
    base_pose = ds.pose(frame)
    for i, pd in enumerate(seq):
        pose = PoseParams.from_dict(
            {"shape": base_pose.shape_coeffs.tolist(), **pd}
        )
        for k, v in shape_override.items():
            pose.shape_coeffs[k] = v
        scene = _scene_for(model, template, ds, frame, views, driving_pose=pose)
        if app_scene is not None:
            scene.appearance_override = app_scene
            scene.appearance_features = app_scene.appearance_features
        rgb, mask, _ = render_image(scene, cam, cfg.render, seed=seed)
        out = os.path.join(args.out, f"frame_{i:06d}.png")
        save_image_png(out, rgb)
        print(f"wrote {out}")
    return 0


def cmd_extract_mesh(args):
    from .deformation import canonicalize_batch

    model, template, cfg, meta = load_checkpoint(args.ckpt)
    root, frame = _parse_frame_ref(args.input_frame)
    ds = load_capture(root)
    views = _input_views(ds, args.views)
    scene = _scene_for(model, template, ds, frame, views)
    posed = scene.ctx_drive.posed_vertices
    lo = posed.min(axis=0) - 0.15
    hi = posed.max(axis=0) + 0.15

    def field(pts):
        with E.no_grad():
            f_geo = scene.geometry_features(pts)
            xt, _, _ = canonicalize_batch(scene.ctx_drive, pts, f_geo, model.residual)
            s, _ = model.sdf(xt)
        return s.data[:, 0]

    verts, faces = marching_cubes(field, (lo, hi), args.resolution, iso=0.0, batch=8192)
    if args.out.lower().endswith(".stl"):
        save_stl(args.out, verts, faces)
    else:
        save_obj(args.out, verts, faces)
    print(f"wrote {args.out}: {len(verts)} vertices, {len(faces)} faces")
    return 0


def cmd_evaluate(args):
    model, template, cfg, meta = load_checkpoint(args.ckpt)
    cfg.render.workers = args.workers
    ds = load_capture(args.data)
    report = EvalReport(config={"ckpt": args.ckpt, "data": args.data, "split": args.split,
                                "seed": _seed_override(args.seed)})
    frames = list(range(0, ds.n_frames, args.frame_stride))
    for frame in frames:
        for tv in range(ds.n_views):
            views = _input_views(ds, args.views, exclude=tv)
            scene = _scene_for(model, template, ds, frame, views)
            cam = ds.cameras[tv]
            rgb, mask, _ = render_image(scene, cam, cfg.render, seed=_seed_override(args.seed))
            posed = scene.ctx_drive.posed_vertices
            emask = eval_mask_from_bbox(posed.min(axis=0) - 0.05, posed.max(axis=0) + 0.05, cam)
            gt_img = ds.image(frame, tv) * ds.mask(frame, tv)[..., None]
            report.add(
                frame, tv,
                psnr(rgb, gt_img, emask),
                ssim(rgb, gt_img, emask),
                silhouette_iou(mask >= 0.5, ds.mask(frame, tv)),
            )
            row = report.rows[-1]
            print(f"frame {frame} view {tv}: psnr {row['psnr']:.2f} "
                  f"ssim {row['ssim']:.3f} iou {row['iou']:.3f}")
    with open(args.out, "w") as f:
        json.dump(report.to_dict(), f, indent=1)
    s = report.summary()
    print(f"mean psnr {s['psnr']:.2f} dB, ssim {s['ssim']:.3f}")
    return 0


def cmd_gradcheck(args):
    from .verify import run_gradient_suite

    seed = _seed_override(args.seed)
    failures = run_gradient_suite(seed=seed, verbose=True)
    return 0 if failures == 0 else 1


def main(argv=None):
    parser = argparse.ArgumentParser(prog="nna",
                                     description="animatable neural human renderer")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-synthetic", help="generate a synthetic capture")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_make_synthetic)

    p = sub.add_parser("train", help="two-stage training on captures")
    p.add_argument("--data", action="append", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--ablate", default="")
    p.add_argument("--iters", type=int, default=None, help="override total stage-2 iterations")
    p.add_argument("--skip-pretrain", action="store_true")
    p.add_argument("--finetune", default=None, help="checkpoint to fine-tune")
    p.add_argument("--finetune-frame", type=int, default=0)
    p.add_argument("--finetune-iters", type=int, default=500)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("render", help="novel-view render of a capture frame")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--frame", type=int, required=True)
    p.add_argument("--target-view", type=int, required=True)
    p.add_argument("--views", type=int, default=3, choices=(1, 2, 3, 4))
    p.add_argument("--out", required=True)
    p.add_argument("--mask-out", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(fn=cmd_render)

    p = sub.add_parser("animate", help="pose-driven rendering from one input frame")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input-frame", required=True, help="capture DIR/FRAME")
    p.add_argument("--pose-seq", required=True)
    p.add_argument("--appearance-from", default=None, help="capture DIR/FRAME for appearance swap")
    p.add_argument("--geometry-shape", default=None, help="shape overrides, e.g. b0=0.15")
    p.add_argument("--views", type=int, default=4)
    p.add_argument("--camera-view", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(fn=cmd_animate)

    p = sub.add_parser("extract-mesh", help="marching-cubes mesh of the driven field")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input-frame", required=True)
    p.add_argument("--resolution", type=int, default=128)
    p.add_argument("--views", type=int, default=4)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_extract_mesh)

    p = sub.add_parser("evaluate", help="masked PSNR/SSIM/IoU over held-out views")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="heldout", choices=("heldout",))
    p.add_argument("--out", required=True)
    p.add_argument("--views", type=int, default=3)
    p.add_argument("--frame-stride", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("gradcheck", help="finite-difference verification suite")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_gradcheck)

    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except DivergenceError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (ValueError, FileNotFoundError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
