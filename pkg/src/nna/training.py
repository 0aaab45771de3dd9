"""The training objective and loop: L1 color + mask BCE + Eikonal (+ a
patch-based perceptual term late in training), linear warmup with cosine
decay, SDF freezing, leave-one-out view batches, and one-frame fine-tuning.
"""

import json
import os
import time

import numpy as np
from scipy import ndimage

from .config import RunConfig
from .dataset import leave_one_out_batches, pixel_rays
from .features import MultiViewInput
from .model import NnaModel, SceneBundle
from .neural import engine as E
from .neural.conv import conv2d
from .neural.optim import AdamState, adam_step
from .renderer import render_patch, render_rays

BCE_EPS = 1e-4


class DivergenceError(RuntimeError):
    pass


def color_loss(pred_rgb, target_rgb):
    """Mean absolute error over rays and channels."""
    tgt = E.Value(np.asarray(target_rgb, dtype=pred_rgb.data.dtype))
    return E.mean(E.abs_(E.sub(pred_rgb, tgt)))


def mask_loss(pred_mask, target_mask):
    """Mean binary cross entropy; predictions clamped away from {0, 1}."""
    dt = pred_mask.data.dtype.type
    m = E.clip(pred_mask, BCE_EPS, 1.0 - BCE_EPS)
    t = E.Value(np.asarray(target_mask, dtype=dt))
    one = E.constant(1.0, dt)
    return E.neg(E.mean(
        E.add(E.mul(t, E.log(m)), E.mul(E.sub(one, t), E.log(E.sub(one, m))))
    ))


def eikonal_loss(normals):
    """Mean squared deviation of the gradient norm from one."""
    dt = normals.data.dtype.type
    return E.mean(E.square(E.sub(E.norm(normals, axis=-1, eps=1e-24), E.constant(1.0, dt))))


def lr_at(iteration, cfg):
    """Linear warmup to the peak, then cosine decay to the floor."""
    if iteration < cfg.warmup_iters:
        return cfg.peak_lr * iteration / cfg.warmup_iters
    total = max(cfg.total_iters - cfg.warmup_iters, 1)
    progress = min((iteration - cfg.warmup_iters) / total, 1.0)
    return cfg.lr_floor + 0.5 * (cfg.peak_lr - cfg.lr_floor) * (1.0 + np.cos(np.pi * progress))


def color_jitter(image, seed, magnitude=0.2):
    """Seeded brightness/contrast/saturation jitter, clamped to [0, 1]."""
    image = np.asarray(image, dtype=np.float64)
    if magnitude == 0.0:
        return np.clip(image, 0.0, 1.0)
    rng = np.random.Generator(np.random.Philox(seed))
    b, c, s = rng.uniform(1.0 - magnitude, 1.0 + magnitude, size=3)
    img = image * b
    luma = img.mean(axis=-1, keepdims=True)
    img = luma + (img - luma) * s
    g = img.mean()
    img = g + (img - g) * c
    return np.clip(img, 0.0, 1.0)


class RandomConvPerceptual:
    """Fixed random three-stage conv feature distance.

    A stand-in for learned perceptual weights: multi-scale squared feature
    differences under frozen seeded kernels. External weights in a named-array
    container (conv0.w/conv0.b/...) can replace the random ones."""

    def __init__(self, seed=0, weights_path=None):
        rng = np.random.default_rng(seed)
        shapes = [(16, 3, 3, 3), (32, 16, 3, 3), (64, 32, 3, 3)]
        self.kernels = []
        if weights_path:
            from .nar import load_nar

            arrays, _ = load_nar(weights_path)
            for i in range(3):
                self.kernels.append(
                    (arrays[f"conv{i}.w"].astype(np.float64), arrays[f"conv{i}.b"].astype(np.float64))
                )
        else:
            for shp in shapes:
                fan = shp[1] * 9
                self.kernels.append(
                    (rng.normal(0.0, np.sqrt(2.0 / fan), size=shp), np.zeros(shp[0]))
                )

    def _features(self, x):
        feats = []
        for w, b in self.kernels:
            dt = x.data.dtype.type
            x = conv2d(x, E.Value(w.astype(dt)), E.Value(b.astype(dt)), stride=2, pad=1)
            x = E.relu(x)
            feats.append(x)
        return feats

    def __call__(self, pred_patch, target_patch):
        """pred_patch: [h, w, 3] Value; target_patch: [h, w, 3] array."""
        dt = pred_patch.data.dtype.type
        h, w = pred_patch.data.shape[:2]
        xp = E.reshape(E.transpose(pred_patch, (2, 0, 1)), (1, 3, h, w))
        xt = E.Value(
            np.transpose(np.asarray(target_patch, dtype=dt), (2, 0, 1))[None]
        )
        total = None
        for fp, ft in zip(self._features(xp), self._features(xt)):
            term = E.mean(E.square(E.sub(fp, ft)))
            total = term if total is None else E.add(total, term)
        return total


def select_ray_pixels(mask, m, rng, dilate_px=10, fg_fraction=0.5):
    """Half the rays from the dilated foreground, half uniform in its bbox."""
    dil = ndimage.binary_dilation(mask, iterations=dilate_px) if dilate_px else mask
    ys, xs = np.nonzero(dil)
    H, W = mask.shape
    if len(ys) == 0:
        y0, y1, x0, x1 = 0, H - 1, 0, W - 1
    else:
        y0, y1 = ys.min(), ys.max()
        x0, x1 = xs.min(), xs.max()
    n_fg = int(m * fg_fraction)
    if len(ys) == 0:
        n_fg = 0
    picks = []
    if n_fg:
        idx = rng.integers(len(ys), size=n_fg)
        picks.append(np.stack([xs[idx], ys[idx]], axis=1))
    n_bg = m - n_fg
    if n_bg:
        bx = rng.integers(x0, x1 + 1, size=n_bg)
        by = rng.integers(y0, y1 + 1, size=n_bg)
        picks.append(np.stack([bx, by], axis=1))
    return np.concatenate(picks), (x0, y0, x1, y1)


class Trainer:
    """Second-stage optimization over one or more captures."""

    def __init__(self, model: NnaModel, template, datasets, run_cfg: RunConfig,
                 out_dir=None, seed=None, log_fn=None):
        self.model = model
        self.template = template
        self.datasets = list(datasets)
        self.cfg = run_cfg
        self.seed = run_cfg.train.seed if seed is None else seed
        self.out_dir = out_dir
        self.iteration = 0
        self.adam = AdamState(model.parameters())
        self.perceptual = RandomConvPerceptual(seed=self.seed)
        self._batchers = [
            leave_one_out_batches(ds, self.seed + 31 * i) for i, ds in enumerate(self.datasets)
        ]
        self._ds_rng = np.random.default_rng(self.seed + 7)
        self._sdf_frozen = False
        self._log_fn = log_fn
        self._log_file = None
        if out_dir:
            os.makedirs(out_dir, exist_ok=True)
            self._log_file = open(os.path.join(out_dir, "train_log.jsonl"), "a")

    def close(self):
        if self._log_file:
            self._log_file.close()
            self._log_file = None

    def _freeze_sdf_if_due(self):
        t = self.cfg.train
        if not self._sdf_frozen and self.iteration >= t.sdf_freeze_iter:
            for p in self.model.sdf.parameters():
                p.set_trainable(False)
            self._sdf_frozen = True

    def next_batch(self):
        di = int(self._ds_rng.integers(len(self.datasets)))
        b = next(self._batchers[di])
        b["dataset"] = di
        return b

    def step(self, batch=None):
        """One optimization step; returns the loss dict."""
        t = self.cfg.train
        self._freeze_sdf_if_due()
        if batch is None:
            batch = self.next_batch()
        ds = self.datasets[batch["dataset"]]
        frame = batch["frame"]
        step_rng = np.random.Generator(np.random.Philox(key=self.seed, counter=self.iteration))

        jit_seed = int(step_rng.integers(2**62))
        images = {
            v: color_jitter(ds.image(frame, v), jit_seed, t.color_jitter)
            for v in batch["input_views"] + [batch["target_view"]]
        }
        mv = MultiViewInput(
            images=[images[v] for v in batch["input_views"]],
            masks=[ds.mask(frame, v) for v in batch["input_views"]],
            cameras=[ds.cameras[v] for v in batch["input_views"]],
            pose=ds.pose(frame),
        )
        scene = SceneBundle(self.model, self.template, mv, ds.pose(frame))

        tv = batch["target_view"]
        cam = ds.cameras[tv]
        tgt_img = images[tv]
        tgt_mask = ds.mask(frame, tv)
        pixels, bbox = select_ray_pixels(
            tgt_mask, t.rays_per_step, step_rng, t.mask_dilate_px, t.foreground_ray_fraction
        )
        origins, dirs = pixel_rays(cam, pixels)
        jc = step_rng.random((len(pixels), self.cfg.render.n_coarse))
        jf = step_rng.random((len(pixels), max(self.cfg.render.n_fine, 1)))

        res = render_rays(scene, origins, dirs, self.cfg.render, jc, jf, train=True)
        tgt_rgb = tgt_img[pixels[:, 1], pixels[:, 0]] * tgt_mask[pixels[:, 1], pixels[:, 0], None]
        tgt_m = tgt_mask[pixels[:, 1], pixels[:, 0]].astype(np.float64)

        l_color = color_loss(res["rgb"], tgt_rgb)
        l_mask = mask_loss(res["mask"], tgt_m)
        dt = E.default_dtype()
        l_eik = eikonal_loss(res["normals"]) if res["normals"] is not None else E.Value(np.asarray(0.0, dtype=dt))
        total = E.add(
            l_color,
            E.add(
                E.mul(E.constant(t.lambda_mask, dt), l_mask),
                E.mul(E.constant(t.lambda_eikonal, dt), l_eik),
            ),
        )

        l_perc_val = 0.0
        if self.iteration >= t.stage2_iters and t.patches_per_step > 0:
            l_perc = None
            ps = t.patch_size
            x0, y0, x1, y1 = bbox
            for _ in range(t.patches_per_step):
                lo_x = max(0, min(x0, cam.width - ps))
                hi_x = min(max(x1 - ps + 1, lo_x + 1), cam.width - ps + 1)
                lo_y = max(0, min(y0, cam.height - ps))
                hi_y = min(max(y1 - ps + 1, lo_y + 1), cam.height - ps + 1)
                px = int(step_rng.integers(lo_x, hi_x))
                py = int(step_rng.integers(lo_y, hi_y))
                pres = render_patch(scene, cam, (px, py, ps, ps), self.cfg.render,
                                    seed=jit_seed % (2**32), train=True)
                pred = E.reshape(pres["rgb"], (ps, ps, 3))
                crop = tgt_img[py : py + ps, px : px + ps] * tgt_mask[py : py + ps, px : px + ps, None]
                term = self.perceptual(pred, crop)
                l_perc = term if l_perc is None else E.add(l_perc, term)
            total = E.add(total, E.mul(E.constant(t.lambda_perceptual, dt), l_perc))
            l_perc_val = float(l_perc.data)

        if not np.isfinite(total.data):
            raise DivergenceError(f"non-finite loss at iteration {self.iteration}")

        grads = E.backward(total)
        lr = lr_at(self.iteration, t)
        adam_step(self.adam, grads, lr)

        losses = {
            "iter": self.iteration,
            "loss": float(total.data),
            "color": float(l_color.data),
            "mask": float(l_mask.data),
            "eikonal": float(l_eik.data),
            "perceptual": l_perc_val,
            "lr": lr,
            "seed": self.seed,
            "time": time.time(),
        }
        if self._log_file:
            self._log_file.write(json.dumps(losses) + "\n")
            self._log_file.flush()
        if self._log_fn:
            self._log_fn(losses)
        self.iteration += 1
        return losses

    def train(self, n_iters=None, checkpoint_fn=None):
        t = self.cfg.train
        n = t.total_iters if n_iters is None else n_iters
        last = None
        while self.iteration < n:
            last = self.step()
            if checkpoint_fn and t.checkpoint_every and (
                self.iteration % t.checkpoint_every == 0 or self.iteration == n
            ):
                checkpoint_fn(self)
        return last


def finetune(model, template, dataset, frame, run_cfg, n_iters, seed=0,
             freeze_features=True, log_fn=None, views=None):
    """Adapt a trained model to one frame by leave-one-out over its views.

    Feature extraction (encoder, heads, GCNs, diffusion) stays frozen by
    default; the fields and the residual adapt. With fewer than four views the
    splits reuse views (warned) relying on the per-step color jitter for
    variation."""
    import warnings

    views = list(range(dataset.n_views)) if views is None else list(views)
    if len(views) < 4:
        warnings.warn("fine-tuning with fewer than 4 views: reusing views across splits")
        while len(views) < 4:
            views = views + views[: 4 - len(views)]
    frozen = []
    if freeze_features:
        for p in model.parameter_groups()["features"]:
            if p.trainable:
                p.set_trainable(False)
                frozen.append(p)
    cfg = RunConfig(model=run_cfg.model, render=run_cfg.render, train=run_cfg.train)
    cfg.train.sdf_freeze_iter = n_iters + 1  # the SDF adapts during fine-tuning
    cfg.train.stage2_iters = n_iters + 1     # no perceptual term
    trainer = Trainer(model, template, [dataset], cfg, seed=seed, log_fn=log_fn)
    rng = np.random.default_rng(seed)
    for it in range(n_iters):
        target = views[int(rng.integers(len(views)))]
        inputs = [v for v in views if v != target][:3]
        if len(inputs) < 3:
            inputs = (inputs + inputs)[:3]
        trainer.step({"dataset": 0, "frame": frame, "target_view": target,
                      "input_views": inputs})
    for p in frozen:
        p.set_trainable(True)
    return model
