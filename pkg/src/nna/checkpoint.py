"""Model checkpoints: every parameter plus the body model and run config in
one named-array container, so a checkpoint renders without the dataset."""

import json
from dataclasses import asdict

import numpy as np

from .body import BodyTemplate, PoseParams
from .config import RunConfig
from .model import NnaModel
from .nar import load_nar, save_nar

FORMAT_VERSION = 1


def save_checkpoint(path, model, template, run_cfg, iteration=0, seed=0):
    arrays = {}
    for p in model.parameters():
        arrays["param." + p.name] = p.data
    arrays["body.vertices"] = template.vertices.astype("<f8")
    arrays["body.faces"] = template.faces.astype("<u4")
    arrays["body.weights"] = template.skin_weights.astype("<f8")
    arrays["body.joints"] = template.joints_rest.astype("<f8")
    arrays["body.parents"] = template.parents.astype("<i4")
    if template.shape_basis is not None:
        arrays["body.shape_basis"] = template.shape_basis.astype("<f8")
    if template.part_ids is not None:
        arrays["body.part_ids"] = template.part_ids.astype("<i4")
    meta = {
        "kind": "checkpoint",
        "version": FORMAT_VERSION,
        "canonical_pose": PoseParams.identity(template.n_joints, template.n_shape).to_dict(),
        "config": asdict(run_cfg),
        "iteration": int(iteration),
        "seed": int(seed),
        "n_joints": int(template.n_joints),
        "dtype": str(np.dtype(arrays["param." + model.parameters()[0].name].dtype)),
        "namespaces": sorted({p.name.split(".")[0] for p in model.parameters()}),
    }
    save_nar(path, arrays, meta)


def load_checkpoint(path):
    """Returns (model, template, run_cfg, meta). Parameter shapes are
    validated against the architecture the stored config describes."""
    arrays, meta = load_nar(path)
    if meta.get("kind") != "checkpoint":
        raise ValueError(f"{path}: not a model checkpoint")
    cfg = RunConfig.from_dict(meta["config"])
    template = BodyTemplate(
        vertices=arrays["body.vertices"].astype(np.float64),
        faces=arrays["body.faces"].astype(np.int64),
        skin_weights=arrays["body.weights"].astype(np.float64),
        joints_rest=arrays["body.joints"].astype(np.float64),
        parents=arrays["body.parents"].astype(np.int32),
        shape_basis=arrays.get("body.shape_basis"),
        part_ids=None if "body.part_ids" not in arrays else arrays["body.part_ids"].astype(np.int32),
    ).validate()
    # skip init-time field fitting: stored parameters replace everything
    build_cfg = RunConfig.from_dict(meta["config"])
    build_cfg.model.sdf_sphere_fit_iters = 0
    model = NnaModel(build_cfg.model, meta["n_joints"], seed=0)
    params = {"param." + p.name: p for p in model.parameters()}
    missing = sorted(set(params) - set(arrays))
    if missing:
        raise ValueError(f"{path}: missing parameter arrays: {missing[:4]}...")
    for name, p in params.items():
        arr = arrays[name]
        if tuple(arr.shape) != tuple(p.shape):
            raise ValueError(
                f"{path}: shape mismatch for {name}: file {arr.shape}, model {p.shape}"
            )
        p.data = arr
    model.config = cfg.model  # restore the true config (fit iters untouched)
    return model, template, cfg, meta


def export_checkpoint_json(path):
    """Human-readable manifest dump (debugging aid)."""
    _, meta = load_nar(path)
    return json.dumps(meta, indent=1, sort_keys=True)
