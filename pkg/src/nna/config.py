"""Run configuration: JSON in, fully-defaulted dataclasses out.

Every command writes its resolved config next to its outputs so runs can be
reproduced from the artifacts alone.
"""

import json
from dataclasses import asdict, dataclass, field, fields


@dataclass
class AblationFlags:
    use_gcn: bool = True
    use_u_geo: bool = True
    use_u_app: bool = True
    use_occlusion_bias: bool = True
    separate_geo_app: bool = True

    @classmethod
    def from_list(cls, names):
        """Build from CLI-style ablation names: gcn, occ, sep, u_geo, u_app."""
        flags = cls()
        mapping = {
            "gcn": "use_gcn",
            "occ": "use_occlusion_bias",
            "sep": "separate_geo_app",
            "u_geo": "use_u_geo",
            "u_app": "use_u_app",
        }
        for n in names:
            n = n.strip()
            if not n:
                continue
            if n not in mapping:
                raise ValueError(f"unknown ablation {n!r}; choose from {sorted(mapping)}")
            setattr(flags, mapping[n], False)
        return flags


@dataclass
class ModelConfig:
    feature_dim: int = 56
    k_neighbors: int = 8
    diffuse_eps: float = 1e-6
    occlusion_bias: float = -10.0
    residual_hidden: int = 128
    residual_layers: int = 4
    residual_bound: float = 0.1
    sdf_radius: float = 0.5
    sdf_sphere_fit_iters: int = 200
    feature_tail: bool = True
    neus_k_init: float = 40.0
    ablation: AblationFlags = field(default_factory=AblationFlags)


@dataclass
class RenderConfig:
    band: float = 0.10
    n_coarse: int = 32
    n_fine: int = 32
    color_weight_cutoff: float = 0.0  # skip color MLP below this sample weight
    workers: int = 1
    chunk_rays: int = 256


@dataclass
class TrainConfig:
    rays_per_step: int = 1024
    warmup_iters: int = 2000
    peak_lr: float = 5e-4
    lr_floor: float = 1e-6
    stage2_iters: int = 80000          # steps without the perceptual term
    perceptual_iters: int = 20000      # steps with it, appended after stage2_iters
    sdf_freeze_iter: int = 50000
    patches_per_step: int = 2
    patch_size: int = 24
    lambda_mask: float = 0.1
    lambda_eikonal: float = 0.1
    lambda_perceptual: float = 1.0
    pretrain_iters: int = 20000
    pretrain_lr: float = 5e-4
    pretrain_batch: int = 512
    color_jitter: float = 0.2
    mask_dilate_px: int = 10
    foreground_ray_fraction: float = 0.5
    checkpoint_every: int = 2500
    seed: int = 0
    dtype: str = "float32"
    check_finite: bool = False

    @property
    def total_iters(self):
        return self.stage2_iters + self.perceptual_iters


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    render: RenderConfig = field(default_factory=RenderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_json(self):
        return json.dumps(asdict(self), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        def build(klass, sub):
            kwargs = {}
            names = {f.name: f for f in fields(klass)}
            for k, v in sub.items():
                if k not in names:
                    raise ValueError(f"unknown config key {k!r} for {klass.__name__}")
                if k == "ablation":
                    v = AblationFlags(**v)
                kwargs[k] = v
            return klass(**kwargs)

        return cls(
            model=build(ModelConfig, d.get("model", {})),
            render=build(RenderConfig, d.get("render", {})),
            train=build(TrainConfig, d.get("train", {})),
        )

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text) if text.strip() else {})

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls.from_json(f.read())

    def save(self, path):
        with open(path, "w") as f:
            f.write(self.to_json())
