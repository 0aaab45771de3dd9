"""Skinned parametric body: template mesh, kinematics, linear blend skinning.

The canonical pose is the zero pose of the stored template, which the built-in
proxy constructs as an X-pose (arms 45 degrees down, legs spread 30 degrees)
to keep limbs clear of the torso in canonical space.
"""

from dataclasses import dataclass, field

import numpy as np

from .nar import load_nar, save_nar


@dataclass
class BodyTemplate:
    vertices: np.ndarray          # [N_v, 3] meters, canonical pose
    faces: np.ndarray             # [F, 3] int
    skin_weights: np.ndarray      # [N_v, N_J], rows sum to 1
    joints_rest: np.ndarray       # [N_J, 3]
    parents: np.ndarray           # [N_J] int, -1 for root
    shape_basis: np.ndarray | None = None   # [S, N_v, 3]
    part_ids: np.ndarray | None = None      # [N_v] int, proxy capsule id
    capsules: list = field(default_factory=list)  # analytic proxy info, if built-in

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_joints(self):
        return len(self.joints_rest)

    @property
    def n_shape(self):
        return 0 if self.shape_basis is None else len(self.shape_basis)

    def validate(self, weight_tol=1e-4):
        w = self.skin_weights
        if w.shape != (self.n_vertices, self.n_joints):
            raise ValueError("skin_weights shape mismatch")
        if np.any(w < 0):
            raise ValueError("negative skinning weight")
        sums = w.sum(axis=1)
        if np.max(np.abs(sums - 1.0)) > weight_tol:
            raise ValueError(f"skinning weight rows must sum to 1 (worst {np.max(np.abs(sums-1.0)):.2e})")
        p = self.parents
        if p[0] != -1:
            raise ValueError("joint 0 must be the root (parent -1)")
        for i in range(1, self.n_joints):
            if not (0 <= p[i] < i):
                raise ValueError(f"parents must form a tree with parent index < child (joint {i})")
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= self.n_vertices):
            raise ValueError("face index out of range")
        if self.shape_basis is not None and self.shape_basis.shape[1:] != (self.n_vertices, 3):
            raise ValueError("shape_basis shape mismatch")
        return self


@dataclass
class PoseParams:
    joint_rotations: np.ndarray   # [N_J, 3] axis-angle
    root_translation: np.ndarray  # [3]
    shape_coeffs: np.ndarray      # [S]

    @classmethod
    def identity(cls, n_joints, n_shape=0):
        return cls(np.zeros((n_joints, 3)), np.zeros(3), np.zeros(n_shape))

    def copy(self):
        return PoseParams(
            self.joint_rotations.copy(), self.root_translation.copy(), self.shape_coeffs.copy()
        )

    def to_dict(self):
        return {
            "rotations": self.joint_rotations.tolist(),
            "translation": self.root_translation.tolist(),
            "shape": self.shape_coeffs.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            np.asarray(d["rotations"], dtype=np.float64).reshape(-1, 3),
            np.asarray(d["translation"], dtype=np.float64).reshape(3),
            np.asarray(d.get("shape", []), dtype=np.float64).reshape(-1),
        )


@dataclass
class JointTransforms:
    rotations: np.ndarray     # [N_J, 3, 3] canonical -> posed
    translations: np.ndarray  # [N_J, 3]; T_j(p) = R_j p + t_j

    def apply(self, j, points):
        return points @ self.rotations[j].T + self.translations[j]

    def posed_joints(self, joints_rest):
        return np.einsum("jab,jb->ja", self.rotations, joints_rest) + self.translations

    def inverse(self):
        rot = np.swapaxes(self.rotations, 1, 2).copy()
        trans = -np.einsum("jab,jb->ja", rot, self.translations)
        return JointTransforms(rot, trans)


def rodrigues(axis_angle):
    """Axis-angle vectors [..., 3] to rotation matrices [..., 3, 3]."""
    aa = np.asarray(axis_angle, dtype=np.float64)
    theta = np.linalg.norm(aa, axis=-1, keepdims=True)
    small = theta[..., 0] < 1e-10
    axis = np.where(theta > 1e-10, aa / np.where(theta == 0, 1.0, theta), 0.0)
    x, y, z = axis[..., 0], axis[..., 1], axis[..., 2]
    zero = np.zeros_like(x)
    K = np.stack(
        [
            np.stack([zero, -z, y], axis=-1),
            np.stack([z, zero, -x], axis=-1),
            np.stack([-y, x, zero], axis=-1),
        ],
        axis=-2,
    )
    t = theta[..., None]
    eye = np.broadcast_to(np.eye(3), K.shape)
    R = eye + np.sin(t) * K + (1.0 - np.cos(t)) * (K @ K)
    if np.any(small):
        # first-order fallback keeps tiny rotations exact enough
        aa_small = aa[small]
        Ks = K[small] * np.linalg.norm(aa_small, axis=-1)[..., None, None]
        R[small] = np.eye(3) + Ks
    return R


def _check_pose(template, pose):
    if pose.joint_rotations.shape != (template.n_joints, 3):
        raise ValueError(
            f"pose has {pose.joint_rotations.shape[0]} joints, template has {template.n_joints}"
        )
    if len(pose.shape_coeffs) != template.n_shape:
        raise ValueError(
            f"pose has {len(pose.shape_coeffs)} shape coeffs, template basis has {template.n_shape}"
        )


def compute_joint_transforms(template, pose):
    """Forward kinematics: per-joint rigid maps from canonical to posed space."""
    _check_pose(template, pose)
    local = rodrigues(pose.joint_rotations)
    nj = template.n_joints
    rot = np.zeros((nj, 3, 3))
    trans = np.zeros((nj, 3))
    J = template.joints_rest
    rot[0] = local[0]
    trans[0] = J[0] + pose.root_translation - local[0] @ J[0]
    for j in range(1, nj):
        p = int(template.parents[j])
        rot[j] = rot[p] @ local[j]
        # joint j's rest position carried by the parent transform
        wj = rot[p] @ J[j] + trans[p]
        trans[j] = wj - rot[j] @ J[j]
    return JointTransforms(rot, trans)


def shaped_vertices(template, shape_coeffs):
    v = template.vertices
    if template.shape_basis is not None and len(shape_coeffs):
        v = v + np.einsum("s,svd->vd", np.asarray(shape_coeffs, dtype=np.float64), template.shape_basis)
    return v


def forward_skin(template, pose, transforms=None):
    """Pose the template: blend per-joint rigid images of the shaped vertices."""
    _check_pose(template, pose)
    if transforms is None:
        transforms = compute_joint_transforms(template, pose)
    v = shaped_vertices(template, pose.shape_coeffs)
    w = template.skin_weights
    # blended affine per vertex: cheaper than per-joint images for many joints
    rot_v = np.einsum("vj,jab->vab", w, transforms.rotations)
    trans_v = w @ transforms.translations
    return np.einsum("vab,vb->va", rot_v, v) + trans_v


def shape_displacement(template, vertex_index, pose, canonical_pose):
    """Vertex offset caused by the shape difference between two poses,
    evaluated at the canonical articulation."""
    if not (0 <= vertex_index < template.n_vertices):
        raise ValueError("vertex_index out of range")
    return shape_displacements(template, pose.shape_coeffs, canonical_pose.shape_coeffs)[vertex_index]


def shape_displacements(template, shape_coeffs, canonical_shape_coeffs=None):
    """[N_v, 3] shape offsets relative to the canonical shape coefficients."""
    if template.shape_basis is None or template.n_shape == 0:
        return np.zeros((template.n_vertices, 3))
    beta = np.asarray(shape_coeffs, dtype=np.float64)
    beta0 = (
        np.zeros_like(beta)
        if canonical_shape_coeffs is None
        else np.asarray(canonical_shape_coeffs, dtype=np.float64)
    )
    return np.einsum("s,svd->vd", beta - beta0, template.shape_basis)


# ---------------------------------------------------------------------------
# built-in capsule proxy


def _smoothstep(t):
    t = np.clip(t, 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def _capsule_mesh(a, b, radius, n_segments, radial_res):
    """Closed capsule mesh from a to b. Returns (vertices, faces, axial s)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    u = b - a
    length = np.linalg.norm(u)
    u = u / length
    # stable orthonormal frame
    ref = np.array([1.0, 0.0, 0.0]) if abs(u[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = np.cross(u, ref)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(u, e1)

    m = radial_res
    n_cap = max(2, radial_res // 4)
    theta = 2.0 * np.pi * np.arange(m) / m
    circle = np.outer(np.cos(theta), e1) + np.outer(np.sin(theta), e2)

    rings = []
    svals = []
    # bottom hemisphere: rings strictly between the pole (apex vertex) and rim
    for j in range(n_cap - 1, 0, -1):
        phi = 0.5 * np.pi * j / n_cap
        rings.append(a - u * radius * np.sin(phi) + circle * radius * np.cos(phi))
        svals.append(-radius * np.sin(phi))
    for i in range(n_segments + 1):
        s = length * i / n_segments
        rings.append(a + u * s + circle * radius)
        svals.append(s)
    for j in range(1, n_cap):
        phi = 0.5 * np.pi * j / n_cap
        rings.append(b + u * radius * np.sin(phi) + circle * radius * np.cos(phi))
        svals.append(length + radius * np.sin(phi))

    verts = [a - u * radius] + [p for ring in rings for p in ring] + [b + u * radius]
    s_axis = [-radius] + [s for s in svals for _ in range(m)] + [length + radius]
    verts = np.asarray(verts)
    s_axis = np.asarray(s_axis)

    faces = []
    bottom_apex = 0
    top_apex = len(verts) - 1
    first = 1
    for k in range(m):
        faces.append([bottom_apex, first + (k + 1) % m, first + k])
    n_rings = len(rings)
    for r in range(n_rings - 1):
        r0 = first + r * m
        r1 = first + (r + 1) * m
        for k in range(m):
            k2 = (k + 1) % m
            faces.append([r0 + k, r0 + k2, r1 + k])
            faces.append([r0 + k2, r1 + k2, r1 + k])
    last = first + (n_rings - 1) * m
    for k in range(m):
        faces.append([top_apex, last + k, last + (k + 1) % m])
    return verts, np.asarray(faces, dtype=np.int64), s_axis


JOINT_NAMES = [
    "pelvis", "spine", "neck",
    "l_shoulder", "l_elbow", "l_wrist",
    "r_shoulder", "r_elbow", "r_wrist",
    "l_hip", "l_knee", "l_ankle",
    "r_hip", "r_knee", "r_ankle",
]

_PARENTS = [-1, 0, 1, 1, 3, 4, 1, 6, 7, 0, 9, 10, 0, 12, 13]


def _proxy_skeleton():
    c45, s45 = np.cos(np.pi / 4), np.sin(np.pi / 4)
    c15, s15 = np.cos(np.deg2rad(15)), np.sin(np.deg2rad(15))
    J = {}
    J["pelvis"] = np.array([0.0, 0.95, 0.0])
    J["spine"] = np.array([0.0, 1.25, 0.0])
    J["neck"] = np.array([0.0, 1.50, 0.0])
    for sgn, side in ((1.0, "l"), (-1.0, "r")):
        sho = np.array([sgn * 0.16, 1.45, 0.0])
        arm_dir = np.array([sgn * c45, -s45, 0.0])
        J[f"{side}_shoulder"] = sho
        J[f"{side}_elbow"] = sho + 0.28 * arm_dir
        J[f"{side}_wrist"] = sho + (0.28 + 0.26) * arm_dir
        hip = np.array([sgn * 0.10, 0.90, 0.0])
        leg_dir = np.array([sgn * s15, -c15, 0.0])
        J[f"{side}_hip"] = hip
        J[f"{side}_knee"] = hip + 0.42 * leg_dir
        J[f"{side}_ankle"] = hip + 0.84 * leg_dir
    return J


@dataclass
class CapsuleSpec:
    name: str
    a: np.ndarray
    b: np.ndarray
    radius: float
    stations: list       # [(s_along_axis, joint_index)] weight plateaus
    is_limb: bool


def proxy_capsules():
    J = _proxy_skeleton()
    jid = {n: i for i, n in enumerate(JOINT_NAMES)}
    caps = [
        CapsuleSpec("torso", J["pelvis"], J["neck"], 0.13,
                    [(0.0, jid["pelvis"]), (0.30, jid["spine"])], False),
        CapsuleSpec("head", np.array([0.0, 1.54, 0.0]), np.array([0.0, 1.62, 0.0]), 0.10,
                    [(0.0, jid["neck"])], False),
    ]
    for side in ("l", "r"):
        sho, elb, wri = J[f"{side}_shoulder"], J[f"{side}_elbow"], J[f"{side}_wrist"]
        hip, kne, ank = J[f"{side}_hip"], J[f"{side}_knee"], J[f"{side}_ankle"]
        caps.append(CapsuleSpec(f"{side}_upper_arm", sho, elb, 0.05,
                                [(0.0, jid[f"{side}_shoulder"]), (0.28, jid[f"{side}_elbow"])], True))
        caps.append(CapsuleSpec(f"{side}_forearm", elb, wri, 0.045,
                                [(0.0, jid[f"{side}_elbow"]), (0.26, jid[f"{side}_wrist"])], True))
        caps.append(CapsuleSpec(f"{side}_thigh", hip, kne, 0.08,
                                [(0.0, jid[f"{side}_hip"]), (0.42, jid[f"{side}_knee"])], True))
        caps.append(CapsuleSpec(f"{side}_shin", kne, ank, 0.06,
                                [(0.0, jid[f"{side}_knee"]), (0.42, jid[f"{side}_ankle"])], True))
    return caps


BLEND_HALFWIDTH = 0.04


def _station_weights(s_axis, stations, n_joints, halfwidth=BLEND_HALFWIDTH):
    """Per-vertex weights: single-joint plateaus, smooth two-joint blend bands."""
    w = np.zeros((len(s_axis), n_joints))
    if len(stations) == 1:
        w[:, stations[0][1]] = 1.0
        return w
    bounds = [st[0] for st in stations[1:]]  # transition centers
    joints = [st[1] for st in stations]

    def complementary(t):
        # force the pair to sum to exactly 1.0 (recompute the smaller term
        # from the rounded larger one; exact by Sterbenz)
        a, b = t, 1.0 - t
        if b >= a:
            a = 1.0 - b
        else:
            b = 1.0 - a
        return a, b

    for i, s in enumerate(s_axis):
        seg = int(np.searchsorted(bounds, s))
        j_here = joints[seg]
        w[i, j_here] = 1.0
        # blend into the next plateau around each boundary
        if seg < len(bounds):
            b = bounds[seg]
            if s > b - halfwidth:
                t, rest = complementary(_smoothstep((s - (b - halfwidth)) / (2 * halfwidth)))
                w[i, j_here] = rest
                w[i, joints[seg + 1]] = t
        if seg > 0:
            b = bounds[seg - 1]
            if s < b + halfwidth:
                t, rest = complementary(_smoothstep((s - (b - halfwidth)) / (2 * halfwidth)))
                w[i, joints[seg - 1]] = rest
                w[i, j_here] = t
    return w


def builtin_capsule_proxy(n_segments_per_limb=8, radial_resolution=24):
    """License-free humanoid of 10 capsules over a 15-joint tree.

    One shape coefficient scales limb girth (radial displacement basis on the
    arm and leg capsules).
    """
    if n_segments_per_limb < 3 or radial_resolution < 3:
        raise ValueError("resolutions must be >= 3")
    J = _proxy_skeleton()
    joints_rest = np.stack([J[n] for n in JOINT_NAMES])
    caps = proxy_capsules()

    all_v, all_f, all_w, all_part, all_basis = [], [], [], [], []
    offset = 0
    for part, cap in enumerate(caps):
        v, f, s_axis = _capsule_mesh(cap.a, cap.b, cap.radius, n_segments_per_limb, radial_resolution)
        w = _station_weights(s_axis, cap.stations, len(JOINT_NAMES))
        all_v.append(v)
        all_f.append(f + offset)
        all_w.append(w)
        all_part.append(np.full(len(v), part, dtype=np.int32))
        if cap.is_limb:
            u = (cap.b - cap.a) / np.linalg.norm(cap.b - cap.a)
            length = np.linalg.norm(cap.b - cap.a)
            t = np.clip((v - cap.a) @ u, 0.0, length)
            radial = v - (cap.a + np.outer(t, u))
            # every capsule surface point sits at distance r from the axis
            # segment, so this basis scales the capsule radius exactly
            all_basis.append(radial)
        else:
            all_basis.append(np.zeros_like(v))
        offset += len(v)

    template = BodyTemplate(
        vertices=np.concatenate(all_v),
        faces=np.concatenate(all_f),
        skin_weights=np.concatenate(all_w),
        joints_rest=joints_rest,
        parents=np.asarray(_PARENTS, dtype=np.int32),
        shape_basis=np.concatenate(all_basis)[None, :, :],
        part_ids=np.concatenate(all_part),
        capsules=caps,
    )
    tri = template.vertices[template.faces]
    areas = 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
    if areas.min() <= 1e-12:
        raise AssertionError("built-in proxy produced a degenerate triangle")
    return template.validate()


def posed_capsule_segments(template, pose):
    """Analytic capsule axes in the posed space (for oracles and rasterization).

    Returns (a [C,3], b [C,3], radius [C]) with the shape coefficient applied.
    """
    if not template.capsules:
        raise ValueError("template has no analytic capsule info")
    tr = compute_joint_transforms(template, pose)
    girth = 1.0 + (pose.shape_coeffs[0] if len(pose.shape_coeffs) else 0.0)
    a_out, b_out, r_out = [], [], []
    for cap in template.capsules:
        j = cap.stations[0][1]
        jr = cap.stations[-1][1]
        # endpoints follow the joints that drive them
        a_out.append(tr.rotations[j] @ cap.a + tr.translations[j])
        b_out.append(tr.rotations[jr] @ cap.b + tr.translations[jr])
        r_out.append(cap.radius * (girth if cap.is_limb else 1.0))
    return np.asarray(a_out), np.asarray(b_out), np.asarray(r_out)


def capsule_union_sdf(points, seg_a, seg_b, radii):
    """Exact signed distance to a union of capsules (negative inside)."""
    p = np.asarray(points)[:, None, :]
    a = seg_a[None, :, :]
    d = (seg_b - seg_a)[None, :, :]
    denom = np.maximum(np.sum(d * d, axis=-1), 1e-18)
    t = np.clip(np.sum((p - a) * d, axis=-1) / denom, 0.0, 1.0)
    closest = a + t[..., None] * d
    dist = np.linalg.norm(p - closest, axis=-1) - radii[None, :]
    return dist.min(axis=1)


# ---------------------------------------------------------------------------
# body model file io

_BODY_DTYPES = {
    "vertices": "<f8",
    "faces": "<u4",
    "weights": "<f8",
    "joints": "<f8",
    "parents": "<i4",
    "shape_basis": "<f8",
}


def save_body_model(template, path):
    arrays = {
        "vertices": template.vertices.astype(_BODY_DTYPES["vertices"]),
        "faces": template.faces.astype(_BODY_DTYPES["faces"]),
        "weights": template.skin_weights.astype(_BODY_DTYPES["weights"]),
        "joints": template.joints_rest.astype(_BODY_DTYPES["joints"]),
        "parents": template.parents.astype(_BODY_DTYPES["parents"]),
    }
    if template.shape_basis is not None:
        arrays["shape_basis"] = template.shape_basis.astype(_BODY_DTYPES["shape_basis"])
    if template.part_ids is not None:
        arrays["part_ids"] = template.part_ids.astype("<i4")
    meta = {
        "kind": "body_model",
        "canonical_pose": PoseParams.identity(template.n_joints, template.n_shape).to_dict(),
    }
    if template.capsules:
        meta["capsules"] = [
            {
                "name": c.name,
                "a": np.asarray(c.a).tolist(),
                "b": np.asarray(c.b).tolist(),
                "radius": c.radius,
                "stations": [[float(s), int(j)] for s, j in c.stations],
                "is_limb": bool(c.is_limb),
            }
            for c in template.capsules
        ]
    save_nar(path, arrays, meta)


def load_body_model(path, n_shape=None, renormalize=False):
    """Load a body model container; rejects invalid skinning weights unless
    ``renormalize`` is set."""
    arrays, meta = load_nar(path)
    for key in ("vertices", "faces", "weights", "joints", "parents"):
        if key not in arrays:
            raise ValueError(f"{path}: missing array {key!r}")
    weights = arrays["weights"].astype(np.float64)
    if np.any(weights < 0):
        raise ValueError(f"{path}: negative skinning weight")
    sums = weights.sum(axis=1)
    if np.max(np.abs(sums - 1.0)) > 1e-4:
        if not renormalize:
            raise ValueError(
                f"{path}: skinning weight rows deviate from 1 by "
                f"{np.max(np.abs(sums - 1.0)):.2e}; pass renormalize=True to fix"
            )
        weights = weights / sums[:, None]
    basis = arrays.get("shape_basis")
    if basis is not None and n_shape is not None:
        basis = basis[:n_shape]
    capsules = [
        CapsuleSpec(
            name=c["name"],
            a=np.asarray(c["a"], dtype=np.float64),
            b=np.asarray(c["b"], dtype=np.float64),
            radius=float(c["radius"]),
            stations=[(float(s), int(j)) for s, j in c["stations"]],
            is_limb=bool(c["is_limb"]),
        )
        for c in meta.get("capsules", [])
    ]
    template = BodyTemplate(
        vertices=arrays["vertices"].astype(np.float64),
        faces=arrays["faces"].astype(np.int64),
        skin_weights=weights,
        joints_rest=arrays["joints"].astype(np.float64),
        parents=arrays["parents"].astype(np.int32),
        shape_basis=None if basis is None else basis.astype(np.float64),
        part_ids=None if "part_ids" not in arrays else arrays["part_ids"].astype(np.int32),
        capsules=capsules,
    )
    return template.validate()
